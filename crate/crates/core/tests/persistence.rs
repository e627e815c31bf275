use std::fs;

use embodied_mae::checkpoint::Checkpoint;
use embodied_mae::config::Config;
use embodied_mae::dataset::{read_dataset, write_dataset, Manifest, MANIFEST_FILE, SHARD_FILE};
use embodied_mae::synthdata::{generate, SceneConfig};
use embodied_mae::trainer::Trainer;
use embodied_mae::Error;

fn small_scene() -> SceneConfig {
    SceneConfig {
        height: 24,
        width: 32,
        cloud_points: 128,
        ..SceneConfig::default()
    }
}

#[test]
fn dataset_round_trip_and_determinism() {
    let samples = generate(3, 11, &small_scene()).unwrap();
    assert_eq!(samples, generate(3, 11, &small_scene()).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&samples, dir.path()).unwrap();
    assert_eq!(manifest.records.len(), 3);
    let reader = read_dataset(dir.path()).unwrap();
    assert_eq!(reader.read_all().unwrap(), samples);
    for s in &samples {
        let i = reader.position(s.id).unwrap();
        assert_eq!(&reader.get(i).unwrap(), s);
        assert_eq!(s.cloud.len(), 128);
        assert!(s.depth.data().iter().all(|d| *d >= 0.0 && d.is_finite()));
        assert!(s.rgb.data().iter().all(|c| (0.0..=1.0).contains(c)));
    }
    let again = tempfile::tempdir().unwrap();
    write_dataset(&samples, again.path()).unwrap();
    assert_eq!(
        fs::read(dir.path().join(SHARD_FILE)).unwrap(),
        fs::read(again.path().join(SHARD_FILE)).unwrap()
    );
}

#[test]
fn corrupted_record_names_its_id() {
    let samples = generate(2, 5, &small_scene()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&samples, dir.path()).unwrap();
    let shard = dir.path().join(SHARD_FILE);
    let mut bytes = fs::read(&shard).unwrap();
    let rec = &manifest.records[1];
    bytes[(rec.offset + rec.length / 2) as usize] ^= 0x40;
    fs::write(&shard, bytes).unwrap();
    let reader = read_dataset(dir.path()).unwrap();
    assert!(reader.get(0).is_ok());
    match reader.get(1) {
        Err(Error::Format { record, .. }) => assert!(record.contains(&rec.id.to_string()), "{record}"),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn truncated_shard_is_rejected() {
    let samples = generate(2, 5, &small_scene()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&samples, dir.path()).unwrap();
    let shard = dir.path().join(SHARD_FILE);
    let bytes = fs::read(&shard).unwrap();
    fs::write(&shard, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn manifest_is_json() {
    let samples = generate(1, 2, &small_scene()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = write_dataset(&samples, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    let parsed: Manifest = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, written);
}

#[test]
fn trainer_checkpoint_survives_disk() {
    let cfg = Config::micro();
    let samples = generate(2, 3, &cfg.scene()).unwrap();
    let mut t = Trainer::new(cfg, samples, None).unwrap();
    for _ in 0..3 {
        t.step().unwrap();
    }
    let ckpt = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.step, 3);
    assert_eq!(Config::from_text(&back.config).unwrap().to_text(), back.config);
}

#[test]
fn config_text_round_trips() {
    let mut cfg = Config::micro();
    cfg.seed = 42;
    cfg.train.budget = None;
    cfg.distill.teacher = Some("runs/teacher/checkpoint.bin".into());
    let text = cfg.to_text();
    let back = Config::from_text(&text).unwrap();
    assert_eq!(back.to_text(), text);
    assert_eq!(back.digest(), cfg.digest());
}
