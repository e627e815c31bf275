//! On-disk dataset: one binary shard plus a JSON manifest.
//!
//! Shard layout (little-endian): magic `EMAESHRD`, `u32` version, `u64`
//! record count, then per record a `u64` id followed by three `f32` arrays
//! (rgb `3×H×W`, depth `1×H×W`, cloud `M×3`), each prefixed by a `u32` rank
//! and `u32` dimensions.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PointCloud};
use crate::synthdata::Sample;
use crate::tokenizer::{DepthMap, RgbImage};

pub const SHARD_MAGIC: &[u8; 8] = b"EMAESHRD";
pub const SHARD_VERSION: u32 = 1;
pub const SHARD_FILE: &str = "samples.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub id: u64,
    pub offset: u64,
    pub length: u64,
    pub digest: String,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub shard: String,
    pub shard_digest: String,
    pub records: Vec<RecordEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn put_array(buf: &mut Vec<u8>, dims: &[usize], data: impl Iterator<Item = f32>) {
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_record(s: &Sample) -> Vec<u8> {
    let (h, w) = (s.rgb.height(), s.rgb.width());
    let mut buf = Vec::new();
    buf.extend_from_slice(&s.id.to_le_bytes());
    put_array(&mut buf, &[3, h, w], s.rgb.data().iter().copied());
    put_array(
        &mut buf,
        &[1, s.depth.height(), s.depth.width()],
        s.depth.data().iter().copied(),
    );
    put_array(
        &mut buf,
        &[s.cloud.len(), 3],
        s.cloud.points().iter().flat_map(|p| p.map(|c| c as f32)),
    );
    buf
}

/// Writes `samples` to `dir` (created if needed) and returns the manifest.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut shard = Vec::new();
    shard.extend_from_slice(SHARD_MAGIC);
    shard.extend_from_slice(&SHARD_VERSION.to_le_bytes());
    shard.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let rec = encode_record(s);
        records.push(RecordEntry {
            id: s.id,
            offset: shard.len() as u64,
            length: rec.len() as u64,
            digest: sha256_hex(&rec),
            intrinsics: s.intr,
        });
        shard.extend_from_slice(&rec);
    }
    let manifest = Manifest {
        version: SHARD_VERSION,
        shard: SHARD_FILE.to_string(),
        shard_digest: sha256_hex(&shard),
        records,
    };
    fs::write(dir.join(SHARD_FILE), &shard)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    record: String,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(&self.record, "unexpected end of record"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array(&mut self, rank: usize) -> Result<(Vec<usize>, Vec<f32>)> {
        let r = self.u32()? as usize;
        if r != rank {
            return Err(Error::format(&self.record, format!("expected rank {rank}, found {r}")));
        }
        let dims: Vec<usize> = (0..r).map(|_| self.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(&self.record, "array size overflows"))?;
        let data = self
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((dims, data))
    }
}

fn decode_record(bytes: &[u8], entry: &RecordEntry) -> Result<Sample> {
    let name = entry.id.to_string();
    let bad = |m: String| Error::format(&name, m);
    let mut c = Cursor {
        buf: bytes,
        pos: 0,
        record: name.clone(),
    };
    let id = c.u64()?;
    if id != entry.id {
        return Err(bad(format!("record holds id {id}")));
    }
    let (rd, rgb) = c.array(3)?;
    let (dd, depth) = c.array(3)?;
    let (cd, cloud) = c.array(2)?;
    if c.pos != bytes.len() {
        return Err(bad("trailing bytes after record".into()));
    }
    if rd[0] != 3 || dd[0] != 1 || cd[1] != 3 {
        return Err(bad(format!("unexpected array shapes {rd:?} {dd:?} {cd:?}")));
    }
    let intr = entry.intrinsics;
    if (rd[1], rd[2]) != (intr.height, intr.width) || (dd[1], dd[2]) != (rd[1], rd[2]) {
        return Err(bad("image shape disagrees with intrinsics".into()));
    }
    let wrap = |e: Error| bad(e.to_string());
    let points = cloud
        .chunks_exact(3)
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    Ok(Sample {
        id,
        rgb: RgbImage::new(rd[1], rd[2], rgb).map_err(wrap)?,
        depth: DepthMap::new(dd[1], dd[2], depth).map_err(wrap)?,
        cloud: PointCloud::new(points).map_err(wrap)?,
        intr,
    })
}

/// Dataset opened for reading; yields samples in manifest order.
#[derive(Debug)]
pub struct DatasetReader {
    pub manifest: Manifest,
    shard: Vec<u8>,
    next: usize,
}

impl DatasetReader {
    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    /// Decodes the `i`-th record of the manifest.
    pub fn get(&self, i: usize) -> Result<Sample> {
        let entry = self
            .manifest
            .records
            .get(i)
            .ok_or_else(|| Error::Argument(format!("record index {i} out of range")))?;
        let start = entry.offset as usize;
        let end = start.saturating_add(entry.length as usize);
        if start < HEADER_LEN || end > self.shard.len() {
            return Err(Error::format(entry.id.to_string(), "record extends past end of shard"));
        }
        let bytes = &self.shard[start..end];
        if sha256_hex(bytes) != entry.digest {
            return Err(Error::format(entry.id.to_string(), "digest mismatch"));
        }
        decode_record(bytes, entry)
    }

    /// Position in the manifest of the record with this id.
    pub fn position(&self, id: u64) -> Option<usize> {
        self.manifest.records.iter().position(|r| r.id == id)
    }

    pub fn read_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

impl Iterator for DatasetReader {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.len() {
            return None;
        }
        self.next += 1;
        Some(self.get(self.next - 1))
    }
}

/// Opens a dataset written by [`write_dataset`], validating the header and
/// record table against the shard.
pub fn read_dataset(dir: &Path) -> Result<DatasetReader> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
        .map_err(|e| Error::format(MANIFEST_FILE, e.to_string()))?;
    if manifest.version != SHARD_VERSION {
        return Err(Error::format(
            MANIFEST_FILE,
            format!("unsupported version {}", manifest.version),
        ));
    }
    let shard_path: PathBuf = dir.join(&manifest.shard);
    let shard = fs::read(&shard_path)?;
    let header = "header";
    if shard.len() < HEADER_LEN || &shard[..8] != SHARD_MAGIC {
        return Err(Error::format(header, "not a dataset shard"));
    }
    let version = u32::from_le_bytes(shard[8..12].try_into().unwrap());
    if version != SHARD_VERSION {
        return Err(Error::format(header, format!("unsupported shard version {version}")));
    }
    let count = u64::from_le_bytes(shard[12..20].try_into().unwrap());
    if count != manifest.records.len() as u64 {
        return Err(Error::format(
            header,
            format!("shard holds {count} records, manifest lists {}", manifest.records.len()),
        ));
    }
    for r in &manifest.records {
        if r.offset.saturating_add(r.length) > shard.len() as u64 {
            return Err(Error::format(r.id.to_string(), "record extends past end of shard"));
        }
    }
    Ok(DatasetReader {
        manifest,
        shard,
        next: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, SceneConfig};

    fn small() -> Vec<Sample> {
        let cfg = SceneConfig {
            height: 16,
            width: 16,
            cloud_points: 32,
            ..SceneConfig::default()
        };
        generate(3, 11, &cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let samples = small();
        let m = write_dataset(&samples, dir.path()).unwrap();
        assert_eq!(m.records.len(), 3);
        let back: Vec<Sample> = read_dataset(dir.path()).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn flipped_byte_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&small(), dir.path()).unwrap();
        let path = dir.path().join(SHARD_FILE);
        let mut bytes = fs::read(&path).unwrap();
        let at = m.records[1].offset as usize + 40;
        bytes[at] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        let r = read_dataset(dir.path()).unwrap();
        assert!(r.get(0).is_ok());
        match r.get(1) {
            Err(Error::Format { record, .. }) => assert_eq!(record, "1"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&small(), dir.path()).unwrap();
        let path = dir.path().join(SHARD_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
    }
}
