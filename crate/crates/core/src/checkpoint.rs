//! Versioned binary checkpoint.
//!
//! Layout (little-endian): magic `EMAECKPT`, `u32` version, 32-byte SHA-256
//! of the config text, `u32` length + config text, `u64` step, `u64` Adam
//! step, RNG state (32-byte seed, `u64` stream, `u128` word position),
//! `u32` tensor count, the tensor table (`u16` name length, name, `u8`
//! dtype, `u8` rank, `u64` dims, `u64` payload offset) and the raw payload.
//! Tensors are named `param/…`, `adam.m/…` and `adam.v/…`.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EMAECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: String,
    pub step: u64,
    pub params: ParamStore<T>,
    pub adam: AdamState<T>,
    pub rng: RngState,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::format("checkpoint", msg)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(fmt_err("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
}

impl<T: Scalar> Checkpoint<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let names = self.params.names();
        let mut out: Vec<(String, &Tensor<T>)> = Vec::with_capacity(3 * names.len());
        out.extend(names.iter().zip(self.params.tensors()).map(|(n, t)| (format!("{PARAM}{n}"), t)));
        out.extend(names.iter().zip(&self.adam.m).map(|(n, t)| (format!("{MOMENT1}{n}"), t)));
        out.extend(names.iter().zip(&self.adam.v).map(|(n, t)| (format!("{MOMENT2}{n}"), t)));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&Sha256::digest(self.config.as_bytes()));
        b.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.adam.step.to_le_bytes());
        b.extend_from_slice(&self.rng.seed);
        b.extend_from_slice(&self.rng.stream.to_le_bytes());
        b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &tensors {
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(T::DTYPE.code());
            b.push(2);
            b.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            b.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            b.extend_from_slice(&offset.to_le_bytes());
            offset += (t.data().len() * T::DTYPE.size()) as u64;
        }
        for (_, t) in &tensors {
            for v in t.data() {
                v.write_le(&mut b);
            }
        }
        b
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(fmt_err("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let digest = r.take(32)?.to_vec();
        let len = r.u32()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| fmt_err("config text is not UTF-8"))?;
        if Sha256::digest(config.as_bytes()).as_slice() != digest.as_slice() {
            return Err(fmt_err("config digest mismatch"));
        }
        let step = r.u64()?;
        let adam_step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| fmt_err("tensor name is not UTF-8"))?;
            let dtype = DType::from_code(r.u8()?)
                .ok_or_else(|| Error::format(&name, "unknown dtype"))?;
            if dtype != T::DTYPE {
                return Err(Error::format(&name, format!("stored as {dtype:?}, expected {:?}", T::DTYPE)));
            }
            let rank = r.u8()?;
            if rank != 2 {
                return Err(Error::format(&name, format!("unsupported rank {rank}")));
            }
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let offset = r.u64()? as usize;
            table.push((name, rows, cols, offset));
        }
        let payload = &buf[r.pos..];
        let size = T::DTYPE.size();
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut end = 0usize;
        for (name, rows, cols, offset) in table {
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(size))
                .ok_or_else(|| Error::format(&name, "tensor size overflows"))?;
            let bytes = offset
                .checked_add(n)
                .and_then(|e| payload.get(offset..e))
                .ok_or_else(|| Error::format(&name, "payload extends past end of file"))?;
            end = end.max(offset + n);
            let data: Vec<T> = bytes.chunks_exact(size).map(T::read_le).collect();
            let t = Tensor::from_vec(rows, cols, data);
            if let Some(p) = name.strip_prefix(PARAM) {
                params.insert(p, t);
            } else if let Some(p) = name.strip_prefix(MOMENT1) {
                m.push((p.to_string(), t));
            } else if let Some(p) = name.strip_prefix(MOMENT2) {
                v.push((p.to_string(), t));
            } else {
                return Err(Error::format(&name, "unknown tensor group"));
            }
        }
        if end != payload.len() {
            return Err(fmt_err("trailing bytes after payload"));
        }
        let order = |moments: Vec<(String, Tensor<T>)>, what: &str| -> Result<Vec<Tensor<T>>> {
            if moments.len() != params.len() {
                return Err(fmt_err(format!("{} {what} tensors for {} parameters", moments.len(), params.len())));
            }
            moments
                .into_iter()
                .zip(params.iter())
                .map(|((n, t), (pn, pt))| {
                    if n != pn || (t.rows(), t.cols()) != (pt.rows(), pt.cols()) {
                        Err(Error::format(&n, format!("{what} does not match parameter `{pn}`")))
                    } else {
                        Ok(t)
                    }
                })
                .collect()
        };
        let m = order(m, "first-moment")?;
        let v = order(v, "second-moment")?;
        Ok(Self {
            config,
            step,
            params,
            adam: AdamState { step: adam_step, m, v },
            rng: RngState { seed, stream, word_pos },
        })
    }

    /// Writes to a temporary file next to `path` and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
