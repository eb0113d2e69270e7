//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! magic `PCDFCKPT`, u32 version, u64 n_variables, u64 epoch,
//! rng (32-byte seed, u64 stream, u128 word position),
//! u64 config length + UTF-8 config text,
//! u64 tensor count, then per tensor: u64 name length, name bytes, u64 rank,
//! rank × u64 dims, f64 data; finally u64 optimizer buffer count and per
//! buffer u64 length + f64 data.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::RmsPropState;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PCDFCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub n_variables: usize,
    pub epoch: usize,
    pub rng: RngState,
    pub params: ParamStore,
    pub optimizer: RmsPropState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_u64(&mut b, self.n_variables as u64);
        put_u64(&mut b, self.epoch as u64);
        b.extend_from_slice(&self.rng.seed);
        put_u64(&mut b, self.rng.stream);
        b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u64(&mut b, self.config.len() as u64);
        b.extend_from_slice(self.config.as_bytes());
        put_u64(&mut b, self.params.len() as u64);
        for (name, t) in self.params.iter() {
            put_u64(&mut b, name.len() as u64);
            b.extend_from_slice(name.as_bytes());
            put_u64(&mut b, t.shape.len() as u64);
            for &d in &t.shape {
                put_u64(&mut b, d as u64);
            }
            t.data.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
        }
        put_u64(&mut b, self.optimizer.square_avg.len() as u64);
        for buf in &self.optimizer.square_avg {
            put_u64(&mut b, buf.len() as u64);
            buf.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n_variables = r.u64()? as usize;
        let epoch = r.u64()? as usize;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let clen = r.len()?;
        let config = String::from_utf8(r.take(clen)?.to_vec())
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let n_tensors = r.len()?;
        let mut params = ParamStore::new();
        for _ in 0..n_tensors {
            let nlen = r.len()?;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.len()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r.f64s(n)?;
            params.add(name, Tensor::new(shape, data)?);
        }
        let n_bufs = r.len()?;
        let mut square_avg = Vec::with_capacity(n_bufs);
        for _ in 0..n_bufs {
            let n = r.len()?;
            square_avg.push(r.f64s(n)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            n_variables,
            epoch,
            rng: RngState { seed, stream, word_pos },
            params,
            optimizer: RmsPropState { square_avg },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Copies stored tensors into `store` by name, checking shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in self.params.iter() {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            let dst = store.get_mut(id);
            if dst.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} does not match model {:?}",
                    t.shape, dst.shape
                )));
            }
            dst.data.copy_from_slice(&t.data);
        }
        Ok(())
    }
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > self.b.len() as u64 {
            return Err(Error::Checkpoint(format!("implausible length {v}")));
        }
        Ok(v as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
