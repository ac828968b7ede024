//! Binary checkpoints: magic `AKTC`, a version word, the config text, the
//! training step, the sampler state and named little-endian `f64` tensors.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::Trainer;

pub const MAGIC: &[u8; 4] = b"AKTC";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub step: u64,
    pub rng: RngState,
    /// Completed optimizer updates.
    pub optim_t: u64,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

impl Checkpoint {
    /// Parameters and optimizer moments of `trainer`.
    pub fn from_trainer(config: String, trainer: &Trainer) -> Self {
        let mut tensors: Vec<(String, Tensor)> =
            trainer.store.iter().map(|(_, n, t)| (n.to_owned(), t.clone())).collect();
        let (m, v) = trainer.adam.moments();
        for (prefix, bufs) in [(M_PREFIX, m), (V_PREFIX, v)] {
            for ((_, name, t), buf) in trainer.store.iter().zip(bufs) {
                tensors.push((format!("{prefix}{name}"), Tensor::from_raw(t.shape().to_vec(), buf.clone())));
            }
        }
        Self {
            config,
            step: trainer.step,
            rng: RngState::capture(&trainer.rng),
            optim_t: trainer.adam.t,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.optim_t.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("missing AKTC magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.len()?;
        let config = r.string(n)?;
        let step = r.u64()?;
        let seed = r.array::<32>()?;
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.array()?);
        let optim_t = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.string(n)?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.len()).collect::<Result<_>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
            let bytes = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            config,
            step,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            optim_t,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(io_err(path))?)
    }

    fn find(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `store` from the checkpoint, requiring
    /// matching names and shapes.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_owned();
            let t = self
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t.clone())?;
        }
        let known = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(M_PREFIX) && !n.starts_with(V_PREFIX))
            .count();
        if known != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {known} parameters, model has {}",
                store.len()
            )));
        }
        Ok(())
    }

    /// Restores parameters, optimizer moments, step and sampler position.
    pub fn restore_trainer(&self, trainer: &mut Trainer) -> Result<()> {
        self.restore_params(&mut trainer.store)?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, name, _) in trainer.store.iter() {
            for (prefix, dst) in [(M_PREFIX, &mut m), (V_PREFIX, &mut v)] {
                let t = self
                    .find(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state for {name} missing")))?;
                dst.push(t.data().to_vec());
            }
        }
        trainer.adam.set_moments(self.optim_t, m, v)?;
        trainer.step = self.step;
        trainer.rng = self.rng.restore();
        Ok(())
    }
}
