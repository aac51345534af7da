//! Binary checkpoints.
//!
//! ```text
//! "SPCK" | u16 version
//! u32 len | run config JSON
//! u64 step
//! [u8; 32] rng seed | u64 rng stream | u128 rng word position
//! u32 parameter count, then per parameter in name order:
//!   u16 len | name | u64 adam step | u16 rank | u32 × rank dims
//!   f64 × n value | f64 × n first moment | f64 × n second moment
//! ```
//!
//! Values are stored as `f64` so a resumed run continues bit for bit.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::{ExperimentError, RunConfig};
use crate::optim::{ParamEntry, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Full state of a ChaCha generator.
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
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: RngState,
    pub params: ParamStore,
}

fn corrupt(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Checkpoint(msg.into())
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ExperimentError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.b.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ExperimentError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ExperimentError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| corrupt("parameter too large"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = self.config.to_json();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&p.step.to_le_bytes());
            out.extend_from_slice(&(p.shape.len() as u16).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for buf in [&p.value, &p.m, &p.v] {
                for x in buf.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ExperimentError> {
        let mut c = Cursor { b: bytes, pos: 0 };
        if &c.array::<4>()? != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u16::from_le_bytes(c.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(c.array()?) as usize;
        let text = std::str::from_utf8(c.take(len)?).map_err(|e| corrupt(e.to_string()))?;
        let config = RunConfig::from_json(text)?;
        let step = u64::from_le_bytes(c.array()?);
        let rng = RngState {
            seed: c.array()?,
            stream: u64::from_le_bytes(c.array()?),
            word_pos: u128::from_le_bytes(c.array()?),
        };
        let count = u32::from_le_bytes(c.array()?);
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = usize::from(u16::from_le_bytes(c.array()?));
            let name = std::str::from_utf8(c.take(len)?).map_err(|e| corrupt(e.to_string()))?.to_string();
            let adam_step = u64::from_le_bytes(c.array()?);
            let rank = usize::from(u16::from_le_bytes(c.array()?));
            let shape = (0..rank)
                .map(|_| Ok(u32::from_le_bytes(c.array()?) as usize))
                .collect::<Result<Vec<_>, ExperimentError>>()?;
            let n = shape.iter().product();
            let entry = ParamEntry {
                shape,
                value: c.f64s(n)?,
                m: c.f64s(n)?,
                v: c.f64s(n)?,
                step: adam_step,
            };
            params.insert_entry(name, entry).map_err(|e| corrupt(e.to_string()))?;
        }
        if c.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            config,
            step,
            rng,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ExperimentError> {
        fs::write(path, self.to_bytes()).map_err(|e| ExperimentError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let bytes = fs::read(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn small() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", vec![2, 3], (0..6).map(|i| i as f64 * 0.1).collect()).unwrap();
        params.insert("b", vec![1], vec![-1.5]).unwrap();
        params.get_mut("b").unwrap().step = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(1);
        rng.next_u64();
        Checkpoint {
            config: RunConfig::default(),
            step: 42,
            rng: RngState::capture(&rng),
            params,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = small();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(4);
        for _ in 0..13 {
            rng.next_u32();
        }
        let mut resumed = RngState::capture(&rng).restore();
        let a: Vec<u64> = (0..5).map(|_| rng.next_u64()).collect();
        let b: Vec<u64> = (0..5).map(|_| resumed.next_u64()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_checkpoint_is_an_error() {
        let bytes = small().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
    }
}
