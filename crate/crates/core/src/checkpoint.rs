//! Binary checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "TDCK" | version u16 | flags u8 (bit 0: optimizer state, bit 1: rig range) | reserved u8
//! config hash [32] | epoch u64 | step u64 | best_val f64 (NaN if unset)
//! rng seed [32] | rng stream u64 | rng word position u128
//! config json: u32 length + bytes
//! tensors: u32 count, then per tensor: u16 name length + name, rows u32, cols u32, f64 data
//! [rig range: u32 width, width f64 minima, width f64 maxima]
//! [optimizer: t u64, lr f64, first moments, second moments (rows u32, cols u32, f64 data each)]
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::ModelConfig;
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::nn::{Adam, Mat, ParamStore};
use crate::speech::EncoderConfig;

const MAGIC: &[u8; 4] = b"TDCK";
const VERSION: u16 = 1;
const FLAG_OPTIMIZER: u8 = 1;
const FLAG_RIG_RANGE: u8 = 2;

/// Everything about a run that a checkpoint's parameters depend on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub encoder: EncoderConfig,
    /// Visual frame rate the model was trained at.
    pub fps: f64,
    /// Training subjects in style-index order.
    #[serde(default)]
    pub style_subjects: Vec<String>,
}

impl CheckpointConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_json().as_bytes()).into()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
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
pub struct OptimizerState {
    pub t: u64,
    pub lr: f64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl OptimizerState {
    pub fn capture(opt: &Adam) -> Self {
        let (m, v) = opt.moments();
        Self {
            t: opt.t,
            lr: opt.lr,
            m: m.to_vec(),
            v: v.to_vec(),
        }
    }

    pub fn restore(&self, store: &ParamStore) -> Result<Adam> {
        let shapes: Vec<_> = store.iter().map(|(_, _, v)| v.dim()).collect();
        let ok = |ms: &[Mat]| ms.len() == shapes.len() && ms.iter().zip(&shapes).all(|(m, s)| m.dim() == *s);
        if !ok(&self.m) || !ok(&self.v) {
            return Err(Error::Checkpoint("optimizer moments do not match the parameters".into()));
        }
        let mut adam = Adam::new(self.lr, store);
        adam.t = self.t;
        adam.set_moments(self.m.clone(), self.v.clone());
        Ok(adam)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    config_json: String,
    pub epoch: u64,
    pub step: u64,
    pub best_val: Option<f64>,
    pub rng: RngState,
    pub params: ParamStore,
    /// Per-channel observed minimum and maximum of the rig training data.
    pub rig_range: Option<(Vec<f64>, Vec<f64>)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(config: &CheckpointConfig, params: ParamStore, rng: RngState) -> Self {
        Self {
            config_json: config.to_json(),
            epoch: 0,
            step: 0,
            best_val: None,
            rng,
            params,
            rig_range: None,
            optimizer: None,
        }
    }

    pub fn config(&self) -> Result<CheckpointConfig> {
        serde_json::from_str(&self.config_json)
            .map_err(|e| Error::Checkpoint(format!("stored config does not parse: {e}")))
    }

    pub fn config_hash(&self) -> [u8; 32] {
        Sha256::digest(self.config_json.as_bytes()).into()
    }

    /// Rejects checkpoints produced under a different configuration.
    pub fn ensure_config(&self, expected: &CheckpointConfig) -> Result<()> {
        if self.config_hash() != expected.hash() {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {}, expected {}",
                hex(&self.config_hash()),
                hex(&expected.hash())
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        let mut flags = 0u8;
        if self.optimizer.is_some() {
            flags |= FLAG_OPTIMIZER;
        }
        if self.rig_range.is_some() {
            flags |= FLAG_RIG_RANGE;
        }
        w.push(flags);
        w.push(0);
        w.extend_from_slice(&self.config_hash());
        w.extend_from_slice(&self.epoch.to_le_bytes());
        w.extend_from_slice(&self.step.to_le_bytes());
        w.extend_from_slice(&self.best_val.unwrap_or(f64::NAN).to_le_bytes());
        w.extend_from_slice(&self.rng.seed);
        w.extend_from_slice(&self.rng.stream.to_le_bytes());
        w.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        w.extend_from_slice(self.config_json.as_bytes());
        w.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, value) in self.params.iter() {
            w.extend_from_slice(&(name.len() as u16).to_le_bytes());
            w.extend_from_slice(name.as_bytes());
            put_mat(&mut w, value);
        }
        if let Some((lo, hi)) = &self.rig_range {
            w.extend_from_slice(&(lo.len() as u32).to_le_bytes());
            for x in lo.iter().chain(hi) {
                w.extend_from_slice(&x.to_le_bytes());
            }
        }
        if let Some(opt) = &self.optimizer {
            w.extend_from_slice(&opt.t.to_le_bytes());
            w.extend_from_slice(&opt.lr.to_le_bytes());
            for m in opt.m.iter().chain(&opt.v) {
                put_mat(&mut w, m);
            }
        }
        w
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let flags = r.u8()?;
        r.u8()?;
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let epoch = r.u64()?;
        let step = r.u64()?;
        let best = r.f64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let len = r.u32()? as usize;
        let config_json = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        if <[u8; 32]>::from(Sha256::digest(config_json.as_bytes())) != hash {
            return Err(Error::Checkpoint("stored config does not match its hash".into()));
        }
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            params.insert(name, r.mat()?);
        }
        let rig_range = if flags & FLAG_RIG_RANGE != 0 {
            let d = r.u32()? as usize;
            let lo = (0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let hi = (0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            Some((lo, hi))
        } else {
            None
        };
        let optimizer = if flags & FLAG_OPTIMIZER != 0 {
            let t = r.u64()?;
            let lr = r.f64()?;
            let m = (0..count).map(|_| r.mat()).collect::<Result<Vec<_>>>()?;
            let v = (0..count).map(|_| r.mat()).collect::<Result<Vec<_>>>()?;
            Some(OptimizerState { t, lr, m, v })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config_json,
            epoch,
            step,
            best_val: (!best.is_nan()).then_some(best),
            rng: RngState { seed, stream, word_pos },
            params,
            rig_range,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn put_mat(w: &mut Vec<u8>, m: &Mat) {
    w.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    w.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for x in m.iter() {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn mat(&mut self) -> Result<Mat> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n * 8 <= self.buf.len() - self.pos)
            .ok_or_else(|| Error::Checkpoint("truncated tensor".into()))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Mat::from_shape_vec((rows, cols), data).expect("length checked"))
    }
}
