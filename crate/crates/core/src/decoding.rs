//! Guided greedy decoding over two recorded logit streams.
//!
//! Two combination rules are offered. `Additive` computes
//! `standard + α·guidance`, so `α = 0` is plain decoding of the standard
//! branch. `Convex` computes `α·standard + (1 − α)·guidance`, for which
//! `α = 1` is plain decoding instead. The two disagree on what `α` means;
//! `Additive` is the default.
//!
//! Fixture files (`LOGITS01`), little-endian:
//!
//! ```text
//! 0..8    b"LOGITS01"
//! 8..20   u32 V, u32 T, u32 eos_token
//! 20..    T·V f32
//! ```

use std::collections::HashMap;
use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOGITS_MAGIC: &[u8; 8] = b"LOGITS01";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuidanceMode {
    #[default]
    Additive,
    Convex,
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "additive" => Ok(GuidanceMode::Additive),
            "convex" => Ok(GuidanceMode::Convex),
            _ => Err(Error::InvalidConfig(format!("unknown guidance mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub alpha: f64,
    pub mode: GuidanceMode,
    pub max_new_tokens: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            mode: GuidanceMode::Additive,
            max_new_tokens: 64,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!("alpha {} must be >= 0", self.alpha)));
        }
        if self.mode == GuidanceMode::Convex && self.alpha > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "convex mode needs alpha in [0,1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Standard,
    Guidance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogitStream {
    pub vocab_size: usize,
    pub steps: Vec<Vec<f32>>,
    pub eos_token: usize,
    pub provenance: Branch,
}

impl LogitStream {
    pub fn new(steps: Vec<Vec<f32>>, vocab_size: usize, eos_token: usize, provenance: Branch) -> Result<Self> {
        if vocab_size == 0 || eos_token >= vocab_size {
            return Err(Error::InvalidConfig(format!(
                "eos token {eos_token} outside vocabulary of {vocab_size}"
            )));
        }
        if let Some(bad) = steps.iter().find(|s| s.len() != vocab_size) {
            return Err(Error::LengthMismatch(bad.len(), vocab_size));
        }
        Ok(Self {
            vocab_size,
            steps,
            eos_token,
            provenance,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.vocab_size * self.steps.len());
        out.extend_from_slice(LOGITS_MAGIC);
        for v in [self.vocab_size, self.steps.len(), self.eos_token] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for s in &self.steps {
            for x in s {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], provenance: Branch, path: &Path) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != LOGITS_MAGIC {
            return Err(Error::BadMagic { path: path.into() });
        }
        if bytes.len() < 20 {
            return Err(Error::Truncated {
                path: path.into(),
                expected: 20,
                found: bytes.len() as u64,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let (v, t, eos) = (word(0), word(1), word(2));
        let expected = 20 + 4 * v * t;
        if bytes.len() != expected {
            return Err(Error::Truncated {
                path: path.into(),
                expected: expected as u64,
                found: bytes.len() as u64,
            });
        }
        let values: Vec<f32> = bytes[20..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let steps = if v == 0 {
            vec![]
        } else {
            values.chunks_exact(v).map(<[f32]>::to_vec).collect()
        };
        Self::new(steps, v, eos, provenance)
    }
}

pub fn write_logits(stream: &LogitStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, stream.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_logits(path: impl AsRef<Path>, provenance: Branch) -> Result<LogitStream> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    LogitStream::from_bytes(&bytes, provenance, path)
}

pub fn combine_logits(standard: &[f32], guidance: &[f32], cfg: &GuidanceConfig) -> Result<Vec<f32>> {
    if standard.len() != guidance.len() {
        return Err(Error::LengthMismatch(standard.len(), guidance.len()));
    }
    let a = cfg.alpha;
    Ok(standard
        .iter()
        .zip(guidance)
        .map(|(&s, &g)| match cfg.mode {
            GuidanceMode::Additive => (s as f64 + a * g as f64) as f32,
            GuidanceMode::Convex => (a * s as f64 + (1.0 - a) * g as f64) as f32,
        })
        .collect())
}

/// First index of the maximum.
pub fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
        .0
}

/// Source of next-token logits given the tokens emitted so far.
pub trait LogitSource {
    fn vocab_size(&self) -> usize;
    fn eos_token(&self) -> usize;
    fn next_logits(&self, step: usize, prefix: &[usize]) -> Option<&[f32]>;
}

impl LogitSource for LogitStream {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn eos_token(&self) -> usize {
        self.eos_token
    }

    fn next_logits(&self, step: usize, _prefix: &[usize]) -> Option<&[f32]> {
        self.steps.get(step).map(Vec::as_slice)
    }
}

/// Logits recorded per emitted prefix, for fixtures where a branch reacts to
/// the text generated so far.
#[derive(Clone, Debug, Default)]
pub struct PrefixKeyedLogits {
    pub vocab_size: usize,
    pub eos_token: usize,
    table: HashMap<u64, Vec<f32>>,
}

impl PrefixKeyedLogits {
    pub fn new(vocab_size: usize, eos_token: usize) -> Self {
        Self {
            vocab_size,
            eos_token,
            table: HashMap::new(),
        }
    }

    pub fn prefix_hash(prefix: &[usize]) -> u64 {
        let mut h = DefaultHasher::new();
        prefix.hash(&mut h);
        h.finish()
    }

    pub fn insert(&mut self, prefix: &[usize], logits: Vec<f32>) -> Result<()> {
        if logits.len() != self.vocab_size {
            return Err(Error::LengthMismatch(logits.len(), self.vocab_size));
        }
        self.table.insert(Self::prefix_hash(prefix), logits);
        Ok(())
    }
}

impl LogitSource for PrefixKeyedLogits {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn eos_token(&self) -> usize {
        self.eos_token
    }

    fn next_logits(&self, _step: usize, prefix: &[usize]) -> Option<&[f32]> {
        self.table.get(&Self::prefix_hash(prefix)).map(Vec::as_slice)
    }
}

/// Greedy decoding on the combined logits. Stops at the standard branch's
/// eos token (not emitted) or after `max_new_tokens`.
pub fn greedy_decode<S, G>(standard: &S, guidance: &G, cfg: &GuidanceConfig) -> Result<Vec<usize>>
where
    S: LogitSource + ?Sized,
    G: LogitSource + ?Sized,
{
    cfg.validate()?;
    if standard.vocab_size() != guidance.vocab_size() {
        return Err(Error::LengthMismatch(standard.vocab_size(), guidance.vocab_size()));
    }
    let eos = standard.eos_token();
    let mut out = Vec::new();
    for step in 0..cfg.max_new_tokens {
        let (Some(s), Some(g)) = (standard.next_logits(step, &out), guidance.next_logits(step, &out)) else {
            return Err(Error::StreamUnderrun(step));
        };
        let token = argmax(&combine_logits(s, g, cfg)?);
        if token == eos {
            break;
        }
        out.push(token);
    }
    Ok(out)
}
