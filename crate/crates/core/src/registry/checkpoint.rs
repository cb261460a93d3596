//! Binary checkpoint format.
//!
//! All integers and reals are little-endian:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `ALSK`                   |
//! | 4      | 4    | format version (`u32`, = 1)    |
//! | 8      | 8    | parameter count (`u64`)        |
//! | 16     | 4    | epoch (`u32`)                  |
//! | 20     | 1    | g kind code (`u8`)             |
//! | 21     | 8    | validation score (`f64`)       |
//! | 29     | 4·n  | parameters (`f32` each)        |

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ALSK";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 29;

/// Validation metric used to rank checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GKind {
    Accuracy,
    Nll,
    MiniBleu,
}

impl GKind {
    pub fn code(self) -> u8 {
        match self {
            GKind::Accuracy => 0,
            GKind::Nll => 1,
            GKind::MiniBleu => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(GKind::Accuracy),
            1 => Some(GKind::Nll),
            2 => Some(GKind::MiniBleu),
            _ => None,
        }
    }

    /// Scores are maximized; losses (NLL) are minimized.
    pub fn higher_is_better(self) -> bool {
        !matches!(self, GKind::Nll)
    }

    pub fn name(self) -> &'static str {
        match self {
            GKind::Accuracy => "accuracy",
            GKind::Nll => "nll",
            GKind::MiniBleu => "mini_bleu",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [GKind::Accuracy, GKind::Nll, GKind::MiniBleu]
            .into_iter()
            .find(|g| g.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u32,
    pub params: Vec<f32>,
    pub val_score: f64,
    pub g_kind: GKind,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.params.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.push(self.g_kind.code());
        out.extend_from_slice(&self.val_score.to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    /// `origin` only labels errors.
    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: origin.to_path_buf(),
            reason,
        };
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[0..4] != MAGIC {
            return Err(bad("bad magic bytes".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let epoch = u32_at(16);
        let g_kind = GKind::from_code(bytes[20]).ok_or_else(|| bad(format!("unknown g kind code {}", bytes[20])))?;
        let val_score = f64::from_le_bytes(bytes[21..29].try_into().unwrap());
        let expected = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(4))
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| bad(format!("parameter count {count} overflows")))?;
        if bytes.len() != expected {
            return Err(bad(format!(
                "expected {expected} bytes for {count} parameters, found {}",
                bytes.len()
            )));
        }
        let params = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            epoch,
            params,
            val_score,
            g_kind,
        })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
