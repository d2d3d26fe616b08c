//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "CAPTCKPT"
//! version      u32      FORMAT_VERSION
//! vocab_hash   64 bytes ASCII hex SHA-256 of the vocabulary
//! config_hash  64 bytes ASCII hex SHA-256 of the producing config
//! vocab        u64
//! hidden       u64
//! feature      u64
//! 9 groups     u64 length followed by that many f64, in the order
//!              embed, proj_w, proj_b, w_ih, w_hh, b_ih, b_hh,
//!              classifier_w, classifier_b (row-major)
//! ```

use std::fs;
use std::path::Path;

use super::{ModelDims, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CAPTCKPT";
pub const FORMAT_VERSION: u32 = 1;
const HASH_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab_hash: String,
    pub config_hash: String,
}

fn fixed_hash(h: &str) -> Result<[u8; HASH_LEN]> {
    let bytes = h.as_bytes();
    if bytes.len() != HASH_LEN {
        return Err(Error::Format(format!("hash must be {HASH_LEN} hex chars, got {}", bytes.len())));
    }
    let mut out = [0u8; HASH_LEN];
    out.copy_from_slice(bytes);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn hash(&mut self) -> Result<String> {
        let raw = self.take(HASH_LEN)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format("hash is not ASCII".into()))
    }
}

impl Checkpoint {
    pub fn new(params: ModelParams, vocab_hash: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            params,
            vocab_hash: vocab_hash.into(),
            config_hash: config_hash.into(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(8 * self.params.n_params() + 256);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&fixed_hash(&self.vocab_hash)?);
        out.extend_from_slice(&fixed_hash(&self.config_hash)?);
        let d = self.params.dims;
        for n in [d.vocab, d.hidden, d.feature] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for (_, _, data) in self.params.groups() {
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let vocab_hash = r.hash()?;
        let config_hash = r.hash()?;
        let dims = ModelDims {
            vocab: r.u64()? as usize,
            hidden: r.u64()? as usize,
            feature: r.u64()? as usize,
        };
        let mut params = ModelParams::zeros(dims);
        for (name, _, dst) in params.groups_mut() {
            let len = r.u64()? as usize;
            if len != dst.len() {
                return Err(Error::Format(format!(
                    "group {name} has {len} values, expected {}",
                    dst.len()
                )));
            }
            for x in dst.iter_mut() {
                *x = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters"));
        }
        Ok(Self {
            params,
            vocab_hash,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Loads and checks the vocabulary hash.
    pub fn load_for(path: &Path, vocab_hash: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.vocab_hash != vocab_hash {
            return Err(Error::VocabMismatch {
                expected: vocab_hash.to_string(),
                found: ck.vocab_hash,
            });
        }
        Ok(ck)
    }
}
