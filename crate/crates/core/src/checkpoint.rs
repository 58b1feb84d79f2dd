//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CO4C" | u32 version | u8 dtype (4 or 8)
//! u32 len | resolved config text
//! u64 step | u64 adam step | u64 vocab hash
//! u32 count | count x (u32 name len | name | u32 ndim | u64 dims.. | payload)
//! u32 len | rng state (32-byte seed, u64 stream, u128 word position)
//! 32-byte sha256 of everything above
//! ```
//!
//! Tensors are the parameters in order, then `adam.m.<name>` and
//! `adam.v.<name>` for each parameter.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{parse_config, RunConfig};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::{Dtype, Scalar, Tensor, TensorSet};

pub const MAGIC: &[u8; 4] = b"CO4C";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const RNG_LEN: usize = 32 + 8 + 16;

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub params: TensorSet<T>,
    pub adam: AdamState<T>,
    /// Optimizer steps completed.
    pub step: u64,
    /// Dropout stream, positioned where training stopped.
    pub rng: ChaCha8Rng,
    pub vocab_hash: u64,
}

impl<T: Scalar> Checkpoint<T> {
    /// Bitwise equality of every stored field.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params.bits_eq(&other.params)
            && self.adam.bits_eq(&other.adam)
            && self.step == other.step
            && self.rng == other.rng
            && self.vocab_hash == other.vocab_hash
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE.tag());
        put_bytes(&mut out, self.config.to_text().as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        out.extend_from_slice(&self.vocab_hash.to_le_bytes());
        let count = self.params.len() * 3;
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_tensor(&mut out, name, t);
        }
        for (prefix, set) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for (name, t) in set.iter() {
                put_tensor(&mut out, &format!("{prefix}{name}"), t);
            }
        }
        let mut rng = Vec::with_capacity(RNG_LEN);
        rng.extend_from_slice(&self.rng.get_seed());
        rng.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        rng.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        put_bytes(&mut out, &rng);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let dtype = peek_dtype(bytes)?;
        if dtype != T::DTYPE {
            return Err(Error::Input(format!(
                "checkpoint holds {dtype} tensors but {} was requested",
                T::DTYPE
            )));
        }
        let body = &bytes[..bytes.len() - DIGEST_LEN];
        let mut r = Reader { buf: body, pos: 9 };
        let text = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Integrity("config text is not UTF-8".into()))?;
        let config = parse_config(&text, &[])?;
        let step = r.u64()?;
        let adam_step = r.u64()?;
        let vocab_hash = r.u64()?;
        let count = r.u32()? as usize;
        let mut all = Vec::with_capacity(count);
        for _ in 0..count {
            all.push(r.tensor::<T>()?);
        }
        if !count.is_multiple_of(3) {
            return Err(Error::Integrity(format!("{count} tensors is not params + two moments")));
        }
        let n = count / 3;
        let mut params = TensorSet::new();
        let mut m = TensorSet::new();
        let mut v = TensorSet::new();
        for (i, (name, t)) in all.into_iter().enumerate() {
            let (set, want) = match i / n {
                0 => (&mut params, String::new()),
                1 => (&mut m, "adam.m.".to_string()),
                _ => (&mut v, "adam.v.".to_string()),
            };
            let Some(base) = name.strip_prefix(&want) else {
                return Err(Error::Integrity(format!("unexpected tensor `{name}` at position {i}")));
            };
            set.insert(base.to_string(), t);
        }
        if params.names() != m.names() || params.names() != v.names() {
            return Err(Error::Integrity("moment names do not match parameter names".into()));
        }
        let rng_bytes = r.bytes()?;
        if rng_bytes.len() != RNG_LEN {
            return Err(Error::Integrity(format!("rng state is {} bytes, expected {RNG_LEN}", rng_bytes.len())));
        }
        if r.pos != body.len() {
            return Err(Error::Integrity(format!("{} trailing bytes", body.len() - r.pos)));
        }
        let mut rng = ChaCha8Rng::from_seed(rng_bytes[..32].try_into().expect("32 bytes"));
        rng.set_stream(u64::from_le_bytes(rng_bytes[32..40].try_into().expect("8 bytes")));
        rng.set_word_pos(u128::from_le_bytes(rng_bytes[40..].try_into().expect("16 bytes")));
        Ok(Checkpoint {
            config,
            params,
            adam: AdamState { m, v, step: adam_step },
            step,
            rng,
            vocab_hash,
        })
    }

    /// Writes to a temporary sibling and renames, so an interrupted save
    /// never leaves a torn file behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::load(path)
}

/// Validates magic, version, digest and length, and returns the element type.
pub fn peek_dtype(bytes: &[u8]) -> Result<Dtype> {
    if bytes.len() < 9 + DIGEST_LEN {
        return Err(Error::Integrity(format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Integrity("bad magic, not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checksum mismatch (truncated or corrupted file)".into()));
    }
    Dtype::from_tag(bytes[8]).ok_or_else(|| Error::Integrity(format!("unknown dtype tag {}", bytes[8])))
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_bytes(out, name.as_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size());
    for &x in t.data() {
        x.put_le(out);
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
            .ok_or_else(|| Error::Integrity(format!("record at byte {} runs past the end", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let name = String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?;
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Integrity(format!("shape {shape:?} of `{name}` overflows")))?;
        let size = T::DTYPE.size();
        let raw = self.take(numel.saturating_mul(size))?;
        let data = raw.chunks_exact(size).map(T::take_le).collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}
