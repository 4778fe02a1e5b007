//! Binary checkpoint and index files.
//!
//! Checkpoint: `GDCK`, version u32, config text (u32 length + UTF-8), RNG
//! state (32-byte seed, u64 stream, u128 word position), flags u8, tensor
//! count u32, then per tensor name length u32, name, rank u32, dims u64…,
//! values f64…, and finally the SHA-256 of everything before it. All
//! integers and reals are little-endian.
//!
//! Index: `GDIX`, version u32, d u32, m u64, 32-byte model fingerprint, then
//! m × d f64 in passage order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::encoders::{CrossEncoderParams, DualEncoder, EncoderParams};
use crate::error::{Error, FormatError, Result};
use crate::gnncore::GnnParams;
use crate::numkit::{ParamSet, TensorVisitor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GDCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const INDEX_MAGIC: [u8; 4] = *b"GDIX";
pub const INDEX_VERSION: u32 = 1;

pub type Fingerprint = [u8; 32];

pub fn fingerprint_hex(fp: &Fingerprint) -> String {
    fp.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything a pipeline stage hands to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub dual: DualEncoder,
    pub cross: CrossEncoderParams,
    pub gnn: GnnParams,
    pub rng: ChaCha8Rng,
}

impl Model {
    /// Randomly initialized model drawn from a generator seeded by `config.seed`.
    pub fn init(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dual = DualEncoder::random(config.vocab, config.dim, config.tied, &mut rng);
        let cross =
            CrossEncoderParams::new(EncoderParams::random(config.vocab, config.dim, &mut rng));
        let gnn = GnnParams::random(
            config.dim,
            config.heads,
            config.slope,
            config.activation,
            &mut rng,
        )?;
        Ok(Self {
            config,
            dual,
            cross,
            gnn,
            rng,
        })
    }

    /// All-zero tensors shaped by `config`.
    fn skeleton(config: TrainConfig, rng: ChaCha8Rng, frozen: bool) -> Result<Self> {
        let enc = || EncoderParams::zeros(config.vocab, config.dim);
        let mut cross = CrossEncoderParams::new(enc());
        cross.frozen = frozen;
        Ok(Self {
            dual: DualEncoder {
                query: enc(),
                passage: enc(),
                tied: config.tied,
            },
            cross,
            gnn: GnnParams::zeros(config.dim, config.heads, config.slope, config.activation)?,
            config,
            rng,
        })
    }

    fn visit_tensors(&self, f: &mut TensorVisitor) {
        self.dual
            .visit(&mut |n, d, v| f(&format!("dual.{n}"), d, v));
        self.cross
            .inner
            .visit(&mut |n, d, v| f(&format!("cross.{n}"), d, v));
        self.gnn.visit(&mut |n, d, v| f(&format!("gnn.{n}"), d, v));
    }

    fn body(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out.push(u8::from(self.cross.frozen));
        let mut count = 0u32;
        self.visit_tensors(&mut |_, _, _| count += 1);
        out.extend_from_slice(&count.to_le_bytes());
        self.visit_tensors(&mut |name, dims, values| {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        });
        out
    }

    /// SHA-256 of the serialized checkpoint body.
    pub fn fingerprint(&self) -> Fingerprint {
        Sha256::digest(self.body()).into()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.body();
        let digest: Fingerprint = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        out
    }

    /// Checks magic, then the trailing digest, then the version, then parses.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(FormatError::Magic {
                expected: CHECKPOINT_MAGIC,
                found: bytes[..bytes.len().min(4)].to_vec(),
            }
            .into());
        }
        if bytes.len() < 4 + 32 {
            return Err(FormatError::Fingerprint.into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(FormatError::Fingerprint.into());
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            }
            .into());
        }
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| FormatError::Malformed("config block is not UTF-8".into()))?;
        let config = TrainConfig::from_text(text)?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("length checked");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("length checked"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let frozen = match r.take(1)?[0] {
            0 => false,
            1 => true,
            other => return Err(FormatError::Malformed(format!("bad flag byte {other}")).into()),
        };
        let mut model = Self::skeleton(config, rng, frozen)?;

        let count = r.u32()? as usize;
        let mut expected = Vec::new();
        model.visit_tensors(&mut |n, d, v| expected.push((n.to_string(), d.to_vec(), v.len())));
        if count != expected.len() {
            return Err(FormatError::Malformed(format!(
                "expected {} tensors, found {count}",
                expected.len()
            ))
            .into());
        }
        let mut values = Vec::new();
        for (name, dims, len) in &expected {
            let n = r.u32()? as usize;
            let found = std::str::from_utf8(r.take(n)?).unwrap_or("<non-UTF-8>");
            if found != name {
                return Err(FormatError::Malformed(format!(
                    "expected tensor {name}, found {found}"
                ))
                .into());
            }
            let rank = r.u32()? as usize;
            let found_dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if &found_dims != dims {
                return Err(FormatError::Malformed(format!(
                    "tensor {name}: dims {found_dims:?}, expected {dims:?}"
                ))
                .into());
            }
            for _ in 0..*len {
                values.push(r.f64()?);
            }
        }
        if r.pos != body.len() {
            return Err(
                FormatError::Malformed(format!("{} trailing bytes", body.len() - r.pos)).into(),
            );
        }
        let mut offset = 0;
        let mut assign = |v: &mut [f64]| {
            v.copy_from_slice(&values[offset..offset + v.len()]);
            offset += v.len();
        };
        model.dual.visit_mut(&mut |_, v| assign(v));
        model.cross.inner.visit_mut(&mut |_, v| assign(v));
        model.gnn.visit_mut(&mut |_, v| assign(v));
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Malformed(format!(
                "unexpected end of data at byte {}",
                self.pos
            ))
            .into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("length checked"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("length checked"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("length checked"),
        ))
    }
}

/// Serializes an index body.
pub fn index_to_bytes(dim: usize, fingerprint: &Fingerprint, rows: &[Vec<f64>]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(52 + rows.len() * dim * 8);
    out.extend_from_slice(&INDEX_MAGIC);
    out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    out.extend_from_slice(fingerprint);
    for row in rows {
        if row.len() != dim {
            return Err(Error::shape("index row", dim, row.len()));
        }
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses an index body into `(d, fingerprint, rows)`.
pub fn index_from_bytes(bytes: &[u8]) -> Result<(usize, Fingerprint, Vec<Vec<f64>>)> {
    if bytes.len() < 4 || bytes[..4] != INDEX_MAGIC {
        return Err(FormatError::Magic {
            expected: INDEX_MAGIC,
            found: bytes[..bytes.len().min(4)].to_vec(),
        }
        .into());
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32()?;
    if version != INDEX_VERSION {
        return Err(FormatError::Version {
            expected: INDEX_VERSION,
            found: version,
        }
        .into());
    }
    let dim = r.u32()? as usize;
    let m = r.u64()? as usize;
    let fingerprint: Fingerprint = r.take(32)?.try_into().expect("length checked");
    let expected = m.checked_mul(dim).and_then(|n| n.checked_mul(8));
    if expected != Some(bytes.len() - r.pos) {
        return Err(FormatError::Malformed(format!(
            "index body holds {} bytes, header promises {m} × {dim} reals",
            bytes.len() - r.pos
        ))
        .into());
    }
    let rows = (0..m)
        .map(|_| (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok((dim, fingerprint, rows))
}
