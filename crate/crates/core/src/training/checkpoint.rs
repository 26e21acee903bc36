//! Binary checkpoint container.
//!
//! All integers are little-endian. Field order:
//!
//! ```text
//! magic            8 bytes  "MKUPCKPT"
//! version          u32
//! step             u64
//! dtype            u8       0 = f32, 1 = f64
//! config echo      str      JSON of the generator and training sections
//! manifest hash    str
//! rng seed         32 bytes
//! rng stream       u64
//! rng word pos     u128
//! generator        table
//! discriminator    table
//! adam (G)         u64 step, table m, table v
//! adam (D)         u64 step, table m, table v
//!
//! str   = u32 byte length, UTF-8 bytes
//! table = u32 count, then per tensor: str name, u32 rank, u64 dims, values
//! ```

use std::io::Write;
use std::path::Path;

use candle_core::DType;

use crate::error::{Error, Result};
use crate::nn::TensorRecord;
use crate::optim::AdamState;

pub const MAGIC: &[u8; 8] = b"MKUPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub dtype: DType,
    pub config_echo: String,
    pub manifest_hash: String,
    pub rng: RngState,
    pub generator: Vec<TensorRecord>,
    pub discriminator: Vec<TensorRecord>,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
}

struct Writer {
    buf: Vec<u8>,
    dtype: DType,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn str(&mut self, s: &str) {
        self.bytes(&(s.len() as u32).to_le_bytes());
        self.bytes(s.as_bytes());
    }

    fn table(&mut self, records: &[TensorRecord]) {
        self.bytes(&(records.len() as u32).to_le_bytes());
        for r in records {
            self.str(&r.name);
            self.bytes(&(r.dims.len() as u32).to_le_bytes());
            for d in &r.dims {
                self.bytes(&(*d as u64).to_le_bytes());
            }
            for v in &r.values {
                match self.dtype {
                    DType::F32 => self.bytes(&(*v as f32).to_le_bytes()),
                    _ => self.bytes(&v.to_le_bytes()),
                }
            }
        }
    }

    fn adam(&mut self, s: &AdamState) {
        self.bytes(&s.step.to_le_bytes());
        self.table(&s.m);
        self.table(&s.v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    dtype: DType,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn str(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8 string".to_string())
    }

    fn table(&mut self) -> std::result::Result<Vec<TensorRecord>, String> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = self.str()?;
            let rank = self.u32()? as usize;
            let dims = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let count: usize = dims.iter().product();
            let values = match self.dtype {
                DType::F32 => self.take(count * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                _ => self.take(count * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            out.push(TensorRecord { name, dims, values });
        }
        Ok(out)
    }

    fn adam(&mut self) -> std::result::Result<AdamState, String> {
        Ok(AdamState { step: self.u64()?, m: self.table()?, v: self.table()? })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let code = match self.dtype {
            DType::F32 => 0u8,
            DType::F64 => 1u8,
            other => return Err(Error::Config(vec![format!("checkpoints store f32 or f64, not {other:?}")])),
        };
        let mut w = Writer { buf: Vec::new(), dtype: self.dtype };
        w.bytes(MAGIC);
        w.bytes(&FORMAT_VERSION.to_le_bytes());
        w.bytes(&self.step.to_le_bytes());
        w.bytes(&[code]);
        w.str(&self.config_echo);
        w.str(&self.manifest_hash);
        w.bytes(&self.rng.seed);
        w.bytes(&self.rng.stream.to_le_bytes());
        w.bytes(&self.rng.word_pos.to_le_bytes());
        w.table(&self.generator);
        w.table(&self.discriminator);
        w.adam(&self.adam_g);
        w.adam(&self.adam_d);
        Ok(w.buf)
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        if buf.len() < 12 || &buf[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion { found: version, supported: FORMAT_VERSION });
        }
        let mut r = Reader { buf, pos: 12, dtype: DType::F32 };
        let parsed = (|| -> std::result::Result<Self, String> {
            let step = r.u64()?;
            r.dtype = match r.array::<1>()?[0] {
                0 => DType::F32,
                1 => DType::F64,
                c => return Err(format!("unknown dtype code {c}")),
            };
            let config_echo = r.str()?;
            let manifest_hash = r.str()?;
            let rng = RngState { seed: r.array()?, stream: r.u64()?, word_pos: u128::from_le_bytes(r.array()?) };
            let ck = Self {
                step,
                dtype: r.dtype,
                config_echo,
                manifest_hash,
                rng,
                generator: r.table()?,
                discriminator: r.table()?,
                adam_g: r.adam()?,
                adam_d: r.adam()?,
            };
            if r.pos != buf.len() {
                return Err(format!("{} trailing bytes", buf.len() - r.pos));
            }
            Ok(ck)
        })();
        parsed.map_err(bad)
    }

    /// Atomic write: a temporary file in the target directory is renamed into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }
}
