//! Little-endian binary file formats.
//!
//! | ext      | layout                                                               |
//! |----------|----------------------------------------------------------------------|
//! | `.fmap`  | `FMAP` u16=1 width:u32 height:u32 channels:u32 f32[h*w*c] (y,x,c)    |
//! | `.desc`  | `DESC` u16=1 dim:u32 f32[dim]                                        |
//! | `.head`  | `AHED` u16=1 in:u32 out:u32 f32[out*in] (row-major W) f32[out] (b)   |
//! | `.whn`   | `WHTN` u16=1 in:u32 out:u32 eps:f64 f32[in] (mean) f32[out*in]       |
//!
//! The prototype index format lives in [`crate::index`].

use std::path::Path;

use crate::descriptor::{AffineHead, Descriptor, FeatureMap, WhitenTransform};
use crate::error::{Error, Result};

pub const VERSION: u16 = 1;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4]) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u16(VERSION);
        w
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: impl IntoIterator<Item = f32>) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version.
    pub fn new(buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if buf.len() < 6 || &buf[..4] != magic {
            return Err(Error::Format(format!(
                "expected magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let mut r = Self { buf, pos: 4 };
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )))
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn to_f64(v: Vec<f32>) -> Vec<f64> {
    v.into_iter().map(f64::from).collect()
}

pub fn encode_feature_map(fm: &FeatureMap) -> Vec<u8> {
    let mut w = Writer::new(b"FMAP");
    w.u32(fm.width() as u32);
    w.u32(fm.height() as u32);
    w.u32(fm.channels() as u32);
    w.f32s(fm.data().iter().map(|&v| v as f32));
    w.finish()
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = Reader::new(bytes, b"FMAP")?;
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let data = r.f32s(width * height * channels)?;
    r.expect_end()?;
    FeatureMap::new(width, height, channels, to_f64(data))
}

pub fn encode_descriptor(d: &Descriptor) -> Vec<u8> {
    let mut w = Writer::new(b"DESC");
    w.u32(d.dim() as u32);
    w.f32s(d.values().iter().map(|&v| v as f32));
    w.finish()
}

pub fn decode_descriptor(bytes: &[u8]) -> Result<Descriptor> {
    let mut r = Reader::new(bytes, b"DESC")?;
    let dim = r.u32()? as usize;
    let values = r.f32s(dim)?;
    r.expect_end()?;
    Ok(Descriptor::new(to_f64(values)))
}

pub fn encode_head(h: &AffineHead) -> Vec<u8> {
    let mut w = Writer::new(b"AHED");
    w.u32(h.in_dim() as u32);
    w.u32(h.out_dim() as u32);
    w.f32s(h.weights().iter().map(|&v| v as f32));
    w.f32s(h.bias().iter().map(|&v| v as f32));
    w.finish()
}

pub fn decode_head(bytes: &[u8]) -> Result<AffineHead> {
    let mut r = Reader::new(bytes, b"AHED")?;
    let in_dim = r.u32()? as usize;
    let out_dim = r.u32()? as usize;
    let weights = r.f32s(in_dim * out_dim)?;
    let bias = r.f32s(out_dim)?;
    r.expect_end()?;
    AffineHead::new(in_dim, out_dim, to_f64(weights), to_f64(bias))
}

pub fn encode_whitening(t: &WhitenTransform) -> Vec<u8> {
    let mut w = Writer::new(b"WHTN");
    w.u32(t.in_dim() as u32);
    w.u32(t.out_dim() as u32);
    w.f64(t.eps());
    w.f32s(t.mean().iter().map(|&v| v as f32));
    w.f32s(t.projection().iter().map(|&v| v as f32));
    w.finish()
}

pub fn decode_whitening(bytes: &[u8]) -> Result<WhitenTransform> {
    let mut r = Reader::new(bytes, b"WHTN")?;
    let in_dim = r.u32()? as usize;
    let out_dim = r.u32()? as usize;
    let eps = r.f64()?;
    let mean = r.f32s(in_dim)?;
    let projection = r.f32s(in_dim * out_dim)?;
    r.expect_end()?;
    WhitenTransform::new(to_f64(mean), to_f64(projection), out_dim, eps)
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    decode_feature_map(&read_file(path)?)
}

pub fn write_feature_map(path: &Path, fm: &FeatureMap) -> Result<()> {
    write_file(path, &encode_feature_map(fm))
}

pub fn read_descriptor(path: &Path) -> Result<Descriptor> {
    decode_descriptor(&read_file(path)?)
}

pub fn write_descriptor(path: &Path, d: &Descriptor) -> Result<()> {
    write_file(path, &encode_descriptor(d))
}

pub fn read_head(path: &Path) -> Result<AffineHead> {
    decode_head(&read_file(path)?)
}

pub fn write_head(path: &Path, h: &AffineHead) -> Result<()> {
    write_file(path, &encode_head(h))
}

pub fn read_whitening(path: &Path) -> Result<WhitenTransform> {
    decode_whitening(&read_file(path)?)
}

pub fn write_whitening(path: &Path, t: &WhitenTransform) -> Result<()> {
    write_file(path, &encode_whitening(t))
}

/// Reads a JSON-lines file, skipping blank lines.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn to_jsonl<T: serde::Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_file(path, to_jsonl(records)?.as_bytes())
}
