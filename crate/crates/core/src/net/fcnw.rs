//! `FCNW` weight files.
//!
//! Little-endian layout:
//!
//! ```text
//! "FCNW" | version u32 = 1 | layer_count u32
//! per layer: type u8 (0 conv, 1 pool, 2 noop) | name_len u8 | name (UTF-8)
//!   conv: in, out, kh, kw, stride, pad, groups, activation (u32 each)
//!         out*(in/groups)*kh*kw f32 weights | out f32 biases
//!   pool: wh, ww, stride, mode (u32 each)
//! crc32 u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::layer::{Activation, ConvLayerSpec, Layer, LayerKind, PoolLayerSpec, PoolMode};
use super::network::NetworkSpec;
use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"FCNW";
pub const VERSION: u32 = 1;

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn finish_with_crc(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated { what: what.to_string() });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| FormatError::Truncated { what: what.into() })?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| FormatError::Truncated { what: what.into() })?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let found = self.take(4, "magic")?;
        if found != expected {
            let mut f = [0u8; 4];
            f.copy_from_slice(found);
            return Err(FormatError::BadMagic { expected, found: f });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<(), FormatError> {
        let found = self.u32("version")?;
        if found != expected {
            return Err(FormatError::Version { expected, found });
        }
        Ok(())
    }

    /// Reads the trailing CRC and checks it against everything before it.
    pub fn checksum(&mut self) -> Result<(), FormatError> {
        let covered = self.pos;
        let stored = self.u32("checksum trailer")?;
        let computed = crc32fast::hash(&self.data[..covered]);
        if stored != computed {
            return Err(FormatError::Checksum { stored, computed });
        }
        if self.remaining() != 0 {
            return Err(FormatError::Malformed(format!(
                "{} unexpected bytes after checksum",
                self.remaining()
            )));
        }
        Ok(())
    }
}

/// Reclassifies a malformed-content error as a checksum error when the
/// trailing CRC does not match, since corruption is the likelier cause.
pub(crate) fn prefer_checksum(data: &[u8], err: Error) -> Error {
    if !matches!(err.format_error(), Some(FormatError::Malformed(_))) || data.len() < 4 {
        return err;
    }
    let (body, tail) = data.split_at(data.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        FormatError::Checksum { stored, computed }.into()
    } else {
        err
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit in u32")))
}

pub fn to_bytes(net: &NetworkSpec) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(&MAGIC);
    w.u32(VERSION);
    w.u32(to_u32(net.layers.len(), "layer count")?);
    for layer in &net.layers {
        let name = layer.name.as_bytes();
        let name_len = u8::try_from(name.len())
            .map_err(|_| Error::Config(format!("layer name `{}` longer than 255 bytes", layer.name)))?;
        match &layer.kind {
            LayerKind::Conv(c) => {
                c.validate().map_err(|e| e.in_layer(&layer.name))?;
                w.u8(0);
                w.u8(name_len);
                w.buf.extend_from_slice(name);
                for v in [c.in_channels, c.out_channels, c.kernel_h, c.kernel_w, c.stride, c.padding, c.groups] {
                    w.u32(to_u32(v, "conv parameter")?);
                }
                w.u32(c.activation.code());
                w.f32s(&c.weights);
                w.f32s(&c.biases);
            }
            LayerKind::Pool(p) => {
                w.u8(1);
                w.u8(name_len);
                w.buf.extend_from_slice(name);
                for v in [p.window_h, p.window_w, p.stride] {
                    w.u32(to_u32(v, "pool parameter")?);
                }
                w.u32(p.mode.code());
            }
            LayerKind::Noop => {
                w.u8(2);
                w.u8(name_len);
                w.buf.extend_from_slice(name);
            }
        }
    }
    Ok(w.finish_with_crc())
}

fn read_layer(r: &mut Reader<'_>, index: usize) -> Result<Layer, FormatError> {
    let at = format!("layer {index}");
    let kind = r.u8(&format!("{at} type"))?;
    let name_len = r.u8(&format!("{at} name length"))? as usize;
    let name = std::str::from_utf8(r.take(name_len, &format!("{at} name"))?)
        .map_err(|_| FormatError::Malformed(format!("{at} name is not UTF-8")))?
        .to_string();
    let at = format!("layer {index} `{name}`");
    let malformed = |e: Error| FormatError::Malformed(format!("{at}: {e}"));
    match kind {
        0 => {
            let mut p = [0usize; 7];
            for v in p.iter_mut() {
                *v = r.u32(&format!("{at} header"))? as usize;
            }
            let act = r.u32(&format!("{at} header"))?;
            let activation = Activation::from_code(act)
                .ok_or_else(|| FormatError::Malformed(format!("{at}: unknown activation {act}")))?;
            let [cin, cout, kh, kw, stride, pad, groups] = p;
            let mut conv = ConvLayerSpec::zeros(cin, cout, kh, kw, stride, pad, groups, activation)
                .map_err(malformed)?;
            conv.weights = r.f32s(conv.weights.len(), &format!("{at} weights"))?;
            conv.biases = r.f32s(cout, &format!("{at} biases"))?;
            Ok(Layer::conv(name, conv))
        }
        1 => {
            let mut p = [0usize; 3];
            for v in p.iter_mut() {
                *v = r.u32(&format!("{at} header"))? as usize;
            }
            let m = r.u32(&format!("{at} header"))?;
            let mode = PoolMode::from_code(m)
                .ok_or_else(|| FormatError::Malformed(format!("{at}: unknown pool mode {m}")))?;
            let pool = PoolLayerSpec::new(p[0], p[1], p[2], mode).map_err(malformed)?;
            Ok(Layer::pool(name, pool))
        }
        2 => Ok(Layer::noop(name)),
        other => Err(FormatError::Malformed(format!("{at}: unknown layer type {other}"))),
    }
}

/// Parses an `FCNW` image. The returned network taps after its last layer.
pub fn from_bytes(data: &[u8]) -> Result<NetworkSpec> {
    parse(data).map_err(|e| prefer_checksum(data, e))
}

fn parse(data: &[u8]) -> Result<NetworkSpec> {
    let mut r = Reader::new(data);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let count = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        layers.push(read_layer(&mut r, i)?);
    }
    r.checksum()?;
    NetworkSpec::new(layers).map_err(|e| FormatError::Malformed(e.to_string()).into())
}

pub fn save_weights(net: &NetworkSpec, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net)?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<NetworkSpec> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&data)
}
