//! `FCAB` model bundles.
//!
//! Little-endian layout:
//!
//! ```text
//! "FCAB" | version u32 = 1 | manifest_len u32 | manifest (UTF-8 JSON)
//! section payloads, back to back, in manifest order
//! crc32 u32 over every preceding byte
//! ```
//!
//! Section offsets in the manifest are relative to the first payload byte.
//! See `docs/formats.md` for the section encodings.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::AeHyper;
use crate::cascade::{Cascade, CascadeConfig, CovarianceKind, GaussianModel, PercentileTable, QuantileConfig, Standardizer};
use crate::error::{Error, FormatError, Result};
use crate::net::fcnw::{self, Reader, Writer};
use crate::net::{Layer, LayerKind, NetworkSpec};
use crate::preproc::PreprocOptions;
use crate::rfgeom::{geometry_of, RfGeometry};

pub const MAGIC: [u8; 4] = *b"FCAB";
pub const VERSION: u32 = 1;

/// Layer name of the autoencoder encoder inside the `encoder` section.
pub const ENCODER_LAYER: &str = "CT";

/// Everything detection needs: frozen layers up to the tap, the fitted cascade
/// and the localization vote threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    /// Frozen layers, truncated at the tap.
    pub network: NetworkSpec,
    pub preproc: PreprocOptions,
    pub cascade: Cascade,
    /// Hyperparameters the encoder was trained with.
    pub autoencoder: AeHyper,
    /// Quantiles the thresholds were calibrated at.
    pub quantiles: QuantileConfig,
    pub zeta: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianMeta {
    dim: usize,
    epsilon: f64,
    covariance: CovarianceKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SectionEntry {
    name: String,
    offset: u64,
    length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    tap_layer: String,
    zeta: u32,
    cascade: CascadeConfig,
    quantiles: QuantileConfig,
    autoencoder: AeHyper,
    preproc: PreprocOptions,
    g1: GaussianMeta,
    g2: GaussianMeta,
    sections: Vec<SectionEntry>,
}

const SECTIONS: [&str; 5] = ["network", "encoder", "standardizer", "g1", "g2"];

impl ModelBundle {
    pub fn tap_layer(&self) -> &str {
        self.network.layers.last().map_or("input", |l| l.name.as_str())
    }

    /// Feature length at the tap for a network fed `input_channels` channels.
    pub fn tap_dim(&self) -> usize {
        let ch = self.network.input_channels().unwrap_or(3);
        self.network.layers.iter().fold(ch, |c, l| l.output_channels(c))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.network.tap != self.network.layers.len() {
            return Err(Error::Config("bundle network must be truncated at its tap".into()));
        }
        let m = self.tap_dim();
        if self.cascade.g1.dim() != m {
            return Err(Error::Config(format!(
                "G1 dimension {} differs from tap feature length {m}",
                self.cascade.g1.dim()
            )));
        }
        self.cascade.validate()
    }

    pub fn geometry(&self) -> RfGeometry {
        geometry_of(&self.network, self.network.tap).expect("tap within network")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let c = &self.cascade;
        let encoder_net = NetworkSpec::new(vec![Layer::conv(ENCODER_LAYER, c.encoder.clone())])?;
        let mut standardizer = Writer::new();
        standardizer.f64s(&c.standardizer.mean);
        standardizer.f64s(&c.standardizer.scale);
        let payloads = [
            fcnw::to_bytes(&self.network)?,
            fcnw::to_bytes(&encoder_net)?,
            standardizer.buf,
            gaussian_section(&c.g1),
            gaussian_section(&c.g2),
        ];
        let mut sections = Vec::with_capacity(SECTIONS.len());
        let mut offset = 0u64;
        for (name, payload) in SECTIONS.iter().zip(&payloads) {
            sections.push(SectionEntry {
                name: name.to_string(),
                offset,
                length: payload.len() as u64,
            });
            offset += payload.len() as u64;
        }
        let manifest = Manifest {
            tap_layer: self.tap_layer().to_string(),
            zeta: self.zeta,
            cascade: c.config,
            quantiles: self.quantiles,
            autoencoder: self.autoencoder.clone(),
            preproc: self.preproc.clone(),
            g1: meta(&c.g1),
            g2: meta(&c.g2),
            sections,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        let mut w = Writer::new();
        w.buf.extend_from_slice(&MAGIC);
        w.u32(VERSION);
        w.u32(u32::try_from(json.len()).map_err(|_| Error::Config("manifest too large".into()))?);
        w.buf.extend_from_slice(&json);
        for p in &payloads {
            w.buf.extend_from_slice(p);
        }
        Ok(w.finish_with_crc())
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        Self::parse(data).map_err(|e| fcnw::prefer_checksum(data, e))
    }

    fn parse(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let len = r.u32("manifest length")? as usize;
        let manifest: Manifest = serde_json::from_slice(r.take(len, "manifest")?)
            .map_err(|e| FormatError::Malformed(format!("manifest: {e}")))?;
        let names: Vec<&str> = manifest.sections.iter().map(|s| s.name.as_str()).collect();
        if names != SECTIONS {
            return Err(FormatError::Malformed(format!("unexpected sections {names:?}")).into());
        }
        let base = r.pos();
        let mut payloads = Vec::with_capacity(SECTIONS.len());
        for s in &manifest.sections {
            if s.offset as usize != r.pos() - base {
                return Err(FormatError::Malformed(format!("section `{}` is not contiguous", s.name)).into());
            }
            payloads.push(r.take(s.length as usize, &format!("section `{}`", s.name))?);
        }
        r.checksum()?;

        let malformed = |what: &str, e: Error| -> Error {
            match e {
                Error::Format(f) => FormatError::Malformed(format!("{what}: {f}")).into(),
                other => FormatError::Malformed(format!("{what}: {other}")).into(),
            }
        };
        let network = fcnw::from_bytes(payloads[0]).map_err(|e| malformed("network", e))?;
        if network.layers.last().map(|l| l.name.as_str()) != Some(manifest.tap_layer.as_str()) {
            return Err(FormatError::Malformed(format!(
                "network does not end at tap layer `{}`",
                manifest.tap_layer
            ))
            .into());
        }
        let encoder = match fcnw::from_bytes(payloads[1]).map_err(|e| malformed("encoder", e))?.layers.pop() {
            Some(Layer {
                kind: LayerKind::Conv(c),
                ..
            }) => c,
            _ => return Err(FormatError::Malformed("encoder section holds no conv layer".into()).into()),
        };
        let m = manifest.g1.dim;
        let mut sr = Reader::new(payloads[2]);
        let standardizer = Standardizer {
            mean: sr.f64s(m, "standardizer mean")?,
            scale: sr.f64s(m, "standardizer scale")?,
        };
        expect_consumed(&sr, "standardizer")?;
        let g1 = read_gaussian(payloads[3], &manifest.g1, "g1")?;
        let g2 = read_gaussian(payloads[4], &manifest.g2, "g2")?;
        let bundle = ModelBundle {
            network,
            preproc: manifest.preproc,
            cascade: Cascade {
                standardizer,
                g1,
                encoder,
                g2,
                config: manifest.cascade,
            },
            autoencoder: manifest.autoencoder,
            quantiles: manifest.quantiles,
            zeta: manifest.zeta,
        };
        bundle.validate().map_err(|e| malformed("bundle", e))?;
        Ok(bundle)
    }

    /// Writes through a temporary file so a failed write never leaves a partial bundle.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("fab.partial");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&data)
    }
}

fn meta(g: &GaussianModel) -> GaussianMeta {
    GaussianMeta {
        dim: g.dim(),
        epsilon: g.epsilon(),
        covariance: g.kind(),
    }
}

/// `mean f64[d] | covariance f64[d*d] | table_len u32 | table f64[table_len]`
fn gaussian_section(g: &GaussianModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.f64s(g.mean());
    w.f64s(g.covariance());
    let table = g.percentiles().map_or(&[][..], |t| t.values());
    w.u32(table.len() as u32);
    w.f64s(table);
    w.buf
}

fn read_gaussian(data: &[u8], meta: &GaussianMeta, name: &str) -> Result<GaussianModel> {
    let d = meta.dim;
    let mut r = Reader::new(data);
    let mean = r.f64s(d, &format!("{name} mean"))?;
    let cov = r.f64s(d.checked_mul(d).ok_or_else(|| FormatError::Malformed(format!("{name} dimension")))?, &format!("{name} covariance"))?;
    let n = r.u32(&format!("{name} table length"))? as usize;
    let table = r.f64s(n, &format!("{name} percentile table"))?;
    expect_consumed(&r, name)?;
    let mut g = GaussianModel::from_parts(mean, cov, meta.epsilon, meta.covariance)
        .map_err(|e| FormatError::Malformed(format!("{name}: {e}")))?;
    if n > 0 {
        let t = PercentileTable::from_values(table).map_err(|e| FormatError::Malformed(format!("{name}: {e}")))?;
        g = g.with_percentiles(t);
    }
    Ok(g)
}

fn expect_consumed(r: &Reader<'_>, name: &str) -> Result<(), FormatError> {
    if r.remaining() != 0 {
        return Err(FormatError::Malformed(format!("{} stray bytes in section `{name}`", r.remaining())));
    }
    Ok(())
}
