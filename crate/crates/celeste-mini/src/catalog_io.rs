//! Catalog CSV files and atomic output.
//!
//! Truth and input catalogs use the columns
//! `id,is_star,ref_flux,c1,c2,c3,c4,ra,dec,profile_mix,scale,axis_ratio,angle`
//! with `is_star` as 0 or 1. Predictions replace `is_star` by `p_star` and
//! append posterior standard deviations `ref_flux_sd,c1_sd..c4_sd` plus the
//! fit `status` and `iterations`. The reader accepts either flavor.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use celeste_mini_core::sky::{GalaxyShape, SourceParams};
use serde::{Deserialize, Serialize};

/// A catalog row: a stable id and the source's parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceEntry {
    pub id: u64,
    pub params: SourceParams,
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    id: u64,
    is_star: u8,
    ref_flux: f64,
    c1: f64,
    c2: f64,
    c3: f64,
    c4: f64,
    ra: f64,
    dec: f64,
    profile_mix: f64,
    scale: f64,
    axis_ratio: f64,
    angle: f64,
}

/// A prediction row as written by `infer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: u64,
    pub p_star: f64,
    pub ref_flux: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub ra: f64,
    pub dec: f64,
    pub profile_mix: f64,
    pub scale: f64,
    pub axis_ratio: f64,
    pub angle: f64,
    pub ref_flux_sd: f64,
    pub c1_sd: f64,
    pub c2_sd: f64,
    pub c3_sd: f64,
    pub c4_sd: f64,
    pub status: String,
    pub iterations: usize,
}

impl PredictionRow {
    pub fn entry(&self) -> SourceEntry {
        SourceEntry {
            id: self.id,
            params: SourceParams {
                is_star: self.p_star >= 0.5,
                ref_flux: self.ref_flux,
                colors: [self.c1, self.c2, self.c3, self.c4],
                position: [self.ra, self.dec],
                shape: GalaxyShape {
                    profile_mix: self.profile_mix,
                    scale: self.scale,
                    axis_ratio: self.axis_ratio,
                    angle: self.angle,
                },
            },
        }
    }
}

/// Either flavor; prediction-only columns are optional.
#[derive(Debug, Deserialize)]
struct AnyRow {
    id: u64,
    #[serde(default)]
    is_star: Option<u8>,
    #[serde(default)]
    p_star: Option<f64>,
    ref_flux: f64,
    c1: f64,
    c2: f64,
    c3: f64,
    c4: f64,
    ra: f64,
    dec: f64,
    profile_mix: f64,
    scale: f64,
    axis_ratio: f64,
    angle: f64,
}

pub fn write_catalog(path: &Path, entries: &[SourceEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in entries {
        let p = &e.params;
        w.serialize(TruthRow {
            id: e.id,
            is_star: u8::from(p.is_star),
            ref_flux: p.ref_flux,
            c1: p.colors[0],
            c2: p.colors[1],
            c3: p.colors[2],
            c4: p.colors[3],
            ra: p.position[0],
            dec: p.position[1],
            profile_mix: p.shape.profile_mix,
            scale: p.shape.scale,
            axis_ratio: p.shape.axis_ratio,
            angle: p.shape.angle,
        })?;
    }
    write_atomic(path, &w.into_inner()?)
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    write_atomic(path, &w.into_inner()?)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize().collect::<std::result::Result<_, _>>().with_context(|| format!("parsing {}", path.display()))
}

/// Read a truth, input or prediction catalog; each entry is validated.
pub fn read_catalog(path: &Path) -> Result<Vec<SourceEntry>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (line, row) in r.deserialize::<AnyRow>().enumerate() {
        let row = row.with_context(|| format!("parsing {}", path.display()))?;
        let is_star = match (row.is_star, row.p_star) {
            (Some(0), _) => false,
            (Some(1), _) => true,
            (Some(v), _) => bail!("{}: row {}: is_star must be 0 or 1, got {v}", path.display(), line + 1),
            (None, Some(p)) => p >= 0.5,
            (None, None) => bail!("{}: needs an is_star or p_star column", path.display()),
        };
        let params = SourceParams {
            is_star,
            ref_flux: row.ref_flux,
            colors: [row.c1, row.c2, row.c3, row.c4],
            position: [row.ra, row.dec],
            shape: GalaxyShape {
                profile_mix: row.profile_mix,
                scale: row.scale,
                axis_ratio: row.axis_ratio,
                angle: row.angle,
            },
        };
        params.validate().with_context(|| format!("{}: row {} (id {})", path.display(), line + 1, row.id))?;
        out.push(SourceEntry { id: row.id, params });
    }
    let mut ids: Vec<u64> = out.iter().map(|e| e.id).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        bail!("{}: duplicate id {}", path.display(), w[0]);
    }
    Ok(out)
}

/// Write `bytes` to `path` through a temporary file in the same directory,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating a file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
