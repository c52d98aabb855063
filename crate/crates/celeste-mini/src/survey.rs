//! Synthetic surveys: a grid of fields, each imaged in all five bands.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use celeste_mini_core::sky::{
    self, Band, ClusterConfig, GalaxyShape, Image, ImageMetadata, Prior, PsfModel, SkyRegion, SourceParams, Wcs,
    ARCSEC_PER_DEGREE, BAND_COUNT,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::catalog_io::{self, SourceEntry};
use crate::fits;

#[derive(Clone, Debug, PartialEq)]
pub struct SurveyConfig {
    pub sources: usize,
    pub fields: usize,
    pub width: usize,
    pub height: usize,
    pub pixel_scale_arcsec: f64,
    /// Sky counts per pixel, per band.
    pub sky: [f64; BAND_COUNT],
    pub psf_sigma_px: f64,
    pub prior: Prior,
    pub clustering: ClusterConfig,
    /// Scatter of the initial catalog around the truth.
    pub init_noise: InitNoise,
    pub seed: u64,
}

/// How far the initial catalog handed to inference strays from the truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitNoise {
    pub position_px: f64,
    pub log_flux: f64,
    pub color: f64,
}

impl Default for InitNoise {
    fn default() -> Self {
        Self { position_px: 0.5, log_flux: 0.2, color: 0.1 }
    }
}

impl Default for SurveyConfig {
    fn default() -> Self {
        Self {
            sources: 200,
            fields: 5,
            width: 256,
            height: 256,
            pixel_scale_arcsec: 0.396,
            sky: [100.0; BAND_COUNT],
            psf_sigma_px: 1.4,
            prior: Prior::default(),
            clustering: ClusterConfig::default(),
            init_noise: InitNoise::default(),
            seed: 0,
        }
    }
}

/// Field grid: the most nearly square `rows x cols` factorization.
pub fn field_grid(fields: usize) -> (usize, usize) {
    let mut rows = (fields as f64).sqrt().floor() as usize;
    while rows > 1 && fields % rows != 0 {
        rows -= 1;
    }
    let rows = rows.max(1);
    (rows, fields / rows)
}

#[derive(Clone, Debug)]
pub struct Survey {
    /// Field-major, band-minor: image `5 f + b` is field `f` in band `b`.
    pub images: Vec<Image>,
    pub truth: Vec<SourceEntry>,
    /// Perturbed copy of the truth used to start inference.
    pub initial: Vec<SourceEntry>,
    pub region: SkyRegion,
}

/// Sky origin of the field grid, degrees.
const ORIGIN: [f64; 2] = [30.0, 0.0];

pub fn generate(cfg: &SurveyConfig) -> Result<Survey> {
    ensure!(cfg.fields >= 1, "need at least one field");
    ensure!(cfg.width >= 1 && cfg.height >= 1, "field dimensions must be positive");
    ensure!(cfg.pixel_scale_arcsec > 0.0, "pixel scale must be positive");
    let (rows, cols) = field_grid(cfg.fields);
    let deg = cfg.pixel_scale_arcsec / ARCSEC_PER_DEGREE;
    let (fw, fh) = (cfg.width as f64 * deg, cfg.height as f64 * deg);
    // Pixel centers run from -0.5 to width - 0.5 around each field's corner.
    let region = SkyRegion {
        ra: (ORIGIN[0] - 0.5 * deg, ORIGIN[0] - 0.5 * deg + cols as f64 * fw),
        dec: (ORIGIN[1] - 0.5 * deg, ORIGIN[1] - 0.5 * deg + rows as f64 * fh),
    };
    let truth_params = sky::sample_catalog(&cfg.prior, &region, cfg.sources, &cfg.clustering, cfg.seed)?;
    let psf = PsfModel::gaussian(cfg.psf_sigma_px)?;
    let mut images = Vec::with_capacity(cfg.fields * BAND_COUNT);
    for f in 0..cfg.fields {
        let (r, c) = (f / cols, f % cols);
        let crval = [ORIGIN[0] + c as f64 * fw, ORIGIN[1] + r as f64 * fh];
        let wcs = Wcs::new([[deg, 0.0], [0.0, deg]], crval, [1.0, 1.0])?;
        for band in Band::all() {
            let meta = ImageMetadata {
                id: (f * BAND_COUNT + band.index()) as u64,
                band,
                width: cfg.width,
                height: cfg.height,
                sky_background: cfg.sky[band.index()],
                psf: psf.clone(),
                wcs,
            };
            // Only sources that can reach the field contribute light.
            let margin = 20.0 * cfg.psf_sigma_px.max(1.0) * deg;
            let nearby: Vec<SourceParams> = truth_params
                .iter()
                .filter(|s| {
                    let m = margin + 20.0 * s.shape.scale / ARCSEC_PER_DEGREE;
                    s.position[0] > crval[0] - m
                        && s.position[0] < crval[0] + fw + m
                        && s.position[1] > crval[1] - m
                        && s.position[1] < crval[1] + fh + m
                })
                .copied()
                .collect();
            let seed = cfg.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(meta.id + 1));
            images.push(sky::sample_image(&nearby, &meta, seed)?);
        }
    }
    let truth: Vec<SourceEntry> =
        truth_params.into_iter().enumerate().map(|(i, params)| SourceEntry { id: i as u64, params }).collect();
    let initial = perturb(&truth, cfg.init_noise, cfg.pixel_scale_arcsec, cfg.seed.wrapping_add(1));
    Ok(Survey { images, truth, initial, region })
}

/// Jitter positions, fluxes and colors; shapes are nudged within bounds.
pub fn perturb(truth: &[SourceEntry], noise: InitNoise, pixel_scale_arcsec: f64, seed: u64) -> Vec<SourceEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let pos = noise.position_px * pixel_scale_arcsec / ARCSEC_PER_DEGREE;
    truth
        .iter()
        .map(|e| {
            let p = &e.params;
            let s = &p.shape;
            let params = SourceParams {
                is_star: p.is_star,
                ref_flux: p.ref_flux * (noise.log_flux * n.sample(&mut rng)).exp(),
                colors: p.colors.map(|c| c + noise.color * n.sample(&mut rng)),
                position: [p.position[0] + pos * n.sample(&mut rng), p.position[1] + pos * n.sample(&mut rng)],
                shape: GalaxyShape {
                    profile_mix: (s.profile_mix + 0.1 * n.sample(&mut rng)).clamp(0.0, 1.0),
                    scale: s.scale * (0.1 * n.sample(&mut rng)).exp(),
                    axis_ratio: (s.axis_ratio + 0.05 * n.sample(&mut rng)).clamp(0.05, 1.0),
                    angle: (s.angle + rng.random_range(-10.0..10.0)).rem_euclid(180.0),
                },
            };
            SourceEntry { id: e.id, params }
        })
        .collect()
}

/// File name of field `field` in `band`: `<run>-<band>.fits`.
pub fn image_file_name(field: usize, band: Band) -> String {
    format!("{field:06}-{}.fits", band.letter())
}

pub const TRUTH_FILE: &str = "truth.csv";
pub const INITIAL_FILE: &str = "catalog.csv";

/// Write every image, the truth and the initial catalog under `dir`.
pub fn write_survey(survey: &Survey, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut paths = Vec::new();
    for img in &survey.images {
        let field = img.meta.id as usize / BAND_COUNT;
        let path = dir.join(image_file_name(field, img.meta.band));
        catalog_io::write_atomic(&path, &fits::write_image(img))?;
        paths.push(path);
    }
    catalog_io::write_catalog(&dir.join(TRUTH_FILE), &survey.truth)?;
    catalog_io::write_catalog(&dir.join(INITIAL_FILE), &survey.initial)?;
    Ok(paths)
}

/// FITS files in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("fits")))
        .collect();
    v.sort();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        assert_eq!(field_grid(1), (1, 1));
        assert_eq!(field_grid(5), (1, 5));
        assert_eq!(field_grid(12), (3, 4));
        assert_eq!(field_grid(64), (8, 8));
    }

    #[test]
    fn every_source_lies_in_exactly_one_field() {
        let cfg = SurveyConfig { sources: 300, fields: 6, width: 40, height: 30, seed: 2, ..SurveyConfig::default() };
        let s = generate(&cfg).unwrap();
        assert_eq!(s.images.len(), 30);
        for e in &s.truth {
            let n = s.images.iter().filter(|i| i.meta.band == Band::REFERENCE && i.meta.contains_world(e.params.position)).count();
            assert_eq!(n, 1, "{:?}", e.params.position);
        }
    }

    #[test]
    fn generation_is_deterministic_and_lit() {
        let cfg = SurveyConfig { sources: 20, fields: 2, width: 48, height: 48, seed: 9, ..SurveyConfig::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.initial, b.initial);
        let total: f64 = a.images.iter().flat_map(|i| i.pixels.iter()).map(|&p| p as f64).sum();
        let sky: f64 = a.images.iter().map(|i| i.meta.sky_background * i.pixels.len() as f64).sum();
        assert!(total > sky * 1.001);
    }
}
