//! The generative sky model: source parameterization, priors, image metadata
//! and the Poisson pixel-rate renderer.
//!
//! World coordinates are flat (ra, dec) in degrees. Pixel coordinates are
//! zero-based `(x, y) = (column, row)` with pixel centers on integers.

use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods whenever std is linked
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, LogNormal, Normal, Poisson};

use crate::profiles::{self, Profile};

pub const BAND_COUNT: usize = 5;
pub const COLOR_COUNT: usize = 4;
pub const ARCSEC_PER_DEGREE: f64 = 3600.0;

/// Mahalanobis distance squared beyond which a Gaussian component is not
/// evaluated (the density has fallen below exp(-50) of its peak).
pub(crate) const COMPONENT_CUTOFF: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("band index {0} outside 0..5")]
    InvalidBand(usize),
    #[error("degenerate galaxy shape (scale and axis ratio must be positive)")]
    DegenerateShape,
    #[error("galaxy shape parameter {0} out of bounds")]
    ShapeOutOfBounds(&'static str),
    #[error("reference flux must be positive")]
    NonPositiveFlux,
    #[error("PSF must have positive weights summing to one")]
    InvalidPsf,
    #[error("WCS matrix is singular")]
    SingularWcs,
    #[error("sky region is empty")]
    EmptyRegion,
    #[error("invalid prior: {0}")]
    InvalidPrior(&'static str),
    #[error("invalid image: {0}")]
    InvalidImage(&'static str),
    #[error("pixel ({row}, {col}) outside the image")]
    PixelOutOfBounds { row: usize, col: usize },
}

/// One of the five filter bands, ordered by wavelength.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Band(u8);

impl Band {
    pub const REFERENCE: Band = Band(2);
    const LETTERS: [char; BAND_COUNT] = ['u', 'g', 'r', 'i', 'z'];

    pub fn new(index: usize) -> Result<Self, ModelError> {
        if index < BAND_COUNT {
            Ok(Band(index as u8))
        } else {
            Err(ModelError::InvalidBand(index))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = Band> {
        (0..BAND_COUNT as u8).map(Band)
    }

    pub fn letter(self) -> char {
        Self::LETTERS[self.index()]
    }

    pub fn from_letter(c: char) -> Option<Band> {
        Self::LETTERS.iter().position(|&l| l == c).map(|i| Band(i as u8))
    }

    /// Coefficient of each color in this band's log flux relative to the
    /// reference band: +1 for colors between the reference band and a redder
    /// band, -1 between a bluer band and the reference band, 0 otherwise.
    pub fn color_coefficients(self) -> [f64; COLOR_COUNT] {
        let b = self.index();
        let r = Band::REFERENCE.index();
        let mut coef = [0.0; COLOR_COUNT];
        for (j, c) in coef.iter_mut().enumerate() {
            if b > r && (r..b).contains(&j) {
                *c = 1.0;
            } else if b < r && (b..r).contains(&j) {
                *c = -1.0;
            }
        }
        coef
    }
}

/// Galaxy morphology. `scale` is the effective radius in arcseconds and
/// `angle` the major-axis position angle in degrees, measured from the +ra
/// axis towards +dec, modulo 180.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GalaxyShape {
    /// Weight on the de Vaucouleurs profile; the rest is exponential.
    pub profile_mix: f64,
    pub scale: f64,
    pub axis_ratio: f64,
    pub angle: f64,
}

impl Default for GalaxyShape {
    fn default() -> Self {
        Self {
            profile_mix: 0.5,
            scale: 1.5,
            axis_ratio: 0.8,
            angle: 45.0,
        }
    }
}

impl GalaxyShape {
    pub fn validate(&self) -> Result<(), ModelError> {
        let vals = [self.profile_mix, self.scale, self.axis_ratio, self.angle];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("galaxy shape"));
        }
        if self.scale <= 0.0 || self.axis_ratio <= 0.0 {
            return Err(ModelError::DegenerateShape);
        }
        if !(0.0..=1.0).contains(&self.profile_mix) {
            return Err(ModelError::ShapeOutOfBounds("profile_mix"));
        }
        if self.axis_ratio > 1.0 {
            return Err(ModelError::ShapeOutOfBounds("axis_ratio"));
        }
        Ok(())
    }
}

/// A ground-truth catalog entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceParams {
    pub is_star: bool,
    /// Reference-band flux in expected photon counts.
    pub ref_flux: f64,
    /// Log flux ratios of adjacent bands.
    pub colors: [f64; COLOR_COUNT],
    /// (ra, dec) in degrees.
    pub position: [f64; 2],
    /// Ignored for stars.
    pub shape: GalaxyShape,
}

impl SourceParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.ref_flux.is_finite() || self.colors.iter().any(|c| !c.is_finite()) {
            return Err(ModelError::NonFinite("source brightness"));
        }
        if self.ref_flux <= 0.0 {
            return Err(ModelError::NonPositiveFlux);
        }
        if self.position.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::NonFinite("source position"));
        }
        if !self.is_star {
            self.shape.validate()?;
        }
        Ok(())
    }

    pub fn band_fluxes(&self) -> Result<[f64; BAND_COUNT], ModelError> {
        band_fluxes(self.ref_flux, &self.colors)
    }
}

/// Fluxes in all five bands from the reference-band flux and the colors.
pub fn band_fluxes(ref_flux: f64, colors: &[f64; COLOR_COUNT]) -> Result<[f64; BAND_COUNT], ModelError> {
    if !ref_flux.is_finite() || colors.iter().any(|c| !c.is_finite()) {
        return Err(ModelError::NonFinite("band_fluxes input"));
    }
    if ref_flux <= 0.0 {
        return Err(ModelError::NonPositiveFlux);
    }
    let r = Band::REFERENCE.index();
    let mut b = [0.0; BAND_COUNT];
    b[r] = ref_flux;
    for j in r..COLOR_COUNT {
        b[j + 1] = b[j] * colors[j].exp();
    }
    for j in (0..r).rev() {
        b[j] = b[j + 1] / colors[j].exp();
    }
    Ok(b)
}

/// Per-type prior on brightness and colors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TypePrior {
    pub log_flux_mean: f64,
    pub log_flux_var: f64,
    pub color_mean: [f64; COLOR_COUNT],
    pub color_var: [f64; COLOR_COUNT],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prior {
    pub p_star: f64,
    pub star: TypePrior,
    pub galaxy: TypePrior,
}

impl Default for Prior {
    fn default() -> Self {
        Self {
            p_star: 0.5,
            star: TypePrior {
                log_flux_mean: 8.0,
                log_flux_var: 1.0,
                color_mean: [0.9, 0.35, 0.12, 0.05],
                color_var: [0.04, 0.02, 0.02, 0.02],
            },
            galaxy: TypePrior {
                log_flux_mean: 8.0,
                log_flux_var: 1.0,
                color_mean: [1.2, 0.6, 0.3, 0.2],
                color_var: [0.09, 0.04, 0.04, 0.04],
            },
        }
    }
}

impl Prior {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.p_star > 0.0 && self.p_star < 1.0) {
            return Err(ModelError::InvalidPrior("p_star must lie in (0, 1)"));
        }
        self.validate_factors()
    }

    fn validate_factors(&self) -> Result<(), ModelError> {
        for t in [&self.star, &self.galaxy] {
            let finite = t.log_flux_mean.is_finite()
                && t.color_mean.iter().all(|c| c.is_finite())
                && t.log_flux_var.is_finite()
                && t.color_var.iter().all(|c| c.is_finite());
            if !finite {
                return Err(ModelError::InvalidPrior("non-finite parameter"));
            }
            if t.log_flux_var <= 0.0 || t.color_var.iter().any(|&v| v <= 0.0) {
                return Err(ModelError::InvalidPrior("variances must be positive"));
            }
        }
        Ok(())
    }

    pub fn for_type(&self, is_star: bool) -> &TypePrior {
        if is_star {
            &self.star
        } else {
            &self.galaxy
        }
    }
}

/// Isotropic Gaussian PSF component; `sigma` in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsfComponent {
    pub weight: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsfModel {
    components: Vec<PsfComponent>,
}

impl PsfModel {
    pub fn new(components: Vec<PsfComponent>) -> Result<Self, ModelError> {
        if components.is_empty() {
            return Err(ModelError::InvalidPsf);
        }
        let ok = components
            .iter()
            .all(|c| c.weight > 0.0 && c.sigma > 0.0 && c.weight.is_finite() && c.sigma.is_finite());
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !ok || (total - 1.0).abs() > 1e-12 {
            return Err(ModelError::InvalidPsf);
        }
        Ok(Self { components })
    }

    pub fn gaussian(sigma: f64) -> Result<Self, ModelError> {
        Self::new(alloc::vec![PsfComponent { weight: 1.0, sigma }])
    }

    pub fn components(&self) -> &[PsfComponent] {
        &self.components
    }

    pub fn max_sigma(&self) -> f64 {
        self.components.iter().map(|c| c.sigma).fold(0.0, f64::max)
    }
}

/// Affine world-to-pixel transform in FITS convention: `cd` maps pixel
/// offsets to degrees and `crpix` is one-based.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wcs {
    pub cd: [[f64; 2]; 2],
    pub crval: [f64; 2],
    pub crpix: [f64; 2],
}

impl Wcs {
    pub fn new(cd: [[f64; 2]; 2], crval: [f64; 2], crpix: [f64; 2]) -> Result<Self, ModelError> {
        let w = Self { cd, crval, crpix };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let det = self.cd[0][0] * self.cd[1][1] - self.cd[0][1] * self.cd[1][0];
        if !det.is_finite() || det == 0.0 {
            return Err(ModelError::SingularWcs);
        }
        Ok(())
    }

    /// Inverse of `cd`: pixels per degree.
    pub fn pixels_per_degree(&self) -> [[f64; 2]; 2] {
        let [[a, b], [c, d]] = self.cd;
        let det = a * d - b * c;
        [[d / det, -b / det], [-c / det, a / det]]
    }

    /// Linear part of the transform in pixels per arcsecond.
    pub fn pixels_per_arcsec(&self) -> [[f64; 2]; 2] {
        let m = self.pixels_per_degree();
        let k = 1.0 / ARCSEC_PER_DEGREE;
        [[m[0][0] * k, m[0][1] * k], [m[1][0] * k, m[1][1] * k]]
    }

    /// Mean linear pixel size in arcseconds.
    pub fn pixel_scale_arcsec(&self) -> f64 {
        let det = self.cd[0][0] * self.cd[1][1] - self.cd[0][1] * self.cd[1][0];
        det.abs().sqrt() * ARCSEC_PER_DEGREE
    }

    pub fn world_to_pixel(&self, world: [f64; 2]) -> [f64; 2] {
        let m = self.pixels_per_degree();
        let dx = world[0] - self.crval[0];
        let dy = world[1] - self.crval[1];
        [
            m[0][0] * dx + m[0][1] * dy + self.crpix[0] - 1.0,
            m[1][0] * dx + m[1][1] * dy + self.crpix[1] - 1.0,
        ]
    }

    pub fn pixel_to_world(&self, pixel: [f64; 2]) -> [f64; 2] {
        let dx = pixel[0] + 1.0 - self.crpix[0];
        let dy = pixel[1] + 1.0 - self.crpix[1];
        [
            self.cd[0][0] * dx + self.cd[0][1] * dy + self.crval[0],
            self.cd[1][0] * dx + self.cd[1][1] * dy + self.crval[1],
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetadata {
    pub id: u64,
    pub band: Band,
    pub width: usize,
    pub height: usize,
    /// Expected sky counts per pixel.
    pub sky_background: f64,
    pub psf: PsfModel,
    pub wcs: Wcs,
}

impl ImageMetadata {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.width == 0 || self.height == 0 {
            return Err(ModelError::InvalidImage("dimensions must be at least 1"));
        }
        if !(self.sky_background >= 0.0 && self.sky_background.is_finite()) {
            return Err(ModelError::InvalidImage("sky background must be finite and >= 0"));
        }
        self.wcs.validate()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Whether a world position projects inside the pixel grid (including
    /// the half-pixel border).
    pub fn contains_world(&self, world: [f64; 2]) -> bool {
        let [x, y] = self.wcs.world_to_pixel(world);
        x >= -0.5 && y >= -0.5 && x < self.width as f64 - 0.5 && y < self.height as f64 - 0.5
    }
}

/// An observed image: row-major counts, `pixels[row * width + col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub meta: ImageMetadata,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(meta: ImageMetadata, pixels: Vec<f32>) -> Result<Self, ModelError> {
        meta.validate()?;
        if pixels.len() != meta.pixel_count() {
            return Err(ModelError::InvalidImage("pixel count does not match dimensions"));
        }
        if pixels.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(ModelError::InvalidImage("counts must be finite and non-negative"));
        }
        Ok(Self { meta, pixels })
    }

    pub fn count(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.meta.width + col]
    }
}

/// A bivariate Gaussian density in pixel coordinates, scaled by `weight`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelGaussian {
    pub center: [f64; 2],
    /// Precision matrix entries (xx, xy, yy).
    pub precision: [f64; 3],
    /// log(weight / (2 pi sqrt(det cov))).
    pub log_norm: f64,
    /// Largest covariance eigenvalue, for bounding boxes.
    pub max_var: f64,
}

impl PixelGaussian {
    fn from_covariance(center: [f64; 2], cov: [f64; 3], weight: f64) -> Self {
        let [sxx, sxy, syy] = cov;
        let det = sxx * syy - sxy * sxy;
        let half_tr = 0.5 * (sxx + syy);
        let max_var = half_tr + (half_tr * half_tr - det).max(0.0).sqrt();
        Self {
            center,
            precision: [syy / det, -sxy / det, sxx / det],
            log_norm: weight.ln() - (2.0 * core::f64::consts::PI).ln() - 0.5 * det.ln(),
            max_var,
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        let [a, b, c] = self.precision;
        let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        if q > COMPONENT_CUTOFF {
            0.0
        } else {
            (self.log_norm - 0.5 * q).exp()
        }
    }
}

/// Galaxy covariance in arcsec^2 for profile variance `nu` (units of the
/// squared effective radius), as (xx, xy, yy) in world axes.
pub(crate) fn galaxy_world_covariance(shape: &GalaxyShape, nu: f64) -> [f64; 3] {
    let phi = shape.angle.to_radians();
    let (s, c) = phi.sin_cos();
    let r2 = shape.axis_ratio * shape.axis_ratio;
    let k = nu * shape.scale * shape.scale;
    [k * (c * c + r2 * s * s), k * c * s * (1.0 - r2), k * (s * s + r2 * c * c)]
}

/// Map a world covariance (arcsec^2) through the linear part `m` of the WCS.
pub(crate) fn to_pixel_covariance(m: &[[f64; 2]; 2], cov: [f64; 3]) -> [f64; 3] {
    let [sxx, sxy, syy] = cov;
    // M S M^T for symmetric S.
    let ms00 = m[0][0] * sxx + m[0][1] * sxy;
    let ms01 = m[0][0] * sxy + m[0][1] * syy;
    let ms10 = m[1][0] * sxx + m[1][1] * sxy;
    let ms11 = m[1][0] * sxy + m[1][1] * syy;
    [
        ms00 * m[0][0] + ms01 * m[0][1],
        ms00 * m[1][0] + ms01 * m[1][1],
        ms10 * m[1][0] + ms11 * m[1][1],
    ]
}

/// The unit-flux appearance of a source in one image as a Gaussian mixture in
/// pixel coordinates: the PSF for a star, the profile mixture convolved with
/// the PSF for a galaxy.
pub fn source_gaussians(
    is_star: bool,
    position: [f64; 2],
    shape: &GalaxyShape,
    meta: &ImageMetadata,
) -> Result<Vec<PixelGaussian>, ModelError> {
    if position.iter().any(|p| !p.is_finite()) {
        return Err(ModelError::NonFinite("source position"));
    }
    let center = meta.wcs.world_to_pixel(position);
    let psf = meta.psf.components();
    if is_star {
        return Ok(psf
            .iter()
            .map(|c| {
                let v = c.sigma * c.sigma;
                PixelGaussian::from_covariance(center, [v, 0.0, v], c.weight)
            })
            .collect());
    }
    shape.validate()?;
    let m = meta.wcs.pixels_per_arcsec();
    let mut out = Vec::with_capacity(profiles::COMPONENT_COUNT * psf.len());
    for (profile, amp, nu) in profiles::components() {
        let mix = match profile {
            Profile::Exponential => 1.0 - shape.profile_mix,
            Profile::DeVaucouleurs => shape.profile_mix,
        };
        if mix <= 0.0 {
            continue;
        }
        let gal = to_pixel_covariance(&m, galaxy_world_covariance(shape, nu));
        for c in psf {
            let v = c.sigma * c.sigma;
            let cov = [gal[0] + v, gal[1], gal[2] + v];
            out.push(PixelGaussian::from_covariance(center, cov, mix * amp * c.weight));
        }
    }
    Ok(out)
}

/// Expected counts at `pixel = (row, col)` from a unit-flux source.
pub fn unit_flux_pixel_weight(
    source: &SourceParams,
    meta: &ImageMetadata,
    pixel: (usize, usize),
) -> Result<f64, ModelError> {
    let (row, col) = pixel;
    if row >= meta.height || col >= meta.width {
        return Err(ModelError::PixelOutOfBounds { row, col });
    }
    let comps = source_gaussians(source.is_star, source.position, &source.shape, meta)?;
    Ok(comps.iter().map(|g| g.eval(col as f64, row as f64)).sum())
}

/// Poisson rate at one pixel: sky plus every source's flux times its weight.
pub fn expected_rate(
    catalog: &[SourceParams],
    meta: &ImageMetadata,
    pixel: (usize, usize),
) -> Result<f64, ModelError> {
    let band = meta.band.index();
    let mut rate = meta.sky_background;
    for s in catalog {
        s.validate()?;
        let b = s.band_fluxes()?[band];
        rate += b * unit_flux_pixel_weight(s, meta, pixel)?;
    }
    Ok(rate)
}

/// A rectangular pixel window: rows `row0..row0 + rows`, columns
/// `col0..col0 + cols`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Window {
    pub fn full(meta: &ImageMetadata) -> Self {
        Self {
            row0: 0,
            col0: 0,
            rows: meta.height,
            cols: meta.width,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row < self.row0 + self.rows && col >= self.col0 && col < self.col0 + self.cols
    }
}

/// Add `flux` times the mixture `comps` into the row-major buffer `out`
/// covering `window`, visiting only pixels where some component is above the
/// cutoff.
pub(crate) fn accumulate_gaussians(comps: &[PixelGaussian], flux: f64, window: Window, out: &mut [f64]) {
    if window.is_empty() {
        return;
    }
    let (wx0, wy0) = (window.col0 as f64, window.row0 as f64);
    let (wx1, wy1) = (wx0 + window.cols as f64 - 1.0, wy0 + window.rows as f64 - 1.0);
    for g in comps {
        let reach = COMPONENT_CUTOFF.sqrt() * g.max_var.sqrt();
        let x0 = (g.center[0] - reach).floor().max(wx0);
        let x1 = (g.center[0] + reach).ceil().min(wx1);
        let y0 = (g.center[1] - reach).floor().max(wy0);
        let y1 = (g.center[1] + reach).ceil().min(wy1);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for row in y0 as usize..=y1 as usize {
            let base = (row - window.row0) * window.cols;
            for col in x0 as usize..=x1 as usize {
                out[base + col - window.col0] += flux * g.eval(col as f64, row as f64);
            }
        }
    }
}

/// Poisson rate at every pixel of the image described by `meta`.
pub fn render_rate(catalog: &[SourceParams], meta: &ImageMetadata) -> Result<Vec<f64>, ModelError> {
    meta.validate()?;
    let mut rate = alloc::vec![meta.sky_background; meta.pixel_count()];
    let band = meta.band.index();
    for s in catalog {
        s.validate()?;
        let b = s.band_fluxes()?[band];
        let comps = source_gaussians(s.is_star, s.position, &s.shape, meta)?;
        accumulate_gaussians(&comps, b, Window::full(meta), &mut rate);
    }
    Ok(rate)
}

/// Draw an image with independent Poisson counts at every pixel.
pub fn sample_image(catalog: &[SourceParams], meta: &ImageMetadata, seed: u64) -> Result<Image, ModelError> {
    let rate = render_rate(catalog, meta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = rate
        .iter()
        .map(|&lambda| {
            if lambda > 0.0 {
                Poisson::new(lambda).map(|d| d.sample(&mut rng) as f32).unwrap_or(0.0)
            } else {
                0.0
            }
        })
        .collect();
    Image::new(meta.clone(), pixels)
}

/// Axis-aligned world rectangle, degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkyRegion {
    pub ra: (f64, f64),
    pub dec: (f64, f64),
}

impl SkyRegion {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.ra.1 > self.ra.0 && self.dec.1 > self.dec.0;
        if !ok || ![self.ra.0, self.ra.1, self.dec.0, self.dec.1].iter().all(|v| v.is_finite()) {
            return Err(ModelError::EmptyRegion);
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.ra.0 && p[0] < self.ra.1 && p[1] >= self.dec.0 && p[1] < self.dec.1
    }
}

/// Spatial clustering of sampled positions: with probability `weight` a
/// source is drawn around one of `count` uniformly placed centers with
/// isotropic standard deviation `sigma` (degrees).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterConfig {
    pub weight: f64,
    pub count: usize,
    pub sigma: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            weight: 0.0,
            count: 0,
            sigma: 0.0,
        }
    }
}

fn uniform_in(region: &SkyRegion, rng: &mut ChaCha8Rng) -> [f64; 2] {
    [
        rng.random_range(region.ra.0..region.ra.1),
        rng.random_range(region.dec.0..region.dec.1),
    ]
}

/// Draw a catalog of `count` sources from the prior.
///
/// Galaxy shapes follow fixed defaults: scale lognormal(log 1.5", 0.5^2),
/// axis ratio uniform on (0.2, 1], angle uniform on [0, 180) and profile
/// mix Beta(0.5, 0.5).
pub fn sample_catalog(
    prior: &Prior,
    region: &SkyRegion,
    count: usize,
    clustering: &ClusterConfig,
    seed: u64,
) -> Result<Vec<SourceParams>, ModelError> {
    region.validate()?;
    // Sampling tolerates the degenerate endpoints of p_star.
    if !(0.0..=1.0).contains(&prior.p_star) {
        return Err(ModelError::InvalidPrior("p_star must lie in [0, 1]"));
    }
    prior.validate_factors()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let use_clusters = clustering.weight > 0.0 && clustering.count > 0 && clustering.sigma > 0.0;
    let centers: Vec<[f64; 2]> = if use_clusters {
        (0..clustering.count).map(|_| uniform_in(region, &mut rng)).collect()
    } else {
        Vec::new()
    };
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let scale_dist = LogNormal::new(1.5f64.ln(), 0.5).expect("valid lognormal");
    let mix_dist = Beta::new(0.5, 0.5).expect("valid beta");

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let is_star = rng.random_bool(prior.p_star);
        let tp = prior.for_type(is_star);
        let log_flux = tp.log_flux_mean + tp.log_flux_var.sqrt() * unit.sample(&mut rng);
        let mut colors = [0.0; COLOR_COUNT];
        for (j, c) in colors.iter_mut().enumerate() {
            *c = tp.color_mean[j] + tp.color_var[j].sqrt() * unit.sample(&mut rng);
        }
        let position = if use_clusters && rng.random_bool(clustering.weight.min(1.0)) {
            let center = centers[rng.random_range(0..centers.len())];
            let mut p = None;
            for _ in 0..100 {
                let cand = [
                    center[0] + clustering.sigma * unit.sample(&mut rng),
                    center[1] + clustering.sigma * unit.sample(&mut rng),
                ];
                if region.contains(cand) {
                    p = Some(cand);
                    break;
                }
            }
            p.unwrap_or_else(|| uniform_in(region, &mut rng))
        } else {
            uniform_in(region, &mut rng)
        };
        let shape = GalaxyShape {
            profile_mix: mix_dist.sample(&mut rng),
            scale: scale_dist.sample(&mut rng),
            axis_ratio: 1.0 - rng.random_range(0.0..0.8),
            angle: rng.random_range(0.0..180.0),
        };
        out.push(SourceParams {
            is_star,
            ref_flux: log_flux.exp(),
            colors,
            position,
            shape,
        });
    }
    Ok(out)
}
