//! The per-source variational objective.
//!
//! For one target source, with every neighbor held at its catalog estimate,
//! [`elbo`] returns the evidence lower bound together with its exact gradient
//! and dense Hessian in the unconstrained parameterization. The expected log
//! likelihood uses a second-order expansion of `E[log F]` around `E[F]`, which
//! keeps every term in closed form.
//!
//! Parameter layout (27 coordinates, see [`index`]):
//!
//! | coords | quantity | unconstrained map |
//! |---|---|---|
//! | 0 | `p_star` | logit |
//! | 1, 2 | star log-flux mean, variance | identity, log |
//! | 3, 4 | galaxy log-flux mean, variance | identity, log |
//! | 5..9, 9..13 | star color means, variances | identity, log |
//! | 13..17, 17..21 | galaxy color means, variances | identity, log |
//! | 21, 22 | position (ra, dec) | degrees to arcseconds |
//! | 23 | profile mix | logit |
//! | 24 | galaxy scale | log of the excess over [`MIN_GALAXY_SCALE`] |
//! | 25 | axis ratio | logit |
//! | 26 | angle | logit(angle / 180) |

use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{SMatrix, SVector};
#[allow(unused_imports)] // shadowed by inherent methods whenever std is linked
use num_traits::Float;

use crate::jet::Jet;
use crate::profiles::{self, Profile};
use crate::sky::{
    self, Band, GalaxyShape, Image, ImageMetadata, ModelError, Prior, SourceParams, TypePrior, Window,
    ARCSEC_PER_DEGREE, COLOR_COUNT, COMPONENT_CUTOFF,
};

pub const PARAM_COUNT: usize = 27;
pub type ParamVector = SVector<f64, PARAM_COUNT>;
pub type ParamMatrix = SMatrix<f64, PARAM_COUNT, PARAM_COUNT>;

/// Offsets into the parameter vector.
pub mod index {
    pub const P_STAR: usize = 0;
    pub const STAR_LOG_FLUX_LOC: usize = 1;
    pub const STAR_LOG_FLUX_VAR: usize = 2;
    pub const GAL_LOG_FLUX_LOC: usize = 3;
    pub const GAL_LOG_FLUX_VAR: usize = 4;
    pub const STAR_COLOR_LOC: usize = 5;
    pub const STAR_COLOR_VAR: usize = 9;
    pub const GAL_COLOR_LOC: usize = 13;
    pub const GAL_COLOR_VAR: usize = 17;
    pub const POSITION: usize = 21;
    pub const PROFILE_MIX: usize = 23;
    pub const SCALE: usize = 24;
    pub const AXIS_RATIO: usize = 25;
    pub const ANGLE: usize = 26;
}

/// Pixels within this many combined (PSF + galaxy) standard deviations of the
/// target's projected position form its patch.
pub const PATCH_SIGMAS: f64 = 4.0;

/// Smallest galaxy effective radius (arcsec) the optimizer may reach. Without
/// a floor a vanishing galaxy imitates a star and the type is unidentified.
pub const MIN_GALAXY_SCALE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ElboError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid variational parameters: {0}")]
    InvalidParams(&'static str),
    #[error("expected pixel rate is not positive")]
    NonPositiveRate,
    #[error("objective evaluation produced a non-finite value")]
    NonFinite,
    #[error("pixel is outside every patch")]
    OutsidePatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceType {
    Star,
    Galaxy,
}

/// Lognormal brightness and diagonal Gaussian colors for one source type.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TypeFactor {
    pub log_flux_loc: f64,
    pub log_flux_var: f64,
    pub color_loc: [f64; COLOR_COUNT],
    pub color_var: [f64; COLOR_COUNT],
}

impl TypeFactor {
    /// Mean and variance of the log flux in `band`.
    pub fn log_flux_moments(&self, band: Band) -> (f64, f64) {
        let coef = band.color_coefficients();
        let mut m = self.log_flux_loc;
        let mut v = self.log_flux_var;
        for j in 0..COLOR_COUNT {
            m += coef[j] * self.color_loc[j];
            v += coef[j].abs() * self.color_var[j];
        }
        (m, v)
    }

    fn from_prior(p: &TypePrior) -> Self {
        Self {
            log_flux_loc: p.log_flux_mean,
            log_flux_var: p.log_flux_var,
            color_loc: p.color_mean,
            color_var: p.color_var,
        }
    }
}

/// Variational distribution for one source plus its point-estimated geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariationalParams {
    pub p_star: f64,
    pub star: TypeFactor,
    pub galaxy: TypeFactor,
    pub position: [f64; 2],
    pub shape: GalaxyShape,
}

impl VariationalParams {
    /// Starting point for a source with catalog estimate `src`: even odds on
    /// the type, both brightness factors centered on the estimate with the
    /// given variances.
    pub fn initialize(src: &SourceParams, log_flux_var: f64, color_var: f64) -> Self {
        let factor = TypeFactor {
            log_flux_loc: src.ref_flux.ln(),
            log_flux_var,
            color_loc: src.colors,
            color_var: [color_var; COLOR_COUNT],
        };
        let s = src.shape;
        let shape = GalaxyShape {
            profile_mix: s.profile_mix.clamp(0.01, 0.99),
            scale: s.scale.max(2.0 * MIN_GALAXY_SCALE),
            axis_ratio: s.axis_ratio.clamp(0.05, 0.99),
            angle: (s.angle - 180.0 * (s.angle / 180.0).floor()).clamp(0.5, 179.5),
        };
        Self {
            p_star: 0.5,
            star: factor,
            galaxy: factor,
            position: src.position,
            shape,
        }
    }

    /// Variational parameters equal to the prior (position and shape given).
    pub fn from_prior(prior: &Prior, position: [f64; 2], shape: GalaxyShape) -> Self {
        Self {
            p_star: prior.p_star,
            star: TypeFactor::from_prior(&prior.star),
            galaxy: TypeFactor::from_prior(&prior.galaxy),
            position,
            shape,
        }
    }

    pub fn factor(&self, t: SourceType) -> &TypeFactor {
        match t {
            SourceType::Star => &self.star,
            SourceType::Galaxy => &self.galaxy,
        }
    }

    pub fn validate(&self) -> Result<(), ElboError> {
        if !(self.p_star > 0.0 && self.p_star < 1.0) {
            return Err(ElboError::InvalidParams("p_star must lie in (0, 1)"));
        }
        if self.natural().iter().any(|v| !v.is_finite()) {
            return Err(ElboError::InvalidParams("non-finite entry"));
        }
        for f in [&self.star, &self.galaxy] {
            if f.log_flux_var <= 0.0 || f.color_var.iter().any(|&v| v <= 0.0) {
                return Err(ElboError::InvalidParams("variances must be positive"));
            }
        }
        self.shape.validate()?;
        if !(self.shape.scale > MIN_GALAXY_SCALE) {
            return Err(ElboError::InvalidParams("galaxy scale at or below its floor"));
        }
        if !(0.0..180.0).contains(&self.shape.angle) {
            return Err(ElboError::InvalidParams("angle must lie in [0, 180)"));
        }
        Ok(())
    }

    /// The parameters as a flat vector in natural (constrained) units.
    pub fn natural(&self) -> ParamVector {
        use index::*;
        let mut v = ParamVector::zeros();
        v[P_STAR] = self.p_star;
        for (f, loc, var, cloc, cvar) in [
            (&self.star, STAR_LOG_FLUX_LOC, STAR_LOG_FLUX_VAR, STAR_COLOR_LOC, STAR_COLOR_VAR),
            (&self.galaxy, GAL_LOG_FLUX_LOC, GAL_LOG_FLUX_VAR, GAL_COLOR_LOC, GAL_COLOR_VAR),
        ] {
            v[loc] = f.log_flux_loc;
            v[var] = f.log_flux_var;
            for j in 0..COLOR_COUNT {
                v[cloc + j] = f.color_loc[j];
                v[cvar + j] = f.color_var[j];
            }
        }
        v[POSITION] = self.position[0];
        v[POSITION + 1] = self.position[1];
        v[PROFILE_MIX] = self.shape.profile_mix;
        v[SCALE] = self.shape.scale;
        v[AXIS_RATIO] = self.shape.axis_ratio;
        v[ANGLE] = self.shape.angle;
        v
    }

    pub fn from_natural(v: &ParamVector) -> Self {
        use index::*;
        let factor = |loc: usize, var: usize, cloc: usize, cvar: usize| TypeFactor {
            log_flux_loc: v[loc],
            log_flux_var: v[var],
            color_loc: core::array::from_fn(|j| v[cloc + j]),
            color_var: core::array::from_fn(|j| v[cvar + j]),
        };
        Self {
            p_star: v[P_STAR],
            star: factor(STAR_LOG_FLUX_LOC, STAR_LOG_FLUX_VAR, STAR_COLOR_LOC, STAR_COLOR_VAR),
            galaxy: factor(GAL_LOG_FLUX_LOC, GAL_LOG_FLUX_VAR, GAL_COLOR_LOC, GAL_COLOR_VAR),
            position: [v[POSITION], v[POSITION + 1]],
            shape: GalaxyShape {
                profile_mix: v[PROFILE_MIX],
                scale: v[SCALE],
                axis_ratio: v[AXIS_RATIO],
                angle: v[ANGLE],
            },
        }
    }
}

/// `(E[flux], E[flux^2])` in `band` under `q(. | type)`.
pub fn flux_moments(vp: &VariationalParams, t: SourceType, band: Band) -> (f64, f64) {
    let (m, v) = vp.factor(t).log_flux_moments(band);
    ((m + 0.5 * v).exp(), (2.0 * m + 2.0 * v).exp())
}

// ---------------------------------------------------------------------------
// Unconstraining transform

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Coord {
    Logit,
    Log,
    /// Log of the excess over [`MIN_GALAXY_SCALE`].
    ScaleLog,
    Identity,
    Arcsec,
    Angle,
}

const fn coord_kinds() -> [Coord; PARAM_COUNT] {
    let mut k = [Coord::Identity; PARAM_COUNT];
    k[index::P_STAR] = Coord::Logit;
    k[index::STAR_LOG_FLUX_VAR] = Coord::Log;
    k[index::GAL_LOG_FLUX_VAR] = Coord::Log;
    let mut j = 0;
    while j < COLOR_COUNT {
        k[index::STAR_COLOR_VAR + j] = Coord::Log;
        k[index::GAL_COLOR_VAR + j] = Coord::Log;
        j += 1;
    }
    k[index::POSITION] = Coord::Arcsec;
    k[index::POSITION + 1] = Coord::Arcsec;
    k[index::PROFILE_MIX] = Coord::Logit;
    k[index::SCALE] = Coord::ScaleLog;
    k[index::AXIS_RATIO] = Coord::Logit;
    k[index::ANGLE] = Coord::Angle;
    k
}

const KINDS: [Coord; PARAM_COUNT] = coord_kinds();

/// A point in the unconstrained parameter space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnconstrainedVector(pub ParamVector);

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Map valid variational parameters to unconstrained coordinates. Values on
/// the boundary of an open interval (for example `p_star` of exactly 0 or 1)
/// are rejected.
pub fn to_unconstrained(vp: &VariationalParams) -> Result<UnconstrainedVector, ElboError> {
    vp.validate()?;
    let nat = vp.natural();
    let mut u = ParamVector::zeros();
    for i in 0..PARAM_COUNT {
        let x = nat[i];
        u[i] = match KINDS[i] {
            Coord::Identity => x,
            Coord::Arcsec => x * ARCSEC_PER_DEGREE,
            Coord::Log => x.ln(),
            Coord::ScaleLog => (x - MIN_GALAXY_SCALE).ln(),
            Coord::Logit => {
                if !(x > 0.0 && x < 1.0) {
                    return Err(ElboError::InvalidParams("logit coordinate on its boundary"));
                }
                logit(x)
            }
            Coord::Angle => {
                if !(x > 0.0 && x < 180.0) {
                    return Err(ElboError::InvalidParams("angle on its boundary"));
                }
                logit(x / 180.0)
            }
        };
    }
    Ok(UnconstrainedVector(u))
}

fn natural_from_unconstrained(u: &ParamVector) -> ParamVector {
    let mut nat = ParamVector::zeros();
    for i in 0..PARAM_COUNT {
        nat[i] = match KINDS[i] {
            Coord::Identity => u[i],
            Coord::Arcsec => u[i] / ARCSEC_PER_DEGREE,
            Coord::Log => u[i].exp(),
            Coord::ScaleLog => MIN_GALAXY_SCALE + u[i].exp(),
            Coord::Logit => sigmoid(u[i]),
            Coord::Angle => 180.0 * sigmoid(u[i]),
        };
    }
    nat
}

pub fn from_unconstrained(u: &UnconstrainedVector) -> Result<VariationalParams, ElboError> {
    if u.0.iter().any(|v| !v.is_finite()) {
        return Err(ElboError::InvalidParams("non-finite unconstrained coordinate"));
    }
    Ok(VariationalParams::from_natural(&natural_from_unconstrained(&u.0)))
}

/// First and second derivatives of each natural coordinate with respect to
/// its own unconstrained coordinate (the transform is elementwise, so the
/// Jacobian is diagonal).
pub fn transform_jacobian(u: &UnconstrainedVector) -> (ParamVector, ParamVector) {
    let mut d1 = ParamVector::zeros();
    let mut d2 = ParamVector::zeros();
    for i in 0..PARAM_COUNT {
        let x = u.0[i];
        let (a, b) = match KINDS[i] {
            Coord::Identity => (1.0, 0.0),
            Coord::Arcsec => (1.0 / ARCSEC_PER_DEGREE, 0.0),
            Coord::Log | Coord::ScaleLog => {
                let e = x.exp();
                (e, e)
            }
            Coord::Logit | Coord::Angle => {
                let s = sigmoid(x);
                let sc = sigmoid(-x);
                let k = if KINDS[i] == Coord::Angle { 180.0 } else { 1.0 };
                (k * s * sc, k * s * sc * (sc - s))
            }
        };
        d1[i] = a;
        d2[i] = b;
    }
    (d1, d2)
}

// ---------------------------------------------------------------------------
// Context

/// The pixels of one image near the target.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub meta: ImageMetadata,
    pub window: Window,
    /// Observed counts, row-major over the window.
    pub counts: Vec<f64>,
    /// Sky plus the fixed neighbors' expected counts.
    pub background: Vec<f64>,
    /// log(counts!) for the value of the Poisson likelihood.
    log_factorial: Vec<f64>,
}

impl Patch {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Everything needed to evaluate the objective of one source.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceContext {
    pub target: VariationalParams,
    pub neighbors: Vec<SourceParams>,
    pub patches: Vec<Patch>,
    pub prior: Prior,
}

/// Patch window around `center` (pixel coordinates) of half-width `radius`,
/// clipped to the image; `None` if the center falls outside the image.
fn patch_window(meta: &ImageMetadata, center: [f64; 2], radius: f64) -> Option<Window> {
    let (cx, cy) = (center[0], center[1]);
    let (w, h) = (meta.width as f64, meta.height as f64);
    if !(cx >= -0.5 && cy >= -0.5 && cx < w - 0.5 && cy < h - 0.5) {
        return None;
    }
    let c0 = (cx - radius).ceil().max(0.0) as usize;
    let c1 = ((cx + radius).floor().min(w - 1.0)) as usize;
    let r0 = (cy - radius).ceil().max(0.0) as usize;
    let r1 = ((cy + radius).floor().min(h - 1.0)) as usize;
    Some(Window {
        row0: r0,
        col0: c0,
        rows: r1 + 1 - r0,
        cols: c1 + 1 - c0,
    })
}

impl SourceContext {
    /// Cut a patch from every image whose footprint contains the target and
    /// render the neighbors into the patch backgrounds.
    pub fn new(
        target: VariationalParams,
        neighbors: Vec<SourceParams>,
        images: &[&Image],
        prior: Prior,
    ) -> Result<Self, ElboError> {
        target.validate()?;
        prior.validate()?;
        for n in &neighbors {
            n.validate()?;
        }
        let mut patches = Vec::new();
        for img in images {
            let meta = &img.meta;
            let center = meta.wcs.world_to_pixel(target.position);
            let scale_px = target.shape.scale / meta.wcs.pixel_scale_arcsec();
            let sigma = (scale_px * scale_px + meta.psf.max_sigma().powi(2)).sqrt();
            let Some(window) = patch_window(meta, center, PATCH_SIGMAS * sigma) else {
                continue;
            };
            let mut counts = Vec::with_capacity(window.len());
            for r in window.row0..window.row0 + window.rows {
                for c in window.col0..window.col0 + window.cols {
                    counts.push(img.count(r, c) as f64);
                }
            }
            let mut background = alloc::vec![meta.sky_background; window.len()];
            let band = meta.band.index();
            for n in &neighbors {
                let comps = sky::source_gaussians(n.is_star, n.position, &n.shape, meta)?;
                sky::accumulate_gaussians(&comps, n.band_fluxes()?[band], window, &mut background);
            }
            let log_factorial = counts.iter().map(|&x| libm::lgamma(x + 1.0)).collect();
            patches.push(Patch {
                meta: meta.clone(),
                window,
                counts,
                background,
                log_factorial,
            });
        }
        Ok(Self {
            target,
            neighbors,
            patches,
            prior,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.patches.iter().map(Patch::len).sum()
    }
}

/// `(E_q[F], Var_q[F])` at `pixel = (row, col)` of patch `patch`.
///
/// This is the direct, value-only route through the renderer; the derivative
/// path in [`expected_log_likelihood`] does not share it.
pub fn pixel_rate_moments(
    ctx: &SourceContext,
    vp: &VariationalParams,
    patch: usize,
    pixel: (usize, usize),
) -> Result<(f64, f64), ElboError> {
    let p = ctx.patches.get(patch).ok_or(ElboError::OutsidePatch)?;
    let (row, col) = pixel;
    if !p.window.contains(row, col) {
        return Err(ElboError::OutsidePatch);
    }
    let k = (row - p.window.row0) * p.window.cols + (col - p.window.col0);
    let (x, y) = (col as f64, row as f64);
    let g = |is_star: bool| -> Result<f64, ElboError> {
        let comps = sky::source_gaussians(is_star, vp.position, &vp.shape, &p.meta)?;
        Ok(comps.iter().map(|c| c.eval(x, y)).sum())
    };
    let (gs, gg) = (g(true)?, g(false)?);
    let (es, es2) = flux_moments(vp, SourceType::Star, p.meta.band);
    let (eg, eg2) = flux_moments(vp, SourceType::Galaxy, p.meta.band);
    let mean_x = vp.p_star * es * gs + (1.0 - vp.p_star) * eg * gg;
    let second = vp.p_star * es2 * gs * gs + (1.0 - vp.p_star) * eg2 * gg * gg;
    Ok((p.background[k] + mean_x, second - mean_x * mean_x))
}

// ---------------------------------------------------------------------------
// Derivatives

/// A scalar with gradient and Hessian over the 27 parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Derivs {
    pub value: f64,
    pub gradient: ParamVector,
    pub hessian: ParamMatrix,
}

impl Derivs {
    pub fn zero() -> Self {
        Self {
            value: 0.0,
            gradient: ParamVector::zeros(),
            hessian: ParamMatrix::zeros(),
        }
    }

    fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.gradient.iter().all(|v| v.is_finite())
            && self.hessian.iter().all(|v| v.is_finite())
    }
}

// Local variables of the per-image likelihood.
const L_PI: usize = 0;
const L_MS: usize = 1;
const L_VS: usize = 2;
const L_MG: usize = 3;
const L_VG: usize = 4;
const L_GEOM: usize = 5; // cx, cy, profile_mix, scale, axis_ratio, angle
const LOCAL: usize = 11;
const GEOM: usize = 6;

/// Monomials of (dx, dy) up to degree 4, as (power of dx, power of dy).
const MONO: [(u8, u8); 15] = [
    (0, 0),
    (1, 0),
    (0, 1),
    (2, 0),
    (1, 1),
    (0, 2),
    (3, 0),
    (2, 1),
    (1, 2),
    (0, 3),
    (4, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 4),
];

const fn mono_index(a: u8, b: u8) -> usize {
    let mut i = 0;
    while i < MONO.len() {
        if MONO[i].0 == a && MONO[i].1 == b {
            return i;
        }
        i += 1;
    }
    usize::MAX
}

/// `PROD[i][j]` indexes the monomial equal to `MONO[i] * MONO[j]` for the
/// first six monomials `(1, dx, dy, dx^2, dx dy, dy^2)`.
const PROD: [[usize; 6]; 6] = {
    let mut t = [[0usize; 6]; 6];
    let mut i = 0;
    while i < 6 {
        let mut j = 0;
        while j < 6 {
            t[i][j] = mono_index(MONO[i].0 + MONO[j].0, MONO[i].1 + MONO[j].1);
            j += 1;
        }
        i += 1;
    }
    t
};

const M00: usize = mono_index(0, 0);
const M10: usize = mono_index(1, 0);
const M01: usize = mono_index(0, 1);
const M20: usize = mono_index(2, 0);
const M11: usize = mono_index(1, 1);
const M02: usize = mono_index(0, 2);

/// One galaxy-times-PSF Gaussian with derivatives of its log normalizer and
/// precision entries with respect to the four shape parameters.
struct GalaxyComponent {
    log_norm: f64,
    d_log_norm: [f64; 4],
    h_log_norm: [[f64; 4]; 4],
    prec: [f64; 3],
    d_prec: [[f64; 4]; 3],
    h_prec: [[[f64; 4]; 4]; 3],
}

fn galaxy_components(shape: &GalaxyShape, meta: &ImageMetadata) -> Vec<GalaxyComponent> {
    let e = Jet::<4>::variable(0, shape.profile_mix);
    let sigma = Jet::<4>::variable(1, shape.scale);
    let rho = Jet::<4>::variable(2, shape.axis_ratio);
    let phi = Jet::<4>::variable(3, shape.angle).scale(PI / 180.0);
    let (s, c) = (phi.sin(), phi.cos());
    let r2 = rho.square();
    let one = Jet::<4>::constant(1.0);
    let base = [
        c.square() + r2 * s.square(),
        c * s * (one - r2),
        s.square() + r2 * c.square(),
    ];
    let sigma2 = sigma.square();
    let m = meta.wcs.pixels_per_arcsec();
    let ln_mix = [(one - e).ln(), e.ln()];
    let psf = meta.psf.components();
    let mut out = Vec::with_capacity(profiles::COMPONENT_COUNT * psf.len());
    for (profile, amp, nu) in profiles::components() {
        let w = [base[0] * sigma2 * nu, base[1] * sigma2 * nu, base[2] * sigma2 * nu];
        // M W M^T with M constant.
        let ms00 = w[0] * m[0][0] + w[1] * m[0][1];
        let ms01 = w[1] * m[0][0] + w[2] * m[0][1];
        let ms10 = w[0] * m[1][0] + w[1] * m[1][1];
        let ms11 = w[1] * m[1][0] + w[2] * m[1][1];
        let pxx = ms00 * m[0][0] + ms01 * m[0][1];
        let pxy = ms00 * m[1][0] + ms01 * m[1][1];
        let pyy = ms10 * m[1][0] + ms11 * m[1][1];
        let mix = match profile {
            Profile::Exponential => ln_mix[0],
            Profile::DeVaucouleurs => ln_mix[1],
        };
        for pc in psf {
            let v = pc.sigma * pc.sigma;
            let sxx = pxx + v;
            let syy = pyy + v;
            let det = sxx * syy - pxy.square();
            let inv_det = det.recip();
            let prec = [syy * inv_det, -pxy * inv_det, sxx * inv_det];
            let log_norm = mix + ((amp * pc.weight).ln() - (2.0 * PI).ln()) - det.ln().scale(0.5);
            out.push(GalaxyComponent {
                log_norm: log_norm.value,
                d_log_norm: log_norm.grad,
                h_log_norm: log_norm.hess,
                prec: [prec[0].value, prec[1].value, prec[2].value],
                d_prec: [prec[0].grad, prec[1].grad, prec[2].grad],
                h_prec: [prec[0].hess, prec[1].hess, prec[2].hess],
            });
        }
    }
    out
}

/// Accumulate `s * a b^T` into the upper triangle of `h` over local indices.
#[inline]
fn add_outer_upper(h: &mut [[f64; LOCAL]; LOCAL], s: f64, a: &[f64; LOCAL], b: &[f64; LOCAL]) {
    for i in 0..LOCAL {
        let ai = s * a[i];
        let bi = s * b[i];
        for j in i..LOCAL {
            h[i][j] += ai * b[j] + bi * a[j];
        }
    }
}

/// Per-image likelihood in local variables; returns (value, grad, upper-
/// triangular Hessian).
fn patch_likelihood(
    patch: &Patch,
    vp: &VariationalParams,
    p_star_c: f64,
) -> Result<(f64, [f64; LOCAL], [[f64; LOCAL]; LOCAL]), ElboError> {
    let meta = &patch.meta;
    let band = meta.band;
    let pi = vp.p_star;
    let pic = p_star_c;
    let (ms, vs) = vp.star.log_flux_moments(band);
    let (mg, vg) = vp.galaxy.log_flux_moments(band);
    let a_s = (ms + 0.5 * vs).exp();
    let b_s = (2.0 * ms + 2.0 * vs).exp();
    let a_g = (mg + 0.5 * vg).exp();
    let b_g = (2.0 * mg + 2.0 * vg).exp();
    let [cx, cy] = meta.wcs.world_to_pixel(vp.position);

    let star: Vec<(f64, f64)> = meta
        .psf
        .components()
        .iter()
        .map(|c| {
            let iv = 1.0 / (c.sigma * c.sigma);
            (c.weight.ln() - (2.0 * PI).ln() + iv.ln(), iv)
        })
        .collect();
    let gal = galaxy_components(&vp.shape, meta);
    let ncomp = gal.len();
    let mut fvals = alloc::vec![0.0f64; ncomp];
    let mut moments = alloc::vec![[0.0f64; 15]; ncomp];

    let mut value = 0.0;
    let mut grad = [0.0; LOCAL];
    let mut hess = [[0.0; LOCAL]; LOCAL];
    let w = patch.window;

    for r in 0..w.rows {
        let dy = (w.row0 + r) as f64 - cy;
        for c in 0..w.cols {
            let k = r * w.cols + c;
            let dx = (w.col0 + c) as f64 - cx;
            let x = patch.counts[k];
            let base = patch.background[k];

            // Star weight and its position derivatives.
            let mut gs = 0.0;
            let mut dgs = [0.0; 2];
            let mut hgs = [[0.0; 2]; 2];
            let r2 = dx * dx + dy * dy;
            for &(ln_c, iv) in &star {
                let q = r2 * iv;
                if q > COMPONENT_CUTOFF {
                    continue;
                }
                let f = (ln_c - 0.5 * q).exp();
                let (zx, zy) = (iv * dx, iv * dy);
                gs += f;
                dgs[0] += f * zx;
                dgs[1] += f * zy;
                hgs[0][0] += f * (zx * zx - iv);
                hgs[0][1] += f * zx * zy;
                hgs[1][1] += f * (zy * zy - iv);
            }

            // Galaxy weight and its geometry gradient.
            let mut gg = 0.0;
            let mut dgg = [0.0; GEOM];
            let (dx2, dxy, dy2) = (dx * dx, dx * dy, dy * dy);
            for (gc, fv) in gal.iter().zip(fvals.iter_mut()) {
                let [pa, pb, pc] = gc.prec;
                let q = pa * dx2 + 2.0 * pb * dxy + pc * dy2;
                if q > COMPONENT_CUTOFF {
                    *fv = 0.0;
                    continue;
                }
                let f = (gc.log_norm - 0.5 * q).exp();
                *fv = f;
                gg += f;
                dgg[0] += f * (pa * dx + pb * dy);
                dgg[1] += f * (pb * dx + pc * dy);
                for s in 0..4 {
                    let dz = gc.d_log_norm[s]
                        - 0.5 * (dx2 * gc.d_prec[0][s] + 2.0 * dxy * gc.d_prec[1][s] + dy2 * gc.d_prec[2][s]);
                    dgg[2 + s] += f * dz;
                }
            }

            let ts = a_s * gs;
            let tg = a_g * gg;
            let us = b_s * gs * gs;
            let ug = b_g * gg * gg;
            let xbar = pi * ts + pic * tg;
            let e = base + xbar;
            if !(e > 0.0) {
                return Err(ElboError::NonPositiveRate);
            }
            let m2 = pi * us + pic * ug;
            let var = m2 - xbar * xbar;
            let inv_e = 1.0 / e;
            let inv_e2 = inv_e * inv_e;
            let inv_e3 = inv_e2 * inv_e;
            value += x * (e.ln() - 0.5 * var * inv_e2) - e - patch.log_factorial[k];
            let l_e = x * inv_e + x * (var * inv_e3 + xbar * inv_e2) - 1.0;
            let l_m = -0.5 * x * inv_e2;
            let l_ee = -4.0 * x * xbar * inv_e3 - 3.0 * x * var * inv_e2 * inv_e2;
            let l_em = x * inv_e3;

            let mut de = [0.0; LOCAL];
            let mut dm = [0.0; LOCAL];
            de[L_PI] = ts - tg;
            de[L_MS] = pi * ts;
            de[L_VS] = 0.5 * pi * ts;
            de[L_MG] = pic * tg;
            de[L_VG] = 0.5 * pic * tg;
            dm[L_PI] = us - ug;
            dm[L_MS] = 2.0 * pi * us;
            dm[L_VS] = 2.0 * pi * us;
            dm[L_MG] = 2.0 * pic * ug;
            dm[L_VG] = 2.0 * pic * ug;
            let (es, ms_g) = (pi * a_s, 2.0 * pi * b_s * gs);
            let (eg, mg_g) = (pic * a_g, 2.0 * pic * b_g * gg);
            for i in 0..GEOM {
                de[L_GEOM + i] = eg * dgg[i];
                dm[L_GEOM + i] = mg_g * dgg[i];
            }
            for i in 0..2 {
                de[L_GEOM + i] += es * dgs[i];
                dm[L_GEOM + i] += ms_g * dgs[i];
            }

            for i in 0..LOCAL {
                grad[i] += l_e * de[i] + l_m * dm[i];
            }
            add_outer_upper(&mut hess, 0.5 * l_ee, &de, &de);
            add_outer_upper(&mut hess, l_em, &de, &dm);

            // Second derivatives of E and M2 weighted by l_E and l_M.
            let kappa_s = l_e * a_s + 2.0 * l_m * b_s * gs;
            let kappa_g = l_e * a_g + 2.0 * l_m * b_g * gg;
            hess[L_PI][L_MS] += l_e * ts + 2.0 * l_m * us;
            hess[L_PI][L_VS] += 0.5 * l_e * ts + 2.0 * l_m * us;
            hess[L_PI][L_MG] -= l_e * tg + 2.0 * l_m * ug;
            hess[L_PI][L_VG] -= 0.5 * l_e * tg + 2.0 * l_m * ug;
            hess[L_MS][L_MS] += pi * (l_e * ts + 4.0 * l_m * us);
            hess[L_MS][L_VS] += pi * (0.5 * l_e * ts + 4.0 * l_m * us);
            hess[L_VS][L_VS] += pi * (0.25 * l_e * ts + 4.0 * l_m * us);
            hess[L_MG][L_MG] += pic * (l_e * tg + 4.0 * l_m * ug);
            hess[L_MG][L_VG] += pic * (0.5 * l_e * tg + 4.0 * l_m * ug);
            hess[L_VG][L_VG] += pic * (0.25 * l_e * tg + 4.0 * l_m * ug);
            let ms_coef = pi * (l_e * a_s + 4.0 * l_m * b_s * gs);
            let vs_coef = pi * (0.5 * l_e * a_s + 4.0 * l_m * b_s * gs);
            let mg_coef = pic * (l_e * a_g + 4.0 * l_m * b_g * gg);
            let vg_coef = pic * (0.5 * l_e * a_g + 4.0 * l_m * b_g * gg);
            for i in 0..GEOM {
                hess[L_PI][L_GEOM + i] -= kappa_g * dgg[i];
                hess[L_MG][L_GEOM + i] += mg_coef * dgg[i];
                hess[L_VG][L_GEOM + i] += vg_coef * dgg[i];
            }
            for i in 0..2 {
                hess[L_PI][L_GEOM + i] += kappa_s * dgs[i];
                hess[L_MS][L_GEOM + i] += ms_coef * dgs[i];
                hess[L_VS][L_GEOM + i] += vs_coef * dgs[i];
            }
            // Geometry block: star part directly, galaxy curvature deferred to
            // the component moments.
            let ws = pi * kappa_s;
            let os = 2.0 * pi * l_m * b_s;
            for i in 0..2 {
                for j in i..2 {
                    hess[L_GEOM + i][L_GEOM + j] += ws * hgs[i][j] + os * dgs[i] * dgs[j];
                }
            }
            let og = 2.0 * pic * l_m * b_g;
            for i in 0..GEOM {
                let oi = og * dgg[i];
                for j in i..GEOM {
                    hess[L_GEOM + i][L_GEOM + j] += oi * dgg[j];
                }
            }
            let wg = pic * kappa_g;
            if wg != 0.0 {
                let mono = [
                    1.0,
                    dx,
                    dy,
                    dx2,
                    dxy,
                    dy2,
                    dx2 * dx,
                    dx2 * dy,
                    dx * dy2,
                    dy2 * dy,
                    dx2 * dx2,
                    dx2 * dxy,
                    dx2 * dy2,
                    dxy * dy2,
                    dy2 * dy2,
                ];
                for (mom, &f) in moments.iter_mut().zip(&fvals) {
                    if f == 0.0 {
                        continue;
                    }
                    let wf = wg * f;
                    for (m, &b) in mom.iter_mut().zip(&mono) {
                        *m += wf * b;
                    }
                }
            }
        }
    }

    // Galaxy geometry curvature: sum over pixels of w f (grad z grad z^T + hess z).
    let mut hg = [[0.0; GEOM]; GEOM];
    for (gc, mu) in gal.iter().zip(&moments) {
        let [pa, pb, pc] = gc.prec;
        // grad z = C * (1, dx, dy, dx^2, dx dy, dy^2)
        let mut cmat = [[0.0; 6]; GEOM];
        cmat[0] = [0.0, pa, pb, 0.0, 0.0, 0.0];
        cmat[1] = [0.0, pb, pc, 0.0, 0.0, 0.0];
        for s in 0..4 {
            cmat[2 + s] = [
                gc.d_log_norm[s],
                0.0,
                0.0,
                -0.5 * gc.d_prec[0][s],
                -gc.d_prec[1][s],
                -0.5 * gc.d_prec[2][s],
            ];
        }
        let mut cm = [[0.0; 6]; GEOM];
        for i in 0..GEOM {
            for b in 0..6 {
                let mut acc = 0.0;
                for a in 0..6 {
                    acc += cmat[i][a] * mu[PROD[a][b]];
                }
                cm[i][b] = acc;
            }
        }
        for i in 0..GEOM {
            for j in i..GEOM {
                let mut acc = 0.0;
                for b in 0..6 {
                    acc += cm[i][b] * cmat[j][b];
                }
                hg[i][j] += acc;
            }
        }
        hg[0][0] -= pa * mu[M00];
        hg[0][1] -= pb * mu[M00];
        hg[1][1] -= pc * mu[M00];
        for s in 0..4 {
            hg[0][2 + s] += gc.d_prec[0][s] * mu[M10] + gc.d_prec[1][s] * mu[M01];
            hg[1][2 + s] += gc.d_prec[1][s] * mu[M10] + gc.d_prec[2][s] * mu[M01];
            for t in s..4 {
                hg[2 + s][2 + t] += gc.h_log_norm[s][t] * mu[M00]
                    - 0.5
                        * (gc.h_prec[0][s][t] * mu[M20]
                            + 2.0 * gc.h_prec[1][s][t] * mu[M11]
                            + gc.h_prec[2][s][t] * mu[M02]);
            }
        }
    }
    for i in 0..GEOM {
        for j in i..GEOM {
            hess[L_GEOM + i][L_GEOM + j] += hg[i][j];
        }
    }
    Ok((value, grad, hess))
}

/// Sparse map from a local variable to natural parameters.
type LocalMap = [([(usize, f64); 5], usize); LOCAL];

fn local_map(meta: &ImageMetadata) -> LocalMap {
    use index::*;
    let coef = meta.band.color_coefficients();
    let mut map: LocalMap = [([(0, 0.0); 5], 0); LOCAL];
    let mut push = |l: usize, g: usize, c: f64| {
        let (entries, n) = &mut map[l];
        entries[*n] = (g, c);
        *n += 1;
    };
    push(L_PI, P_STAR, 1.0);
    push(L_MS, STAR_LOG_FLUX_LOC, 1.0);
    push(L_VS, STAR_LOG_FLUX_VAR, 1.0);
    push(L_MG, GAL_LOG_FLUX_LOC, 1.0);
    push(L_VG, GAL_LOG_FLUX_VAR, 1.0);
    for (j, &c) in coef.iter().enumerate() {
        if c != 0.0 {
            push(L_MS, STAR_COLOR_LOC + j, c);
            push(L_VS, STAR_COLOR_VAR + j, c.abs());
            push(L_MG, GAL_COLOR_LOC + j, c);
            push(L_VG, GAL_COLOR_VAR + j, c.abs());
        }
    }
    let w = meta.wcs.pixels_per_degree();
    push(L_GEOM, POSITION, w[0][0]);
    push(L_GEOM, POSITION + 1, w[0][1]);
    push(L_GEOM + 1, POSITION, w[1][0]);
    push(L_GEOM + 1, POSITION + 1, w[1][1]);
    push(L_GEOM + 2, PROFILE_MIX, 1.0);
    push(L_GEOM + 3, SCALE, 1.0);
    push(L_GEOM + 4, AXIS_RATIO, 1.0);
    push(L_GEOM + 5, ANGLE, 1.0);
    map
}

fn expected_log_likelihood_impl(
    ctx: &SourceContext,
    vp: &VariationalParams,
    p_star_c: f64,
) -> Result<Derivs, ElboError> {
    let mut out = Derivs::zero();
    for patch in &ctx.patches {
        let (value, grad, hess) = patch_likelihood(patch, vp, p_star_c)?;
        let map = local_map(&patch.meta);
        out.value += value;
        for (l, (entries, n)) in map.iter().enumerate() {
            for &(g, c) in &entries[..*n] {
                out.gradient[g] += c * grad[l];
            }
        }
        for a in 0..LOCAL {
            for b in a..LOCAL {
                let h = hess[a][b];
                if h == 0.0 {
                    continue;
                }
                let (ea, na) = &map[a];
                let (eb, nb) = &map[b];
                for &(ga, ca) in &ea[..*na] {
                    for &(gb, cb) in &eb[..*nb] {
                        let v = ca * cb * h;
                        out.hessian[(ga, gb)] += v;
                        if a != b {
                            out.hessian[(gb, ga)] += v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Expected log likelihood of the patch pixels under `q`, with gradient and
/// Hessian in natural coordinates.
///
/// Each pixel contributes `x (log E[F] - Var[F] / (2 E[F]^2)) - E[F] - log x!`.
pub fn expected_log_likelihood(ctx: &SourceContext, vp: &VariationalParams) -> Result<Derivs, ElboError> {
    expected_log_likelihood_impl(ctx, vp, 1.0 - vp.p_star)
}

/// KL divergence between two univariate normals `N(m, v)` and `N(mu, s)`,
/// with derivatives in `(m, v)`: (value, d/dm, d/dv, d2/dm2, d2/dv2).
fn normal_kl(m: f64, v: f64, mu: f64, s: f64) -> (f64, f64, f64, f64, f64) {
    let d = m - mu;
    (
        0.5 * ((v + d * d) / s - 1.0 - (v / s).ln()),
        d / s,
        0.5 * (1.0 / s - 1.0 / v),
        1.0 / s,
        0.5 / (v * v),
    )
}

/// `p K_star + (1 - p) K_galaxy` over the brightness and color factors.
fn type_factor_kl(vp: &VariationalParams, prior: &Prior) -> Derivs {
    use index::*;
    let mut out = Derivs::zero();
    let pi = vp.p_star;
    for (factor, tp, weight, sign, loc, var, cloc, cvar) in [
        (&vp.star, &prior.star, pi, 1.0, STAR_LOG_FLUX_LOC, STAR_LOG_FLUX_VAR, STAR_COLOR_LOC, STAR_COLOR_VAR),
        (&vp.galaxy, &prior.galaxy, 1.0 - pi, -1.0, GAL_LOG_FLUX_LOC, GAL_LOG_FLUX_VAR, GAL_COLOR_LOC, GAL_COLOR_VAR),
    ] {
        let mut terms = [(0.0, 0.0, 0.0, 0.0, 0.0, 0usize, 0usize); 1 + COLOR_COUNT];
        let k = normal_kl(factor.log_flux_loc, factor.log_flux_var, tp.log_flux_mean, tp.log_flux_var);
        terms[0] = (k.0, k.1, k.2, k.3, k.4, loc, var);
        for j in 0..COLOR_COUNT {
            let k = normal_kl(factor.color_loc[j], factor.color_var[j], tp.color_mean[j], tp.color_var[j]);
            terms[1 + j] = (k.0, k.1, k.2, k.3, k.4, cloc + j, cvar + j);
        }
        for (val, dm, dv, hm, hv, im, iv) in terms {
            out.value += weight * val;
            out.gradient[P_STAR] += sign * val;
            out.gradient[im] += weight * dm;
            out.gradient[iv] += weight * dv;
            out.hessian[(im, im)] += weight * hm;
            out.hessian[(iv, iv)] += weight * hv;
            for (i, d) in [(im, dm), (iv, dv)] {
                out.hessian[(P_STAR, i)] += sign * d;
                out.hessian[(i, P_STAR)] += sign * d;
            }
        }
    }
    out
}

/// KL(q || prior) with gradient and Hessian in natural coordinates.
pub fn kl_divergence(vp: &VariationalParams, prior: &Prior) -> Derivs {
    let mut out = type_factor_kl(vp, prior);
    let (p, p0) = (vp.p_star, prior.p_star);
    out.value += p * (p / p0).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - p0)).ln();
    out.gradient[index::P_STAR] += logit(p) - logit(p0);
    out.hessian[(index::P_STAR, index::P_STAR)] += 1.0 / (p * (1.0 - p));
    out
}

/// Bernoulli KL as a function of the logit `u`: (value, d/du, d2/du2).
fn bernoulli_kl_logit(u: f64, p0: f64) -> (f64, f64, f64) {
    let p = sigmoid(u);
    let pc = sigmoid(-u);
    let (ln_p, ln_pc) = (-softplus(-u), -softplus(u));
    let value = p * (ln_p - p0.ln()) + pc * (ln_pc - (1.0 - p0).ln());
    let d = u - logit(p0);
    let s1 = p * pc;
    (value, s1 * d, s1 * (pc - p) * d + s1)
}

/// The evidence lower bound at unconstrained point `x`, with exact gradient
/// and Hessian in unconstrained coordinates.
pub fn elbo(ctx: &SourceContext, x: &UnconstrainedVector) -> Result<Derivs, ElboError> {
    if x.0.iter().any(|v| !v.is_finite()) {
        return Err(ElboError::NonFinite);
    }
    let nat = natural_from_unconstrained(&x.0);
    let vp = VariationalParams::from_natural(&nat);
    let p_star_c = sigmoid(-x.0[index::P_STAR]);
    let mut nat_d = expected_log_likelihood_impl(ctx, &vp, p_star_c)?;
    let kl = type_factor_kl(&vp, &ctx.prior);
    nat_d.value -= kl.value;
    nat_d.gradient -= kl.gradient;
    nat_d.hessian -= kl.hessian;

    let (d1, d2) = transform_jacobian(x);
    let mut out = Derivs {
        value: nat_d.value,
        gradient: nat_d.gradient.component_mul(&d1),
        hessian: ParamMatrix::zeros(),
    };
    for i in 0..PARAM_COUNT {
        for j in 0..PARAM_COUNT {
            out.hessian[(i, j)] = d1[i] * nat_d.hessian[(i, j)] * d1[j];
        }
        out.hessian[(i, i)] += nat_d.gradient[i] * d2[i];
    }
    let (kb, kb1, kb2) = bernoulli_kl_logit(x.0[index::P_STAR], ctx.prior.p_star);
    out.value -= kb;
    out.gradient[index::P_STAR] -= kb1;
    out.hessian[(index::P_STAR, index::P_STAR)] -= kb2;
    // Exact symmetry; the two triangles agree to rounding already.
    out.hessian = (out.hessian + out.hessian.transpose()) * 0.5;
    if !out.is_finite() {
        return Err(ElboError::NonFinite);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests;
