//! Fitting one source: the trust-region optimizer applied to the ELBO.

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)] // shadowed by inherent methods whenever std is linked
use num_traits::Float;

use crate::elbo::{self, ElboError, ParamVector, SourceContext, SourceType, UnconstrainedVector, VariationalParams};
use crate::sky::{Band, GalaxyShape, SourceParams, COLOR_COUNT};
use crate::trust_region::{self, Evaluation, TrConfig, TrError, TrResult, TrStatus};

/// Starting variances of the log flux and colors.
pub const INITIAL_LOG_FLUX_VAR: f64 = 0.01;
pub const INITIAL_COLOR_VAR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitError {
    #[error(transparent)]
    Elbo(#[from] ElboError),
    #[error(transparent)]
    Optimizer(#[from] TrError),
}

/// Posterior summary of one fitted source.
#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub params: VariationalParams,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub status: TrStatus,
}

impl FitResult {
    pub fn converged(&self) -> bool {
        self.status == TrStatus::Converged
    }

    /// Point estimate as a catalog entry; see [`point_estimate`].
    pub fn estimate(&self) -> SourceParams {
        point_estimate(&self.params)
    }

    /// See [`brightness_sd`].
    pub fn brightness_sd(&self) -> (f64, [f64; COLOR_COUNT]) {
        brightness_sd(&self.params)
    }
}

/// The more probable type with its mean reference-band flux and mean colors.
pub fn point_estimate(vp: &VariationalParams) -> SourceParams {
    let is_star = vp.p_star >= 0.5;
    let t = if is_star { SourceType::Star } else { SourceType::Galaxy };
    SourceParams {
        is_star,
        ref_flux: elbo::flux_moments(vp, t, Band::REFERENCE).0,
        colors: vp.factor(t).color_loc,
        position: vp.position,
        shape: vp.shape,
    }
}

/// Posterior standard deviations of the reference-band flux and the colors
/// under the more probable type.
pub fn brightness_sd(vp: &VariationalParams) -> (f64, [f64; COLOR_COUNT]) {
    let t = if vp.p_star >= 0.5 { SourceType::Star } else { SourceType::Galaxy };
    let (m1, m2) = elbo::flux_moments(vp, t, Band::REFERENCE);
    let sd = (m2 - m1 * m1).max(0.0).sqrt();
    (sd, vp.factor(t).color_var.map(f64::sqrt))
}

/// Initial variational parameters for a catalog entry.
pub fn initial_params(src: &SourceParams) -> VariationalParams {
    let mut vp = VariationalParams::initialize(src, INITIAL_LOG_FLUX_VAR, INITIAL_COLOR_VAR);
    if src.is_star {
        // A star estimate carries no shape; start from a compact default.
        vp.shape = GalaxyShape { scale: 0.5, ..GalaxyShape::default() };
    }
    vp
}

fn to_dvector(v: &ParamVector) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

/// Maximize the ELBO of `ctx` starting from its target parameters.
pub fn fit_source(ctx: &SourceContext, cfg: &TrConfig) -> Result<FitResult, FitError> {
    let x0 = elbo::to_unconstrained(&ctx.target)?;
    let objective = |x: &DVector<f64>| -> Result<Evaluation, ElboError> {
        let u = UnconstrainedVector(ParamVector::from_column_slice(x.as_slice()));
        let d = elbo::elbo(ctx, &u)?;
        Ok(Evaluation {
            value: d.value,
            gradient: to_dvector(&d.gradient),
            hessian: DMatrix::from_column_slice(elbo::PARAM_COUNT, elbo::PARAM_COUNT, d.hessian.as_slice()),
        })
    };
    let r: TrResult = trust_region::maximize(objective, to_dvector(&x0.0), cfg)?;
    let u = UnconstrainedVector(ParamVector::from_column_slice(r.x.as_slice()));
    let params = elbo::from_unconstrained(&u)?;
    Ok(FitResult {
        params,
        value: r.value,
        grad_norm: r.grad_norm,
        iterations: r.iterations,
        status: r.status,
    })
}
