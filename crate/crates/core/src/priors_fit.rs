//! Estimating the prior from an existing catalog.

use alloc::vec::Vec;
#[allow(unused_imports)] // shadowed by inherent methods whenever std is linked
use num_traits::Float;

use crate::sky::{Prior, SourceParams, TypePrior, COLOR_COUNT};

/// `p_star` is kept this far from 0 and 1 so the Bernoulli KL stays finite.
pub const P_STAR_CLAMP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub enum PriorWarning {
    /// Fewer than two entries of a type; its variances use the defaults
    /// (and its means too, when there are none).
    TooFewEntries { is_star: bool, count: usize },
    /// A sample variance was zero; the default replaces it.
    ZeroVariance { is_star: bool, field: &'static str },
    /// `p_star` hit the clamp.
    ClampedStarFraction { raw: f64 },
    /// The catalog was empty; the default prior is returned unchanged.
    EmptyCatalog,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorFit {
    pub prior: Prior,
    pub warnings: Vec<PriorWarning>,
}

/// Sample mean and unbiased variance (`None` below two values).
fn moments(values: impl Iterator<Item = f64>) -> (usize, f64, Option<f64>) {
    let v: Vec<f64> = values.collect();
    let n = v.len();
    if n == 0 {
        return (0, 0.0, None);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = (n > 1).then(|| v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64);
    (n, mean, var)
}

fn fit_type(entries: &[&SourceParams], is_star: bool, default: &TypePrior, warnings: &mut Vec<PriorWarning>) -> TypePrior {
    let mut out = *default;
    if entries.len() < 2 {
        warnings.push(PriorWarning::TooFewEntries { is_star, count: entries.len() });
    }
    let mut field = |values: Vec<f64>, mean: &mut f64, var: &mut f64, default_var: f64, name: &'static str| {
        let (n, m, v) = moments(values.into_iter());
        if n > 0 {
            *mean = m;
        }
        match v {
            Some(v) if v > 0.0 => *var = v,
            Some(_) => {
                warnings.push(PriorWarning::ZeroVariance { is_star, field: name });
                *var = default_var;
            }
            None => *var = default_var,
        }
    };
    field(
        entries.iter().map(|s| s.ref_flux.ln()).collect(),
        &mut out.log_flux_mean,
        &mut out.log_flux_var,
        default.log_flux_var,
        "log_flux",
    );
    const NAMES: [&str; COLOR_COUNT] = ["color1", "color2", "color3", "color4"];
    for j in 0..COLOR_COUNT {
        field(
            entries.iter().map(|s| s.colors[j]).collect(),
            &mut out.color_mean[j],
            &mut out.color_var[j],
            default.color_var[j],
            NAMES[j],
        );
    }
    out
}

/// Moment estimates of the prior from `catalog`, falling back to `defaults`
/// where the data cannot support an estimate.
pub fn fit_priors(catalog: &[SourceParams], defaults: &Prior) -> PriorFit {
    let mut warnings = Vec::new();
    if catalog.is_empty() {
        warnings.push(PriorWarning::EmptyCatalog);
        return PriorFit { prior: *defaults, warnings };
    }
    let stars: Vec<&SourceParams> = catalog.iter().filter(|s| s.is_star).collect();
    let gals: Vec<&SourceParams> = catalog.iter().filter(|s| !s.is_star).collect();
    let raw = stars.len() as f64 / catalog.len() as f64;
    let p_star = raw.clamp(P_STAR_CLAMP, 1.0 - P_STAR_CLAMP);
    if p_star != raw {
        warnings.push(PriorWarning::ClampedStarFraction { raw });
    }
    let star = fit_type(&stars, true, &defaults.star, &mut warnings);
    let galaxy = fit_type(&gals, false, &defaults.galaxy, &mut warnings);
    PriorFit { prior: Prior { p_star, star, galaxy }, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sky::{sample_catalog, ClusterConfig, GalaxyShape, SkyRegion};
    use alloc::vec;

    fn region() -> SkyRegion {
        SkyRegion { ra: (0.0, 1.0), dec: (0.0, 1.0) }
    }

    fn truth() -> Prior {
        let mut p = Prior { p_star: 0.3, ..Prior::default() };
        p.star.log_flux_mean = 7.0;
        p.galaxy.log_flux_var = 1.5;
        p
    }

    /// Largest |estimate - truth| / standard error over all parameters.
    fn max_z(fit: &Prior, t: &Prior, n: usize) -> f64 {
        let mut z = 0.0f64;
        let ns = t.p_star * n as f64;
        let ng = n as f64 - ns;
        z = z.max((fit.p_star - t.p_star).abs() / (t.p_star * (1.0 - t.p_star) / n as f64).sqrt());
        for (f, tp, m) in [(&fit.star, &t.star, ns), (&fit.galaxy, &t.galaxy, ng)] {
            let mut pairs = vec![(f.log_flux_mean, f.log_flux_var, tp.log_flux_mean, tp.log_flux_var)];
            for j in 0..COLOR_COUNT {
                pairs.push((f.color_mean[j], f.color_var[j], tp.color_mean[j], tp.color_var[j]));
            }
            for (em, ev, tm, tv) in pairs {
                z = z.max((em - tm).abs() / (tv / m).sqrt());
                z = z.max((ev - tv).abs() / (tv * (2.0 / (m - 1.0)).sqrt()));
            }
        }
        z
    }

    #[test]
    fn recovers_sampling_prior() {
        let t = truth();
        let cat = sample_catalog(&t, &region(), 100_000, &ClusterConfig::default(), 3).unwrap();
        let fit = fit_priors(&cat, &Prior::default());
        assert!(fit.warnings.is_empty());
        // 23 parameters at 3 standard errors each.
        let z = max_z(&fit.prior, &t, cat.len());
        assert!(z < 3.0, "max z {z}");
    }

    #[test]
    fn error_shrinks_with_sample_size() {
        let t = truth();
        let mut errs = vec![];
        for n in [1_000, 10_000, 100_000] {
            // Average over seeds to compare expectations.
            let mut e = 0.0;
            for seed in 0..5 {
                let cat = sample_catalog(&t, &region(), n, &ClusterConfig::default(), 100 + seed).unwrap();
                let p = fit_priors(&cat, &Prior::default()).prior;
                e += (p.star.log_flux_mean - t.star.log_flux_mean).powi(2)
                    + (p.galaxy.log_flux_var - t.galaxy.log_flux_var).powi(2)
                    + (p.p_star - t.p_star).powi(2);
            }
            errs.push((e / 5.0).sqrt());
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        // Roughly 1/sqrt(10) per decade.
        assert!(errs[2] < 0.6 * errs[1] && errs[1] < 0.6 * errs[0], "{errs:?}");
    }

    fn entry(is_star: bool, flux: f64) -> SourceParams {
        SourceParams { is_star, ref_flux: flux, colors: [0.1, 0.2, 0.3, 0.4], position: [0.0, 0.0], shape: GalaxyShape::default() }
    }

    #[test]
    fn all_star_catalog_is_clamped() {
        let cat: Vec<SourceParams> = (0..10).map(|i| entry(true, 100.0 + i as f64)).collect();
        let fit = fit_priors(&cat, &Prior::default());
        assert_eq!(fit.prior.p_star, 1.0 - 1e-6);
        assert!(fit.warnings.contains(&PriorWarning::ClampedStarFraction { raw: 1.0 }));
        assert!(fit.warnings.contains(&PriorWarning::TooFewEntries { is_star: false, count: 0 }));
        assert_eq!(fit.prior.galaxy, Prior::default().galaxy);
        assert!(fit.prior.validate().is_ok());
    }

    #[test]
    fn equal_fluxes_fall_back_to_default_variance() {
        let cat = vec![entry(false, 50.0), entry(false, 50.0), entry(true, 10.0), entry(true, 20.0)];
        let fit = fit_priors(&cat, &Prior::default());
        assert_eq!(fit.prior.galaxy.log_flux_var, Prior::default().galaxy.log_flux_var);
        assert!((fit.prior.galaxy.log_flux_mean - 50f64.ln()).abs() < 1e-12);
        assert!(fit.warnings.contains(&PriorWarning::ZeroVariance { is_star: false, field: "log_flux" }));
        let want = (20f64.ln() - 10f64.ln()).powi(2) / 2.0;
        assert!((fit.prior.star.log_flux_var - want).abs() < 1e-12);
    }

    #[test]
    fn empty_catalog_returns_defaults() {
        let fit = fit_priors(&[], &Prior::default());
        assert_eq!(fit.prior, Prior::default());
        assert_eq!(fit.warnings, vec![PriorWarning::EmptyCatalog]);
    }
}
