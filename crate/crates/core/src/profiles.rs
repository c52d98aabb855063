//! Circular Gaussian-mixture approximations of galaxy light profiles.
//!
//! Each table holds six components: amplitude and variance, the variance in
//! units of the squared effective (half-light) radius. Amplitudes sum to one,
//! so each mixture is a unit-flux density. The constants come from a
//! flux-weighted least-squares fit to the exact radial profiles on
//! [0, 8] effective radii; `tools/fit_profiles.py` regenerates them.

/// Exponential (Sersic n = 1) disk.
pub const EXP_AMP: [f64; 6] = [
    7.1301333942e-03,
    4.3099515747e-02,
    1.5547588376e-01,
    3.3903510915e-01,
    3.5576564097e-01,
    9.9493716984e-02,
];
pub const EXP_VAR: [f64; 6] = [
    1.6080908507e-02,
    7.3295787128e-02,
    2.2963041859e-01,
    6.0068745635e-01,
    1.4143954320e+00,
    3.1862258184e+00,
];

/// de Vaucouleurs (Sersic n = 4) bulge.
pub const DEV_AMP: [f64; 6] = [
    4.1413535806e-02,
    1.0130268203e-01,
    1.7493538253e-01,
    2.3220435464e-01,
    2.4306465828e-01,
    2.0707938670e-01,
];
pub const DEV_VAR: [f64; 6] = [
    2.6878917786e-03,
    2.0626610642e-02,
    1.1051779780e-01,
    5.1022124965e-01,
    2.2793538375e+00,
    1.2614610631e+01,
];

/// Which profile a mixture component belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Exponential,
    DeVaucouleurs,
}

/// One component of the combined profile: `(profile, amplitude, variance)`.
/// The caller multiplies the amplitude by `1 - profile_mix` (exponential) or
/// `profile_mix` (de Vaucouleurs).
pub fn components() -> impl Iterator<Item = (Profile, f64, f64)> {
    let exp = EXP_AMP
        .iter()
        .zip(EXP_VAR.iter())
        .map(|(&a, &v)| (Profile::Exponential, a, v));
    let dev = DEV_AMP
        .iter()
        .zip(DEV_VAR.iter())
        .map(|(&a, &v)| (Profile::DeVaucouleurs, a, v));
    exp.chain(dev)
}

pub const COMPONENT_COUNT: usize = 12;

#[cfg(test)]
mod tests {
    use super::*;

    /// Fraction of a Sersic profile's flux (truncated at 8 r_e) inside `radius`,
    /// by midpoint quadrature.
    fn sersic_enclosed(n: f64, b: f64, radius: f64) -> f64 {
        let steps = 200_000;
        let dr = 8.0 / steps as f64;
        let (mut inside, mut total) = (0.0, 0.0);
        for i in 0..steps {
            let r = (i as f64 + 0.5) * dr;
            let f = r * (-b * (r.powf(1.0 / n) - 1.0)).exp();
            total += f;
            if r < radius {
                inside += f;
            }
        }
        inside / total
    }

    fn mixture_enclosed(amp: &[f64; 6], var: &[f64; 6], radius: f64) -> f64 {
        amp.iter()
            .zip(var)
            .map(|(a, v)| a * (1.0 - (-radius * radius / (2.0 * v)).exp()))
            .sum()
    }

    #[test]
    fn amplitudes_are_normalized() {
        assert!((EXP_AMP.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((DEV_AMP.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(components().count(), COMPONENT_COUNT);
    }

    #[test]
    fn exponential_enclosed_flux_tracks_exact_profile() {
        for r in [0.5, 1.0, 2.0, 4.0] {
            let exact = sersic_enclosed(1.0, 1.678346990, r);
            let mix = mixture_enclosed(&EXP_AMP, &EXP_VAR, r);
            assert!((exact - mix).abs() < 1e-3, "r={r}: {exact} vs {mix}");
        }
    }

    #[test]
    fn de_vaucouleurs_enclosed_flux_tracks_exact_profile() {
        for r in [0.5, 1.0, 2.0, 4.0] {
            let exact = sersic_enclosed(4.0, 7.669249443, r);
            let mix = mixture_enclosed(&DEV_AMP, &DEV_VAR, r);
            assert!((exact - mix).abs() < 0.02, "r={r}: {exact} vs {mix}");
        }
    }
}
