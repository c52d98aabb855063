use super::*;
use crate::sky::tests::test_meta;
use alloc::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn galaxy(meta: &ImageMetadata, x: f64, y: f64, flux: f64) -> SourceParams {
    SourceParams {
        is_star: false,
        ref_flux: flux,
        colors: [0.3, 0.1, 0.2, -0.1],
        position: meta.wcs.pixel_to_world([x, y]),
        shape: GalaxyShape {
            profile_mix: 0.3,
            scale: 1.2,
            axis_ratio: 0.6,
            angle: 30.0,
        },
    }
}

fn star(meta: &ImageMetadata, x: f64, y: f64, flux: f64) -> SourceParams {
    SourceParams {
        is_star: true,
        ref_flux: flux,
        colors: [0.5, 0.2, 0.1, 0.0],
        position: meta.wcs.pixel_to_world([x, y]),
        shape: GalaxyShape::default(),
    }
}

struct Fixture {
    ctx: SourceContext,
    u: UnconstrainedVector,
}

/// A galaxy near the middle of two images (reference and z band) with a
/// bright star neighbor, and a variational point away from the optimum.
fn fixture() -> Fixture {
    let m0 = test_meta(30, 28, 80.0, 1.3);
    let mut m1 = test_meta(30, 28, 60.0, 1.6);
    m1.band = Band::new(4).unwrap();
    m1.id = 2;
    m1.psf = sky::PsfModel::new(vec![
        sky::PsfComponent { weight: 0.7, sigma: 1.4 },
        sky::PsfComponent { weight: 0.3, sigma: 2.9 },
    ])
    .unwrap();
    let truth = galaxy(&m0, 14.3, 13.6, 3000.0);
    let neighbor = star(&m0, 20.0, 9.0, 5000.0);
    let catalog = [truth, neighbor];
    let i0 = sky::sample_image(&catalog, &m0, 11).unwrap();
    let i1 = sky::sample_image(&catalog, &m1, 12).unwrap();
    let mut vp = VariationalParams::initialize(&truth, 0.05, 0.01);
    vp.p_star = 0.35;
    vp.position = m0.wcs.pixel_to_world([14.6, 13.2]);
    vp.shape.scale = 1.0;
    vp.galaxy.log_flux_loc -= 0.2;
    vp.star.color_loc[3] += 0.1;
    let ctx = SourceContext::new(vp, vec![neighbor], &[&i0, &i1], Prior::default()).unwrap();
    let u = to_unconstrained(&vp).unwrap();
    Fixture { ctx, u }
}

fn fd_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let sup = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let num = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    num / sup(a).max(sup(b)).max(1.0)
}

fn bump(u: &UnconstrainedVector, i: usize, h: f64) -> UnconstrainedVector {
    let mut v = *u;
    v.0[i] += h;
    v
}

#[test]
fn gradient_matches_central_differences() {
    let f = fixture();
    let d = elbo(&f.ctx, &f.u).unwrap();
    let h = 1e-5;
    let fd: Vec<f64> = (0..PARAM_COUNT)
        .map(|i| {
            let p = elbo(&f.ctx, &bump(&f.u, i, h)).unwrap().value;
            let m = elbo(&f.ctx, &bump(&f.u, i, -h)).unwrap().value;
            (p - m) / (2.0 * h)
        })
        .collect();
    let err = fd_rel_err(d.gradient.as_slice(), &fd);
    assert!(err < 1e-5, "gradient relative error {err:e}");
}

#[test]
fn hessian_matches_differences_of_gradient() {
    let f = fixture();
    let d = elbo(&f.ctx, &f.u).unwrap();
    let h = 1e-5;
    let mut fd = vec![0.0; PARAM_COUNT * PARAM_COUNT];
    for j in 0..PARAM_COUNT {
        let p = elbo(&f.ctx, &bump(&f.u, j, h)).unwrap().gradient;
        let m = elbo(&f.ctx, &bump(&f.u, j, -h)).unwrap().gradient;
        for i in 0..PARAM_COUNT {
            fd[i * PARAM_COUNT + j] = (p[i] - m[i]) / (2.0 * h);
        }
    }
    let analytic: Vec<f64> = (0..PARAM_COUNT * PARAM_COUNT)
        .map(|k| d.hessian[(k / PARAM_COUNT, k % PARAM_COUNT)])
        .collect();
    let err = fd_rel_err(&analytic, &fd);
    assert!(err < 1e-4, "hessian relative error {err:e}");
    assert_eq!(d.hessian, d.hessian.transpose());
}

#[test]
fn likelihood_value_matches_direct_pixel_moments() {
    let f = fixture();
    let vp = from_unconstrained(&f.u).unwrap();
    let ell = expected_log_likelihood(&f.ctx, &vp).unwrap();
    let mut direct = 0.0;
    for (pi, patch) in f.ctx.patches.iter().enumerate() {
        let w = patch.window;
        for r in w.row0..w.row0 + w.rows {
            for c in w.col0..w.col0 + w.cols {
                let (e, v) = pixel_rate_moments(&f.ctx, &vp, pi, (r, c)).unwrap();
                let k = (r - w.row0) * w.cols + (c - w.col0);
                let x = patch.counts[k];
                direct += x * (e.ln() - v / (2.0 * e * e)) - e - libm::lgamma(x + 1.0);
            }
        }
    }
    assert!((ell.value - direct).abs() < 1e-9 * direct.abs(), "{} vs {}", ell.value, direct);
}

#[test]
fn elbo_is_likelihood_minus_kl() {
    let f = fixture();
    let vp = from_unconstrained(&f.u).unwrap();
    let ell = expected_log_likelihood(&f.ctx, &vp).unwrap().value;
    let kl = kl_divergence(&vp, &f.ctx.prior).value;
    let e = elbo(&f.ctx, &f.u).unwrap().value;
    assert!((e - (ell - kl)).abs() < 1e-9 * e.abs());
}

#[test]
fn pixel_moments_match_monte_carlo() {
    let f = fixture();
    let vp = from_unconstrained(&f.u).unwrap();
    let patch = 1; // z band, so the colors enter
    let p = &f.ctx.patches[patch];
    let meta = &p.meta;
    let pixel = (13, 15);
    let k = (pixel.0 - p.window.row0) * p.window.cols + (pixel.1 - p.window.col0);
    let (e, v) = pixel_rate_moments(&f.ctx, &vp, patch, pixel).unwrap();

    let weight = |is_star: bool| {
        let s = SourceParams {
            is_star,
            ref_flux: 1.0,
            colors: [0.0; 4],
            position: vp.position,
            shape: vp.shape,
        };
        sky::unit_flux_pixel_weight(&s, meta, pixel).unwrap()
    };
    let (gs, gg) = (weight(true), weight(false));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let n = 400_000;
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let is_star = rand::Rng::random::<f64>(&mut rng) < vp.p_star;
        let tf = if is_star { &vp.star } else { &vp.galaxy };
        let lf = tf.log_flux_loc + tf.log_flux_var.sqrt() * unit.sample(&mut rng);
        let colors: [f64; 4] = core::array::from_fn(|j| tf.color_loc[j] + tf.color_var[j].sqrt() * unit.sample(&mut rng));
        let flux = sky::band_fluxes(lf.exp(), &colors).unwrap()[meta.band.index()];
        let xv = flux * if is_star { gs } else { gg };
        s1 += xv;
        s2 += xv * xv;
    }
    let mean = s1 / n as f64;
    let var = s2 / n as f64 - mean * mean;
    let se = (var / n as f64).sqrt();
    assert!((e - p.background[k] - mean).abs() < 5.0 * se, "mean {} vs {}", e - p.background[k], mean);
    assert!((v - var).abs() < 0.05 * var, "variance {v} vs {var}");
}

#[test]
fn kl_known_values() {
    let prior = Prior::default();
    let at_prior = VariationalParams::from_prior(&prior, [1.0, 2.0], GalaxyShape::default());
    let k = kl_divergence(&at_prior, &prior);
    assert!(k.value.abs() < 1e-14);
    assert!(k.gradient.amax() < 1e-12);

    let mut vp = at_prior;
    vp.p_star = 0.3;
    let k = kl_divergence(&vp, &prior);
    let want = 0.3 * (0.3f64 / 0.5).ln() + 0.7 * (0.7f64 / 0.5).ln();
    assert!((k.value - want).abs() < 1e-14);

    // One star factor moved: KL(N(m + 1, 2 s) || N(m, s)) = (2 + 1 - 1 - ln 2) / 2.
    let mut vp = at_prior;
    vp.p_star = 0.5;
    vp.star.log_flux_loc += 1.0;
    vp.star.log_flux_var *= 2.0;
    let k = kl_divergence(&vp, &prior);
    let want = 0.5 * 0.5 * (2.0 + 1.0 - 1.0 - 2f64.ln());
    assert!((k.value - want).abs() < 1e-14);
}

#[test]
fn kl_derivatives_match_differences() {
    let prior = Prior::default();
    let f = fixture();
    let vp = from_unconstrained(&f.u).unwrap();
    let nat = vp.natural();
    let k = kl_divergence(&vp, &prior);
    let h = 1e-6;
    for i in 0..PARAM_COUNT {
        let at = |d: f64| {
            let mut n = nat;
            n[i] += d;
            kl_divergence(&VariationalParams::from_natural(&n), &prior)
        };
        let (p, m) = (at(h), at(-h));
        let g = (p.value - m.value) / (2.0 * h);
        assert!((g - k.gradient[i]).abs() < 1e-6 * (1.0 + g.abs()), "grad {i}");
        for j in 0..PARAM_COUNT {
            let hij = (p.gradient[j] - m.gradient[j]) / (2.0 * h);
            assert!((hij - k.hessian[(j, i)]).abs() < 1e-5 * (1.0 + hij.abs()), "hess {j} {i}");
        }
    }
}

#[test]
fn neighbor_order_does_not_matter() {
    let m0 = test_meta(24, 24, 50.0, 1.2);
    let t = galaxy(&m0, 12.0, 12.0, 2000.0);
    let n1 = star(&m0, 5.0, 7.0, 800.0);
    let n2 = galaxy(&m0, 18.0, 15.0, 1500.0);
    let n3 = star(&m0, 12.5, 20.0, 400.0);
    let img = sky::sample_image(&[t, n1, n2, n3], &m0, 3).unwrap();
    let vp = VariationalParams::initialize(&t, 0.1, 0.02);
    let u = to_unconstrained(&vp).unwrap();
    let a = SourceContext::new(vp, vec![n1, n2, n3], &[&img], Prior::default()).unwrap();
    let b = SourceContext::new(vp, vec![n3, n1, n2], &[&img], Prior::default()).unwrap();
    let (da, db) = (elbo(&a, &u).unwrap(), elbo(&b, &u).unwrap());
    assert!((da.value - db.value).abs() <= 1e-10 * da.value.abs());
    assert!((da.gradient - db.gradient).amax() <= 1e-10 * da.gradient.amax());
}

#[test]
fn target_off_image_has_no_patch() {
    let m0 = test_meta(16, 16, 50.0, 1.2);
    let t = star(&m0, 40.0, 40.0, 100.0);
    let img = sky::sample_image(&[], &m0, 1).unwrap();
    let vp = VariationalParams::initialize(&t, 0.1, 0.02);
    let ctx = SourceContext::new(vp, vec![], &[&img], Prior::default()).unwrap();
    assert_eq!(ctx.pixel_count(), 0);
    // Only the KL term remains.
    let u = to_unconstrained(&vp).unwrap();
    let e = elbo(&ctx, &u).unwrap();
    let kl = kl_divergence(&vp, &ctx.prior).value;
    assert!((e.value + kl).abs() < 1e-12);
}

#[test]
fn boundary_values_are_rejected() {
    let m0 = test_meta(16, 16, 50.0, 1.2);
    let mut vp = VariationalParams::initialize(&star(&m0, 4.0, 4.0, 100.0), 0.1, 0.02);
    vp.p_star = 1.0;
    assert!(to_unconstrained(&vp).is_err());
    vp.p_star = 0.5;
    vp.star.log_flux_var = 0.0;
    assert!(to_unconstrained(&vp).is_err());
    let mut u = to_unconstrained(&VariationalParams::initialize(&star(&m0, 4.0, 4.0, 100.0), 0.1, 0.02)).unwrap();
    u.0[3] = f64::NAN;
    assert!(from_unconstrained(&u).is_err());
}

#[test]
fn extreme_p_star_stays_finite() {
    let f = fixture();
    for p in [40.0, -40.0] {
        let mut u = f.u;
        u.0[index::P_STAR] = p;
        let d = elbo(&f.ctx, &u).unwrap();
        assert!(d.value.is_finite());
        assert!(d.hessian.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn flux_moments_are_lognormal() {
    let m0 = test_meta(16, 16, 50.0, 1.2);
    let mut vp = VariationalParams::initialize(&star(&m0, 4.0, 4.0, 100.0), 0.2, 0.05);
    vp.star.color_loc = [0.1, 0.2, 0.3, 0.4];
    let (m1, m2) = flux_moments(&vp, SourceType::Star, Band::new(4).unwrap());
    let mu = 100f64.ln() + 0.3 + 0.4;
    let var = 0.2 + 2.0 * 0.05;
    assert!((m1 - (mu + var / 2.0).exp()).abs() < 1e-9 * m1);
    assert!((m2 - (2.0 * mu + 2.0 * var).exp()).abs() < 1e-9 * m2);
}

fn arb_params() -> impl Strategy<Value = VariationalParams> {
    (
        0.01f64..0.99,
        prop::array::uniform4(-2.0f64..2.0),
        0.01f64..2.0,
        (-10.0f64..10.0, -10.0f64..10.0),
        (0.01f64..0.99, 0.25f64..10.0, 0.05f64..0.99, 0.5f64..179.5),
    )
        .prop_map(|(p, colors, var, pos, (mix, scale, q, angle))| {
            let factor = TypeFactor {
                log_flux_loc: colors[0] * 3.0,
                log_flux_var: var,
                color_loc: colors,
                color_var: [var * 0.5; 4],
            };
            VariationalParams {
                p_star: p,
                star: factor,
                galaxy: TypeFactor { log_flux_loc: -factor.log_flux_loc, ..factor },
                position: [pos.0, pos.1],
                shape: GalaxyShape { profile_mix: mix, scale, axis_ratio: q, angle },
            }
        })
}

proptest! {
    #[test]
    fn transform_round_trip(vp in arb_params()) {
        let back = from_unconstrained(&to_unconstrained(&vp).unwrap()).unwrap();
        let (a, b) = (vp.natural(), back.natural());
        for i in 0..PARAM_COUNT {
            prop_assert!((a[i] - b[i]).abs() <= 1e-9 * (1.0 + a[i].abs()), "coord {}", i);
        }
    }

    #[test]
    fn transform_jacobian_matches_differences(vp in arb_params()) {
        let u = to_unconstrained(&vp).unwrap();
        let (d1, d2) = transform_jacobian(&u);
        let h = 1e-5;
        for i in 0..PARAM_COUNT {
            let p = natural_from_unconstrained(&bump(&u, i, h).0)[i];
            let c = natural_from_unconstrained(&u.0)[i];
            let m = natural_from_unconstrained(&bump(&u, i, -h).0)[i];
            let fd1 = (p - m) / (2.0 * h);
            let fd2 = (p - 2.0 * c + m) / (h * h);
            prop_assert!((fd1 - d1[i]).abs() <= 1e-6 * (1.0 + d1[i].abs()), "first {}", i);
            prop_assert!((fd2 - d2[i]).abs() <= 1e-3 * (1.0 + d2[i].abs()), "second {}", i);
        }
    }
}

#[test]
fn flux_moment_examples() {
    let m0 = test_meta(8, 8, 10.0, 1.0);
    let mut vp = VariationalParams::initialize(&star(&m0, 4.0, 4.0, 1.0), 1e-300, 1e-300);
    vp.star.color_loc = [0.0; 4];
    let (a, b) = flux_moments(&vp, SourceType::Star, Band::REFERENCE);
    assert!((a - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
    vp.star.log_flux_loc = 0.0;
    vp.star.log_flux_var = 0.5;
    let (a, b) = flux_moments(&vp, SourceType::Star, Band::REFERENCE);
    assert!((a - 1.28403).abs() < 1e-5 && (b - core::f64::consts::E).abs() < 1e-5);
}

#[test]
fn flux_moments_match_sampling_in_every_band() {
    let m0 = test_meta(8, 8, 10.0, 1.0);
    let mut vp = VariationalParams::initialize(&star(&m0, 4.0, 4.0, 50.0), 0.1, 0.03);
    vp.galaxy.color_loc = [0.4, -0.2, 0.3, 0.1];
    vp.galaxy.color_var = [0.02, 0.05, 0.01, 0.04];
    let tf = vp.galaxy;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let n = 1_000_000;
    let mut s1 = [0.0; 5];
    let mut s2 = [0.0; 5];
    let mut s4 = [0.0; 5];
    for _ in 0..n {
        let lf = tf.log_flux_loc + tf.log_flux_var.sqrt() * unit.sample(&mut rng);
        let colors: [f64; 4] = core::array::from_fn(|j| tf.color_loc[j] + tf.color_var[j].sqrt() * unit.sample(&mut rng));
        let b = sky::band_fluxes(lf.exp(), &colors).unwrap();
        for k in 0..5 {
            s1[k] += b[k];
            s2[k] += b[k] * b[k];
            s4[k] += b[k].powi(4);
        }
    }
    let nf = n as f64;
    for band in Band::all() {
        let k = band.index();
        let (e1, e2) = flux_moments(&vp, SourceType::Galaxy, band);
        let (m1, m2) = (s1[k] / nf, s2[k] / nf);
        let se1 = ((m2 - m1 * m1) / nf).sqrt();
        let se2 = ((s4[k] / nf - m2 * m2) / nf).sqrt();
        assert!((e1 - m1).abs() < 4.0 * se1, "band {k} first moment");
        assert!((e2 - m2).abs() < 4.0 * se2, "band {k} second moment");
    }
}

#[test]
fn kl_closed_form_examples() {
    let prior = Prior { p_star: 0.25, ..Prior::default() };
    let vp = VariationalParams::from_prior(&prior, [0.0, 0.0], GalaxyShape::default());
    let vp = VariationalParams { p_star: 0.5, ..vp };
    let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    assert!((kl_divergence(&vp, &prior).value - want).abs() < 1e-12);
    assert!((want - 0.14384).abs() < 1e-5);

    // Unit-variance Gaussian factors shifted by delta contribute delta^2 / 2 each.
    let mut unit = prior;
    unit.star.color_var = [1.0; 4];
    unit.galaxy.color_var = [1.0; 4];
    let mut vp = VariationalParams::from_prior(&unit, [0.0, 0.0], GalaxyShape::default());
    vp.p_star = unit.p_star;
    vp.star.color_loc[1] += 0.3;
    vp.galaxy.color_loc[2] -= 0.3;
    let k = kl_divergence(&vp, &unit).value;
    assert!((k - 0.045).abs() < 1e-12, "{k}");
}

#[test]
fn p_star_half_maps_to_zero() {
    let m0 = test_meta(8, 8, 10.0, 1.0);
    let vp = VariationalParams::initialize(&star(&m0, 4.0, 4.0, 50.0), 0.1, 0.03);
    assert_eq!(to_unconstrained(&vp).unwrap().0[index::P_STAR], 0.0);
}

#[test]
fn deterministic_source_has_no_variance() {
    let f = fixture();
    let mut vp = from_unconstrained(&f.u).unwrap();
    vp.p_star = 1.0;
    vp.star.log_flux_var = 0.0;
    vp.star.color_var = [0.0; 4];
    let p = &f.ctx.patches[0];
    let pixel = (14, 14);
    let k = (pixel.0 - p.window.row0) * p.window.cols + (pixel.1 - p.window.col0);
    let (e, v) = pixel_rate_moments(&f.ctx, &vp, 0, pixel).unwrap();
    let s = SourceParams { is_star: true, ref_flux: 1.0, colors: [0.0; 4], position: vp.position, shape: vp.shape };
    let g = sky::unit_flux_pixel_weight(&s, &p.meta, pixel).unwrap();
    let b = vp.star.log_flux_loc.exp();
    assert!((e - (p.background[k] + b * g)).abs() < 1e-9 * e);
    assert!(v.abs() < 1e-9 * e * e);
}

#[test]
fn variance_shrinks_with_factor_variances() {
    let f = fixture();
    let base = from_unconstrained(&f.u).unwrap();
    let pixel = (13, 14);
    let mut last = f64::INFINITY;
    for scale in [1.0, 0.5, 0.1, 0.01, 0.0] {
        let mut vp = base;
        for t in [&mut vp.star, &mut vp.galaxy] {
            t.log_flux_var *= scale;
            t.color_var = t.color_var.map(|v| v * scale);
        }
        let (_, v) = pixel_rate_moments(&f.ctx, &vp, 1, pixel).unwrap();
        assert!(v < last);
        last = v;
    }
    // With point-mass factors only the type uncertainty remains.
    let mut vp = base;
    vp.p_star = 1.0 - 1e-15;
    for t in [&mut vp.star, &mut vp.galaxy] {
        t.log_flux_var = 0.0;
        t.color_var = [0.0; 4];
    }
    let (e, v) = pixel_rate_moments(&f.ctx, &vp, 1, pixel).unwrap();
    assert!(v.abs() < 1e-9 * e * e);
}

#[test]
fn faint_target_gives_background_poisson_likelihood() {
    let m0 = test_meta(12, 12, 30.0, 1.2);
    let img = sky::sample_image(&[], &m0, 21).unwrap();
    let vp = VariationalParams::initialize(&star(&m0, 6.0, 6.0, 1e-12), 0.01, 0.01);
    let ctx = SourceContext::new(vp, vec![], &[&img], Prior::default()).unwrap();
    let ell = expected_log_likelihood(&ctx, &vp).unwrap().value;
    let p = &ctx.patches[0];
    let exact: f64 = p.counts.iter().map(|&x| x * 30f64.ln() - 30.0 - libm::lgamma(x + 1.0)).sum();
    assert!((ell - exact).abs() < 1e-8 * exact.abs(), "{ell} vs {exact}");
}

#[test]
fn low_variance_likelihood_matches_sampling() {
    let m0 = test_meta(8, 8, 40.0, 1.1);
    let truth = galaxy(&m0, 3.7, 4.2, 800.0);
    let img = sky::sample_image(&[truth], &m0, 2).unwrap();
    let mut vp = VariationalParams::initialize(&truth, 5e-5, 1e-3);
    vp.p_star = 1e-5;
    let ctx = SourceContext::new(vp, vec![], &[&img], Prior::default()).unwrap();
    let ell = expected_log_likelihood(&ctx, &vp).unwrap().value;
    let p = &ctx.patches[0];
    let w = p.window;
    for r in w.row0..w.row0 + w.rows {
        for c in w.col0..w.col0 + w.cols {
            let (e, v) = pixel_rate_moments(&ctx, &vp, 0, (r, c)).unwrap();
            assert!(v / (e * e) < 1e-4);
        }
    }
    let weights = |is_star: bool| -> Vec<f64> {
        let s = SourceParams { is_star, ref_flux: 1.0, colors: [0.0; 4], position: vp.position, shape: vp.shape };
        let mut out = vec![];
        for r in w.row0..w.row0 + w.rows {
            for c in w.col0..w.col0 + w.cols {
                out.push(sky::unit_flux_pixel_weight(&s, &p.meta, (r, c)).unwrap());
            }
        }
        out
    };
    let (gs, gg) = (weights(true), weights(false));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let n = 200_000;
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let is_star = rand::Rng::random::<f64>(&mut rng) < vp.p_star;
        let tf = if is_star { &vp.star } else { &vp.galaxy };
        let b = (tf.log_flux_loc + tf.log_flux_var.sqrt() * unit.sample(&mut rng)).exp();
        let g = if is_star { &gs } else { &gg };
        let mut ll = 0.0;
        for k in 0..p.len() {
            let f = p.background[k] + b * g[k];
            ll += p.counts[k] * f.ln() - f - libm::lgamma(p.counts[k] + 1.0);
        }
        s1 += ll;
        s2 += ll * ll;
    }
    let mean = s1 / n as f64;
    let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((ell - mean).abs() < 4.0 * se + 1e-3, "{ell} vs {mean} (se {se})");
}

/// log p(x) for a single-band image by quadrature over the log flux of each
/// type; colors do not enter the reference band.
fn log_evidence(ctx: &SourceContext, position: [f64; 2], shape: GalaxyShape) -> f64 {
    let prior = ctx.prior;
    let p = &ctx.patches[0];
    assert_eq!(p.meta.band, Band::REFERENCE);
    let w = p.window;
    let mut terms = vec![];
    for (is_star, tp, pa) in [(true, prior.star, prior.p_star), (false, prior.galaxy, 1.0 - prior.p_star)] {
        let s = SourceParams { is_star, ref_flux: 1.0, colors: [0.0; 4], position, shape };
        let mut g = vec![];
        for r in w.row0..w.row0 + w.rows {
            for c in w.col0..w.col0 + w.cols {
                g.push(sky::unit_flux_pixel_weight(&s, &p.meta, (r, c)).unwrap());
            }
        }
        let log_joint = |t: f64| {
            let b = t.exp();
            let mut ll = -0.5 * (t - tp.log_flux_mean).powi(2) / tp.log_flux_var
                - 0.5 * (2.0 * core::f64::consts::PI * tp.log_flux_var).ln();
            for k in 0..p.len() {
                let f = p.background[k] + b * g[k];
                ll += p.counts[k] * f.ln() - f - libm::lgamma(p.counts[k] + 1.0);
            }
            ll
        };
        let coarse: Vec<f64> = (0..3000).map(|i| -5.0 + 20.0 * i as f64 / 3000.0).collect();
        let peak = coarse.iter().copied().fold((f64::NEG_INFINITY, 0.0), |b, t| {
            let v = log_joint(t);
            if v > b.0 { (v, t) } else { b }
        });
        let (lo, hi, m) = (peak.1 - 0.5, peak.1 + 0.5, 20_000);
        let dt = (hi - lo) / m as f64;
        let vals: Vec<f64> = (0..m).map(|i| log_joint(lo + (i as f64 + 0.5) * dt)).collect();
        let mx = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = vals.iter().map(|v| (v - mx).exp()).sum();
        terms.push(pa.ln() + mx + (s * dt).ln());
    }
    let mx = terms[0].max(terms[1]);
    mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
}

#[test]
fn elbo_stays_below_log_evidence() {
    let m0 = test_meta(8, 8, 40.0, 1.1);
    for (k, truth) in [galaxy(&m0, 3.6, 4.1, 1500.0), star(&m0, 4.2, 3.8, 1500.0)].into_iter().enumerate() {
        let img = sky::sample_image(&[truth], &m0, 30 + k as u64).unwrap();
        let mut vp = VariationalParams::initialize(&truth, 1e-3, 1e-3);
        vp.star.color_loc = Prior::default().star.color_mean;
        vp.galaxy.color_loc = Prior::default().galaxy.color_mean;
        let ctx = SourceContext::new(vp, vec![], &[&img], Prior::default()).unwrap();
        let fit = crate::inference::fit_source(&ctx, &crate::trust_region::TrConfig::default()).unwrap();
        let logz = log_evidence(&ctx, fit.params.position, fit.params.shape);
        for q in [vp, fit.params] {
            let q = VariationalParams { position: fit.params.position, shape: fit.params.shape, ..q };
            let e = elbo(&ctx, &to_unconstrained(&q).unwrap()).unwrap().value;
            assert!(e <= logz + 1e-3, "elbo {e} above log evidence {logz}");
        }
        let e = elbo(&ctx, &to_unconstrained(&fit.params).unwrap()).unwrap().value;
        assert!(logz - e < 1.0, "gap {}", logz - e);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative(vp in arb_params(), p0 in 0.01f64..0.99) {
        let prior = Prior { p_star: p0, ..Prior::default() };
        prop_assert!(kl_divergence(&vp, &prior).value >= 0.0);
    }
}
