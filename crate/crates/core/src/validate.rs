//! Scoring a predicted catalog against ground truth.

use alloc::vec::Vec;
#[allow(unused_imports)] // shadowed by inherent methods whenever std is linked
use num_traits::Float;

use crate::sky::{SourceParams, ARCSEC_PER_DEGREE, COLOR_COUNT};
use crate::spatial::NeighborIndex;

/// Default matching radius in pixels.
pub const DEFAULT_MAX_DIST_PX: f64 = 2.0;
/// Default pixel scale (arcsec per pixel) for reporting distances in pixels.
pub const DEFAULT_PIXEL_SCALE: f64 = 0.396;
/// Magnitude zero point; only differences are reported, so its value is
/// immaterial.
pub const DEFAULT_ZERO_POINT: f64 = 22.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreConfig {
    pub max_dist_px: f64,
    pub pixel_scale_arcsec: f64,
    pub zero_point: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            max_dist_px: DEFAULT_MAX_DIST_PX,
            pixel_scale_arcsec: DEFAULT_PIXEL_SCALE,
            zero_point: DEFAULT_ZERO_POINT,
        }
    }
}

/// One matched (prediction, truth) pair and its distance in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub pred: usize,
    pub truth: usize,
    pub dist_px: f64,
}

fn distance_px(a: [f64; 2], b: [f64; 2], pixel_scale: f64) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    (dx * dx + dy * dy).sqrt() * ARCSEC_PER_DEGREE / pixel_scale
}

/// Greedy one-to-one matching: candidate pairs within `max_dist_px` are taken
/// in order of increasing distance (ties broken by indices).
pub fn match_sources(pred: &[[f64; 2]], truth: &[[f64; 2]], max_dist_px: f64, pixel_scale_arcsec: f64) -> Vec<Match> {
    let radius_deg = max_dist_px * pixel_scale_arcsec / ARCSEC_PER_DEGREE;
    let index = NeighborIndex::new(truth, radius_deg);
    let mut cands = Vec::new();
    for (i, &p) in pred.iter().enumerate() {
        for j in index.within(p, radius_deg) {
            let d = distance_px(p, truth[j], pixel_scale_arcsec);
            if d <= max_dist_px {
                cands.push(Match { pred: i, truth: j, dist_px: d });
            }
        }
    }
    cands.sort_by(|a, b| a.dist_px.total_cmp(&b.dist_px).then(a.pred.cmp(&b.pred)).then(a.truth.cmp(&b.truth)));
    let mut used_p = alloc::vec![false; pred.len()];
    let mut used_t = alloc::vec![false; truth.len()];
    let mut out = Vec::new();
    for c in cands {
        if !used_p[c.pred] && !used_t[c.truth] {
            used_p[c.pred] = true;
            used_t[c.truth] = true;
            out.push(c);
        }
    }
    out
}

/// Error metrics; `None` where no pair contributes.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ScoreReport {
    /// Mean position error, pixels.
    pub position: Option<f64>,
    /// Proportion of matched true galaxies predicted to be stars.
    pub missed_gals: Option<f64>,
    /// Proportion of matched true stars predicted to be galaxies.
    pub missed_stars: Option<f64>,
    /// Mean absolute reference-band magnitude error.
    pub brightness: Option<f64>,
    pub colors: [Option<f64>; COLOR_COUNT],
    pub profile: Option<f64>,
    pub eccentricity: Option<f64>,
    /// Mean absolute effective-radius error, arcsec.
    pub scale: Option<f64>,
    /// Mean angle error, degrees modulo 180.
    pub angle: Option<f64>,
    pub matched: usize,
    pub unmatched_pred: usize,
    pub unmatched_truth: usize,
}

/// Angular distance between two position angles modulo 180, in [0, 90].
pub fn angle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 180.0;
    d.min(180.0 - d)
}

fn magnitude(flux: f64, zero_point: f64) -> f64 {
    zero_point - 2.5 * flux.log10()
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Metrics over `pairing`. Galaxy-only rows average over pairs whose truth is
/// a galaxy, whatever the predicted type.
pub fn score(pred: &[SourceParams], truth: &[SourceParams], pairing: &[Match], cfg: &ScoreConfig) -> ScoreReport {
    let mut position = Mean::default();
    let mut missed_gals = Mean::default();
    let mut missed_stars = Mean::default();
    let mut brightness = Mean::default();
    let mut colors: [Mean; COLOR_COUNT] = Default::default();
    let mut profile = Mean::default();
    let mut ecc = Mean::default();
    let mut scale = Mean::default();
    let mut angle = Mean::default();
    for m in pairing {
        let (p, t) = (&pred[m.pred], &truth[m.truth]);
        position.push(distance_px(p.position, t.position, cfg.pixel_scale_arcsec));
        let wrong = if p.is_star != t.is_star { 1.0 } else { 0.0 };
        if t.is_star {
            missed_stars.push(wrong);
        } else {
            missed_gals.push(wrong);
        }
        brightness.push((magnitude(p.ref_flux, cfg.zero_point) - magnitude(t.ref_flux, cfg.zero_point)).abs());
        for j in 0..COLOR_COUNT {
            colors[j].push((p.colors[j] - t.colors[j]).abs());
        }
        if !t.is_star {
            profile.push((p.shape.profile_mix - t.shape.profile_mix).abs());
            ecc.push((p.shape.axis_ratio - t.shape.axis_ratio).abs());
            scale.push((p.shape.scale - t.shape.scale).abs());
            angle.push(angle_distance(p.shape.angle, t.shape.angle));
        }
    }
    ScoreReport {
        position: position.get(),
        missed_gals: missed_gals.get(),
        missed_stars: missed_stars.get(),
        brightness: brightness.get(),
        colors: core::array::from_fn(|j| colors[j].get()),
        profile: profile.get(),
        eccentricity: ecc.get(),
        scale: scale.get(),
        angle: angle.get(),
        matched: pairing.len(),
        unmatched_pred: pred.len() - pairing.len(),
        unmatched_truth: truth.len() - pairing.len(),
    }
}

impl ScoreReport {
    /// (name, value) rows in table order.
    pub fn rows(&self) -> Vec<(&'static str, Option<f64>)> {
        let mut rows = alloc::vec![
            ("position", self.position),
            ("missed_gals", self.missed_gals),
            ("missed_stars", self.missed_stars),
            ("brightness", self.brightness),
        ];
        for (name, v) in ["color_ug", "color_gr", "color_ri", "color_iz"].into_iter().zip(self.colors) {
            rows.push((name, v));
        }
        rows.extend([
            ("profile", self.profile),
            ("eccentricity", self.eccentricity),
            ("scale", self.scale),
            ("angle", self.angle),
        ]);
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sky::{sample_catalog, ClusterConfig, GalaxyShape, Prior, SkyRegion};
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn catalog(n: usize, seed: u64) -> Vec<SourceParams> {
        let region = SkyRegion { ra: (10.0, 10.05), dec: (5.0, 5.05) };
        sample_catalog(&Prior::default(), &region, n, &ClusterConfig::default(), seed).unwrap()
    }

    fn positions(c: &[SourceParams]) -> Vec<[f64; 2]> {
        c.iter().map(|s| s.position).collect()
    }

    #[test]
    fn identical_catalogs_score_zero() {
        let c = catalog(300, 1);
        let m = match_sources(&positions(&c), &positions(&c), 2.0, 0.396);
        assert_eq!(m.len(), 300);
        assert!(m.iter().all(|x| x.dist_px == 0.0 && x.pred == x.truth));
        let r = score(&c, &c, &m, &ScoreConfig::default());
        for (name, v) in r.rows() {
            assert_eq!(v, Some(0.0), "{name}");
        }
        assert_eq!((r.unmatched_pred, r.unmatched_truth), (0, 0));
    }

    #[test]
    fn nearest_truth_wins() {
        let px = 0.396 / 3600.0;
        let pred = [[10.0, 5.0]];
        let truth = [[10.0 + 10.0 * px, 5.0], [10.0 + 0.1 * px, 5.0]];
        let m = match_sources(&pred, &truth, 2.0, 0.396);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].truth, 1);
        assert!((m[0].dist_px - 0.1).abs() < 1e-9);
    }

    #[test]
    fn angle_errors_wrap() {
        assert!((angle_distance(171.0, 9.0) - 18.0).abs() < 1e-12);
        assert!((angle_distance(0.0, 90.0) - 90.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let d = angle_distance(rng.random_range(0.0..180.0), rng.random_range(0.0..180.0));
            assert!((0.0..=90.0).contains(&d));
        }
    }

    #[test]
    fn empty_pairing_reports_absent_means() {
        let c = catalog(3, 4);
        let r = score(&c, &[], &[], &ScoreConfig::default());
        assert!(r.rows().iter().all(|(_, v)| v.is_none()));
        assert_eq!(r.unmatched_pred, 3);
    }

    #[test]
    fn type_confusion_proportions() {
        let c = catalog(200, 5);
        let mut p = c.clone();
        let gal: Vec<usize> = (0..c.len()).filter(|&i| !c[i].is_star).collect();
        for &i in gal.iter().take(3) {
            p[i].is_star = true;
        }
        let m = match_sources(&positions(&p), &positions(&c), 2.0, 0.396);
        let r = score(&p, &c, &m, &ScoreConfig::default());
        assert!((r.missed_gals.unwrap() - 3.0 / gal.len() as f64).abs() < 1e-12);
        assert_eq!(r.missed_stars, Some(0.0));
    }

    #[test]
    fn metrics_invariant_under_permutation() {
        let truth = catalog(150, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let px = 0.396 / 3600.0;
        let pred: Vec<SourceParams> = truth
            .iter()
            .map(|t| {
                let mut p = *t;
                p.position[0] += rng.random_range(-0.5..0.5) * px;
                p.ref_flux *= 1.0 + rng.random_range(-0.1..0.1);
                p.shape = GalaxyShape { angle: (t.shape.angle + 20.0) % 180.0, ..t.shape };
                p
            })
            .collect();
        let base = score(&pred, &truth, &match_sources(&positions(&pred), &positions(&truth), 2.0, 0.396), &ScoreConfig::default());
        let mut perm: Vec<usize> = (0..truth.len()).collect();
        perm.reverse();
        perm.rotate_left(17);
        let pt: Vec<SourceParams> = perm.iter().map(|&i| truth[i]).collect();
        let pp: Vec<SourceParams> = perm.iter().map(|&i| pred[i]).collect();
        let other = score(&pp, &pt, &match_sources(&positions(&pp), &positions(&pt), 2.0, 0.396), &ScoreConfig::default());
        for ((n, a), (_, b)) in base.rows().iter().zip(other.rows()) {
            assert!((a.unwrap() - b.unwrap()).abs() < 1e-9, "{n}");
        }
        assert!((base.angle.unwrap() - 20.0).abs() < 1e-9);
    }

    /// Minimum total distance among matchings of each size, by a dynamic
    /// program over sets of used truths (sparse, since few pairs are close).
    fn optimal_costs(d: &[Vec<Option<f64>>]) -> Vec<Option<f64>> {
        use alloc::collections::BTreeMap;
        let mut states: BTreeMap<u32, f64> = BTreeMap::new();
        states.insert(0, 0.0);
        for row in d {
            let mut next = states.clone();
            for (&mask, &cost) in &states {
                for (j, dj) in row.iter().enumerate() {
                    if let Some(dj) = dj {
                        if mask & (1 << j) == 0 {
                            let e = next.entry(mask | (1 << j)).or_insert(f64::INFINITY);
                            *e = e.min(cost + dj);
                        }
                    }
                }
            }
            states = next;
        }
        let mut best = vec![None::<f64>; d.len() + 1];
        for (mask, cost) in states {
            let k = mask.count_ones() as usize;
            best[k] = Some(best[k].map_or(cost, |b: f64| b.min(cost)));
        }
        best
    }

    #[test]
    fn greedy_is_close_to_optimal_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let px = 0.396 / 3600.0;
        // Dense enough that most sources have several candidates.
        let truth: Vec<[f64; 2]> =
            (0..500).map(|_| [10.0 + rng.random_range(0.0..60.0) * px, 5.0 + rng.random_range(0.0..60.0) * px]).collect();
        let pred: Vec<[f64; 2]> =
            truth.iter().map(|t| [t[0] + rng.random_range(-1.0..1.0) * px, t[1] + rng.random_range(-1.0..1.0) * px]).collect();
        let order = crate::spatial::spatial_order(&truth);
        let (mut greedy_total, mut opt_total) = (0.0, 0.0);
        for chunk in order.chunks(20) {
            let p: Vec<[f64; 2]> = chunk.iter().map(|&i| pred[i]).collect();
            let t: Vec<[f64; 2]> = chunk.iter().map(|&i| truth[i]).collect();
            let greedy = match_sources(&p, &t, 2.0, 0.396);
            let d: Vec<Vec<Option<f64>>> = p
                .iter()
                .map(|&a| {
                    t.iter()
                        .map(|&b| {
                            let x = distance_px(a, b, 0.396);
                            (x <= 2.0).then_some(x)
                        })
                        .collect()
                })
                .collect();
            let best = optimal_costs(&d);
            let max_card = best.iter().rposition(|c| c.is_some()).unwrap();
            assert!(greedy.len() + 2 >= max_card);
            let opt = best[greedy.len()].unwrap();
            let cost: f64 = greedy.iter().map(|m| m.dist_px).sum();
            assert!(cost >= opt - 1e-9);
            greedy_total += cost;
            opt_total += opt;
        }
        assert!(greedy_total <= 1.1 * opt_total, "{greedy_total} vs {opt_total}");
    }
}
