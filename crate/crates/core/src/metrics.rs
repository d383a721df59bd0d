//! GOSPA metric (α = 2) and its root-mean-square aggregate over time.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::assignment::{solve_optimal, CostMatrix};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GospaParams {
    /// Cut-off distance (m).
    pub c: f64,
    pub p: f64,
    /// Only α = 2 is supported.
    pub alpha: f64,
}

impl GospaParams {
    pub fn new(c: f64, p: f64, alpha: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) || !(p >= 1.0 && p.is_finite()) {
            return Err(invalid(format!("GOSPA needs c > 0 and p >= 1, got c={c}, p={p}")));
        }
        if alpha != 2.0 {
            return Err(invalid(format!("only alpha = 2 is supported, got {alpha}")));
        }
        Ok(Self { c, p, alpha })
    }
}

impl Default for GospaParams {
    fn default() -> Self {
        Self {
            c: 3.0,
            p: 2.0,
            alpha: 2.0,
        }
    }
}

/// GOSPA value and its decomposition; each part is a p-th root, so
/// `total^p = localization^p + missed^p + false_^p`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GospaResult {
    pub total: f64,
    pub localization: f64,
    pub missed: f64,
    pub false_: f64,
}

/// GOSPA distance between a set of true and a set of estimated positions.
pub fn gospa(truth: &[Vector2<f64>], estimate: &[Vector2<f64>], params: &GospaParams) -> Result<GospaResult> {
    let (c, p) = (params.c, params.p);
    let cp = c.powf(p);
    let (n, m) = (truth.len(), estimate.len());
    // Rows: truth. Columns: estimates, then one dummy column per truth.
    let mut cost = CostMatrix::forbidden(n, m + n);
    for (i, x) in truth.iter().enumerate() {
        for (j, y) in estimate.iter().enumerate() {
            cost.set(i, j, (x - y).norm().min(c).powf(p) - cp);
        }
        cost.set(i, m + i, 0.0);
    }
    let a = solve_optimal(&cost)?;
    let mut loc = 0.0;
    let mut paired = 0usize;
    for (i, &j) in a.cols.iter().enumerate() {
        if j < m {
            let d = (truth[i] - estimate[j]).norm();
            // Pairs at or beyond the cut-off count as a miss plus a false
            // estimate; their cost is identical.
            if d < c {
                loc += d.powf(p);
                paired += 1;
            }
        }
    }
    let missed = (n - paired) as f64 * cp / 2.0;
    let false_ = (m - paired) as f64 * cp / 2.0;
    let root = |v: f64| v.powf(1.0 / p);
    Ok(GospaResult {
        total: root(loc + missed + false_),
        localization: root(loc),
        missed: root(missed),
        false_: root(false_),
    })
}

/// `sqrt(mean_k d_G(k)²)` over all time steps.
pub fn rms_gospa_over_time(per_step: &[GospaResult]) -> Result<f64> {
    if per_step.is_empty() {
        return Err(invalid("RMS GOSPA needs at least one time step"));
    }
    let s: f64 = per_step.iter().map(|g| g.total * g.total).sum();
    Ok((s / per_step.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut impl Rng, max: usize) -> Vec<Vector2<f64>> {
        let n = rng.random_range(0..=max);
        (0..n)
            .map(|_| Vector2::new(rng.random_range(0.0..8.0), rng.random_range(0.0..8.0)))
            .collect()
    }

    /// Exhaustive minimum over partial assignments of the defining sum.
    fn brute(x: &[Vector2<f64>], y: &[Vector2<f64>], c: f64, p: f64) -> f64 {
        fn rec(i: usize, x: &[Vector2<f64>], y: &[Vector2<f64>], used: &mut Vec<bool>, c: f64, p: f64) -> f64 {
            if i == x.len() {
                let free = used.iter().filter(|u| !**u).count() as f64;
                return free * c.powf(p) / 2.0;
            }
            let mut best = c.powf(p) / 2.0 + rec(i + 1, x, y, used, c, p);
            for j in 0..y.len() {
                if !used[j] {
                    used[j] = true;
                    let d = (x[i] - y[j]).norm().min(c).powf(p);
                    best = best.min(d + rec(i + 1, x, y, used, c, p));
                    used[j] = false;
                }
            }
            best
        }
        rec(0, x, y, &mut vec![false; y.len()], c, p).powf(1.0 / p)
    }

    fn decomposition_holds(g: &GospaResult, p: f64) -> bool {
        (g.total.powf(p) - g.localization.powf(p) - g.missed.powf(p) - g.false_.powf(p)).abs() < 1e-9
    }

    #[test]
    fn examples() {
        let prm = GospaParams::default();
        assert_eq!(gospa(&[], &[], &prm).unwrap(), GospaResult::default());
        let g = gospa(&[Vector2::zeros()], &[], &prm).unwrap();
        assert!((g.total - 4.5f64.sqrt()).abs() < 1e-12);
        assert!((g.missed - g.total).abs() < 1e-12);
        assert_eq!(g.localization, 0.0);
        let g = gospa(&[Vector2::zeros()], &[Vector2::new(0.6, 0.8)], &prm).unwrap();
        assert!((g.total - 1.0).abs() < 1e-12 && (g.localization - 1.0).abs() < 1e-12);
        assert_eq!(g.missed, 0.0);
        assert!(GospaParams::new(0.0, 2.0, 2.0).is_err());
        assert!(GospaParams::new(3.0, 0.5, 2.0).is_err());
    }

    #[test]
    fn far_pairs_are_missed_plus_false() {
        let prm = GospaParams::default();
        let g = gospa(&[Vector2::zeros()], &[Vector2::new(10.0, 0.0)], &prm).unwrap();
        assert_eq!(g.localization, 0.0);
        assert!((g.missed - 4.5f64.sqrt()).abs() < 1e-12 && (g.false_ - 4.5f64.sqrt()).abs() < 1e-12);
        assert!((g.total - 3.0).abs() < 1e-12);
    }

    #[test]
    fn metric_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let prm = GospaParams::default();
        for _ in 0..1000 {
            let (x, y, z) = (
                random_set(&mut rng, 5),
                random_set(&mut rng, 5),
                random_set(&mut rng, 5),
            );
            let xy = gospa(&x, &y, &prm).unwrap();
            let yx = gospa(&y, &x, &prm).unwrap();
            let xz = gospa(&x, &z, &prm).unwrap();
            let zy = gospa(&z, &y, &prm).unwrap();
            assert_eq!(gospa(&x, &x, &prm).unwrap().total, 0.0);
            assert!((xy.total - yx.total).abs() < 1e-9);
            assert!(xy.total <= xz.total + zy.total + 1e-9);
            if xy.total == 0.0 {
                assert_eq!(x.len(), y.len());
            }
            for g in [xy, yx, xz, zy] {
                assert!(decomposition_holds(&g, prm.p));
            }
        }
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        for _ in 0..500 {
            let p = [1.0, 2.0, 3.0][rng.random_range(0..3)];
            let prm = GospaParams::new(rng.random_range(0.5..5.0), p, 2.0).unwrap();
            let (x, y) = (random_set(&mut rng, 4), random_set(&mut rng, 4));
            let g = gospa(&x, &y, &prm).unwrap();
            assert!((g.total - brute(&x, &y, prm.c, p)).abs() < 1e-9);
            assert!(decomposition_holds(&g, p));
        }
    }

    #[test]
    fn moving_an_estimate_beyond_the_cutoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let prm = GospaParams::default();
        for _ in 0..200 {
            let x = random_set(&mut rng, 4);
            let mut y = random_set(&mut rng, 3);
            let base = gospa(&x, &y, &prm).unwrap();
            y.push(Vector2::new(1e3, 1e3));
            let moved = gospa(&x, &y, &prm).unwrap();
            assert!((moved.total.powi(2) - base.total.powi(2) - 4.5).abs() < 1e-9);
        }
    }

    #[test]
    fn cutoff_monotone_without_matches() {
        let x = vec![Vector2::new(0.0, 0.0), Vector2::new(1.0, 1.0)];
        let y = vec![Vector2::new(50.0, 0.0)];
        let mut last = 0.0;
        for c in [1.0, 2.0, 3.0, 10.0, 20.0] {
            let g = gospa(&x, &y, &GospaParams::new(c, 2.0, 2.0).unwrap()).unwrap();
            assert!(g.total >= last);
            last = g.total;
        }
    }

    #[test]
    fn rms_examples() {
        let r = |v: f64| GospaResult {
            total: v,
            ..Default::default()
        };
        assert!((rms_gospa_over_time(&[r(1.5); 7]).unwrap() - 1.5).abs() < 1e-15);
        assert!((rms_gospa_over_time(&[r(0.0), r(2.0)]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(rms_gospa_over_time(&[]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, Strategy};

        fn set() -> impl Strategy<Value = Vec<Vector2<f64>>> {
            prop::collection::vec((0.0f64..8.0, 0.0f64..8.0).prop_map(|(x, y)| Vector2::new(x, y)), 0..5)
        }

        proptest! {
            #[test]
            fn gospa_is_a_metric(x in set(), y in set(), z in set(), c in 0.5f64..5.0, p in 1.0f64..3.0) {
                let prm = GospaParams::new(c, p, 2.0).unwrap();
                let xy = gospa(&x, &y, &prm).unwrap();
                prop_assert_eq!(gospa(&x, &x, &prm).unwrap().total, 0.0);
                prop_assert!((xy.total - gospa(&y, &x, &prm).unwrap().total).abs() < 1e-9);
                let via = gospa(&x, &z, &prm).unwrap().total + gospa(&z, &y, &prm).unwrap().total;
                prop_assert!(xy.total <= via + 1e-9);
                prop_assert!(decomposition_holds(&xy, p));
            }
        }
    }
}
