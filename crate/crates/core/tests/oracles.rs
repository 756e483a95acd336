mod oracle;

use proptest::prelude::*;
use ucad_core::fusion::score_visual;
use ucad_core::metrics::{aupr, auroc};
use ucad_core::rng::Rng;
use ucad_core::sampling::{covering_radius, farthest_point_indices, fps, SamplingBudget};
use ucad_core::tensor::{FeatureGrid, PatchSet};
use ucad_core::tuning::{loss_text, loss_visual, RegionMask};

const TOL: f64 = 1e-9;
const INSTANCES: usize = 150;

fn patch_set(rows: &[Vec<f64>]) -> PatchSet<f64> {
    PatchSet::from_rows(rows).unwrap()
}

fn scores_and_labels(rng: &mut Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    // Coarse scores so ties are common.
    let scores = (0..n).map(|_| (rng.uniform() * 6.0).floor() / 6.0 + if rng.uniform() < 0.5 { 0.0 } else { rng.uniform() }).collect();
    let mut labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.4).collect();
    labels[0] = true;
    labels[1] = false;
    (scores, labels)
}

#[test]
fn fps_matches_oracle() {
    let mut rng = Rng::new(1);
    for _ in 0..INSTANCES {
        let n = 2 + rng.below(30);
        let c = 1 + rng.below(6);
        let k = 1 + rng.below(n);
        let pts = oracle::random_points(&mut rng, n, c);
        let ps = patch_set(&pts);
        let idx = farthest_point_indices(&ps, SamplingBudget::new(k)).unwrap();
        assert_eq!(idx, oracle::fps(&pts, k));
        let sel = fps(&ps, SamplingBudget::new(k)).unwrap();
        for (row, &i) in sel.rows().zip(&idx) {
            assert_eq!(row, pts[i].as_slice());
        }
    }
}

#[test]
fn covering_radius_matches_oracle() {
    let mut rng = Rng::new(2);
    for _ in 0..INSTANCES {
        let n = 1 + rng.below(25);
        let m = 1 + rng.below(8);
        let c = 1 + rng.below(5);
        let all = oracle::random_points(&mut rng, n, c);
        let sel = oracle::random_points(&mut rng, m, c);
        let got = covering_radius(&patch_set(&sel), &patch_set(&all)).unwrap();
        assert!((got - oracle::covering_radius(&sel, &all)).abs() <= TOL);
    }
}

#[test]
fn score_visual_matches_oracle() {
    let mut rng = Rng::new(3);
    for _ in 0..INSTANCES {
        let (h, w) = (1 + rng.below(4), 1 + rng.below(4));
        let c = 1 + rng.below(6);
        let patches = oracle::random_points(&mut rng, h * w, c);
        let m = 1 + rng.below(10);
        let bank = oracle::random_points(&mut rng, m, c);
        let grid = FeatureGrid::new(h, w, c, patches.concat()).unwrap();
        let got = score_visual(&grid, &patch_set(&bank)).unwrap();
        for (g, e) in got.values().iter().zip(oracle::score_visual(&patches, &bank)) {
            assert!((g - e).abs() <= TOL);
        }
    }
}

#[test]
fn auroc_and_aupr_match_oracles() {
    let mut rng = Rng::new(4);
    for _ in 0..INSTANCES {
        let n = 2 + rng.below(60);
        let (s, l) = scores_and_labels(&mut rng, n);
        assert!((auroc(&s, &l).unwrap() - oracle::auroc(&s, &l)).abs() <= TOL);
        assert!((aupr(&s, &l).unwrap() - oracle::aupr(&s, &l)).abs() <= TOL);
    }
}

#[test]
fn loss_text_matches_oracle() {
    let mut rng = Rng::new(5);
    for _ in 0..INSTANCES {
        let n = 1 + rng.below(20);
        let s: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, 2.0)).collect();
        let l: Vec<f64> = (0..n).map(|_| if rng.uniform() < 0.5 { 0.0 } else { 1.0 }).collect();
        assert!((loss_text(&s, &l).unwrap() - oracle::loss_text(&s, &l)).abs() <= TOL);
    }
}

#[test]
fn loss_visual_matches_oracle() {
    let mut rng = Rng::new(6);
    for _ in 0..INSTANCES {
        let (h, w) = (1 + rng.below(4), 1 + rng.below(5));
        let c = 1 + rng.below(6);
        let patches = oracle::random_points(&mut rng, h * w, c);
        let regions: Vec<u16> = (0..h * w).map(|_| rng.below(3) as u16).collect();
        let (la, lb) = (rng.uniform_range(0.1, 2.0), rng.uniform_range(0.1, 2.0));
        let grid = FeatureGrid::new(h, w, c, patches.concat()).unwrap();
        let mask = RegionMask::new(h, w, regions.clone()).unwrap();
        let got = loss_visual(&grid, &mask, la, lb).unwrap();
        assert!((got - oracle::loss_visual(&patches, &regions, la, lb)).abs() <= TOL);
    }
}

#[test]
fn greedy_coreset_is_within_twice_the_optimum() {
    let mut rng = Rng::new(7);
    for _ in 0..200 {
        let n = 2 + rng.below(11);
        let k = 1 + rng.below(4.min(n));
        let c = 1 + rng.below(3);
        let pts = oracle::random_points(&mut rng, n, c);
        let ps = patch_set(&pts);
        let greedy = covering_radius(&fps(&ps, SamplingBudget::new(k)).unwrap(), &ps).unwrap();
        let best = oracle::optimal_radius(&pts, k);
        assert!(greedy <= 2.0 * best + 1e-12, "greedy {greedy} vs optimum {best}");
    }
}

fn points() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..4).prop_flat_map(|c| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, c), 1..20))
}

proptest! {
    #[test]
    fn radius_shrinks_as_budget_grows(pts in points()) {
        let ps = patch_set(&pts);
        let mut last = f64::INFINITY;
        for k in 1..=pts.len() {
            let r = covering_radius(&fps(&ps, SamplingBudget::new(k)).unwrap(), &ps).unwrap();
            prop_assert!(r <= last);
            last = r;
        }
        prop_assert_eq!(last, 0.0);
    }

    #[test]
    fn fps_selection_is_a_prefix_chain(pts in points()) {
        let ps = patch_set(&pts);
        let full = farthest_point_indices(&ps, SamplingBudget::new(pts.len())).unwrap();
        for k in 1..pts.len() {
            prop_assert_eq!(&farthest_point_indices(&ps, SamplingBudget::new(k)).unwrap()[..], &full[..k]);
        }
    }

    #[test]
    fn auroc_flips_with_negated_scores(s in prop::collection::vec(-1.0f64..1.0, 4..30)) {
        let labels: Vec<bool> = (0..s.len()).map(|i| i % 3 == 0).collect();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let a = auroc(&s, &labels).unwrap();
        prop_assert!((a + auroc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aupr_is_a_probability(s in prop::collection::vec(-1.0f64..1.0, 2..40)) {
        let labels: Vec<bool> = (0..s.len()).map(|i| i % 2 == 0).collect();
        let p = aupr(&s, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
    }
}
