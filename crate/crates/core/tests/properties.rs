//! Property and oracle tests across modules.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use milscreen::impact;
use milscreen::metrics::{self, RocCurve, RocPoint, ScoredSet};
use milscreen::milnet::{FeatureBag, TileScorer};
use milscreen::numkit::{self, Tensor2D};
use milscreen::protocol::{self, TrainConfig, TrainMode};
use milscreen::slideprep;
use milscreen::synthgen::{self, SynthConfig};

fn finite() -> impl Strategy<Value = f64> {
    -50.0..50.0f64
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(finite(), 1..40), shift in -100.0..100.0f64) {
        let p = numkit::softmax(&v).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        for (a, b) in p.iter().zip(numkit::softmax(&shifted).unwrap()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_naive(n in 1usize..6, k in 1usize..6, m in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..n * k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..k * m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let got = numkit::matmul(
            &Tensor2D::from_vec(n, k, a.clone()).unwrap(),
            &Tensor2D::from_vec(k, m, b.clone()).unwrap(),
        ).unwrap();
        for i in 0..n {
            for j in 0..m {
                let want: f64 = (0..k).map(|t| a[i * k + t] * b[t * m + j]).sum();
                prop_assert!((got.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn otsu_separates_two_values(lo in 0u8..200, gap in 1u8..55, c0 in 1u64..500, c1 in 1u64..500) {
        let hi = lo + gap;
        let mut h = [0u64; 256];
        h[lo as usize] = c0;
        h[hi as usize] = c1;
        let t = slideprep::otsu_threshold(&h).unwrap();
        prop_assert!(t >= lo && t < hi);
        // ties go to the lowest threshold, which is the lower value itself
        prop_assert_eq!(t, lo);
    }

    #[test]
    fn auc_symmetries(scores in prop::collection::vec(0u8..12, 4..80), labels in prop::collection::vec(0u8..2, 4..80)) {
        let n = scores.len().min(labels.len());
        let mut labels = labels[..n].to_vec();
        labels[0] = 0;
        labels[1] = 1;
        let s: Vec<f64> = scores[..n].iter().map(|&v| v as f64).collect();
        let a = metrics::auc(&ScoredSet::new(s.clone(), labels.clone()).unwrap()).unwrap();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let b = metrics::auc(&ScoredSet::new(neg, labels.clone()).unwrap()).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        let squashed: Vec<f64> = s.iter().map(|v| numkit::sigmoid(v / 3.0)).collect();
        let c = metrics::auc(&ScoredSet::new(squashed, labels).unwrap()).unwrap();
        prop_assert_eq!(a, c);
    }

    #[test]
    fn bag_file_round_trip(seed in any::<u64>(), n_bags in 1usize..6, d1 in 1usize..9, n_cov in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bags: Vec<FeatureBag> = (0..n_bags).map(|i| {
            let b = rng.random_range(1..6);
            let data = (0..b * d1).map(|_| rng.random::<f32>() as f64).collect();
            FeatureBag {
                slide_id: format!("slide-{i}-é"),
                patient_id: format!("p{}", i / 2),
                label: rng.random_range(0..2),
                features: Tensor2D::from_vec(b, d1, data).unwrap(),
                covariates: (0..n_cov).map(|_| rng.random::<f32>() as f64).collect(),
                tile_groups: if rng.random_bool(0.5) { Some((0..b).map(|_| rng.random_range(0..3)).collect()) } else { None },
                tile_count_total: rng.random(),
            }
        }).collect();
        let bytes = slideprep::encode_bags(&bags, d1, n_cov).unwrap();
        let back = slideprep::decode_bags(&bytes).unwrap();
        prop_assert_eq!(back.d1, d1);
        prop_assert_eq!(back.n_covariates, n_cov);
        prop_assert_eq!(&back.bags, &bags);
        prop_assert_eq!(slideprep::encode_bags(&back.bags, d1, n_cov).unwrap(), bytes.clone());
        // every strict prefix is rejected
        let cut = rng.random_range(0..bytes.len());
        prop_assert!(slideprep::decode_bags(&bytes[..cut]).is_err());
    }

    #[test]
    fn sot_after_identity(n in 1.0..1e6f64, p in 0.001..1.0f64, se in 0.0..1.0f64, sp in 0.0..1.0f64) {
        prop_assume!(p * se + (1.0 - p) * (1.0 - sp) > 1e-9);
        let got = impact::sot_after(n, p, se, sp).unwrap();
        let want = n * p * (1.0 - se);
        prop_assert!((got - want).abs() <= 1e-9 * (n * p).max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn reduction_monotone_in_se_and_flat_in_sp(
        n in 10.0..1e6f64, p in 0.01..0.9f64, t in 0.0..0.99f64,
        se1 in 0.0..1.0f64, se2 in 0.0..1.0f64, sp1 in 0.0..1.0f64, sp2 in 0.0..1.0f64,
    ) {
        let (lo, hi) = if se1 <= se2 { (se1, se2) } else { (se2, se1) };
        let a = impact::grid_cell(n, p, t, lo, sp1).reduction_pct.unwrap();
        let b = impact::grid_cell(n, p, t, hi, sp1).reduction_pct.unwrap();
        prop_assert!(a <= b + 1e-9);
        let c = impact::grid_cell(n, p, t, lo, sp2).reduction_pct.unwrap();
        prop_assert_eq!(a, c);
    }
}

fn random_curve(rng: &mut ChaCha8Rng, n: usize) -> RocCurve {
    let mut se: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let mut fpr: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    se.sort_by(f64::total_cmp);
    fpr.sort_by(f64::total_cmp);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        sensitivity: 0.0,
        specificity: 1.0,
    }];
    for i in 0..n {
        points.push(RocPoint {
            threshold: (n - i) as f64,
            sensitivity: se[i],
            specificity: 1.0 - fpr[i],
        });
    }
    points.push(RocPoint {
        threshold: 0.0,
        sensitivity: 1.0,
        specificity: 0.0,
    });
    RocCurve::from_points(points).unwrap()
}

#[test]
fn operating_point_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for (case, n) in [3usize, 10, 100, 1000, 10_000].into_iter().enumerate() {
        let curve = random_curve(&mut rng, n);
        let (big_n, p) = (50_000.0, rng.random_range(0.05..0.5));
        let budget = rng.random_range(0.1..0.9) * big_n;
        let got = impact::find_operating_point(&curve, big_n, p, budget, 0.05).unwrap();
        // scan: smallest residual, then highest sensitivity
        let mut best = (f64::INFINITY, -1.0, 0.0);
        for pt in &curve.points {
            let ps = pt.sensitivity * big_n * p + (1.0 - pt.specificity) * big_n * (1.0 - p);
            let r = (ps - budget).abs();
            if r < best.0 || (r == best.0 && pt.sensitivity > best.1) {
                best = (r, pt.sensitivity, pt.specificity);
            }
        }
        assert_eq!((got.sensitivity, got.specificity), (best.1, best.2), "case {case}");
        assert_eq!(got.within_margin, best.0 <= 0.05 * budget);
    }
}

#[test]
fn enrollment_monotone_over_grid() {
    let mut prev_row: Option<Vec<u64>> = None;
    for n in [200u64, 500, 1000, 2000] {
        let row: Vec<u64> = (1..=10)
            .map(|i| impact::simulate_enrollment(n, 0.05 * i as f64, 5000, 0.95, 9).unwrap())
            .collect();
        assert!(row.windows(2).all(|w| w[0] <= w[1]), "n={n}: {row:?}");
        if let Some(prev) = &prev_row {
            assert!(prev.iter().zip(&row).all(|(a, b)| a <= b), "n={n}");
        }
        prev_row = Some(row);
    }
}

#[test]
fn low_bound_never_exceeds_high_bound() {
    for c in impact::builtin_countries() {
        let n = c.n_luad();
        let low = impact::sot_current(n, c.egfr_low, c.test_high);
        let high = impact::sot_current(n, c.egfr_high, c.test_low);
        assert!(low <= high, "{}", c.name);
    }
}

fn noisy_set(rng: &mut ChaCha8Rng, n: usize) -> ScoredSet {
    let labels: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
    let scores = labels
        .iter()
        .map(|&l| l as f64 * 0.8 + rng.random_range(0.0..1.5))
        .collect();
    ScoredSet::new(scores, labels).unwrap()
}

#[test]
fn bootstrap_interval_contains_point_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..50 {
        let set = noisy_set(&mut rng, 200 + 4 * i);
        let auc = metrics::auc(&set).unwrap();
        let (lo, hi) = metrics::bootstrap_ci(&set, 200, 0.95, i as u64).unwrap();
        assert!(lo <= auc && auc <= hi, "set {i}: {auc} not in [{lo}, {hi}]");
    }
}

#[test]
fn bootstrap_interval_shrinks_with_more_slides() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut widths = |n: usize| {
        let mut w: Vec<f64> = (0..15)
            .map(|s| {
                let set = noisy_set(&mut rng, n);
                let (lo, hi) = metrics::bootstrap_ci(&set, 200, 0.95, s).unwrap();
                hi - lo
            })
            .collect();
        metrics::median(&mut w).unwrap()
    };
    let small = widths(150);
    let large = widths(300);
    assert!(large < small, "{large} vs {small}");
}

#[test]
fn tile_scorer_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d1 = 6;
    let tiles: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..d1).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let refs: Vec<&[f64]> = tiles.iter().map(Vec::as_slice).collect();
    let scorer = TileScorer::new(d1, 3);
    for label in [0u8, 1] {
        let (_, g) = scorer.backward(&refs, label, 0.7).unwrap();
        let loss = |s: &TileScorer| s.backward(&refs, label, 0.7).unwrap().0;
        let eps = 1e-6;
        for i in 0..2 * d1 {
            let mut up = scorer.clone();
            up.w.data_mut()[i] += eps;
            let mut down = scorer.clone();
            down.w.data_mut()[i] -= eps;
            let numeric = (loss(&up) - loss(&down)) / (2.0 * eps);
            assert!((numeric - g.w.data()[i]).abs() < 1e-6, "w[{i}]");
        }
        for i in 0..2 {
            let mut up = scorer.clone();
            up.b.data_mut()[i] += eps;
            let mut down = scorer.clone();
            down.b.data_mut()[i] -= eps;
            let numeric = (loss(&up) - loss(&down)) / (2.0 * eps);
            assert!((numeric - g.b.data()[i]).abs() < 1e-6, "b[{i}]");
        }
    }
}

fn small_cohort() -> SynthConfig {
    SynthConfig {
        n_patients: 40,
        seed: 21,
        ..SynthConfig::default()
    }
}

#[test]
fn generation_ignores_thread_count() {
    let cfg = small_cohort();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| synthgen::generate(&cfg).unwrap());
    let b = four.install(|| synthgen::generate(&cfg).unwrap());
    assert_eq!(a.bags, b.bags);
    assert_eq!(a.covariates, b.covariates);
}

#[test]
fn training_ignores_thread_count() {
    let ds = synthgen::generate(&small_cohort()).unwrap();
    let plan = protocol::make_splits(&ds.covariates.patient_ids, 3, 0.8, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        replicates: 2,
        ..TrainConfig::desk_scale(TrainMode::Gma)
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| protocol::run_protocol(&ds.bags, &plan, &cfg).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.winners(), b.winners());
}

#[test]
fn generated_prevalence_is_close_to_target() {
    // 200 patients at 0.3: binomial sd ≈ 0.032, so ±0.05 is about 1.5 sd;
    // check several seeds and require most of them to land inside
    let inside = (0..10)
        .filter(|&seed| {
            let ds = synthgen::generate(&SynthConfig {
                seed,
                ..SynthConfig::default()
            })
            .unwrap();
            let labels = ds.patient_labels();
            let prev = labels.values().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;
            (prev - 0.3).abs() <= 0.05
        })
        .count();
    assert!(inside >= 8, "{inside}/10 seeds within 0.3 ± 0.05");
}
