mod common;

use common::{mask_tensor, metric_fixture, oracle_e, oracle_f, oracle_mae, oracle_s, to_tensor};
use proptest::prelude::*;
use sammese::metrics::{self, BETA_SQ, S_ALPHA};
use sammese::Tensor;

fn flip(t: &Tensor) -> Tensor {
    let (h, w) = (t.dim(0), t.dim(1));
    Tensor::from_fn(&[h, w], |i| t.data()[(i / w) * w + (w - 1 - i % w)])
}

fn pair() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<bool>>)> {
    (
        prop::collection::vec(prop::collection::vec(0.0..=1.0f64, 8), 8),
        prop::collection::vec(prop::collection::vec(any::<bool>(), 8), 8),
    )
}

#[test]
fn metrics_match_oracles_on_fixtures() {
    for i in 0..200 {
        let (m, g) = metric_fixture(i);
        let (mt, gt) = (to_tensor(&m), mask_tensor(&g));
        assert!((metrics::mae(&mt, &gt) - oracle_mae(&m, &g)).abs() < 1e-9);
        let (fm, fa) = metrics::f_measure(&mt, &gt, BETA_SQ);
        let (om, oa) = oracle_f(&m, &g, BETA_SQ);
        assert!((fm - om).abs() < 1e-9 && (fa - oa).abs() < 1e-9, "fixture {i}");
        let (em, ea) = metrics::e_measure(&mt, &gt);
        let (om, oa) = oracle_e(&m, &g);
        assert!((em - om).abs() < 1e-9 && (ea - oa).abs() < 1e-9, "fixture {i}");
        let s = metrics::s_measure(&mt, &gt, S_ALPHA);
        assert!((s - oracle_s(&m, &g, S_ALPHA)).abs() < 1e-9, "fixture {i}");
    }
}

#[test]
fn analytic_cases() {
    let g = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(metrics::mae(&g, &g), 0.0);
    assert_eq!(metrics::mae(&Tensor::full(&[2, 2], 0.25), &Tensor::zeros(&[2, 2])), 0.25);
    assert_eq!(metrics::f_measure(&g, &g, BETA_SQ).0, 1.0);
    assert!((metrics::s_measure(&g, &g, S_ALPHA) - 1.0).abs() < 1e-6);
    assert_eq!(metrics::e_measure(&g, &g).0, 1.0);
    let mu = 0.3;
    let s = metrics::s_measure(&Tensor::full(&[4, 4], mu), &Tensor::zeros(&[4, 4]), S_ALPHA);
    assert!((s - (1.0 - mu)).abs() < 1e-12);
}

#[test]
fn inverted_prediction_matches_oracle() {
    for i in 0..20 {
        let (_, g) = metric_fixture(i);
        if g.iter().flatten().all(|&t| t) || g.iter().flatten().all(|&t| !t) {
            continue;
        }
        let inv: Vec<Vec<f64>> = g
            .iter()
            .map(|r| r.iter().map(|&t| if t { 0.0 } else { 1.0 }).collect())
            .collect();
        let (mt, gt) = (to_tensor(&inv), mask_tensor(&g));
        assert!((metrics::f_measure(&mt, &gt, BETA_SQ).0 - oracle_f(&inv, &g, BETA_SQ).0).abs() < 1e-12);
        let e = metrics::e_measure(&mt, &gt);
        assert!((e.0 - oracle_e(&inv, &g).0).abs() < 1e-12);
        assert!(e.0 < 0.5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flip_invariance((m, g) in pair()) {
        let (mt, gt) = (to_tensor(&m), mask_tensor(&g));
        let (mf, gf) = (flip(&mt), flip(&gt));
        prop_assert!((metrics::mae(&mt, &gt) - metrics::mae(&mf, &gf)).abs() < 1e-12);
        let (a, b) = (metrics::f_measure(&mt, &gt, BETA_SQ), metrics::f_measure(&mf, &gf, BETA_SQ));
        prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        let (a, b) = (metrics::e_measure(&mt, &gt), metrics::e_measure(&mf, &gf));
        prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
    }

    #[test]
    fn mae_complement((m, g) in pair()) {
        let (mt, gt) = (to_tensor(&m), mask_tensor(&g));
        let inv = mt.map(|v| 1.0 - v);
        prop_assert!((metrics::mae(&mt, &gt) + metrics::mae(&inv, &gt) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_scores_invariant_to_monotone_rescale((m, g) in pair()) {
        let mt = to_tensor(&m).map(|v| (v * 255.0).round() / 255.0);
        let gt = mask_tensor(&g);
        let levels: Vec<f64> = (0..256).map(|k| k as f64 / 255.0).collect();
        let mut sorted = mt.data().to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.dedup();
        // Spread the distinct values evenly over the top of the range.
        let rescaled = mt.map(|v| {
            let rank = sorted.iter().position(|&s| s == v).unwrap();
            levels[255 - (sorted.len() - 1 - rank)]
        });
        let (a, b) = (metrics::f_measure(&mt, &gt, BETA_SQ), metrics::f_measure(&rescaled, &gt, BETA_SQ));
        prop_assert!((a.0 - b.0).abs() < 1e-12);
        let (a, b) = (metrics::e_measure(&mt, &gt), metrics::e_measure(&rescaled, &gt));
        prop_assert!((a.0 - b.0).abs() < 1e-12);
    }

    #[test]
    fn scores_are_bounded((m, g) in pair()) {
        let (mt, gt) = (to_tensor(&m), mask_tensor(&g));
        let r = metrics::evaluate_pair("x", &mt, &gt);
        for v in [r.mae, r.f_beta_max, r.f_beta_mean, r.s_measure, r.e_measure_max, r.e_measure_mean] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v), "{v}");
        }
    }
}
