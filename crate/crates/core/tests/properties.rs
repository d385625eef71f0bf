use proptest::collection::vec;
use proptest::prelude::*;

use medrec_core::corpus::SplitFractions;
use medrec_core::eval::{average_precision, jaccard, mann_whitney_u, midranks, PredictionBatch};
use medrec_core::geometry::{self, BallPoint};
use medrec_core::matrix::Mat;
use medrec_core::tape::Tape;

fn inside(v: Vec<f64>, radius: f64) -> Vec<f64> {
    let n = geometry::norm(&v);
    if n < 1e-9 {
        return vec![0.0; v.len()];
    }
    let scale = radius * (n / (1.0 + n)) / n;
    v.iter().map(|c| c * scale).collect()
}

fn triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..6).prop_flat_map(|d| {
        let p = vec(-5.0f64..5.0, d).prop_map(|v| inside(v, 0.97));
        (p.clone(), p.clone(), p)
    })
}

proptest! {
    #[test]
    fn distance_is_a_metric((x, y, z) in triple()) {
        let dxy = geometry::distance(&x, &y).unwrap();
        prop_assert!(dxy >= 0.0);
        prop_assert!((dxy - geometry::distance(&y, &x).unwrap()).abs() <= 1e-9);
        let dxz = geometry::distance(&x, &z).unwrap();
        let dyz = geometry::distance(&y, &z).unwrap();
        prop_assert!(dxz <= dxy + dyz + 1e-9);
        prop_assert!(geometry::distance(&x, &x).unwrap() <= 1e-9);
    }

    #[test]
    fn mobius_inverse_and_origin((x, y, _) in triple()) {
        let px = BallPoint::new(x.clone()).unwrap();
        let neg = BallPoint::new(x.iter().map(|c| -c).collect()).unwrap();
        prop_assert!(geometry::mobius_add(&neg, &px).unwrap().norm() <= 1e-12);
        let o = BallPoint::origin(x.len());
        prop_assert_eq!(geometry::mobius_add(&o, &px).unwrap(), px.clone());
        let py = BallPoint::new(y).unwrap();
        prop_assert!(geometry::mobius_add(&px, &py).unwrap().norm() < 1.0);
    }

    #[test]
    fn projection_stays_in_the_ball(v in vec(-50.0f64..50.0, 1..6)) {
        let p = geometry::exp_project(&v).unwrap();
        prop_assert!(p.norm() <= geometry::MAX_NORM + 1e-15);
        prop_assert!(BallPoint::new(p.into_inner()).is_ok());
    }

    #[test]
    fn log_and_exp_at_origin_invert(v in vec(-3.0f64..3.0, 1..6)) {
        let y = geometry::exp_origin(&v);
        let back = geometry::log_origin(&BallPoint::new(y).unwrap());
        for (a, b) in back.coords().iter().zip(&v) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn gated_softmax_rows_are_stochastic(
        rows in vec((vec(-30.0f64..30.0, 1..6), any::<u64>()), 1..6),
        shift in -20.0f64..20.0,
        tau in 0.05f64..3.0,
    ) {
        let mut scores = Vec::new();
        let mut gates = Vec::new();
        let mut offsets = vec![0usize];
        for (s, bits) in &rows {
            for (k, &v) in s.iter().enumerate() {
                scores.push(v);
                // the first entry of a row plays the self-loop and stays open
                gates.push(if k == 0 { 1.0 } else { ((bits >> (k % 64)) & 3) as f64 / 3.0 });
            }
            offsets.push(scores.len());
        }
        let run = |extra: f64| {
            let mut t = Tape::new();
            let s = t.constant(Mat::column(scores.iter().map(|v| v + extra).collect()));
            let z = t.constant(Mat::column(gates.clone()));
            let a = t.segment_softmax(s, z, offsets.clone().into(), tau).unwrap();
            t.value(a).data().to_vec()
        };
        let a = run(0.0);
        let b = run(shift);
        for w in offsets.windows(2) {
            let sum: f64 = a[w[0]..w[1]].iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
        for (e, (x, y)) in a.iter().zip(&b).enumerate() {
            prop_assert!(x >= &0.0);
            if gates[e] == 0.0 {
                prop_assert_eq!(*x, 0.0);
            }
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn rank_sum_statistics_are_consistent(
        x in vec(0u8..5, 2..8),
        y in vec(0u8..5, 2..8),
    ) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        let y: Vec<f64> = y.into_iter().map(f64::from).collect();
        let ab = mann_whitney_u(&x, &y).unwrap();
        let ba = mann_whitney_u(&y, &x).unwrap();
        prop_assert!((ab.u + ba.u - (x.len() * y.len()) as f64).abs() <= 1e-12);
        prop_assert!((ab.p_value - ba.p_value).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
        let all: Vec<f64> = x.iter().chain(&y).copied().collect();
        let n = all.len() as f64;
        prop_assert!((midranks(&all).iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() <= 1e-9);
    }

    #[test]
    fn set_metrics_are_bounded(
        visits in vec(vec((0.0f64..1.0, any::<bool>()), 1..6), 1..8),
    ) {
        let m = visits.iter().map(Vec::len).min().unwrap();
        let probs: Vec<Vec<f64>> = visits.iter().map(|v| v[..m].iter().map(|p| p.0).collect()).collect();
        let truth: Vec<Vec<bool>> = visits.iter().map(|v| v[..m].iter().map(|p| p.1).collect()).collect();
        let batch = PredictionBatch::new(probs.clone(), truth.clone(), 0.5).unwrap();
        let j = jaccard(&batch);
        prop_assert!((0.0..=1.0).contains(&j));
        for (p, t) in probs.iter().zip(&truth) {
            if let Some(ap) = average_precision(p, t) {
                prop_assert!(ap > 0.0 && ap <= 1.0);
            }
        }
    }

    #[test]
    fn split_boundaries_partition_patients(n in 5usize..500) {
        let [a, b] = SplitFractions::default().boundaries(n).unwrap();
        prop_assert!(0 < a && a < b && b < n);
    }
}
