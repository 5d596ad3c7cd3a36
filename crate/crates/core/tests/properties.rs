mod common;

use common::oracles::*;
use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdernn::data::{denormalize, normalize, read_csv, union_grid, write_csv_to, Dataset, MeasurementType, NoiseModel, Record};
use sdernn::evaluation::ence;
use sdernn::gru::GruParams;
use sdernn::moments::{cvrnn_update, GaussianState, ObservationNoise};
use sdernn::numcore::{Matrix, Tape};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    vec(-2.0..2.0f64, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn increasing_times(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    vec(1u32..30, 1..max_len).prop_map(|steps| {
        steps
            .iter()
            .scan(0.0, |t, s| {
                let now = *t;
                *t += *s as f64;
                Some(now)
            })
            .collect()
    })
}

fn record_strategy(id: &'static str) -> impl Strategy<Value = Record> {
    increasing_times(40).prop_flat_map(move |times| {
        let n = times.len();
        (Just(times), vec(-50.0..150.0f64, n), vec(any::<bool>(), n)).prop_map(move |(times, values, mask)| {
            let sigma = values.iter().map(|v| NoiseModel::default().sigma(MeasurementType::P, *v)).collect();
            Record::new(id.into(), MeasurementType::P, values, times, mask, sigma).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matmul_is_associative(a in matrix(3, 4), b in matrix(4, 2), c in matrix(2, 5)) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.sub(&right).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn tape_gradient_matches_finite_differences(w1 in matrix(4, 3), w2 in matrix(1, 4), x in matrix(3, 1)) {
        let loss = |w1: &Matrix, w2: &Matrix| {
            let hidden = w1.matmul(&x).unwrap().tanh();
            w2.matmul(&hidden).unwrap().sigmoid().sum()
        };
        let mut tape = Tape::new();
        let (v1, v2) = (tape.param(w1.clone()), tape.param(w2.clone()));
        let xv = tape.constant(x.clone());
        let h = tape.matmul(v1, xv).unwrap();
        let h = tape.tanh(h);
        let o = tape.matmul(v2, h).unwrap();
        let o = tape.sigmoid(o);
        let l = tape.sum(o);
        let grads = tape.backward(l).unwrap();
        let (g1, g2) = (grads.get(v1), grads.get(v2));
        let (mut got, mut want) = (Vec::new(), Vec::new());
        for j in 0..12 {
            want.push(finite_diff(|v| { let mut p = w1.clone(); p.as_mut_slice()[j] = v; loss(&p, &w2) }, w1.as_slice()[j]));
            got.push(g1.as_slice()[j]);
        }
        for j in 0..4 {
            want.push(finite_diff(|v| { let mut p = w2.clone(); p.as_mut_slice()[j] = v; loss(&w1, &p) }, w2.as_slice()[j]));
            got.push(g2.as_slice()[j]);
        }
        prop_assert!(vec_rel_error(&got, &want) < 1e-5);
    }

    #[test]
    fn saturating_ops_stay_finite(d in vec(-50.0..50.0f64, 6)) {
        let m = Matrix::from_vec(2, 3, d).unwrap();
        prop_assert!(m.tanh().is_finite() && m.sigmoid().is_finite());
        let mut tape = Tape::new();
        let v = tape.param(m);
        let s = tape.sigmoid(v);
        let t = tape.tanh(s);
        let l = tape.sum(t);
        prop_assert!(tape.backward(l).unwrap().get(v).is_finite());
    }

    #[test]
    fn ence_is_scale_invariant(seed in 0u64..1000, k in 0.01..100.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu: Vec<f64> = (0..60).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let var: Vec<f64> = (0..60).map(|_| rand::Rng::random_range(&mut rng, 0.01..2.0)).collect();
        let y: Vec<f64> = (0..60).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
        let base = ence(&mu, &var, &y, 5).unwrap().ence;
        let scaled_mu: Vec<f64> = mu.iter().map(|v| v * k).collect();
        let scaled_y: Vec<f64> = y.iter().map(|v| v * k).collect();
        let scaled_var: Vec<f64> = var.iter().map(|v| v * k * k).collect();
        let scaled = ence(&scaled_mu, &scaled_var, &scaled_y, 5).unwrap().ence;
        prop_assert!((base - scaled).abs() < 1e-9 * base.max(1.0));
    }

    #[test]
    fn ence_bins_partition_sorted_indices(t in 5usize..80, n in 1usize..6, seed in 0u64..1000) {
        prop_assume!(n <= t);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let var: Vec<f64> = (0..t).map(|_| rand::Rng::random_range(&mut rng, 0.01..2.0)).collect();
        let report = ence(&vec![0.0; t], &var, &vec![0.5; t], n).unwrap();
        prop_assert_eq!(report.bins.len(), n);
        prop_assert_eq!(report.bins[0].start, 0);
        prop_assert_eq!(report.bins[n - 1].end, t);
        for w in report.bins.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
            prop_assert!(w[0].sigma_max <= w[1].sigma_min);
        }
        for b in &report.bins[..n - 1] {
            prop_assert_eq!(b.end - b.start, t / n);
        }
        prop_assert!(report.ence >= 0.0);
    }

    #[test]
    fn cvrnn_update_preserves_psd(seed in 0u64..10_000, noise in 0.0..1.0f64, x in -3.0..3.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = GruParams::random(4, 1, &mut rng);
        let l = Matrix::from_vec(4, 4, (0..16).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect()).unwrap();
        let cov = l.matmul_t(&l).unwrap();
        let mean = (0..4).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let state = GaussianState::new(mean, cov).unwrap();
        let out = cvrnn_update(&p, &state, &[x], &ObservationNoise::from_std(&[noise])).unwrap();
        let eig = symmetric_eigenvalues(&to_mat(&out.cov));
        prop_assert!(eig.iter().all(|e| *e >= -1e-9));
        prop_assert!(out.cov.asymmetry() <= 1e-10);
    }

    #[test]
    fn union_grid_is_sorted_union(a in record_strategy("a"), b in record_strategy("b")) {
        let grid = union_grid(&[a.clone(), b.clone()]);
        prop_assert!(grid.windows(2).all(|w| w[0] < w[1]));
        for t in a.times.iter().chain(&b.times) {
            prop_assert!(grid.contains(t));
        }
        prop_assert!(grid.iter().all(|t| a.times.contains(t) || b.times.contains(t)));
    }

    #[test]
    fn csv_round_trip(a in record_strategy("a"), b in record_strategy("b")) {
        let ds = Dataset::new(vec![a, b]).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &NoiseModel::default()).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn normalize_round_trip(a in record_strategy("a")) {
        let observed: Vec<f64> = a.values.iter().zip(&a.mask).filter(|(_, m)| **m).map(|(v, _)| *v).collect();
        let spread = observed.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - observed.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(observed.len() >= 2 && spread > 1e-6);
        let ds = Dataset::new(vec![a]).unwrap();
        let norm = normalize(&ds).unwrap();
        for (v, m) in norm.records[0].values.iter().zip(&norm.records[0].mask) {
            if *m {
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(v));
            }
        }
        let back = denormalize(&norm).unwrap();
        let r = &back.records[0];
        prop_assert!(vec_rel_error(&r.values, &ds.records[0].values) < 1e-12);
        prop_assert!(vec_rel_error(&r.noise_sigma, &ds.records[0].noise_sigma) < 1e-12);
    }
}
