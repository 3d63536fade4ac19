use flowvocoder::conditioning::UpsampledConditioner;
use flowvocoder::flowstack::{
    estimator_forward, flow_forward, flow_forward_observed, flow_reverse, log_likelihood, squeeze,
    unsqueeze, FlowModel, ForwardObserver, ModelDims, SqueezedAudio,
};
use flowvocoder::numcore::RealArray;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

fn tiny_dims(h: usize) -> ModelDims {
    ModelDims {
        squeeze_h: h,
        n_flows: 2,
        n_mix: 2,
        channels: 4,
        n_layers: 2,
        emb_dim: 4,
        cond_channels: 3,
        n_mels: 5,
    }
}

fn random_cond(c: usize, n: usize, seed: u64) -> UpsampledConditioner {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    UpsampledConditioner::new(RealArray::from_fn(&[c, n], |_| rng.random_range(-1.0..1.0))).unwrap()
}

fn random_wave(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-0.8..0.8)).collect()
}

fn random_model(dims: ModelDims, seed: u64) -> FlowModel {
    let mut model = FlowModel::new(dims, seed).unwrap();
    model.randomize_head(seed + 100, 0.5);
    model
}

/// log|det| of the numerical Jacobian of x ↦ z (central differences).
fn dense_log_det(model: &FlowModel, x: &[f64], cond: &UpsampledConditioner) -> f64 {
    let n = x.len();
    let eps = 1e-5;
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for col in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[col] += eps;
        xm[col] -= eps;
        let zp = unsqueeze(&flow_reverse(model, &xp, cond).unwrap().z);
        let zm = unsqueeze(&flow_reverse(model, &xm, cond).unwrap().z);
        for row in 0..n {
            jac[(row, col)] = (zp[row] - zm[row]) / (2.0 * eps);
        }
    }
    jac.lu().determinant().abs().ln()
}

#[test]
fn identity_at_init() {
    let dims = tiny_dims(4);
    let model = FlowModel::new(dims, 3).unwrap();
    let x = random_wave(24, 1);
    let cond = random_cond(3, 24, 2);
    let run = flow_reverse(&model, &x, &cond).unwrap();
    assert_eq!(run.z, squeeze(&x, 4).unwrap());
    assert_eq!(run.total_logdet, 0.0);
    let expected: f64 = x.iter().map(|v| -0.5 * v * v - HALF_LOG_2PI).sum();
    assert!((run.log_likelihood - expected).abs() < 1e-12);
    let back = flow_forward(&model, &run.z, &cond, 1e-10).unwrap();
    assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-9));
}

#[test]
fn zero_chunk_likelihood() {
    let model = FlowModel::new(tiny_dims(4), 3).unwrap();
    let ll = log_likelihood(&model, &[0.0; 24], &random_cond(3, 24, 5)).unwrap();
    assert!((ll + 24.0 * HALF_LOG_2PI).abs() < 1e-12);
}

#[test]
fn logdet_matches_dense_jacobian() {
    for seed in 0..3 {
        let model = random_model(tiny_dims(4), seed);
        let x = random_wave(24, seed + 10);
        let cond = random_cond(3, 24, seed + 20);
        let run = flow_reverse(&model, &x, &cond).unwrap();
        assert!(run.total_logdet.abs() > 1e-3, "transform is near identity");
        let oracle = dense_log_det(&model, &x, &cond);
        let rel = (run.total_logdet - oracle).abs() / oracle.abs().max(1.0);
        assert!(rel < 1e-4, "seed {seed}: {} vs {oracle}", run.total_logdet);
        let logp: f64 = run
            .z
            .grid()
            .data()
            .iter()
            .map(|v| -0.5 * v * v - HALF_LOG_2PI)
            .sum();
        let ll_rel = (run.log_likelihood - (oracle + logp)).abs() / (oracle + logp).abs().max(1.0);
        assert!(ll_rel < 1e-4);
    }
}

#[test]
fn round_trip_random_weights() {
    let dims = ModelDims {
        n_flows: 3,
        ..tiny_dims(8)
    };
    let model = random_model(dims, 7);
    let x = random_wave(96, 8);
    let cond = random_cond(3, 96, 9);
    let run = flow_reverse(&model, &x, &cond).unwrap();
    let back = flow_forward(&model, &run.z, &cond, 1e-10).unwrap();
    let err = back
        .iter()
        .zip(&x)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-6, "max error {err}");
    let again = flow_reverse(&model, &back, &cond).unwrap();
    assert!(again.z.grid().max_abs_diff(run.z.grid()) < 1e-6);
}

#[derive(Default)]
struct Recorder {
    rows: Vec<(usize, usize, Vec<f64>)>,
    blocks: Vec<(usize, SqueezedAudio)>,
}

impl ForwardObserver for Recorder {
    fn row(&mut self, k: usize, i: usize, raw: &[f64]) {
        self.rows.push((k, i, raw.to_vec()));
    }
    fn block(&mut self, k: usize, x: &SqueezedAudio) {
        self.blocks.push((k, x.clone()));
    }
}

#[test]
fn sequential_rows_match_batch_estimator() {
    let model = random_model(tiny_dims(8), 11);
    let cond = random_cond(3, 64, 12);
    let z = squeeze(&random_wave(64, 13), 8).unwrap();
    let mut rec = Recorder::default();
    flow_forward_observed(&model, &z, &cond, 1e-10, &mut rec).unwrap();
    assert_eq!(rec.rows.len(), 2 * 8);
    for (k, x) in &rec.blocks {
        let grid = estimator_forward(&model, x, &cond, *k).unwrap();
        for (rk, i, raw) in rec.rows.iter().filter(|r| r.0 == *k) {
            assert_eq!(rk, k);
            let batch = grid.raw_row(*i);
            let diff = batch
                .iter()
                .zip(raw)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-10, "block {k} row {i}: {diff}");
        }
    }
}

#[test]
fn perturbing_a_row_only_affects_later_rows() {
    let model = random_model(tiny_dims(8), 21);
    let cond = random_cond(3, 64, 22);
    let base = squeeze(&random_wave(64, 23), 8).unwrap();
    for k in 0..2 {
        let p0 = estimator_forward(&model, &base, &cond, k).unwrap();
        for i in 0..8 {
            let mut g = base.grid().clone();
            for j in 0..8 {
                g.data_mut()[i * 8 + j] += 0.3;
            }
            let pert = SqueezedAudio::from_grid(g).unwrap();
            let p1 = estimator_forward(&model, &pert, &cond, k).unwrap();
            for r in 0..8 {
                let same = p0.raw_row(r) == p1.raw_row(r);
                if r <= i {
                    assert!(same, "block {k}: row {r} changed after perturbing row {i}");
                } else if r == i + 1 {
                    assert!(!same, "block {k}: row {r} ignores row {i}");
                }
            }
        }
    }
}

#[test]
fn embeddings_distinguish_blocks() {
    let model = random_model(tiny_dims(4), 31);
    let cond = random_cond(3, 24, 32);
    let x = squeeze(&random_wave(24, 33), 4).unwrap();
    let a = estimator_forward(&model, &x, &cond, 0).unwrap();
    let b = estimator_forward(&model, &x, &cond, 1).unwrap();
    assert_ne!(a.raw_row(2), b.raw_row(2));
}

#[test]
fn zero_head_gives_identity_params() {
    let model = FlowModel::new(tiny_dims(4), 41).unwrap();
    let cond = random_cond(3, 24, 42);
    let x = squeeze(&random_wave(24, 43), 4).unwrap();
    let grid = estimator_forward(&model, &x, &cond, 1).unwrap();
    for i in 0..4 {
        let row = grid.row(i);
        assert!(row.a.iter().chain(&row.b).chain(&row.mu).chain(&row.s).all(|&v| v == 0.0));
        let lp = -(2f64).ln();
        assert!(row.log_pi.iter().all(|&v| (v - lp).abs() < 1e-15));
    }
}

#[test]
fn forward_is_deterministic() {
    let model = random_model(tiny_dims(4), 51);
    let cond = random_cond(3, 24, 52);
    let z = squeeze(&random_wave(24, 53), 4).unwrap();
    let a = flow_forward(&model, &z, &cond, 1e-10).unwrap();
    let b = flow_forward(&model, &z, &cond, 1e-10).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mismatched_conditioner_is_config_error() {
    let model = FlowModel::new(tiny_dims(4), 1).unwrap();
    let err = flow_reverse(&model, &[0.0; 24], &random_cond(3, 20, 1)).unwrap_err();
    assert!(matches!(err, flowvocoder::Error::Config(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn squeeze_round_trip(seed in any::<u64>(), hpow in 0u32..5, w in 1usize..12) {
        let h = 1usize << hpow;
        let x = random_wave(h * w, seed);
        let sq = squeeze(&x, h).unwrap();
        prop_assert_eq!((sq.h(), sq.w()), (h, w));
        prop_assert_eq!(unsqueeze(&sq), x);
    }
}
