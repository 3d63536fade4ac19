use flowvocoder::conditioning::{MelConfig, MelSpectrogram};
use flowvocoder::flowstack::{FlowModel, ModelDims};
use flowvocoder::numcore::RealArray;
use flowvocoder::training::{
    checkpoint_name, nll_loss, nll_loss_and_grad, train, Adam, Checkpoint, Dataset, TrainChunk,
    Utterance, DIAGNOSTIC_FILE, METRICS_FILE,
};
use flowvocoder::{Config, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

fn tiny_dims() -> ModelDims {
    ModelDims {
        squeeze_h: 4,
        n_flows: 2,
        n_mix: 2,
        channels: 4,
        n_layers: 2,
        emb_dim: 4,
        cond_channels: 3,
        n_mels: 5,
    }
}

fn random_mel(bands: usize, t: usize, seed: u64) -> MelSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MelSpectrogram {
        frames: RealArray::from_fn(&[bands, t], |_| rng.random_range(-3.0..1.0)),
        sample_rate: 8000,
        hop: 256,
        fft: 1024,
        win: 1024,
    }
}

fn noise(n: usize, std: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            std * v
        })
        .collect()
}

fn chunk(wave: &[f64], mel: &MelSpectrogram) -> TrainChunk {
    TrainChunk::from_utterance(wave, mel, 0, wave.len()).unwrap()
}

#[test]
fn zero_chunks_at_init() {
    let model = FlowModel::new(tiny_dims(), 1).unwrap();
    let mel = random_mel(5, 1, 2);
    let batch = vec![chunk(&[0.0; 24], &mel), chunk(&[0.0; 24], &mel)];
    let loss = nll_loss(&model, &batch).unwrap();
    assert!((loss - HALF_LOG_2PI).abs() < 1e-14);
}

#[test]
fn init_loss_is_gaussian_energy() {
    let model = FlowModel::new(tiny_dims(), 1).unwrap();
    let mel = random_mel(5, 2, 3);
    let x = noise(400, 0.7, 4);
    let expected = x.iter().map(|v| v * v).sum::<f64>() / 800.0 + HALF_LOG_2PI;
    let loss = nll_loss(&model, &[chunk(&x, &mel)]).unwrap();
    assert!((loss - expected).abs() < 1e-12);
}

#[test]
fn padded_samples_are_masked() {
    let model = FlowModel::new(tiny_dims(), 1).unwrap();
    let mel = random_mel(5, 1, 3);
    let wave = noise(10, 1.0, 5);
    let c = TrainChunk::from_utterance(&wave, &mel, 0, 24).unwrap();
    assert_eq!(c.valid, 10);
    let expected = wave.iter().map(|v| v * v).sum::<f64>() / 20.0 + HALF_LOG_2PI;
    assert!((nll_loss(&model, &[c]).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn every_parameter_gradient_matches_finite_differences() {
    let mut model = FlowModel::new(tiny_dims(), 7).unwrap();
    model.randomize_head(8, 0.5);
    let mel = random_mel(5, 1, 9);
    let batch = vec![chunk(&noise(24, 0.5, 10), &mel), chunk(&noise(24, 0.5, 11), &mel)];
    let lg = nll_loss_and_grad(&model, &batch).unwrap();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for p in 0..model.params().len() {
        for e in 0..model.params().values()[p].len() {
            let orig = model.params().values()[p].data()[e];
            model.params_mut().values_mut()[p].data_mut()[e] = orig + eps;
            let lp = nll_loss(&model, &batch).unwrap();
            model.params_mut().values_mut()[p].data_mut()[e] = orig - eps;
            let lm = nll_loss(&model, &batch).unwrap();
            model.params_mut().values_mut()[p].data_mut()[e] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let g = lg.grads[p].data()[e];
            let rel = (g - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
            assert!(
                rel <= 1e-4,
                "{}[{e}]: analytic {g} vs numeric {fd}",
                model.params().names()[p]
            );
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn gradient_step_improves_likelihood() {
    let mut model = FlowModel::new(tiny_dims(), 12).unwrap();
    model.randomize_head(13, 0.3);
    let mel = random_mel(5, 1, 14);
    let batch = vec![chunk(&noise(24, 0.3, 15), &mel)];
    let lg = nll_loss_and_grad(&model, &batch).unwrap();
    for (p, g) in model.params_mut().values_mut().iter_mut().zip(&lg.grads) {
        p.data_mut().iter_mut().zip(g.data()).for_each(|(v, d)| *v -= 1e-4 * d);
    }
    assert!(nll_loss(&model, &batch).unwrap() < lg.loss);
}

#[test]
fn overfits_a_fixed_batch() {
    let mut model = FlowModel::new(tiny_dims(), 16).unwrap();
    let mel = random_mel(5, 1, 17);
    let wave: Vec<f64> = (0..24).map(|i| 0.3 * (i as f64 * 0.7).sin()).collect();
    let batch = vec![chunk(&wave, &mel)];
    let mut adam = Adam::new(model.params().values());
    let first = nll_loss(&model, &batch).unwrap();
    for _ in 0..50 {
        let lg = nll_loss_and_grad(&model, &batch).unwrap();
        adam.step(model.params_mut().values_mut(), &lg.grads, 1e-2).unwrap();
    }
    let last = nll_loss(&model, &batch).unwrap();
    assert!(last < first - 0.1, "{first} -> {last}");
}

#[test]
fn empty_batch_rejected() {
    let model = FlowModel::new(tiny_dims(), 1).unwrap();
    assert!(matches!(nll_loss(&model, &[]), Err(Error::Input(_))));
}

fn tiny_config() -> Config {
    Config::parse(
        "sample_rate = 8000\nn_mels = 5\nsqueeze_h = 4\nn_flows = 2\nn_mix = 2\nchannels = 4\n\
         n_layers = 2\nemb_dim = 4\ncond_channels = 3\nbatch = 2\nchunk_len = 64\nmax_iters = 4\n\
         ckpt_every = 2\nlr0 = 1e-3\nanneal_every = 3\nseed = 5\n",
    )
    .unwrap()
}

fn tiny_dataset(cfg: &Config) -> Dataset {
    let mel_cfg = MelConfig::from_config(cfg);
    let utts = (0..12)
        .map(|i| {
            let wave: Vec<f64> = (0..300)
                .map(|t| 0.4 * (t as f64 * (0.05 + 0.01 * i as f64)).sin())
                .collect();
            Utterance::new(format!("u{i}.wav"), wave, &mel_cfg).unwrap()
        })
        .collect();
    Dataset::from_utterances(utts)
}

#[test]
fn checkpoint_bytes_round_trip() {
    let cfg = tiny_config();
    let mut model = FlowModel::from_config(&cfg).unwrap();
    model.randomize_head(3, 0.2);
    let adam = Adam::new(model.params().values());
    let rng = ChaCha8Rng::seed_from_u64(4);
    let ck = Checkpoint::from_model(&cfg, 17, &model, Some(&adam), Some(&rng));
    let bytes = ck.encode();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.encode(), bytes);
    assert_eq!(back.iteration, 17);
    assert_eq!(back.config, cfg);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
    assert!(matches!(
        Checkpoint::decode(&bytes[..bytes.len() - 3]),
        Err(Error::Format(_))
    ));
}

#[test]
fn training_is_deterministic_and_resumable() {
    let cfg = tiny_config();
    let data = tiny_dataset(&cfg);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let ra = train(&data, &cfg, a.path(), None).unwrap();
    let rb = train(&data, &cfg, b.path(), None).unwrap();
    assert_eq!(ra.losses, rb.losses);
    assert_eq!(ra.losses.len(), 4);

    let mid = Checkpoint::load(&a.path().join(checkpoint_name(2))).unwrap();
    let rc = train(&data, &cfg, c.path(), Some(mid)).unwrap();
    assert_eq!(rc.losses, ra.losses[2..].to_vec());
    let fa = std::fs::read(a.path().join(checkpoint_name(4))).unwrap();
    let fc = std::fs::read(c.path().join(checkpoint_name(4))).unwrap();
    assert_eq!(fa, fc);

    let csv = std::fs::read_to_string(a.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iter,loss,lr,wall_ms");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("4,"));
    assert!(lines[4].contains("5e-4"));
}

#[test]
fn non_finite_state_halts_with_diagnostic() {
    let cfg = tiny_config();
    let data = tiny_dataset(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let model = FlowModel::from_config(&cfg).unwrap();
    let adam = Adam::new(model.params().values());
    let rng = ChaCha8Rng::seed_from_u64(1);
    let mut ck = Checkpoint::from_model(&cfg, 0, &model, Some(&adam), Some(&rng));
    let last = ck.params.len() - 1;
    ck.params[last].data_mut()[0] = f64::NAN;
    let err = train(&data, &cfg, dir.path(), Some(ck)).unwrap_err();
    assert!(matches!(err, Error::Numeric { .. }), "{err}");
    assert!(dir.path().join(DIAGNOSTIC_FILE).exists());
}
