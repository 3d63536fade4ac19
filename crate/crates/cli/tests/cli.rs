use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowvocoder::conditioning::{load_mel, write_wav, MelConfig};
use flowvocoder::Config;

const BIN: &str = env!("CARGO_BIN_EXE_flowvocoder");

const TOY_CONFIG: &str = "sample_rate = 8000\nn_mels = 20\nsqueeze_h = 8\nn_flows = 2\nn_mix = 2\n\
channels = 4\nn_layers = 2\nemb_dim = 4\ncond_channels = 4\nbatch = 2\nchunk_len = 512\n\
max_iters = 10\nckpt_every = 5\nlr0 = 1e-3\nseed = 3\n";

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        std::fs::create_dir_all(&data).unwrap();
        for i in 0..6 {
            let wave: Vec<i16> = (0..3000)
                .map(|t| (6000.0 * (t as f64 * (0.04 + 0.015 * i as f64)).sin()) as i16)
                .collect();
            write_wav(&data.join(format!("clip{i}.wav")), &wave, 8000).unwrap();
        }
        let config = root.join("toy.cfg");
        std::fs::write(&config, TOY_CONFIG).unwrap();
        Self { _dir: dir, root, data, config }
    }

    fn trained(&self) -> PathBuf {
        let out = self.root.join("ckpt");
        let o = run(&["train", "--data", s(&self.data), "--out", s(&out), "--config", s(&self.config)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out.join("latest.fvoc")
    }
}

#[test]
fn extract_mels_on_empty_dir() {
    let f = Fixture::new();
    let empty = f.root.join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = f.root.join("mels");
    let o = run(&["extract-mels", "--in", s(&empty), "--out", s(&out), "--config", s(&f.config)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 0);
}

#[test]
fn extract_mels_skips_corrupt_files() {
    let f = Fixture::new();
    let input = f.root.join("in");
    std::fs::create_dir_all(&input).unwrap();
    write_wav(&input.join("good.wav"), &vec![100i16; 1000], 8000).unwrap();
    std::fs::write(input.join("bad.wav"), b"not a wav").unwrap();
    let out = f.root.join("mels");
    let o = run(&["extract-mels", "--in", s(&input), "--out", s(&out), "--config", s(&f.config)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = Config::parse(TOY_CONFIG).unwrap();
    let mel = load_mel(&out.join("good.fvml"), &MelConfig::from_config(&cfg)).unwrap();
    assert_eq!(mel.n_frames(), 1000usize.div_ceil(256));
    assert_eq!(mel.n_mels(), 20);
    assert!(!out.join("bad.fvml").exists());

    std::fs::remove_file(input.join("good.wav")).unwrap();
    let o = run(&["extract-mels", "--in", s(&input), "--out", s(&out), "--config", s(&f.config)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_reports_missing_data_dir() {
    let f = Fixture::new();
    let o = run(&["train", "--data", s(&f.root.join("nowhere")), "--out", s(&f.root.join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let f = Fixture::new();
    let cfg = f.root.join("bad.cfg");
    std::fs::write(&cfg, "sample_rate = 8000\nwarp_factor = 9\n").unwrap();
    let o = run(&["train", "--data", s(&f.data), "--out", s(&f.root.join("o")), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warp_factor"));
}

#[test]
fn smoke_training_writes_metrics() {
    let f = Fixture::new();
    let ckpt = f.trained();
    assert!(ckpt.exists());
    let csv = std::fs::read_to_string(ckpt.parent().unwrap().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iter,loss,lr,wall_ms");
    assert_eq!(lines.len(), 11);
}

#[test]
fn synthesis_paths_agree_and_repeat() {
    let f = Fixture::new();
    let ckpt = f.trained();
    let mels = f.root.join("mels");
    let o = run(&["extract-mels", "--in", s(&f.data), "--out", s(&mels), "--config", s(&f.config)]);
    assert!(o.status.success());
    let via_wav = f.root.join("a.wav");
    let via_mel = f.root.join("b.wav");
    let again = f.root.join("c.wav");
    let wav = f.data.join("clip2.wav");
    let mel = mels.join("clip2.fvml");
    for (args, out) in [
        (["--wav", s(&wav)], &via_wav),
        (["--mel", s(&mel)], &via_mel),
        (["--mel", s(&mel)], &again),
    ] {
        let o = run(&[&["synthesize", "--ckpt", s(&ckpt), "--out", s(out), "--seed", "11"][..], &args[..]].concat());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(&via_wav).unwrap();
    assert_eq!(a, std::fs::read(&via_mel).unwrap());
    assert_eq!(a, std::fs::read(&again).unwrap());
    let timing = std::fs::read_to_string(f.root.join("a.wav.timing.csv")).unwrap();
    assert!(timing.starts_with("stage,ms\n"));
    for stage in ["upsample", "estimator", "inversion", "total"] {
        assert!(timing.contains(stage));
    }
}

#[test]
fn synthesis_rejects_bad_checkpoint() {
    let f = Fixture::new();
    let ckpt = f.root.join("bad.fvoc");
    std::fs::write(&ckpt, b"XXXXnot a checkpoint").unwrap();
    let o = run(&[
        "synthesize",
        "--ckpt",
        s(&ckpt),
        "--wav",
        s(&f.data.join("clip0.wav")),
        "--out",
        s(&f.root.join("o.wav")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synthesis_requires_one_source() {
    let f = Fixture::new();
    let o = run(&["synthesize", "--ckpt", "x", "--out", s(&f.root.join("o.wav"))]);
    assert_eq!(o.status.code(), Some(2));
}

fn scores(stdout: &[u8]) -> Vec<String> {
    String::from_utf8_lossy(stdout)
        .lines()
        .skip(1)
        .take_while(|l| !l.is_empty())
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn evaluation_report() {
    let f = Fixture::new();
    let ckpt = f.trained();
    let o = run(&["evaluate", "--ckpt", s(&ckpt), "--ref-dir", s(&f.data), "--n", "0"]);
    assert_eq!(o.status.code(), Some(2));

    let args = ["evaluate", "--ckpt", s(&ckpt), "--ref-dir", s(&f.data), "--n", "2", "--seed", "4"];
    let a = run(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = run(&args);
    let text = String::from_utf8_lossy(&a.stdout);
    assert!(text.starts_with("utterance,mcd_db,rmse_f0_cents,ll_per_dim,rtf\n"));
    for key in ["utterances: 2", "MCD", "RMSE-F0", "LL", "RTF"] {
        assert!(text.contains(key), "{text}");
    }
    assert_eq!(scores(&a.stdout).len(), 2);
    assert_eq!(scores(&a.stdout), scores(&b.stdout));
}

#[test]
fn check_lists_properties() {
    let o = run(&["--threads", "1", "check"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for name in ["round-trip", "jacobian-logdet", "gradient", "causality", "identity-at-init"] {
        assert!(text.contains(&format!("PASS {name}")), "{text}");
    }
}

#[test]
fn check_catches_injected_fault() {
    let o = run(&["check", "--inject-fault", "logdet-sign-flip"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL jacobian-logdet"));
    let o = run(&["check", "--inject-fault", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}
