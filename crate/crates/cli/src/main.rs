//! `flowvocoder` command-line tool.

use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use flowvocoder::conditioning::{
    load_mel, mel_extract, normalize_audio, read_wav, save_mel, write_wav, MelConfig,
    MelSpectrogram,
};
use flowvocoder::metrics::{draw, evaluate};
use flowvocoder::selfcheck::{run_checks, Fault};
use flowvocoder::synthesis::{synthesize, SynthesisRequest};
use flowvocoder::training::{list_wavs, train, Checkpoint, Dataset};
use flowvocoder::{Config, Error};

#[derive(Parser)]
#[command(name = "flowvocoder", version, about = "Mixture-of-logistics flow vocoder")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one FVML mel file per WAV in a directory.
    ExtractMels {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on a directory of WAVs.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate a waveform from a mel file or a reference WAV.
    Synthesize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "wav", required_unless_present = "wav")]
        mel: Option<PathBuf>,
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Analysis-synthesis scores on held-out utterances.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ref_dir: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Defaults to the checkpoint's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the invariant suite.
    Check {
        #[arg(long)]
        inject_fault: Option<String>,
    },
}

/// Failure that maps to a specific exit status.
#[derive(Debug)]
struct Exit(u8);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "exit {}", self.0)
    }
}

impl std::error::Error for Exit {}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let cfg = match path {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => Config::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn log_config(cfg: &Config) {
    log::info!("resolved config:\n{}", cfg.to_text().trim_end());
}

fn extract_mels(input: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    log_config(&cfg);
    let wavs = list_wavs(input)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mel_cfg = MelConfig::from_config(&cfg);
    let mut written = 0;
    for path in &wavs {
        let result = read_wav(path).and_then(|pcm| {
            if pcm.sample_rate != cfg.sample_rate {
                return Err(Error::Input(format!(
                    "sample rate {} differs from configured {}",
                    pcm.sample_rate, cfg.sample_rate
                )));
            }
            let mel = mel_extract(&normalize_audio(&pcm.samples), &mel_cfg)?;
            let stem = path.file_stem().unwrap_or(OsStr::new("out"));
            save_mel(&out.join(stem).with_extension("fvml"), &mel)
        });
        match result {
            Ok(()) => written += 1,
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if !wavs.is_empty() && written == 0 {
        bail!("no WAV file could be processed");
    }
    println!("{written} of {} files written to {}", wavs.len(), out.display());
    Ok(())
}

fn run_train(data: &Path, out: &Path, config: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let ck = resume
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let cfg = match (config, &ck) {
        (None, Some(ck)) => ck.config.clone(),
        _ => load_config(config)?,
    };
    let dataset = Dataset::load(data, &cfg)?;
    log::info!(
        "{} training and {} test utterances",
        dataset.train.len(),
        dataset.test.len()
    );
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let report = train(&dataset, &cfg, out, ck)?;
    if let Some((iter, loss)) = report.losses.last() {
        println!("iteration {iter}: loss {loss:.6}");
    }
    println!("checkpoint {}", report.last_checkpoint.display());
    Ok(())
}

fn timing_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or(OsStr::new("out")).to_os_string();
    name.push(".timing.csv");
    out.with_file_name(name)
}

fn run_synthesize(
    ckpt: &Path,
    mel: Option<&Path>,
    wav: Option<&Path>,
    out: &Path,
    temperature: f64,
    seed: u64,
) -> Result<()> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    log_config(&ck.config);
    let model = ck.model()?;
    let mel_cfg = MelConfig::from_config(&ck.config);
    let mel: MelSpectrogram = match (mel, wav) {
        (Some(m), _) => load_mel(m, &mel_cfg)?,
        (None, Some(w)) => {
            let pcm = read_wav(w)?;
            if pcm.sample_rate != ck.config.sample_rate {
                bail!(
                    "{} has sample rate {}, model expects {}",
                    w.display(),
                    pcm.sample_rate,
                    ck.config.sample_rate
                );
            }
            mel_extract(&normalize_audio(&pcm.samples), &mel_cfg)?
        }
        (None, None) => bail!("one of --mel or --wav is required"),
    };
    let mut req = SynthesisRequest::new(mel, seed);
    req.temperature = temperature;
    req.tol = ck.config.inverse_tol;
    let result = synthesize(&model, &req)?;
    write_wav(out, &result.pcm, ck.config.sample_rate)?;
    let tp = timing_path(out);
    fs::write(&tp, result.timing.to_csv()).with_context(|| format!("writing {}", tp.display()))?;
    let secs = result.pcm.len() as f64 / f64::from(ck.config.sample_rate);
    println!(
        "{} samples ({secs:.3} s) in {:.3} s, RTF {:.3}",
        result.pcm.len(),
        result.timing.total.as_secs_f64(),
        result.timing.total.as_secs_f64() / secs
    );
    Ok(())
}

fn run_evaluate(ckpt: &Path, ref_dir: &Path, n: usize, seed: Option<u64>) -> Result<()> {
    if n == 0 {
        return Err(Error::Input("--n must be at least 1".into()).into());
    }
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    log_config(&ck.config);
    let model = ck.model()?;
    let data = Dataset::load(ref_dir, &ck.config)?;
    let pool = if data.test.is_empty() {
        log::warn!("no file in {} falls in the test split; using all files", ref_dir.display());
        data.train
    } else {
        data.test
    };
    let seed = seed.unwrap_or(ck.config.seed);
    let utts = draw(&pool, n, seed);
    let report = evaluate(&model, &ck.config, &utts, seed)?;
    print!("{}", report.to_csv());
    println!();
    print!("{}", report.summary());
    Ok(())
}

fn run_check(fault: Option<&str>) -> Result<()> {
    let fault = fault.map(str::parse::<Fault>).transpose()?;
    let results = run_checks(fault);
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        println!("{failed} of {} checks failed", results.len());
        return Err(Exit(1).into());
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(Exit(code)) = err.downcast_ref::<Exit>() {
        return *code;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Numeric { .. } | Error::Inversion { .. }) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::ExtractMels { input, out, config } => extract_mels(&input, &out, config.as_deref()),
        Command::Train { data, out, config, resume } => {
            run_train(&data, &out, config.as_deref(), resume.as_deref())
        }
        Command::Synthesize { ckpt, mel, wav, out, temperature, seed } => {
            run_synthesize(&ckpt, mel.as_deref(), wav.as_deref(), &out, temperature, seed)
        }
        Command::Evaluate { ckpt, ref_dir, n, seed } => run_evaluate(&ckpt, &ref_dir, n, seed),
        Command::Check { inject_fault } => run_check(inject_fault.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.downcast_ref::<Exit>().is_none() {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
