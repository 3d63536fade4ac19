use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::flowstack::{FlowModel, ModelDims};

use super::checkpoint::{quantize, Checkpoint};
use super::data::{sample_chunk, Dataset};
use super::loss::nll_loss_and_grad;
use super::optim::{clip_grad_norm, lr_schedule, Adam, GRAD_CLIP};

pub const METRICS_FILE: &str = "metrics.csv";
pub const LATEST_FILE: &str = "latest.fvoc";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.fvoc";

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:08}.fvoc")
}

#[derive(Debug)]
pub struct TrainReport {
    pub model: FlowModel,
    /// `(iteration, loss)` for every step run in this call.
    pub losses: Vec<(u64, f64)>,
    pub last_checkpoint: PathBuf,
}

/// Live optimization state.
struct State {
    model: FlowModel,
    adam: Adam,
    rng: ChaCha8Rng,
    iteration: u64,
}

impl State {
    fn fresh(cfg: &Config) -> Result<Self> {
        let model = FlowModel::from_config(cfg)?;
        let adam = Adam::new(model.params().values());
        Ok(Self {
            model,
            adam,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            iteration: 0,
        })
    }

    fn resume(cfg: &Config, ck: Checkpoint) -> Result<Self> {
        if ModelDims::from_config(cfg) != ModelDims::from_config(&ck.config) {
            return Err(Error::config(
                "checkpoint model dimensions differ from the configuration",
            ));
        }
        let model = ck.model()?;
        let adam = ck
            .adam
            .clone()
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        let rng = ck
            .rng
            .ok_or_else(|| Error::Format("checkpoint has no rng state".into()))?
            .restore();
        Ok(Self {
            model,
            adam,
            rng,
            iteration: ck.iteration,
        })
    }

    fn checkpoint(&self, cfg: &Config) -> Checkpoint {
        Checkpoint::from_model(cfg, self.iteration, &self.model, Some(&self.adam), Some(&self.rng))
    }

    /// Round live state to what a checkpoint stores, then write it.
    fn save(&mut self, cfg: &Config, out_dir: &Path) -> Result<PathBuf> {
        quantize(self.model.params_mut().values_mut());
        quantize(&mut self.adam.m);
        quantize(&mut self.adam.v);
        let ck = self.checkpoint(cfg);
        let path = out_dir.join(checkpoint_name(self.iteration));
        ck.save(&path)?;
        ck.save(&out_dir.join(LATEST_FILE))?;
        Ok(path)
    }
}

fn open_metrics(out_dir: &Path, append: bool) -> Result<File> {
    let path = out_dir.join(METRICS_FILE);
    if append && path.exists() {
        return Ok(OpenOptions::new().append(true).open(path)?);
    }
    let mut f = File::create(path)?;
    writeln!(f, "iter,loss,lr,wall_ms")?;
    Ok(f)
}

/// Maximum-likelihood training from scratch or from `resume`.
///
/// Runs until `cfg.max_iters`, logging one CSV row per step and writing a
/// checkpoint every `cfg.ckpt_every` steps and at the end. A non-finite loss
/// stops the run after saving the pre-step state as a diagnostic checkpoint.
pub fn train(
    data: &Dataset,
    cfg: &Config,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::input("training split is empty"));
    }
    std::fs::create_dir_all(out_dir)?;
    let resuming = resume.is_some();
    let mut st = match resume {
        Some(ck) => State::resume(cfg, ck)?,
        None => State::fresh(cfg)?,
    };
    log::info!("resolved config:\n{}", cfg.to_text());
    let mut metrics = open_metrics(out_dir, resuming)?;
    let mut losses = Vec::new();
    let mut last = out_dir.join(LATEST_FILE);
    let log_every = (cfg.max_iters / 20).max(1);

    while st.iteration < cfg.max_iters {
        let t0 = Instant::now();
        let lr = lr_schedule(st.iteration, cfg.lr0, cfg.anneal_every);
        let batch = (0..cfg.batch)
            .map(|_| sample_chunk(&mut st.rng, &data.train, cfg.chunk_len))
            .collect::<Result<Vec<_>>>()?;
        let step = nll_loss_and_grad(&st.model, &batch).and_then(|lg| {
            if lg.loss.is_finite() {
                Ok(lg)
            } else {
                Err(Error::numeric("nll_loss", format!("loss is {}", lg.loss)))
            }
        });
        let mut lg = match step {
            Ok(lg) => lg,
            Err(e) => {
                let diag = out_dir.join(DIAGNOSTIC_FILE);
                st.checkpoint(cfg).save(&diag)?;
                log::error!(
                    "training halted at iteration {}: {e}; state saved to {}",
                    st.iteration,
                    diag.display()
                );
                return Err(e);
            }
        };
        clip_grad_norm(&mut lg.grads, GRAD_CLIP);
        st.adam
            .step(st.model.params_mut().values_mut(), &lg.grads, lr)?;
        st.iteration += 1;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        writeln!(metrics, "{},{:.9},{:e},{:.3}", st.iteration, lg.loss, lr, ms)?;
        losses.push((st.iteration, lg.loss));
        if st.iteration % log_every == 0 {
            log::info!("iter {} loss {:.5} lr {:e}", st.iteration, lg.loss, lr);
        }
        if st.iteration % cfg.ckpt_every == 0 || st.iteration == cfg.max_iters {
            last = st.save(cfg, out_dir)?;
        }
    }
    metrics.flush()?;
    Ok(TrainReport {
        model: st.model,
        losses,
        last_checkpoint: last,
    })
}
