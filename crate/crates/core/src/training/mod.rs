//! Optimization of the reconstruction objective: AdamW with two learning-rate
//! groups, weight-decay warmup, a shift-regularized first phase and a plain
//! second phase, and EMA shadow weights.

mod checkpoint;
mod distance;
mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use crate::codebook::{Codebook, DropoutPattern};
use crate::data::{make_batches, shift_image, Dataset, ImageBatch, ShiftParam};
use crate::error::{Error, Result};
use crate::model::{Generator, ModelConfig};
use crate::nn::{Mode, Module, ParamGroup};
use crate::rng::{derive_seed, stream_rng, Stream};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use distance::{mse, Distance, DistanceKind, PerceptualNet};
pub use optim::{AdamW, AdamWHyper, Ema};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_main: f64,
    pub lr_mlp: f64,
    pub batch_size: usize,
    pub epochs_phase1: u64,
    pub epochs_phase2: u64,
    pub wd_max: f64,
    pub wd_warmup_epochs: u64,
    pub ema_decay: f64,
    pub max_shift: u32,
    pub distance: DistanceKind,
    pub seed: u64,
    pub adam: AdamWHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_main: 2e-3,
            lr_mlp: 2e-4,
            batch_size: 256,
            epochs_phase1: 1000,
            epochs_phase2: 2000,
            wd_max: 0.08,
            wd_warmup_epochs: 400,
            ema_decay: 0.99995,
            max_shift: 8,
            distance: DistanceKind::Perceptual,
            seed: 0,
            adam: AdamWHyper::default(),
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> u64 {
        self.epochs_phase1 + self.epochs_phase2
    }

    /// Phase of the epoch with 0-based index `epoch`.
    pub fn phase_of(&self, epoch: u64) -> Phase {
        if epoch < self.epochs_phase1 {
            Phase::Shifted
        } else {
            Phase::Plain
        }
    }

    /// Rates may be zero (frozen runs) but not negative. The warmup may run
    /// into the second phase, so it is bounded by the total epoch count.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::RunConfig(m));
        for (name, v) in [("lr_main", self.lr_main), ("lr_mlp", self.lr_mlp), ("wd_max", self.wd_max)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.total_epochs() == 0 {
            return bad("at least one training epoch is required".into());
        }
        if self.wd_warmup_epochs > self.total_epochs() {
            return bad(format!(
                "wd_warmup_epochs {} exceeds the {} total epochs",
                self.wd_warmup_epochs,
                self.total_epochs()
            ));
        }
        let h = self.adam;
        if !(0.0..1.0).contains(&h.beta1) || !(0.0..1.0).contains(&h.beta2) || h.eps <= 0.0 {
            return bad(format!("invalid AdamW hyperparameters {h:?}"));
        }
        Ok(())
    }
}

/// Training phase: the first trains on shifted targets with the shift fed to
/// the generator, the second on untransformed targets with r = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Shifted,
    Plain,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::Shifted => 1,
            Phase::Plain => 2,
        }
    }
}

/// wd_max * min(1, epoch / warmup); no warmup means full decay from the start.
pub fn wd_schedule(epoch: u64, cfg: &TrainConfig) -> f64 {
    if cfg.wd_warmup_epochs == 0 || epoch >= cfg.wd_warmup_epochs {
        cfg.wd_max
    } else {
        cfg.wd_max * epoch as f64 / cfg.wd_warmup_epochs as f64
    }
}

/// Shifted copies of a batch, one shift per item.
pub fn shift_targets(images: &ImageBatch<f32>, shifts: &[ShiftParam]) -> ImageBatch<f32> {
    let mut out = images.clone();
    for (i, s) in shifts.iter().enumerate() {
        shift_image(out.image_mut(i), images.h, images.w, s.value());
    }
    out
}

/// Live model, optimizer and EMA state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Generator<f32>,
    pub opt: AdamW<f32>,
    pub ema: Ema<f32>,
    pub cfg: TrainConfig,
    pub distance: Distance<f32>,
    /// Completed epochs.
    pub epoch: u64,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, distance: Distance<f32>) -> Result<Self> {
        cfg.validate()?;
        let model = Generator::new(model_cfg, cfg.seed)?;
        let params = model.params();
        let opt = AdamW::new(cfg.adam, &params);
        let ema = Ema::new(cfg.ema_decay, &params);
        Ok(Self {
            model,
            opt,
            ema,
            cfg,
            distance,
            epoch: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// Shifts for one batch: uniform integers in [-max_shift, max_shift] in
    /// the first phase; zero in the second, where `rng` is not touched.
    pub fn draw_shifts<R: Rng>(&self, n: usize, phase: Phase, rng: &mut R) -> Vec<ShiftParam> {
        let m = self.cfg.max_shift;
        match phase {
            Phase::Shifted => (0..n)
                .map(|_| ShiftParam::new(rng.random_range(-(m as i32)..=m as i32), m).expect("in range"))
                .collect(),
            Phase::Plain => vec![ShiftParam::zero(m); n],
        }
    }

    /// Loss of the current model on one batch without updating anything
    /// except batch-norm statistics in train mode.
    pub fn objective(
        &mut self,
        images: &ImageBatch<f32>,
        patterns: &[&DropoutPattern],
        shifts: &[ShiftParam],
        mode: Mode,
    ) -> Result<f64> {
        let out = self.model.forward(patterns, shifts, mode)?;
        self.distance.value(&out, &shift_targets(images, shifts))
    }

    /// Forward, backward, AdamW update at weight decay `wd`, EMA update.
    /// A non-finite loss aborts before any parameter changes.
    pub fn train_step<R: Rng>(
        &mut self,
        images: &ImageBatch<f32>,
        patterns: &[&DropoutPattern],
        phase: Phase,
        wd: f64,
        shift_rng: &mut R,
    ) -> Result<f64> {
        let shifts = self.draw_shifts(images.b, phase, shift_rng);
        let targets = shift_targets(images, &shifts);
        let out = self.model.forward(patterns, &shifts, Mode::Train)?;
        let (loss, grad) = self.distance.loss_and_grad(&out, &targets)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: self.opt.step + 1,
                loss,
            });
        }
        self.model.zero_grad();
        self.model.backward(&grad);
        let (lr_main, lr_mlp) = (self.cfg.lr_main, self.cfg.lr_mlp);
        let mut params = self.model.params_mut();
        self.opt.step(
            &mut params,
            |p| match p.group {
                ParamGroup::Main => lr_main,
                ParamGroup::ShiftMlp => lr_mlp,
            },
            wd,
        );
        self.ema.update(&self.model.params());
        Ok(loss)
    }

    /// One pass over the dataset in the seeded order for the current epoch.
    /// Returns the mean batch loss.
    pub fn run_epoch(&mut self, data: &Dataset, codebook: &Codebook) -> Result<f64> {
        let epoch = self.epoch;
        let phase = self.cfg.phase_of(epoch);
        let wd = wd_schedule(epoch, &self.cfg);
        let batches = make_batches(data.len(), self.cfg.batch_size, derive_seed(self.cfg.seed, Stream::Shuffle, epoch))?;
        let mut total = 0.0;
        for indices in &batches {
            let images = data.gather(indices);
            let patterns = indices.iter().map(|&i| codebook.pattern(i)).collect::<Result<Vec<_>>>()?;
            let mut rng = stream_rng(self.cfg.seed, Stream::Shift, self.opt.step);
            total += self.train_step(&images, &patterns, phase, wd, &mut rng)?;
        }
        self.epoch += 1;
        Ok(total / batches.len() as f64)
    }

    /// Copy of the model carrying the EMA weights and the live buffers.
    pub fn ema_model(&self) -> Generator<f32> {
        let mut m = self.model.clone();
        for (p, s) in m.params_mut().into_iter().zip(&self.ema.shadow) {
            p.value.clone_from(s);
        }
        m
    }
}

/// Everything a training run needs beyond the loaded data.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    /// Checkpoint period in epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Stop (with a checkpoint) once this many epochs are complete.
    pub stop_after_epoch: Option<u64>,
    pub feature_asset: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Last checkpoint written: `final.dawt` when the schedule completed.
    pub checkpoint: PathBuf,
    pub completed: bool,
    pub epochs_done: u64,
    /// Mean loss of each epoch run in this invocation.
    pub epoch_losses: Vec<f64>,
}

pub const METRICS_FILE: &str = "metrics.tsv";
pub const FINAL_CHECKPOINT: &str = "final.dawt";

pub fn checkpoint_name(epoch: u64) -> String {
    format!("epoch-{epoch:06}.dawt")
}

/// Checks that a codebook can key this dataset under this model.
pub fn check_compatible(model: &ModelConfig, codebook: &Codebook, n_items: usize) -> Result<()> {
    let channels: Vec<usize> = codebook.spec.layers.iter().map(|l| l.n_channels).collect();
    let active: Vec<usize> = codebook.spec.layers.iter().map(|l| l.k_active).collect();
    if channels != model.hierarchy_channels || active != model.active_channels {
        return Err(Error::RunConfig(format!(
            "codebook layers {channels:?}/{active:?} do not match model {:?}/{:?}",
            model.hierarchy_channels, model.active_channels
        )));
    }
    if codebook.len() != n_items {
        return Err(Error::RunConfig(format!(
            "codebook has {} patterns for {n_items} training items",
            codebook.len()
        )));
    }
    Ok(())
}

fn metrics_line(epoch: u64, phase: Phase, loss: f64, wd: f64, secs: f64) -> String {
    format!("{epoch}\t{}\t{loss:.8e}\t{wd:.6}\t{secs:.3}\n", phase.number())
}

/// Keeps only log lines for epochs up to `epoch` (used when resuming).
fn truncate_metrics(path: &Path, epoch: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let kept: String = text
        .lines()
        .filter(|l| l.split('\t').next().and_then(|e| e.parse::<u64>().ok()).is_some_and(|e| e <= epoch))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept)?;
    Ok(())
}

/// Phase 1 then phase 2, logging one line per epoch and checkpointing every
/// `checkpoint_every` epochs, at the phase boundary and at the end. With
/// `resume`, continues bit-exactly from that checkpoint.
pub fn train(run: &TrainRun, data: &Dataset, codebook: &Codebook, resume: Option<&Path>) -> Result<TrainOutcome> {
    check_compatible(&run.model, codebook, data.len())?;
    run.train.validate()?;
    fs::create_dir_all(&run.out_dir)?;
    let distance = Distance::new(run.train.distance, run.feature_asset.as_deref())?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            ck.check_resumable(&run.model, codebook, data.len())?;
            ck.into_trainer(run.train.clone(), distance)?
        }
        None => Trainer::new(run.model.clone(), run.train.clone(), distance)?,
    };
    let metrics_path = run.out_dir.join(METRICS_FILE);
    if resume.is_some() {
        truncate_metrics(&metrics_path, trainer.epoch)?;
    } else {
        fs::write(&metrics_path, "")?;
    }
    let mut log = fs::OpenOptions::new().append(true).create(true).open(&metrics_path)?;
    let total = run.train.total_epochs();
    let save = |t: &Trainer, name: &str| -> Result<PathBuf> {
        let path = run.out_dir.join(name);
        checkpoint::save_checkpoint(t, codebook, data.len(), &path)?;
        Ok(path)
    };
    let started = Instant::now();
    let mut losses = Vec::new();
    let mut last = None;
    while trainer.epoch < total {
        let epoch = trainer.epoch;
        let phase = run.train.phase_of(epoch);
        let wd = wd_schedule(epoch, &run.train);
        let loss = match trainer.run_epoch(data, codebook) {
            Ok(l) => l,
            Err(e @ Error::Divergence { .. }) => {
                save(&trainer, "diverged.dawt")?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        losses.push(loss);
        log.write_all(metrics_line(epoch + 1, phase, loss, wd, started.elapsed().as_secs_f64()).as_bytes())?;
        log.flush()?;
        let done = trainer.epoch;
        let boundary = done == run.train.epochs_phase1 && done < total;
        let periodic = run.checkpoint_every > 0 && done % run.checkpoint_every == 0;
        let stop = run.stop_after_epoch.is_some_and(|s| done >= s) && done < total;
        if done == total {
            last = Some(save(&trainer, FINAL_CHECKPOINT)?);
        } else if boundary || periodic || stop {
            last = Some(save(&trainer, &checkpoint_name(done))?);
        }
        if stop {
            break;
        }
    }
    let checkpoint = match last {
        Some(p) => p,
        // nothing left to run: the resumed checkpoint was already final
        None => save(&trainer, FINAL_CHECKPOINT)?,
    };
    Ok(TrainOutcome {
        completed: trainer.epoch == total,
        epochs_done: trainer.epoch,
        checkpoint,
        epoch_losses: losses,
    })
}
