//! Pre-training loop: optimizer steps on the student, EMA teacher updates on
//! a cosine momentum ramp, prototype-center updates, loss logging, and
//! checkpointing.

mod checkpoint;
#[cfg(test)]
mod tests;

pub use checkpoint::{load_checkpoint, save_checkpoint, verify_checkpoint_config, MAGIC};

use crate::augment::{apply_view, sample_view_pair, ViewPolicy};
use crate::config::{ObjectiveKind, ValidatedConfig};
use crate::data::ShapeScene;
use crate::error::{DeconError, Result};
use crate::models::{ema_update, Arch, ModelBundle, ParamMap};
use crate::objective::{compute_step_loss, update_center, AugView, LossBreakdown, SamplePair};
use crate::rng::substream_indexed;
use crate::tensor::fl;
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Teacher momentum ramp: m(step) = 1 - (1-m0) * (cos(pi*step/total)+1)/2.
pub fn momentum_schedule(step: u64, total_steps: u64, m0: f64) -> Result<f64> {
    if total_steps < 1 {
        return Err(DeconError::Train("total_steps must be >= 1".into()));
    }
    if step > total_steps {
        return Err(DeconError::Train(format!("step {step} > total_steps {total_steps}")));
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(1.0 - (1.0 - m0) * (phase.cos() + 1.0) / 2.0)
}

/// Cosine learning-rate decay with a linear warm-up over the first
/// `warmup_steps` steps.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let remaining = (total_steps - warmup_steps).max(1);
    let progress = (step - warmup_steps) as f64 / remaining as f64;
    base_lr * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// SGD with momentum: v = mu*v + g + wd*w; w -= lr*v. Parameters without a
/// gradient entry are treated as zero-gradient (weight decay still applies).
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub velocity: ParamMap<f32>,
    pub momentum: f64,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum { velocity: ParamMap::new(), momentum }
    }

    pub fn step(
        &mut self,
        params: &mut ParamMap<f32>,
        grads: &BTreeMap<String, ArrayD<f32>>,
        lr: f64,
        weight_decay: f64,
    ) {
        let mu = fl::<f32>(self.momentum);
        let wd = fl::<f32>(weight_decay);
        let lr = fl::<f32>(lr);
        for (name, w) in params.iter_mut() {
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(IxDyn(w.shape())));
            match grads.get(name) {
                Some(g) => {
                    ndarray::Zip::from(&mut *v).and(&*w).and(g).for_each(|v, &w, &g| {
                        *v = mu * *v + g + wd * w;
                    });
                }
                None => {
                    ndarray::Zip::from(&mut *v).and(&*w).for_each(|v, &w| {
                        *v = mu * *v + wd * w;
                    });
                }
            }
            ndarray::Zip::from(w).and(&*v).for_each(|w, &v| {
                *w = *w - lr * v;
            });
        }
    }
}

/// Full mutable state of a pre-training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub cfg: ValidatedConfig,
    pub bundle: ModelBundle<f32>,
    pub optimizer: SgdMomentum,
    /// Global 0-based step counter (== steps already taken).
    pub step: u64,
    /// Completed epochs.
    pub epoch: u32,
    pub total_steps: u64,
    pub empty_match_events: u64,
}

impl TrainState {
    pub fn init(cfg: ValidatedConfig, dataset_len: usize) -> TrainState {
        let arch = Arch::from_config(&cfg);
        Self::init_with_arch(cfg, arch, dataset_len)
    }

    /// Custom architecture entry point (micro models in tests).
    pub fn init_with_arch(cfg: ValidatedConfig, arch: Arch, dataset_len: usize) -> TrainState {
        let steps_per_epoch = dataset_len.div_ceil(cfg.batch_size as usize) as u64;
        let total_steps = steps_per_epoch.max(1) * cfg.epochs as u64;
        let bundle = ModelBundle::init(arch, cfg.seed);
        TrainState {
            bundle,
            optimizer: SgdMomentum::new(0.9),
            step: 0,
            epoch: 0,
            total_steps,
            cfg,
        empty_match_events: 0,
        }
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        dataset_len.div_ceil(self.cfg.batch_size as usize) as u64
    }
}

/// Builds the augmented view pair for one item of one epoch. Draws are keyed
/// by (epoch, item), so batch composition and other consumers cannot shift
/// them.
fn make_pair(
    scene: &ShapeScene,
    cfg: &ValidatedConfig,
    epoch: u32,
    item: usize,
) -> SamplePair<f32> {
    let policy = ViewPolicy::default_policy(cfg.image_size as usize);
    let mut rng =
        substream_indexed(cfg.seed, "augment", ((epoch as u64) << 32) | item as u64);
    let (spec_a, spec_b) = sample_view_pair(&mut rng, &policy);
    let to_dyn = |img: ndarray::Array3<f32>| {
        let (c, h, w) = img.dim();
        img.into_shape_with_order(IxDyn(&[c, h, w])).expect("3d->dyn")
    };
    let a = apply_view(&scene.image, &spec_a);
    let b = apply_view(&scene.image, &spec_b);
    SamplePair {
        first: AugView { pixels: to_dyn(a), spec: spec_a, slot: 0 },
        second: AugView { pixels: to_dyn(b), spec: spec_b, slot: 1 },
    }
}

/// One optimizer step: loss + gradients, student update (banks renormalized),
/// buffer commit, EMA teacher update at m(step), prototype-center update.
/// Teacher parameters change only in the EMA update.
pub fn train_step(
    state: &mut TrainState,
    batch: &[SamplePair<f32>],
    lr: f64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(DeconError::Train("empty batch".into()));
    }
    let cfg = state.cfg.clone();
    let out = compute_step_loss(&state.bundle, batch, &cfg, state.step)?;
    if !out.breakdown.total.is_finite() {
        return Err(DeconError::Train(format!(
            "non-finite loss at step {}: l_enc={} l_dec={:?} l_dds={} total={}",
            state.step,
            out.breakdown.l_enc,
            out.breakdown.l_dec_levels,
            out.breakdown.l_dds,
            out.breakdown.total
        )));
    }

    // (2) student + prototype banks
    state.optimizer.step(&mut state.bundle.student.params, &out.grads, lr, cfg.weight_decay);
    if state.bundle.arch.objective == ObjectiveKind::Prototype {
        let mut banks: ParamMap<f32> = state
            .bundle
            .protos
            .iter()
            .map(|(head, s)| (format!("proto.{head}.bank"), s.bank.clone().into_dyn()))
            .collect();
        state.optimizer.step(&mut banks, &out.grads, lr, cfg.weight_decay);
        for (head, s) in state.bundle.protos.iter_mut() {
            let updated = banks.remove(&format!("proto.{head}.bank")).expect("bank present");
            s.bank = updated.into_dimensionality().expect("bank 2d");
            s.renormalize_rows();
        }
    }
    for (name, buf) in out.new_student_buffers {
        state.bundle.student.buffers.insert(name, buf);
    }

    // (3) EMA teacher
    let m = momentum_schedule(state.step, state.total_steps, cfg.ema_m0)?;
    ema_update(&mut state.bundle.teacher, &state.bundle.student, m)?;

    // (4) prototype centers
    if state.bundle.arch.objective == ObjectiveKind::Prototype {
        for (head, mean) in &out.teacher_head_means {
            if let Some(proto) = state.bundle.protos.get_mut(head) {
                update_center(proto, mean, cfg.center_momentum);
            }
        }
    }

    state.empty_match_events += out.diagnostics.empty_match_levels;
    state.step += 1;
    Ok(out.breakdown)
}

/// Sink for the per-step loss log CSV.
pub struct LossLog {
    writer: Option<std::io::BufWriter<std::fs::File>>,
    pub rows: Vec<(u64, u32, f64, f64, LossBreakdown)>,
}

pub const LOSS_LOG_HEADER: &str =
    "step,epoch,lr,momentum,l_enc,l_dec_1,l_dec_2,l_dec_3,l_dec_4,l_dds,total";

impl LossLog {
    pub fn new(path: Option<&Path>, append: bool) -> Result<LossLog> {
        let writer = match path {
            None => None,
            Some(p) => {
                let mut options = std::fs::OpenOptions::new();
                options.create(true).write(true);
                if append {
                    options.append(true);
                } else {
                    options.truncate(true);
                }
                let mut f = options
                    .open(p)
                    .map_err(|e| DeconError::io(p.display().to_string(), e))?;
                if !append || f.metadata().map(|m| m.len() == 0).unwrap_or(true) {
                    writeln!(f, "{LOSS_LOG_HEADER}")
                        .map_err(|e| DeconError::io(p.display().to_string(), e))?;
                }
                Some(std::io::BufWriter::new(f))
            }
        };
        Ok(LossLog { writer, rows: Vec::new() })
    }

    pub fn push(&mut self, epoch: u32, lr: f64, momentum: f64, b: &LossBreakdown) -> Result<()> {
        if let Some(w) = &mut self.writer {
            let mut levels = vec![String::new(); 4];
            for (i, v) in b.l_dec_levels.iter().enumerate() {
                levels[i] = format!("{v}");
            }
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                b.step,
                epoch,
                lr,
                momentum,
                b.l_enc,
                levels[0],
                levels[1],
                levels[2],
                levels[3],
                b.l_dds,
                b.total
            )
            .map_err(|e| DeconError::Train(format!("loss log write: {e}")))?;
        }
        self.rows.push((b.step, epoch, lr, momentum, b.clone()));
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush().map_err(|e| DeconError::Train(format!("loss log flush: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    pub loss_log: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    /// Also write the checkpoint every k epochs (the final epoch always
    /// writes when `checkpoint_out` is set).
    pub checkpoint_every_epochs: Option<u32>,
    /// Continue from a previously saved state instead of a fresh init.
    pub resume: Option<TrainState>,
}

/// Runs `epochs x ceil(N/batch)` steps over the dataset with cosine LR decay
/// and one warm-up epoch. Returns the final state and the per-step records.
pub fn pretrain(
    cfg: &ValidatedConfig,
    scenes: &[ShapeScene],
    options: PretrainOptions,
) -> Result<(TrainState, Vec<LossBreakdown>)> {
    if scenes.is_empty() {
        return Err(DeconError::Train("empty dataset".into()));
    }
    let resuming = options.resume.is_some();
    let mut state = match options.resume {
        Some(s) => s,
        None => TrainState::init(cfg.clone(), scenes.len()),
    };
    let steps_per_epoch = state.steps_per_epoch(scenes.len());
    let warmup_steps = steps_per_epoch; // one warm-up epoch
    let mut log = LossLog::new(options.loss_log.as_deref(), resuming)?;
    let mut breakdowns = Vec::new();

    for epoch in state.epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut rng = substream_indexed(cfg.seed, "data-order", epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size as usize) {
            let batch: Vec<SamplePair<f32>> = chunk
                .iter()
                .map(|&i| make_pair(&scenes[i], cfg, epoch, i))
                .collect();
            let lr = lr_schedule(state.step, state.total_steps, warmup_steps, cfg.lr);
            let m = momentum_schedule(state.step, state.total_steps, cfg.ema_m0)?;
            let breakdown = train_step(&mut state, &batch, lr)?;
            log.push(epoch, lr, m, &breakdown)?;
            breakdowns.push(breakdown);
        }
        state.epoch = epoch + 1;
        log.flush()?;
        if let (Some(path), Some(every)) = (&options.checkpoint_out, options.checkpoint_every_epochs)
        {
            if every > 0 && state.epoch % every == 0 && state.epoch < cfg.epochs {
                save_checkpoint(&state, path)?;
            }
        }
    }
    if let Some(path) = &options.checkpoint_out {
        save_checkpoint(&state, path)?;
    }
    log.flush()?;
    Ok((state, breakdowns))
}
