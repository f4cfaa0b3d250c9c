//! Joint optimization of the topic model and the summarizer.

mod checkpoint;
mod config;
mod model;

use std::io::Write;

use candle_core::{Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Ctx};
use crate::ntm;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{Ablations, TrainConfig};
pub use model::{prepare_examples, Example, Model};

pub const LOG_EPS: f64 = 1e-10;

/// Mean negative log-likelihood of the gold tokens. `steps[c]` holds the
/// `[T_c, |V|]` step distributions of cluster `c`, `golds[c]` its `T_c`
/// target ids. PAD targets are skipped.
pub fn generation_loss(steps: &[&Tensor], golds: &[&[u32]]) -> Result<Tensor> {
    if steps.len() != golds.len() {
        return Err(Error::Shape("one gold sequence per step block required".into()));
    }
    let mut terms = Vec::new();
    let mut count = 0usize;
    for (p, gold) in steps.iter().zip(golds) {
        let (t, _) = p.dims2()?;
        if t != gold.len() {
            return Err(Error::Shape(format!("{t} steps for {} gold tokens", gold.len())));
        }
        let rows: Vec<u32> = (0..t as u32).filter(|&i| gold[i as usize] != crate::corpus::PAD).collect();
        if rows.is_empty() {
            continue;
        }
        let targets: Vec<u32> = rows.iter().map(|&i| gold[i as usize]).collect();
        count += rows.len();
        let picked = p
            .index_select(&Tensor::new(rows, &nn::device())?, 0)?
            .gather(&Tensor::new(targets, &nn::device())?.unsqueeze(1)?, 1)?;
        terms.push((picked + LOG_EPS)?.log()?.sum_all()?);
    }
    if count == 0 {
        return Ok(Tensor::new(0.0f64, &nn::device())?);
    }
    let total = Tensor::stack(&terms, 0)?.sum_all()?;
    Ok((total.neg()? / count as f64)?)
}

/// `KL(theta_x || mean_t theta_dec[t])` for a `[K]` mixture and `[T, K]`
/// decoder topic attentions.
pub fn inconsistency_loss(theta_x: &Tensor, theta_dec: &Tensor) -> Result<Tensor> {
    let (t, k) = theta_dec.dims2()?;
    if t == 0 {
        return Err(Error::EmptySteps);
    }
    if theta_x.dims() != [k] {
        return Err(Error::Shape(format!(
            "topic mixture shape {:?} vs {k} decoder topics",
            theta_x.dims()
        )));
    }
    let mean = theta_dec.mean(0)?;
    let ratio = ((theta_x + LOG_EPS)?.log()? - (mean + LOG_EPS)?.log()?)?;
    Ok(theta_x.mul(&ratio)?.sum_all()?)
}

/// Loss values of one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_gen: f64,
    pub l_ntm: f64,
    pub l_inc: f64,
    pub total: f64,
}

/// Differentiable loss terms; `total` is the one to backpropagate.
#[derive(Debug, Clone)]
pub struct LossTensors {
    pub l_gen: Tensor,
    pub l_ntm: Tensor,
    pub l_inc: Tensor,
    pub total: Tensor,
}

impl LossTensors {
    pub fn values(&self) -> Result<LossBundle> {
        Ok(LossBundle {
            l_gen: nn::scalar(&self.l_gen)?,
            l_ntm: nn::scalar(&self.l_ntm)?,
            l_inc: nn::scalar(&self.l_inc)?,
            total: nn::scalar(&self.total)?,
        })
    }
}

/// Forward pass over a batch and the weighted loss
/// `l_gen + gamma * l_ntm + tau * l_inc`. `kl_weight` scales the KL part of
/// the topic-model loss (1 outside the annealing window).
pub fn joint_loss(model: &Model, batch: &[&Example], ctx: &Ctx, kl_weight: f64) -> Result<LossTensors> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let cfg = &model.config;
    let bows: Vec<_> = batch.iter().map(|e| &e.bow).collect();
    let posterior = model.posterior(&bows, ctx)?;
    let counts = ntm::bow_counts(&bows)?;
    let (kl, rec) = model.ntm.loss_terms(&counts, &posterior)?;
    let l_ntm = ((kl * kl_weight)? + rec)?.mean_all()?;

    let mut step_ps = Vec::with_capacity(batch.len());
    let mut golds = Vec::with_capacity(batch.len());
    let mut incs = Vec::with_capacity(batch.len());
    for (b, ex) in batch.iter().enumerate() {
        let encoded = model.encode(&ex.input, ctx)?;
        let steps = model.decoder.teacher_forced_pass(&ex.input.summary, &encoded, ctx)?;
        let theta_x = posterior.theta.get(b)?;
        incs.push(inconsistency_loss(&theta_x, &steps.theta_dec)?);
        step_ps.push(steps.p);
        golds.push(&ex.input.summary[1..]);
    }
    let refs: Vec<&Tensor> = step_ps.iter().collect();
    let l_gen = generation_loss(&refs, &golds)?;
    let l_inc = Tensor::stack(&incs, 0)?.mean_all()?;

    let mut total = (&l_gen + (&l_ntm * cfg.gamma)?)?;
    let tau = cfg.effective_tau();
    if tau != 0.0 {
        total = (total + (&l_inc * tau)?)?;
    }
    Ok(LossTensors {
        l_gen,
        l_ntm,
        l_inc,
        total,
    })
}

/// KL weight schedule: zero for the first epoch, then a linear ramp to one
/// over the second epoch.
pub fn kl_weight(enabled: bool, epoch: usize, batch: usize, batches: usize) -> f64 {
    if !enabled {
        return 1.0;
    }
    match epoch {
        0 => 0.0,
        1 => (batch + 1) as f64 / batches.max(1) as f64,
        _ => 1.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the validation loss has failed to improve for `patience`
/// consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    bad_epochs: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best: f64::INFINITY,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train: LossBundle,
    pub val_total: f64,
}

pub const METRICS_HEADER: &str = "epoch,l_gen,l_ntm,l_inc,total,val_total";

pub fn write_metrics_csv(mut out: impl Write, history: &[EpochMetrics]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in history {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            m.epoch, m.train.l_gen, m.train.l_ntm, m.train.l_inc, m.train.total, m.val_total
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
}

/// Mean loss over `examples` in eval mode (no noise, no dropout, full KL).
pub fn evaluate_loss(model: &Model, examples: &[Example]) -> Result<LossBundle> {
    let ctx = Ctx::eval();
    let mut acc = LossBundle::default();
    let mut batches = 0usize;
    for chunk in examples.chunks(model.config.batch_size) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let v = joint_loss(model, &refs, &ctx, 1.0)?.values()?;
        acc.l_gen += v.l_gen;
        acc.l_ntm += v.l_ntm;
        acc.l_inc += v.l_inc;
        acc.total += v.total;
        batches += 1;
    }
    let n = batches.max(1) as f64;
    Ok(LossBundle {
        l_gen: acc.l_gen / n,
        l_ntm: acc.l_ntm / n,
        l_inc: acc.l_inc / n,
        total: acc.total / n,
    })
}

fn clip_gradients(grads: &mut candle_core::backprop::GradStore, vars: &[candle_core::Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += nn::scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                let scaled = (g * scale)?;
                grads.insert(v.as_tensor(), scaled);
            }
        }
    }
    Ok(norm)
}

/// Options that shape a run without being part of the model config.
pub struct TrainHooks<'a> {
    /// Called after every epoch with the metrics so far.
    pub on_epoch: Option<&'a mut dyn FnMut(&Model, &EpochMetrics) -> Result<()>>,
    /// Evaluate validation loss every epoch (always true for early stopping).
    pub validate: bool,
}

impl Default for TrainHooks<'_> {
    fn default() -> Self {
        Self {
            on_epoch: None,
            validate: true,
        }
    }
}

/// Trains `model` in place with seeded shuffling and early stopping on
/// validation loss; the best-validation parameters are restored on return.
pub fn train(model: &Model, train_set: &[Example], val_set: &[Example], mut hooks: TrainHooks<'_>) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let cfg = model.config.clone();
    let vars = model.trainable_vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = model.snapshot()?;
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let ctx = Ctx::train(cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64), cfg.dropout);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let mut acc = LossBundle::default();
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train_set[i]).collect();
            let w = kl_weight(cfg.kl_anneal, epoch, b, batches.len());
            let loss = joint_loss(model, &batch, &ctx, w)?;
            let v = loss.values()?;
            if !v.total.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                    detail: format!("{v:?}"),
                });
            }
            let mut grads = loss.total.backward()?;
            let norm = clip_gradients(&mut grads, &vars, cfg.grad_clip)?;
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                    detail: "non-finite gradient norm".into(),
                });
            }
            opt.step(&grads)?;
            acc.l_gen += v.l_gen;
            acc.l_ntm += v.l_ntm;
            acc.l_inc += v.l_inc;
            acc.total += v.total;
        }
        let n = batches.len() as f64;
        let train_loss = LossBundle {
            l_gen: acc.l_gen / n,
            l_ntm: acc.l_ntm / n,
            l_inc: acc.l_inc / n,
            total: acc.total / n,
        };
        let val_total = if hooks.validate {
            evaluate_loss(model, val_set)?.total
        } else {
            train_loss.total
        };
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            train: train_loss,
            val_total,
        };
        info!(
            "epoch {} gen {:.4} ntm {:.4} inc {:.4} total {:.4} val {:.4}",
            metrics.epoch, train_loss.l_gen, train_loss.l_ntm, train_loss.l_inc, train_loss.total, val_total
        );
        history.push(metrics);
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(model, &metrics)?;
        }
        match stopper.observe(epoch + 1, val_total) {
            StopDecision::Improved => best = model.snapshot()?,
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    model.restore(&best)?;
    Ok(TrainOutcome {
        history,
        best_epoch: stopper.best_epoch().unwrap_or(0),
        best_val: stopper.best_loss(),
        stopped_early,
    })
}

/// Per-token argmax over `[T, K]` or `[T, V]` rows, for diagnostics.
pub fn row_argmax(t: &Tensor) -> Result<Vec<u32>> {
    Ok(t.argmax(D::Minus1)?.to_vec1::<u32>()?)
}
