//! Optimization and evaluation drivers.
//!
//! Training runs in named stages. Each stage gets a fresh optimizer, its own
//! learning rate, and a list of frozen name prefixes; the caller supplies a
//! closure that builds one step's loss graph (sampling, batching, and model
//! wiring live there). Frozen parameters receive no gradient and no update,
//! so their bytes stay identical across the stage.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamSet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::synthdoc::Sample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name and
/// created lazily, so parameters that never receive gradients cost nothing.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub cfg: AdamConfig,
    m: BTreeMap<String, Tensor<S>>,
    v: BTreeMap<String, Tensor<S>>,
    t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig) -> Adam<S> {
        Adam { cfg, m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    /// Apply one update from named gradients. Parameters without a gradient
    /// entry are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &BTreeMap<String, Tensor<S>>) -> Result<()> {
        self.t += 1;
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let one = S::one();
        let corr1 = S::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let corr2 = S::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let lr = S::from_f64(self.cfg.lr);
        let eps = S::from_f64(self.cfg.eps);
        for (name, grad) in grads {
            let param = params.get_mut(name)?;
            if param.tensor.shape() != grad.shape() {
                return Err(Error::dim(
                    "adam",
                    format!(
                        "gradient for {name} has shape {:?}, parameter is {:?}",
                        grad.shape(),
                        param.tensor.shape()
                    ),
                ));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let w = param.tensor.data_mut();
            for ((wi, gi), (mi, vi)) in w
                .iter_mut()
                .zip(grad.data().iter())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = b1 * *mi + (one - b1) * *gi;
                *vi = b2 * *vi + (one - b2) * *gi * *gi;
                let mhat = *mi / corr1;
                let vhat = *vi / corr2;
                *wi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One stage of the schedule.
#[derive(Debug, Clone)]
pub struct StageSpec {
    pub name: String,
    pub steps: usize,
    pub lr: f64,
    /// Parameter-name prefixes excluded from training this stage.
    pub freeze_prefixes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub name: String,
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    /// Mean of the final quarter of the loss curve.
    pub tail_mean: f64,
    pub losses: Vec<f64>,
}

/// Global gradient-norm ceiling applied every step by `train_stage`. Small
/// attention models spike early; a fixed clip keeps Adam's moments sane.
pub const GRAD_CLIP_NORM: f64 = 1.0;

/// Scale `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// pre-clip norm. Norm accumulation runs in f64 regardless of `S`.
pub fn clip_global_norm<S: Scalar>(
    grads: &mut BTreeMap<String, Tensor<S>>,
    max_norm: f64,
) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &x in g.data() {
            let x = x.as_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Run one stage: per step, build a fresh loss graph via `build_loss`, take
/// gradients, clip their global norm to `GRAD_CLIP_NORM`, and apply Adam. A
/// non-finite loss aborts with a numeric error naming the stage and step.
pub fn train_stage<S: Scalar, F>(
    params: &mut ParamSet<S>,
    stage: &StageSpec,
    rng: &mut Rng,
    mut build_loss: F,
) -> Result<StageReport>
where
    F: FnMut(&mut Graph<S>, &Bound, &mut Rng, usize) -> Result<Var>,
{
    if stage.steps == 0 {
        return Err(Error::Config(format!("stage {:?} has zero steps", stage.name)));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(stage.lr));
    let mut losses = Vec::with_capacity(stage.steps);
    for step in 0..stage.steps {
        let mut g = Graph::<S>::new();
        let bound = params.bind_frozen(&mut g, &stage.freeze_prefixes);
        let loss = build_loss(&mut g, &bound, rng, step)?;
        let loss_v = g.value(loss).item()?.as_f64();
        if !loss_v.is_finite() {
            return Err(Error::numeric(
                format!("stage {:?} step {step}", stage.name),
                format!("loss became {loss_v}"),
            ));
        }
        losses.push(loss_v);
        let mut grads = g.backward(loss)?;
        let mut named: BTreeMap<String, Tensor<S>> = BTreeMap::new();
        for (name, var) in bound.iter() {
            if let Some(grad) = grads.take(var) {
                if !grad.all_finite() {
                    return Err(Error::numeric(
                        format!("stage {:?} step {step}", stage.name),
                        format!("gradient for {name} is not finite"),
                    ));
                }
                named.insert(name.to_string(), grad);
            }
        }
        clip_global_norm(&mut named, GRAD_CLIP_NORM);
        adam.step(params, &named)?;
    }
    let tail_from = stage.steps - stage.steps.div_ceil(4);
    let tail = &losses[tail_from..];
    Ok(StageReport {
        name: stage.name.clone(),
        steps: stage.steps,
        first_loss: losses[0],
        last_loss: *losses.last().unwrap(),
        tail_mean: tail.iter().sum::<f64>() / tail.len() as f64,
        losses,
    })
}

/// Draw `batch` indices from `weights` (with replacement, proportional).
pub fn weighted_indices(rng: &mut Rng, weights: &[f64], batch: usize) -> Result<Vec<usize>> {
    if weights.is_empty() || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Argument("weighted_indices: need non-negative weights".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Argument("weighted_indices: weights sum to zero".into()));
    }
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut x = rng.next_f64() * total;
        let mut pick = weights.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            if x < w {
                pick = i;
                break;
            }
            x -= w;
        }
        out.push(pick);
    }
    Ok(out)
}

/// Aggregate evaluation counters.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub n: usize,
    pub exact: usize,
    /// Position-wise character agreement, averaged over samples.
    pub char_acc: f64,
    /// Mean probability of answering by uniform chance, where defined.
    pub chance: Option<f64>,
    /// Per page-count bucket: (samples, exact matches).
    pub by_pages: BTreeMap<usize, (usize, usize)>,
}

impl EvalOutcome {
    pub fn exact_rate(&self) -> f64 {
        self.exact as f64 / self.n as f64
    }
}

/// Position-wise agreement between two strings over the longer length.
pub fn char_accuracy(pred: &str, target: &str) -> f64 {
    let p: Vec<char> = pred.chars().collect();
    let t: Vec<char> = target.chars().collect();
    let denom = p.len().max(t.len());
    if denom == 0 {
        return 1.0;
    }
    let hits = p.iter().zip(t.iter()).filter(|(a, b)| a == b).count();
    hits as f64 / denom as f64
}

/// Run `predict` over every sample and score against the stored targets.
pub fn evaluate<F>(samples: &[Sample], mut predict: F) -> Result<EvalOutcome>
where
    F: FnMut(&Sample) -> Result<String>,
{
    if samples.is_empty() {
        return Err(Error::Argument("evaluate: empty sample set".into()));
    }
    let mut exact = 0;
    let mut char_sum = 0.0;
    let mut chance_sum = 0.0;
    let mut chance_n = 0usize;
    let mut by_pages: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for sample in samples {
        let pred = predict(sample)?;
        let hit = pred == sample.target;
        exact += hit as usize;
        char_sum += char_accuracy(&pred, &sample.target);
        if let Some(c) = sample.chance_candidates() {
            chance_sum += 1.0 / c as f64;
            chance_n += 1;
        }
        let bucket = by_pages.entry(sample.pages.len()).or_insert((0, 0));
        bucket.0 += 1;
        bucket.1 += hit as usize;
    }
    Ok(EvalOutcome {
        n: samples.len(),
        exact,
        char_acc: char_sum / samples.len() as f64,
        chance: (chance_n > 0).then(|| chance_sum / chance_n as f64),
        by_pages,
    })
}
