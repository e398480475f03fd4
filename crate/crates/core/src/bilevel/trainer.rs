use serde::{Deserialize, Serialize};

use super::config::{Method, TrainConfig};
use super::hypergrad::{self, InnerStep, MetaObjective};
use super::optim::Sgd;
use crate::data::Dataset;
use crate::error::{Result, RevarError};
use crate::mcvar::{self, McConfig};
use crate::metanet::MetaNet;
use crate::nets::{self, Activation, NetParams, OutputKind};
use crate::numkit::{mean, std_dev, Matrix, Rng};
use crate::par;

/// Sub-stream labels derived from the run seed. Each consumer owns one
/// stream, so e.g. sampling dropout masks never shifts the batch order.
pub mod streams {
    pub const INIT_CLASSIFIER: u64 = 1;
    pub const INIT_META: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const VAL_BATCHES: u64 = 4;
    pub const META_MASKS: u64 = 5;
    pub const TRAIN_MASKS: u64 = 6;
    pub const HISTORY: u64 = 7;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Regression,
    Classification { n_classes: usize },
}

/// Everything a training run consumes.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    /// Unlabeled inputs for the pooled objective.
    pub unlabeled: Option<Matrix>,
    pub task: Task,
}

impl Splits {
    fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(RevarError::Validation("training split is empty".into()));
        }
        if self.val.is_empty() {
            return Err(RevarError::Validation("validation split is empty".into()));
        }
        if self.train.dim() != self.val.dim() {
            return Err(RevarError::Dimension {
                context: "validation features",
                expected: self.train.dim(),
                got: self.val.dim(),
            });
        }
        if let Some(u) = &self.unlabeled {
            if u.rows() > 0 && u.cols() != self.train.dim() {
                return Err(RevarError::Dimension {
                    context: "unlabeled features",
                    expected: self.train.dim(),
                    got: u.cols(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean unweighted training loss over the epoch's batches.
    pub train_loss: f64,
    /// Meta-loss of the end-of-epoch predictor on a fixed validation slice,
    /// with the variance weight the method itself uses.
    pub meta_loss: f64,
    /// Mean and population SD of the weights produced during the epoch,
    /// before any batch normalisation.
    pub weight_mean: f64,
    pub weight_sd: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedPair {
    pub method: Method,
    pub classifier: NetParams,
    pub meta: Option<MetaNet>,
    pub history: Vec<EpochRecord>,
}

/// Freshly initialised predictor for `task` on `dim` inputs.
pub fn init_classifier(task: Task, dim: usize, cfg: &TrainConfig) -> Result<NetParams> {
    let (out, kind) = match task {
        Task::Regression => (1, OutputKind::Linear),
        Task::Classification { n_classes } => (n_classes, OutputKind::Softmax),
    };
    let mut sizes = vec![dim];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(out);
    let mut rng = Rng::new(cfg.seed).derive(streams::INIT_CLASSIFIER);
    NetParams::new(&sizes, Activation::Relu, kind, cfg.mc.dropout_rate, &mut rng)
}

pub fn init_meta(method: Method, dim: usize, cfg: &TrainConfig) -> Result<Option<MetaNet>> {
    let Some(conditioning) = method.conditioning() else {
        return Ok(None);
    };
    let input_dim = match conditioning {
        crate::metanet::Conditioning::Instance => dim,
        crate::metanet::Conditioning::LossScalar => 1,
    };
    let mut rng = Rng::new(cfg.seed).derive(streams::INIT_META);
    Ok(Some(MetaNet::new(input_dim, &cfg.meta_hidden, conditioning, &mut rng)?))
}

/// Cycles through a seeded shuffle of the validation rows, reshuffling
/// whenever the order is exhausted.
struct ValCycler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl ValCycler {
    fn new(n: usize, mut rng: Rng) -> Self {
        let order = rng.permutation(n);
        ValCycler { order, pos: 0, rng }
    }

    fn next(&mut self, m: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(m);
        while out.len() < m {
            if self.pos == self.order.len() {
                self.order = self.rng.permutation(self.order.len());
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Runs the configured method from fresh parameters.
pub fn train(splits: &Splits, cfg: &TrainConfig) -> Result<TrainedPair> {
    train_from(splits, cfg, None)
}

/// Baseline entry point: rejects the two methods that are not baselines.
pub fn train_baseline(splits: &Splits, cfg: &TrainConfig) -> Result<TrainedPair> {
    match cfg.method {
        Method::Revar | Method::RevarPv => Err(RevarError::Config {
            field: "method".into(),
            message: format!("`{}` is not a baseline", cfg.method.as_str()),
        }),
        _ => train(splits, cfg),
    }
}

/// Runs the configured method, optionally continuing from given parameters.
///
/// Warm start trains the predictor with unit weights. Afterwards, every
/// `meta_interval`-th step first updates the weighting network with the
/// unrolled hypergradient, then the predictor takes a weighted step
/// (momentum and weight decay on both networks).
pub fn train_from(
    splits: &Splits,
    cfg: &TrainConfig,
    initial: Option<(NetParams, Option<MetaNet>)>,
) -> Result<TrainedPair> {
    cfg.validate()?;
    splits.validate()?;
    let method = cfg.method;
    if method == Method::RevarPv && splits.unlabeled.as_ref().is_none_or(|u| u.rows() == 0) {
        return Err(RevarError::Validation(
            "revar_pv needs unlabeled inputs".into(),
        ));
    }
    if method == Method::Mbr && !matches!(splits.task, Task::Classification { .. }) {
        return Err(RevarError::Unsupported(
            "margin-based reweighting needs a classifier".into(),
        ));
    }
    let dim = splits.train.dim();
    let (mut theta, mut meta) = match initial {
        Some((theta, meta)) => (theta, meta),
        None => (init_classifier(splits.task, dim, cfg)?, init_meta(method, dim, cfg)?),
    };
    if theta.input_dim() != dim {
        return Err(RevarError::Dimension {
            context: "predictor input",
            expected: dim,
            got: theta.input_dim(),
        });
    }
    if method.uses_meta() && meta.is_none() {
        return Err(RevarError::Validation(format!(
            "method `{}` needs a weighting network",
            method.as_str()
        )));
    }

    let root = Rng::new(cfg.seed);
    let mut shuffle_rng = root.derive(streams::SHUFFLE);
    let mut val_cycle = ValCycler::new(splits.val.len(), root.derive(streams::VAL_BATCHES));
    let mut meta_mask_rng = root.derive(streams::META_MASKS);
    let mut train_mask_rng = root.derive(streams::TRAIN_MASKS);
    let history_rng = root.derive(streams::HISTORY);

    let mut opt_theta = Sgd::new(theta.n_params(), cfg.lr_classifier, cfg.momentum, cfg.weight_decay);
    let mut opt_meta = meta
        .as_ref()
        .map(|m| Sgd::new(m.n_params(), cfg.lr_meta, cfg.momentum, cfg.weight_decay));
    let meta_reg = method.meta_reg_weight(&cfg.mc);
    let unlabeled = match method {
        Method::RevarPv => splits.unlabeled.as_ref(),
        _ => None,
    };
    let history_mc = McConfig {
        reg_weight: meta_reg,
        ..cfg.mc
    };
    let history_val = splits
        .val
        .subset(&(0..splits.val.len().min(cfg.batch_val)).collect::<Vec<_>>());

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step: usize = 1;
    for epoch in 0..cfg.epochs {
        let warm = epoch < cfg.warm_start_epochs;
        let order = shuffle_rng.permutation(splits.train.len());
        let mut epoch_losses = Vec::new();
        let mut epoch_weights = Vec::with_capacity(splits.train.len());
        for chunk in order.chunks(cfg.batch_train) {
            let batch = splits.train.subset(chunk);

            if !warm && step.is_multiple_of(cfg.meta_interval) {
                if let (Some(m), Some(opt)) = (meta.as_mut(), opt_meta.as_mut()) {
                    let vb = splits.val.subset(&val_cycle.next(cfg.batch_val));
                    let objective =
                        MetaObjective::sample(&theta, &vb, unlabeled, &cfg.mc, meta_reg, &mut meta_mask_rng);
                    let inner = InnerStep {
                        lr: cfg.lr_classifier,
                        normalize: cfg.normalize_weights,
                    };
                    let mg = hypergrad::meta_gradient_with(&theta, &batch, &objective, m, inner)?;
                    if !mg.meta_loss.is_finite() || mg.grad.iter().any(|g| !g.is_finite()) {
                        return Err(RevarError::Divergence {
                            epoch,
                            step,
                            detail: "non-finite meta-gradient".into(),
                        });
                    }
                    let mut grad = mg.grad;
                    if let Some(clip) = cfg.meta_grad_clip {
                        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                        if norm > clip {
                            let scale = clip / norm;
                            grad.iter_mut().for_each(|g| *g *= scale);
                        }
                    }
                    opt.step(m.net.params_mut(), &grad);
                }
            }

            let raw = if warm {
                vec![1.0; batch.len()]
            } else {
                batch_weights(method, &theta, meta.as_ref(), &batch, cfg.mbr_temperature)?
            };
            let weights = if cfg.normalize_weights && method.uses_meta() && !warm {
                hypergrad::normalize_weights(&raw)
            } else {
                raw.clone()
            };
            let (mut grad, losses) = hypergrad::weighted_batch_grad(&theta, &batch, &weights)?;
            if method == Method::Vr && !warm {
                add_variance_grad(&theta, &batch, cfg, &mut train_mask_rng, &mut grad)?;
            }
            if losses.iter().any(|l| !l.is_finite()) || grad.iter().any(|g| !g.is_finite()) {
                return Err(RevarError::Divergence {
                    epoch,
                    step,
                    detail: "non-finite training loss".into(),
                });
            }
            opt_theta.step(theta.params_mut(), &grad);
            epoch_losses.push(mean(&losses));
            epoch_weights.extend_from_slice(&raw);
            step += 1;
        }
        if theta.params().iter().any(|p| !p.is_finite()) {
            return Err(RevarError::Divergence {
                epoch,
                step,
                detail: "non-finite predictor parameters".into(),
            });
        }
        let mut hrng = history_rng.derive(epoch as u64);
        let meta_loss = mcvar::meta_loss(&theta, &history_val, &history_mc, &mut hrng)?;
        history.push(EpochRecord {
            epoch,
            train_loss: mean(&epoch_losses),
            meta_loss,
            weight_mean: mean(&epoch_weights),
            weight_sd: std_dev(&epoch_weights),
        });
    }

    Ok(TrainedPair {
        method,
        classifier: theta,
        meta,
        history,
    })
}

/// Per-row loss weights applied by `method` after warm start.
pub fn batch_weights(
    method: Method,
    theta: &NetParams,
    meta: Option<&MetaNet>,
    batch: &Dataset,
    temperature: f64,
) -> Result<Vec<f64>> {
    match method {
        Method::Erm | Method::Vr => Ok(vec![1.0; batch.len()]),
        Method::Mbr => margin_weights(theta, batch, temperature),
        _ => {
            let meta = meta.ok_or_else(|| RevarError::Validation("missing weighting network".into()))?;
            hypergrad::instance_weights(meta, theta, batch)
        }
    }
}

/// `exp(−margin/τ)` rescaled to mean one, where the margin is the true-class
/// probability minus the largest other probability.
pub fn margin_weights(theta: &NetParams, batch: &Dataset, temperature: f64) -> Result<Vec<f64>> {
    let mut w = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let p = nets::forward(theta, batch.x.row(i), None)?;
        let y = batch.y[i];
        if !(y >= 0.0) || y.fract() != 0.0 || y as usize >= p.len() {
            return Err(RevarError::param(format!("class label {y} out of range")));
        }
        let c = y as usize;
        let other = p
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != c)
            .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
        w.push((-(p[c] - other) / temperature).exp());
    }
    let total: f64 = w.iter().sum();
    let n = w.len() as f64;
    Ok(w.into_iter().map(|v| v * n / total).collect())
}

fn add_variance_grad(
    theta: &NetParams,
    batch: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
    grad: &mut [f64],
) -> Result<()> {
    if cfg.mc.reg_weight == 0.0 {
        return Ok(());
    }
    let masks = mcvar::sample_batch_masks(theta, batch.len(), &cfg.mc, rng);
    let scale = cfg.mc.reg_weight / batch.len() as f64;
    let rows = par::map(batch.len(), |i| mcvar::dropout_variance_grad(theta, batch.x.row(i), &masks[i]));
    for r in rows {
        let (_, g) = r?;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += scale * b;
        }
    }
    Ok(())
}
