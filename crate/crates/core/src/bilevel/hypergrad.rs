//! One-step unrolled hypergradient of the meta-loss w.r.t. the weighting
//! network.
//!
//! With `θ̂(Θ) = θ − (β/n) Σ_i w_i ∇l_i(θ)` and `w_i = g_Θ(u_i)` the chain
//! rule gives
//!
//! ```text
//! ∇_Θ M(θ̂) = −(β/n) Σ_i ⟨∇M(θ̂), ∇l_i(θ)⟩ · ∇_Θ g_Θ(u_i)
//! ```
//!
//! which is exact for the one-step objective because `θ` and the inputs
//! `u_i` (features, or the detached loss for MWN) do not depend on `Θ`.
//! With batch normalisation the step uses `ŵ_i = n·w_i / Σ_j w_j` instead
//! and the coefficient of `∇_Θ g_Θ(u_k)` becomes
//! `(n/S)·(c_k − Σ_i c_i w_i / S)` with `c_i = −(β/n)⟨∇M, ∇l_i⟩`.
//! [`meta_gradient_fd`] differentiates the same objective numerically.

use crate::data::Dataset;
use crate::error::{Result, RevarError};
use crate::mcvar::{self, McConfig};
use crate::metanet::{self, Conditioning, MetaNet};
use crate::nets::{self, DropoutMask, NetParams};
use crate::numkit::{dot, Matrix, Rng};
use crate::par;

/// Validation-side objective with its dropout masks frozen.
#[derive(Debug, Clone)]
pub struct MetaObjective<'a> {
    pub val: &'a Dataset,
    pub val_masks: Vec<Vec<DropoutMask>>,
    /// Unlabeled inputs whose variance is pooled into the objective.
    pub unlabeled: Option<&'a Matrix>,
    pub unlabeled_masks: Vec<Vec<DropoutMask>>,
    pub reg_weight: f64,
}

impl<'a> MetaObjective<'a> {
    /// Draws masks for every validation (then unlabeled) row. No masks are
    /// drawn when `reg_weight` is zero.
    pub fn sample(
        net: &NetParams,
        val: &'a Dataset,
        unlabeled: Option<&'a Matrix>,
        mc: &McConfig,
        reg_weight: f64,
        rng: &mut Rng,
    ) -> Self {
        let active = reg_weight > 0.0;
        let val_masks = if active {
            mcvar::sample_batch_masks(net, val.len(), mc, rng)
        } else {
            Vec::new()
        };
        let unlabeled_masks = match unlabeled {
            Some(u) if active => mcvar::sample_batch_masks(net, u.rows(), mc, rng),
            _ => Vec::new(),
        };
        MetaObjective {
            val,
            val_masks,
            unlabeled,
            unlabeled_masks,
            reg_weight,
        }
    }

    pub fn value(&self, net: &NetParams) -> Result<f64> {
        match self.unlabeled {
            Some(u) => mcvar::meta_loss_pv_with_masks(
                net,
                self.val,
                u,
                &self.val_masks,
                &self.unlabeled_masks,
                self.reg_weight,
            ),
            None => mcvar::meta_loss_with_masks(net, self.val, &self.val_masks, self.reg_weight),
        }
    }

    pub fn value_grad(&self, net: &NetParams) -> Result<(f64, Vec<f64>)> {
        match self.unlabeled {
            Some(u) => mcvar::meta_loss_pv_grad_with_masks(
                net,
                self.val,
                u,
                &self.val_masks,
                &self.unlabeled_masks,
                self.reg_weight,
            ),
            None => mcvar::meta_loss_grad_with_masks(net, self.val, &self.val_masks, self.reg_weight),
        }
    }
}

/// Inputs fed to the weighting network for each row of `batch`.
pub fn meta_inputs(meta: &MetaNet, theta: &NetParams, batch: &Dataset) -> Result<Vec<Vec<f64>>> {
    match meta.conditioning {
        Conditioning::Instance => Ok(batch.x.iter_rows().map(|r| r.to_vec()).collect()),
        Conditioning::LossScalar => (0..batch.len())
            .map(|i| Ok(vec![nets::loss(theta, batch.x.row(i), batch.y[i])?]))
            .collect(),
    }
}

pub fn instance_weights(meta: &MetaNet, theta: &NetParams, batch: &Dataset) -> Result<Vec<f64>> {
    let inputs = meta_inputs(meta, theta, batch)?;
    par::map(inputs.len(), |i| metanet::weight_of(meta, &inputs[i]))
        .into_iter()
        .collect()
}

/// Gradient of `(1/n) Σ_i w_i · l_i` and the per-row losses.
///
/// Per-row gradients are summed in row order, so the result does not
/// depend on how the rows were distributed over workers.
pub fn weighted_batch_grad(theta: &NetParams, batch: &Dataset, weights: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if batch.is_empty() {
        return Err(RevarError::param("empty training batch"));
    }
    if weights.len() != batch.len() {
        return Err(RevarError::Dimension {
            context: "batch weights",
            expected: batch.len(),
            got: weights.len(),
        });
    }
    let n = batch.len() as f64;
    let rows = par::map(batch.len(), |i| {
        nets::loss_grad(theta, batch.x.row(i), batch.y[i], weights[i] / n)
    });
    let mut grad = vec![0.0; theta.n_params()];
    let mut losses = Vec::with_capacity(batch.len());
    for r in rows {
        let (l, g) = r?;
        losses.push(l);
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((grad, losses))
}

/// The unrolled step: learning rate and whether weights are rescaled to
/// mean one within the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerStep {
    pub lr: f64,
    pub normalize: bool,
}

impl InnerStep {
    pub fn plain(lr: f64) -> Self {
        InnerStep { lr, normalize: false }
    }

    pub fn normalized(lr: f64) -> Self {
        InnerStep { lr, normalize: true }
    }
}

/// `w · n / Σw`; returned unchanged when the weights sum to zero.
pub fn normalize_weights(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return weights.to_vec();
    }
    let n = weights.len() as f64;
    weights.iter().map(|w| w * n / total).collect()
}

/// One weighted SGD step on a copy of `theta` (no momentum, no decay).
pub fn inner_step(theta: &NetParams, batch: &Dataset, meta: &MetaNet, step: InnerStep) -> Result<NetParams> {
    let mut weights = instance_weights(meta, theta, batch)?;
    if step.normalize {
        weights = normalize_weights(&weights);
    }
    inner_step_with_weights(theta, batch, &weights, step.lr)
}

pub fn inner_step_with_weights(theta: &NetParams, batch: &Dataset, weights: &[f64], lr: f64) -> Result<NetParams> {
    let (grad, _) = weighted_batch_grad(theta, batch, weights)?;
    let mut out = theta.clone();
    for (p, g) in out.params_mut().iter_mut().zip(&grad) {
        *p -= lr * g;
    }
    Ok(out)
}

/// Result of one hypergradient evaluation.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub grad: Vec<f64>,
    /// Meta-loss at the unrolled parameters.
    pub meta_loss: f64,
    /// `⟨∇M(θ̂), ∇l_i(θ)⟩` per training row.
    pub alignments: Vec<f64>,
}

/// Analytic hypergradient for frozen masks.
pub fn meta_gradient_with(
    theta: &NetParams,
    batch_train: &Dataset,
    objective: &MetaObjective<'_>,
    meta: &MetaNet,
    step: InnerStep,
) -> Result<MetaGradient> {
    if batch_train.is_empty() || objective.val.is_empty() {
        return Err(RevarError::param("meta-gradient needs non-empty batches"));
    }
    let inputs = meta_inputs(meta, theta, batch_train)?;
    let weights = par::map(inputs.len(), |i| metanet::weight_of(meta, &inputs[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = weights.iter().sum();
    let normalize = step.normalize && total != 0.0;
    let applied = if normalize { normalize_weights(&weights) } else { weights.clone() };
    let theta_hat = inner_step_with_weights(theta, batch_train, &applied, step.lr)?;
    let (meta_loss, val_grad) = objective.value_grad(&theta_hat)?;
    let n = batch_train.len() as f64;
    let per_row = par::map(batch_train.len(), |i| -> Result<(f64, Vec<f64>)> {
        let g_i = nets::grad(theta, batch_train.x.row(i), batch_train.y[i], 1.0)?;
        let a_i = dot(&val_grad, &g_i);
        let dg = metanet::grad_weight(meta, &inputs[i])?;
        Ok((a_i, dg))
    });
    let per_row = per_row.into_iter().collect::<Result<Vec<_>>>()?;
    let alignments: Vec<f64> = per_row.iter().map(|r| r.0).collect();
    // d M / d w_k, before the chain through g
    let mut coef: Vec<f64> = alignments.iter().map(|a| -step.lr / n * a).collect();
    if normalize {
        let mean_c = coef.iter().zip(&weights).map(|(c, w)| c * w).sum::<f64>() / total;
        coef.iter_mut().for_each(|c| *c = n / total * (*c - mean_c));
    }
    let mut grad = vec![0.0; meta.n_params()];
    for ((_, dg), c) in per_row.iter().zip(&coef) {
        for (acc, d) in grad.iter_mut().zip(dg) {
            *acc += c * d;
        }
    }
    Ok(MetaGradient {
        grad,
        meta_loss,
        alignments,
    })
}

/// Hypergradient with masks drawn from `rng` at the configured dropout
/// rate and variance weight.
pub fn meta_gradient(
    theta: &NetParams,
    batch_train: &Dataset,
    batch_val: &Dataset,
    meta: &MetaNet,
    step: InnerStep,
    mc: &McConfig,
    reg_weight: f64,
    rng: &mut Rng,
) -> Result<MetaGradient> {
    let objective = MetaObjective::sample(theta, batch_val, None, mc, reg_weight, rng);
    meta_gradient_with(theta, batch_train, &objective, meta, step)
}

/// Central-difference gradient of `Θ ↦ M(inner_step(θ, batch, g_Θ))` over
/// the listed coordinates of `Θ` (all of them when `coords` is `None`).
pub fn meta_gradient_fd(
    theta: &NetParams,
    batch_train: &Dataset,
    objective: &MetaObjective<'_>,
    meta: &MetaNet,
    inner: InnerStep,
    step: f64,
    coords: Option<&[usize]>,
) -> Result<Vec<f64>> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(RevarError::param(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..meta.n_params()).collect();
            &all
        }
    };
    let eval = |k: usize, delta: f64| -> Result<f64> {
        let mut m = meta.clone();
        m.net.params_mut()[k] += delta;
        let theta_hat = inner_step(theta, batch_train, &m, inner)?;
        objective.value(&theta_hat)
    };
    coords
        .iter()
        .map(|&k| {
            if k >= meta.n_params() {
                return Err(RevarError::param(format!("coordinate {k} out of range")));
            }
            Ok((eval(k, step)? - eval(k, -step)?) / (2.0 * step))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, OutputKind};

    fn toy(seed: u64, classify: bool) -> (NetParams, MetaNet, Dataset, Dataset) {
        let mut rng = Rng::new(seed);
        let (out, kind) = if classify { (3, OutputKind::Softmax) } else { (1, OutputKind::Linear) };
        let mut theta = NetParams::new(&[3, 4, out], Activation::Tanh, kind, 0.3, &mut rng).unwrap();
        for p in theta.params_mut() {
            *p += rng.normal(0.0, 0.2);
        }
        let mut meta = MetaNet::new(3, &[3], Conditioning::Instance, &mut rng).unwrap();
        for p in meta.net.params_mut() {
            *p += rng.normal(0.0, 0.5);
        }
        let mk = |rng: &mut Rng, n: usize| {
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.normal(0.0, 1.0)).collect()).collect();
            let y = (0..n)
                .map(|_| if classify { rng.index(3) as f64 } else { rng.normal(0.0, 1.0) })
                .collect();
            Dataset::new(Matrix::from_rows(&rows).unwrap(), y).unwrap()
        };
        let train = mk(&mut rng, 6);
        let val = mk(&mut rng, 5);
        (theta, meta, train, val)
    }

    #[test]
    fn inner_step_reductions() {
        let (theta, mut meta, train, _) = toy(1, true);
        assert_eq!(inner_step(&theta, &train, &meta, InnerStep::plain(0.0)).unwrap(), theta);

        let ones = vec![1.0; train.len()];
        let erm = inner_step_with_weights(&theta, &train, &ones, 0.3).unwrap();
        let (g, _) = weighted_batch_grad(&theta, &train, &ones).unwrap();
        for ((a, p), gi) in erm.params().iter().zip(theta.params()).zip(&g) {
            assert_eq!(*a, p - 0.3 * gi);
        }

        // saturate the head so every weight is exactly 0 in floating point
        let last = meta.net.n_layers() - 1;
        let (wr, br) = meta.net.layer_ranges(last);
        meta.net.params_mut()[wr].iter_mut().for_each(|p| *p = 0.0);
        meta.net.params_mut()[br.start] = -800.0;
        assert_eq!(inner_step(&theta, &train, &meta, InnerStep::plain(0.3)).unwrap(), theta);
    }

    #[test]
    fn normalized_step_uses_mean_one_weights() {
        let (theta, meta, train, _) = toy(6, false);
        let w = instance_weights(&meta, &theta, &train).unwrap();
        let scaled: Vec<f64> = w.iter().map(|v| v * 3.0).collect();
        assert_eq!(normalize_weights(&w).iter().sum::<f64>().round(), train.len() as f64);
        let a = inner_step(&theta, &train, &meta, InnerStep::normalized(0.2)).unwrap();
        let b = inner_step_with_weights(&theta, &train, &normalize_weights(&scaled), 0.2).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!((x - y).abs() < 1e-14);
        }
        assert_eq!(normalize_weights(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn analytic_matches_finite_differences() {
        for (seed, classify, normalize) in [(2, true, false), (3, false, false), (4, true, true), (7, false, true)] {
            let (theta, meta, train, val) = toy(seed, classify);
            let mc = McConfig { k_samples: 3, dropout_rate: 0.3, reg_weight: 0.8 };
            let mut rng = Rng::new(seed + 100);
            let obj = MetaObjective::sample(&theta, &val, None, &mc, mc.reg_weight, &mut rng);
            let step = InnerStep { lr: 0.5, normalize };
            let analytic = meta_gradient_with(&theta, &train, &obj, &meta, step).unwrap().grad;
            let fd = meta_gradient_fd(&theta, &train, &obj, &meta, step, 1e-5, None).unwrap();
            let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = analytic.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-6 * scale, "seed {seed}: err {err} scale {scale}");
        }
    }

    #[test]
    fn fd_edge_cases() {
        let (theta, meta, train, val) = toy(5, true);
        let obj = MetaObjective::sample(&theta, &val, None, &McConfig::default(), 0.0, &mut Rng::new(1));
        let step = InnerStep::plain(0.1);
        assert!(meta_gradient_fd(&theta, &train, &obj, &meta, step, 0.0, None).is_err());
        assert!(meta_gradient_fd(&theta, &train, &obj, &meta, step, 1e-4, Some(&[])).unwrap().is_empty());
    }
}
