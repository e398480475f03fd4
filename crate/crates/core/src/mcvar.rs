//! Monte-Carlo dropout: predictive samples, the dropout-variance
//! regularizer, the validation meta-loss built on it, and the MCD entropy
//! score used as a selection baseline.
//!
//! Every stochastic function has a `*_with_masks` twin taking the masks
//! explicitly; the random versions draw all masks from `rng` first (in
//! example order, then sample order) and then evaluate, so the two agree
//! exactly when handed the same masks.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, RevarError};
use crate::nets::{self, DropoutMask, NetParams, OutputKind};
use crate::numkit::{Matrix, Rng};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub k_samples: usize,
    pub dropout_rate: f64,
    /// Multiplier of the variance term in the meta-loss.
    pub reg_weight: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            k_samples: 10,
            dropout_rate: 0.2,
            reg_weight: 1.0,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_samples < 2 {
            return Err(RevarError::Config {
                field: "mc.k_samples".into(),
                message: format!("must be at least 2, got {}", self.k_samples),
            });
        }
        if !(self.dropout_rate > 0.0 && self.dropout_rate < 1.0) {
            return Err(RevarError::Config {
                field: "mc.dropout_rate".into(),
                message: format!("must lie in (0, 1), got {}", self.dropout_rate),
            });
        }
        if !(self.reg_weight >= 0.0) || !self.reg_weight.is_finite() {
            return Err(RevarError::Config {
                field: "mc.reg_weight".into(),
                message: format!("must be finite and non-negative, got {}", self.reg_weight),
            });
        }
        Ok(())
    }
}

/// `k` independent masks at the configured dropout rate.
pub fn sample_masks(net: &NetParams, cfg: &McConfig, rng: &mut Rng) -> Vec<DropoutMask> {
    (0..cfg.k_samples)
        .map(|_| nets::sample_mask_with_rate(net, cfg.dropout_rate, rng))
        .collect()
}

/// One mask set per row of a batch.
pub fn sample_batch_masks(
    net: &NetParams,
    rows: usize,
    cfg: &McConfig,
    rng: &mut Rng,
) -> Vec<Vec<DropoutMask>> {
    (0..rows).map(|_| sample_masks(net, cfg, rng)).collect()
}

pub fn mc_outputs(net: &NetParams, x: &[f64], cfg: &McConfig, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let masks = sample_masks(net, cfg, rng);
    mc_outputs_with_masks(net, x, &masks)
}

pub fn mc_outputs_with_masks(net: &NetParams, x: &[f64], masks: &[DropoutMask]) -> Result<Vec<Vec<f64>>> {
    masks.iter().map(|m| nets::forward(net, x, Some(m))).collect()
}

/// `(1/K) Σ_k ‖o_k − ō‖²` over a list of outputs.
pub fn sample_variance(outputs: &[Vec<f64>]) -> f64 {
    let k = outputs.len();
    if k == 0 {
        return 0.0;
    }
    let dim = outputs[0].len();
    let mut centre = vec![0.0; dim];
    for o in outputs {
        for (c, v) in centre.iter_mut().zip(o) {
            *c += v;
        }
    }
    centre.iter_mut().for_each(|c| *c /= k as f64);
    outputs
        .iter()
        .map(|o| o.iter().zip(&centre).map(|(v, c)| (v - c).powi(2)).sum::<f64>())
        .sum::<f64>()
        / k as f64
}

pub fn dropout_variance(net: &NetParams, x: &[f64], cfg: &McConfig, rng: &mut Rng) -> Result<f64> {
    Ok(sample_variance(&mc_outputs(net, x, cfg, rng)?))
}

pub fn dropout_variance_with_masks(net: &NetParams, x: &[f64], masks: &[DropoutMask]) -> Result<f64> {
    Ok(sample_variance(&mc_outputs_with_masks(net, x, masks)?))
}

/// Variance and its exact gradient w.r.t. the parameters, masks held fixed.
pub fn dropout_variance_grad(net: &NetParams, x: &[f64], masks: &[DropoutMask]) -> Result<(f64, Vec<f64>)> {
    let outputs = mc_outputs_with_masks(net, x, masks)?;
    let value = sample_variance(&outputs);
    let k = outputs.len() as f64;
    let dim = net.output_dim();
    let mut centre = vec![0.0; dim];
    for o in &outputs {
        for (c, v) in centre.iter_mut().zip(o) {
            *c += v;
        }
    }
    centre.iter_mut().for_each(|c| *c /= k);
    let mut grad = vec![0.0; net.n_params()];
    // dV/do_k = (2/K)(o_k − ō); the ō-dependence cancels because Σ_k (o_k − ō) = 0
    for (o, m) in outputs.iter().zip(masks) {
        let up: Vec<f64> = o.iter().zip(&centre).map(|(v, c)| 2.0 * (v - c) / k).collect();
        let g = nets::vjp_output(net, x, Some(m), &up)?;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((value, grad))
}

/// Mean over the batch of `loss + reg_weight · dropout_variance`.
pub fn meta_loss(net: &NetParams, val: &Dataset, cfg: &McConfig, rng: &mut Rng) -> Result<f64> {
    cfg.validate()?;
    let masks = sample_batch_masks(net, val.len(), cfg, rng);
    meta_loss_with_masks(net, val, &masks, cfg.reg_weight)
}

pub fn meta_loss_with_masks(
    net: &NetParams,
    val: &Dataset,
    masks: &[Vec<DropoutMask>],
    reg_weight: f64,
) -> Result<f64> {
    Ok(labeled_terms(net, val, masks, reg_weight, false)?.0)
}

/// Meta-loss and its gradient w.r.t. the parameters, masks held fixed.
pub fn meta_loss_grad_with_masks(
    net: &NetParams,
    val: &Dataset,
    masks: &[Vec<DropoutMask>],
    reg_weight: f64,
) -> Result<(f64, Vec<f64>)> {
    let (v, g) = labeled_terms(net, val, masks, reg_weight, true)?;
    Ok((v, g.unwrap()))
}

fn labeled_terms(
    net: &NetParams,
    val: &Dataset,
    masks: &[Vec<DropoutMask>],
    reg_weight: f64,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if val.is_empty() {
        return Err(RevarError::param("meta-loss needs a non-empty labeled batch"));
    }
    if reg_weight > 0.0 && masks.len() != val.len() {
        return Err(RevarError::Dimension {
            context: "meta-loss masks",
            expected: val.len(),
            got: masks.len(),
        });
    }
    let m = val.len() as f64;
    let per_row = par::map(val.len(), |j| -> Result<(f64, Option<Vec<f64>>)> {
        let x = val.x.row(j);
        let y = val.y[j];
        let l = nets::loss(net, x, y)?;
        if !with_grad {
            let v = if reg_weight > 0.0 {
                dropout_variance_with_masks(net, x, &masks[j])?
            } else {
                0.0
            };
            return Ok((l + reg_weight * v, None));
        }
        let mut g = nets::grad(net, x, y, 1.0 / m)?;
        let mut value = l;
        if reg_weight > 0.0 {
            let (v, gv) = dropout_variance_grad(net, x, &masks[j])?;
            value += reg_weight * v;
            let s = reg_weight / m;
            for (a, b) in g.iter_mut().zip(&gv) {
                *a += s * b;
            }
        }
        Ok((value, Some(g)))
    });
    reduce(per_row, m, net.n_params(), with_grad)
}

fn variance_terms(
    net: &NetParams,
    x: &Matrix,
    masks: &[Vec<DropoutMask>],
    reg_weight: f64,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let m = x.rows() as f64;
    let per_row = par::map(x.rows(), |j| -> Result<(f64, Option<Vec<f64>>)> {
        if with_grad {
            let (v, mut g) = dropout_variance_grad(net, x.row(j), &masks[j])?;
            let s = reg_weight / m;
            g.iter_mut().for_each(|a| *a *= s);
            Ok((reg_weight * v, Some(g)))
        } else {
            Ok((reg_weight * dropout_variance_with_masks(net, x.row(j), &masks[j])?, None))
        }
    });
    reduce(per_row, m, net.n_params(), with_grad)
}

fn reduce(
    per_row: Vec<Result<(f64, Option<Vec<f64>>)>>,
    count: f64,
    n_params: usize,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let mut total = 0.0;
    let mut grad = with_grad.then(|| vec![0.0; n_params]);
    for r in per_row {
        let (v, g) = r?;
        total += v;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
    Ok((total / count, grad))
}

/// Pooled objective: the labeled meta-loss average plus the average
/// variance term over unlabeled inputs, the two averages weighted equally.
/// With no unlabeled rows this equals [`meta_loss`]. An empty labeled set
/// is only accepted when the unlabeled variance term is active.
pub fn meta_loss_pv(
    net: &NetParams,
    labeled: &Dataset,
    unlabeled: &Matrix,
    cfg: &McConfig,
    rng: &mut Rng,
) -> Result<f64> {
    cfg.validate()?;
    let lab_masks = sample_batch_masks(net, labeled.len(), cfg, rng);
    let unl_masks = sample_batch_masks(net, unlabeled.rows(), cfg, rng);
    meta_loss_pv_with_masks(net, labeled, unlabeled, &lab_masks, &unl_masks, cfg.reg_weight)
}

pub fn meta_loss_pv_with_masks(
    net: &NetParams,
    labeled: &Dataset,
    unlabeled: &Matrix,
    labeled_masks: &[Vec<DropoutMask>],
    unlabeled_masks: &[Vec<DropoutMask>],
    reg_weight: f64,
) -> Result<f64> {
    Ok(pv_terms(net, labeled, unlabeled, labeled_masks, unlabeled_masks, reg_weight, false)?.0)
}

pub fn meta_loss_pv_grad_with_masks(
    net: &NetParams,
    labeled: &Dataset,
    unlabeled: &Matrix,
    labeled_masks: &[Vec<DropoutMask>],
    unlabeled_masks: &[Vec<DropoutMask>],
    reg_weight: f64,
) -> Result<(f64, Vec<f64>)> {
    let (v, g) = pv_terms(net, labeled, unlabeled, labeled_masks, unlabeled_masks, reg_weight, true)?;
    Ok((v, g.unwrap()))
}

fn pv_terms(
    net: &NetParams,
    labeled: &Dataset,
    unlabeled: &Matrix,
    labeled_masks: &[Vec<DropoutMask>],
    unlabeled_masks: &[Vec<DropoutMask>],
    reg_weight: f64,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let unlabeled_active = unlabeled.rows() > 0 && reg_weight > 0.0;
    if labeled.is_empty() && !unlabeled_active {
        return Err(RevarError::param(
            "pooled meta-loss needs labeled rows or an active unlabeled variance term",
        ));
    }
    if unlabeled_active && unlabeled_masks.len() != unlabeled.rows() {
        return Err(RevarError::Dimension {
            context: "pooled meta-loss unlabeled masks",
            expected: unlabeled.rows(),
            got: unlabeled_masks.len(),
        });
    }
    let (mut value, mut grad) = if labeled.is_empty() {
        (0.0, with_grad.then(|| vec![0.0; net.n_params()]))
    } else {
        labeled_terms(net, labeled, labeled_masks, reg_weight, with_grad)?
    };
    if unlabeled_active {
        let (v, g) = variance_terms(net, unlabeled, unlabeled_masks, reg_weight, with_grad)?;
        value += v;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
    Ok((value, grad))
}

/// Entropy of the K-averaged predictive distribution (higher means more
/// uncertain). Classifiers only.
pub fn mcd_score(net: &NetParams, x: &[f64], cfg: &McConfig, rng: &mut Rng) -> Result<f64> {
    if net.output_kind() != OutputKind::Softmax {
        return Err(RevarError::Unsupported(
            "MCD entropy score is only defined for softmax classifiers".into(),
        ));
    }
    cfg.validate()?;
    let masks = sample_masks(net, cfg, rng);
    mcd_score_with_masks(net, x, &masks)
}

pub fn mcd_score_with_masks(net: &NetParams, x: &[f64], masks: &[DropoutMask]) -> Result<f64> {
    if net.output_kind() != OutputKind::Softmax {
        return Err(RevarError::Unsupported(
            "MCD entropy score is only defined for softmax classifiers".into(),
        ));
    }
    let outputs = mc_outputs_with_masks(net, x, masks)?;
    let k = outputs.len() as f64;
    let mut avg = vec![0.0; net.output_dim()];
    for o in &outputs {
        for (a, v) in avg.iter_mut().zip(o) {
            *a += v / k;
        }
    }
    Ok(entropy(&avg))
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Activation;

    /// f(x) = θ · m · x through one relu unit with unit input weight.
    fn one_param_model(theta: f64) -> NetParams {
        let mut net = NetParams::zeros(&[1, 1, 1], Activation::Relu, OutputKind::Linear, 0.5).unwrap();
        net.set_params(&[1.0, 0.0, theta, 0.0]).unwrap();
        net
    }

    fn mask(keep: bool) -> DropoutMask {
        DropoutMask {
            layers: vec![vec![keep]],
        }
    }

    #[test]
    fn config_validation() {
        assert!(McConfig::default().validate().is_ok());
        for bad in [
            McConfig { k_samples: 1, ..McConfig::default() },
            McConfig { dropout_rate: 0.0, ..McConfig::default() },
            McConfig { reg_weight: -1.0, ..McConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn enumerated_masks() {
        let net = one_param_model(1.5);
        let outs = mc_outputs_with_masks(&net, &[2.0], &[mask(false), mask(true)]).unwrap();
        assert_eq!(outs, vec![vec![0.0], vec![3.0]]);
        let ones = vec![DropoutMask::ones(&net); 5];
        let same = mc_outputs_with_masks(&net, &[2.0], &ones).unwrap();
        assert!(same.iter().all(|o| o == &same[0]));
        assert_eq!(dropout_variance_with_masks(&net, &[2.0], &ones).unwrap(), 0.0);
    }

    #[test]
    fn variance_arithmetic() {
        assert_eq!(sample_variance(&[vec![1.0], vec![3.0]]), 1.0);
        assert_eq!(sample_variance(&vec![vec![2.0, 1.0]; 4]), 0.0);
    }

    #[test]
    fn deterministic_under_seed() {
        let mut rng = Rng::new(3);
        let net = NetParams::new(&[3, 8, 2], Activation::Relu, OutputKind::Softmax, 0.2, &mut rng).unwrap();
        let cfg = McConfig::default();
        let a = mc_outputs(&net, &[0.1, 0.2, 0.3], &cfg, &mut Rng::new(5)).unwrap();
        let b = mc_outputs(&net, &[0.1, 0.2, 0.3], &cfg, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        let s1 = mcd_score(&net, &[0.1, 0.2, 0.3], &cfg, &mut Rng::new(6)).unwrap();
        let s2 = mcd_score(&net, &[0.1, 0.2, 0.3], &cfg, &mut Rng::new(6)).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn meta_loss_hand_batch() {
        // two items, K = 2, masks enumerated by hand
        let net = one_param_model(2.0);
        let val = Dataset::new(Matrix::from_rows(&[[1.0], [3.0]]).unwrap(), vec![1.0, 5.0]).unwrap();
        let masks = vec![vec![mask(true), mask(false)], vec![mask(true), mask(true)]];
        // item 0: f = 2, loss ½(2−1)² = 0.5; outputs {2, 0} → variance 1
        // item 1: f = 6, loss ½(6−5)² = 0.5; outputs {6, 6} → variance 0
        let gamma = 0.75;
        let expected = ((0.5 + gamma * 1.0) + (0.5 + gamma * 0.0)) / 2.0;
        let got = meta_loss_with_masks(&net, &val, &masks, gamma).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert_eq!(meta_loss_with_masks(&net, &val, &masks, 0.0).unwrap(), 0.5);
    }

    #[test]
    fn perfect_regressor_with_identity_masks() {
        let net = one_param_model(2.0);
        let val = Dataset::new(Matrix::from_rows(&[[1.0], [3.0]]).unwrap(), vec![2.0, 6.0]).unwrap();
        let ones = vec![vec![DropoutMask::ones(&net); 3]; 2];
        assert_eq!(meta_loss_with_masks(&net, &val, &ones, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn meta_loss_gradient_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let mut net = NetParams::new(&[3, 5, 3], Activation::Tanh, OutputKind::Softmax, 0.3, &mut rng).unwrap();
        for p in net.params_mut() {
            *p += rng.normal(0.0, 0.2);
        }
        let x = Matrix::from_rows(&[[0.3, -1.0, 0.4], [1.1, 0.2, -0.6], [0.0, 0.5, 0.9]]).unwrap();
        let val = Dataset::new(x.clone(), vec![0.0, 2.0, 1.0]).unwrap();
        let cfg = McConfig { k_samples: 4, dropout_rate: 0.4, reg_weight: 1.7 };
        let masks = sample_batch_masks(&net, 3, &cfg, &mut rng);
        let (_, g) = meta_loss_grad_with_masks(&net, &val, &masks, cfg.reg_weight).unwrap();
        let umasks = sample_batch_masks(&net, 3, &cfg, &mut rng);
        let (_, gpv) = meta_loss_pv_grad_with_masks(&net, &val, &x, &masks, &umasks, cfg.reg_weight).unwrap();
        let h = 1e-6;
        for k in 0..net.n_params() {
            let mut up = net.clone();
            up.params_mut()[k] += h;
            let mut down = net.clone();
            down.params_mut()[k] -= h;
            let fd = (meta_loss_with_masks(&up, &val, &masks, cfg.reg_weight).unwrap()
                - meta_loss_with_masks(&down, &val, &masks, cfg.reg_weight).unwrap())
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-7, "param {k}: {fd} vs {}", g[k]);
            let fd_pv = (meta_loss_pv_with_masks(&up, &val, &x, &masks, &umasks, cfg.reg_weight).unwrap()
                - meta_loss_pv_with_masks(&down, &val, &x, &masks, &umasks, cfg.reg_weight).unwrap())
                / (2.0 * h);
            assert!((fd_pv - gpv[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn pooled_reductions() {
        let mut rng = Rng::new(10);
        let net = NetParams::new(&[2, 6, 3], Activation::Relu, OutputKind::Softmax, 0.2, &mut rng).unwrap();
        let val = Dataset::new(Matrix::from_rows(&[[0.3, -1.0], [1.0, 0.4]]).unwrap(), vec![0.0, 2.0]).unwrap();
        let cfg = McConfig::default();
        let empty = Matrix::zeros(0, 2);
        let a = meta_loss(&net, &val, &cfg, &mut Rng::new(1)).unwrap();
        let b = meta_loss_pv(&net, &val, &empty, &cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);

        // the unlabeled part is an average, so duplicating it (with the
        // same masks per copy) leaves the pooled value unchanged while the
        // labeled part keeps its weight
        let unl = Matrix::from_rows(&[[2.0, 2.0], [-1.0, 0.5]]).unwrap();
        let lm = sample_batch_masks(&net, 2, &cfg, &mut rng);
        let um = sample_batch_masks(&net, 2, &cfg, &mut rng);
        let base = meta_loss_pv_with_masks(&net, &val, &unl, &lm, &um, 1.0).unwrap();
        let lab_only = meta_loss_with_masks(&net, &val, &lm, 1.0).unwrap();
        let unl_var = (dropout_variance_with_masks(&net, unl.row(0), &um[0]).unwrap()
            + dropout_variance_with_masks(&net, unl.row(1), &um[1]).unwrap())
            / 2.0;
        assert!((base - (lab_only + unl_var)).abs() < 1e-12);
        let dup = unl.vstack(&unl).unwrap();
        let dm: Vec<_> = um.iter().chain(&um).cloned().collect();
        let doubled = meta_loss_pv_with_masks(&net, &val, &dup, &lm, &dm, 1.0).unwrap();
        assert!((doubled - base).abs() < 1e-12);

        assert!(meta_loss_pv(&net, &Dataset::empty(2), &empty, &cfg, &mut rng).is_err());
        let zero = McConfig { reg_weight: 0.0, ..cfg };
        assert!(meta_loss_pv(&net, &Dataset::empty(2), &unl, &zero, &mut rng).is_err());
        // variance-only objective on unlabeled rows
        assert!(meta_loss_pv(&net, &Dataset::empty(2), &unl, &cfg, &mut rng).unwrap() >= 0.0);
    }

    #[test]
    fn meta_loss_monotone_in_reg_weight() {
        let mut rng = Rng::new(12);
        let net = NetParams::new(&[2, 6, 3], Activation::Relu, OutputKind::Softmax, 0.2, &mut rng).unwrap();
        let val = Dataset::new(Matrix::from_rows(&[[0.3, -1.0], [1.0, 0.4]]).unwrap(), vec![0.0, 1.0]).unwrap();
        let mut last = f64::NEG_INFINITY;
        for gamma in [0.0, 0.1, 1.0, 10.0] {
            let cfg = McConfig { reg_weight: gamma, ..McConfig::default() };
            let v = meta_loss(&net, &val, &cfg, &mut Rng::new(77)).unwrap();
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn mcd_score_analytic_cases() {
        let uniform = NetParams::zeros(&[2, 3, 3], Activation::Relu, OutputKind::Softmax, 0.2).unwrap();
        let masks = vec![DropoutMask::ones(&uniform); 4];
        assert!((mcd_score_with_masks(&uniform, &[1.0, 2.0], &masks).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        let reg = NetParams::zeros(&[2, 3, 1], Activation::Relu, OutputKind::Linear, 0.2).unwrap();
        assert!(matches!(
            mcd_score(&reg, &[1.0, 2.0], &McConfig::default(), &mut Rng::new(1)),
            Err(RevarError::Unsupported(_))
        ));
    }
}
