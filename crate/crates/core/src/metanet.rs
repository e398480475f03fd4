//! The instance weighting network `g: input → (0, 1)`.
//!
//! Two conditionings exist: on the observed feature vector of an instance
//! (the method itself and IBR) or on the scalar training loss of the
//! instance (the MWN baseline).

use serde::{Deserialize, Serialize};

use crate::error::{Result, RevarError};
use crate::nets::{self, Activation, NetCheckpoint, NetParams, OutputKind};
use crate::numkit::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Instance,
    LossScalar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaNet {
    pub net: NetParams,
    pub conditioning: Conditioning,
}

/// Default hidden widths of the weighting network.
pub const DEFAULT_META_HIDDEN: [usize; 2] = [32, 32];

impl MetaNet {
    /// ReLU network with a sigmoid head. The last layer starts at zero so
    /// every instance initially gets weight 0.5.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        conditioning: Conditioning,
        rng: &mut Rng,
    ) -> Result<Self> {
        if conditioning == Conditioning::LossScalar && input_dim != 1 {
            return Err(RevarError::param(
                "a loss-conditioned weighting network takes a single input",
            ));
        }
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut net = NetParams::new(&sizes, Activation::Relu, OutputKind::Sigmoid, 0.0, rng)?;
        let last = net.n_layers() - 1;
        let (wr, br) = net.layer_ranges(last);
        net.params_mut()[wr].iter_mut().for_each(|p| *p = 0.0);
        net.params_mut()[br].iter_mut().for_each(|p| *p = 0.0);
        Ok(MetaNet { net, conditioning })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }

    pub fn to_checkpoint(&self) -> MetaCheckpoint {
        MetaCheckpoint {
            conditioning: self.conditioning,
            net: self.net.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: &MetaCheckpoint) -> Result<Self> {
        let net = NetParams::from_checkpoint(&ck.net)?;
        if net.output_kind() != OutputKind::Sigmoid || net.output_dim() != 1 {
            return Err(RevarError::Validation(
                "weighting network checkpoint must have a scalar sigmoid head".into(),
            ));
        }
        Ok(MetaNet {
            net,
            conditioning: ck.conditioning,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaCheckpoint {
    pub conditioning: Conditioning,
    pub net: NetCheckpoint,
}

/// `g(input)`, never masked.
pub fn weight_of(meta: &MetaNet, input: &[f64]) -> Result<f64> {
    Ok(nets::forward(&meta.net, input, None)?[0])
}

/// Exact gradient of `g(input)` w.r.t. the flat parameters of `g`.
pub fn grad_weight(meta: &MetaNet, input: &[f64]) -> Result<Vec<f64>> {
    nets::vjp_output(&meta.net, input, None, &[1.0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perturbed(rng: &mut Rng, dim: usize) -> MetaNet {
        let mut m = MetaNet::new(dim, &[6, 5], Conditioning::Instance, rng).unwrap();
        for p in m.net.params_mut() {
            *p += rng.normal(0.0, 0.3);
        }
        m
    }

    #[test]
    fn zero_head_gives_half() {
        let mut rng = Rng::new(1);
        let m = MetaNet::new(4, &DEFAULT_META_HIDDEN, Conditioning::Instance, &mut rng).unwrap();
        for _ in 0..10 {
            let x: Vec<f64> = (0..4).map(|_| rng.normal(0.0, 5.0)).collect();
            assert_eq!(weight_of(&m, &x).unwrap(), 0.5);
        }
    }

    #[test]
    fn bounded_and_deterministic() {
        let mut rng = Rng::new(2);
        let m = perturbed(&mut rng, 3);
        for _ in 0..500 {
            let x: Vec<f64> = (0..3).map(|_| rng.normal(0.0, 4.0)).collect();
            let w = weight_of(&m, &x).unwrap();
            assert!(w > 0.0 && w < 1.0);
            assert_eq!(w, weight_of(&m, &x).unwrap());
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(3);
        for _ in 0..10 {
            let m = perturbed(&mut rng, 3);
            let x: Vec<f64> = (0..3).map(|_| rng.normal(0.0, 1.0)).collect();
            let analytic = grad_weight(&m, &x).unwrap();
            let h = 1e-6;
            let mut worst = 0.0f64;
            let scale = analytic.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for k in 0..m.n_params() {
                let mut up = m.clone();
                up.net.params_mut()[k] += h;
                let mut down = m.clone();
                down.net.params_mut()[k] -= h;
                let fd = (weight_of(&up, &x).unwrap() - weight_of(&down, &x).unwrap()) / (2.0 * h);
                worst = worst.max((fd - analytic[k]).abs());
            }
            assert!(worst <= 1e-5 * scale, "abs err {worst} vs scale {scale}");
        }
    }

    #[test]
    fn saturated_head_has_vanishing_gradient() {
        let mut rng = Rng::new(4);
        for bias in [20.0, -20.0] {
            let mut m = MetaNet::new(3, &[4], Conditioning::Instance, &mut rng).unwrap();
            let last = m.net.n_layers() - 1;
            let (_, br) = m.net.layer_ranges(last);
            m.net.params_mut()[br.start] = bias;
            let g = grad_weight(&m, &[0.3, -0.2, 1.0]).unwrap();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= 1e-6, "gradient norm {norm}");
        }
    }

    #[test]
    fn zero_input_zero_bias_first_layer_weight_gradient_vanishes() {
        let mut rng = Rng::new(5);
        let mut m = perturbed(&mut rng, 3);
        let (wr, br) = m.net.layer_ranges(0);
        m.net.params_mut()[br].iter_mut().for_each(|b| *b = 0.0);
        let g = grad_weight(&m, &[0.0; 3]).unwrap();
        assert!(g[wr].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_conditioning_needs_scalar_input() {
        let mut rng = Rng::new(6);
        assert!(MetaNet::new(3, &[4], Conditioning::LossScalar, &mut rng).is_err());
        let m = MetaNet::new(1, &[4], Conditioning::LossScalar, &mut rng).unwrap();
        assert!(weight_of(&m, &[0.7, 0.1]).is_err());
        let back = MetaNet::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back, m);
    }
}
