use serde::{Deserialize, Serialize};

use crate::error::{Result, RevarError};
use crate::mcvar::McConfig;
use crate::metanet::Conditioning;

/// Training procedure selected by a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Instance-conditioned weights, variance-regularized meta-loss.
    Revar,
    /// As `Revar`, with the variance term also pooled over unlabeled inputs.
    RevarPv,
    /// Instance-conditioned weights, plain meta-loss.
    Ibr,
    /// Loss-conditioned weights, plain meta-loss.
    Mwn,
    /// Unit weights.
    Erm,
    /// Unit weights plus dropout variance on the training loss.
    Vr,
    /// Softmax-margin weights, normalised to mean one per batch.
    Mbr,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Revar => "revar",
            Method::RevarPv => "revar_pv",
            Method::Ibr => "ibr",
            Method::Mwn => "mwn",
            Method::Erm => "erm",
            Method::Vr => "vr",
            Method::Mbr => "mbr",
        }
    }

    /// Whether a weighting network is trained.
    pub fn uses_meta(self) -> bool {
        matches!(self, Method::Revar | Method::RevarPv | Method::Ibr | Method::Mwn)
    }

    pub fn conditioning(self) -> Option<Conditioning> {
        match self {
            Method::Revar | Method::RevarPv | Method::Ibr => Some(Conditioning::Instance),
            Method::Mwn => Some(Conditioning::LossScalar),
            _ => None,
        }
    }

    /// Variance multiplier actually used in the meta-loss.
    pub fn meta_reg_weight(self, mc: &McConfig) -> f64 {
        match self {
            Method::Revar | Method::RevarPv => mc.reg_weight,
            _ => 0.0,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = RevarError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "revar" => Method::Revar,
            "revar_pv" => Method::RevarPv,
            "ibr" => Method::Ibr,
            "mwn" => Method::Mwn,
            "erm" => Method::Erm,
            "vr" => Method::Vr,
            "mbr" => Method::Mbr,
            other => {
                return Err(RevarError::Config {
                    field: "method".into(),
                    message: format!("unknown method `{other}`"),
                })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_classifier: f64,
    pub lr_meta: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warm_start_epochs: usize,
    pub meta_interval: usize,
    pub batch_train: usize,
    pub batch_val: usize,
    pub mc: McConfig,
    pub seed: u64,
    pub method: Method,
    /// Hidden widths of the predictor.
    pub hidden: Vec<usize>,
    /// Hidden widths of the weighting network.
    pub meta_hidden: Vec<usize>,
    /// Temperature of the margin weights (MBR only).
    pub mbr_temperature: f64,
    /// Rescale learned weights to mean one within each batch, both in the
    /// unrolled step and in the predictor update.
    pub normalize_weights: bool,
    /// Rescale the meta-gradient to at most this L2 norm before each meta
    /// update.
    pub meta_grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_classifier: 0.01,
            lr_meta: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 60,
            warm_start_epochs: 5,
            meta_interval: 15,
            batch_train: 64,
            batch_val: 64,
            mc: McConfig::default(),
            seed: 0,
            method: Method::Revar,
            hidden: vec![32],
            meta_hidden: crate::metanet::DEFAULT_META_HIDDEN.to_vec(),
            mbr_temperature: 1.0,
            normalize_weights: true,
            meta_grad_clip: None,
        }
    }
}

fn field_err(field: &str, message: String) -> RevarError {
    RevarError::Config {
        field: field.into(),
        message,
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_classifier > 0.0) || !self.lr_classifier.is_finite() {
            return Err(field_err("lr_classifier", format!("must be positive, got {}", self.lr_classifier)));
        }
        if !(self.lr_meta > 0.0) || !self.lr_meta.is_finite() {
            return Err(field_err("lr_meta", format!("must be positive, got {}", self.lr_meta)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(field_err("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(field_err("weight_decay", format!("must be non-negative, got {}", self.weight_decay)));
        }
        if self.meta_interval == 0 {
            return Err(field_err("meta_interval", "must be at least 1".into()));
        }
        if self.epochs > 0 && self.warm_start_epochs >= self.epochs {
            return Err(field_err(
                "warm_start_epochs",
                format!("must be below epochs ({}), got {}", self.epochs, self.warm_start_epochs),
            ));
        }
        if self.batch_train == 0 {
            return Err(field_err("batch_train", "must be at least 1".into()));
        }
        if self.batch_val == 0 {
            return Err(field_err("batch_val", "must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(field_err("hidden", "widths must be positive".into()));
        }
        if self.meta_hidden.contains(&0) {
            return Err(field_err("meta_hidden", "widths must be positive".into()));
        }
        if !(self.mbr_temperature > 0.0) {
            return Err(field_err("mbr_temperature", "must be positive".into()));
        }
        if let Some(c) = self.meta_grad_clip {
            if !(c > 0.0) || !c.is_finite() {
                return Err(field_err("meta_grad_clip", format!("must be positive, got {c}")));
            }
        }
        self.mc.validate()
    }

    /// Warm start as the fraction 25/300 of the total epochs, at least one
    /// epoch when training long enough to have a meta phase.
    pub fn scaled_warm_start(epochs: usize) -> usize {
        if epochs < 2 {
            return 0;
        }
        ((epochs as f64 * 25.0 / 300.0).round() as usize).clamp(1, epochs - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_fields_are_named() {
        let cases: Vec<(TrainConfig, &str)> = vec![
            (TrainConfig { lr_classifier: 0.0, ..Default::default() }, "lr_classifier"),
            (TrainConfig { meta_interval: 0, ..Default::default() }, "meta_interval"),
            (TrainConfig { warm_start_epochs: 60, ..Default::default() }, "warm_start_epochs"),
        ];
        for (cfg, name) in cases {
            match cfg.validate() {
                Err(RevarError::Config { field, .. }) => assert_eq!(field, name),
                other => panic!("expected config error for {name}, got {other:?}"),
            }
        }
        let zero = TrainConfig { epochs: 0, warm_start_epochs: 0, ..Default::default() };
        zero.validate().unwrap();
    }

    #[test]
    fn warm_start_scaling() {
        assert_eq!(TrainConfig::scaled_warm_start(300), 25);
        assert_eq!(TrainConfig::scaled_warm_start(60), 5);
        assert_eq!(TrainConfig::scaled_warm_start(3), 1);
        assert_eq!(TrainConfig::scaled_warm_start(1), 0);
    }

    #[test]
    fn method_round_trip() {
        for m in [Method::Revar, Method::RevarPv, Method::Ibr, Method::Mwn, Method::Erm, Method::Vr, Method::Mbr] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("l2r".parse::<Method>().is_err());
    }
}
