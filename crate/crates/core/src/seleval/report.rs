use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RejectionCurve;
use crate::data::fmt_f64;
use crate::error::{Result, RevarError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auarc: f64,
    /// Absent for regressors, which have no class confidence.
    pub ece: Option<f64>,
    /// Keyed by coverage rendered with two decimals.
    pub selective_ece: BTreeMap<String, f64>,
    pub r2_by_scenario: BTreeMap<String, f64>,
    pub spearman_by_scenario: BTreeMap<String, f64>,
    pub seed: u64,
    pub config_digest: String,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(self.auarc)
            .chain(self.ece)
            .chain(self.selective_ece.values().copied())
            .chain(self.r2_by_scenario.values().copied())
            .chain(self.spearman_by_scenario.values().copied());
        for v in all {
            if !v.is_finite() {
                return Err(RevarError::Validation("metrics report holds a non-finite value".into()));
            }
        }
        Ok(())
    }

    pub fn coverage_key(c: f64) -> String {
        format!("{c:.2}")
    }
}

/// SHA-256 of the canonical JSON rendering of `config`.
pub fn config_digest<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `coverage,accuracy` table.
pub fn curve_csv(curve: &RejectionCurve) -> String {
    let mut s = String::from("coverage,accuracy\n");
    for (c, a) in curve.coverages.iter().zip(&curve.accuracies) {
        s.push_str(&format!("{},{}\n", fmt_f64(*c), fmt_f64(*a)));
    }
    s
}

/// Flat `metric,value` table with a fixed row order.
pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut s = String::from("metric,value\n");
    s.push_str(&format!("auarc,{}\n", fmt_f64(report.auarc)));
    if let Some(ece) = report.ece {
        s.push_str(&format!("ece,{}\n", fmt_f64(ece)));
    }
    for (k, v) in &report.selective_ece {
        s.push_str(&format!("selective_ece@{k},{}\n", fmt_f64(*v)));
    }
    for (k, v) in &report.r2_by_scenario {
        s.push_str(&format!("r2_{k},{}\n", fmt_f64(*v)));
    }
    for (k, v) in &report.spearman_by_scenario {
        s.push_str(&format!("spearman_{k},{}\n", fmt_f64(*v)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seleval::ScoreKind;

    #[test]
    fn digest_is_stable_and_distinguishes() {
        let a = config_digest(&serde_json::json!({"lr": 0.1, "seed": 1})).unwrap();
        let b = config_digest(&serde_json::json!({"lr": 0.1, "seed": 2})).unwrap();
        assert_eq!(a.len(), 64);
        assert_ne!(a, b);
        assert_eq!(a, config_digest(&serde_json::json!({"lr": 0.1, "seed": 1})).unwrap());
    }

    #[test]
    fn csv_rendering() {
        let curve = RejectionCurve {
            coverages: vec![0.5, 1.0],
            accuracies: vec![1.0, 0.75],
            score_kind: ScoreKind::GScore,
        };
        assert_eq!(
            curve_csv(&curve),
            "coverage,accuracy\n5.0000000000000000e-1,1.0000000000000000e0\n1.0000000000000000e0,7.5000000000000000e-1\n"
        );
        let mut report = MetricsReport {
            auarc: 0.5,
            ece: Some(0.0),
            selective_ece: BTreeMap::new(),
            r2_by_scenario: BTreeMap::new(),
            spearman_by_scenario: BTreeMap::new(),
            seed: 0,
            config_digest: String::new(),
        };
        report.selective_ece.insert(MetricsReport::coverage_key(0.5), 0.25);
        assert_eq!(
            metrics_csv(&report),
            "metric,value\nauarc,5.0000000000000000e-1\nece,0\nselective_ece@0.50,2.5000000000000000e-1\n"
        );
        report.ece = None;
        assert!(!metrics_csv(&report).contains("ece,"));
        report.validate().unwrap();
        report.ece = Some(f64::NAN);
        assert!(report.validate().is_err());
    }
}
