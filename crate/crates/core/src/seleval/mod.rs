//! Selective prediction and calibration metrics, plus the harness that
//! regresses learned weights on the generator's ground-truth features.

mod fit;
mod report;

pub use fit::{hardness_share, scenario_fit, shift_sweep, ScenarioFit, ShiftShare};
pub use report::{config_digest, curve_csv, metrics_csv, MetricsReport};

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RevarError};
use crate::mcvar::{self, McConfig};
use crate::metanet::{self, MetaNet};
use crate::nets::{self, NetParams, OutputKind};
use crate::numkit::{Matrix, Rng};
use crate::par;

pub const DEFAULT_ECE_BINS: usize = 15;

/// Uncertainty score used to order test items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `g(x)` from the weighting network; predictions abstain once `g` is high.
    GScore,
    /// `1 − max_k p_k`.
    SoftmaxResponse,
    /// Entropy of the softmax.
    Entropy,
    /// Entropy of the dropout-averaged softmax.
    Mcd,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::GScore => "g",
            ScoreKind::SoftmaxResponse => "sr",
            ScoreKind::Entropy => "entropy",
            ScoreKind::Mcd => "mcd",
        }
    }
}

impl FromStr for ScoreKind {
    type Err = RevarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g" | "g_score" => Ok(ScoreKind::GScore),
            "sr" | "softmax_response" => Ok(ScoreKind::SoftmaxResponse),
            "entropy" => Ok(ScoreKind::Entropy),
            "mcd" => Ok(ScoreKind::Mcd),
            other => Err(RevarError::Config {
                field: "score".into(),
                message: format!("unknown score `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionCurve {
    pub coverages: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub score_kind: ScoreKind,
}

/// `{0.05, 0.10, …, 1.00}`.
pub fn default_grid() -> Vec<f64> {
    (1..=20).map(|k| k as f64 / 20.0).collect()
}

/// `⌈c·n⌉`, robust to `c·n` landing a rounding error above an integer.
fn kept_count(c: f64, n: usize) -> usize {
    let t = c * n as f64;
    let r = t.round();
    let k = if (t - r).abs() <= 1e-9 * (n as f64).max(1.0) { r } else { t.ceil() };
    (k as usize).clamp(1, n)
}

/// Item indices sorted by ascending uncertainty, ties by index.
pub fn ranking(uncertainty: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..uncertainty.len()).collect();
    idx.sort_by(|&a, &b| uncertainty[a].total_cmp(&uncertainty[b]).then(a.cmp(&b)));
    idx
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(RevarError::param("coverage grid is empty"));
    }
    if grid.iter().any(|&c| !(c > 0.0 && c <= 1.0)) {
        return Err(RevarError::param("coverages must lie in (0, 1]"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(RevarError::param("coverages must be strictly increasing"));
    }
    Ok(())
}

fn check_lengths(a: usize, b: usize, context: &'static str) -> Result<()> {
    if a == 0 {
        return Err(RevarError::param(format!("{context}: empty input")));
    }
    if a != b {
        return Err(RevarError::Dimension { context, expected: a, got: b });
    }
    Ok(())
}

/// Accuracy on the `⌈cN⌉` least uncertain items for each coverage `c`.
pub fn rejection_curve(
    uncertainty: &[f64],
    correct: &[bool],
    grid: &[f64],
    score_kind: ScoreKind,
) -> Result<RejectionCurve> {
    check_lengths(uncertainty.len(), correct.len(), "rejection curve")?;
    check_grid(grid)?;
    let order = ranking(uncertainty);
    let mut hits = Vec::with_capacity(order.len() + 1);
    hits.push(0usize);
    for &i in &order {
        hits.push(hits.last().unwrap() + correct[i] as usize);
    }
    let n = order.len();
    let accuracies = grid
        .iter()
        .map(|&c| {
            let k = kept_count(c, n);
            hits[k] as f64 / k as f64
        })
        .collect();
    Ok(RejectionCurve {
        coverages: grid.to_vec(),
        accuracies,
        score_kind,
    })
}

/// Mean accuracy over the curve's coverage grid.
pub fn auarc(curve: &RejectionCurve) -> f64 {
    curve.accuracies.iter().sum::<f64>() / curve.accuracies.len() as f64
}

/// Expected calibration error over `n_bins` equal-width bins on `[0, 1]`;
/// the last bin is closed.
pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    check_lengths(confidences.len(), correct.len(), "ece")?;
    if n_bins == 0 {
        return Err(RevarError::param("need at least one bin"));
    }
    if confidences.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
        return Err(RevarError::param("confidences must lie in [0, 1]"));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    let mut acc = vec![0.0; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * n_bins as f64) as usize).min(n_bins - 1);
        count[b] += 1;
        conf[b] += c;
        acc[b] += ok as u8 as f64;
    }
    let n = confidences.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (acc[b] / m - conf[b] / m).abs()
        })
        .sum())
}

/// ECE over the items kept at coverage `c`.
pub fn selective_ece(
    confidences: &[f64],
    correct: &[bool],
    uncertainty: &[f64],
    coverage: f64,
    n_bins: usize,
) -> Result<f64> {
    check_lengths(confidences.len(), correct.len(), "selective ece")?;
    check_lengths(confidences.len(), uncertainty.len(), "selective ece")?;
    check_grid(&[coverage])?;
    let order = ranking(uncertainty);
    let kept = &order[..kept_count(coverage, order.len())];
    let c: Vec<f64> = kept.iter().map(|&i| confidences[i]).collect();
    let k: Vec<bool> = kept.iter().map(|&i| correct[i]).collect();
    ece(&c, &k, n_bins)
}

/// Predicted class and its probability for each row.
pub fn predictions(net: &NetParams, x: &Matrix) -> Result<Vec<(usize, f64)>> {
    if net.output_kind() != OutputKind::Softmax {
        return Err(RevarError::Unsupported("predictions need a softmax classifier".into()));
    }
    par::map(x.rows(), |i| {
        let p = nets::forward(net, x.row(i), None)?;
        let (k, &v) = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty output");
        Ok((k, v))
    })
    .into_iter()
    .collect()
}

/// Per-row uncertainty of kind `kind`; larger means less certain.
/// Dropout masks for MCD come from per-row sub-streams of `rng`.
pub fn uncertainty_scores(
    kind: ScoreKind,
    net: &NetParams,
    meta: Option<&MetaNet>,
    x: &Matrix,
    mc: &McConfig,
    rng: &Rng,
) -> Result<Vec<f64>> {
    let needs_softmax = !matches!(kind, ScoreKind::GScore);
    if needs_softmax && net.output_kind() != OutputKind::Softmax {
        return Err(RevarError::Unsupported(format!(
            "score `{}` is unsupported for a {:?} output",
            kind.as_str(),
            net.output_kind()
        )));
    }
    let rows: Vec<Result<f64>> = match kind {
        ScoreKind::GScore => {
            let meta = meta.ok_or_else(|| {
                RevarError::Unsupported("score `g` is unsupported without a weighting network".into())
            })?;
            if meta.conditioning != metanet::Conditioning::Instance {
                return Err(RevarError::Unsupported(
                    "score `g` is unsupported for a loss-conditioned weighting network".into(),
                ));
            }
            par::map(x.rows(), |i| metanet::weight_of(meta, x.row(i)))
        }
        ScoreKind::SoftmaxResponse => par::map(x.rows(), |i| {
            let p = nets::forward(net, x.row(i), None)?;
            Ok(1.0 - p.iter().fold(0.0f64, |m, &v| m.max(v)))
        }),
        ScoreKind::Entropy => par::map(x.rows(), |i| Ok(mcvar::entropy(&nets::forward(net, x.row(i), None)?))),
        ScoreKind::Mcd => {
            mc.validate()?;
            par::map(x.rows(), |i| {
                let mut r = rng.derive(i as u64);
                mcvar::mcd_score(net, x.row(i), mc, &mut r)
            })
        }
    };
    rows.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example_curve() {
        let c = rejection_curve(
            &[0.1, 0.2, 0.8, 0.9],
            &[true, true, false, false],
            &[0.25, 0.5, 0.75, 1.0],
            ScoreKind::GScore,
        )
        .unwrap();
        assert_eq!(c.accuracies, vec![1.0, 1.0, 2.0 / 3.0, 0.5]);
        assert!((auarc(&c) - 0.791_666_666_666_666_6).abs() < 1e-12);
    }

    #[test]
    fn reversed_scores_keep_the_wrong_half() {
        let c = rejection_curve(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false], &[0.5], ScoreKind::Entropy).unwrap();
        assert_eq!(c.accuracies, vec![0.0]);
    }

    #[test]
    fn full_coverage_is_overall_accuracy() {
        let correct = [true, false, true, true, false, true, false];
        let c = rejection_curve(&[0.3, 0.1, 0.5, 0.5, 0.2, 0.0, 0.9], &correct, &default_grid(), ScoreKind::GScore).unwrap();
        assert_eq!(*c.accuracies.last().unwrap(), 4.0 / 7.0);
        let all = rejection_curve(&[0.3, 0.1, 0.5], &[true; 3], &default_grid(), ScoreKind::GScore).unwrap();
        assert_eq!(auarc(&all), 1.0);
    }

    #[test]
    fn grid_rounding_does_not_overshoot() {
        // 0.15·20 evaluates to 3.0000000000000004
        assert_eq!(kept_count(0.15, 20), 3);
        assert_eq!(kept_count(0.05, 10), 1);
        assert_eq!(kept_count(0.3, 7), 3);
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(ranking(&[0.5, 0.1, 0.5, 0.1]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn ece_hand_example() {
        let v = ece(&[0.6, 0.6, 0.9, 0.9], &[true, false, true, true], 4).unwrap();
        assert!((v - 0.10).abs() < 1e-12, "{v}");
        assert_eq!(ece(&[1.0; 5], &[true; 5], DEFAULT_ECE_BINS).unwrap(), 0.0);
    }

    #[test]
    fn ece_duplication_invariant() {
        let conf = [0.55, 0.7, 0.95, 0.31, 0.8];
        let ok = [true, false, true, false, true];
        let one = ece(&conf, &ok, 15).unwrap();
        let two = ece(&[conf, conf].concat(), &[ok, ok].concat(), 15).unwrap();
        assert!((one - two).abs() < 1e-15);
    }

    #[test]
    fn selective_ece_full_coverage_matches_ece() {
        let conf = [0.55, 0.7, 0.95, 0.31, 0.8];
        let ok = [true, false, true, false, true];
        let u = [0.2, 0.1, 0.4, 0.3, 0.0];
        assert_eq!(selective_ece(&conf, &ok, &u, 1.0, 15).unwrap(), ece(&conf, &ok, 15).unwrap());
        // keeps rows 4 and 1, which share the upper bin: |0.5 − 0.75|
        let half = selective_ece(&conf, &ok, &u, 0.4, 2).unwrap();
        assert!((half - 0.25).abs() < 1e-12);
    }

    #[test]
    fn bad_inputs() {
        assert!(rejection_curve(&[], &[], &[1.0], ScoreKind::GScore).is_err());
        assert!(rejection_curve(&[0.1], &[true], &[0.0], ScoreKind::GScore).is_err());
        assert!(rejection_curve(&[0.1], &[true], &[0.5, 0.5], ScoreKind::GScore).is_err());
        assert!(ece(&[1.5], &[true], 10).is_err());
        assert!("auc".parse::<ScoreKind>().is_err());
    }

    #[test]
    fn mcd_on_regressor_is_unsupported() {
        use crate::nets::Activation;
        let net = NetParams::zeros(&[2, 3, 1], Activation::Relu, OutputKind::Linear, 0.2).unwrap();
        let x = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let err = uncertainty_scores(ScoreKind::Mcd, &net, None, &x, &McConfig::default(), &Rng::new(0));
        assert!(matches!(err, Err(RevarError::Unsupported(m)) if m.contains("unsupported")));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn auarc_invariant_under_monotone_transform(
                u in proptest::collection::vec(-5.0f64..5.0, 3..40),
                bits in proptest::collection::vec(any::<bool>(), 40),
            ) {
                let correct = &bits[..u.len()];
                let grid = default_grid();
                let a = auarc(&rejection_curve(&u, correct, &grid, ScoreKind::GScore).unwrap());
                let t: Vec<f64> = u.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
                let b = auarc(&rejection_curve(&t, correct, &grid, ScoreKind::GScore).unwrap());
                prop_assert_eq!(a, b);
            }
        }
    }
}
