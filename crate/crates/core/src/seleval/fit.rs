use serde::{Deserialize, Serialize};

use crate::error::{Result, RevarError};
use crate::experiments::{self, StudyConfig};
use crate::numkit::{mean, ols_fit, spearman, Matrix};
use crate::synthgen::{self, ScenarioId, ScenarioSpec, SyntheticBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFit {
    pub r2: f64,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// Rank correlation between the weights and the leading feature.
    pub spearman: f64,
    /// Number of points in the regression (instances or worlds).
    pub n_points: usize,
}

fn check_weights(bundle: &SyntheticBundle, weights: &[f64]) -> Result<()> {
    if weights.len() != bundle.train.len() {
        return Err(RevarError::Dimension {
            context: "weights per training row",
            expected: bundle.train.len(),
            got: weights.len(),
        });
    }
    Ok(())
}

/// Regresses learned weights on the scenario's target features (OLS with
/// intercept).
///
/// S1, S2 and S5 fit training instances within one world. In S3 and S4 the
/// leading feature is constant within a world, so the fit runs across
/// worlds on per-world mean weights; `multi_world` supplies the extra
/// worlds next to `bundle`.
pub fn scenario_fit(
    bundle: &SyntheticBundle,
    weights: &[f64],
    multi_world: Option<&[(SyntheticBundle, Vec<f64>)]>,
) -> Result<ScenarioFit> {
    check_weights(bundle, weights)?;
    let id = bundle.spec.id;
    let (features, targets) = if id.needs_multi_world() {
        let others = multi_world
            .ok_or_else(|| RevarError::Validation(format!("{id} needs weights from several worlds")))?;
        let mut rows = Vec::with_capacity(others.len() + 1);
        let mut targets = Vec::with_capacity(others.len() + 1);
        for (b, w) in std::iter::once((bundle, weights)).chain(others.iter().map(|(b, w)| (b, w.as_slice()))) {
            if b.spec.id != id {
                return Err(RevarError::Validation(format!("mixed scenarios {id} and {}", b.spec.id)));
            }
            check_weights(b, w)?;
            let f = synthgen::target_weight_features(&b.spec, &b.params, &b.train.x_full)?;
            rows.push((0..f.cols()).map(|j| mean(&f.col(j))).collect::<Vec<_>>());
            targets.push(mean(w));
        }
        (Matrix::from_rows(&rows)?, targets)
    } else {
        (
            synthgen::target_weight_features(&bundle.spec, &bundle.params, &bundle.train.x_full)?,
            weights.to_vec(),
        )
    };
    // A constant feature column is absorbed by the intercept.
    let informative: Vec<usize> = (0..features.cols())
        .filter(|&j| {
            let c = features.col(j);
            c.iter().any(|&v| v != c[0])
        })
        .collect();
    let design = features.select_columns(&informative);
    let fit = ols_fit(&design, &targets)?;
    let mut coefficients = vec![0.0; features.cols()];
    for (k, &j) in informative.iter().enumerate() {
        coefficients[j] = fit.coefficients[k];
    }
    let lead = features.col(0);
    let rho = if targets.len() >= 3 { spearman(&targets, &lead)? } else { 0.0 };
    Ok(ScenarioFit {
        r2: fit.r_squared,
        intercept: fit.intercept,
        coefficients,
        spearman: rho,
        n_points: targets.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftShare {
    pub s: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub intercept: f64,
    /// `λ2·mean(h) / (λ1·mean(t) + λ2·mean(h))`.
    pub share: f64,
    pub r2: f64,
}

/// Fits `w ≈ b + λ1·t + λ2·h` on training instances and reports the share
/// of the fitted weight attributable to hardness.
///
/// In S4 the noise term `t` is constant within a world and therefore
/// collinear with the intercept; there the fit is `w ≈ b + λ2·h` and `b`
/// plays the role of `λ1·mean(t)`.
pub fn hardness_share(bundle: &SyntheticBundle, weights: &[f64]) -> Result<ShiftShare> {
    check_weights(bundle, weights)?;
    let spec = &bundle.spec;
    if !matches!(spec.id, ScenarioId::S2 | ScenarioId::S4) {
        return Err(RevarError::Validation(format!("hardness share needs S2 or S4, got {}", spec.id)));
    }
    let f = synthgen::target_weight_features(spec, &bundle.params, &bundle.train.x_full)?;
    let t_mean = mean(&f.col(0));
    let h_mean = mean(&f.col(1));
    let (lambda1, lambda2, intercept, r2, noise_part) = if spec.id == ScenarioId::S2 {
        let fit = ols_fit(&f, weights)?;
        let (l1, l2) = (fit.coefficients[0], fit.coefficients[1]);
        (l1, l2, fit.intercept, fit.r_squared, l1 * t_mean)
    } else {
        let fit = ols_fit(&f.select_columns(&[1]), weights)?;
        let l2 = fit.coefficients[0];
        (fit.intercept / t_mean, l2, fit.intercept, fit.r_squared, fit.intercept)
    };
    let hard_part = lambda2 * h_mean;
    let total = noise_part + hard_part;
    let share = if total == 0.0 { 0.0 } else { hard_part / total };
    Ok(ShiftShare {
        s: spec.s,
        lambda1,
        lambda2,
        intercept,
        share,
        r2,
    })
}

/// Trains the main method on one world per shift magnitude and reports the
/// hardness share of its weights. The world (and shift direction) is the
/// same for every `s`; only the magnitude changes.
pub fn shift_sweep(scenario: ScenarioId, s_values: &[f64], cfg: &StudyConfig, seed: u64) -> Result<Vec<ShiftShare>> {
    if !matches!(scenario, ScenarioId::S2 | ScenarioId::S4) {
        return Err(RevarError::Config {
            field: "scenario".into(),
            message: format!("shift sweep needs S2 or S4, got {scenario}"),
        });
    }
    if s_values.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
        return Err(RevarError::Config {
            field: "s_values".into(),
            message: "shift magnitudes must be finite and non-negative".into(),
        });
    }
    s_values
        .iter()
        .map(|&s| {
            let spec = ScenarioSpec::preset(scenario).with_shift(s);
            let bundle = cfg.world(&spec, seed)?;
            let (_, weights) = experiments::train_world(&bundle, &cfg.train, seed)?;
            hardness_share(&bundle, &weights)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use crate::synthgen::{generate_world, Dims};

    fn world(id: ScenarioId, seed: u64, n: usize) -> SyntheticBundle {
        generate_world(&ScenarioSpec::preset(id), Dims::default(), n, 5, 5, seed).unwrap()
    }

    #[test]
    fn self_fit_is_perfect() {
        let b = world(ScenarioId::S1, 0, 300);
        let f = synthgen::target_weight_features(&b.spec, &b.params, &b.train.x_full).unwrap();
        let fit = scenario_fit(&b, &f.col(0), None).unwrap();
        assert!((fit.r2 - 1.0).abs() < 1e-9);
        assert!((fit.spearman - 1.0).abs() < 1e-12);
    }

    #[test]
    fn affine_rescaling_keeps_r2() {
        let b = world(ScenarioId::S2, 1, 400);
        let mut rng = Rng::new(7);
        let w: Vec<f64> = (0..400).map(|_| rng.uniform()).collect();
        let w2: Vec<f64> = w.iter().map(|v| 3.0 * v - 2.0).collect();
        let a = scenario_fit(&b, &w, None).unwrap().r2;
        let c = scenario_fit(&b, &w2, None).unwrap().r2;
        assert!((a - c).abs() < 1e-9);
    }

    #[test]
    fn null_weights_fit_poorly() {
        let b = world(ScenarioId::S1, 2, 2000);
        let mut rng = Rng::new(8);
        let w: Vec<f64> = (0..2000).map(|_| rng.uniform()).collect();
        assert!(scenario_fit(&b, &w, None).unwrap().r2 <= 0.1);
    }

    #[test]
    fn multi_world_scenarios() {
        let b = world(ScenarioId::S3, 0, 50);
        assert!(scenario_fit(&b, &vec![0.5; 50], None).is_err());
        let others: Vec<(SyntheticBundle, Vec<f64>)> = (1..6)
            .map(|s| {
                let o = world(ScenarioId::S3, s, 50);
                let v = 1.0 / o.params.latent_signal_variance();
                (o, vec![2.0 * v + 0.1; 50])
            })
            .collect();
        let v0 = 1.0 / b.params.latent_signal_variance();
        let fit = scenario_fit(&b, &vec![2.0 * v0 + 0.1; 50], Some(&others)).unwrap();
        assert_eq!(fit.n_points, 6);
        assert!((fit.r2 - 1.0).abs() < 1e-9);
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-6 * 2.0);
    }

    #[test]
    fn uniform_target_has_zero_r2() {
        let b = world(ScenarioId::S5, 0, 100);
        let mut rng = Rng::new(9);
        let w: Vec<f64> = (0..100).map(|_| rng.uniform()).collect();
        let fit = scenario_fit(&b, &w, None).unwrap();
        assert!(fit.r2.abs() < 1e-12);
        assert_eq!(fit.spearman, 0.0);
    }

    #[test]
    fn share_of_pure_hardness_weights() {
        let b = world(ScenarioId::S2, 3, 300);
        let f = synthgen::target_weight_features(&b.spec, &b.params, &b.train.x_full).unwrap();
        let w = f.col(1);
        let s = hardness_share(&b, &w).unwrap();
        assert!((s.share - 1.0).abs() < 1e-6, "{}", s.share);
        let b4 = world(ScenarioId::S4, 3, 300);
        let f4 = synthgen::target_weight_features(&b4.spec, &b4.params, &b4.train.x_full).unwrap();
        let w4: Vec<f64> = f4.col(1).iter().map(|h| 0.001 * h + 1.0).collect();
        let s4 = hardness_share(&b4, &w4).unwrap();
        let hm = mean(&f4.col(1));
        assert!((s4.share - 0.001 * hm / (1.0 + 0.001 * hm)).abs() < 1e-9);
        assert!(hardness_share(&world(ScenarioId::S1, 0, 10), &[0.0; 10]).is_err());
    }
}
