//! Heteroscedastic linear-Gaussian worlds with optional covariate shift.
//!
//! Inputs are `X = [X_c X_e] ~ N(μ, diag σ²)` and targets
//! `Y = Wᵀ X + ε·(c + Gᵀ X)` with `ε ~ N(0, 1)`. Validation and test inputs
//! are drawn around a shifted mean `μ' = μ + s·(μ_s + σ_s ⊙ z)`.
//! Five scenarios switch the noise, shift and visibility of `X_e`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, read_csv, write_csv, write_text, Dataset};
use crate::error::{Result, RevarError};
use crate::numkit::{dot, Matrix, Rng};
use crate::par;

/// Floor on `(Gᵀx)²` in the inverse-noise feature.
pub const NOISE_FLOOR: f64 = 1e-6;
/// Floor on sampled per-coordinate standard deviations.
pub const SIGMA_FLOOR: f64 = 0.1;

const STREAM_W: u64 = 1;
const STREAM_G: u64 = 2;
const STREAM_MU: u64 = 3;
const STREAM_SIGMA: u64 = 4;
const STREAM_SHIFT: u64 = 10;
const STREAM_TRAIN: u64 = 11;
const STREAM_VAL: u64 = 12;
const STREAM_TEST: u64 = 13;
const STREAM_CLASS: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioId {
    S1,
    S2,
    S3,
    S4,
    S5,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 5] = [ScenarioId::S1, ScenarioId::S2, ScenarioId::S3, ScenarioId::S4, ScenarioId::S5];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioId::S1 => "S1",
            ScenarioId::S2 => "S2",
            ScenarioId::S3 => "S3",
            ScenarioId::S4 => "S4",
            ScenarioId::S5 => "S5",
        }
    }

    /// Whether the target feature is constant within a world, so fits need
    /// several worlds.
    pub fn needs_multi_world(self) -> bool {
        matches!(self, ScenarioId::S3 | ScenarioId::S4)
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioId {
    type Err = RevarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S1" | "s1" => Ok(ScenarioId::S1),
            "S2" | "s2" => Ok(ScenarioId::S2),
            "S3" | "s3" => Ok(ScenarioId::S3),
            "S4" | "s4" => Ok(ScenarioId::S4),
            "S5" | "s5" => Ok(ScenarioId::S5),
            other => Err(RevarError::Config {
                field: "scenario".into(),
                message: format!("unknown scenario `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub core: usize,
    pub latent: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { core: 48, latent: 24 }
    }
}

impl Dims {
    pub fn total(&self) -> usize {
        self.core + self.latent
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    pub c: f64,
    pub s: f64,
    pub g_active: bool,
    pub observe_latent: bool,
    pub latent_shift_only: bool,
    pub w_latent_zero: bool,
}

impl ScenarioSpec {
    pub fn preset(id: ScenarioId) -> Self {
        let base = ScenarioSpec {
            id,
            c: 0.0,
            s: 0.0,
            g_active: true,
            observe_latent: true,
            latent_shift_only: false,
            w_latent_zero: false,
        };
        match id {
            ScenarioId::S1 => base,
            ScenarioId::S2 => ScenarioSpec { s: 25.0, ..base },
            ScenarioId::S3 => ScenarioSpec {
                c: 1.0,
                g_active: false,
                observe_latent: false,
                ..base
            },
            ScenarioId::S4 => ScenarioSpec {
                c: 1.0,
                s: 50.0,
                g_active: false,
                observe_latent: false,
                ..base
            },
            ScenarioId::S5 => ScenarioSpec {
                c: 1.0,
                s: 50.0,
                g_active: false,
                latent_shift_only: true,
                w_latent_zero: true,
                ..base
            },
        }
    }

    pub fn with_shift(mut self, s: f64) -> Self {
        self.s = s;
        self
    }

    /// Checks the flag pattern that defines each scenario.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(RevarError::Config {
                field: field.into(),
                message: format!("{}: {message}", self.id),
            })
        };
        if !self.c.is_finite() || self.c < 0.0 {
            return bad("c", "must be finite and non-negative");
        }
        if !self.s.is_finite() || self.s < 0.0 {
            return bad("s", "must be finite and non-negative");
        }
        match self.id {
            ScenarioId::S1 | ScenarioId::S2 => {
                if !self.g_active {
                    return bad("g_active", "needs input-dependent noise");
                }
                if self.w_latent_zero || self.latent_shift_only || !self.observe_latent {
                    return bad("observe_latent", "all inputs are observed");
                }
            }
            ScenarioId::S3 | ScenarioId::S4 => {
                if self.g_active {
                    return bad("g_active", "noise is constant");
                }
                if self.observe_latent {
                    return bad("observe_latent", "latent inputs are hidden");
                }
                if self.w_latent_zero || self.latent_shift_only {
                    return bad("w_latent_zero", "latent inputs carry signal");
                }
            }
            ScenarioId::S5 => {
                if self.g_active {
                    return bad("g_active", "noise is constant");
                }
                if !self.w_latent_zero || !self.latent_shift_only {
                    return bad("w_latent_zero", "shift acts only on signal-free latent inputs");
                }
                if !self.observe_latent {
                    return bad("observe_latent", "all inputs are observed");
                }
            }
        }
        if self.id == ScenarioId::S1 && self.s != 0.0 {
            return bad("s", "no shift in this scenario");
        }
        if self.id == ScenarioId::S3 && self.s != 0.0 {
            return bad("s", "no shift in this scenario");
        }
        Ok(())
    }

    /// Columns of the full input visible to the learner.
    pub fn observed_columns(&self, dims: Dims) -> Vec<usize> {
        if self.observe_latent {
            (0..dims.total()).collect()
        } else {
            (0..dims.core).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    pub w_core: Vec<f64>,
    pub w_latent: Vec<f64>,
    pub g_noise: Vec<f64>,
    pub c: f64,
    pub s: f64,
    pub mu: Vec<f64>,
    pub sigma_diag: Vec<f64>,
    pub shift_mu: Vec<f64>,
    pub shift_sigma_diag: Vec<f64>,
}

impl GeneratorParams {
    pub fn dims(&self) -> Dims {
        Dims {
            core: self.w_core.len(),
            latent: self.w_latent.len(),
        }
    }

    /// `W = [W_c; W_e]`.
    pub fn w_full(&self) -> Vec<f64> {
        let mut w = self.w_core.clone();
        w.extend_from_slice(&self.w_latent);
        w
    }

    /// Copy with the scenario's constants and zeroed blocks applied.
    pub fn for_scenario(&self, spec: &ScenarioSpec) -> GeneratorParams {
        let mut p = self.clone();
        p.c = spec.c;
        p.s = spec.s;
        if !spec.g_active {
            p.g_noise.iter_mut().for_each(|g| *g = 0.0);
        }
        if spec.w_latent_zero {
            p.w_latent.iter_mut().for_each(|w| *w = 0.0);
        }
        p
    }

    fn validate(&self) -> Result<()> {
        let d = self.dims().total();
        for (name, len) in [
            ("g_noise", self.g_noise.len()),
            ("mu", self.mu.len()),
            ("sigma_diag", self.sigma_diag.len()),
            ("shift_mu", self.shift_mu.len()),
            ("shift_sigma_diag", self.shift_sigma_diag.len()),
        ] {
            if len != d {
                return Err(RevarError::Validation(format!("{name} has length {len}, expected {d}")));
            }
        }
        if self.sigma_diag.iter().chain(&self.shift_sigma_diag).any(|&v| !(v > 0.0)) {
            return Err(RevarError::Validation("covariance diagonals must be positive".into()));
        }
        Ok(())
    }

    /// `W_eᵀ Σ_ee W_e` for diagonal `Σ`.
    pub fn latent_signal_variance(&self) -> f64 {
        let core = self.w_core.len();
        self.w_latent
            .iter()
            .zip(&self.sigma_diag[core..])
            .map(|(w, s)| w * w * s * s)
            .sum()
    }
}

/// Draws a world: `W ~ N(5, 10)`, `G ~ N(12, 18)`, `μ ~ N(1, 10)`,
/// `σ = max(|N(5, 10)|, 0.1)`, unit-scale shift direction.
pub fn sample_generator_params(rng: &Rng, dims: Dims) -> Result<GeneratorParams> {
    if dims.core == 0 {
        return Err(RevarError::param("core dimension must be positive"));
    }
    let d = dims.total();
    let draw = |label: u64, n: usize, m: f64, s: f64| -> Vec<f64> {
        let mut r = rng.derive(label);
        (0..n).map(|_| r.normal(m, s)).collect()
    };
    let w = draw(STREAM_W, d, 5.0, 10.0);
    let sigma_diag = draw(STREAM_SIGMA, d, 5.0, 10.0)
        .into_iter()
        .map(|v| v.abs().max(SIGMA_FLOOR))
        .collect();
    Ok(GeneratorParams {
        w_core: w[..dims.core].to_vec(),
        w_latent: w[dims.core..].to_vec(),
        g_noise: draw(STREAM_G, d, 12.0, 18.0),
        c: 0.0,
        s: 0.0,
        mu: draw(STREAM_MU, d, 1.0, 10.0),
        sigma_diag,
        shift_mu: vec![0.0; d],
        shift_sigma_diag: vec![1.0; d],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x_full: Matrix,
    pub x_observed: Matrix,
    pub y: Vec<f64>,
    /// `|c + Gᵀx|`.
    pub noise_std: Vec<f64>,
    /// `‖x − μ‖²` against the generating train mean.
    pub hardness: Vec<f64>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Observed inputs with targets.
    pub fn dataset(&self) -> Dataset {
        Dataset {
            x: self.x_observed.clone(),
            y: self.y.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBundle {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
    pub params: GeneratorParams,
    pub spec: ScenarioSpec,
    /// Shifted mean shared by validation and test.
    pub shifted_mu: Vec<f64>,
}

fn check_consistent(spec: &ScenarioSpec, params: &GeneratorParams) -> Result<()> {
    spec.validate()?;
    params.validate()?;
    if params.c != spec.c || params.s != spec.s {
        return Err(RevarError::Validation(format!(
            "{}: generator has c={}, s={} but scenario asks for c={}, s={}",
            spec.id, params.c, params.s, spec.c, spec.s
        )));
    }
    if !spec.g_active && params.g_noise.iter().any(|&g| g != 0.0) {
        return Err(RevarError::Validation(format!("{}: noise direction must be zero", spec.id)));
    }
    if spec.w_latent_zero && params.w_latent.iter().any(|&w| w != 0.0) {
        return Err(RevarError::Validation(format!("{}: latent weights must be zero", spec.id)));
    }
    Ok(())
}

/// `μ' = μ + s·(μ_s + σ_s ⊙ z)`, restricted to latent coordinates when the
/// scenario shifts only those.
pub fn shifted_mean(spec: &ScenarioSpec, params: &GeneratorParams, rng: &Rng) -> Vec<f64> {
    let mut r = rng.derive(STREAM_SHIFT);
    let core = params.w_core.len();
    params
        .mu
        .iter()
        .enumerate()
        .map(|(j, &m)| {
            let z = r.standard_normal();
            if spec.s == 0.0 || (spec.latent_shift_only && j < core) {
                m
            } else {
                m + spec.s * (params.shift_mu[j] + params.shift_sigma_diag[j] * z)
            }
        })
        .collect()
}

fn draw_split(
    spec: &ScenarioSpec,
    params: &GeneratorParams,
    mean: &[f64],
    n: usize,
    rng: Rng,
) -> Result<LabeledSet> {
    let d = mean.len();
    let w = params.w_full();
    let rows = par::map(n, |i| {
        let mut r = rng.derive(i as u64);
        let x: Vec<f64> = (0..d).map(|j| mean[j] + params.sigma_diag[j] * r.standard_normal()).collect();
        let scale = params.c + dot(&params.g_noise, &x);
        let y = dot(&w, &x) + r.standard_normal() * scale;
        let h: f64 = x.iter().zip(&params.mu).map(|(a, m)| (a - m) * (a - m)).sum();
        (x, y, scale.abs(), h)
    });
    let mut data = Vec::with_capacity(n * d);
    let (mut y, mut noise_std, mut hardness) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (x, yi, ni, hi) in rows {
        data.extend(x);
        y.push(yi);
        noise_std.push(ni);
        hardness.push(hi);
    }
    let x_full = Matrix::from_vec(n, d, data)?;
    let x_observed = x_full.select_columns(&spec.observed_columns(params.dims()));
    Ok(LabeledSet {
        x_full,
        x_observed,
        y,
        noise_std,
        hardness,
    })
}

/// Train, validation and test draws for one scenario. `params` must already
/// carry the scenario's constants (see [`GeneratorParams::for_scenario`]).
pub fn generate_scenario(
    spec: &ScenarioSpec,
    params: &GeneratorParams,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    rng: &Rng,
) -> Result<SyntheticBundle> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(RevarError::param("split sizes must be at least 1"));
    }
    check_consistent(spec, params)?;
    let shifted = shifted_mean(spec, params, rng);
    Ok(SyntheticBundle {
        train: draw_split(spec, params, &params.mu, n_train, rng.derive(STREAM_TRAIN))?,
        val: draw_split(spec, params, &shifted, n_val, rng.derive(STREAM_VAL))?,
        test: draw_split(spec, params, &shifted, n_test, rng.derive(STREAM_TEST))?,
        params: params.clone(),
        spec: spec.clone(),
        shifted_mu: shifted,
    })
}

/// Samples a world for `spec` from `seed` and draws its splits.
pub fn generate_world(
    spec: &ScenarioSpec,
    dims: Dims,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<SyntheticBundle> {
    let rng = Rng::new(seed);
    let params = sample_generator_params(&rng.derive(0), dims)?.for_scenario(spec);
    generate_scenario(spec, &params, n_train, n_val, n_test, &rng.derive(1))
}

/// Per-instance features the learned weights are regressed on, one row
/// per row of `x_full`:
/// S1 `[1/(Gᵀx)²]`, S2 `[1/(Gᵀx)², h]`, S3 `[1/(W_eᵀΣ_eeW_e)]`,
/// S4 `[1/(W_eᵀΣ_eeW_e), h]`, S5 `[1]`.
pub fn target_weight_features(spec: &ScenarioSpec, params: &GeneratorParams, x_full: &Matrix) -> Result<Matrix> {
    let d = params.dims().total();
    if x_full.cols() != d {
        return Err(RevarError::Dimension {
            context: "target features input",
            expected: d,
            got: x_full.cols(),
        });
    }
    let inv_noise = |x: &[f64]| {
        let g = dot(&params.g_noise, x);
        1.0 / (g * g).max(NOISE_FLOOR)
    };
    let hardness = |x: &[f64]| x.iter().zip(&params.mu).map(|(a, m)| (a - m) * (a - m)).sum::<f64>();
    let inv_latent = 1.0 / params.latent_signal_variance().max(NOISE_FLOOR);
    let rows: Vec<Vec<f64>> = x_full
        .iter_rows()
        .map(|x| match spec.id {
            ScenarioId::S1 => vec![inv_noise(x)],
            ScenarioId::S2 => vec![inv_noise(x), hardness(x)],
            ScenarioId::S3 => vec![inv_latent],
            ScenarioId::S4 => vec![inv_latent, hardness(x)],
            ScenarioId::S5 => vec![1.0],
        })
        .collect();
    let cols = match spec.id {
        ScenarioId::S2 | ScenarioId::S4 => 2,
        _ => 1,
    };
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, cols));
    }
    Matrix::from_rows(&rows)
}

/// Three-class task with instance-dependent label noise.
///
/// The clean class is the tercile of `Wᵀx` under its population law. Each
/// training and test label is replaced by one of the two other classes,
/// chosen uniformly, with probability
/// `min(0.4, noise_level·0.4·|z|)` where `z` is `Gᵀx` standardized under the input
/// distribution. Validation labels are clean.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyClassSplit {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub clean: Vec<f64>,
    pub flip_prob: Vec<f64>,
}

impl NoisyClassSplit {
    pub fn dataset(&self) -> Dataset {
        Dataset {
            x: self.x.clone(),
            y: self.y.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyClassBundle {
    pub train: NoisyClassSplit,
    pub val: NoisyClassSplit,
    pub test: NoisyClassSplit,
    pub params: GeneratorParams,
}

pub const MAX_FLIP: f64 = 0.4;

pub fn generate_noisy_classification(
    dims: Dims,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    noise_level: f64,
    seed: u64,
) -> Result<NoisyClassBundle> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(RevarError::param("split sizes must be at least 1"));
    }
    if !(noise_level >= 0.0) || !noise_level.is_finite() {
        return Err(RevarError::param("noise level must be finite and non-negative"));
    }
    let rng = Rng::new(seed).derive(STREAM_CLASS);
    let params = sample_generator_params(&rng.derive(0), dims)?;
    let w = params.w_full();
    // Population moments of Wᵀx and Gᵀx under N(μ, diag σ²).
    let moments = |v: &[f64]| {
        let m = dot(v, &params.mu);
        let var: f64 = v.iter().zip(&params.sigma_diag).map(|(a, s)| a * a * s * s).sum();
        (m, var.sqrt())
    };
    let (wm, ws) = moments(&w);
    let (gm, gs) = moments(&params.g_noise);
    // ±z_{1/3} of the standard normal.
    const TERCILE_Z: f64 = 0.430_727_299_295_457_5;
    let (lo, hi) = (wm - TERCILE_Z * ws, wm + TERCILE_Z * ws);

    let split = |n: usize, label: u64, noisy: bool| -> Result<NoisyClassSplit> {
        let base = rng.derive(label);
        let d = params.mu.len();
        let rows = par::map(n, |i| {
            let mut r = base.derive(i as u64);
            let x: Vec<f64> = (0..d)
                .map(|j| params.mu[j] + params.sigma_diag[j] * r.standard_normal())
                .collect();
            let score = dot(&w, &x);
            let clean = if score < lo { 0usize } else if score < hi { 1 } else { 2 };
            let p = (noise_level * MAX_FLIP * ((dot(&params.g_noise, &x) - gm) / gs).abs()).min(MAX_FLIP);
            let flip = r.bernoulli(p);
            let other = 1 + r.index(2);
            let y = if noisy && flip { (clean + other) % 3 } else { clean };
            (x, y as f64, clean as f64, p)
        });
        let mut data = Vec::with_capacity(n * d);
        let (mut y, mut clean, mut flip_prob) = (Vec::new(), Vec::new(), Vec::new());
        for (x, yi, ci, pi) in rows {
            data.extend(x);
            y.push(yi);
            clean.push(ci);
            flip_prob.push(pi);
        }
        Ok(NoisyClassSplit {
            x: Matrix::from_vec(n, d, data)?,
            y,
            clean,
            flip_prob,
        })
    };
    Ok(NoisyClassBundle {
        train: split(n_train, STREAM_TRAIN, true)?,
        val: split(n_val, STREAM_VAL, false)?,
        test: split(n_test, STREAM_TEST, true)?,
        params,
    })
}

/// JSON sidecar written next to the split tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleSidecar {
    pub seed: u64,
    pub spec: ScenarioSpec,
    pub params: GeneratorParams,
    pub shifted_mu: Vec<f64>,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

pub fn split_header(d: usize) -> Vec<String> {
    let mut h: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    h.extend(["y", "noise_std", "hardness"].map(String::from));
    h
}

fn split_rows(set: &LabeledSet) -> Vec<Vec<f64>> {
    (0..set.len())
        .map(|i| {
            let mut r = set.x_full.row(i).to_vec();
            r.extend([set.y[i], set.noise_std[i], set.hardness[i]]);
            r
        })
        .collect()
}

/// Writes `train.csv`, `val.csv`, `test.csv` and `params.json` into `dir`.
/// Returns the written paths in that order.
pub fn write_bundle(bundle: &SyntheticBundle, seed: u64, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| RevarError::io(dir, e))?;
    let header = split_header(bundle.params.dims().total());
    let mut out = Vec::new();
    for (name, set) in SPLIT_NAMES.iter().zip([&bundle.train, &bundle.val, &bundle.test]) {
        let path = dir.join(format!("{name}.csv"));
        write_csv(&path, &header, &split_rows(set))?;
        out.push(path);
    }
    let sidecar = BundleSidecar {
        seed,
        spec: bundle.spec.clone(),
        params: bundle.params.clone(),
        shifted_mu: bundle.shifted_mu.clone(),
    };
    let path = dir.join("params.json");
    write_text(&path, &(serde_json::to_string_pretty(&sidecar)? + "\n"))?;
    out.push(path);
    Ok(out)
}

fn read_split(path: &Path, spec: &ScenarioSpec, dims: Dims) -> Result<LabeledSet> {
    let (header, rows) = read_csv(path)?;
    let d = dims.total();
    if header != split_header(d) {
        return Err(RevarError::Format {
            path: path.display().to_string(),
            message: format!("expected header x0..x{},y,noise_std,hardness", d - 1),
        });
    }
    let n = rows.len();
    let mut data = Vec::with_capacity(n * d);
    let (mut y, mut noise_std, mut hardness) = (Vec::new(), Vec::new(), Vec::new());
    for r in &rows {
        data.extend_from_slice(&r[..d]);
        y.push(r[d]);
        noise_std.push(r[d + 1]);
        hardness.push(r[d + 2]);
    }
    let x_full = Matrix::from_vec(n, d, data)?;
    let x_observed = x_full.select_columns(&spec.observed_columns(dims));
    Ok(LabeledSet {
        x_full,
        x_observed,
        y,
        noise_std,
        hardness,
    })
}

/// Reads a bundle written by [`write_bundle`]; returns it with its seed.
pub fn read_bundle(dir: &Path) -> Result<(SyntheticBundle, u64)> {
    let path = dir.join("params.json");
    let text = std::fs::read_to_string(&path).map_err(|e| RevarError::io(&path, e))?;
    let sidecar: BundleSidecar = serde_json::from_str(&text).map_err(|e| RevarError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let dims = sidecar.params.dims();
    let mut sets = Vec::new();
    for name in SPLIT_NAMES {
        sets.push(read_split(&dir.join(format!("{name}.csv")), &sidecar.spec, dims)?);
    }
    let test = sets.pop().unwrap();
    let val = sets.pop().unwrap();
    let train = sets.pop().unwrap();
    Ok((
        SyntheticBundle {
            train,
            val,
            test,
            params: sidecar.params,
            spec: sidecar.spec,
            shifted_mu: sidecar.shifted_mu,
        },
        sidecar.seed,
    ))
}

/// Renders the split tables exactly as [`write_bundle`] would, for digests.
pub fn render_split(set: &LabeledSet) -> String {
    let mut s = split_header(set.x_full.cols()).join(",");
    s.push('\n');
    for r in split_rows(set) {
        s.push_str(&r.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{mean, std_dev};

    #[test]
    fn params_have_requested_shapes() {
        let p = sample_generator_params(&Rng::new(1), Dims::default()).unwrap();
        assert_eq!(p.w_core.len(), 48);
        assert_eq!(p.w_latent.len(), 24);
        assert_eq!(p.g_noise.len(), 72);
        assert!(p.sigma_diag.iter().all(|&s| s >= SIGMA_FLOOR));
        assert_eq!(p, sample_generator_params(&Rng::new(1), Dims::default()).unwrap());
    }

    #[test]
    fn weight_prior_moments() {
        let mut w = Vec::new();
        for seed in 0..139 {
            w.extend(sample_generator_params(&Rng::new(seed), Dims::default()).unwrap().w_full());
        }
        assert!(w.len() >= 10_000);
        assert!((mean(&w) - 5.0).abs() < 0.3, "{}", mean(&w));
        assert!((std_dev(&w) - 10.0).abs() < 0.3, "{}", std_dev(&w));
    }

    #[test]
    fn presets_validate() {
        for id in ScenarioId::ALL {
            ScenarioSpec::preset(id).validate().unwrap();
        }
        assert!(ScenarioSpec::preset(ScenarioId::S3).with_shift(1.0).validate().is_err());
        assert!("S6".parse::<ScenarioId>().is_err());
    }

    #[test]
    fn observed_view_drops_latent_columns() {
        let s1 = generate_world(&ScenarioSpec::preset(ScenarioId::S1), Dims::default(), 5, 5, 5, 0).unwrap();
        let s3 = generate_world(&ScenarioSpec::preset(ScenarioId::S3), Dims::default(), 5, 5, 5, 0).unwrap();
        assert_eq!(s1.train.x_observed.cols(), 72);
        assert_eq!(s3.train.x_observed.cols(), 48);
        assert_eq!(s3.train.x_observed.row(2), &s3.train.x_full.row(2)[..48]);
    }

    #[test]
    fn zero_noise_gives_linear_targets() {
        let spec = ScenarioSpec::preset(ScenarioId::S1);
        let mut p = sample_generator_params(&Rng::new(3), Dims::default()).unwrap().for_scenario(&spec);
        p.g_noise.iter_mut().for_each(|g| *g = 0.0);
        let b = generate_scenario(&spec, &p, 50, 5, 5, &Rng::new(4)).unwrap();
        let w = p.w_full();
        for i in 0..50 {
            assert_eq!(b.train.y[i], dot(&w, b.train.x_full.row(i)));
            assert_eq!(b.train.noise_std[i], 0.0);
        }
    }

    #[test]
    fn residual_variance_tracks_noise_by_decile() {
        let spec = ScenarioSpec::preset(ScenarioId::S1);
        let b = generate_world(&spec, Dims::default(), 100_000, 1, 1, 11).unwrap();
        let w = b.params.w_full();
        let mut rows: Vec<(f64, f64)> = (0..b.train.len())
            .map(|i| {
                let x = b.train.x_full.row(i);
                let g = dot(&b.params.g_noise, x);
                let r = b.train.y[i] - dot(&w, x);
                (g * g, r * r)
            })
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for bucket in rows.chunks(10_000) {
            let expected = bucket.iter().map(|r| r.0).sum::<f64>();
            let got = bucket.iter().map(|r| r.1).sum::<f64>();
            assert!((got / expected - 1.0).abs() < 0.1, "ratio {}", got / expected);
        }
    }

    #[test]
    fn shift_patterns() {
        let s2 = generate_world(&ScenarioSpec::preset(ScenarioId::S2), Dims::default(), 5, 5, 5, 2).unwrap();
        assert!(s2.shifted_mu.iter().zip(&s2.params.mu).all(|(a, b)| a != b));
        let s5 = generate_world(&ScenarioSpec::preset(ScenarioId::S5), Dims::default(), 5, 5, 5, 2).unwrap();
        assert_eq!(&s5.shifted_mu[..48], &s5.params.mu[..48]);
        assert!(s5.shifted_mu[48..].iter().zip(&s5.params.mu[48..]).all(|(a, b)| a != b));
        let s1 = generate_world(&ScenarioSpec::preset(ScenarioId::S1), Dims::default(), 5, 5, 5, 2).unwrap();
        assert_eq!(s1.shifted_mu, s1.params.mu);
    }

    #[test]
    fn inconsistent_params_are_rejected() {
        let spec = ScenarioSpec::preset(ScenarioId::S5);
        let raw = sample_generator_params(&Rng::new(0), Dims::default()).unwrap();
        let err = generate_scenario(&spec, &raw, 5, 5, 5, &Rng::new(0));
        assert!(matches!(err, Err(RevarError::Validation(_))));
        generate_scenario(&spec, &raw.for_scenario(&spec), 5, 5, 5, &Rng::new(0)).unwrap();
    }

    #[test]
    fn feature_formulas() {
        let spec = ScenarioSpec::preset(ScenarioId::S2);
        let mut p = sample_generator_params(&Rng::new(0), Dims { core: 2, latent: 1 }).unwrap();
        p.g_noise = vec![1.0, 1.0, 0.0];
        p.mu = vec![0.5, 0.5, 3.0];
        let x = Matrix::from_rows(&[[1.0, 1.0, 7.0], [0.5, 0.5, 3.0], [0.0, 0.0, 0.0]]).unwrap();
        let f = target_weight_features(&spec, &p, &x).unwrap();
        assert_eq!(f.get(0, 0), 0.25);
        assert_eq!(f.get(1, 1), 0.0);
        assert_eq!(f.get(2, 0), 1.0 / NOISE_FLOOR);
        let s5 = target_weight_features(&ScenarioSpec::preset(ScenarioId::S5), &p, &x).unwrap();
        assert_eq!(s5.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate_world(&ScenarioSpec::preset(ScenarioId::S4), Dims::default(), 7, 3, 4, 9).unwrap();
        let files = write_bundle(&b, 9, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let (back, seed) = read_bundle(dir.path()).unwrap();
        assert_eq!(seed, 9);
        assert_eq!(back, b);
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert_eq!(text, render_split(&b.train));
        assert!(text.starts_with("x0,x1,"));
        assert!(text.lines().next().unwrap().ends_with("x71,y,noise_std,hardness"));
    }

    #[test]
    fn noisy_classes_are_balanced_and_flip_bounded() {
        let b = generate_noisy_classification(Dims::default(), 3000, 300, 10, 1.0, 5).unwrap();
        let counts = (0..3).map(|k| b.train.clean.iter().filter(|&&c| c == k as f64).count()).collect::<Vec<_>>();
        assert!(counts.iter().all(|&c| (800..1200).contains(&c)), "{counts:?}");
        assert!(b.train.flip_prob.iter().all(|&p| (0.0..=MAX_FLIP).contains(&p)));
        assert_eq!(b.val.y, b.val.clean);
        let flipped = b.train.y.iter().zip(&b.train.clean).filter(|(a, b)| a != b).count() as f64;
        let expected: f64 = b.train.flip_prob.iter().sum();
        assert!((flipped - expected).abs() < 4.0 * expected.sqrt() + 1.0);
    }
}
