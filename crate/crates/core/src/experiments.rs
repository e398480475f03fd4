//! Multi-seed studies: the target-weight fits across scenarios, the
//! shift sweep and the selective classification comparison.

use serde::{Deserialize, Serialize};

use crate::bilevel::{self, Method, Splits, Task, TrainConfig, TrainedPair};
use crate::data::{Dataset, Standardizer};
use crate::error::{Result, RevarError};
use crate::mcvar::McConfig;
use crate::numkit::{mean, std_dev, Rng};
use crate::par;
use crate::seleval::{self, ScenarioFit, ScoreKind, ShiftShare};
use crate::synthgen::{self, Dims, ScenarioId, ScenarioSpec, SyntheticBundle};

/// Reference R² values reported for (MWN, IBR, ReVar) per scenario.
pub const REFERENCE_R2: [(ScenarioId, [f64; 3]); 5] = [
    (ScenarioId::S1, [0.77, 0.78, 0.84]),
    (ScenarioId::S2, [0.58, 0.62, 0.80]),
    (ScenarioId::S3, [0.46, 0.52, 0.81]),
    (ScenarioId::S4, [0.51, 0.57, 0.82]),
    (ScenarioId::S5, [0.44, 0.58, 0.84]),
];

pub const TABLE1_METHODS: [Method; 3] = [Method::Mwn, Method::Ibr, Method::Revar];

/// Training settings for the desk-scale studies. The meta step is much
/// larger than the library default (which barely moves the weights over 60
/// epochs) and clipped, since shifted validation sets can produce meta-loss
/// gradients several orders of magnitude above the in-distribution ones.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        lr_meta: 0.1,
        meta_grad_clip: Some(0.1),
        meta_interval: 5,
        ..TrainConfig::default()
    }
}

/// World sizes and training settings shared by the regression studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub dims: Dims,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Worlds per seed for the scenarios fitted across worlds.
    pub worlds: usize,
    pub train: TrainConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            dims: Dims::default(),
            n_train: 2000,
            n_val: 500,
            n_test: 1000,
            worlds: 6,
            train: desk_train_config(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test)] {
            if v == 0 {
                return Err(RevarError::Config {
                    field: field.into(),
                    message: "must be at least 1".into(),
                });
            }
        }
        if self.dims.core == 0 {
            return Err(RevarError::Config {
                field: "dims.core".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.worlds < 3 {
            return Err(RevarError::Config {
                field: "worlds".into(),
                message: format!("cross-world fits need at least 3 worlds, got {}", self.worlds),
            });
        }
        self.train.validate()
    }

    pub fn world(&self, spec: &ScenarioSpec, seed: u64) -> Result<SyntheticBundle> {
        synthgen::generate_world(spec, self.dims, self.n_train, self.n_val, self.n_test, seed)
    }
}

/// Seed of world `k` of `scenario` under run seed `seed`.
pub fn world_seed(seed: u64, scenario: ScenarioId, k: usize) -> u64 {
    Rng::new(seed).derive(1000 * (scenario as u64 + 1) + k as u64).next_u64()
}

/// Standardises inputs and targets on the training split. The test inputs
/// double as the unlabeled pool.
pub fn regression_splits(bundle: &SyntheticBundle) -> Result<(Splits, Standardizer)> {
    let train = bundle.train.dataset();
    let st = Standardizer::fit(&train, true);
    Ok((
        Splits {
            train: st.transform(&train),
            val: st.transform(&bundle.val.dataset()),
            unlabeled: Some(st.transform_x(&bundle.test.x_observed)),
            task: Task::Regression,
        },
        st,
    ))
}

/// Weights the trained pair assigns to the training rows; unit weights
/// for methods without a weighting network.
pub fn training_weights(pair: &TrainedPair, train: &Dataset) -> Result<Vec<f64>> {
    match &pair.meta {
        Some(meta) => bilevel::instance_weights(meta, &pair.classifier, train),
        None => Ok(vec![1.0; train.len()]),
    }
}

/// Trains `cfg.method` on one world under `seed` and returns the pair with
/// its weights on the training rows.
pub fn train_world(bundle: &SyntheticBundle, cfg: &TrainConfig, seed: u64) -> Result<(TrainedPair, Vec<f64>)> {
    let (splits, _) = regression_splits(bundle)?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let pair = bilevel::train(&splits, &cfg)?;
    let w = training_weights(&pair, &splits.train)?;
    Ok((pair, w))
}

pub fn coefficient_of_variation(w: &[f64]) -> f64 {
    let m = mean(w);
    if m == 0.0 {
        return f64::INFINITY;
    }
    std_dev(w) / m.abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub seed: u64,
    pub scenario: ScenarioId,
    pub method: Method,
    pub r2: f64,
    pub spearman: f64,
    /// Coefficient of variation of the weights on the first world.
    pub weight_cv: f64,
    pub fit: ScenarioFit,
}

/// R² of each method's weights against the scenario targets for one seed.
/// Rows come back in `scenarios × methods` order.
pub fn table1_seed(cfg: &StudyConfig, seed: u64, scenarios: &[ScenarioId], methods: &[Method]) -> Result<Vec<Table1Row>> {
    cfg.validate()?;
    struct Job {
        scenario: ScenarioId,
        method: Method,
        world: usize,
    }
    let mut jobs = Vec::new();
    for &scenario in scenarios {
        let n_worlds = if scenario.needs_multi_world() { cfg.worlds } else { 1 };
        for &method in methods {
            for world in 0..n_worlds {
                jobs.push(Job { scenario, method, world });
            }
        }
    }
    let results = par::map(jobs.len(), |i| {
        let job = &jobs[i];
        let spec = ScenarioSpec::preset(job.scenario);
        let bundle = cfg.world(&spec, world_seed(seed, job.scenario, job.world))?;
        let method_cfg = TrainConfig { method: job.method, ..cfg.train.clone() };
        let (_, w) = train_world(&bundle, &method_cfg, seed)?;
        Ok((bundle, w))
    });
    let mut results = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter();
    let mut rows = Vec::new();
    for &scenario in scenarios {
        let n_worlds = if scenario.needs_multi_world() { cfg.worlds } else { 1 };
        for &method in methods {
            let mut worlds: Vec<(SyntheticBundle, Vec<f64>)> = results.by_ref().take(n_worlds).collect();
            let rest = worlds.split_off(1);
            let (bundle, w) = &worlds[0];
            let fit = seleval::scenario_fit(bundle, w, if rest.is_empty() { None } else { Some(&rest) })?;
            rows.push(Table1Row {
                seed,
                scenario,
                method,
                r2: fit.r2,
                spearman: fit.spearman,
                weight_cv: coefficient_of_variation(w),
                fit,
            });
        }
    }
    Ok(rows)
}

/// Whether R² satisfies ReVar > IBR > MWN for the given rows of one
/// scenario and seed.
pub fn ordering_holds(rows: &[Table1Row]) -> bool {
    let r2 = |m: Method| rows.iter().find(|r| r.method == m).map(|r| r.r2);
    match (r2(Method::Revar), r2(Method::Ibr), r2(Method::Mwn)) {
        (Some(a), Some(b), Some(c)) => a > b && b > c,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub scenario: ScenarioId,
    #[serde(flatten)]
    pub share: ShiftShare,
}

/// Hardness shares for every `(seed, scenario, s)`, in that order.
pub fn sweep(cfg: &StudyConfig, scenarios: &[ScenarioId], s_values: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let jobs: Vec<(u64, ScenarioId)> = seeds
        .iter()
        .flat_map(|&seed| scenarios.iter().map(move |&sc| (seed, sc)))
        .collect();
    let out = par::map(jobs.len(), |i| {
        let (seed, scenario) = jobs[i];
        let shares = seleval::shift_sweep(scenario, s_values, cfg, world_seed(seed, scenario, 0))?;
        Ok(shares
            .into_iter()
            .map(|share| SweepRow { seed, scenario, share })
            .collect::<Vec<_>>())
    });
    Ok(out.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

pub fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

/// Settings of the noisy-label selective classification study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectiveConfig {
    pub dims: Dims,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise_level: f64,
    /// Used for the main method; the comparison model is the same config
    /// with `method = erm`.
    pub train: TrainConfig,
}

impl Default for SelectiveConfig {
    fn default() -> Self {
        SelectiveConfig {
            dims: Dims::default(),
            n_train: 2000,
            n_val: 500,
            n_test: 1000,
            noise_level: 1.0,
            train: desk_train_config(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveResult {
    pub seed: u64,
    pub auarc_g: f64,
    pub auarc_sr: f64,
    pub auarc_entropy: f64,
    pub auarc_mcd: f64,
    pub accuracy_revar: f64,
    pub accuracy_erm: f64,
    pub ece_revar: f64,
    pub ece_erm: f64,
}

impl SelectiveResult {
    pub fn g_wins(&self) -> bool {
        self.auarc_g > self.auarc_sr && self.auarc_g > self.auarc_mcd
    }
}

fn correctness(net: &bilevel::TrainedPair, data: &Dataset) -> Result<(Vec<bool>, Vec<f64>)> {
    let preds = seleval::predictions(&net.classifier, &data.x)?;
    Ok((
        preds.iter().zip(&data.y).map(|(p, &y)| p.0 as f64 == y).collect(),
        preds.iter().map(|p| p.1).collect(),
    ))
}

/// Trains the main method and ERM on the same noisy three-class task and
/// compares AUARC of the weighting network's score against the softmax
/// response and MC-dropout entropy of the ERM model.
pub fn selective_study(cfg: &SelectiveConfig, seed: u64) -> Result<SelectiveResult> {
    let bundle = synthgen::generate_noisy_classification(cfg.dims, cfg.n_train, cfg.n_val, cfg.n_test, cfg.noise_level, seed)?;
    let train = bundle.train.dataset();
    let st = Standardizer::fit(&train, false);
    let test = st.transform(&bundle.test.dataset());
    let splits = Splits {
        train: st.transform(&train),
        val: st.transform(&bundle.val.dataset()),
        unlabeled: Some(test.x.clone()),
        task: Task::Classification { n_classes: 3 },
    };
    let main_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let erm_cfg = TrainConfig { method: Method::Erm, ..main_cfg.clone() };
    let pairs = par::map(2, |i| bilevel::train(&splits, if i == 0 { &main_cfg } else { &erm_cfg }));
    let mut pairs = pairs.into_iter();
    let ours = pairs.next().unwrap()?;
    let erm = pairs.next().unwrap()?;

    let grid = seleval::default_grid();
    let mc: &McConfig = &cfg.train.mc;
    let score_rng = Rng::new(seed).derive(0x5e1e);
    let (ok_ours, conf_ours) = correctness(&ours, &test)?;
    let (ok_erm, conf_erm) = correctness(&erm, &test)?;
    let area = |pair: &TrainedPair, kind: ScoreKind, ok: &[bool]| -> Result<f64> {
        let u = seleval::uncertainty_scores(kind, &pair.classifier, pair.meta.as_ref(), &test.x, mc, &score_rng)?;
        Ok(seleval::auarc(&seleval::rejection_curve(&u, ok, &grid, kind)?))
    };
    let acc = |ok: &[bool]| ok.iter().filter(|&&b| b).count() as f64 / ok.len() as f64;
    Ok(SelectiveResult {
        seed,
        auarc_g: area(&ours, ScoreKind::GScore, &ok_ours)?,
        auarc_sr: area(&erm, ScoreKind::SoftmaxResponse, &ok_erm)?,
        auarc_entropy: area(&erm, ScoreKind::Entropy, &ok_erm)?,
        auarc_mcd: area(&erm, ScoreKind::Mcd, &ok_erm)?,
        accuracy_revar: acc(&ok_ours),
        accuracy_erm: acc(&ok_erm),
        ece_revar: seleval::ece(&conf_ours, &ok_ours, seleval::DEFAULT_ECE_BINS)?,
        ece_erm: seleval::ece(&conf_erm, &ok_erm, seleval::DEFAULT_ECE_BINS)?,
    })
}
