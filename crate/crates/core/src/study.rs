//! End-to-end studies: sample data, train both model families per trial and
//! setting, score them on a grid, and collect one row per run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use num_traits::Signed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffops::{
    airy_strain, curl_constraint3d, div, equilibrium_constraint, exact_decimal, grad, poisson_ratio, rot_grad2d,
    Coeff, OperatorMatrix,
};
use crate::error::{Error, Result};
use crate::fields::{
    load_field_csv, mean_abs_rows, prediction_grid, rmse, sample_dataset, AffineField, CurlFreeField,
    Dataset, DivFreeField, Domain, StrainField, StrainParams, TrueField,
};
use crate::model::{AffineTail, ConstrainedModel, Family, FieldModel, StandardModel};
use crate::network::{Activation, MlpSpec};
use crate::training::{predict_chunked, train, Penalty, TrainConfig, TrainReport};

/// Strain results are reported in microstrain.
pub const MICROSTRAIN: f64 = 1e6;
/// Violation is measured on at most this many held-out points.
const VIOLATION_POINTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    DataSize,
    NetSize,
    LambdaSweep,
    Regularization,
    StrainDemo,
    AffineDemo,
    ExternalField,
}

impl StudyKind {
    pub const ALL: [StudyKind; 7] = [
        StudyKind::DataSize,
        StudyKind::NetSize,
        StudyKind::LambdaSweep,
        StudyKind::Regularization,
        StudyKind::StrainDemo,
        StudyKind::AffineDemo,
        StudyKind::ExternalField,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StudyKind::DataSize => "data-size",
            StudyKind::NetSize => "net-size",
            StudyKind::LambdaSweep => "lambda-sweep",
            StudyKind::Regularization => "regularization",
            StudyKind::StrainDemo => "strain-demo",
            StudyKind::AffineDemo => "affine-demo",
            StudyKind::ExternalField => "external-field",
        }
    }
}

impl std::str::FromStr for StudyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StudyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown study {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Families {
    #[default]
    Both,
    Constrained,
    Standard,
}

impl Families {
    fn list(self) -> Vec<Family> {
        match self {
            Families::Both => vec![Family::Constrained, Family::Standard],
            Families::Constrained => vec![Family::Constrained],
            Families::Standard => vec![Family::Standard],
        }
    }
}

/// A study as read from JSON. Unset sweeps take per-study defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub study: StudyKind,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub families: Families,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub measurements: Option<Vec<usize>>,
    #[serde(default)]
    pub neurons: Option<Vec<usize>>,
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default)]
    pub weight_decays: Option<Vec<f64>>,
    #[serde(default)]
    pub constraint_points: Option<usize>,
    #[serde(default)]
    pub noise_sigma: Option<f64>,
    /// Envelope constant of the divergence-free test field.
    #[serde(default = "default_a")]
    pub a: f64,
    #[serde(default)]
    pub grid: Option<usize>,
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Model coordinates are `x / input_scale`.
    #[serde(default)]
    pub input_scale: Option<f64>,
    /// Model targets are `y · output_scale`.
    #[serde(default)]
    pub output_scale: Option<f64>,
    #[serde(default)]
    pub strain: StrainParams,
    /// External dataset; the external-field study synthesises one when unset.
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default = "default_synthetic_points")]
    pub synthetic_points: usize,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default)]
    pub threads: Option<usize>,
}

fn default_trials() -> usize {
    20
}
fn default_a() -> f64 {
    0.01
}
fn default_validation() -> f64 {
    0.2
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_synthetic_points() -> usize {
    16_000
}
fn default_holdout() -> f64 {
    0.5
}

impl StudyConfig {
    pub fn new(study: StudyKind) -> Self {
        StudyConfig {
            study,
            trials: default_trials(),
            base_seed: 0,
            families: Families::Both,
            train: TrainConfig::default(),
            measurements: None,
            neurons: None,
            hidden: None,
            lambdas: None,
            weight_decays: None,
            constraint_points: None,
            noise_sigma: None,
            a: default_a(),
            grid: None,
            validation_fraction: default_validation(),
            activation: default_activation(),
            input_scale: None,
            output_scale: None,
            strain: StrainParams::default(),
            csv: None,
            synthetic_points: default_synthetic_points(),
            holdout_fraction: default_holdout(),
            threads: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("study config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn measurements(&self) -> Vec<usize> {
        self.measurements.clone().unwrap_or_else(|| match self.study {
            StudyKind::DataSize => vec![50, 100, 250, 500, 1000, 2000, 4000],
            StudyKind::NetSize | StudyKind::Regularization => vec![4000],
            StudyKind::LambdaSweep => vec![3000],
            StudyKind::StrainDemo | StudyKind::AffineDemo => vec![200],
            StudyKind::ExternalField => vec![500],
        })
    }

    fn neurons(&self) -> Vec<usize> {
        self.neurons
            .clone()
            .unwrap_or_else(|| vec![3, 12, 21, 51, 99, 150, 201])
    }

    fn hidden(&self) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| match self.study {
            StudyKind::StrainDemo => vec![20, 10, 5],
            StudyKind::ExternalField => vec![150, 75],
            _ => vec![100, 50],
        })
    }

    fn noise_sigma(&self) -> f64 {
        self.noise_sigma.unwrap_or(match self.study {
            StudyKind::StrainDemo => 2.5e-4,
            StudyKind::ExternalField => 0.05,
            _ => 0.1,
        })
    }

    fn grid(&self) -> usize {
        self.grid.unwrap_or(match self.study {
            StudyKind::StrainDemo => 50,
            _ => 20,
        })
    }

    fn scales(&self) -> (f64, f64) {
        let (i, o) = match self.study {
            StudyKind::StrainDemo => (0.01, 1e3),
            _ => (1.0, 1.0),
        };
        (self.input_scale.unwrap_or(i), self.output_scale.unwrap_or(o))
    }

    /// Check the configuration and list the runs it implies.
    pub fn settings(&self) -> Result<Vec<Setting>> {
        let bad = |m: String| Err(Error::Config(m));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)".into());
        }
        if !(self.a.is_finite()) || !(self.noise_sigma() >= 0.0) {
            return bad("a must be finite and noise_sigma non-negative".into());
        }
        let (si, so) = self.scales();
        if !(si > 0.0 && so > 0.0 && si.is_finite() && so.is_finite()) {
            return bad("scales must be positive".into());
        }
        if self.grid() < 2 {
            return bad("grid must be at least 2".into());
        }
        self.train.validate()?;
        let ms = self.measurements();
        if ms.is_empty() || ms.contains(&0) {
            return bad("measurements must be a non-empty list of positive counts".into());
        }
        if ms.iter().any(|&n| n < 2) {
            return bad("at least 2 measurements are needed for a validation split".into());
        }
        let hidden = self.hidden();
        if hidden.is_empty() || hidden.contains(&0) {
            return bad("hidden widths must be a non-empty list of positive widths".into());
        }
        let base = Setting {
            label: String::new(),
            measurements: ms[0],
            hidden: hidden.clone(),
            penalty: 0.0,
            weight_decay: self.train.weight_decay,
            reference: false,
        };
        let neuron_settings = |gammas: &[f64]| -> Result<Vec<Setting>> {
            let ns = self.neurons();
            if ns.is_empty() {
                return bad("neurons must be non-empty".into());
            }
            let mut out = Vec::new();
            for &n in &ns {
                if n == 0 || n % 3 != 0 {
                    return bad(format!("neuron total {n} is not a positive multiple of 3"));
                }
                for &g in gammas {
                    let label = if gammas.len() > 1 || self.study == StudyKind::Regularization {
                        format!("neurons={n};gamma={g}")
                    } else {
                        format!("neurons={n}")
                    };
                    out.push(Setting {
                        label,
                        hidden: vec![2 * n / 3, n / 3],
                        weight_decay: g,
                        ..base.clone()
                    });
                }
            }
            Ok(out)
        };
        match self.study {
            StudyKind::DataSize => Ok(ms
                .iter()
                .map(|&n| Setting {
                    label: format!("measurements={n}"),
                    measurements: n,
                    ..base.clone()
                })
                .collect()),
            StudyKind::NetSize => neuron_settings(&[self.train.weight_decay]),
            StudyKind::Regularization => {
                let gs = self.weight_decays.clone().unwrap_or_else(|| vec![0.0, 1e-4]);
                if gs.is_empty() || gs.iter().any(|g| !(*g >= 0.0)) {
                    return bad("weight_decays must be a non-empty list of non-negative values".into());
                }
                neuron_settings(&gs)
            }
            StudyKind::LambdaSweep => {
                let ls = self.lambdas.clone().unwrap_or_else(|| vec![0.0, 1.0, 4.0, 16.0, 64.0, 256.0]);
                if ls.is_empty() || !ls.contains(&0.0) || ls.iter().any(|l| !(*l >= 0.0)) {
                    return bad("lambdas must be non-negative and include 0".into());
                }
                if self.constraint_points() == 0 {
                    return bad("lambda sweep needs constraint_points > 0".into());
                }
                let mut out: Vec<Setting> = ls
                    .iter()
                    .map(|&l| Setting {
                        label: format!("lambda={l}"),
                        penalty: l,
                        ..base.clone()
                    })
                    .collect();
                out.push(Setting {
                    label: "reference".into(),
                    reference: true,
                    ..base.clone()
                });
                Ok(out)
            }
            StudyKind::StrainDemo | StudyKind::AffineDemo | StudyKind::ExternalField => Ok(vec![Setting {
                label: format!("measurements={}", ms[0]),
                ..base
            }]),
        }
    }

    fn constraint_points(&self) -> usize {
        self.constraint_points.unwrap_or(match self.study {
            StudyKind::LambdaSweep => 3000,
            _ => self.train.constraint_points,
        })
    }

    /// `(trial, setting, family)` triples in output order.
    pub fn jobs(&self) -> Result<Vec<Job>> {
        let settings = self.settings()?;
        let fams = self.families.list();
        let mut jobs = Vec::new();
        for trial in 0..self.trials {
            for (si, s) in settings.iter().enumerate() {
                for &family in &fams {
                    let keep = match (self.study, s.reference, family) {
                        (StudyKind::LambdaSweep, true, f) => f == Family::Constrained,
                        (StudyKind::LambdaSweep, false, f) => {
                            f == Family::Standard || self.families == Families::Constrained
                        }
                        _ => true,
                    };
                    if keep {
                        jobs.push(Job {
                            trial,
                            setting: si,
                            family,
                        });
                    }
                }
            }
        }
        Ok(jobs)
    }
}

/// One point of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Setting {
    pub label: String,
    pub measurements: usize,
    pub hidden: Vec<usize>,
    pub penalty: f64,
    pub weight_decay: f64,
    /// Constrained reference line of the penalty sweep.
    pub reference: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Job {
    pub trial: usize,
    pub setting: usize,
    pub family: Family,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub study: StudyKind,
    pub trial: usize,
    pub seed: u64,
    pub setting: String,
    pub family: Family,
    pub rmse: f64,
    pub violation: f64,
    /// Whether the constraint composed with the model head vanishes symbolically.
    pub exact: bool,
    pub detail: String,
    pub status: String,
    pub train_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
}

pub const CSV_HEADER: &str =
    "study,trial,seed,setting,model_family,rmse,mean_abs_constraint_violation,exact,detail,status";

impl StudyResult {
    /// Results table. Timings are left out so reruns compare byte for byte.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:e},{:e},{},{},{}",
                r.study.as_str(),
                r.trial,
                r.seed,
                r.setting,
                r.family.as_str(),
                r.rmse,
                r.violation,
                if r.exact { "PASS" } else { "FAIL" },
                r.detail,
                r.status
            );
        }
        s
    }

    pub fn timings_csv(&self) -> String {
        let mut s = String::from("trial,setting,model_family,train_seconds\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:.3}", r.trial, r.setting, r.family.as_str(), r.train_seconds);
        }
        s
    }

    pub fn select<'a>(&'a self, setting: &'a str, family: Family) -> impl Iterator<Item = &'a StudyRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.setting == setting && r.family == family)
    }

    pub fn median_rmse(&self, setting: &str, family: Family) -> f64 {
        median(self.select(setting, family).map(|r| r.rmse))
    }

    pub fn median_violation(&self, setting: &str, family: Family) -> f64 {
        median(self.select(setting, family).map(|r| r.violation))
    }

    pub fn settings(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.setting) {
                out.push(r.setting.clone());
            }
        }
        out
    }
}

/// Median of the finite values; NaN when there are none.
pub fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Deterministic child seed for one purpose of one trial.
pub fn derive_seed(trial_seed: u64, purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(trial_seed ^ splitmix(h))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn coeff(v: f64) -> Result<Coeff> {
    exact_decimal(v).ok_or_else(|| Error::Config(format!("cannot represent {v} exactly")))
}

/// Scale so the largest coefficient has magnitude 1.
fn normalized(op: &OperatorMatrix) -> OperatorMatrix {
    let max = op
        .entries()
        .iter()
        .flat_map(|p| p.terms().map(|(_, c)| c.abs()))
        .max();
    match max {
        Some(m) if !num_traits::Zero::is_zero(&m) => op.scale(&num_traits::Inv::inv(m)),
        _ => op.clone(),
    }
}

/// Everything a trial needs that does not depend on the trial.
struct Problem {
    field: Option<Box<dyn TrueField>>,
    data: Option<Dataset>,
    /// Region of the measurements, in model coordinates.
    domain: Domain,
    constraint: OperatorMatrix,
    transform: OperatorMatrix,
    /// Right-hand side `b` of `C[f] = b`, per constraint row.
    rhs: Vec<f64>,
    affine: bool,
    input_scale: f64,
    output_scale: f64,
    report_scale: f64,
    grid: Array2<f64>,
    truth: Array2<f64>,
}

impl Problem {
    fn build(cfg: &StudyConfig) -> Result<Problem> {
        let (si, so) = cfg.scales();
        let grid_m = cfg.grid();
        let (field, data, domain, constraint, transform, rhs, affine, report): (
            Option<Box<dyn TrueField>>,
            Option<Dataset>,
            Domain,
            OperatorMatrix,
            OperatorMatrix,
            Vec<f64>,
            bool,
            f64,
        ) = match cfg.study {
            StudyKind::DataSize | StudyKind::NetSize | StudyKind::LambdaSweep | StudyKind::Regularization => (
                Some(Box::new(DivFreeField { a: cfg.a })),
                None,
                Domain::cube(2, 0.0, 4.0),
                div(2),
                rot_grad2d(),
                vec![0.0],
                false,
                1.0,
            ),
            StudyKind::AffineDemo => (
                Some(Box::new(AffineField { a: cfg.a })),
                None,
                Domain::cube(2, 0.0, 4.0),
                div(2),
                rot_grad2d(),
                vec![0.8],
                true,
                1.0,
            ),
            StudyKind::StrainDemo => {
                cfg.strain.validate()?;
                let nu = poisson_ratio(cfg.strain.poisson);
                (
                    Some(Box::new(StrainField { params: cfg.strain })),
                    None,
                    cfg.strain.domain(),
                    equilibrium_constraint(&nu),
                    airy_strain(&nu),
                    vec![0.0, 0.0],
                    false,
                    MICROSTRAIN,
                )
            }
            StudyKind::ExternalField => {
                let data = match &cfg.csv {
                    Some(p) => load_field_csv(p)?,
                    None => synthetic_curl_free(cfg.synthetic_points, cfg.noise_sigma(), cfg.base_seed)?,
                };
                if data.input_dim() != 3 || data.output_dim() != 3 {
                    return Err(Error::Config(format!(
                        "external field must map R^3 -> R^3, got R^{} -> R^{}",
                        data.input_dim(),
                        data.output_dim()
                    )));
                }
                let lower = data.inputs.map_axis(Axis(0), |c| c.fold(f64::INFINITY, |a, &b| a.min(b)));
                let upper = data.inputs.map_axis(Axis(0), |c| c.fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
                let domain = Domain::new(lower.to_vec(), upper.to_vec())?;
                (None, Some(data), domain, curl_constraint3d(), grad(3), vec![0.0; 3], false, 1.0)
            }
        };
        let (grid, truth) = match &field {
            Some(f) => {
                let g = prediction_grid(&domain, grid_m)?;
                let t = f.eval_many(&g);
                (g, t)
            }
            None => (Array2::zeros((0, domain.dim())), Array2::zeros((0, domain.dim()))),
        };
        // model coordinates: x' = x / si, y' = y * so
        let sic = coeff(si)?;
        let constraint = constraint.rescale_inputs(&sic)?;
        let transform = normalized(&transform.rescale_inputs(&sic)?);
        let domain = Domain::new(
            domain.lower.iter().map(|v| v / si).collect(),
            domain.upper.iter().map(|v| v / si).collect(),
        )?;
        Ok(Problem {
            field,
            data,
            domain,
            constraint,
            transform,
            rhs,
            affine,
            input_scale: si,
            output_scale: so,
            report_scale: report,
            grid,
            truth,
        })
    }

    fn to_model(&self, d: &Dataset) -> Dataset {
        let mut out = d.clone();
        out.inputs.mapv_inplace(|v| v / self.input_scale);
        out.targets.mapv_inplace(|v| v * self.output_scale);
        out
    }
}

/// Noisy gradient field of a fixed random potential on `[-1, 1]^3`.
pub fn synthetic_curl_free(n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    let field = CurlFreeField::random(3, 16, derive_seed(seed, "potential"));
    sample_dataset(&field, n, &Domain::cube(3, -1.0, 1.0), sigma, derive_seed(seed, "samples"))
}

fn build_model(p: &Problem, s: &Setting, family: Family, act: Activation, seed: u64) -> Result<Box<dyn FieldModel>> {
    let d = p.transform.input_dim();
    Ok(match family {
        Family::Constrained => {
            let spec = MlpSpec::with_hidden(d, &s.hidden, p.transform.cols(), act)?;
            let tail = p.affine.then(|| AffineTail::diagonal(d, p.transform.rows()));
            Box::new(ConstrainedModel::init(spec, p.transform.clone(), tail, seed)?)
        }
        Family::Standard => {
            let spec = MlpSpec::with_hidden(d, &s.hidden, p.transform.rows(), act)?;
            Box::new(StandardModel::init(spec, seed))
        }
    })
}

/// Training, validation and scoring sets of one trial, in physical units.
struct TrialData {
    train: Dataset,
    val: Dataset,
    /// Held-out points for external data.
    test: Option<Dataset>,
}

fn trial_data(cfg: &StudyConfig, p: &Problem, s: &Setting, trial_seed: u64) -> Result<TrialData> {
    let (pool, test) = match &p.data {
        Some(d) => {
            let (rest, held) = d.split(cfg.holdout_fraction, derive_seed(trial_seed, "holdout"));
            if rest.len() < s.measurements {
                return Err(Error::Config(format!(
                    "{} training points requested, {} available after the hold-out split",
                    s.measurements,
                    rest.len()
                )));
            }
            (rest.head(s.measurements), Some(held))
        }
        None => {
            let field = p.field.as_deref().expect("analytic field");
            // sample in physical coordinates
            let phys = Domain::new(
                p.domain.lower.iter().map(|v| v * p.input_scale).collect(),
                p.domain.upper.iter().map(|v| v * p.input_scale).collect(),
            )?;
            let d = sample_dataset(field, s.measurements, &phys, cfg.noise_sigma(), derive_seed(trial_seed, "data"))?;
            (d, None)
        }
    };
    let (train, val) = pool.split(cfg.validation_fraction, derive_seed(trial_seed, "split"));
    Ok(TrialData { train, val, test })
}

/// Outcome of one run: its row, the trained model, and the loss trace unless
/// training aborted.
pub struct Trained {
    pub row: StudyRow,
    pub model: Box<dyn FieldModel>,
    pub report: Option<TrainReport>,
}

fn run_job(cfg: &StudyConfig, p: &Problem, settings: &[Setting], job: Job) -> Result<Trained> {
    let s = &settings[job.setting];
    let trial_seed = cfg.base_seed.wrapping_add(job.trial as u64);
    let mut row = StudyRow {
        study: cfg.study,
        trial: job.trial,
        seed: trial_seed,
        setting: s.label.clone(),
        family: job.family,
        rmse: f64::NAN,
        violation: f64::NAN,
        exact: false,
        detail: String::new(),
        status: "ok".into(),
        train_seconds: 0.0,
    };
    let td = trial_data(cfg, p, s, trial_seed)?;
    let init_seed = derive_seed(trial_seed, &format!("init-{}", job.family.as_str()));
    let mut model = build_model(p, s, job.family, cfg.activation, init_seed)?;
    row.exact = model.satisfies_exactly(&p.constraint)?;

    let tcfg = TrainConfig {
        seed: derive_seed(trial_seed, "train"),
        weight_decay: s.weight_decay,
        penalty: if job.family == Family::Standard { s.penalty } else { 0.0 },
        constraint_points: cfg.constraint_points(),
        ..cfg.train.clone()
    };
    let penalty = Penalty {
        op: p.constraint.clone(),
        domain: p.domain.clone(),
    };
    let (train_set, val_set) = (p.to_model(&td.train), p.to_model(&td.val));
    let start = Instant::now();
    let outcome = train(model.as_mut(), &train_set, &val_set, &tcfg, Some(&penalty));
    row.train_seconds = start.elapsed().as_secs_f64();
    let report = match outcome {
        Ok(r) => r,
        Err(Error::NonFinite { epoch }) => {
            row.status = format!("aborted: non-finite loss at epoch {epoch}");
            return Ok(Trained {
                row,
                model,
                report: None,
            });
        }
        Err(e) => return Err(e),
    };

    // score in physical units
    let (xs, truth) = match &td.test {
        Some(t) => (t.inputs.clone(), t.targets.clone()),
        None => (p.grid.clone(), p.truth.clone()),
    };
    let xs_model = xs.mapv(|v| v / p.input_scale);
    let pred = predict_chunked(model.as_ref(), xs_model.view())? / p.output_scale;
    row.rmse = rmse(&pred, &truth) * p.report_scale;

    let vx = xs_model.slice(ndarray::s![..xs_model.nrows().min(VIOLATION_POINTS), ..]);
    // the rescaled constraint acts on model coordinates with physical units
    row.violation = match model.constraint_residual_batch(&p.constraint, vx) {
        Ok(r) => {
            let mut r = r / p.output_scale;
            for (mut col, b) in r.columns_mut().into_iter().zip(&p.rhs) {
                col.mapv_inplace(|v| v - b);
            }
            mean_abs_rows(&r) * p.report_scale
        }
        Err(Error::Capability { .. }) if row.exact => 0.0,
        Err(e) => return Err(e),
    };
    if let Some(t) = model.affine_tail() {
        let origin = Array2::<f64>::zeros((1, model.input_dim()));
        let c = t.apply(&p.constraint.to_float(), origin.view()) / p.output_scale;
        let parts: Vec<String> = c.iter().map(|v| format!("{v:e}")).collect();
        row.detail = format!("learned_rhs={}", parts.join(" "));
    }
    Ok(Trained {
        row,
        model,
        report: Some(report),
    })
}

fn pool(cfg: &StudyConfig) -> Result<rayon::ThreadPool> {
    let env = std::env::var("FIELDLEARN_THREADS")
        .ok()
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("FIELDLEARN_THREADS={v:?} is not a count")))
        })
        .transpose()?;
    let n = match (cfg.threads, env) {
        (Some(a), Some(b)) => a.min(b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Run every `(trial, setting, family)` of the study.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    let settings = cfg.settings()?;
    let jobs = cfg.jobs()?;
    let problem = Problem::build(cfg)?;
    let rows = pool(cfg)?.install(|| {
        jobs.par_iter()
            .map(|&j| run_job(cfg, &problem, &settings, j).map(|t| t.row))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(StudyResult { rows })
}

/// Train one model of `family` on the first setting of trial 0.
pub fn run_single(cfg: &StudyConfig, family: Family) -> Result<Trained> {
    let settings = cfg.settings()?;
    let problem = Problem::build(cfg)?;
    run_job(
        cfg,
        &problem,
        &settings,
        Job {
            trial: 0,
            setting: 0,
            family,
        },
    )
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config: &'a StudyConfig,
    version: &'static str,
    git_describe: String,
    wall_clock_seconds: f64,
    rows: usize,
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Write `results.csv`, `timings.csv` and `manifest.json` into `dir`.
pub fn write_outputs(result: &StudyResult, cfg: &StudyConfig, dir: &Path, wall_clock: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), result.to_csv())?;
    fs::write(dir.join("timings.csv"), result.timings_csv())?;
    let manifest = RunManifest {
        config: cfg,
        version: env!("CARGO_PKG_VERSION"),
        git_describe: git_describe(),
        wall_clock_seconds: wall_clock,
        rows: result.rows.len(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}
