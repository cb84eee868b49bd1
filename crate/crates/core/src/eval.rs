//! Paired, seeded evaluation of estimators and the two-sample t statistic
//! used to compare them.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::baselines::Estimator;
use crate::distributions::{draw_task, Family, ParamVector, PriorSpec, SizeSpec, Task};
use crate::encode::{encode, EncodingScheme};
use crate::error::{invalid, Error, Result};
use crate::model::{squared_error, ModelState};
use crate::normalize::{forward, NormMode};
use crate::rng::{sub_seed, tags, Rng};

/// Smallest p-value printed; smaller values display as this floor.
pub const P_DISPLAY_FLOOR: f64 = 1e-4;

/// The network as an estimator: normalize, encode, forward, recover.
#[derive(Clone, Debug)]
pub struct TransformerEstimator {
    pub model: ModelState,
    pub mode: NormMode,
    pub scheme: EncodingScheme,
}

impl Estimator for TransformerEstimator {
    fn id(&self) -> String {
        "transformer".into()
    }

    fn estimate(&self, task: &Task) -> Result<ParamVector> {
        if self.model.config.n_outputs != task.family.n_params() {
            return Err(invalid(format!(
                "model predicts {} parameters, {} has {}",
                self.model.config.n_outputs,
                task.family,
                task.family.n_params()
            )));
        }
        let (values, record) = forward(self.mode, task.family, &task.sample)?;
        let grid = encode(&values, self.scheme, self.model.config.grid)?;
        self.model.estimate(&grid, &record)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSetup {
    pub family: Family,
    /// Protocol label carried into the report; task generation ignores it.
    pub mode: NormMode,
    pub prior: PriorSpec,
    pub size: SizeSpec,
    pub trials: usize,
    pub seed: u64,
}

impl EvalSetup {
    pub fn validate(&self) -> Result<()> {
        if self.prior.family != self.family {
            return Err(invalid(format!(
                "prior is for {}, not {}",
                self.prior.family, self.family
            )));
        }
        if self.trials == 0 {
            return Err(invalid("trials must be positive"));
        }
        self.size.validate()
    }

    /// Task `j` of this setup. Every estimator evaluated with the same
    /// setup sees exactly the same tasks.
    pub fn task(&self, j: usize) -> Result<Task> {
        let mut rng = Rng::derive(sub_seed(self.seed, tags::EVAL_TASKS), j as u64);
        draw_task(&mut rng, self.family, &self.prior, self.size)
    }
}

/// What to do when an estimator fails on a task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailurePolicy {
    #[default]
    Abort,
    /// Drop the task and count it.
    Exclude,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    /// Per-task squared error, mean over parameters, in task order.
    pub errors: Vec<f64>,
    /// Indices of tasks the estimator failed on (only under `Exclude`).
    pub excluded: Vec<usize>,
}

pub fn evaluate(
    est: &dyn Estimator,
    setup: &EvalSetup,
    policy: FailurePolicy,
) -> Result<ErrorSample> {
    setup.validate()?;
    let per_task: Vec<Result<f64>> = (0..setup.trials)
        .into_par_iter()
        .map(|j| {
            let task = setup.task(j)?;
            let e = est.estimate(&task)?;
            if e.len() != task.true_params.len() {
                return Err(invalid(format!(
                    "{} returned {} parameters",
                    est.id(),
                    e.len()
                )));
            }
            let err = squared_error(&e, &task.true_params);
            if !err.is_finite() {
                return Err(Error::DegenerateSample(format!(
                    "non-finite error on task {j}"
                )));
            }
            Ok(err)
        })
        .collect();

    let mut errors = Vec::with_capacity(setup.trials);
    let mut excluded = Vec::new();
    for (j, r) in per_task.into_iter().enumerate() {
        match (r, policy) {
            (Ok(e), _) => errors.push(e),
            (Err(_), FailurePolicy::Exclude) => excluded.push(j),
            (Err(e), FailurePolicy::Abort) => return Err(e),
        }
    }
    if errors.is_empty() {
        return Err(Error::UndefinedStatistic("every task failed".into()));
    }
    Ok(ErrorSample { errors, excluded })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (denominator N - 1).
    pub std: f64,
    pub count: usize,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} / {:.4}", self.mean, self.std)
    }
}

pub fn summarize(errors: &[f64]) -> Result<Summary> {
    let n = errors.len();
    if n < 2 {
        return Err(invalid(format!("need at least 2 errors, got {n}")));
    }
    let mean = errors.iter().sum::<f64>() / n as f64;
    let ss = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>();
    Ok(Summary {
        mean,
        std: (ss / (n - 1) as f64).sqrt(),
        count: n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided normal-approximation p-value, in (0, 1].
    pub p: f64,
}

impl TTest {
    pub fn p_display(&self) -> f64 {
        self.p.max(P_DISPLAY_FLOOR)
    }
}

/// Unpooled two-sample t: `(m1 - m2) / sqrt(s1^2/n1 + s2^2/n2)`. Positive
/// when the first sample has the larger mean.
pub fn two_sample_t(a: &Summary, b: &Summary) -> Result<TTest> {
    if a.count < 2 || b.count < 2 {
        return Err(Error::UndefinedStatistic(
            "each sample needs at least 2 values".into(),
        ));
    }
    let se2 = a.std * a.std / a.count as f64 + b.std * b.std / b.count as f64;
    if !(se2 > 0.0) {
        return Err(Error::UndefinedStatistic(
            "both samples have zero spread".into(),
        ));
    }
    let t = (a.mean - b.mean) / se2.sqrt();
    let p = erfc(t.abs() / std::f64::consts::SQRT_2).clamp(f64::MIN_POSITIVE, 1.0);
    Ok(TTest { t, p })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: String,
    pub reference_summary: Summary,
    pub t: f64,
    pub p: f64,
    pub p_display: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub estimator: String,
    pub family: Family,
    pub mode: NormMode,
    pub size: String,
    pub seed: u64,
    pub trials: usize,
    pub excluded: usize,
    pub summary: Summary,
    pub comparison: Option<Comparison>,
}

impl EvalReport {
    pub fn new(estimator: &dyn Estimator, setup: &EvalSetup, sample: &ErrorSample) -> Result<Self> {
        Ok(Self {
            estimator: estimator.id(),
            family: setup.family,
            mode: setup.mode,
            size: setup.size.label(),
            seed: setup.seed,
            trials: setup.trials,
            excluded: sample.excluded.len(),
            summary: summarize(&sample.errors)?,
            comparison: None,
        })
    }

    /// Attach a t comparison: `reference` minus this estimator.
    pub fn compare_against(&mut self, reference: &EvalReport) -> Result<TTest> {
        let tt = two_sample_t(&reference.summary, &self.summary)?;
        self.comparison = Some(Comparison {
            reference: reference.estimator.clone(),
            reference_summary: reference.summary,
            t: tt.t,
            p: tt.p,
            p_display: tt.p_display(),
        });
        Ok(tt)
    }

    pub const CSV_HEADER: &'static str = "sample_size,estimator,mse_mean,mse_std,trials,excluded";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{},{}",
            self.size,
            self.estimator,
            self.summary.mean,
            self.summary.std,
            self.trials,
            self.excluded
        )
    }

    pub const COMPARISON_HEADER: &'static str =
        "sample_size,reference (mean/std),estimator (mean/std),t_value,p_value";

    pub fn comparison_row(&self) -> Option<String> {
        self.comparison.as_ref().map(|c| {
            format!(
                "{},{},{},{:.4},{:.4}",
                self.size, c.reference_summary, self.summary, c.t, c.p_display
            )
        })
    }
}
