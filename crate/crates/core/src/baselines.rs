//! Closed-form estimators: maximum likelihood for Normal and Exponential,
//! method of moments for Beta. With a prior attached, estimates are
//! clamped into the prior box (the known-range protocol); without one they
//! are returned as computed (the unknown-range protocol).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distributions::{Family, ParamVector, PriorSpec, Task};
use crate::error::{invalid, Error, Result};
use crate::normalize::NormMode;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (denominator N).
fn variance(xs: &[f64], m: f64) -> f64 {
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

fn check_prior(cap: Option<&PriorSpec>, family: Family) -> Result<()> {
    match cap {
        Some(p) if p.family != family => Err(invalid(format!(
            "cannot cap {family} to a {} prior",
            p.family
        ))),
        _ => Ok(()),
    }
}

/// Sample mean and root mean squared deviation (denominator N).
pub fn mle_normal(sample: &[f64], cap: Option<&PriorSpec>) -> Result<ParamVector> {
    check_prior(cap, Family::Normal)?;
    if sample.len() < 2 {
        return Err(invalid(format!(
            "normal MLE needs n >= 2, got {}",
            sample.len()
        )));
    }
    let mu = mean(sample);
    let sigma = variance(sample, mu).sqrt();
    let mut p = ParamVector(vec![mu, sigma]);
    if let Some(prior) = cap {
        prior.clamp(&mut p);
    }
    Ok(p)
}

/// Sample mean (the scale parameter's MLE).
pub fn mle_exponential(sample: &[f64], cap: Option<&PriorSpec>) -> Result<ParamVector> {
    check_prior(cap, Family::Exponential)?;
    if sample.is_empty() {
        return Err(invalid("exponential MLE needs at least one observation"));
    }
    if let Some(x) = sample.iter().find(|&&x| !(x > 0.0)) {
        return Err(invalid(format!(
            "exponential observations must be positive, got {x}"
        )));
    }
    let mut p = ParamVector(vec![mean(sample)]);
    if let Some(prior) = cap {
        prior.clamp(&mut p);
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomEstimate {
    pub params: ParamVector,
    /// False when `m(1 - m) / v <= 1`, i.e. the sample is more dispersed
    /// than any Beta law allows and the raw estimates are non-positive.
    pub valid: bool,
}

/// Method of moments for Beta: with `t = m(1 - m)/v - 1`,
/// `alpha = m t` and `beta = (1 - m) t`.
pub fn mom_beta(sample: &[f64], cap: Option<&PriorSpec>) -> Result<MomEstimate> {
    check_prior(cap, Family::Beta)?;
    if sample.len() < 2 {
        return Err(invalid(format!(
            "beta moments need n >= 2, got {}",
            sample.len()
        )));
    }
    if let Some(x) = sample.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
        return Err(invalid(format!(
            "beta observations must lie in (0, 1), got {x}"
        )));
    }
    let m = mean(sample);
    let v = variance(sample, m);
    if !(v > 0.0) {
        return Err(Error::DegenerateSample("sample variance is zero".into()));
    }
    Ok(mom_from_moments(m, v, cap))
}

pub fn mom_from_moments(m: f64, v: f64, cap: Option<&PriorSpec>) -> MomEstimate {
    let t = m * (1.0 - m) / v - 1.0;
    let mut params = ParamVector(vec![m * t, (1.0 - m) * t]);
    if let Some(prior) = cap {
        prior.clamp(&mut params);
    }
    MomEstimate {
        params,
        valid: t > 0.0,
    }
}

/// Anything that maps a task's sample to a parameter estimate.
pub trait Estimator: Sync {
    fn id(&self) -> String;

    fn estimate(&self, task: &Task) -> Result<ParamVector>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    MleNormal,
    MleExponential,
    MomBeta,
}

impl BaselineKind {
    pub fn family(self) -> Family {
        match self {
            BaselineKind::MleNormal => Family::Normal,
            BaselineKind::MleExponential => Family::Exponential,
            BaselineKind::MomBeta => Family::Beta,
        }
    }

    /// The closed-form estimator used for a family.
    pub fn for_family(family: Family) -> Self {
        match family {
            Family::Normal => BaselineKind::MleNormal,
            Family::Exponential => BaselineKind::MleExponential,
            Family::Beta => BaselineKind::MomBeta,
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::MleNormal => "mle-normal",
            BaselineKind::MleExponential => "mle-exponential",
            BaselineKind::MomBeta => "mom-beta",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mle-normal" => Ok(BaselineKind::MleNormal),
            "mle-exponential" => Ok(BaselineKind::MleExponential),
            "mom-beta" => Ok(BaselineKind::MomBeta),
            other => Err(invalid(format!("unknown baseline `{other}`"))),
        }
    }
}

/// A closed-form estimator, optionally capped to a prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub kind: BaselineKind,
    pub cap: Option<PriorSpec>,
}

impl Baseline {
    pub fn new(kind: BaselineKind, cap: Option<PriorSpec>) -> Result<Self> {
        check_prior(cap.as_ref(), kind.family())?;
        Ok(Self { kind, cap })
    }

    /// Known range caps to the prior; unknown range uses the bare formula.
    pub fn for_protocol(family: Family, mode: NormMode, prior: &PriorSpec) -> Result<Self> {
        let cap = (mode == NormMode::KnownRange).then(|| prior.clone());
        Self::new(BaselineKind::for_family(family), cap)
    }
}

impl Estimator for Baseline {
    fn id(&self) -> String {
        if self.cap.is_some() {
            format!("{}-capped", self.kind)
        } else {
            self.kind.to_string()
        }
    }

    fn estimate(&self, task: &Task) -> Result<ParamVector> {
        if task.family != self.kind.family() {
            return Err(invalid(format!(
                "{} cannot estimate {}",
                self.kind, task.family
            )));
        }
        let cap = self.cap.as_ref();
        match self.kind {
            BaselineKind::MleNormal => mle_normal(&task.sample, cap),
            BaselineKind::MleExponential => mle_exponential(&task.sample, cap),
            BaselineKind::MomBeta => mom_beta(&task.sample, cap).map(|e| e.params),
        }
    }
}

/// Returns the true parameters. Useful only as a zero-error reference.
#[derive(Clone, Copy, Debug, Default)]
pub struct Oracle;

impl Estimator for Oracle {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn estimate(&self, task: &Task) -> Result<ParamVector> {
        Ok(task.true_params.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_uses_n_denominator() {
        let p = mle_normal(&[0.0, 2.0], None).unwrap();
        assert_eq!(p.0, vec![1.0, 1.0]);
    }

    #[test]
    fn normal_capping() {
        let p = mle_normal(&[10.0, 10.0, 10.0], Some(&PriorSpec::normal())).unwrap();
        assert_eq!(p.0, vec![5.0, 1.0]);
        assert!(mle_normal(&[1.0], None).is_err());
    }

    #[test]
    fn exponential() {
        assert_eq!(mle_exponential(&[1.0, 3.0], None).unwrap().0, vec![2.0]);
        let capped = mle_exponential(&[0.2, 0.2], Some(&PriorSpec::exponential())).unwrap();
        assert_eq!(capped.0, vec![0.5]);
        assert!(mle_exponential(&[1.0, 0.0], None).is_err());
        assert!(mle_exponential(&[], None).is_err());
    }

    #[test]
    fn mom_arithmetic() {
        let e = mom_from_moments(0.5, 0.125, None);
        assert_eq!(e.params.0, vec![0.5, 0.5]);
        assert!(e.valid);
        let e = mom_from_moments(0.5, 0.05, None);
        assert!((e.params[0] - 2.0).abs() < 1e-12 && (e.params[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mom_overdispersed_sample() {
        // m = 0.5, v = 0.2499: t < 0
        let raw = mom_from_moments(0.5, 0.26, None);
        assert!(!raw.valid);
        assert!(raw.params[0] < 0.0);
        let capped = mom_from_moments(0.5, 0.26, Some(&PriorSpec::beta_wide()));
        assert_eq!(capped.params.0, vec![0.5, 0.5]);
    }

    #[test]
    fn mom_degenerate() {
        assert!(matches!(
            mom_beta(&[0.3, 0.3, 0.3], None),
            Err(Error::DegenerateSample(_))
        ));
        assert!(mom_beta(&[0.3, 1.0], None).is_err());
    }

    #[test]
    fn prior_family_checked() {
        assert!(mle_normal(&[0.0, 1.0], Some(&PriorSpec::exponential())).is_err());
        assert!(Baseline::new(BaselineKind::MomBeta, Some(PriorSpec::normal())).is_err());
    }

    #[test]
    fn protocol_selection() {
        let b = Baseline::for_protocol(
            Family::Exponential,
            NormMode::KnownRange,
            &PriorSpec::exponential(),
        )
        .unwrap();
        assert_eq!(b.id(), "mle-exponential-capped");
        let b =
            Baseline::for_protocol(Family::Normal, NormMode::UnknownRange, &PriorSpec::normal())
                .unwrap();
        assert_eq!(b.id(), "mle-normal");
        assert!(b.cap.is_none());
    }
}
