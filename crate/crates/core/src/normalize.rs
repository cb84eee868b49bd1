//! Mapping raw samples onto `[0, 1]` and mapping predictions back.
//!
//! Known-range mode uses a fixed cap-then-scale transform per family and
//! the model predicts parameters directly. Unknown-range mode rescales each
//! sample by its own extremes, so the model only sees the sample's shape;
//! predictions are then mapped back with the stored anchors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distributions::{Family, ParamVector};
use crate::error::{invalid, Error, Result};

pub const EXPONENTIAL_CAP: f64 = 20.0;
pub const NORMAL_CAP: f64 = 35.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    KnownRange,
    UnknownRange,
}

impl NormMode {
    pub fn name(self) -> &'static str {
        match self {
            NormMode::KnownRange => "known",
            NormMode::UnknownRange => "unknown",
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "known" | "known-range" => Ok(NormMode::KnownRange),
            "unknown" | "unknown-range" => Ok(NormMode::UnknownRange),
            other => Err(invalid(format!("unknown normalization mode `{other}`"))),
        }
    }
}

/// Everything needed to undo the forward transform of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub mode: NormMode,
    pub family: Family,
    /// Shift: `min(s)` for unknown-range Normal, otherwise 0.
    pub a: f64,
    /// Scale anchor: `max(s)` for unknown-range, the upper cap otherwise.
    pub b: f64,
    /// Cap bounds, known-range only.
    pub cap: Option<(f64, f64)>,
}

impl NormRecord {
    /// Per-parameter `(scale, shift)` with `estimate = raw * scale + shift`.
    /// Recovery is affine in the raw outputs, which is what lets the loss
    /// be differentiated through it.
    pub fn recovery_affine(&self) -> Vec<(f64, f64)> {
        match (self.mode, self.family) {
            (NormMode::KnownRange, f) => vec![(1.0, 0.0); f.n_params()],
            (NormMode::UnknownRange, Family::Exponential) => vec![(self.b, 0.0)],
            (NormMode::UnknownRange, Family::Normal) => {
                let width = self.b - self.a;
                vec![(width, self.a), (width, 0.0)]
            }
            // forward_unknown refuses Beta, so no such record exists
            (NormMode::UnknownRange, Family::Beta) => vec![(1.0, 0.0); 2],
        }
    }
}

fn non_empty(sample: &[f64]) -> Result<()> {
    if sample.is_empty() {
        return Err(invalid("empty sample"));
    }
    if let Some(x) = sample.iter().find(|x| !x.is_finite()) {
        return Err(invalid(format!("non-finite observation {x}")));
    }
    Ok(())
}

pub fn forward_known(family: Family, sample: &[f64]) -> Result<(Vec<f64>, NormRecord)> {
    non_empty(sample)?;
    let (lo, hi) = match family {
        Family::Exponential => (0.0, EXPONENTIAL_CAP),
        Family::Normal => (-NORMAL_CAP, NORMAL_CAP),
        Family::Beta => (0.0, 1.0),
    };
    let width = hi - lo;
    let out = sample
        .iter()
        .map(|&x| ((x.clamp(lo, hi) - lo) / width).clamp(0.0, 1.0))
        .collect();
    let record = NormRecord {
        mode: NormMode::KnownRange,
        family,
        a: 0.0,
        b: hi,
        cap: Some((lo, hi)),
    };
    Ok((out, record))
}

pub fn forward_unknown(family: Family, sample: &[f64]) -> Result<(Vec<f64>, NormRecord)> {
    non_empty(sample)?;
    let max = sample.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    match family {
        Family::Exponential => {
            if sample.iter().any(|&x| x <= 0.0) {
                return Err(invalid("exponential observations must be positive"));
            }
            if max <= 0.0 {
                return Err(Error::DegenerateSample("max(s) = 0".into()));
            }
            let out = sample.iter().map(|&x| (x / max).clamp(0.0, 1.0)).collect();
            let record = NormRecord {
                mode: NormMode::UnknownRange,
                family,
                a: 0.0,
                b: max,
                cap: None,
            };
            Ok((out, record))
        }
        Family::Normal => {
            let min = sample.iter().copied().fold(f64::INFINITY, f64::min);
            if max <= min {
                return Err(Error::DegenerateSample(format!(
                    "max(s) = min(s) = {min} over {} observations",
                    sample.len()
                )));
            }
            let width = max - min;
            let out = sample
                .iter()
                .map(|&x| ((x - min) / width).clamp(0.0, 1.0))
                .collect();
            let record = NormRecord {
                mode: NormMode::UnknownRange,
                family,
                a: min,
                b: max,
                cap: None,
            };
            Ok((out, record))
        }
        Family::Beta => Err(invalid(
            "unknown-range normalization is not defined for beta",
        )),
    }
}

pub fn forward(mode: NormMode, family: Family, sample: &[f64]) -> Result<(Vec<f64>, NormRecord)> {
    match mode {
        NormMode::KnownRange => forward_known(family, sample),
        NormMode::UnknownRange => forward_unknown(family, sample),
    }
}

pub fn recover_params(
    family: Family,
    record: &NormRecord,
    raw: &ParamVector,
) -> Result<ParamVector> {
    if record.family != family {
        return Err(invalid(format!(
            "record was produced for {}, not {family}",
            record.family
        )));
    }
    if raw.len() != family.n_params() {
        return Err(invalid(format!(
            "{family} has {} parameters, got {}",
            family.n_params(),
            raw.len()
        )));
    }
    let affine = record.recovery_affine();
    Ok(ParamVector(
        raw.iter()
            .zip(&affine)
            .map(|(&r, &(scale, shift))| r * scale + shift)
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_exponential() {
        let (v, rec) = forward_known(Family::Exponential, &[10.0, 25.0, 0.0]).unwrap();
        assert_eq!(v, vec![0.5, 1.0, 0.0]);
        assert_eq!(rec.mode, NormMode::KnownRange);
        assert_eq!(rec.cap, Some((0.0, 20.0)));
    }

    #[test]
    fn known_normal_endpoints() {
        let (v, _) = forward_known(Family::Normal, &[-35.0, 35.0, 0.0, -100.0]).unwrap();
        assert_eq!(v, vec![0.0, 1.0, 0.5, 0.0]);
    }

    #[test]
    fn known_beta_is_identity() {
        let s = [0.1, 0.25, 0.999];
        let (v, _) = forward_known(Family::Beta, &s).unwrap();
        assert_eq!(v, s.to_vec());
    }

    #[test]
    fn empty_sample_rejected() {
        assert!(matches!(
            forward_known(Family::Normal, &[]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            forward_unknown(Family::Normal, &[]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn unknown_exponential() {
        let (v, rec) = forward_unknown(Family::Exponential, &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!(v, vec![0.25, 0.5, 1.0]);
        assert_eq!(rec.b, 4.0);
    }

    #[test]
    fn unknown_normal() {
        let (v, rec) = forward_unknown(Family::Normal, &[-1.0, 0.0, 3.0]).unwrap();
        assert_eq!(v, vec![0.0, 0.25, 1.0]);
        assert_eq!((rec.a, rec.b), (-1.0, 3.0));
    }

    #[test]
    fn unknown_degenerate() {
        assert!(matches!(
            forward_unknown(Family::Normal, &[2.0, 2.0, 2.0]),
            Err(Error::DegenerateSample(_))
        ));
        assert!(matches!(
            forward_unknown(Family::Normal, &[2.0]),
            Err(Error::DegenerateSample(_))
        ));
        assert!(forward_unknown(Family::Exponential, &[1.0, -1.0]).is_err());
        assert!(forward_unknown(Family::Beta, &[0.5, 0.2]).is_err());
    }

    #[test]
    fn recovery() {
        let (_, rec) = forward_unknown(Family::Exponential, &[1.0, 2.0, 4.0]).unwrap();
        let p = recover_params(Family::Exponential, &rec, &ParamVector::new([0.3])).unwrap();
        assert!((p[0] - 1.2).abs() < 1e-12);

        let (_, rec) = forward_unknown(Family::Normal, &[-1.0, 0.0, 3.0]).unwrap();
        let p = recover_params(Family::Normal, &rec, &ParamVector::new([0.5, 0.25])).unwrap();
        assert_eq!(p.0, vec![1.0, 1.0]);

        let (_, rec) = forward_known(Family::Normal, &[0.0]).unwrap();
        let p = recover_params(Family::Normal, &rec, &ParamVector::new([2.0, 5.0])).unwrap();
        assert_eq!(p.0, vec![2.0, 5.0]);
    }

    #[test]
    fn recovery_family_mismatch() {
        let (_, rec) = forward_unknown(Family::Exponential, &[1.0, 2.0]).unwrap();
        let err = recover_params(Family::Normal, &rec, &ParamVector::new([0.1, 0.2]));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }
}
