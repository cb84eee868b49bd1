//! Distribution families, parameter priors and seeded task generation.

use std::fmt;
use std::ops::{Deref, DerefMut};
use std::str::FromStr;

use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Normal,
    Exponential,
    Beta,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Normal, Family::Exponential, Family::Beta];

    /// Number of parameters the family is described by.
    pub fn n_params(self) -> usize {
        match self {
            Family::Exponential => 1,
            Family::Normal | Family::Beta => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Normal => "normal",
            Family::Exponential => "exponential",
            Family::Beta => "beta",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" | "gaussian" => Ok(Family::Normal),
            "exponential" | "exp" => Ok(Family::Exponential),
            "beta" => Ok(Family::Beta),
            other => Err(invalid(format!("unknown family `{other}`"))),
        }
    }
}

/// Ordered parameters of one distribution instance: `[mu, sigma]`,
/// `[beta]` or `[alpha, beta]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn new(values: impl Into<Vec<f64>>) -> Self {
        Self(values.into())
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(invalid(format!("parameter range [{lo}, {hi}] is empty")));
        }
        Ok(Self { lo, hi })
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Uniform prior over each parameter of a family. These ranges are also
/// what capped estimators clamp to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub family: Family,
    pub ranges: Vec<ParamRange>,
}

impl PriorSpec {
    pub fn new(family: Family, ranges: Vec<ParamRange>) -> Result<Self> {
        if ranges.len() != family.n_params() {
            return Err(invalid(format!(
                "{family} needs {} parameter ranges, got {}",
                family.n_params(),
                ranges.len()
            )));
        }
        for r in &ranges {
            ParamRange::new(r.lo, r.hi)?;
        }
        if family != Family::Normal {
            // scale/shape parameters must stay positive
            if ranges.iter().any(|r| r.lo < 0.0) {
                return Err(invalid(format!("{family} parameters must be positive")));
            }
        } else if ranges[1].lo <= 0.0 {
            return Err(invalid("normal sigma range must be positive"));
        }
        Ok(Self { family, ranges })
    }

    /// mu in [-5, 5], sigma in [1, 10].
    pub fn normal() -> Self {
        Self {
            family: Family::Normal,
            ranges: vec![
                ParamRange { lo: -5.0, hi: 5.0 },
                ParamRange { lo: 1.0, hi: 10.0 },
            ],
        }
    }

    /// beta (scale) in [0.5, 2].
    pub fn exponential() -> Self {
        Self {
            family: Family::Exponential,
            ranges: vec![ParamRange { lo: 0.5, hi: 2.0 }],
        }
    }

    /// alpha, beta in (0, 1).
    pub fn beta_unit() -> Self {
        Self {
            family: Family::Beta,
            ranges: vec![ParamRange { lo: 0.0, hi: 1.0 }; 2],
        }
    }

    /// alpha, beta in [0.5, 5].
    pub fn beta_wide() -> Self {
        Self {
            family: Family::Beta,
            ranges: vec![ParamRange { lo: 0.5, hi: 5.0 }; 2],
        }
    }

    /// Default preset for a family (`beta_unit` for Beta).
    pub fn default_for(family: Family) -> Self {
        match family {
            Family::Normal => Self::normal(),
            Family::Exponential => Self::exponential(),
            Family::Beta => Self::beta_unit(),
        }
    }

    /// Named presets: `normal`, `exponential`, `beta-unit`, `beta-wide`,
    /// or `default` for the family's default.
    pub fn preset(family: Family, name: &str) -> Result<Self> {
        let prior = match name {
            "default" => Self::default_for(family),
            "normal" => Self::normal(),
            "exponential" => Self::exponential(),
            "beta-unit" => Self::beta_unit(),
            "beta-wide" => Self::beta_wide(),
            other => return Err(invalid(format!("unknown prior preset `{other}`"))),
        };
        if prior.family != family {
            return Err(invalid(format!(
                "prior preset `{name}` does not apply to {family}"
            )));
        }
        Ok(prior)
    }

    pub fn clamp(&self, params: &mut ParamVector) {
        for (p, r) in params.iter_mut().zip(&self.ranges) {
            *p = r.clamp(*p);
        }
    }

    /// Draw parameters i.i.d. uniform. Open interval, so a zero lower bound
    /// (the `beta_unit` preset) never yields a zero shape.
    pub fn draw(&self, rng: &mut Rng) -> ParamVector {
        ParamVector(
            self.ranges
                .iter()
                .map(|r| r.lo + (r.hi - r.lo) * rng.uniform_open())
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeSpec {
    Fixed(usize),
    /// Log-uniform over `[lo, hi]`, realized as an integer.
    LogUniform {
        lo: usize,
        hi: usize,
    },
}

impl SizeSpec {
    pub const LOG_UNIFORM_10_100: SizeSpec = SizeSpec::LogUniform { lo: 10, hi: 100 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            SizeSpec::Fixed(0) => Err(invalid("sample size must be at least 1")),
            SizeSpec::LogUniform { lo, hi } if lo == 0 || lo >= hi => Err(invalid(format!(
                "log-uniform size range [{lo}, {hi}] is invalid"
            ))),
            _ => Ok(()),
        }
    }

    /// Column label used in result tables (`10`, `10 to 100`).
    pub fn label(&self) -> String {
        match *self {
            SizeSpec::Fixed(n) => n.to_string(),
            SizeSpec::LogUniform { lo, hi } => format!("{lo} to {hi}"),
        }
    }

    pub fn max_size(&self) -> usize {
        match *self {
            SizeSpec::Fixed(n) => n,
            SizeSpec::LogUniform { hi, .. } => hi,
        }
    }
}

impl fmt::Display for SizeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            SizeSpec::Fixed(n) => write!(f, "{n}"),
            SizeSpec::LogUniform { lo, hi } => write!(f, "{lo}-{hi}"),
        }
    }
}

impl FromStr for SizeSpec {
    type Err = Error;

    /// `30`, `log-uniform` (10 to 100) or `lo-hi`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "log-uniform" || s == "loguniform" {
            return Ok(Self::LOG_UNIFORM_10_100);
        }
        let spec = if let Some((lo, hi)) = s.split_once('-') {
            let lo = lo
                .trim()
                .parse()
                .map_err(|_| invalid(format!("bad size `{s}`")))?;
            let hi = hi
                .trim()
                .parse()
                .map_err(|_| invalid(format!("bad size `{s}`")))?;
            SizeSpec::LogUniform { lo, hi }
        } else {
            SizeSpec::Fixed(s.parse().map_err(|_| invalid(format!("bad size `{s}`")))?)
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub family: Family,
    pub true_params: ParamVector,
    pub sample: Vec<f64>,
}

pub fn sample_normal(rng: &mut Rng, mu: f64, sigma: f64) -> Result<f64> {
    if !mu.is_finite() || !sigma.is_finite() || sigma <= 0.0 {
        return Err(invalid(format!(
            "normal needs finite mu and sigma > 0, got ({mu}, {sigma})"
        )));
    }
    let z: f64 = StandardNormal.sample(rng.inner_mut());
    Ok(mu + sigma * z)
}

/// Scale parameterization: density `exp(-x / beta) / beta`.
pub fn sample_exponential(rng: &mut Rng, beta: f64) -> Result<f64> {
    if !beta.is_finite() || beta <= 0.0 {
        return Err(invalid(format!("exponential needs beta > 0, got {beta}")));
    }
    loop {
        let e: f64 = Exp1.sample(rng.inner_mut());
        let x = beta * e;
        if x > 0.0 {
            return Ok(x);
        }
    }
}

/// Log of a Gamma(shape, 1) variate (Marsaglia and Tsang). Working in log
/// space keeps shapes well below 1 from underflowing to zero.
fn log_gamma_variate(rng: &mut Rng, shape: f64) -> f64 {
    if shape < 1.0 {
        // G(a) = G(a + 1) * U^(1/a)
        let boost = rng.uniform_open().ln() / shape;
        return log_gamma_variate(rng, shape + 1.0) + boost;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = StandardNormal.sample(rng.inner_mut());
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u = rng.uniform_open();
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return (d * v).ln();
        }
    }
}

/// Largest double strictly below 1.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Exact Beta(alpha, beta) variate as X / (X + Y) with X, Y independent
/// gammas. The ratio is formed in log space; results that round to an
/// endpoint are pulled back inside the open unit interval.
pub fn sample_beta(rng: &mut Rng, alpha: f64, beta: f64) -> Result<f64> {
    if !(alpha.is_finite() && beta.is_finite() && alpha > 0.0 && beta > 0.0) {
        return Err(invalid(format!(
            "beta needs alpha, beta > 0, got ({alpha}, {beta})"
        )));
    }
    let lx = log_gamma_variate(rng, alpha);
    let ly = log_gamma_variate(rng, beta);
    let d = ly - lx;
    // x / (x + y) = 1 / (1 + exp(ly - lx))
    let v = if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    };
    Ok(v.clamp(f64::MIN_POSITIVE, BELOW_ONE))
}

pub fn draw_size(rng: &mut Rng, spec: SizeSpec) -> usize {
    match spec {
        SizeSpec::Fixed(n) => n,
        SizeSpec::LogUniform { lo, hi } => {
            let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
            let u = rng.uniform();
            let n = (a + (b - a) * u).exp().floor() as usize;
            n.clamp(lo, hi)
        }
    }
}

pub fn sample_from(rng: &mut Rng, family: Family, params: &[f64]) -> Result<f64> {
    if params.len() != family.n_params() {
        return Err(invalid(format!(
            "{family} takes {} parameters, got {}",
            family.n_params(),
            params.len()
        )));
    }
    match family {
        Family::Normal => sample_normal(rng, params[0], params[1]),
        Family::Exponential => sample_exponential(rng, params[0]),
        Family::Beta => sample_beta(rng, params[0], params[1]),
    }
}

/// Parameters first, then the size, then the observations, all from `rng`.
pub fn draw_task(rng: &mut Rng, family: Family, prior: &PriorSpec, size: SizeSpec) -> Result<Task> {
    if prior.family != family {
        return Err(invalid(format!(
            "prior is for {}, not {family}",
            prior.family
        )));
    }
    size.validate()?;
    let true_params = prior.draw(rng);
    let n = draw_size(rng, size);
    let sample = (0..n)
        .map(|_| sample_from(rng, family, &true_params))
        .collect::<Result<Vec<_>>>()?;
    Ok(Task {
        family,
        true_params,
        sample,
    })
}
