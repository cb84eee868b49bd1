//! Training loop: synthetic examples are generated on a producer thread,
//! per-example gradients are computed in parallel and reduced in a fixed
//! order, so a run is a pure function of its config.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::distributions::{draw_task, Family, ParamVector, PriorSpec, SizeSpec};
use crate::encode::{encode, EncodedGrid, EncodingScheme};
use crate::error::{invalid, Error, Result};
use crate::model::{squared_error, Dropout, ModelConfig, ModelState};
use crate::nn::{clip_grad_norm, AdamConfig, AdamState, Tensor};
use crate::normalize::{forward, NormMode, NormRecord};
use crate::rng::{sub_seed, tags, Rng};

pub const BEST_FILE: &str = "best.pfck";
pub const LAST_FILE: &str = "last.pfck";
pub const FINAL_FILE: &str = "final.pfck";
pub const PROGRESS_FILE: &str = "progress.json";
pub const CURVE_FILE: &str = "loss_curve.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub family: Family,
    pub mode: NormMode,
    pub prior: PriorSpec,
    pub size: SizeSpec,
    pub scheme: EncodingScheme,
    pub model: ModelConfig,
    pub total_examples: u64,
    pub batch_size: usize,
    /// Held-out evaluation cadence, in examples.
    pub eval_every: u64,
    pub eval_tasks: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Fraction of steps spent in linear warmup; the rest decays linearly
    /// to zero.
    pub warmup_frac: f64,
    pub clip_norm: Option<f64>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Redraws allowed for a degenerate sample before giving up.
    pub max_redraws: usize,
    /// Dropout rate on block outputs; 0 disables it.
    #[serde(default)]
    pub dropout: f64,
}

impl TrainConfig {
    /// Small defaults that train in minutes on one core.
    pub fn desk(family: Family, mode: NormMode, seed: u64) -> Self {
        Self {
            family,
            mode,
            prior: PriorSpec::default_for(family),
            size: SizeSpec::LOG_UNIFORM_10_100,
            scheme: EncodingScheme::SeqFirst,
            model: ModelConfig::desk(family.n_params()),
            total_examples: 200_000,
            batch_size: 32,
            eval_every: 20_000,
            eval_tasks: 2000,
            seed,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            warmup_frac: 0.01,
            clip_norm: Some(1.0),
            checkpoint_dir: None,
            max_redraws: 100,
            dropout: 0.0,
        }
    }

    /// Full-size network and budget.
    pub fn paper_full(family: Family, mode: NormMode, seed: u64) -> Self {
        Self {
            model: ModelConfig::paper_full(family.n_params()),
            total_examples: 9_900_000,
            eval_every: 100_000,
            adam: AdamConfig::default(),
            ..Self::desk(family, mode, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.size.validate()?;
        if self.prior.family != self.family {
            return Err(invalid(format!(
                "prior is for {}, not {}",
                self.prior.family, self.family
            )));
        }
        if self.model.n_outputs != self.family.n_params() {
            return Err(invalid(format!(
                "model predicts {} parameters, {} has {}",
                self.model.n_outputs,
                self.family,
                self.family.n_params()
            )));
        }
        if self.mode == NormMode::UnknownRange && self.family == Family::Beta {
            return Err(invalid(
                "beta is only trained with the known-range protocol",
            ));
        }
        if self.batch_size == 0 || self.total_examples < self.batch_size as u64 {
            return Err(invalid("batch size must be in 1..=total_examples"));
        }
        if self.eval_every == 0 || !self.eval_every.is_multiple_of(self.batch_size as u64) {
            return Err(invalid(
                "eval_every must be a positive multiple of the batch size",
            ));
        }
        if self.eval_tasks == 0 {
            return Err(invalid("eval_tasks must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(invalid("warmup_frac must lie in [0, 1)"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(invalid("clip norm must be positive"));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.total_examples / self.batch_size as u64
    }

    /// Learning rate for step `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let total = self.total_steps().max(1);
        let warm = ((self.warmup_frac * total as f64).ceil() as u64).clamp(1, total);
        let base = self.adam.lr;
        if step < warm {
            base * (step + 1) as f64 / warm as f64
        } else if total == warm {
            base
        } else {
            base * (total - step) as f64 / (total - warm) as f64
        }
    }
}

/// One training pair.
#[derive(Clone, Debug)]
pub struct Example {
    pub grid: EncodedGrid,
    pub record: NormRecord,
    pub truth: ParamVector,
}

/// Draw a task and encode it. A degenerate sample (unknown-range with no
/// spread) is replaced by a fresh draw from the same stream.
pub fn make_example(rng: &mut Rng, cfg: &TrainConfig) -> Result<Example> {
    let mut last = None;
    for _ in 0..=cfg.max_redraws {
        let task = draw_task(rng, cfg.family, &cfg.prior, cfg.size)?;
        match forward(cfg.mode, cfg.family, &task.sample) {
            Ok((values, record)) => {
                let grid = encode(&values, cfg.scheme, cfg.model.grid)?;
                return Ok(Example {
                    grid,
                    record,
                    truth: task.true_params,
                });
            }
            Err(e @ Error::DegenerateSample(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| invalid("no draws attempted")))
}

fn train_example(cfg: &TrainConfig, index: u64) -> Result<Example> {
    make_example(
        &mut Rng::derive(sub_seed(cfg.seed, tags::TRAIN_EXAMPLES), index),
        cfg,
    )
}

/// The fixed held-out set scored at every evaluation point.
pub fn held_out(cfg: &TrainConfig) -> Result<Vec<Example>> {
    (0..cfg.eval_tasks as u64)
        .into_par_iter()
        .map(|j| make_example(&mut Rng::derive(sub_seed(cfg.seed, tags::HELD_OUT), j), cfg))
        .collect()
}

/// Mean squared error of `model` on `examples`, in original units.
pub fn held_out_mse(model: &ModelState, examples: &[Example]) -> Result<f64> {
    let errs: Vec<f64> = examples
        .par_iter()
        .map(|ex| {
            model
                .estimate(&ex.grid, &ex.record)
                .map(|e| squared_error(&e, &ex.truth))
        })
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub examples_seen: u64,
    pub mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<CurvePoint>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("examples_seen,mse\n");
        for p in &self.points {
            s.push_str(&format!("{},{}\n", p.examples_seen, p.mse));
        }
        s
    }

    pub fn best(&self) -> Option<CurvePoint> {
        self.points
            .iter()
            .copied()
            .min_by(|a, b| a.mse.total_cmp(&b.mse))
    }
}

/// Everything needed to continue an interrupted run.
#[derive(Clone, Debug, PartialEq)]
pub struct Resume {
    pub model: ModelState,
    pub optimizer: AdamState,
    pub curve: LossCurve,
}

#[derive(Serialize, Deserialize)]
struct Progress {
    config: TrainConfig,
    curve: LossCurve,
}

impl Resume {
    /// Load the latest evaluation-point state written to `dir`.
    pub fn load(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        let ck = Checkpoint::load(&dir.join(LAST_FILE))?;
        let progress: Progress = serde_json::from_slice(&fs::read(dir.join(PROGRESS_FILE))?)
            .map_err(|e| Error::Checkpoint(format!("bad progress file: {e}")))?;
        let mut saved = progress.config;
        saved.checkpoint_dir = cfg.checkpoint_dir.clone();
        if &saved != cfg {
            return Err(invalid(
                "resume config differs from the one that wrote the checkpoint",
            ));
        }
        let optimizer = ck
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        Ok(Self {
            model: ck.model,
            optimizer,
            curve: progress.curve,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub optimizer: AdamState,
    pub curve: LossCurve,
    /// Lowest held-out MSE and the weights that reached it.
    pub best: Option<(CurvePoint, ModelState)>,
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(cfg, None, |_| {})
}

/// Train from scratch or from `resume`, calling `on_eval` at every
/// evaluation point.
pub fn train_with(
    cfg: &TrainConfig,
    resume: Option<Resume>,
    mut on_eval: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let (mut model, mut opt, mut curve) = match resume {
        Some(r) => (r.model, r.optimizer, r.curve),
        None => {
            let model = ModelState::init(cfg.model, cfg.seed)?;
            let opt = AdamState::new(cfg.adam, &model.params);
            (model, opt, LossCurve::default())
        }
    };
    if model.config != cfg.model {
        return Err(invalid("resumed model shape differs from the config"));
    }
    let held = held_out(cfg)?;
    let mut best: Option<(CurvePoint, ModelState)> = None;
    if let Some(p) = curve.best() {
        // best weights from before the interruption live on disk only
        if let Some(dir) = &cfg.checkpoint_dir {
            if let Ok(ck) = Checkpoint::load(&dir.join(BEST_FILE)) {
                best = Some((p, ck.model));
            }
        }
    }

    let batch = cfg.batch_size;
    let start = model.step;
    let total = cfg.total_steps();
    let steps_per_eval = cfg.eval_every / batch as u64;

    std::thread::scope(|s| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Vec<Example>>>(4);
        s.spawn(move || {
            for step in start..total {
                let first = step * batch as u64;
                let examples = (first..first + batch as u64)
                    .into_par_iter()
                    .map(|i| train_example(cfg, i))
                    .collect();
                if tx.send(examples).is_err() {
                    break;
                }
            }
        });

        for step in start..total {
            let examples = rx
                .recv()
                .map_err(|_| invalid("example producer stopped"))??;
            let first = step * batch as u64;
            let per_example: Vec<(f64, Vec<Tensor>)> = examples
                .par_iter()
                .enumerate()
                .map(|(b, ex)| {
                    let mut rng = Rng::derive(sub_seed(cfg.seed, tags::DROPOUT), first + b as u64);
                    let mut drop = Dropout {
                        rate: cfg.dropout,
                        rng: &mut rng,
                    };
                    let drop = (cfg.dropout > 0.0).then_some(&mut drop);
                    model.loss_and_grads(&ex.grid, &ex.record, &ex.truth, drop)
                })
                .collect::<Result<_>>()?;

            let mut loss = 0.0;
            let mut grads: Vec<Tensor> = model
                .params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect();
            for (l, g) in &per_example {
                loss += l;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.add_assign(gi)?;
                }
            }
            loss /= batch as f64;
            let inv = 1.0 / batch as f32;
            grads.iter_mut().for_each(|g| g.scale_in_place(inv));

            let norm = match cfg.clip_norm {
                Some(c) => clip_grad_norm(&mut grads, c),
                None => grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt(),
            };
            if !loss.is_finite() || !norm.is_finite() {
                let last_good = cfg
                    .checkpoint_dir
                    .as_ref()
                    .map(|d| d.join(LAST_FILE))
                    .filter(|p| p.exists());
                return Err(Error::Divergence {
                    step,
                    loss,
                    last_good,
                });
            }
            opt.step_with_lr(&mut model.params, &grads, cfg.lr_at(step))?;
            model.step = step + 1;

            if model.step % steps_per_eval == 0 || model.step == total {
                let point = CurvePoint {
                    examples_seen: model.step * batch as u64,
                    mse: held_out_mse(&model, &held)?,
                };
                curve.points.push(point);
                let improved = best.as_ref().is_none_or(|(b, _)| point.mse < b.mse);
                if improved {
                    best = Some((point, model.clone()));
                }
                if let Some(dir) = &cfg.checkpoint_dir {
                    save_eval_point(dir, cfg, &model, &opt, &curve, improved)?;
                }
                on_eval(&point);
            }
        }
        Ok(())
    })?;

    if let Some(dir) = &cfg.checkpoint_dir {
        Checkpoint {
            model: model.clone(),
            optimizer: Some(opt.clone()),
        }
        .save(&dir.join(FINAL_FILE))?;
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        curve,
        best,
    })
}

fn save_eval_point(
    dir: &Path,
    cfg: &TrainConfig,
    model: &ModelState,
    opt: &AdamState,
    curve: &LossCurve,
    improved: bool,
) -> Result<()> {
    let ck = Checkpoint {
        model: model.clone(),
        optimizer: Some(opt.clone()),
    };
    if improved {
        ck.save(&dir.join(BEST_FILE))?;
    }
    ck.save(&dir.join(LAST_FILE))?;
    let progress = Progress {
        config: cfg.clone(),
        curve: curve.clone(),
    };
    let json =
        serde_json::to_vec_pretty(&progress).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tmp = dir.join(format!("{PROGRESS_FILE}.tmp"));
    fs::write(&tmp, json)?;
    fs::rename(&tmp, dir.join(PROGRESS_FILE))?;
    fs::write(dir.join(CURVE_FILE), curve.to_csv())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encode::GridShape;

    pub(crate) fn tiny(seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::desk(Family::Exponential, NormMode::UnknownRange, seed);
        cfg.model = ModelConfig {
            grid: GridShape::new(8, 8).unwrap(),
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            n_outputs: 1,
            positional: true,
        };
        cfg.total_examples = 64;
        cfg.batch_size = 8;
        cfg.eval_every = 32;
        cfg.eval_tasks = 16;
        cfg
    }

    #[test]
    fn schedule_shape() {
        let mut cfg = tiny(0);
        cfg.total_examples = 800;
        cfg.batch_size = 8;
        cfg.eval_every = 80;
        cfg.warmup_frac = 0.1;
        // 100 steps, 10 warmup
        assert!((cfg.lr_at(0) - cfg.adam.lr / 10.0).abs() < 1e-15);
        assert!((cfg.lr_at(9) - cfg.adam.lr).abs() < 1e-15);
        assert!(cfg.lr_at(50) < cfg.lr_at(20));
        assert!(cfg.lr_at(99) > 0.0);
    }

    #[test]
    fn validation() {
        let mut cfg = tiny(0);
        cfg.eval_every = 12;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny(0);
        cfg.family = Family::Beta;
        cfg.prior = PriorSpec::beta_unit();
        cfg.model.n_outputs = 2;
        assert!(cfg.validate().is_err());
        assert!(tiny(0).validate().is_ok());
    }

    #[test]
    fn examples_are_seeded() {
        let cfg = tiny(3);
        let a = train_example(&cfg, 5).unwrap();
        let b = train_example(&cfg, 5).unwrap();
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.truth, b.truth);
        let c = train_example(&cfg, 6).unwrap();
        assert_ne!(a.truth, c.truth);
        assert!((a.grid.total() - (a.grid.total().round())).abs() < 1e-3);
    }

    #[test]
    fn runs_and_records_curve() {
        let out = train(&tiny(1)).unwrap();
        assert_eq!(out.model.step, 8);
        let seen: Vec<u64> = out.curve.points.iter().map(|p| p.examples_seen).collect();
        assert_eq!(seen, vec![32, 64]);
        assert!(out.best.is_some());
        assert!(out.curve.to_csv().starts_with("examples_seen,mse\n32,"));
    }
}
