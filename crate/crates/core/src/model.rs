//! The transformer regressor.
//!
//! The encoded grid rows are the input embeddings (plus learned absolute
//! position embeddings). A stack of pre-norm encoder blocks follows, and a
//! linear head reads the first output embedding of the last block. Only
//! row 0 of the last block is ever read, so that block computes queries,
//! the residual and the feed-forward for row 0 alone.

use serde::{Deserialize, Serialize};

use crate::distributions::{Family, ParamVector};
use crate::encode::{EncodedGrid, GridShape};
use crate::error::{invalid, shape, Result};
use crate::nn::{Graph, Scalar, Tensor, Var};
use crate::normalize::{recover_params, NormMode, NormRecord};
use crate::rng::{sub_seed, tags, Rng};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: GridShape,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Parameters predicted: 1 (exponential) or 2 (normal, beta).
    pub n_outputs: usize,
    pub positional: bool,
}

impl ModelConfig {
    /// 64 x 64 grid, 2 layers, 4 heads.
    pub fn desk(n_outputs: usize) -> Self {
        Self {
            grid: GridShape::DESK,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            n_outputs,
            positional: true,
        }
    }

    /// 1024 x 384 grid, 6 layers, 6 heads of width 64.
    pub fn paper_full(n_outputs: usize) -> Self {
        Self {
            grid: GridShape::PAPER_FULL,
            n_layers: 6,
            n_heads: 6,
            ffn_dim: 1536,
            n_outputs,
            positional: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        GridShape::new(self.grid.len, self.grid.dim)?;
        if self.n_layers == 0 {
            return Err(invalid("model needs at least one layer"));
        }
        if self.n_heads == 0 || !self.grid.dim.is_multiple_of(self.n_heads) {
            return Err(invalid(format!(
                "embedding size {} is not divisible by {} heads",
                self.grid.dim, self.n_heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(invalid("ffn_dim must be positive"));
        }
        if !(1..=2).contains(&self.n_outputs) {
            return Err(invalid(format!(
                "n_outputs must be 1 or 2, got {}",
                self.n_outputs
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.grid.dim / self.n_heads
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let k = self.grid.dim;
        let f = self.ffn_dim;
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec { name, shape, init })
        };
        if self.positional {
            push("pos_emb".into(), vec![self.grid.len, k], Init::Normal);
        }
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            push(p("ln1.gain"), vec![k], Init::Ones);
            push(p("ln1.bias"), vec![k], Init::Zeros);
            for w in ["q", "k", "v", "o"] {
                push(p(&format!("attn.w{w}")), vec![k, k], Init::Normal);
                push(p(&format!("attn.b{w}")), vec![k], Init::Zeros);
            }
            push(p("ln2.gain"), vec![k], Init::Ones);
            push(p("ln2.bias"), vec![k], Init::Zeros);
            push(p("ffn.w1"), vec![k, f], Init::Normal);
            push(p("ffn.b1"), vec![f], Init::Zeros);
            push(p("ffn.w2"), vec![f, k], Init::Normal);
            push(p("ffn.b2"), vec![k], Init::Zeros);
        }
        push("ln_f.gain".into(), vec![k], Init::Ones);
        push("ln_f.bias".into(), vec![k], Init::Zeros);
        push("head.w".into(), vec![k, self.n_outputs], Init::Normal);
        push("head.b".into(), vec![self.n_outputs], Init::Zeros);
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// N(0, INIT_STD^2)
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    /// In `ModelConfig::param_specs` order.
    pub params: Vec<Tensor>,
    pub step: u64,
}

impl ModelState {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init_seed = sub_seed(seed, tags::MODEL_INIT);
        let params = config
            .param_specs()
            .into_iter()
            .enumerate()
            .map(|(i, spec)| {
                let n: usize = spec.shape.iter().product();
                let data = match spec.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal => {
                        let mut rng = Rng::derive(init_seed, i as u64);
                        (0..n)
                            .map(|_| {
                                crate::distributions::sample_normal(&mut rng, 0.0, INIT_STD)
                                    .map(|x| x as f32)
                            })
                            .collect::<Result<_>>()?
                    }
                };
                Tensor::new(spec.shape, data)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            params,
            step: 0,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Check that every tensor has the shape the config implies.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = self.config.param_specs();
        if specs.len() != self.params.len() {
            return Err(shape(format!(
                "config implies {} tensors, state has {}",
                specs.len(),
                self.params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&self.params) {
            if s.shape != p.shape() {
                return Err(shape(format!(
                    "{}: expected {:?}, got {:?}",
                    s.name,
                    s.shape,
                    p.shape()
                )));
            }
        }
        Ok(())
    }

    /// Raw network outputs for one grid (normalized units in unknown-range
    /// mode, parameter units in known-range mode).
    pub fn forward(&self, grid: &EncodedGrid) -> Result<ParamVector> {
        let mut g = Graph::<f32>::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let input = grid_input(&mut g, &self.config, grid)?;
        let out = forward_graph(&mut g, &self.config, &vars, input)?;
        Ok(ParamVector(
            g.value(out).data().iter().map(|&x| x as f64).collect(),
        ))
    }

    /// Estimate in original units: forward, then undo the normalization.
    pub fn estimate(&self, grid: &EncodedGrid, record: &NormRecord) -> Result<ParamVector> {
        let raw = self.forward(grid)?;
        recover_params(record.family, record, &raw)
    }

    /// Training loss for one example and its gradient for every parameter.
    pub fn loss_and_grads(
        &self,
        grid: &EncodedGrid,
        record: &NormRecord,
        truth: &ParamVector,
        dropout: Option<&mut Dropout>,
    ) -> Result<(f64, Vec<Tensor>)> {
        let (loss, grads) =
            loss_and_grads_with(&self.config, &self.params, grid, record, truth, dropout)?;
        Ok((loss as f64, grads))
    }

    pub fn params_f64(&self) -> Vec<Tensor<f64>> {
        self.params.iter().map(|p| p.cast()).collect()
    }
}

fn grid_input<T: Scalar>(g: &mut Graph<T>, cfg: &ModelConfig, grid: &EncodedGrid) -> Result<Var> {
    if grid.shape != cfg.grid {
        return Err(shape(format!(
            "grid is {}x{}, model expects {}x{}",
            grid.shape.len, grid.shape.dim, cfg.grid.len, cfg.grid.dim
        )));
    }
    let data = grid.weights.iter().map(|&w| T::of(w as f64)).collect();
    Ok(g.constant(Tensor::new([cfg.grid.len, cfg.grid.dim], data)?))
}

struct Cursor<'a> {
    vars: &'a [Var],
    at: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.at];
        self.at += 1;
        v
    }
}

/// Inverted dropout on the attention and feed-forward outputs. Training
/// only; inference never drops.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

impl Dropout<'_> {
    fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - self.rate));
        let shape = g.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| {
                if self.rng.uniform() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mask = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, mask)
    }
}

/// Build the forward pass on `g`. `params` are graph vars in
/// `param_specs` order; returns a `[1, n_outputs]` var.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &[Var],
    input: Var,
) -> Result<Var> {
    forward_graph_with(g, cfg, params, input, None)
}

pub fn forward_graph_with<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &[Var],
    input: Var,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    if params.len() != cfg.param_specs().len() {
        return Err(shape(format!(
            "model needs {} parameter tensors, got {}",
            cfg.param_specs().len(),
            params.len()
        )));
    }
    let mut p = Cursor {
        vars: params,
        at: 0,
    };
    let mut x = input;
    if cfg.positional {
        let pos = p.next();
        x = g.add(x, pos)?;
    }
    let dh = cfg.head_dim();
    let att_scale = 1.0 / (dh as f64).sqrt();

    for layer in 0..cfg.n_layers {
        let last = layer + 1 == cfg.n_layers;
        let (ln1_g, ln1_b) = (p.next(), p.next());
        let (wq, bq, wk, bk) = (p.next(), p.next(), p.next(), p.next());
        let (wv, bv, wo, bo) = (p.next(), p.next(), p.next(), p.next());
        let (ln2_g, ln2_b) = (p.next(), p.next());
        let (w1, b1, w2, b2) = (p.next(), p.next(), p.next(), p.next());

        let h = g.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
        let (q_src, residual) = if last {
            (g.slice_rows(h, 0, 1)?, g.slice_rows(x, 0, 1)?)
        } else {
            (h, x)
        };
        let q = g.linear(q_src, wq, bq)?;
        let k = g.linear(h, wk, bk)?;
        let v = g.linear(h, wv, bv)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let (lo, hi) = (head * dh, (head + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let scores = g.matmul_bt(qh, kh)?;
            let scores = g.scale(scores, att_scale);
            let weights = g.softmax(scores);
            heads.push(g.matmul(weights, vh)?);
        }
        let attn = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let mut attn = g.linear(attn, wo, bo)?;
        if let Some(d) = dropout.as_deref_mut() {
            attn = d.apply(g, attn)?;
        }
        x = g.add(residual, attn)?;

        let h2 = g.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
        let f = g.linear(h2, w1, b1)?;
        let f = g.gelu(f);
        let mut f = g.linear(f, w2, b2)?;
        if let Some(d) = dropout.as_deref_mut() {
            f = d.apply(g, f)?;
        }
        x = g.add(x, f)?;
    }

    let (lnf_g, lnf_b, head_w, head_b) = (p.next(), p.next(), p.next(), p.next());
    // the last block already reduced x to row 0
    let h = g.layer_norm(x, lnf_g, lnf_b, LN_EPS)?;
    g.linear(h, head_w, head_b)
}

/// Mean over parameters of the squared error after mapping raw outputs to
/// original units through `record`. Recovery is affine, so gradients flow
/// through it.
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    raw: Var,
    record: &NormRecord,
    truth: &[f64],
) -> Result<Var> {
    let n = g.value(raw).len();
    if n != truth.len() || n != record.family.n_params() {
        return Err(shape(format!(
            "{} outputs vs {} true parameters for {}",
            n,
            truth.len(),
            record.family
        )));
    }
    let affine = record.recovery_affine();
    let scales = g.constant(Tensor::new(
        [1, n],
        affine.iter().map(|a| T::of(a.0)).collect(),
    )?);
    let shifts = g.constant(Tensor::new(
        [1, n],
        affine.iter().map(|a| T::of(a.1)).collect(),
    )?);
    let target = g.constant(Tensor::new(
        [1, n],
        truth.iter().map(|&t| T::of(t)).collect(),
    )?);
    let est = g.mul(raw, scales)?;
    let est = g.add(est, shifts)?;
    let diff = g.sub(est, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Loss and parameter gradients for one example, in any precision.
pub fn loss_and_grads<T: Scalar>(
    cfg: &ModelConfig,
    params: &[Tensor<T>],
    grid: &EncodedGrid,
    record: &NormRecord,
    truth: &[f64],
) -> Result<(T, Vec<Tensor<T>>)> {
    loss_and_grads_with(cfg, params, grid, record, truth, None)
}

pub fn loss_and_grads_with<T: Scalar>(
    cfg: &ModelConfig,
    params: &[Tensor<T>],
    grid: &EncodedGrid,
    record: &NormRecord,
    truth: &[f64],
    dropout: Option<&mut Dropout>,
) -> Result<(T, Vec<Tensor<T>>)> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let input = grid_input(&mut g, cfg, grid)?;
    let raw = forward_graph_with(&mut g, cfg, &vars, input, dropout)?;
    let loss = loss_graph(&mut g, raw, record, truth)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let out = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take_or_zeros(v, p.shape()))
        .collect();
    Ok((value, out))
}

/// Loss value for given raw outputs, without a graph.
pub fn loss(
    family: Family,
    mode: NormMode,
    record: &NormRecord,
    raw: &ParamVector,
    true_params: &ParamVector,
) -> Result<f64> {
    if record.mode != mode {
        return Err(invalid(format!(
            "record is {} range, expected {mode}",
            record.mode
        )));
    }
    if raw.len() != true_params.len() {
        return Err(shape(format!(
            "{} raw outputs vs {} true parameters",
            raw.len(),
            true_params.len()
        )));
    }
    let est = recover_params(family, record, raw)?;
    Ok(squared_error(&est, true_params))
}

/// Mean over parameters of the squared error.
pub fn squared_error(est: &[f64], truth: &[f64]) -> f64 {
    est.iter()
        .zip(truth)
        .map(|(e, t)| (e - t) * (e - t))
        .sum::<f64>()
        / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encode::{encode, EncodingScheme};
    use crate::normalize::{forward_known, forward_unknown};

    fn tiny(n_outputs: usize) -> ModelConfig {
        ModelConfig {
            grid: GridShape::new(8, 8).unwrap(),
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 16,
            n_outputs,
            positional: true,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelState::init(ModelConfig::desk(1), 7).unwrap();
        let b = ModelState::init(ModelConfig::desk(1), 7).unwrap();
        assert_eq!(a, b);
        let c = ModelState::init(ModelConfig::desk(1), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn desk_param_count_closed_form() {
        let (l, k, f, p, layers) = (64, 64, 128, 2, 2);
        let per_layer = 2 * k + 4 * (k * k + k) + 2 * k + (k * f + f) + (f * k + k);
        let expected = l * k + layers * per_layer + 2 * k + k * p + p;
        let state = ModelState::init(ModelConfig::desk(2), 0).unwrap();
        assert_eq!(state.param_count(), expected);
        assert_eq!(ModelConfig::desk(2).param_count(), expected);
    }

    #[test]
    fn heads_must_divide_embedding() {
        let cfg = ModelConfig {
            n_heads: 7,
            ..ModelConfig::paper_full(2)
        };
        assert!(matches!(
            ModelState::init(cfg, 0),
            Err(crate::Error::InvalidArgument(_))
        ));
        assert!(ModelConfig {
            n_outputs: 3,
            ..tiny(1)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_grid_is_finite() {
        for p in [1, 2] {
            let state = ModelState::init(tiny(p), 1).unwrap();
            let out = state
                .forward(&EncodedGrid::zeros(state.config.grid))
                .unwrap();
            assert_eq!(out.len(), p);
            assert!(out.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn permuted_sample_same_output() {
        let state = ModelState::init(tiny(2), 3).unwrap();
        let s = [0.1, 0.7, 0.33, 0.9];
        let mut r = s;
        r.reverse();
        let ga = encode(&s, EncodingScheme::SeqFirst, state.config.grid).unwrap();
        let gb = encode(&r, EncodingScheme::SeqFirst, state.config.grid).unwrap();
        assert_eq!(state.forward(&ga).unwrap(), state.forward(&gb).unwrap());
    }

    #[test]
    fn grid_shape_mismatch() {
        let state = ModelState::init(tiny(1), 0).unwrap();
        let grid = EncodedGrid::zeros(GridShape::new(4, 8).unwrap());
        assert!(matches!(state.forward(&grid), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn loss_examples() {
        let (_, rec) = forward_known(Family::Normal, &[0.0]).unwrap();
        let truth = ParamVector::new([1.0, 2.0]);
        assert_eq!(
            loss(Family::Normal, NormMode::KnownRange, &rec, &truth, &truth).unwrap(),
            0.0
        );
        let raw = ParamVector::new([2.0, 5.0]);
        assert_eq!(
            loss(Family::Normal, NormMode::KnownRange, &rec, &raw, &truth).unwrap(),
            5.0
        );

        let (_, rec) = forward_unknown(Family::Exponential, &[1.0, 2.0, 4.0]).unwrap();
        let l = loss(
            Family::Exponential,
            NormMode::UnknownRange,
            &rec,
            &ParamVector::new([0.3]),
            &ParamVector::new([2.0]),
        )
        .unwrap();
        assert!((l - 0.64).abs() < 1e-12);

        let err = loss(
            Family::Exponential,
            NormMode::UnknownRange,
            &rec,
            &ParamVector::new([0.3, 1.0]),
            &ParamVector::new([2.0]),
        );
        assert!(matches!(err, Err(crate::Error::Shape(_))));
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        let state = ModelState::init(tiny(2), 5).unwrap();
        let sample = [-3.0, 1.5, 4.0, 0.2];
        let (norm, rec) = forward_unknown(Family::Normal, &sample).unwrap();
        let grid = encode(&norm, EncodingScheme::SeqFirst, state.config.grid).unwrap();
        let truth = ParamVector::new([0.5, 3.0]);
        let (l, grads) = state.loss_and_grads(&grid, &rec, &truth, None).unwrap();
        let raw = state.forward(&grid).unwrap();
        let direct = loss(Family::Normal, NormMode::UnknownRange, &rec, &raw, &truth).unwrap();
        assert!((l - direct).abs() < 1e-4 * direct.max(1.0));
        assert_eq!(grads.len(), state.params.len());
    }
}
