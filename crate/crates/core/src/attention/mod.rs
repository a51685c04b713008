//! Multi-head attention with a wall-clock relative-time bias (TimeAliBi)
//! and timestamp-based causal masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::journey::Timestamp;
use crate::numerics::{AttentionInputs, Graph, ParamId, ParamStore, Tensor, Var};
use crate::pipeline::BOS_TIME;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaTransform {
    Linear,
    /// `sign(x)·ln(1 + |x|)`
    Log1p,
}

impl DeltaTransform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            DeltaTransform::Linear => x,
            DeltaTransform::Log1p => x.signum() * x.abs().ln_1p(),
        }
    }
}

/// Where the bias enters relative to the `1/√d_k` scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasPlacement {
    /// `(q·k + bias) / √d_k`
    InsideScale,
    /// `q·k / √d_k + bias`
    AfterScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeAliBiConfig {
    /// One slope per head.
    pub slopes: Vec<f64>,
    pub delta_transform: DeltaTransform,
    pub time_unit_seconds: f64,
    pub placement: BiasPlacement,
}

/// `s_h = −2^(−8h/H)` for `h = 1..=H`.
pub fn geometric_slopes(n_heads: usize) -> Vec<f64> {
    (1..=n_heads)
        .map(|h| -(2f64).powf(-8.0 * h as f64 / n_heads as f64))
        .collect()
}

impl TimeAliBiConfig {
    /// Geometric per-head slopes, log1p over day units, bias inside the scale.
    pub fn new(n_heads: usize) -> Self {
        TimeAliBiConfig {
            slopes: geometric_slopes(n_heads),
            delta_transform: DeltaTransform::Log1p,
            time_unit_seconds: 86_400.0,
            placement: BiasPlacement::InsideScale,
        }
    }

    /// The same scalar slope on every head.
    pub fn shared(n_heads: usize, slope: f64) -> Self {
        TimeAliBiConfig {
            slopes: vec![slope; n_heads],
            ..TimeAliBiConfig::new(n_heads)
        }
    }

    pub fn n_heads(&self) -> usize {
        self.slopes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.slopes.is_empty() || self.slopes.iter().any(|&s| !(s < 0.0) || !s.is_finite()) {
            return Err(Error::Config("TimeAliBi slopes must be finite and strictly negative".into()));
        }
        let shared = self.slopes.iter().all(|&s| s == self.slopes[0]);
        let distinct = self
            .slopes
            .iter()
            .enumerate()
            .all(|(i, a)| self.slopes[..i].iter().all(|b| a != b));
        if !shared && !distinct {
            return Err(Error::Config("TimeAliBi slopes must be distinct across heads or all shared".into()));
        }
        if !(self.time_unit_seconds > 0.0 && self.time_unit_seconds.is_finite()) {
            return Err(Error::Config("time_unit_seconds must be positive".into()));
        }
        Ok(())
    }
}

/// `bias[i][j] = slope · g((t_q[i] − t_k[j]) / unit)`, 0 wherever either
/// side is the BOS sentinel. Row-major `n_q × n_k`.
pub fn time_alibi_bias(
    t_q: &[Timestamp],
    t_k: &[Timestamp],
    slope: f64,
    transform: DeltaTransform,
    time_unit_seconds: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(t_q.len() * t_k.len());
    for &q in t_q {
        for &k in t_k {
            if q == BOS_TIME || k == BOS_TIME {
                out.push(0.0);
            } else {
                // integer difference first so a common shift cancels exactly
                let delta = (q - k) as f64 / time_unit_seconds;
                out.push(slope * transform.apply(delta));
            }
        }
    }
    out
}

/// Per-head biases stacked `H × n_q × n_k`, ready to add to `q·k/√d_k`.
pub fn multi_head_bias(config: &TimeAliBiConfig, t_q: &[Timestamp], t_k: &[Timestamp], d_head: usize) -> Vec<f64> {
    let factor = match config.placement {
        BiasPlacement::InsideScale => 1.0 / (d_head as f64).sqrt(),
        BiasPlacement::AfterScale => 1.0,
    };
    config
        .slopes
        .iter()
        .flat_map(|&s| time_alibi_bias(t_q, t_k, s * factor, config.delta_transform, config.time_unit_seconds))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub n_q: usize,
    pub n_k: usize,
    /// Row-major `n_q × n_k`.
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n_k + j]
    }

    /// Additionally blocks keys at later positions (`j > i`).
    pub fn and_positional(mut self) -> Self {
        for i in 0..self.n_q {
            for j in i + 1..self.n_k {
                self.allowed[i * self.n_k + j] = false;
            }
        }
        self
    }

    pub fn every_row_attends(&self) -> bool {
        self.allowed.chunks(self.n_k.max(1)).all(|r| r.iter().any(|&a| a))
    }
}

/// `t_k[j] ≤ t_q[i]`, or `<` when `strict`; BOS keys are always allowed.
pub fn temporal_causal_mask(t_q: &[Timestamp], t_k: &[Timestamp], strict: bool) -> AttentionMask {
    let allowed = t_q
        .iter()
        .flat_map(|&q| {
            t_k.iter()
                .map(move |&k| k == BOS_TIME || if strict { k < q } else { k <= q })
        })
        .collect();
    AttentionMask {
        n_q: t_q.len(),
        n_k: t_k.len(),
        allowed,
    }
}

/// Single-head `softmax((Q·Kᵀ + bias)/√d_k)·V` with masked logits at −∞.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&[f64]>, mask: Option<&AttentionMask>) -> Result<Tensor> {
    let d = q.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let scaled: Option<Vec<f64>> = bias.map(|b| b.iter().map(|x| x * scale).collect());
    let mut g = Graph::standalone();
    let (vq, vk, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let out = g.attention(
        vq,
        vk,
        vv,
        &AttentionInputs {
            heads: 1,
            scale,
            bias: scaled.as_deref(),
            mask: mask.map(|m| m.allowed.as_slice()),
        },
    )?;
    Ok(g.tensor(out))
}

/// Projection weights of one multi-head attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionWeights {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionWeights {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, d_model: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut mat = |name: &str, rng: &mut R| store.add_uniform(format!("{prefix}.{name}"), vec![d_model, d_model], bound, rng);
        let (wq, wk, wv, wo) = (mat("wq", rng)?, mat("wk", rng)?, mat("wv", rng)?, mat("wo", rng)?);
        let mut vec_ = |name: &str, rng: &mut R| store.add_uniform(format!("{prefix}.{name}"), vec![d_model], bound, rng);
        let (bq, bk, bv, bo) = (vec_("bq", rng)?, vec_("bk", rng)?, vec_("bv", rng)?, vec_("bo", rng)?);
        Ok(AttentionWeights {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        })
    }
}

/// Projected multi-head attention of queries `x_q` over `x_kv`. With
/// `alibi`, each head adds its own time bias; `mask` gates every head.
pub fn multi_head(
    g: &mut Graph<'_>,
    w: &AttentionWeights,
    x_q: Var,
    x_kv: Var,
    n_heads: usize,
    times: (&[Timestamp], &[Timestamp]),
    alibi: Option<&TimeAliBiConfig>,
    mask: &AttentionMask,
) -> Result<Var> {
    let d = g.shape(x_q)[1];
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!("model dim {d} not divisible by {n_heads} heads")));
    }
    let (t_q, t_k) = times;
    if t_q.len() != g.shape(x_q)[0] || t_k.len() != g.shape(x_kv)[0] {
        return Err(Error::shape("multi_head timestamps", g.shape(x_q), &[t_q.len(), t_k.len()]));
    }
    if let Some(cfg) = alibi {
        if cfg.n_heads() != n_heads {
            return Err(Error::Config(format!("{} slopes for {n_heads} heads", cfg.n_heads())));
        }
    }
    let d_head = d / n_heads;
    let bias = alibi.map(|cfg| multi_head_bias(cfg, t_q, t_k, d_head));
    let p = |g: &mut Graph<'_>, id| g.param(id);
    let (wq, bq, wk, bk) = (p(g, w.wq), p(g, w.bq), p(g, w.wk), p(g, w.bk));
    let (wv, bv, wo, bo) = (p(g, w.wv), p(g, w.bv), p(g, w.wo), p(g, w.bo));
    let q = g.linear(x_q, wq, bq)?;
    let k = g.linear(x_kv, wk, bk)?;
    let v = g.linear(x_kv, wv, bv)?;
    let heads = g.attention(
        q,
        k,
        v,
        &AttentionInputs {
            heads: n_heads,
            scale: 1.0 / (d_head as f64).sqrt(),
            bias: bias.as_deref(),
            mask: Some(&mask.allowed),
        },
    )?;
    g.linear(heads, wo, bo)
}
