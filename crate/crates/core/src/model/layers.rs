use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{multi_head, AttentionMask, AttentionWeights, TimeAliBiConfig};
use crate::error::Result;
use crate::journey::Timestamp;
use crate::numerics::{Graph, ParamId, ParamStore, Var};

/// Dropout state threaded through one forward pass; `None` means eval mode.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn eval() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    pub fn apply(&mut self, g: &mut Graph<'_>, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => x,
        }
    }
}

pub(crate) fn uniform<R: Rng>(store: &mut ParamStore, name: String, shape: Vec<usize>, d_model: usize, rng: &mut R) -> Result<ParamId> {
    store.add_uniform(name, shape, 1.0 / (d_model as f64).sqrt(), rng)
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add_constant(format!("{prefix}.gain"), vec![d], 1.0)?,
            bias: store.add_constant(format!("{prefix}.bias"), vec![d], 0.0)?,
        })
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (a, b) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, a, b)
    }
}

pub const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, d_model: usize, rng: &mut R) -> Result<Self> {
        Ok(Dense {
            w: uniform(store, format!("{prefix}.w"), vec![d_in, d_out], d_model, rng)?,
            b: store.add_constant(format!("{prefix}.b"), vec![d_out], 0.0)?,
        })
    }

    /// Class head `head.w`/`head.b`, its weights drawn at a tenth of the usual
    /// bound so untrained logits stay close to uniform.
    pub fn head<R: Rng>(store: &mut ParamStore, d_model: usize, n_classes: usize, rng: &mut R) -> Result<Self> {
        let bound = HEAD_INIT_SCALE / (d_model as f64).sqrt();
        Ok(Dense {
            w: store.add_uniform("head.w", vec![d_model, n_classes], bound, rng)?,
            b: store.add_constant("head.b", vec![n_classes], 0.0)?,
        })
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    norm: LayerNorm,
    up: Dense,
    down: Dense,
}

impl FeedForward {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, ffn: usize, rng: &mut R) -> Result<Self> {
        Ok(FeedForward {
            norm: LayerNorm::init(store, &format!("{prefix}.norm"), d)?,
            up: Dense::init(store, &format!("{prefix}.up"), d, ffn, d, rng)?,
            down: Dense::init(store, &format!("{prefix}.down"), ffn, d, d, rng)?,
        })
    }

    /// `x + dropout(W₂·gelu(W₁·LN(x)))`
    pub fn apply(&self, g: &mut Graph<'_>, x: Var, drop: &mut Dropout<'_>) -> Result<Var> {
        let h = self.norm.apply(g, x)?;
        let h = self.up.apply(g, h)?;
        let h = g.gelu(h);
        let h = self.down.apply(g, h)?;
        let h = drop.apply(g, h);
        g.add(x, h)
    }
}

/// Pre-norm attention sublayer: `x + dropout(MHA(LN(x), kv))`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionBlock {
    norm: LayerNorm,
    attn: AttentionWeights,
}

pub struct AttentionSite<'a> {
    pub heads: usize,
    pub t_q: &'a [Timestamp],
    pub t_k: &'a [Timestamp],
    pub alibi: Option<&'a TimeAliBiConfig>,
    pub mask: &'a AttentionMask,
}

impl AttentionBlock {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(AttentionBlock {
            norm: LayerNorm::init(store, &format!("{prefix}.norm"), d)?,
            attn: AttentionWeights::init(store, prefix, d, rng)?,
        })
    }

    /// Self-attention when `kv` is `None`, otherwise attention over `kv`.
    pub fn apply(&self, g: &mut Graph<'_>, x: Var, kv: Option<Var>, site: &AttentionSite<'_>, drop: &mut Dropout<'_>) -> Result<Var> {
        let h = self.norm.apply(g, x)?;
        let kv = kv.unwrap_or(h);
        let a = multi_head(g, &self.attn, h, kv, site.heads, (site.t_q, site.t_k), site.alibi, site.mask)?;
        let a = drop.apply(g, a);
        g.add(x, a)
    }
}

/// `Linear([x ; Dense(side)])`, mapping back to `d_model`.
#[derive(Clone, Copy, Debug)]
pub struct Fusion {
    side: Dense,
    out: Dense,
}

impl Fusion {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, side_dim: usize, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Fusion {
            side: Dense::init(store, &format!("{prefix}.side"), side_dim, d, d, rng)?,
            out: Dense::init(store, &format!("{prefix}.out"), 2 * d, d, d, rng)?,
        })
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var, side: Var) -> Result<Var> {
        let s = self.side.apply(g, side)?;
        let cat = g.concat_cols(x, s)?;
        self.out.apply(g, cat)
    }
}
