//! TIMeSynC encoder-decoder and the SASRec-family baselines.

mod baselines;
pub mod checkpoint;
mod layers;
mod timesync;

use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::Dropout;
pub use crate::pipeline::{ownership_at, tabular_context_features, TabularSchema};

use crate::attention::TimeAliBiConfig;
use crate::calendar::{day_of_week, hour_of_day, week_of_month};
use crate::error::{Error, Result};
use crate::journey::{Product, Timestamp};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::pipeline::{PipelineState, TokenizedSample, BOS_TIME, N_PRODUCT_IDS};
use crate::rng::stream;

/// Feature switches; all `true` is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub decoder_time_encoder: bool,
    pub decoder_timealibi_self: bool,
    pub decoder_timealibi_cross: bool,
    pub decoder_product_fusion: bool,
    pub encoder_field_name_emb: bool,
    pub encoder_time_encoder: bool,
    pub encoder_timealibi_self: bool,
    pub encoder_product_emb: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags::all(true)
    }
}

impl AblationFlags {
    pub fn all(on: bool) -> Self {
        AblationFlags {
            decoder_time_encoder: on,
            decoder_timealibi_self: on,
            decoder_timealibi_cross: on,
            decoder_product_fusion: on,
            encoder_field_name_emb: on,
            encoder_time_encoder: on,
            encoder_timealibi_self: on,
            encoder_product_emb: on,
        }
    }

    /// Flag names in ablation-table order.
    pub const NAMES: [&'static str; 8] = [
        "decoder_time_encoder",
        "decoder_timealibi_self",
        "decoder_timealibi_cross",
        "decoder_product_fusion",
        "encoder_field_name_emb",
        "encoder_time_encoder",
        "encoder_timealibi_self",
        "encoder_product_emb",
    ];

    pub fn get(&self, name: &str) -> Option<bool> {
        let f = *self;
        Some(match name {
            "decoder_time_encoder" => f.decoder_time_encoder,
            "decoder_timealibi_self" => f.decoder_timealibi_self,
            "decoder_timealibi_cross" => f.decoder_timealibi_cross,
            "decoder_product_fusion" => f.decoder_product_fusion,
            "encoder_field_name_emb" => f.encoder_field_name_emb,
            "encoder_time_encoder" => f.encoder_time_encoder,
            "encoder_timealibi_self" => f.encoder_timealibi_self,
            "encoder_product_emb" => f.encoder_product_emb,
            _ => return None,
        })
    }

    /// Copy with one flag switched off.
    pub fn without(mut self, name: &str) -> Result<Self> {
        let slot = match name {
            "decoder_time_encoder" => &mut self.decoder_time_encoder,
            "decoder_timealibi_self" => &mut self.decoder_timealibi_self,
            "decoder_timealibi_cross" => &mut self.decoder_timealibi_cross,
            "decoder_product_fusion" => &mut self.decoder_product_fusion,
            "encoder_field_name_emb" => &mut self.encoder_field_name_emb,
            "encoder_time_encoder" => &mut self.encoder_time_encoder,
            "encoder_timealibi_self" => &mut self.encoder_timealibi_self,
            "encoder_product_emb" => &mut self.encoder_product_emb,
            _ => return Err(Error::Config(format!("unknown ablation flag {name}"))),
        };
        *slot = false;
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Learned-position table size for the baselines; later positions share
    /// the last row.
    pub max_positions: usize,
    /// Learned positional embeddings in the baselines.
    pub learned_positions: bool,
    pub alibi: TimeAliBiConfig,
    pub flags: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            ffn_dim: 128,
            dropout: 0.1,
            max_positions: 256,
            learned_positions: true,
            alibi: TimeAliBiConfig::new(4),
            flags: AblationFlags::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.ffn_dim == 0 || self.max_positions == 0 {
            return Err(Error::Config("ffn_dim and max_positions must be positive".into()));
        }
        if self.alibi.n_heads() != self.n_heads {
            return Err(Error::Config(format!(
                "{} TimeAliBi slopes for {} heads",
                self.alibi.n_heads(),
                self.n_heads
            )));
        }
        self.alibi.validate()
    }
}

/// Data-derived table sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_field_names: usize,
    pub n_field_values: usize,
    /// Intent vocabulary including reserved ids (decoder input side).
    pub n_intents: usize,
    /// Predictable classes (output side).
    pub n_classes: usize,
    pub tabular_dim: usize,
}

impl ModelDims {
    pub fn from_state(state: &PipelineState) -> Self {
        ModelDims {
            n_field_names: state.vocabs.field_names.len(),
            n_field_values: state.vocabs.field_values.len(),
            n_intents: state.vocabs.intents.len(),
            n_classes: state.vocabs.n_intent_classes(),
            tabular_dim: state.schema.dim(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Sasrec,
    SasrecTabular,
    SasrecEncoderTabular,
    Timesync,
}

impl ModelKind {
    pub const LADDER: [ModelKind; 4] = [
        ModelKind::Sasrec,
        ModelKind::SasrecTabular,
        ModelKind::SasrecEncoderTabular,
        ModelKind::Timesync,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Sasrec => "SASRec",
            ModelKind::SasrecTabular => "SASRec + Tabular Context",
            ModelKind::SasrecEncoderTabular => "SASRec + Encoder(Tabular Context)",
            ModelKind::Timesync => "TIMeSynC",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            ModelKind::Sasrec => "sasrec",
            ModelKind::SasrecTabular => "sasrec_tabular",
            ModelKind::SasrecEncoderTabular => "sasrec_encoder_tabular",
            ModelKind::Timesync => "timesync",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

enum Layout {
    Timesync(timesync::Params),
    Sasrec(baselines::Params),
}

pub struct Model {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub params: ParamStore,
    layout: Layout,
}

const INIT_STREAM: u64 = 0x1417;

impl Model {
    /// Every table and weight is drawn from `U(−1/√d, 1/√d)`; norms start at
    /// unit gain and biases at zero. All feature tables are created whatever
    /// the flags, so one seed yields the same shared weights across ablations.
    pub fn new(kind: ModelKind, config: &ModelConfig, dims: ModelDims, seed: u64) -> Result<Model> {
        config.validate()?;
        if dims.n_classes == 0 {
            return Err(Error::Config("no intent classes in the training vocabulary".into()));
        }
        let mut rng = stream(seed, &[INIT_STREAM]);
        let mut params = ParamStore::new();
        let layout = match kind {
            ModelKind::Timesync => Layout::Timesync(timesync::Params::init(&mut params, config, &dims, &mut rng)?),
            _ => Layout::Sasrec(baselines::Params::init(&mut params, kind, config, &dims, &mut rng)?),
        };
        Ok(Model {
            kind,
            config: config.clone(),
            dims,
            params,
            layout,
        })
    }

    /// Builds the forward graph and returns logits `[m, n_classes]`.
    pub fn forward(&self, g: &mut Graph<'_>, sample: &TokenizedSample, drop: &mut Dropout<'_>) -> Result<Var> {
        if sample.dec_t.is_empty() {
            return Err(Error::Contract(format!("user {} has no decoder positions", sample.user_id)));
        }
        match &self.layout {
            Layout::Timesync(p) => p.forward(g, &self.config, sample, drop),
            Layout::Sasrec(p) => p.forward(g, &self.config, sample, drop),
        }
    }

    /// Summed cross-entropy over supervised positions divided by `denominator`.
    pub fn loss(&self, g: &mut Graph<'_>, sample: &TokenizedSample, drop: &mut Dropout<'_>, denominator: f64) -> Result<Var> {
        let logits = self.forward(g, sample, drop)?;
        g.cross_entropy_with_denominator(logits, &sample.targets(), denominator)
    }

    pub fn predict_logits(&self, sample: &TokenizedSample) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, sample, &mut Dropout::eval())?;
        Ok(g.tensor(out))
    }

    /// Encoder output `[n, d_model]` in eval mode.
    pub fn encode_context(&self, sample: &TokenizedSample) -> Result<Tensor> {
        let p = self.timesync_params()?;
        let mut g = Graph::new(&self.params);
        let out = p.encode(&mut g, &self.config, sample, &mut Dropout::eval())?;
        Ok(g.tensor(out))
    }

    /// Decoder output `[m, d_model]` before product fusion, in eval mode.
    pub fn decode_intents(&self, sample: &TokenizedSample) -> Result<Tensor> {
        let p = self.timesync_params()?;
        let mut g = Graph::new(&self.params);
        let memory = p.encode(&mut g, &self.config, sample, &mut Dropout::eval())?;
        let out = p.decode(&mut g, &self.config, sample, memory, &mut Dropout::eval())?;
        Ok(g.tensor(out))
    }

    fn timesync_params(&self) -> Result<&timesync::Params> {
        match &self.layout {
            Layout::Timesync(p) => Ok(p),
            Layout::Sasrec(_) => Err(Error::Contract(format!("{} has no context encoder", self.kind))),
        }
    }

    /// The learned calendar encoding of one timestamp (zero for BOS).
    pub fn time_encode(&self, t: Timestamp) -> Result<Tensor> {
        let p = self.timesync_params()?;
        let mut g = Graph::new(&self.params);
        let v = p.time.apply(&mut g, &[t])?;
        Ok(g.tensor(v))
    }
}

/// `sign(x)·ln(1 + |x|)` applied to every tabular feature before the dense layer.
pub fn squash_tabular(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    let data: Vec<f64> = rows.iter().flatten().map(|x| x.signum() * x.abs().ln_1p()).collect();
    Tensor::new(vec![rows.len(), d], data)
}

pub(crate) fn product_rows(rows: &[[f64; 3]]) -> Result<Tensor> {
    Tensor::new(vec![rows.len(), Product::ALL.len()], rows.iter().flatten().copied().collect())
}

/// Day-of-week, week-of-month and hour-of-day embeddings summed per position.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TimeEncoder {
    dow: crate::numerics::ParamId,
    wom: crate::numerics::ParamId,
    hod: crate::numerics::ParamId,
}

impl TimeEncoder {
    pub(crate) fn init(store: &mut ParamStore, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(TimeEncoder {
            dow: layers::uniform(store, "time.day_of_week".into(), vec![7, d], d, rng)?,
            wom: layers::uniform(store, "time.week_of_month".into(), vec![5, d], d, rng)?,
            hod: layers::uniform(store, "time.hour_of_day".into(), vec![24, d], d, rng)?,
        })
    }

    pub(crate) fn apply(&self, g: &mut Graph<'_>, times: &[Timestamp]) -> Result<Var> {
        let ids = |f: fn(Timestamp) -> usize| -> Vec<Option<usize>> {
            times.iter().map(|&t| (t != BOS_TIME).then(|| f(t))).collect()
        };
        let (dow, wom, hod) = (g.param(self.dow), g.param(self.wom), g.param(self.hod));
        let a = g.embed_optional(dow, ids(day_of_week))?;
        let b = g.embed_optional(wom, ids(week_of_month))?;
        let c = g.embed_optional(hod, ids(hour_of_day))?;
        let ab = g.add(a, b)?;
        g.add(ab, c)
    }
}

pub(crate) const PRODUCT_TABLE_ROWS: usize = N_PRODUCT_IDS;

#[cfg(test)]
mod tests;
