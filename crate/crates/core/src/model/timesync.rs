use rand_chacha::ChaCha8Rng;

use super::layers::{uniform, AttentionBlock, AttentionSite, Dense, Dropout, FeedForward, Fusion, LayerNorm};
use super::{product_rows, ModelConfig, ModelDims, TimeEncoder, PRODUCT_TABLE_ROWS};
use crate::attention::temporal_causal_mask;
use crate::error::Result;
use crate::journey::Product;
use crate::numerics::{Graph, ParamId, ParamStore, Var};
use crate::pipeline::TokenizedSample;

pub(super) struct EncoderLayer {
    attn: AttentionBlock,
    ffn: FeedForward,
}

pub(super) struct DecoderLayer {
    self_attn: AttentionBlock,
    cross_attn: AttentionBlock,
    ffn: FeedForward,
}

pub(super) struct Params {
    field_values: ParamId,
    field_names: ParamId,
    products: ParamId,
    pub(super) time: TimeEncoder,
    intents: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    product_fusion: Fusion,
    head: Dense,
}

impl Params {
    pub(super) fn init(store: &mut ParamStore, c: &ModelConfig, dims: &ModelDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = c.d_model;
        let field_values = uniform(store, "emb.field_value".into(), vec![dims.n_field_values, d], d, rng)?;
        let field_names = uniform(store, "emb.field_name".into(), vec![dims.n_field_names, d], d, rng)?;
        let products = uniform(store, "emb.product".into(), vec![PRODUCT_TABLE_ROWS, d], d, rng)?;
        let time = TimeEncoder::init(store, d, rng)?;
        let intents = uniform(store, "emb.intent".into(), vec![dims.n_intents, d], d, rng)?;
        let encoder = (0..c.n_encoder_layers)
            .map(|l| {
                Ok(EncoderLayer {
                    attn: AttentionBlock::init(store, &format!("enc{l}.self"), d, rng)?,
                    ffn: FeedForward::init(store, &format!("enc{l}.ffn"), d, c.ffn_dim, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let encoder_norm = LayerNorm::init(store, "enc.norm", d)?;
        let decoder = (0..c.n_decoder_layers)
            .map(|l| {
                Ok(DecoderLayer {
                    self_attn: AttentionBlock::init(store, &format!("dec{l}.self"), d, rng)?,
                    cross_attn: AttentionBlock::init(store, &format!("dec{l}.cross"), d, rng)?,
                    ffn: FeedForward::init(store, &format!("dec{l}.ffn"), d, c.ffn_dim, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let decoder_norm = LayerNorm::init(store, "dec.norm", d)?;
        let product_fusion = Fusion::init(store, "fuse.product", Product::ALL.len(), d, rng)?;
        let head = Dense::head(store, d, dims.n_classes, rng)?;
        Ok(Params {
            field_values,
            field_names,
            products,
            time,
            intents,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            product_fusion,
            head,
        })
    }

    /// Encoder output `[n, d_model]`.
    pub(super) fn encode(&self, g: &mut Graph<'_>, c: &ModelConfig, s: &TokenizedSample, drop: &mut Dropout<'_>) -> Result<Var> {
        let f = c.flags;
        let table = g.param(self.field_values);
        let mut x = g.embed(table, &s.enc_fv)?;
        if f.encoder_field_name_emb {
            let table = g.param(self.field_names);
            let e = g.embed(table, &s.enc_fn)?;
            x = g.add(x, e)?;
        }
        if f.encoder_product_emb {
            let table = g.param(self.products);
            let e = g.embed(table, &s.enc_p)?;
            x = g.add(x, e)?;
        }
        if f.encoder_time_encoder {
            let e = self.time.apply(g, &s.enc_t)?;
            x = g.add(x, e)?;
        }
        x = drop.apply(g, x);
        let mask = temporal_causal_mask(&s.enc_t, &s.enc_t, false);
        let site = AttentionSite {
            heads: c.n_heads,
            t_q: &s.enc_t,
            t_k: &s.enc_t,
            alibi: f.encoder_timealibi_self.then_some(&c.alibi),
            mask: &mask,
        };
        for layer in &self.encoder {
            x = layer.attn.apply(g, x, None, &site, drop)?;
            x = layer.ffn.apply(g, x, drop)?;
        }
        self.encoder_norm.apply(g, x)
    }

    /// Decoder output `[m, d_model]` before product fusion.
    pub(super) fn decode(
        &self,
        g: &mut Graph<'_>,
        c: &ModelConfig,
        s: &TokenizedSample,
        memory: Var,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        let f = c.flags;
        let table = g.param(self.intents);
        let mut x = g.embed(table, &s.decoder_inputs())?;
        if f.decoder_time_encoder {
            let e = self.time.apply(g, &s.dec_t)?;
            x = g.add(x, e)?;
        }
        x = drop.apply(g, x);
        let self_mask = temporal_causal_mask(&s.dec_t, &s.dec_t, false).and_positional();
        let cross_mask = temporal_causal_mask(&s.dec_t, &s.enc_t, true);
        let self_site = AttentionSite {
            heads: c.n_heads,
            t_q: &s.dec_t,
            t_k: &s.dec_t,
            alibi: f.decoder_timealibi_self.then_some(&c.alibi),
            mask: &self_mask,
        };
        let cross_site = AttentionSite {
            heads: c.n_heads,
            t_q: &s.dec_t,
            t_k: &s.enc_t,
            alibi: f.decoder_timealibi_cross.then_some(&c.alibi),
            mask: &cross_mask,
        };
        for layer in &self.decoder {
            x = layer.self_attn.apply(g, x, None, &self_site, drop)?;
            x = layer.cross_attn.apply(g, x, Some(memory), &cross_site, drop)?;
            x = layer.ffn.apply(g, x, drop)?;
        }
        self.decoder_norm.apply(g, x)
    }

    pub(super) fn fuse_product(&self, g: &mut Graph<'_>, c: &ModelConfig, x: Var, s: &TokenizedSample) -> Result<Var> {
        if !c.flags.decoder_product_fusion {
            return Ok(x);
        }
        let own = g.input(product_rows(&s.dec_product_onehot)?);
        self.product_fusion.apply(g, x, own)
    }

    pub(super) fn forward(&self, g: &mut Graph<'_>, c: &ModelConfig, s: &TokenizedSample, drop: &mut Dropout<'_>) -> Result<Var> {
        let memory = self.encode(g, c, s, drop)?;
        let h = self.decode(g, c, s, memory, drop)?;
        let h = self.fuse_product(g, c, h, s)?;
        self.head.apply(g, h)
    }
}
