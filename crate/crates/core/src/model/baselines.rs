use rand_chacha::ChaCha8Rng;

use super::layers::{uniform, AttentionBlock, AttentionSite, Dense, Dropout, FeedForward, Fusion, LayerNorm};
use super::{squash_tabular, ModelConfig, ModelDims, ModelKind};
use crate::attention::{temporal_causal_mask, AttentionMask};
use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Var};
use crate::pipeline::TokenizedSample;

struct DecoderLayer {
    self_attn: AttentionBlock,
    cross_attn: Option<AttentionBlock>,
    ffn: FeedForward,
}

/// Encoder over tabular snapshots taken at each intent time.
struct SnapshotEncoder {
    input: Dense,
    positions: ParamId,
    layers: Vec<(AttentionBlock, FeedForward)>,
    norm: LayerNorm,
}

pub(super) struct Params {
    intents: ParamId,
    positions: ParamId,
    decoder: Vec<DecoderLayer>,
    norm: LayerNorm,
    encoder: Option<SnapshotEncoder>,
    tabular: Option<Fusion>,
    head: Dense,
}

fn position_ids(m: usize, max: usize) -> Vec<usize> {
    (0..m).map(|i| i.min(max - 1)).collect()
}

/// Lower-triangular `j ≤ i`.
fn positional_mask(m: usize) -> AttentionMask {
    AttentionMask {
        n_q: m,
        n_k: m,
        allowed: (0..m).flat_map(|i| (0..m).map(move |j| j <= i)).collect(),
    }
}

impl Params {
    pub(super) fn init(
        store: &mut ParamStore,
        kind: ModelKind,
        c: &ModelConfig,
        dims: &ModelDims,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = c.d_model;
        let with_encoder = kind == ModelKind::SasrecEncoderTabular;
        let intents = uniform(store, "emb.intent".into(), vec![dims.n_intents, d], d, rng)?;
        let positions = uniform(store, "emb.position".into(), vec![c.max_positions, d], d, rng)?;
        let encoder = if with_encoder {
            Some(SnapshotEncoder {
                input: Dense::init(store, "snap.input", dims.tabular_dim, d, d, rng)?,
                positions: uniform(store, "snap.position".into(), vec![c.max_positions, d], d, rng)?,
                layers: (0..c.n_encoder_layers)
                    .map(|l| {
                        Ok((
                            AttentionBlock::init(store, &format!("enc{l}.self"), d, rng)?,
                            FeedForward::init(store, &format!("enc{l}.ffn"), d, c.ffn_dim, rng)?,
                        ))
                    })
                    .collect::<Result<_>>()?,
                norm: LayerNorm::init(store, "enc.norm", d)?,
            })
        } else {
            None
        };
        let decoder = (0..c.n_decoder_layers)
            .map(|l| {
                Ok(DecoderLayer {
                    self_attn: AttentionBlock::init(store, &format!("dec{l}.self"), d, rng)?,
                    cross_attn: if with_encoder {
                        Some(AttentionBlock::init(store, &format!("dec{l}.cross"), d, rng)?)
                    } else {
                        None
                    },
                    ffn: FeedForward::init(store, &format!("dec{l}.ffn"), d, c.ffn_dim, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let norm = LayerNorm::init(store, "dec.norm", d)?;
        let tabular = if kind == ModelKind::Sasrec {
            None
        } else {
            Some(Fusion::init(store, "fuse.tabular", dims.tabular_dim, d, rng)?)
        };
        let head = Dense::head(store, d, dims.n_classes, rng)?;
        Ok(Params {
            intents,
            positions,
            decoder,
            norm,
            encoder,
            tabular,
            head,
        })
    }

    fn embed_with_positions(&self, g: &mut Graph<'_>, table: ParamId, ids: &[usize], c: &ModelConfig) -> Result<Var> {
        let t = g.param(table);
        let x = g.embed(t, ids)?;
        if !c.learned_positions {
            return Ok(x);
        }
        let p = g.param(self.positions);
        let pos = g.embed(p, &position_ids(ids.len(), c.max_positions))?;
        g.add(x, pos)
    }

    pub(super) fn forward(&self, g: &mut Graph<'_>, c: &ModelConfig, s: &TokenizedSample, drop: &mut Dropout<'_>) -> Result<Var> {
        let m = s.dec_t.len();
        let tab = if self.tabular.is_some() || self.encoder.is_some() {
            Some(g.input(squash_tabular(&s.dec_tabular)?))
        } else {
            None
        };

        let memory = match (&self.encoder, tab) {
            (Some(enc), Some(tab)) => {
                let mut x = enc.input.apply(g, tab)?;
                if c.learned_positions {
                    let p = g.param(enc.positions);
                    let pos = g.embed(p, &position_ids(m, c.max_positions))?;
                    x = g.add(x, pos)?;
                }
                x = drop.apply(g, x);
                // snapshot i summarizes events strictly before dec_t[i]
                let mask = temporal_causal_mask(&s.dec_t, &s.dec_t, false);
                let site = AttentionSite {
                    heads: c.n_heads,
                    t_q: &s.dec_t,
                    t_k: &s.dec_t,
                    alibi: None,
                    mask: &mask,
                };
                for (attn, ffn) in &enc.layers {
                    x = attn.apply(g, x, None, &site, drop)?;
                    x = ffn.apply(g, x, drop)?;
                }
                Some((enc.norm.apply(g, x)?, mask))
            }
            _ => None,
        };

        let mut x = self.embed_with_positions(g, self.intents, &s.decoder_inputs(), c)?;
        x = drop.apply(g, x);
        let self_mask = positional_mask(m);
        let self_site = AttentionSite {
            heads: c.n_heads,
            t_q: &s.dec_t,
            t_k: &s.dec_t,
            alibi: None,
            mask: &self_mask,
        };
        for layer in &self.decoder {
            x = layer.self_attn.apply(g, x, None, &self_site, drop)?;
            if let (Some(cross), Some((mem, mask))) = (&layer.cross_attn, &memory) {
                let site = AttentionSite {
                    heads: c.n_heads,
                    t_q: &s.dec_t,
                    t_k: &s.dec_t,
                    alibi: None,
                    mask,
                };
                x = cross.apply(g, x, Some(*mem), &site, drop)?;
            }
            x = layer.ffn.apply(g, x, drop)?;
        }
        x = self.norm.apply(g, x)?;
        if let (Some(fusion), Some(tab)) = (&self.tabular, tab) {
            x = fusion.apply(g, x, tab)?;
        }
        self.head.apply(g, x)
    }
}
