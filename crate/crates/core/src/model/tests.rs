use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::{multi_head, temporal_causal_mask, AttentionWeights};
use crate::io::Manifest;
use crate::numerics::{grad_check, GradCheckConfig, ParamId};
use crate::pipeline::{BOS, RESERVED};

const DIMS: ModelDims = ModelDims {
    n_field_names: 9,
    n_field_values: 17,
    n_intents: 8,
    n_classes: 5,
    tabular_dim: 6,
};

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        ffn_dim: 12,
        dropout: 0.0,
        max_positions: 16,
        alibi: crate::attention::TimeAliBiConfig {
            delta_transform: crate::attention::DeltaTransform::Linear,
            time_unit_seconds: 86_400.0,
            ..crate::attention::TimeAliBiConfig::new(2)
        },
        ..ModelConfig::default()
    }
}

const HOUR: i64 = 3600;
const T0: i64 = 1_704_067_200;

fn sample(n: usize, m: usize, seed: u64) -> TokenizedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc_t: Vec<i64> = (0..n - 1).map(|_| T0 + rng.gen_range(0..200) * HOUR).collect();
    enc_t.sort();
    enc_t.insert(0, BOS_TIME);
    let mut dec_t: Vec<i64> = (0..m).map(|_| T0 + rng.gen_range(0..200) * HOUR).collect();
    dec_t.sort();
    let tok = |rng: &mut ChaCha8Rng, size: usize| rng.gen_range(RESERVED..size);
    let mut enc_fn: Vec<usize> = (0..n).map(|_| tok(&mut rng, DIMS.n_field_names)).collect();
    let mut enc_fv: Vec<usize> = (0..n).map(|_| tok(&mut rng, DIMS.n_field_values)).collect();
    let mut enc_p: Vec<usize> = (0..n).map(|_| rng.gen_range(1..4)).collect();
    enc_fn[0] = BOS;
    enc_fv[0] = BOS;
    enc_p[0] = 0;
    TokenizedSample {
        user_id: seed as u32,
        enc_t,
        enc_fn,
        enc_fv,
        enc_p,
        dec_y: (0..m).map(|_| tok(&mut rng, DIMS.n_intents)).collect(),
        dec_supervised: (0..m).map(|i| i % 3 != 1).collect(),
        dec_product_onehot: (0..m).map(|_| [rng.gen_range(0..2) as f64, 1.0, 0.0]).collect(),
        dec_tabular: (0..m)
            .map(|_| (0..DIMS.tabular_dim).map(|_| rng.gen_range(0.0..50.0)).collect())
            .collect(),
        dec_t,
    }
}

fn model(kind: ModelKind, config: &ModelConfig, seed: u64) -> Model {
    Model::new(kind, config, DIMS, seed).unwrap()
}

#[test]
fn shape_contract_sweep() {
    let c = small_config();
    for kind in ModelKind::LADDER {
        let mdl = model(kind, &c, 1);
        for n in [1, 2, 7, 64] {
            for m in [1, 2, 7, 64] {
                let s = sample(n, m, (n * 100 + m) as u64);
                s.validate().unwrap();
                let logits = mdl.predict_logits(&s).unwrap();
                assert_eq!(logits.shape(), &[m, DIMS.n_classes], "{kind} n={n} m={m}");
                assert!(logits.is_finite());
                if kind == ModelKind::Timesync {
                    assert_eq!(mdl.encode_context(&s).unwrap().shape(), &[n, c.d_model]);
                    assert_eq!(mdl.decode_intents(&s).unwrap().shape(), &[m, c.d_model]);
                }
            }
        }
    }
}

#[test]
fn bos_only_context_is_valid() {
    let mdl = model(ModelKind::Timesync, &small_config(), 2);
    let s = sample(1, 1, 3);
    assert!(mdl.predict_logits(&s).unwrap().is_finite());
}

#[test]
fn out_of_vocab_token_is_index_error() {
    let mdl = model(ModelKind::Timesync, &small_config(), 2);
    let mut s = sample(4, 2, 3);
    s.enc_fv[2] = DIMS.n_field_values;
    assert!(matches!(mdl.predict_logits(&s), Err(Error::Index { .. })));
}

fn param(m: &Model, name: &str) -> ParamId {
    m.params.id(name).unwrap_or_else(|| panic!("no parameter {name}"))
}

#[test]
fn time_encoding_is_sum_of_calendar_rows() {
    let mdl = model(ModelKind::Timesync, &small_config(), 4);
    let row = |name: &str, i: usize| mdl.params.get(param(&mdl, name)).row(i).to_vec();
    for t in [0, T0, T0 + 7 * 86_400 + 5 * HOUR, 1_000_000_007] {
        let (dow, wom, hod) = (day_of_week(t), week_of_month(t), hour_of_day(t));
        let want: Vec<f64> = (0..8)
            .map(|j| row("time.day_of_week", dow)[j] + row("time.week_of_month", wom)[j] + row("time.hour_of_day", hod)[j])
            .collect();
        assert_eq!(mdl.time_encode(t).unwrap().data(), want.as_slice());
    }
    // epoch second 0 is a Thursday at midnight in the first week
    assert_eq!((day_of_week(0), week_of_month(0), hour_of_day(0)), (3, 0, 0));
    let week = 7 * 86_400;
    assert_eq!(day_of_week(T0 + 13 * HOUR), day_of_week(T0 + 13 * HOUR + week));
    assert_eq!(hour_of_day(T0 + 13 * HOUR), hour_of_day(T0 + 13 * HOUR + week));
    assert!(mdl.time_encode(BOS_TIME).unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn encoder_rows_ignore_later_context() {
    let mdl = model(ModelKind::Timesync, &small_config(), 5);
    for seed in 0..20 {
        let s = sample(8, 3, 100 + seed);
        let base = mdl.encode_context(&s).unwrap();
        for j in 1..8 {
            let mut p = s.clone();
            p.enc_fv[j] = RESERVED + (p.enc_fv[j] + 1 - RESERVED) % (DIMS.n_field_values - RESERVED);
            p.enc_fn[j] = RESERVED + (p.enc_fn[j] + 1 - RESERVED) % (DIMS.n_field_names - RESERVED);
            p.enc_p[j] = 1 + p.enc_p[j] % 3;
            let out = mdl.encode_context(&p).unwrap();
            for i in 0..8 {
                if s.enc_t[j] > s.enc_t[i] {
                    assert_eq!(out.row(i), base.row(i), "seed {seed} query {i} key {j}");
                }
            }
        }
    }
}

/// Every input that must stay invisible to decoder position `i`.
fn perturbations(s: &TokenizedSample, i: usize) -> Vec<TokenizedSample> {
    let mut out = Vec::new();
    for j in 1..s.enc_t.len() {
        if s.enc_t[j] >= s.dec_t[i] {
            let mut p = s.clone();
            p.enc_fv[j] = RESERVED + (p.enc_fv[j] + 3 - RESERVED) % (DIMS.n_field_values - RESERVED);
            p.enc_p[j] = 1 + p.enc_p[j] % 3;
            out.push(p);
        }
    }
    // decoder inputs after position i are the intents at i and later
    for k in i..s.dec_y.len() {
        let mut p = s.clone();
        p.dec_y[k] = RESERVED + (p.dec_y[k] + 1 - RESERVED) % (DIMS.n_intents - RESERVED);
        out.push(p);
    }
    out
}

#[test]
fn decoder_positions_see_no_future() {
    let c = small_config();
    for kind in ModelKind::LADDER {
        let mdl = model(kind, &c, 6);
        for seed in 0..10 {
            let s = sample(8, 5, 200 + seed);
            let base = mdl.predict_logits(&s).unwrap();
            for i in 0..5 {
                for p in perturbations(&s, i) {
                    let out = mdl.predict_logits(&p).unwrap();
                    assert_eq!(out.row(i), base.row(i), "{kind} seed {seed} position {i}");
                }
            }
        }
    }
}

#[test]
fn sasrec_ignores_context() {
    let mdl = model(ModelKind::Sasrec, &small_config(), 7);
    let s = sample(6, 4, 8);
    let mut p = s.clone();
    p.enc_fv.iter_mut().skip(1).for_each(|v| *v = RESERVED);
    p.dec_tabular.iter_mut().flatten().for_each(|x| *x += 10.0);
    p.dec_product_onehot.iter_mut().for_each(|o| *o = [0.0; 3]);
    assert_eq!(mdl.predict_logits(&s).unwrap(), mdl.predict_logits(&p).unwrap());
}

#[test]
fn ownership_changes_logits_only_with_fusion() {
    let mut c = small_config();
    let s = sample(5, 3, 9);
    let mut p = s.clone();
    p.dec_product_onehot = vec![[0.0, 0.0, 1.0]; 3];
    let on = model(ModelKind::Timesync, &c, 10);
    assert_ne!(on.predict_logits(&s).unwrap(), on.predict_logits(&p).unwrap());
    c.flags.decoder_product_fusion = false;
    let off = model(ModelKind::Timesync, &c, 10);
    assert_eq!(off.predict_logits(&s).unwrap(), off.predict_logits(&p).unwrap());
    // disabled fusion passes the decoder output straight to the head
    let dec = off.decode_intents(&s).unwrap();
    let (w, b) = (off.params.get(param(&off, "head.w")), off.params.get(param(&off, "head.b")));
    let mut want = crate::numerics::matmul(&dec, w).unwrap();
    let k = want.cols();
    want.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x += b.data()[i % k]);
    assert_eq!(off.predict_logits(&s).unwrap(), want);
}

#[test]
fn zero_ownership_depends_only_on_decoder() {
    let mdl = model(ModelKind::Timesync, &small_config(), 11);
    let mut s = sample(5, 3, 12);
    s.dec_product_onehot = vec![[0.0; 3]; 3];
    let logits = mdl.predict_logits(&s).unwrap();
    let mut p = s.clone();
    p.dec_tabular.iter_mut().flatten().for_each(|x| *x = -1.0);
    assert_eq!(logits, mdl.predict_logits(&p).unwrap());
}

#[test]
fn same_seed_same_parameters() {
    let c = small_config();
    for kind in ModelKind::LADDER {
        let (a, b) = (model(kind, &c, 3), model(kind, &c, 3));
        for id in a.params.ids() {
            assert_eq!(a.params.get(id).data(), b.params.get(id).data());
        }
    }
    // ablation flags never change the shared initialization
    let mut off = c.clone();
    off.flags = AblationFlags::all(false);
    let (a, b) = (model(ModelKind::Timesync, &c, 3), model(ModelKind::Timesync, &off, 3));
    assert_eq!(a.params.len(), b.params.len());
    for id in a.params.ids() {
        assert_eq!(a.params.get(id).data(), b.params.get(id).data());
    }
}

#[test]
fn untrained_model_is_near_uniform() {
    let mut c = ModelConfig::default();
    c.dropout = 0.0;
    let dims = ModelDims {
        n_classes: 20,
        n_intents: 23,
        ..DIMS
    };
    let mdl = Model::new(ModelKind::Timesync, &c, dims, 0).unwrap();
    let s = sample(40, 12, 13);
    let logits = mdl.predict_logits(&s).unwrap();
    let probs = crate::numerics::softmax_lastdim(&logits).unwrap();
    for i in 0..12 {
        let row = probs.row(i);
        let spread = row.iter().cloned().fold(f64::MIN, f64::max) - row.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 0.1, "row {i}: {spread}");
    }
}

/// Plain transformer forward written directly against the parameter names:
/// value embeddings, time-masked attention without bias, no fusion.
fn vanilla_reference(mdl: &Model, s: &TokenizedSample) -> Tensor {
    let c = &mdl.config;
    let p = |n: &str| param(mdl, n);
    let attn = |prefix: &str| AttentionWeights {
        wq: p(&format!("{prefix}.wq")),
        bq: p(&format!("{prefix}.bq")),
        wk: p(&format!("{prefix}.wk")),
        bk: p(&format!("{prefix}.bk")),
        wv: p(&format!("{prefix}.wv")),
        bv: p(&format!("{prefix}.bv")),
        wo: p(&format!("{prefix}.wo")),
        bo: p(&format!("{prefix}.bo")),
    };
    let mut g = Graph::new(&mdl.params);
    let ln = |g: &mut Graph<'_>, x: Var, name: &str| {
        let (a, b) = (g.param(p(&format!("{name}.gain"))), g.param(p(&format!("{name}.bias"))));
        g.layer_norm(x, a, b).unwrap()
    };
    let dense = |g: &mut Graph<'_>, x: Var, name: &str| {
        let (w, b) = (g.param(p(&format!("{name}.w"))), g.param(p(&format!("{name}.b"))));
        g.linear(x, w, b).unwrap()
    };
    let ffn = |g: &mut Graph<'_>, x: Var, name: &str| {
        let h = ln(g, x, &format!("{name}.norm"));
        let h = dense(g, h, &format!("{name}.up"));
        let h = g.gelu(h);
        let h = dense(g, h, &format!("{name}.down"));
        g.add(x, h).unwrap()
    };

    let table = g.param(p("emb.field_value"));
    let mut x = g.embed(table, &s.enc_fv).unwrap();
    let mask = temporal_causal_mask(&s.enc_t, &s.enc_t, false);
    for l in 0..c.n_encoder_layers {
        let h = ln(&mut g, x, &format!("enc{l}.self.norm"));
        let a = multi_head(&mut g, &attn(&format!("enc{l}.self")), h, h, c.n_heads, (&s.enc_t, &s.enc_t), None, &mask).unwrap();
        x = g.add(x, a).unwrap();
        x = ffn(&mut g, x, &format!("enc{l}.ffn"));
    }
    let memory = ln(&mut g, x, "enc.norm");

    let table = g.param(p("emb.intent"));
    let mut y = g.embed(table, &s.decoder_inputs()).unwrap();
    let self_mask = temporal_causal_mask(&s.dec_t, &s.dec_t, false).and_positional();
    let cross_mask = temporal_causal_mask(&s.dec_t, &s.enc_t, true);
    for l in 0..c.n_decoder_layers {
        let h = ln(&mut g, y, &format!("dec{l}.self.norm"));
        let a = multi_head(&mut g, &attn(&format!("dec{l}.self")), h, h, c.n_heads, (&s.dec_t, &s.dec_t), None, &self_mask).unwrap();
        y = g.add(y, a).unwrap();
        let h = ln(&mut g, y, &format!("dec{l}.cross.norm"));
        let a = multi_head(&mut g, &attn(&format!("dec{l}.cross")), h, memory, c.n_heads, (&s.dec_t, &s.enc_t), None, &cross_mask)
            .unwrap();
        y = g.add(y, a).unwrap();
        y = ffn(&mut g, y, &format!("dec{l}.ffn"));
    }
    let y = ln(&mut g, y, "dec.norm");
    let out = dense(&mut g, y, "head");
    g.tensor(out)
}

#[test]
fn all_flags_off_is_a_vanilla_transformer() {
    let mut c = small_config();
    c.n_encoder_layers = 2;
    c.n_decoder_layers = 2;
    c.flags = AblationFlags::all(false);
    let mdl = model(ModelKind::Timesync, &c, 14);
    for seed in 0..5 {
        let s = sample(9, 6, 300 + seed);
        assert_eq!(mdl.predict_logits(&s).unwrap(), vanilla_reference(&mdl, &s));
    }
}

pub(crate) fn full_model_grad_error(kind: ModelKind, samples: usize) -> f64 {
    let mut mdl = model(kind, &small_config(), 15);
    let batch = [sample(7, 4, 16), sample(5, 3, 17)];
    let denom: f64 = batch.iter().map(|s| s.n_supervised() as f64).sum();
    let kind_cfg = mdl.config.clone();
    let shadow = Model::new(kind, &kind_cfg, DIMS, 15).unwrap();
    grad_check(
        &mut mdl.params,
        |g| {
            let mut total: Option<Var> = None;
            for s in &batch {
                let l = shadow.loss(g, s, &mut Dropout::eval(), denom)?;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            Ok(total.expect("nonempty batch"))
        },
        GradCheckConfig {
            samples,
            ..GradCheckConfig::default()
        },
    )
    .unwrap()
}

#[test]
fn full_model_passes_grad_check() {
    for kind in ModelKind::LADDER {
        let err = full_model_grad_error(kind, 600);
        assert!(err < 1e-4, "{kind}: {err}");
    }
}

#[test]
fn checkpoint_round_trip_and_tamper() {
    let mdl = model(ModelKind::Timesync, &small_config(), 18);
    let dir = std::env::temp_dir().join(format!("timesync-ckpt-{}", std::process::id()));
    checkpoint::save(&dir, &mdl, 42, "vocab", Manifest::new(checkpoint::STAGE, "cfg"), &[]).unwrap();
    let index = std::fs::read_to_string(dir.join(checkpoint::PARAMS_INDEX)).unwrap();
    assert!(index.lines().next().unwrap().starts_with("emb.field_value\t17x8\t0\t136"));
    let (back, meta, _) = checkpoint::load(&dir).unwrap();
    assert_eq!(meta.step, 42);
    for id in mdl.params.ids() {
        assert_eq!(mdl.params.get(id).data(), back.params.get(id).data());
    }
    let s = sample(6, 3, 19);
    assert_eq!(mdl.predict_logits(&s).unwrap(), back.predict_logits(&s).unwrap());
    let mut bytes = std::fs::read(dir.join(checkpoint::PARAMS_BIN)).unwrap();
    bytes[3] ^= 1;
    std::fs::write(dir.join(checkpoint::PARAMS_BIN), bytes).unwrap();
    assert!(matches!(checkpoint::load(&dir), Err(Error::HashMismatch { .. })));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn config_validation() {
    let mut c = small_config();
    c.n_heads = 3;
    assert!(Model::new(ModelKind::Timesync, &c, DIMS, 0).is_err());
    let mut c = small_config();
    c.dropout = 1.0;
    assert!(c.validate().is_err());
    assert!(AblationFlags::default().without("nope").is_err());
    let f = AblationFlags::default().without("encoder_product_emb").unwrap();
    assert_eq!(f.get("encoder_product_emb"), Some(false));
    assert_eq!(AblationFlags::NAMES.iter().filter(|n| f.get(n) == Some(true)).count(), 7);
}
