use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::recall::{evaluate, Recalls};
use crate::error::{Error, Result};
use crate::model::{AblationFlags, Model, ModelConfig, ModelDims, ModelKind};
use crate::pipeline::{Preprocessed, TokenizedSample};
use crate::rng::stream;
use crate::train::{run_training, MetricsRow, TrainConfig};

/// One trained variant at one seed, scored on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub test: Recalls,
    pub best_step: usize,
    pub steps_run: usize,
    pub log: Vec<MetricsRow>,
}

/// Trains `kind` from the seed-`seed` initialization with the training
/// stream also keyed by `seed`, then scores the test split.
pub fn train_and_evaluate(
    kind: ModelKind,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    data: &Preprocessed,
    seed: u64,
    ks: &[usize],
) -> Result<(Model, SeedRun)> {
    let mut model = Model::new(kind, model_config, ModelDims::from_state(&data.state), seed)?;
    let config = TrainConfig {
        seed,
        ..train_config.clone()
    };
    let outcome = run_training(&mut model, &data.train, &data.validation, &config)?;
    let test = evaluate(&model, &data.test, ks)?;
    let run = SeedRun {
        seed,
        test,
        best_step: outcome.best_step,
        steps_run: outcome.steps_run,
        log: outcome.log,
    };
    Ok((model, run))
}

/// Sample mean and standard deviation (n − 1 denominator, 0 for one value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and standard error of per-seed differences `a[i] − b[i]`.
pub fn paired_difference(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_sd(&d);
    (mean, sd / (d.len() as f64).sqrt())
}

/// Relative change of `value` over `base` in percent.
pub fn relative_lift(value: f64, base: f64) -> f64 {
    if base == 0.0 {
        return f64::NAN;
    }
    100.0 * (value - base) / base
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    /// Test recall per k, one entry per seed.
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Percent lift of the seed-mean over the reference row, per k.
    pub lift_vs_reference: Vec<f64>,
    /// Percent lift of the seed-mean over the row above, per k.
    pub lift_vs_previous: Option<Vec<f64>>,
    /// Paired per-seed difference from the reference row, per k.
    pub delta_vs_reference: Vec<f64>,
    pub delta_se: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub title: String,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub reference: String,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    /// Builds rows from per-seed runs; runs are paired by position in each
    /// row's list and every row must cover the same seeds.
    pub fn from_runs(title: &str, reference: usize, rows: &[(String, Vec<SeedRun>)], chain_lifts: bool) -> Result<EvalReport> {
        let Some((_, first)) = rows.first() else {
            return Err(Error::Contract("report needs at least one row".into()));
        };
        let seeds: Vec<u64> = first.iter().map(|r| r.seed).collect();
        if seeds.is_empty() {
            return Err(Error::Contract("report needs at least one seed".into()));
        }
        let ks = first[0].test.ks.clone();
        for (name, runs) in rows {
            if runs.iter().map(|r| r.seed).ne(seeds.iter().copied()) || runs.iter().any(|r| r.test.ks != ks) {
                return Err(Error::Contract(format!("row {name} is not paired with the others")));
            }
        }
        let per_k = |runs: &[SeedRun], i: usize| -> Vec<f64> { runs.iter().map(|r| r.test.values[i]).collect() };
        let (_, ref_runs) = &rows[reference];
        let mut out = Vec::with_capacity(rows.len());
        for (row, (name, runs)) in rows.iter().enumerate() {
            let mut mean = Vec::new();
            let mut sd = Vec::new();
            let mut lift = Vec::new();
            let mut delta = Vec::new();
            let mut se = Vec::new();
            for i in 0..ks.len() {
                let (m, s) = mean_sd(&per_k(runs, i));
                mean.push(m);
                sd.push(s);
                let (d, e) = paired_difference(&per_k(runs, i), &per_k(ref_runs, i));
                delta.push(d);
                se.push(e);
                lift.push(relative_lift(m, mean_sd(&per_k(ref_runs, i)).0));
            }
            let lift_vs_previous = if chain_lifts && row > 0 {
                let prev: &ReportRow = &out[row - 1];
                Some(mean.iter().zip(&prev.mean).map(|(&m, &p)| relative_lift(m, p)).collect())
            } else {
                None
            };
            out.push(ReportRow {
                name: name.clone(),
                per_seed: runs.iter().map(|r| r.test.values.clone()).collect(),
                mean,
                sd,
                lift_vs_reference: lift,
                lift_vs_previous,
                delta_vs_reference: delta,
                delta_se: se,
            });
        }
        Ok(EvalReport {
            title: title.to_string(),
            ks,
            seeds,
            reference: rows[reference].0.clone(),
            rows: out,
        })
    }

    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Seed-mean recall at `k` for row `name`.
    pub fn mean_at(&self, name: &str, k: usize) -> Option<f64> {
        let i = self.ks.iter().position(|&x| x == k)?;
        Some(self.row(name)?.mean[i])
    }

    /// Aligned plain-text table: mean ± sd per k, then percent lifts.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{} ({} seeds, reference {})", self.title, self.seeds.len(), self.reference);
        let _ = write!(s, "{:width$}", "Model");
        for k in &self.ks {
            let _ = write!(s, " | {:>15}", format!("Recall@{k}"));
        }
        for k in &self.ks {
            let _ = write!(s, " | {:>22}", format!("lift@{k} % (prev)"));
        }
        for k in &self.ks {
            let _ = write!(s, " | {:>16}", format!("delta@{k} ± se"));
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:width$}", r.name);
            for i in 0..self.ks.len() {
                let _ = write!(s, " | {:>15}", format!("{:.4} ± {:.4}", r.mean[i], r.sd[i]));
            }
            for i in 0..self.ks.len() {
                let prev = match &r.lift_vs_previous {
                    Some(p) => format!(" ({:+.2})", p[i]),
                    None => String::new(),
                };
                let _ = write!(s, " | {:>22}", format!("{:+.2}{prev}", r.lift_vs_reference[i]));
            }
            for i in 0..self.ks.len() {
                let _ = write!(s, " | {:>16}", format!("{:+.4} ± {:.4}", r.delta_vs_reference[i], r.delta_se[i]));
            }
            s.push('\n');
        }
        s
    }
}

/// Called once per finished run with the variant index and the trained model.
pub type RunSink<'a> = dyn Fn(usize, &Model, &SeedRun) -> Result<()> + Sync + 'a;

/// Trains every `(kind, config)` variant at every seed. Runs are
/// independent and execute on the rayon pool; results keep input order.
pub fn run_variants(
    variants: &[(ModelKind, ModelConfig)],
    train_config: &TrainConfig,
    data: &Preprocessed,
    seeds: &[u64],
    ks: &[usize],
    sink: Option<&RunSink<'_>>,
) -> Result<Vec<Vec<SeedRun>>> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let runs: Vec<SeedRun> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let (kind, config) = &variants[v];
            let (model, run) = train_and_evaluate(*kind, config, train_config, data, seed, ks)?;
            if let Some(sink) = sink {
                sink(v, &model, &run)?;
            }
            Ok(run)
        })
        .collect::<Result<_>>()?;
    Ok(runs.chunks(seeds.len()).map(<[SeedRun]>::to_vec).collect())
}

/// All four ladder variants trained at every seed; SASRec is the reference.
pub fn run_ladder(
    data: &Preprocessed,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seeds: &[u64],
    ks: &[usize],
) -> Result<(EvalReport, Vec<(ModelKind, Vec<SeedRun>)>)> {
    let variants: Vec<_> = ModelKind::LADDER.iter().map(|&k| (k, model_config.clone())).collect();
    let runs: Vec<_> = ModelKind::LADDER
        .into_iter()
        .zip(run_variants(&variants, train_config, data, seeds, ks, None)?)
        .collect();
    Ok((ladder_report(&runs)?, runs))
}

/// Ladder report from finished runs, in ladder order.
pub fn ladder_report(runs: &[(ModelKind, Vec<SeedRun>)]) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for kind in ModelKind::LADDER {
        let Some((_, r)) = runs.iter().find(|(k, _)| *k == kind) else {
            return Err(Error::Contract(format!("ladder is missing the {kind} row")));
        };
        rows.push((kind.label().to_string(), r.clone()));
    }
    EvalReport::from_runs("Recall and relative lift over SASRec", 0, &rows, true)
}

pub const FULL_MODEL_ROW: &str = "full model";

/// Row label for the variant with `flag` switched off.
pub fn ablation_row(flag: &str) -> String {
    format!("w/o {flag}")
}

/// The eight single-flag-off TIMeSynC configurations in table order.
pub fn ablation_variants(model_config: &ModelConfig) -> Result<Vec<(&'static str, ModelConfig)>> {
    if model_config.flags != AblationFlags::all(true) {
        return Err(Error::Config("ablation starts from the model with every feature on".into()));
    }
    AblationFlags::NAMES
        .iter()
        .map(|&flag| {
            let config = ModelConfig {
                flags: model_config.flags.without(flag)?,
                ..model_config.clone()
            };
            Ok((flag, config))
        })
        .collect()
}

/// Ablation report with the full model as reference row; `ablated` follows
/// [`AblationFlags::NAMES`] order.
pub fn ablation_report(full: Vec<SeedRun>, ablated: Vec<Vec<SeedRun>>) -> Result<EvalReport> {
    if ablated.len() != AblationFlags::NAMES.len() {
        return Err(Error::Contract(format!("expected {} ablation rows, got {}", AblationFlags::NAMES.len(), ablated.len())));
    }
    let mut rows = vec![(FULL_MODEL_ROW.to_string(), full)];
    rows.extend(AblationFlags::NAMES.iter().map(|f| ablation_row(f)).zip(ablated));
    EvalReport::from_runs("Recall with one feature removed, delta vs full model", 0, &rows, false)
}

/// The full TIMeSynC model against each single-flag-off variant at every
/// seed. `full` reuses existing full-model runs, for example the ladder's.
pub fn run_ablation(
    data: &Preprocessed,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seeds: &[u64],
    ks: &[usize],
    full: Option<Vec<SeedRun>>,
) -> Result<EvalReport> {
    let mut variants: Vec<(ModelKind, ModelConfig)> = Vec::new();
    if full.is_none() {
        variants.push((ModelKind::Timesync, model_config.clone()));
    }
    variants.extend(ablation_variants(model_config)?.into_iter().map(|(_, c)| (ModelKind::Timesync, c)));
    let mut runs = run_variants(&variants, train_config, data, seeds, ks, None)?;
    let full = match full {
        Some(f) => f,
        None => runs.remove(0),
    };
    ablation_report(full, runs)
}

/// Copy of `samples` whose encoder token contents are permuted across the
/// non-BOS positions while the timestamp slots stay put, severing every
/// link between what happened and when.
pub fn shuffle_context_times(samples: &[TokenizedSample], seed: u64) -> Vec<TokenizedSample> {
    let mut rng = stream(seed, &[0x5_4FF1]);
    samples
        .iter()
        .map(|s| {
            let mut out = s.clone();
            let mut perm: Vec<usize> = (1..s.enc_t.len()).collect();
            perm.shuffle(&mut rng);
            for (slot, &src) in perm.iter().enumerate() {
                out.enc_fn[slot + 1] = s.enc_fn[src];
                out.enc_fv[slot + 1] = s.enc_fv[src];
                out.enc_p[slot + 1] = s.enc_p[src];
            }
            out
        })
        .collect()
}

/// `data` with every split's context shuffled by [`shuffle_context_times`].
pub fn shuffled_dataset(data: &Preprocessed, seed: u64) -> Preprocessed {
    Preprocessed {
        state: data.state.clone(),
        train: shuffle_context_times(&data.train, seed),
        validation: shuffle_context_times(&data.validation, seed ^ 1),
        test: shuffle_context_times(&data.test, seed ^ 2),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{DeltaTransform, TimeAliBiConfig};
    use crate::journey::{generate_journeys, GeneratorConfig};
    use crate::pipeline::{preprocess, PipelineConfig};

    fn run(seed: u64, values: &[f64]) -> SeedRun {
        SeedRun {
            seed,
            test: Recalls {
                ks: vec![1, 5],
                values: values.to_vec(),
                positions: 10,
            },
            best_step: 0,
            steps_run: 0,
            log: Vec::new(),
        }
    }

    fn rows(values: &[&[[f64; 2]]]) -> Vec<(String, Vec<SeedRun>)> {
        values
            .iter()
            .enumerate()
            .map(|(r, seeds)| (format!("row{r}"), seeds.iter().enumerate().map(|(s, v)| run(s as u64, v)).collect()))
            .collect()
    }

    #[test]
    fn statistics_match_hand_values() {
        let (m, sd) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[7.0]), (7.0, 0.0));
        let (d, se) = paired_difference(&[3.0, 5.0], &[1.0, 2.0]);
        assert_eq!(d, 2.5);
        assert!((se - 0.5).abs() < 1e-15);
        assert_eq!(relative_lift(1.1, 1.0).round(), 10.0);
        assert!(relative_lift(1.0, 0.0).is_nan());
    }

    #[test]
    fn reference_row_has_zero_lift_and_delta() {
        let r = EvalReport::from_runs("t", 0, &rows(&[&[[0.2, 0.5], [0.4, 0.7]], &[[0.3, 0.5], [0.5, 0.9]]]), true).unwrap();
        assert_eq!(r.rows[0].lift_vs_reference, vec![0.0, 0.0]);
        assert_eq!(r.rows[0].delta_vs_reference, vec![0.0, 0.0]);
        assert!(r.rows[0].lift_vs_previous.is_none());
        assert!((r.rows[1].delta_vs_reference[0] - 0.1).abs() < 1e-12);
        assert!((r.rows[1].lift_vs_reference[0] - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(r.mean_at("row1", 5), Some(0.7));
        assert!(r.to_table().contains("Recall@5"));
    }

    #[test]
    fn mismatched_seeds_and_missing_rows_are_rejected() {
        let mut bad = rows(&[&[[0.2, 0.5], [0.4, 0.7]], &[[0.3, 0.5], [0.5, 0.9]]]);
        bad[1].1[1].seed = 9;
        assert!(EvalReport::from_runs("t", 0, &bad, true).is_err());
        let partial = vec![(ModelKind::Sasrec, vec![run(0, &[0.1, 0.2])])];
        assert!(ladder_report(&partial).unwrap_err().to_string().contains("missing"));
        assert!(ablation_report(vec![run(0, &[0.1, 0.2])], Vec::new()).is_err());
    }

    #[test]
    fn ablation_needs_every_flag_on() {
        let variants = ablation_variants(&ModelConfig::default()).unwrap();
        assert_eq!(variants.len(), AblationFlags::NAMES.len());
        for (flag, c) in &variants {
            assert_eq!(c.flags.get(flag), Some(false));
        }
        let mut partial = ModelConfig::default();
        partial.flags.encoder_product_emb = false;
        assert!(ablation_variants(&partial).is_err());
    }

    fn small_data() -> Preprocessed {
        let g = GeneratorConfig {
            n_users: 16,
            ..GeneratorConfig::default()
        };
        let j = generate_journeys(&g, 4).unwrap();
        let p = PipelineConfig {
            max_context_len: 32,
            ..PipelineConfig::default()
        };
        preprocess(&j.events, &j.intents, g.start_timestamp, &p).unwrap()
    }

    #[test]
    fn shuffle_keeps_times_and_token_multiset() {
        let data = small_data();
        let shuffled = shuffle_context_times(&data.train, 3);
        let mut moved = false;
        for (a, b) in data.train.iter().zip(&shuffled) {
            assert_eq!(a.enc_t, b.enc_t);
            assert_eq!((a.enc_fv[0], a.enc_p[0]), (b.enc_fv[0], b.enc_p[0]));
            let tokens = |s: &TokenizedSample| {
                let mut v: Vec<_> = (1..s.enc_t.len()).map(|i| (s.enc_fn[i], s.enc_fv[i], s.enc_p[i])).collect();
                v.sort();
                v
            };
            assert_eq!(tokens(a), tokens(b));
            moved |= a.enc_fv != b.enc_fv;
            assert_eq!(a.dec_y, b.dec_y);
        }
        assert!(moved);
        assert_eq!(shuffle_context_times(&data.train, 3), shuffled);
    }

    #[test]
    fn ablation_full_row_equals_ladder_row() {
        let data = small_data();
        let mc = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            ffn_dim: 16,
            dropout: 0.0,
            max_positions: 32,
            alibi: TimeAliBiConfig {
                delta_transform: DeltaTransform::Linear,
                time_unit_seconds: 3600.0,
                ..TimeAliBiConfig::new(2)
            },
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 4,
            max_steps: 4,
            eval_every: 2,
            ..TrainConfig::default()
        };
        let full = run_variants(&[(ModelKind::Timesync, mc.clone())], &tc, &data, &[0, 1], &[1, 5], None)
            .unwrap()
            .remove(0);
        let (_, direct) = train_and_evaluate(ModelKind::Timesync, &mc, &tc, &data, 1, &[1, 5]).unwrap();
        assert_eq!(full[1], direct);
        let report = run_ablation(&data, &mc, &tc, &[0, 1], &[1, 5], None).unwrap();
        assert_eq!(report.rows[0].name, FULL_MODEL_ROW);
        assert_eq!(report.rows[0].per_seed, full.iter().map(|r| r.test.values.clone()).collect::<Vec<_>>());
        assert_eq!(report.rows.len(), 1 + AblationFlags::NAMES.len());
    }
}
