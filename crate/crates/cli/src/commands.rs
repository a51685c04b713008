use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use timesync_core::eval::{ablation_report, ablation_row, ablation_variants, FULL_MODEL_ROW, evaluate, ladder_report, run_variants, EvalReport, SeedRun};
use timesync_core::io::{content_hash, read_jsonl, write_json, write_jsonl, Manifest};
use timesync_core::journey::io::{read_events, read_intents, write_dataset, EVENTS_FILE, INTENTS_FILE, RULES_FILE};
use timesync_core::journey::generate_journeys;
use timesync_core::model::{checkpoint, Model, ModelConfig, ModelKind};
use timesync_core::pipeline::io::{read_preprocessed, write_preprocessed, STAGE as PREPROCESS_STAGE};
use timesync_core::pipeline::{preprocess, supervised_counts, Preprocessed};
use timesync_core::train::MetricsRow;

use crate::config::ExperimentConfig;

pub const GENERATE_STAGE: &str = "generate";
pub const EVALUATE_STAGE: &str = "evaluate";
pub const ABLATE_STAGE: &str = "ablate";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LADDER_JSON: &str = "ladder.json";
pub const LADDER_TXT: &str = "ladder.txt";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TXT: &str = "ablation.txt";

/// Artifact layout under the output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn preprocessed(&self) -> PathBuf {
        self.root.join("preprocessed")
    }
    pub fn train_run(&self, kind: ModelKind, seed: u64) -> PathBuf {
        self.root.join("train").join(kind.slug()).join(format!("seed{seed}"))
    }
    pub fn ladder(&self) -> PathBuf {
        self.root.join("ladder")
    }
    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }
    pub fn ablation_run(&self, flag: &str, seed: u64) -> PathBuf {
        self.ablation().join("runs").join(flag).join(format!("seed{seed}"))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

/// Loads an upstream manifest, checks its files and that it was produced
/// under the same configuration.
fn upstream(dir: &Path, stage: &str, config_hash: &str) -> Result<Manifest> {
    let m = Manifest::load_verified(dir, stage).with_context(|| format!("{stage} artifacts in {} are unusable", dir.display()))?;
    m.require_config(config_hash)
        .with_context(|| format!("refusing {stage} artifacts in {} produced under a different config", dir.display()))?;
    Ok(m)
}

pub fn generate(config: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let dir = layout.data();
    create_dir(&dir)?;
    let journeys = generate_journeys(&config.generator, config.seed)?;
    write_dataset(&dir, &journeys.events, &journeys.intents, &journeys.rules)?;
    let mut manifest = Manifest::new(GENERATE_STAGE, &config.hash());
    manifest.meta = serde_json::json!({
        "users": config.generator.n_users,
        "events": journeys.events.len(),
        "intents": journeys.intents.len(),
    });
    manifest.seal(&dir, &[EVENTS_FILE, INTENTS_FILE, RULES_FILE])?;
    println!(
        "generated {} events and {} intents for {} users in {}",
        journeys.events.len(),
        journeys.intents.len(),
        config.generator.n_users,
        dir.display()
    );
    Ok(())
}

pub fn preprocess_stage(config: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let hash = config.hash();
    let input = upstream(&layout.data(), GENERATE_STAGE, &hash)?;
    let events = read_events(&layout.data())?;
    let intents = read_intents(&layout.data())?;
    let data = preprocess(&events, &intents, config.generator.start_timestamp, &config.pipeline)?;
    let mut manifest = Manifest::new(PREPROCESS_STAGE, &hash);
    manifest.inputs.insert(GENERATE_STAGE.into(), input.hash()?);
    write_preprocessed(&layout.preprocessed(), &data, manifest)?;
    let counts = supervised_counts(&data);
    println!(
        "preprocessed {} / {} / {} users ({} / {} / {} supervised positions), {} field values, {} intent classes",
        data.train.len(),
        data.validation.len(),
        data.test.len(),
        counts["train"],
        counts["validation"],
        counts["test"],
        data.state.vocabs.field_values.len(),
        data.state.vocabs.n_intent_classes()
    );
    Ok(())
}

fn load_preprocessed(config: &ExperimentConfig, layout: &Layout) -> Result<(Preprocessed, Manifest)> {
    let dir = layout.preprocessed();
    upstream(&dir, PREPROCESS_STAGE, &config.hash())?;
    Ok(read_preprocessed(&dir)?)
}

/// Writes one run's metrics log and checkpoint.
fn save_run(dir: &Path, model: &Model, run: &SeedRun, vocab_hash: &str, config_hash: &str, input: &str) -> timesync_core::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| timesync_core::Error::Io {
        path: dir.into(),
        source: e,
    })?;
    write_jsonl(&dir.join(METRICS_FILE), &run.log)?;
    let mut manifest = Manifest::new(checkpoint::STAGE, config_hash);
    manifest.inputs.insert(PREPROCESS_STAGE.into(), input.into());
    checkpoint::save(dir, model, run.best_step, vocab_hash, manifest, &[METRICS_FILE])?;
    Ok(())
}

/// Trains `variants` at every seed, writing each run to `dir_of(variant, seed)`.
fn train_into(
    config: &ExperimentConfig,
    data: &Preprocessed,
    input: &Manifest,
    labels: &[String],
    variants: &[(ModelKind, ModelConfig)],
    ks: &[usize],
    dir_of: &(dyn Fn(usize, u64) -> PathBuf + Sync),
) -> Result<Vec<Vec<SeedRun>>> {
    let vocab_hash = content_hash(&data.state.vocabs)?;
    let config_hash = config.hash();
    let input_hash = input.hash()?;
    let sink = |v: usize, model: &Model, run: &SeedRun| {
        save_run(&dir_of(v, run.seed), model, run, &vocab_hash, &config_hash, &input_hash)?;
        eprintln!(
            "  {} seed {}: {} steps, best at {}, test Recall@{} {:.4}",
            labels[v],
            run.seed,
            run.steps_run,
            run.best_step,
            run.test.ks[0],
            run.test.values[0]
        );
        Ok(())
    };
    Ok(run_variants(variants, &config.train, data, &config.seeds(), ks, Some(&sink))?)
}

pub fn train(config: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let (data, input) = load_preprocessed(config, layout)?;
    let variants: Vec<_> = ModelKind::LADDER.iter().map(|&k| (k, config.model.clone())).collect();
    let labels: Vec<String> = ModelKind::LADDER.iter().map(|k| k.label().to_string()).collect();
    train_into(config, &data, &input, &labels, &variants, &config.eval.ks, &|v, seed| layout.train_run(ModelKind::LADDER[v], seed))?;
    println!(
        "trained {} variants x {} seeds into {}",
        variants.len(),
        config.eval.n_seeds,
        layout.root.join("train").display()
    );
    Ok(())
}

/// Re-scores a saved run on the test split.
fn rescore(dir: &Path, seed: u64, data: &Preprocessed, config_hash: &str, ks: &[usize]) -> Result<SeedRun> {
    let (model, meta, manifest) = checkpoint::load(dir).with_context(|| format!("checkpoint {} is unusable", dir.display()))?;
    manifest
        .require_config(config_hash)
        .with_context(|| format!("refusing checkpoint {} produced under a different config", dir.display()))?;
    if meta.vocab_hash != content_hash(&data.state.vocabs)? {
        bail!("checkpoint {} was trained on different vocabularies", dir.display());
    }
    let log: Vec<MetricsRow> = read_jsonl(&dir.join(METRICS_FILE))?;
    Ok(SeedRun {
        seed,
        test: evaluate(&model, &data.test, ks)?,
        best_step: meta.step,
        steps_run: log.last().map_or(0, |r| r.step),
        log,
    })
}

fn write_report(dir: &Path, stage: &str, config: &ExperimentConfig, input: &Manifest, report: &EvalReport, files: (&str, &str)) -> Result<()> {
    create_dir(dir)?;
    write_json(&dir.join(files.0), report)?;
    let table = report.to_table();
    std::fs::write(dir.join(files.1), &table).with_context(|| format!("cannot write {}", dir.display()))?;
    let mut manifest = Manifest::new(stage, &config.hash());
    manifest.inputs.insert(PREPROCESS_STAGE.into(), input.hash()?);
    manifest.meta = serde_json::json!({ "ks": report.ks, "seeds": report.seeds });
    manifest.seal(dir, &[files.0, files.1])?;
    print!("{table}");
    Ok(())
}

pub fn evaluate_stage(config: &ExperimentConfig, layout: &Layout, ks: &[usize]) -> Result<()> {
    let (data, input) = load_preprocessed(config, layout)?;
    let hash = config.hash();
    let mut runs = Vec::new();
    for kind in ModelKind::LADDER {
        let per_seed = config
            .seeds()
            .into_iter()
            .map(|seed| rescore(&layout.train_run(kind, seed), seed, &data, &hash, ks))
            .collect::<Result<Vec<_>>>()?;
        runs.push((kind, per_seed));
    }
    let report = ladder_report(&runs)?;
    write_report(&layout.ladder(), EVALUATE_STAGE, config, &input, &report, (LADDER_JSON, LADDER_TXT))
}

/// Scores the trained full model if the train stage produced it, otherwise
/// trains it here.
pub fn ablate(config: &ExperimentConfig, layout: &Layout, ks: &[usize]) -> Result<()> {
    let (data, input) = load_preprocessed(config, layout)?;
    let hash = config.hash();
    let seeds = config.seeds();
    let full = if layout.train_run(ModelKind::Timesync, seeds[0]).exists() {
        seeds
            .iter()
            .map(|&seed| rescore(&layout.train_run(ModelKind::Timesync, seed), seed, &data, &hash, ks))
            .collect::<Result<Vec<_>>>()?
    } else {
        let full = [(ModelKind::Timesync, config.model.clone())];
        train_into(config, &data, &input, &[FULL_MODEL_ROW.to_string()], &full, ks, &|_, seed| layout.train_run(ModelKind::Timesync, seed))?.remove(0)
    };
    let named = ablation_variants(&config.model)?;
    let variants: Vec<_> = named.iter().map(|(_, c)| (ModelKind::Timesync, c.clone())).collect();
    let labels: Vec<String> = named.iter().map(|(f, _)| ablation_row(f)).collect();
    let ablated = train_into(config, &data, &input, &labels, &variants, ks, &|v, seed| layout.ablation_run(named[v].0, seed))?;
    let report = ablation_report(full, ablated)?;
    write_report(&layout.ablation(), ABLATE_STAGE, config, &input, &report, (ABLATION_JSON, ABLATION_TXT))
}
