//! Raw journeys to model inputs: quantile discretization, cross-domain
//! flattening, tokenization and per-user temporal splits.

mod binner;
mod flatten;
pub mod io;
mod split;
mod tabular;
mod vocab;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use binner::{fit_binner, QuantileBinner};
pub use flatten::{
    detokenize, discretize, field_name_token, flatten_context, product_id, sort_observations, EncoderSequence,
    Observation, BOS_TIME, N_PRODUCT_IDS,
};
pub use split::{temporal_split, RawSplits, SplitSample};
pub use tabular::{ownership_at, tabular_context_features, TabularSchema, WINDOW_DAYS};
pub use vocab::{Vocabularies, Vocabulary, BOS, BOS_TOKEN, PAD, PAD_TOKEN, RESERVED, UNK, UNK_TOKEN};

use crate::error::{Error, Result};
use crate::journey::{ContextEvent, IntentRecord, Timestamp, UserId, SECONDS_PER_DAY};
use crate::numerics::IGNORE_INDEX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_bins: usize,
    /// Most recent context observations kept per sample (BOS excluded).
    pub max_context_len: usize,
    /// Training window length from the dataset start.
    pub train_days: f64,
    pub validation_days: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_bins: 10,
            max_context_len: 256,
            train_days: 60.0,
            validation_days: 15.0,
        }
    }
}

impl PipelineConfig {
    /// `(t1, t2)` relative to the dataset start.
    pub fn split_times(&self, start: Timestamp) -> (Timestamp, Timestamp) {
        let at = |days: f64| start + (days * SECONDS_PER_DAY as f64).round() as Timestamp;
        (at(self.train_days), at(self.train_days + self.validation_days))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 || self.max_context_len == 0 {
            return Err(Error::Config("n_bins and max_context_len must be at least 1".into()));
        }
        if !(self.train_days > 0.0 && self.validation_days > 0.0) {
            return Err(Error::Config("train_days and validation_days must be positive".into()));
        }
        Ok(())
    }
}

/// One user's model input for one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedSample {
    pub user_id: UserId,
    pub enc_t: Vec<Timestamp>,
    pub enc_fn: Vec<usize>,
    pub enc_fv: Vec<usize>,
    pub enc_p: Vec<usize>,
    pub dec_t: Vec<Timestamp>,
    pub dec_y: Vec<usize>,
    pub dec_supervised: Vec<bool>,
    /// Multi-hot ownership at each intent time.
    pub dec_product_onehot: Vec<[f64; 3]>,
    /// Raw tabular snapshot at each intent time, laid out by [`TabularSchema`].
    pub dec_tabular: Vec<Vec<f64>>,
}

impl TokenizedSample {
    pub fn encoder(&self) -> EncoderSequence {
        EncoderSequence {
            t: self.enc_t.clone(),
            field_names: self.enc_fn.clone(),
            field_values: self.enc_fv.clone(),
            products: self.enc_p.clone(),
        }
    }

    /// Teacher-forced decoder input: BOS followed by every intent but the last.
    pub fn decoder_inputs(&self) -> Vec<usize> {
        std::iter::once(BOS).chain(self.dec_y.iter().copied()).take(self.dec_y.len()).collect()
    }

    /// Class index per position, [`IGNORE_INDEX`] where unsupervised or UNK.
    pub fn targets(&self) -> Vec<usize> {
        self.dec_y
            .iter()
            .zip(&self.dec_supervised)
            .map(|(&y, &s)| if s && y >= RESERVED { y - RESERVED } else { IGNORE_INDEX })
            .collect()
    }

    pub fn n_supervised(&self) -> usize {
        self.targets().iter().filter(|&&t| t != IGNORE_INDEX).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.enc_t.len();
        let m = self.dec_t.len();
        let bad = |what: &str| Err(Error::Contract(format!("sample for user {}: {what}", self.user_id)));
        if n == 0 || self.enc_t[0] != BOS_TIME || self.enc_fv[0] != BOS {
            return bad("encoder must start with BOS");
        }
        if [self.enc_fn.len(), self.enc_fv.len(), self.enc_p.len()].iter().any(|&l| l != n) {
            return bad("encoder sequences differ in length");
        }
        if [self.dec_y.len(), self.dec_supervised.len(), self.dec_product_onehot.len(), self.dec_tabular.len()]
            .iter()
            .any(|&l| l != m)
        {
            return bad("decoder sequences differ in length");
        }
        if !self.enc_t.windows(2).all(|w| w[0] <= w[1]) || !self.dec_t.windows(2).all(|w| w[0] <= w[1]) {
            return bad("timestamps not nondecreasing");
        }
        Ok(())
    }
}

/// Vocabularies over every token seen in the training split.
pub fn build_vocab(train: &[SplitSample], binner: &QuantileBinner) -> Vocabularies {
    let events = || train.iter().flat_map(|s| s.events.iter());
    Vocabularies {
        field_names: Vocabulary::from_tokens(events().map(|e| field_name_token(e.domain, &e.field_name))),
        field_values: Vocabulary::from_tokens(
            events().map(|e| discretize(binner, e.domain, &e.field_name, &e.field_value)),
        ),
        intents: Vocabulary::from_tokens(train.iter().flat_map(|s| s.intents.iter().map(|i| i.intent.clone()))),
    }
}

/// Everything fitted on the training window plus the split layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub config: PipelineConfig,
    pub t1: Timestamp,
    pub t2: Timestamp,
    pub binner: QuantileBinner,
    pub vocabs: Vocabularies,
    pub schema: TabularSchema,
}

impl PipelineState {
    pub fn tokenize(&self, sample: &SplitSample) -> Result<TokenizedSample> {
        let enc = flatten_context(&sample.events, &self.binner, &self.vocabs, self.config.max_context_len)?;
        let out = TokenizedSample {
            user_id: sample.user_id,
            enc_t: enc.t,
            enc_fn: enc.field_names,
            enc_fv: enc.field_values,
            enc_p: enc.products,
            dec_t: sample.intents.iter().map(|i| i.timestamp).collect(),
            dec_y: sample.intents.iter().map(|i| self.vocabs.intents.id(&i.intent)).collect(),
            dec_supervised: sample.supervised.clone(),
            dec_product_onehot: sample.intents.iter().map(|i| ownership_at(&sample.events, i.timestamp)).collect(),
            dec_tabular: sample
                .intents
                .iter()
                .map(|i| tabular_context_features(&self.schema, &sample.events, i.timestamp))
                .collect(),
        };
        out.validate()?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub state: PipelineState,
    pub train: Vec<TokenizedSample>,
    pub validation: Vec<TokenizedSample>,
    pub test: Vec<TokenizedSample>,
}

impl Preprocessed {
    pub fn split(&self, name: &str) -> Option<&[TokenizedSample]> {
        match name {
            "train" => Some(&self.train),
            "validation" => Some(&self.validation),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Splits, fits binner and vocabularies on the training window, tokenizes.
pub fn preprocess(
    events: &[ContextEvent],
    intents: &[IntentRecord],
    start: Timestamp,
    config: &PipelineConfig,
) -> Result<Preprocessed> {
    config.validate()?;
    let (t1, t2) = config.split_times(start);
    let raw = temporal_split(events, intents, t1, t2)?;
    if raw.train.is_empty() || raw.validation.is_empty() {
        return Err(Error::Config("training and validation splits must be nonempty".into()));
    }
    let window: Vec<ContextEvent> = events.iter().filter(|e| e.timestamp < t1).cloned().collect();
    let binner = fit_binner(&window, config.n_bins)?;
    let vocabs = build_vocab(&raw.train, &binner);
    let schema = TabularSchema {
        numeric_fields: binner.fields(),
    };
    let state = PipelineState {
        config: config.clone(),
        t1,
        t2,
        binner,
        vocabs,
        schema,
    };
    let tok = |v: &[SplitSample]| v.iter().map(|s| state.tokenize(s)).collect::<Result<Vec<_>>>();
    let (train, validation, test) = (tok(&raw.train)?, tok(&raw.validation)?, tok(&raw.test)?);
    Ok(Preprocessed {
        state,
        train,
        validation,
        test,
    })
}

/// Count of supervised positions per split, for reporting.
pub fn supervised_counts(p: &Preprocessed) -> BTreeMap<&'static str, usize> {
    [("train", &p.train), ("validation", &p.validation), ("test", &p.test)]
        .into_iter()
        .map(|(k, v)| (k, v.iter().map(TokenizedSample::n_supervised).sum()))
        .collect()
}
