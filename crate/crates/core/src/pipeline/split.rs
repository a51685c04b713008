use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::journey::{ContextEvent, IntentRecord, Timestamp, UserId};

/// One user's raw material for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSample {
    pub user_id: UserId,
    /// Observations strictly before the last supervised intent.
    pub events: Vec<ContextEvent>,
    /// Decoder sequence: every intent before the split end, in time order.
    pub intents: Vec<IntentRecord>,
    pub supervised: Vec<bool>,
}

impl SplitSample {
    pub fn n_supervised(&self) -> usize {
        self.supervised.iter().filter(|&&s| s).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawSplits {
    pub train: Vec<SplitSample>,
    pub validation: Vec<SplitSample>,
    pub test: Vec<SplitSample>,
}

fn by_user<T: Clone>(items: &[T], user: impl Fn(&T) -> UserId) -> BTreeMap<UserId, Vec<T>> {
    let mut out: BTreeMap<UserId, Vec<T>> = BTreeMap::new();
    for x in items {
        out.entry(user(x)).or_default().push(x.clone());
    }
    out
}

/// Per-user temporal split. Intents before `t1` supervise training, those in
/// `[t1, t2)` validation and those at or after `t2` test; earlier intents stay
/// in the decoder sequence as unsupervised history.
pub fn temporal_split(
    events: &[ContextEvent],
    intents: &[IntentRecord],
    t1: Timestamp,
    t2: Timestamp,
) -> Result<RawSplits> {
    if t1 >= t2 {
        return Err(Error::Config(format!("split boundaries must satisfy t1 < t2, got {t1} and {t2}")));
    }
    let events = by_user(events, |e| e.user_id);
    let mut intents = by_user(intents, |i| i.user_id);
    let mut splits = RawSplits::default();
    let no_events = Vec::new();
    for (user, seq) in intents.iter_mut() {
        seq.sort_by_key(|i| i.timestamp);
        let ranges = [
            (Timestamp::MIN, t1, &mut splits.train),
            (t1, t2, &mut splits.validation),
            (t2, Timestamp::MAX, &mut splits.test),
        ];
        for (lo, hi, out) in ranges {
            let history: Vec<IntentRecord> = seq.iter().filter(|i| i.timestamp < hi).cloned().collect();
            let supervised: Vec<bool> = history.iter().map(|i| i.timestamp >= lo).collect();
            let Some(last) = history.iter().zip(&supervised).filter(|(_, &s)| s).map(|(i, _)| i.timestamp).next_back()
            else {
                continue;
            };
            let context = events
                .get(user)
                .unwrap_or(&no_events)
                .iter()
                .filter(|e| e.timestamp < last)
                .cloned()
                .collect();
            out.push(SplitSample {
                user_id: *user,
                events: context,
                intents: history,
                supervised,
            });
        }
    }
    if splits.test.is_empty() {
        return Err(Error::Config(format!("no intents at or after t2 = {t2}; the test split is empty")));
    }
    Ok(splits)
}
