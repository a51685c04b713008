use std::collections::BTreeMap;

use super::{ContextEvent, GeneratorConfig, IntentRecord, Timestamp, UserId, SECONDS_PER_DAY};
use crate::error::{Error, Result};

/// Per-second arrival intensity of every vocabulary intent at time `t`,
/// given the trigger times of each rule for one user. Proportional to the
/// posterior over which intent occurs, given that one occurs at `t`.
pub fn intent_posterior_scores(
    config: &GeneratorConfig,
    trigger_times: &[Vec<Timestamp>],
    t: Timestamp,
) -> Vec<f64> {
    let noise = config.noise_rate_per_day / SECONDS_PER_DAY as f64 / config.intents.len() as f64;
    let mut scores = vec![noise; config.intents.len()];
    for (rule, times) in config.rules.iter().zip(trigger_times) {
        let Some(y) = config.intent_index(&rule.effect_intent) else {
            continue;
        };
        let w = rule.delay_window;
        let density = rule.fire_probability / w.interior_len() as f64;
        // times are sorted; only triggers with t - max < tau < t - min count
        let lo = times.partition_point(|&tau| tau <= t - w.max_seconds);
        let hi = times.partition_point(|&tau| tau < t - w.min_seconds);
        scores[y] += density * hi.saturating_sub(lo) as f64;
    }
    scores
}

fn trigger_times_by_user(
    config: &GeneratorConfig,
    events: &[ContextEvent],
) -> BTreeMap<UserId, Vec<Vec<Timestamp>>> {
    let mut out: BTreeMap<UserId, Vec<Vec<Timestamp>>> = BTreeMap::new();
    for e in events {
        for (ri, rule) in config.rules.iter().enumerate() {
            if rule.trigger.matches(e) {
                out.entry(e.user_id)
                    .or_insert_with(|| vec![Vec::new(); config.rules.len()])[ri]
                    .push(e.timestamp);
            }
        }
    }
    for per_rule in out.values_mut() {
        per_rule.iter_mut().for_each(|v| v.sort_unstable());
    }
    out
}

/// Recall@k of the rule-aware oracle that knows every trigger time, the
/// firing probabilities, delay windows and noise rate, over intents at or
/// after `from`. Ties are broken by vocabulary index.
pub fn bayes_recall_bound(
    config: &GeneratorConfig,
    events: &[ContextEvent],
    intents: &[IntentRecord],
    from: Timestamp,
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let triggers = trigger_times_by_user(config, events);
    let empty = vec![Vec::new(); config.rules.len()];
    let mut hits = 0usize;
    let mut total = 0usize;
    for intent in intents.iter().filter(|i| i.timestamp >= from) {
        total += 1;
        let Some(truth) = config.intent_index(&intent.intent) else {
            continue;
        };
        let per_rule = triggers.get(&intent.user_id).unwrap_or(&empty);
        let scores = intent_posterior_scores(config, per_rule, intent.timestamp);
        // rank of truth = number of intents strictly ahead of it
        let ahead = scores
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > scores[truth] || (s == scores[truth] && j < truth))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::Config("no intents at or after the evaluation start".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::journey::{generate_journeys, DelayWindow, Domain, PlantedRule, Trigger, ValueCondition};

    #[test]
    fn all_noise_is_chance() {
        let mut c = GeneratorConfig::default();
        c.rules.iter_mut().for_each(|r| r.fire_probability = 0.0);
        c.n_users = 400;
        let d = generate_journeys(&c, 1).unwrap();
        let r = bayes_recall_bound(&c, &d.events, &d.intents, c.start_timestamp, 1).unwrap();
        assert!((r - 0.05).abs() < 0.015, "{r}");
    }

    #[test]
    fn deterministic_rule_without_noise_is_perfect() {
        let mut c = GeneratorConfig::default();
        c.n_users = 20;
        c.noise_rate_per_day = 0.0;
        c.rules = vec![PlantedRule {
            name: "r".into(),
            trigger: Trigger {
                domain: Domain::Payments,
                field_name: "amount".into(),
                condition: ValueCondition::Any,
                product: None,
                day_of_week: None,
            },
            effect_intent: "make_a_payment".into(),
            delay_window: DelayWindow {
                min_seconds: 60,
                max_seconds: 3600,
            },
            fire_probability: 1.0,
        }];
        let d = generate_journeys(&c, 2).unwrap();
        assert!(!d.intents.is_empty());
        let r = bayes_recall_bound(&c, &d.events, &d.intents, c.start_timestamp, 1).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn posterior_matches_exhaustive_window_scan() {
        // Oracle: scan every trigger of every rule for every intent time.
        let c = GeneratorConfig {
            n_users: 10,
            ..GeneratorConfig::default()
        };
        let d = generate_journeys(&c, 4).unwrap();
        let triggers = trigger_times_by_user(&c, &d.events);
        for intent in d.intents.iter().take(200) {
            let per_rule = &triggers[&intent.user_id];
            let got = intent_posterior_scores(&c, per_rule, intent.timestamp);
            let mut want = vec![c.noise_rate_per_day / 86_400.0 / 20.0; 20];
            for e in d.events.iter().filter(|e| e.user_id == intent.user_id) {
                for r in &c.rules {
                    if r.trigger.matches(e) && r.delay_window.strictly_contains(intent.timestamp - e.timestamp) {
                        want[c.intent_index(&r.effect_intent).unwrap()] +=
                            r.fire_probability / r.delay_window.interior_len() as f64;
                    }
                }
            }
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-15 * b.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let c = GeneratorConfig {
            n_users: 30,
            ..GeneratorConfig::default()
        };
        let d = generate_journeys(&c, 8).unwrap();
        let r: Vec<f64> = [1, 5, 10]
            .iter()
            .map(|&k| bayes_recall_bound(&c, &d.events, &d.intents, c.start_timestamp, k).unwrap())
            .collect();
        assert!(r[0] <= r[1] && r[1] <= r[2]);
    }
}
