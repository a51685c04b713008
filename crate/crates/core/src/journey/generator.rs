use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};

use super::{
    ContextEvent, Domain, DomainSpec, FieldKind, FieldValue, GeneratorConfig, IntentRecord,
    PlantedRule, Product, Timestamp, UserId, SECONDS_PER_DAY,
};
use crate::error::Result;
use crate::rng::stream;

const STREAM_OWNERSHIP: u64 = 1;
const STREAM_DOMAIN: u64 = 10;
const STREAM_RULES: u64 = 100;
const STREAM_NOISE: u64 = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedJourneys {
    /// Sorted by user, then timestamp.
    pub events: Vec<ContextEvent>,
    /// Sorted by user, then timestamp.
    pub intents: Vec<IntentRecord>,
    pub rules: Vec<PlantedRule>,
    /// Index into `rules` of the rule that caused each intent; `None` for
    /// background noise.
    pub intent_causes: Vec<Option<usize>>,
}

impl GeneratedJourneys {
    pub fn caused_count(&self) -> usize {
        self.intent_causes.iter().filter(|c| c.is_some()).count()
    }
}

/// Ownership state over time: `(from_timestamp, owned flags)`, ascending.
struct Ownership(Vec<(Timestamp, [bool; 3])>);

impl Ownership {
    fn at(&self, t: Timestamp) -> [bool; 3] {
        let idx = self.0.partition_point(|(s, _)| *s <= t);
        self.0[idx.saturating_sub(1)].1
    }
}

fn arrivals(rng: &mut ChaCha8Rng, rate_per_day: f64, start: Timestamp, end: Timestamp) -> Vec<Timestamp> {
    if rate_per_day <= 0.0 {
        return Vec::new();
    }
    let exp = Exp::new(rate_per_day / SECONDS_PER_DAY as f64).expect("positive rate");
    let span = (end - start) as f64;
    let mut out = Vec::new();
    let mut x = 0.0;
    loop {
        x += exp.sample(rng);
        if x >= span {
            return out;
        }
        out.push(start + x as i64);
    }
}

fn draw_value(kind: &FieldKind, rng: &mut ChaCha8Rng) -> Option<FieldValue> {
    Some(match kind {
        FieldKind::Numeric { log_mean, log_sd } => {
            let d = LogNormal::new(*log_mean, *log_sd).expect("validated log_sd");
            FieldValue::Number((d.sample(rng) * 100.0).round() / 100.0)
        }
        FieldKind::Categorical { values } => FieldValue::Text(values[rng.gen_range(0..values.len())].clone()),
        FieldKind::Coded { prefix, cardinality } => {
            FieldValue::Text(format!("{prefix}_{}", rng.gen_range(0..*cardinality)))
        }
        FieldKind::Status => return None,
    })
}

fn emit_fields(
    spec: &DomainSpec,
    user_id: UserId,
    product: Product,
    timestamp: Timestamp,
    status: Option<&str>,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<ContextEvent>,
) {
    for f in &spec.fields {
        // Presence is drawn for every field so the stream is independent of outcomes.
        let present = rng.gen::<f64>() < f.presence;
        let value = match (&f.kind, status) {
            (FieldKind::Status, Some(s)) => Some(FieldValue::Text(s.to_string())),
            (kind, _) => draw_value(kind, rng),
        };
        if let (true, Some(field_value)) = (present, value) {
            out.push(ContextEvent {
                user_id,
                domain: spec.domain,
                product,
                timestamp,
                field_name: f.name.clone(),
                field_value,
            });
        }
    }
}

fn ownership_for_user(
    config: &GeneratorConfig,
    seed: u64,
    user: UserId,
    events: &mut Vec<ContextEvent>,
) -> Ownership {
    let mut rng = stream(seed, &[u64::from(user), STREAM_OWNERSHIP]);
    let start = config.start_timestamp;
    let mut owned = [false; 3];
    for o in owned.iter_mut() {
        *o = rng.gen::<f64>() < config.ownership_probability;
    }
    let fallback = rng.gen_range(0..3);
    if !owned.iter().any(|&o| o) {
        owned[fallback] = true;
    }
    let mut timeline = vec![(start, owned)];
    let Some(spec) = config.domain(Domain::ProductEnrollment) else {
        return Ownership(timeline);
    };
    for p in Product::ALL.into_iter().filter(|p| owned[p.index()]) {
        emit_fields(spec, user, p, start, Some("enrolled"), &mut rng, events);
    }
    for t in arrivals(&mut rng, spec.rate_per_day, start, config.end_timestamp()) {
        let p = Product::ALL[rng.gen_range(0..3)];
        let count = owned.iter().filter(|&&o| o).count();
        let status = if owned[p.index()] {
            if count == 1 {
                continue;
            }
            "closed"
        } else {
            "enrolled"
        };
        owned[p.index()] = status == "enrolled";
        // Ownership changes take effect one second after the event.
        timeline.push((t + 1, owned));
        emit_fields(spec, user, p, t, Some(status), &mut rng, events);
    }
    Ownership(timeline)
}

/// Draws synthetic journeys: per user, one homogeneous Poisson process per
/// domain, planted rules firing after each matching observation, and uniform
/// background intents. Pure in `(config, seed)`.
pub fn generate_journeys(config: &GeneratorConfig, seed: u64) -> Result<GeneratedJourneys> {
    config.validate()?;
    let start = config.start_timestamp;
    let end = config.end_timestamp();
    let mut events = Vec::new();
    let mut intents = Vec::new();
    let mut causes = Vec::new();

    for u in 0..config.n_users {
        let user = u as UserId;
        let mut user_events = Vec::new();
        let ownership = ownership_for_user(config, seed, user, &mut user_events);

        for spec in config.domains.iter().filter(|s| s.domain != Domain::ProductEnrollment) {
            let mut rng = stream(seed, &[u64::from(user), STREAM_DOMAIN + spec.domain.index() as u64]);
            for t in arrivals(&mut rng, spec.rate_per_day, start, end) {
                let owned = ownership.at(t);
                let choices: Vec<Product> = Product::ALL.into_iter().filter(|p| owned[p.index()]).collect();
                let product = choices[rng.gen_range(0..choices.len())];
                emit_fields(spec, user, product, t, None, &mut rng, &mut user_events);
            }
        }
        user_events.sort_by_key(|e| e.timestamp);

        let mut user_intents: Vec<(IntentRecord, Option<usize>)> = Vec::new();
        let mut rng = stream(seed, &[u64::from(user), STREAM_RULES]);
        for e in &user_events {
            for (ri, rule) in config.rules.iter().enumerate() {
                if !rule.trigger.matches(e) {
                    continue;
                }
                let fires = rng.gen::<f64>() < rule.fire_probability;
                let w = rule.delay_window;
                let delay = rng.gen_range(w.min_seconds + 1..w.max_seconds);
                let t = e.timestamp + delay;
                if fires && t < end {
                    user_intents.push((
                        IntentRecord {
                            user_id: user,
                            timestamp: t,
                            intent: rule.effect_intent.clone(),
                        },
                        Some(ri),
                    ));
                }
            }
        }

        let mut rng = stream(seed, &[u64::from(user), STREAM_NOISE]);
        for t in arrivals(&mut rng, config.noise_rate_per_day, start, end) {
            let intent = config.intents[rng.gen_range(0..config.intents.len())].clone();
            user_intents.push((
                IntentRecord {
                    user_id: user,
                    timestamp: t,
                    intent,
                },
                None,
            ));
        }
        user_intents.sort_by_key(|(r, _)| r.timestamp);

        events.extend(user_events);
        for (r, c) in user_intents {
            intents.push(r);
            causes.push(c);
        }
    }

    Ok(GeneratedJourneys {
        events,
        intents,
        rules: config.rules.clone(),
        intent_causes: causes,
    })
}

/// Realized fraction of rule-caused intents alongside its analytic
/// expectation given the realized trigger observations:
/// `sum p·P(delay lands before end) / (that + noise_rate·span·users)`.
pub fn expected_caused_fraction(config: &GeneratorConfig, data: &GeneratedJourneys) -> (f64, f64) {
    let end = config.end_timestamp();
    let mut expected_caused = 0.0;
    for e in &data.events {
        for rule in &config.rules {
            if !rule.trigger.matches(e) {
                continue;
            }
            let w = rule.delay_window;
            let lo = w.min_seconds + 1;
            let hi = (w.max_seconds - 1).min(end - 1 - e.timestamp);
            let landing = (hi - lo + 1).max(0) as f64 / w.interior_len() as f64;
            expected_caused += rule.fire_probability * landing;
        }
    }
    let expected_noise = config.noise_rate_per_day * config.span_days * config.n_users as f64;
    let realized = data.caused_count() as f64 / data.intents.len().max(1) as f64;
    (realized, expected_caused / (expected_caused + expected_noise))
}
