use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::journey::{ContextEvent, Domain, FieldValue, Product, Timestamp, SECONDS_PER_DAY};

pub const WINDOW_DAYS: [i64; 3] = [7, 30, 90];

/// Layout of the hand-engineered context vector: per-domain counts, then
/// per-numeric-field means, each over [`WINDOW_DAYS`], then ownership.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TabularSchema {
    pub numeric_fields: Vec<(Domain, String)>,
}

impl TabularSchema {
    pub fn dim(&self) -> usize {
        (Domain::ALL.len() + self.numeric_fields.len()) * WINDOW_DAYS.len() + Product::ALL.len()
    }
}

/// Multi-hot ownership from enrollment `status` observations strictly before `t`.
pub fn ownership_at(events: &[ContextEvent], t: Timestamp) -> [f64; 3] {
    let mut latest: [Option<(Timestamp, bool)>; 3] = [None; 3];
    for e in events {
        if e.domain != Domain::ProductEnrollment || e.field_name != "status" || e.timestamp >= t {
            continue;
        }
        let FieldValue::Text(s) = &e.field_value else { continue };
        let slot = &mut latest[e.product.index()];
        if slot.is_none_or(|(ts, _)| e.timestamp >= ts) {
            *slot = Some((e.timestamp, s == "enrolled"));
        }
    }
    latest.map(|s| if s.is_some_and(|(_, owned)| owned) { 1.0 } else { 0.0 })
}

/// Trailing-window aggregates over events with age in `(0, w]` at time `t`.
pub fn tabular_context_features(schema: &TabularSchema, events: &[ContextEvent], t: Timestamp) -> Vec<f64> {
    let nw = WINDOW_DAYS.len();
    let mut counts = vec![0.0; Domain::ALL.len() * nw];
    let mut sums = vec![0.0; schema.numeric_fields.len() * nw];
    let mut ns = vec![0.0; schema.numeric_fields.len() * nw];
    // a domain event is one timestamp per (domain, product) with any field
    let mut seen: HashSet<(Domain, Product, Timestamp)> = HashSet::new();
    for e in events.iter().filter(|e| e.timestamp < t) {
        let age = t - e.timestamp;
        let key = (e.domain, e.product, e.timestamp);
        let first = seen.insert(key);
        let field = schema
            .numeric_fields
            .iter()
            .position(|(d, f)| *d == e.domain && *f == e.field_name);
        for (w, &days) in WINDOW_DAYS.iter().enumerate() {
            if age > days * SECONDS_PER_DAY {
                continue;
            }
            if first {
                counts[e.domain.index() * nw + w] += 1.0;
            }
            if let (Some(f), Some(x)) = (field, e.field_value.as_number()) {
                sums[f * nw + w] += x;
                ns[f * nw + w] += 1.0;
            }
        }
    }
    let means = sums.iter().zip(&ns).map(|(s, n)| if *n > 0.0 { s / n } else { 0.0 });
    counts.iter().copied().chain(means).chain(ownership_at(events, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DAY: i64 = SECONDS_PER_DAY;

    fn ev(domain: Domain, product: Product, t: Timestamp, field: &str, value: FieldValue) -> ContextEvent {
        ContextEvent {
            user_id: 0,
            domain,
            product,
            timestamp: t,
            field_name: field.into(),
            field_value: value,
        }
    }

    fn schema() -> TabularSchema {
        TabularSchema {
            numeric_fields: vec![(Domain::Payments, "amount".into()), (Domain::Transactions, "amount".into())],
        }
    }

    #[test]
    fn no_prior_events_is_zero() {
        let f = tabular_context_features(&schema(), &[], 1000);
        assert_eq!(f.len(), schema().dim());
        assert!(f.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ten_day_old_event_windows() {
        let e = [ev(Domain::Payments, Product::CardA, 0, "amount", FieldValue::Number(4.0))];
        let f = tabular_context_features(&schema(), &e, 10 * DAY);
        let p = Domain::Payments.index() * 3;
        assert_eq!(&f[p..p + 3], &[0.0, 1.0, 1.0]);
        let m = Domain::ALL.len() * 3;
        assert_eq!(&f[m..m + 3], &[0.0, 4.0, 4.0]);
    }

    #[test]
    fn ownership_replays_status() {
        let s = |t, p, v: &str| ev(Domain::ProductEnrollment, p, t, "status", FieldValue::Text(v.into()));
        let e = [s(0, Product::CardA, "enrolled"), s(5, Product::CardA, "closed"), s(3, Product::Deposit, "enrolled")];
        assert_eq!(ownership_at(&e, 0), [0.0, 0.0, 0.0]);
        assert_eq!(ownership_at(&e, 4), [1.0, 0.0, 1.0]);
        assert_eq!(ownership_at(&e, 6), [0.0, 0.0, 1.0]);
    }

    fn scan_oracle(schema: &TabularSchema, events: &[ContextEvent], t: Timestamp) -> Vec<f64> {
        let mut out = Vec::new();
        for d in Domain::ALL {
            for w in WINDOW_DAYS {
                let mut keys: Vec<(Product, Timestamp)> = events
                    .iter()
                    .filter(|e| e.domain == d && e.timestamp < t && t - e.timestamp <= w * DAY)
                    .map(|e| (e.product, e.timestamp))
                    .collect();
                keys.sort();
                keys.dedup();
                out.push(keys.len() as f64);
            }
        }
        for (d, f) in &schema.numeric_fields {
            for w in WINDOW_DAYS {
                let xs: Vec<f64> = events
                    .iter()
                    .filter(|e| e.domain == *d && &e.field_name == f && e.timestamp < t && t - e.timestamp <= w * DAY)
                    .filter_map(|e| e.field_value.as_number())
                    .collect();
                out.push(if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 });
            }
        }
        out
    }

    proptest! {
        #[test]
        fn matches_window_scan(
            raw in prop::collection::vec((0usize..5, 0usize..3, 0i64..120, 0u8..2, 1.0f64..500.0), 0..40),
            t_day in 0i64..120,
        ) {
            let events: Vec<ContextEvent> = raw
                .iter()
                .map(|&(d, p, day, f, x)| {
                    let field = if f == 0 { "amount" } else { "note" };
                    ev(Domain::ALL[d], Product::ALL[p], day * DAY / 2, field, FieldValue::Number(x))
                })
                .collect();
            let t = t_day * DAY / 2 + 1;
            let got = tabular_context_features(&schema(), &events, t);
            let want = scan_oracle(&schema(), &events, t);
            prop_assert_eq!(got.len(), want.len() + 3);
            for (a, b) in got.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }
}
