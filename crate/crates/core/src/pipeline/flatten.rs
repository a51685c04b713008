use serde::{Deserialize, Serialize};

use super::binner::QuantileBinner;
use super::vocab::{Vocabularies, BOS, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::journey::{ContextEvent, Domain, FieldValue, Product, Timestamp};

/// Timestamp of the BOS sentinel, standing in for −∞.
pub const BOS_TIME: Timestamp = Timestamp::MIN;
/// Product id 0 is "no product" (BOS); products follow at `index + 1`.
pub const N_PRODUCT_IDS: usize = Product::ALL.len() + 1;

pub fn product_id(p: Product) -> usize {
    p.index() + 1
}

pub fn field_name_token(domain: Domain, field_name: &str) -> String {
    format!("{field_name}_+_{domain}")
}

/// Field-value token: `<domain>/<field>=bin<k>` for numerics,
/// `<domain>/<field>=<value>` for strings, UNK for numerics of unfitted fields.
pub fn discretize(binner: &QuantileBinner, domain: Domain, field_name: &str, value: &FieldValue) -> String {
    match value {
        FieldValue::Text(s) => format!("{domain}/{field_name}={s}"),
        FieldValue::Number(x) => match binner.bin(domain, field_name, *x) {
            Some(k) => format!("{domain}/{field_name}=bin{k}"),
            None => UNK_TOKEN.to_string(),
        },
    }
}

/// Encoder-side parallel sequences. Position 0 is the BOS sentinel.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderSequence {
    pub t: Vec<Timestamp>,
    pub field_names: Vec<usize>,
    pub field_values: Vec<usize>,
    pub products: Vec<usize>,
}

impl EncoderSequence {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Stable order by (timestamp, domain, field name); equal keys keep input order.
pub fn sort_observations(events: &[ContextEvent]) -> Vec<&ContextEvent> {
    let mut sorted: Vec<&ContextEvent> = events.iter().collect();
    sorted.sort_by(|a, b| {
        (a.timestamp, a.domain, &a.field_name).cmp(&(b.timestamp, b.domain, &b.field_name))
    });
    sorted
}

/// Flattens one user's observations into a BOS-prefixed token sequence,
/// keeping at most the `max_len` most recent observations.
pub fn flatten_context(
    events: &[ContextEvent],
    binner: &QuantileBinner,
    vocabs: &Vocabularies,
    max_len: usize,
) -> Result<EncoderSequence> {
    if let Some(first) = events.first() {
        if let Some(other) = events.iter().find(|e| e.user_id != first.user_id) {
            return Err(Error::Contract(format!(
                "flatten_context got users {} and {}",
                first.user_id, other.user_id
            )));
        }
    }
    let sorted = sort_observations(events);
    let kept = &sorted[sorted.len().saturating_sub(max_len)..];
    let mut seq = EncoderSequence {
        t: vec![BOS_TIME],
        field_names: vec![BOS],
        field_values: vec![BOS],
        products: vec![0],
    };
    for e in kept {
        seq.t.push(e.timestamp);
        seq.field_names
            .push(vocabs.field_names.id(&field_name_token(e.domain, &e.field_name)));
        seq.field_values
            .push(vocabs.field_values.id(&discretize(binner, e.domain, &e.field_name, &e.field_value)));
        seq.products.push(product_id(e.product));
    }
    Ok(seq)
}

/// One decoded encoder position.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Observation {
    pub domain: Domain,
    pub field_name: String,
    /// Bin label (`bin<k>`) or string value.
    pub value: String,
    pub product: Product,
    pub timestamp: Timestamp,
}

impl Observation {
    /// The observation a raw event is expected to decode to.
    pub fn of_event(e: &ContextEvent, binner: &QuantileBinner) -> Option<Observation> {
        let token = discretize(binner, e.domain, &e.field_name, &e.field_value);
        let (_, value) = token.split_once('=')?;
        Some(Observation {
            domain: e.domain,
            field_name: e.field_name.clone(),
            value: value.to_string(),
            product: e.product,
            timestamp: e.timestamp,
        })
    }
}

/// Inverse of [`flatten_context`] over the non-BOS positions.
pub fn detokenize(seq: &EncoderSequence, vocabs: &Vocabularies) -> Result<Vec<Observation>> {
    let bad = |pos: usize, what: &str| Error::Contract(format!("position {pos}: cannot decode {what}"));
    (1..seq.len())
        .map(|i| {
            let fv = vocabs
                .field_values
                .token(seq.field_values[i])
                .ok_or_else(|| bad(i, "field value id"))?;
            let (domain, rest) = fv.split_once('/').ok_or_else(|| bad(i, fv))?;
            let (field_name, value) = rest.split_once('=').ok_or_else(|| bad(i, fv))?;
            let domain = Domain::parse(domain).ok_or_else(|| bad(i, domain))?;
            let fname = vocabs.field_names.token(seq.field_names[i]).ok_or_else(|| bad(i, "field name id"))?;
            if fname != field_name_token(domain, field_name) {
                return Err(bad(i, fname));
            }
            let product = seq.products[i]
                .checked_sub(1)
                .and_then(|p| Product::ALL.get(p).copied())
                .ok_or_else(|| bad(i, "product id"))?;
            Ok(Observation {
                domain,
                field_name: field_name.to_string(),
                value: value.to_string(),
                product,
                timestamp: seq.t[i],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::binner::fit_binner;
    use crate::pipeline::vocab::{Vocabulary, UNK};

    fn ev(domain: Domain, t: Timestamp, field: &str, value: FieldValue) -> ContextEvent {
        ContextEvent {
            user_id: 7,
            domain,
            product: Product::CardA,
            timestamp: t,
            field_name: field.into(),
            field_value: value,
        }
    }

    fn text(s: &str) -> FieldValue {
        FieldValue::Text(s.into())
    }

    fn vocabs_for(events: &[ContextEvent], binner: &QuantileBinner) -> Vocabularies {
        Vocabularies {
            field_names: Vocabulary::from_tokens(events.iter().map(|e| field_name_token(e.domain, &e.field_name))),
            field_values: Vocabulary::from_tokens(
                events.iter().map(|e| discretize(binner, e.domain, &e.field_name, &e.field_value)),
            ),
            intents: Vocabulary::from_tokens(Vec::<String>::new()),
        }
    }

    #[test]
    fn token_formats() {
        let b = fit_binner(&[ev(Domain::Payments, 0, "amount", FieldValue::Number(3.0))], 2).unwrap();
        assert_eq!(
            discretize(&b, Domain::Transactions, "merchant", &text("grocer_7")),
            "transactions/merchant=grocer_7"
        );
        assert_eq!(discretize(&b, Domain::Payments, "amount", &FieldValue::Number(1.0)), "payments/amount=bin0");
        assert_eq!(discretize(&b, Domain::Rewards, "points", &FieldValue::Number(1.0)), UNK_TOKEN);
        assert_eq!(field_name_token(Domain::Payments, "amount"), "amount_+_payments");
    }

    #[test]
    fn one_event_two_fields() {
        let events = vec![
            ev(Domain::Transactions, 10, "amount", FieldValue::Number(5.0)),
            ev(Domain::Transactions, 10, "merchant", text("fuel")),
        ];
        let b = fit_binner(&events, 4).unwrap();
        let seq = flatten_context(&events, &b, &vocabs_for(&events, &b), 256).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.t[0], BOS_TIME);
        assert_eq!(seq.products, vec![0, 1, 1]);
    }

    #[test]
    fn empty_is_bos_only() {
        let b = fit_binner(&[], 4).unwrap();
        let seq = flatten_context(&[], &b, &vocabs_for(&[], &b), 256).unwrap();
        assert_eq!(seq.t, vec![BOS_TIME]);
        assert_eq!(seq.field_values, vec![BOS]);
    }

    #[test]
    fn interleaves_domains_by_time() {
        let events = vec![
            ev(Domain::Payments, 30, "method", text("ach")),
            ev(Domain::Transactions, 10, "merchant", text("fuel")),
            ev(Domain::Payments, 5, "method", text("wire")),
            ev(Domain::Transactions, 20, "merchant", text("travel")),
        ];
        let b = fit_binner(&events, 4).unwrap();
        let v = vocabs_for(&events, &b);
        let seq = flatten_context(&events, &b, &v, 256).unwrap();
        assert_eq!(seq.t, vec![BOS_TIME, 5, 10, 20, 30]);
        let values: Vec<&str> = seq.field_values.iter().map(|&i| v.field_values.token(i).unwrap()).collect();
        assert_eq!(
            values,
            ["<bos>", "payments/method=wire", "transactions/merchant=fuel", "transactions/merchant=travel", "payments/method=ach"]
        );
    }

    #[test]
    fn ties_follow_domain_field_then_insertion() {
        let events = vec![
            ev(Domain::Payments, 1, "method", text("b")),
            ev(Domain::Transactions, 1, "merchant", text("x")),
            ev(Domain::Payments, 1, "amount", text("z")),
            ev(Domain::Payments, 1, "method", text("a")),
        ];
        let sorted = sort_observations(&events);
        // oracle: domain rank, then field name, then original index
        let mut idx: Vec<usize> = (0..events.len()).collect();
        idx.sort_by_key(|&i| (events[i].domain.index(), events[i].field_name.clone(), i));
        let want: Vec<&ContextEvent> = idx.iter().map(|&i| &events[i]).collect();
        assert_eq!(sorted, want);
        let b = fit_binner(&events, 2).unwrap();
        let v = vocabs_for(&events, &b);
        assert_eq!(flatten_context(&events, &b, &v, 256).unwrap(), flatten_context(&events, &b, &v, 256).unwrap());
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let events: Vec<ContextEvent> = (0..10).map(|t| ev(Domain::Payments, t, "method", text("ach"))).collect();
        let b = fit_binner(&events, 2).unwrap();
        let seq = flatten_context(&events, &b, &vocabs_for(&events, &b), 4).unwrap();
        assert_eq!(seq.t, vec![BOS_TIME, 6, 7, 8, 9]);
    }

    #[test]
    fn unseen_tokens_are_unk_and_mixed_users_rejected() {
        let train = vec![ev(Domain::Payments, 1, "method", text("ach"))];
        let b = fit_binner(&train, 2).unwrap();
        let v = vocabs_for(&train, &b);
        let test = vec![ev(Domain::Payments, 2, "method", text("wire"))];
        assert_eq!(flatten_context(&test, &b, &v, 8).unwrap().field_values[1], UNK);
        let mut mixed = train.clone();
        mixed.push(ContextEvent { user_id: 8, ..train[0].clone() });
        assert!(flatten_context(&mixed, &b, &v, 8).is_err());
    }
}
