use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::journey::{ContextEvent, Domain};

pub(crate) fn field_key(domain: Domain, field_name: &str) -> String {
    format!("{domain}/{field_name}")
}

/// Per-field quantile bin edges fitted on training-window numerics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileBinner {
    n_bins: usize,
    /// `"<domain>/<field_name>"` → strictly increasing edges.
    edges: BTreeMap<String, Vec<f64>>,
}

impl QuantileBinner {
    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn edges(&self, domain: Domain, field_name: &str) -> Option<&[f64]> {
        self.edges.get(&field_key(domain, field_name)).map(Vec::as_slice)
    }

    /// Fitted numeric fields as `(domain, field_name)`, sorted.
    pub fn fields(&self) -> Vec<(Domain, String)> {
        self.edges
            .keys()
            .filter_map(|k| {
                let (d, f) = k.split_once('/')?;
                Some((Domain::parse(d)?, f.to_string()))
            })
            .collect()
    }

    /// Bin index of `value`; a value equal to an edge falls in the bin above it.
    pub fn bin(&self, domain: Domain, field_name: &str, value: f64) -> Option<usize> {
        self.edges(domain, field_name)
            .map(|e| e.partition_point(|&edge| edge <= value))
    }
}

/// Quantile edges at `sorted[floor(i·N/n_bins)]` for `i = 1..n_bins`, with
/// duplicates and edges at the minimum collapsed.
fn quantile_edges(mut values: Vec<f64>, n_bins: usize) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let min = values[0];
    let mut edges: Vec<f64> = Vec::with_capacity(n_bins.saturating_sub(1));
    for i in 1..n_bins {
        let e = values[i * n / n_bins];
        if e > min && edges.last().is_none_or(|&last| e > last) {
            edges.push(e);
        }
    }
    edges
}

/// Fits edges for every numeric `(domain, field)` in `events`. Fields without
/// numeric observations are omitted and later discretize to UNK.
pub fn fit_binner(events: &[ContextEvent], n_bins: usize) -> Result<QuantileBinner> {
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be at least 1".into()));
    }
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for e in events {
        if let Some(x) = e.field_value.as_number() {
            values.entry(field_key(e.domain, &e.field_name)).or_default().push(x);
        }
    }
    let edges = values
        .into_iter()
        .map(|(k, v)| (k, quantile_edges(v, n_bins)))
        .collect();
    Ok(QuantileBinner { n_bins, edges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::journey::{FieldValue, Product};

    fn numeric_events(values: &[f64]) -> Vec<ContextEvent> {
        values
            .iter()
            .map(|&x| ContextEvent {
                user_id: 0,
                domain: Domain::Payments,
                product: Product::CardA,
                timestamp: 0,
                field_name: "amount".into(),
                field_value: FieldValue::Number(x),
            })
            .collect()
    }

    #[test]
    fn single_bin_has_no_edges() {
        let b = fit_binner(&numeric_events(&[1.0, 5.0, 9.0]), 1).unwrap();
        assert!(b.edges(Domain::Payments, "amount").unwrap().is_empty());
        assert_eq!(b.bin(Domain::Payments, "amount", 100.0), Some(0));
    }

    #[test]
    fn hundred_values_four_bins() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let b = fit_binner(&numeric_events(&v), 4).unwrap();
        assert_eq!(b.bin(Domain::Payments, "amount", 10.0), Some(0));
        assert_eq!(b.bin(Domain::Payments, "amount", 99.0), Some(3));
    }

    #[test]
    fn identical_values_collapse() {
        let b = fit_binner(&numeric_events(&[4.2; 50]), 10).unwrap();
        assert!(b.edges(Domain::Payments, "amount").unwrap().is_empty());
        assert_eq!(b.bin(Domain::Payments, "amount", 4.2), Some(0));
    }

    #[test]
    fn edge_value_goes_to_higher_bin() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let b = fit_binner(&numeric_events(&v), 4).unwrap();
        let edges = b.edges(Domain::Payments, "amount").unwrap().to_vec();
        for (i, &e) in edges.iter().enumerate() {
            assert_eq!(b.bin(Domain::Payments, "amount", e), Some(i + 1));
            assert_eq!(b.bin(Domain::Payments, "amount", e - 1e-9), Some(i));
        }
    }

    #[test]
    fn unknown_field_is_none() {
        let b = fit_binner(&numeric_events(&[1.0]), 3).unwrap();
        assert_eq!(b.bin(Domain::Rewards, "points", 1.0), None);
        assert!(fit_binner(&[], 0).is_err());
    }
}
