//! Multi-channel customer journeys: context events, intents, and the planted
//! rules that link them in synthetic data.

mod bayes;
mod config;
mod generator;
pub mod io;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use bayes::{bayes_recall_bound, intent_posterior_scores};
pub use config::{DomainSpec, FieldKind, FieldSpec, GeneratorConfig};
pub use generator::{expected_caused_fraction, generate_journeys, GeneratedJourneys};

pub type UserId = u32;
/// Integer seconds since the Unix epoch.
pub type Timestamp = i64;

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Transactions,
    Payments,
    Rewards,
    OutboundMessages,
    ProductEnrollment,
}

impl Domain {
    pub const ALL: [Domain; 5] = [
        Domain::Transactions,
        Domain::Payments,
        Domain::Rewards,
        Domain::OutboundMessages,
        Domain::ProductEnrollment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Transactions => "transactions",
            Domain::Payments => "payments",
            Domain::Rewards => "rewards",
            Domain::OutboundMessages => "outbound_messages",
            Domain::ProductEnrollment => "product_enrollment",
        }
    }

    pub fn parse(s: &str) -> Option<Domain> {
        Domain::ALL.into_iter().find(|d| d.as_str() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Product {
    CardA,
    CardB,
    Deposit,
}

impl Product {
    pub const ALL: [Product; 3] = [Product::CardA, Product::CardB, Product::Deposit];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Product::CardA => "card_a",
            Product::CardB => "card_b",
            Product::Deposit => "deposit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Number(f64),
    Text(String),
}

impl FieldValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            FieldValue::Number(x) => Some(*x),
            FieldValue::Text(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            FieldValue::Text(s) => Some(s),
            FieldValue::Number(_) => None,
        }
    }
}

/// One timestamped field observation from one domain and product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEvent {
    pub user_id: UserId,
    pub domain: Domain,
    pub product: Product,
    pub timestamp: Timestamp,
    pub field_name: String,
    pub field_value: FieldValue,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentRecord {
    pub user_id: UserId,
    pub timestamp: Timestamp,
    pub intent: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueCondition {
    /// Any observation of the field.
    Any,
    Equals { value: String },
    /// Numeric value in `[min, max)`.
    Range { min: f64, max: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trigger {
    pub domain: Domain,
    pub field_name: String,
    pub condition: ValueCondition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub product: Option<Product>,
    /// Monday = 0 .. Sunday = 6, in UTC.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub day_of_week: Option<u8>,
}

impl Trigger {
    pub fn matches(&self, e: &ContextEvent) -> bool {
        if e.domain != self.domain || e.field_name != self.field_name {
            return false;
        }
        if self.product.is_some_and(|p| p != e.product) {
            return false;
        }
        if self
            .day_of_week
            .is_some_and(|d| crate::calendar::day_of_week(e.timestamp) != d as usize)
        {
            return false;
        }
        match &self.condition {
            ValueCondition::Any => true,
            ValueCondition::Equals { value } => e.field_value.as_text() == Some(value.as_str()),
            ValueCondition::Range { min, max } => e
                .field_value
                .as_number()
                .is_some_and(|x| x >= *min && x < *max),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayWindow {
    pub min_seconds: i64,
    pub max_seconds: i64,
}

impl DelayWindow {
    /// Number of integer delays strictly inside the window.
    pub fn interior_len(&self) -> i64 {
        (self.max_seconds - self.min_seconds - 1).max(0)
    }

    pub fn strictly_contains(&self, delay: i64) -> bool {
        delay > self.min_seconds && delay < self.max_seconds
    }
}

/// Synthetic causal link from a context pattern to a later intent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedRule {
    pub name: String,
    pub trigger: Trigger,
    pub effect_intent: String,
    pub delay_window: DelayWindow,
    pub fire_probability: f64,
}

impl PlantedRule {
    pub fn validate(&self) -> crate::Result<()> {
        let w = self.delay_window;
        if w.min_seconds < 0 || w.min_seconds > w.max_seconds {
            return Err(crate::Error::Config(format!(
                "rule {}: delay window must satisfy 0 <= min <= max",
                self.name
            )));
        }
        if w.interior_len() == 0 {
            return Err(crate::Error::Config(format!(
                "rule {}: delay window has no interior second",
                self.name
            )));
        }
        if !(0.0..=1.0).contains(&self.fire_probability) {
            return Err(crate::Error::Config(format!(
                "rule {}: fire_probability outside [0, 1]",
                self.name
            )));
        }
        Ok(())
    }
}

/// Twenty servicing intents used by the default synthetic vocabulary.
pub const DEFAULT_INTENTS: [&str; 20] = [
    "make_a_payment",
    "report_fraud",
    "cancel_zelle_payment",
    "redeem_rewards",
    "add_external_account",
    "enroll_into_paperless",
    "apply_contactless_card",
    "inquire_about_benefits",
    "cancel_balance_transfer",
    "update_birthday",
    "dispute_transaction",
    "lock_card",
    "update_address",
    "request_credit_limit_increase",
    "view_statement",
    "set_up_autopay",
    "add_travel_notice",
    "replace_card",
    "change_pin",
    "close_account",
];
