use serde::{Deserialize, Serialize};

use super::{
    DelayWindow, Domain, PlantedRule, Product, Timestamp, Trigger, ValueCondition,
    DEFAULT_INTENTS, SECONDS_PER_DAY,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldKind {
    /// Log-normal draw.
    Numeric { log_mean: f64, log_sd: f64 },
    Categorical { values: Vec<String> },
    /// Uniform draw from `cardinality` opaque codes `<prefix>_<n>`.
    Coded { prefix: String, cardinality: u32 },
    /// Enrollment status, driven by ownership changes rather than drawn.
    Status,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    /// Probability the field is observed on a given event.
    #[serde(default = "one")]
    pub presence: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain: Domain,
    /// Poisson arrival rate per user per day. For product enrollment this is
    /// the rate of ownership changes.
    pub rate_per_day: f64,
    pub fields: Vec<FieldSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub start_timestamp: Timestamp,
    pub span_days: f64,
    /// Probability each product is owned at the start.
    pub ownership_probability: f64,
    pub domains: Vec<DomainSpec>,
    pub intents: Vec<String>,
    /// Background intents per user per day, drawn uniformly over `intents`.
    pub noise_rate_per_day: f64,
    pub rules: Vec<PlantedRule>,
}

impl GeneratorConfig {
    pub fn end_timestamp(&self) -> Timestamp {
        self.start_timestamp + (self.span_days * SECONDS_PER_DAY as f64) as i64
    }

    pub fn domain(&self, d: Domain) -> Option<&DomainSpec> {
        self.domains.iter().find(|s| s.domain == d)
    }

    pub fn intent_index(&self, intent: &str) -> Option<usize> {
        self.intents.iter().position(|i| i == intent)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 {
            return Err(Error::Config("generator needs at least one user".into()));
        }
        if self.rules.is_empty() {
            return Err(Error::Config("generator needs at least one planted rule".into()));
        }
        if self.start_timestamp < 0 || !(self.span_days > 0.0) {
            return Err(Error::Config("time span must be positive and start >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ownership_probability) {
            return Err(Error::Config("ownership_probability outside [0, 1]".into()));
        }
        if self.intents.is_empty() {
            return Err(Error::Config("intent vocabulary is empty".into()));
        }
        if self.noise_rate_per_day < 0.0 {
            return Err(Error::Config("noise rate must be nonnegative".into()));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if self.domains[..i].iter().any(|o| o.domain == d.domain) {
                return Err(Error::Config(format!("domain {} listed twice", d.domain)));
            }
            if d.rate_per_day < 0.0 || d.fields.is_empty() {
                return Err(Error::Config(format!("domain {} needs fields and rate >= 0", d.domain)));
            }
            for f in &d.fields {
                if !(0.0..=1.0).contains(&f.presence) {
                    return Err(Error::Config(format!("{}/{} presence outside [0, 1]", d.domain, f.name)));
                }
                let bad = match &f.kind {
                    FieldKind::Categorical { values } => values.is_empty(),
                    FieldKind::Coded { cardinality, .. } => *cardinality == 0,
                    FieldKind::Numeric { log_sd, .. } => *log_sd < 0.0,
                    FieldKind::Status => d.domain != Domain::ProductEnrollment,
                };
                if bad {
                    return Err(Error::Config(format!("{}/{} has an invalid kind", d.domain, f.name)));
                }
            }
        }
        for r in &self.rules {
            r.validate()?;
            if self.intent_index(&r.effect_intent).is_none() {
                return Err(Error::Config(format!(
                    "rule {} effect {} not in the intent vocabulary",
                    r.name, r.effect_intent
                )));
            }
            let spec = self.domain(r.trigger.domain).ok_or_else(|| {
                Error::Config(format!("rule {} triggers on unregistered domain {}", r.name, r.trigger.domain))
            })?;
            if !spec.fields.iter().any(|f| f.name == r.trigger.field_name) {
                return Err(Error::Config(format!(
                    "rule {} triggers on unknown field {}/{}",
                    r.name, r.trigger.domain, r.trigger.field_name
                )));
            }
            if r.trigger.day_of_week.is_some_and(|d| d > 6) {
                return Err(Error::Config(format!("rule {}: day_of_week must be 0..=6", r.name)));
            }
        }
        Ok(())
    }
}

fn numeric(name: &str, log_mean: f64, log_sd: f64) -> FieldSpec {
    FieldSpec {
        name: name.into(),
        kind: FieldKind::Numeric { log_mean, log_sd },
        presence: 1.0,
    }
}

fn categorical(name: &str, values: &[&str]) -> FieldSpec {
    FieldSpec {
        name: name.into(),
        kind: FieldKind::Categorical {
            values: values.iter().map(|s| s.to_string()).collect(),
        },
        presence: 1.0,
    }
}

fn coded(name: &str, prefix: &str, cardinality: u32, presence: f64) -> FieldSpec {
    FieldSpec {
        name: name.into(),
        kind: FieldKind::Coded {
            prefix: prefix.into(),
            cardinality,
        },
        presence,
    }
}

const HOUR: i64 = 3600;

fn rule(
    name: &str,
    trigger: Trigger,
    effect: &str,
    min_seconds: i64,
    max_seconds: i64,
) -> PlantedRule {
    PlantedRule {
        name: name.into(),
        trigger,
        effect_intent: effect.into(),
        delay_window: DelayWindow {
            min_seconds,
            max_seconds,
        },
        fire_probability: 0.9,
    }
}

fn trigger(domain: Domain, field: &str, condition: ValueCondition) -> Trigger {
    Trigger {
        domain,
        field_name: field.into(),
        condition,
        product: None,
        day_of_week: None,
    }
}

impl GeneratorConfig {
    /// The optional calendar rule: payments made on a Friday lead to a
    /// statement lookup. Not part of the default rule set.
    pub fn calendar_rule() -> PlantedRule {
        let mut t = trigger(Domain::Payments, "amount", ValueCondition::Any);
        t.day_of_week = Some(4);
        rule("friday_payment_statement", t, "view_statement", HOUR, 24 * HOUR)
    }
}

impl Default for GeneratorConfig {
    /// 200 users over 90 days with six planted rules at p = 0.9: a numeric
    /// threshold, two payment triggers that differ only in product, a
    /// field-presence trigger on a high-cardinality code that sits next to an
    /// inert code field of the same shape, a string-valued trigger and a
    /// domain-level trigger.
    fn default() -> Self {
        let domains = vec![
            DomainSpec {
                domain: Domain::Transactions,
                rate_per_day: 0.5,
                fields: vec![
                    numeric("amount", 3.5, 1.0),
                    categorical(
                        "merchant",
                        &["grocery", "fuel", "dining", "travel", "online", "utilities", "pharmacy", "entertainment"],
                    ),
                ],
            },
            DomainSpec {
                domain: Domain::Payments,
                rate_per_day: 0.15,
                fields: vec![numeric("amount", 6.0, 0.6), categorical("method", &["ach", "check", "debit", "wire"])],
            },
            DomainSpec {
                domain: Domain::Rewards,
                rate_per_day: 0.12,
                fields: vec![
                    numeric("points", 7.0, 0.8),
                    categorical("activity", &["earn", "redeem", "transfer"]),
                    coded("offer_code", "offer", 1000, 0.4),
                    coded("partner_id", "partner", 1000, 0.4),
                ],
            },
            DomainSpec {
                domain: Domain::OutboundMessages,
                rate_per_day: 0.12,
                fields: vec![categorical("channel", &["email", "sms", "push"]), coded("template_id", "tmpl", 1000, 1.0)],
            },
            DomainSpec {
                domain: Domain::ProductEnrollment,
                rate_per_day: 0.02,
                fields: vec![
                    FieldSpec {
                        name: "status".into(),
                        kind: FieldKind::Status,
                        presence: 1.0,
                    },
                    categorical("tier", &["standard", "preferred"]),
                ],
            },
        ];

        let card_payment = |product| {
            let mut t = trigger(Domain::Payments, "amount", ValueCondition::Any);
            t.product = Some(product);
            t
        };

        let rules = vec![
            rule(
                "large_transaction_fraud",
                trigger(
                    Domain::Transactions,
                    "amount",
                    ValueCondition::Range {
                        min: 120.0,
                        max: f64::MAX,
                    },
                ),
                "report_fraud",
                HOUR,
                36 * HOUR,
            ),
            rule("card_a_payment_autopay", card_payment(Product::CardA), "set_up_autopay", HOUR, 36 * HOUR),
            rule("card_b_payment_transfer", card_payment(Product::CardB), "cancel_balance_transfer", HOUR, 36 * HOUR),
            rule(
                "offer_code_redemption",
                trigger(Domain::Rewards, "offer_code", ValueCondition::Any),
                "redeem_rewards",
                HOUR,
                36 * HOUR,
            ),
            rule(
                "travel_purchase_notice",
                trigger(
                    Domain::Transactions,
                    "merchant",
                    ValueCondition::Equals {
                        value: "travel".into(),
                    },
                ),
                "add_travel_notice",
                HOUR,
                36 * HOUR,
            ),
            rule(
                "message_benefits_inquiry",
                trigger(Domain::OutboundMessages, "channel", ValueCondition::Any),
                "inquire_about_benefits",
                HOUR,
                48 * HOUR,
            ),
        ];

        GeneratorConfig {
            n_users: 200,
            // 2024-01-01T00:00:00Z
            start_timestamp: 1_704_067_200,
            span_days: 90.0,
            ownership_probability: 0.6,
            domains,
            intents: DEFAULT_INTENTS.iter().map(|s| s.to_string()).collect(),
            noise_rate_per_day: 0.1,
            rules,
        }
    }
}
