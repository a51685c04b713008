//! `events.jsonl`, `intents.jsonl` and `rules.json`.

use std::path::Path;

use super::{ContextEvent, IntentRecord, PlantedRule};
use crate::error::Result;
use crate::io::{read_json, read_jsonl, write_json, write_jsonl};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const INTENTS_FILE: &str = "intents.jsonl";
pub const RULES_FILE: &str = "rules.json";

pub fn write_dataset(
    dir: &Path,
    events: &[ContextEvent],
    intents: &[IntentRecord],
    rules: &[PlantedRule],
) -> Result<()> {
    write_jsonl(&dir.join(EVENTS_FILE), events)?;
    write_jsonl(&dir.join(INTENTS_FILE), intents)?;
    write_json(&dir.join(RULES_FILE), &rules)
}

pub fn read_events(dir: &Path) -> Result<Vec<ContextEvent>> {
    read_jsonl(&dir.join(EVENTS_FILE))
}

pub fn read_intents(dir: &Path) -> Result<Vec<IntentRecord>> {
    read_jsonl(&dir.join(INTENTS_FILE))
}

pub fn read_rules(dir: &Path) -> Result<Vec<PlantedRule>> {
    read_json(&dir.join(RULES_FILE))
}
