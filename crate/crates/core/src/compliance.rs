//! Pre-execution rule engine. Rules block actions; the fallback utterance
//! can never be blocked, so every mask is non-empty.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::dialogue::{ActionCatalog, ActionMask, DialogueState, Utterance};
use crate::error::{Error, Result};

/// On-disk rule. Every present filter must match for the rule to fire;
/// a rule with no filters matches everything.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplianceRule {
    pub rule_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intents: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_min: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_max: Option<u32>,
}

/// Case-insensitive text matcher: a literal substring, or, when the
/// pattern contains `*`, a glob anchored at both ends.
#[derive(Debug, Clone, PartialEq, Eq)]
enum TextPattern {
    Substring(String),
    Anchored(Vec<String>),
}

impl TextPattern {
    fn parse(pattern: &str) -> Result<Self> {
        if pattern.is_empty() {
            return Err(Error::config("pattern", "empty pattern"));
        }
        let lower = pattern.to_lowercase();
        if lower.contains('*') {
            Ok(TextPattern::Anchored(lower.split('*').map(str::to_owned).collect()))
        } else {
            Ok(TextPattern::Substring(lower))
        }
    }

    fn matches(&self, text: &str) -> bool {
        let text = text.to_lowercase();
        match self {
            TextPattern::Substring(s) => text.contains(s.as_str()),
            TextPattern::Anchored(parts) => {
                let (first, rest) = parts.split_first().expect("split yields at least one part");
                let Some(mut remaining) = text.strip_prefix(first.as_str()) else {
                    return false;
                };
                let (last, middle) = rest.split_last().expect("anchored pattern has a `*`");
                for part in middle {
                    match remaining.find(part.as_str()) {
                        Some(pos) => remaining = &remaining[pos + part.len()..],
                        None => return false,
                    }
                }
                remaining.ends_with(last.as_str())
            }
        }
    }
}

#[derive(Debug, Clone)]
struct CompiledRule {
    rule: ComplianceRule,
    pattern: Option<TextPattern>,
}

impl CompiledRule {
    fn matches_utterance(&self, action: &Utterance) -> bool {
        if let Some(p) = &self.pattern {
            if !p.matches(&action.text) {
                return false;
            }
        }
        if let Some(intents) = &self.rule.intents {
            if !intents.contains(&action.intent_tag) {
                return false;
            }
        }
        true
    }

    fn matches_context(&self, state: &DialogueState) -> bool {
        if let Some(segments) = &self.rule.segments {
            if !segments.contains(&state.segment_id) {
                return false;
            }
        }
        if self.rule.turn_min.is_some_and(|m| state.turn < m) {
            return false;
        }
        if self.rule.turn_max.is_some_and(|m| state.turn > m) {
            return false;
        }
        true
    }
}

/// Immutable, validated rule list. Declaration order is evaluation order.
#[derive(Debug, Clone, Default)]
pub struct RuleSet {
    rules: Vec<CompiledRule>,
}

impl RuleSet {
    pub fn new(rules: Vec<ComplianceRule>) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut compiled = Vec::with_capacity(rules.len());
        for (i, rule) in rules.into_iter().enumerate() {
            let field = format!("rules[{i}]");
            if rule.rule_id.is_empty() {
                return Err(Error::config(&field, "rule_id is empty"));
            }
            if !ids.insert(rule.rule_id.clone()) {
                return Err(Error::config(&field, format!("duplicate rule_id `{}`", rule.rule_id)));
            }
            if let (Some(lo), Some(hi)) = (rule.turn_min, rule.turn_max) {
                if lo > hi {
                    return Err(Error::config(&field, format!("turn_min {lo} > turn_max {hi}")));
                }
            }
            let pattern = rule
                .pattern
                .as_deref()
                .map(TextPattern::parse)
                .transpose()
                .map_err(|_| Error::config(format!("{field}.pattern"), "empty pattern"))?;
            compiled.push(CompiledRule { rule, pattern });
        }
        Ok(Self { rules: compiled })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Self::new(serde_json::from_str(json)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Log a warning for each rule that would match the catalog's fallback;
    /// such rules never apply to it.
    pub fn warn_on_fallback(&self, catalog: &ActionCatalog) -> Vec<String> {
        let fallback = catalog.fallback();
        let hits: Vec<String> = self
            .rules
            .iter()
            .filter(|r| r.matches_utterance(fallback))
            .map(|r| r.rule.rule_id.clone())
            .collect();
        for id in &hits {
            log::warn!("rule `{id}` matches the fallback utterance `{}`; it will be ignored for that action", fallback.id);
        }
        hits
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> impl Iterator<Item = &ComplianceRule> {
        self.rules.iter().map(|r| &r.rule)
    }

    pub fn with_rule(&self, rule: ComplianceRule) -> Result<Self> {
        let mut rules: Vec<ComplianceRule> = self.rules().cloned().collect();
        rules.push(rule);
        Self::new(rules)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplianceVerdict {
    pub allowed: bool,
    pub blocking_rule: Option<String>,
}

impl ComplianceVerdict {
    pub fn allowed() -> Self {
        Self {
            allowed: true,
            blocking_rule: None,
        }
    }

    pub fn blocked(rule_id: impl Into<String>) -> Self {
        Self {
            allowed: false,
            blocking_rule: Some(rule_id.into()),
        }
    }
}

/// First matching rule in declaration order wins. The fallback utterance is
/// always allowed.
pub fn check(action: &Utterance, state: &DialogueState, rules: &RuleSet) -> ComplianceVerdict {
    if action.is_fallback {
        return ComplianceVerdict::allowed();
    }
    rules
        .rules
        .iter()
        .find(|r| r.matches_context(state) && r.matches_utterance(action))
        .map(|r| ComplianceVerdict::blocked(r.rule.rule_id.clone()))
        .unwrap_or_else(ComplianceVerdict::allowed)
}

/// Indices passing [`check`], always including the fallback.
pub fn mask_actions(catalog: &ActionCatalog, state: &DialogueState, rules: &RuleSet) -> ActionMask {
    let mut mask = ActionMask::from_indices(
        catalog.len(),
        catalog
            .iter()
            .enumerate()
            .filter(|(_, u)| check(u, state, rules).allowed)
            .map(|(i, _)| i),
    );
    mask.set(catalog.fallback_index(), true);
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionOrigin {
    /// Chosen by a policy in this toolkit.
    Agent,
    /// Submitted by an outside caller.
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub timestamp: u64,
    pub rule_id: String,
    pub action_id: String,
    pub state_digest: String,
    pub origin: ActionOrigin,
}

/// Append-only record of block events; optionally mirrored to a JSON-lines
/// file.
#[derive(Debug, Default)]
pub struct AuditLog {
    events: Mutex<Vec<AuditEvent>>,
    path: Option<PathBuf>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: impl Into<PathBuf>) -> Self {
        Self {
            events: Mutex::default(),
            path: Some(path.into()),
        }
    }

    pub fn record(&self, event: AuditEvent) -> Result<()> {
        if let Some(path) = &self.path {
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let mut line = serde_json::to_string(&event)?;
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        self.events.lock().expect("audit log poisoned").push(event);
        Ok(())
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.events.lock().expect("audit log poisoned").clone()
    }

    pub fn agent_blocks(&self) -> usize {
        self.events
            .lock()
            .expect("audit log poisoned")
            .iter()
            .filter(|e| e.origin == ActionOrigin::Agent)
            .count()
    }
}

/// Result of passing an action through the gate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Enforcement {
    /// Index actually executed: the requested one, or the fallback.
    pub executed: usize,
    pub verdict: ComplianceVerdict,
}

/// Catalog-bound rule set with an audit trail. Cheap to clone.
#[derive(Debug, Clone)]
pub struct ComplianceGate {
    catalog: Arc<ActionCatalog>,
    rules: Arc<RuleSet>,
    audit: Arc<AuditLog>,
}

impl ComplianceGate {
    pub fn new(catalog: Arc<ActionCatalog>, rules: Arc<RuleSet>) -> Self {
        Self::with_audit(catalog, rules, Arc::new(AuditLog::in_memory()))
    }

    pub fn with_audit(catalog: Arc<ActionCatalog>, rules: Arc<RuleSet>, audit: Arc<AuditLog>) -> Self {
        rules.warn_on_fallback(&catalog);
        Self { catalog, rules, audit }
    }

    pub fn catalog(&self) -> &ActionCatalog {
        &self.catalog
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn check(&self, action: usize, state: &DialogueState) -> ComplianceVerdict {
        match self.catalog.get(action) {
            Some(u) => check(u, state, &self.rules),
            None => ComplianceVerdict::blocked("unknown-action"),
        }
    }

    pub fn mask(&self, state: &DialogueState) -> ActionMask {
        mask_actions(&self.catalog, state, &self.rules)
    }

    /// Check an action right before execution. Blocked actions are logged
    /// and replaced by the fallback.
    pub fn enforce(&self, action: usize, state: &DialogueState, origin: ActionOrigin) -> Result<Enforcement> {
        let verdict = self.check(action, state);
        if verdict.allowed {
            return Ok(Enforcement {
                executed: action,
                verdict,
            });
        }
        let rule_id = verdict.blocking_rule.clone().unwrap_or_default();
        self.audit.record(AuditEvent {
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            rule_id,
            action_id: self
                .catalog
                .get(action)
                .map(|u| u.id.clone())
                .unwrap_or_else(|| action.to_string()),
            state_digest: format!("{:016x}", state.digest()),
            origin,
        })?;
        Ok(Enforcement {
            executed: self.catalog.fallback_index(),
            verdict,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utterance(id: &str, text: &str, intent: &str, fallback: bool) -> Utterance {
        Utterance {
            id: id.into(),
            text: text.into(),
            intent_tag: intent.into(),
            is_fallback: fallback,
        }
    }

    fn catalog() -> ActionCatalog {
        ActionCatalog::new(vec![
            utterance("hello", "Hello there", "greet", false),
            utterance("invest", "Enjoy guaranteed returns on this fund", "pitch", false),
            utterance("bundle", "The bundle is great value", "pitch", false),
            utterance("fb", "Anything else I can help with?", "fallback", true),
        ])
        .unwrap()
    }

    fn state(turn: u32) -> DialogueState {
        let mut s = DialogueState::new("retail", "p", 5);
        s.turn = turn;
        s
    }

    fn rule(id: &str) -> ComplianceRule {
        ComplianceRule {
            rule_id: id.into(),
            pattern: None,
            intents: None,
            segments: None,
            turn_min: None,
            turn_max: None,
        }
    }

    #[test]
    fn banned_phrase_blocks() {
        let c = catalog();
        let rules = RuleSet::new(vec![ComplianceRule {
            pattern: Some("guaranteed returns".into()),
            ..rule("no-guarantees")
        }])
        .unwrap();
        let v = check(c.get(1).unwrap(), &state(0), &rules);
        assert_eq!(v, ComplianceVerdict::blocked("no-guarantees"));
        assert!(check(c.get(0).unwrap(), &state(0), &rules).allowed);
    }

    #[test]
    fn empty_rules_allow_everything() {
        let c = catalog();
        let rules = RuleSet::empty();
        for u in c.iter() {
            assert!(check(u, &state(0), &rules).allowed);
        }
        assert_eq!(mask_actions(&c, &state(0), &rules), ActionMask::all(4));
    }

    #[test]
    fn fallback_survives_match_everything_rule() {
        let c = catalog();
        let rules = RuleSet::new(vec![rule("block-all")]).unwrap();
        assert_eq!(rules.warn_on_fallback(&c), vec!["block-all".to_string()]);
        assert!(check(c.fallback(), &state(0), &rules).allowed);
        let m = mask_actions(&c, &state(0), &rules);
        assert_eq!(m.indices().collect::<Vec<_>>(), vec![3]);
    }

    #[test]
    fn turn_ranged_intent_rule() {
        let c = catalog();
        let rules = RuleSet::new(vec![ComplianceRule {
            intents: Some(vec!["pitch".into()]),
            turn_max: Some(0),
            ..rule("no-cold-pitch")
        }])
        .unwrap();
        let m0 = mask_actions(&c, &state(0), &rules);
        let m1 = mask_actions(&c, &state(1), &rules);
        assert_eq!(m0.indices().collect::<Vec<_>>(), vec![0, 3]);
        assert_eq!(m1.indices().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn first_match_wins() {
        let c = catalog();
        let rules = RuleSet::new(vec![
            ComplianceRule {
                intents: Some(vec!["pitch".into()]),
                ..rule("first")
            },
            ComplianceRule {
                pattern: Some("guaranteed".into()),
                ..rule("second")
            },
        ])
        .unwrap();
        assert_eq!(check(c.get(1).unwrap(), &state(2), &rules).blocking_rule.as_deref(), Some("first"));
    }

    #[test]
    fn anchored_wildcards() {
        let p = TextPattern::parse("enjoy*fund").unwrap();
        assert!(p.matches("Enjoy guaranteed returns on this fund"));
        assert!(!p.matches("You will enjoy this fund today"));
        let p = TextPattern::parse("*fund").unwrap();
        assert!(p.matches("a fund"));
        assert!(!p.matches("fund me"));
        let p = TextPattern::parse("a*b*c").unwrap();
        assert!(p.matches("axxbyyc"));
        assert!(!p.matches("axxcyyb"));
        assert!(p.matches("abc"));
        let p = TextPattern::parse("ab*ba").unwrap();
        assert!(!p.matches("aba"));
        assert!(TextPattern::parse("").is_err());
    }

    #[test]
    fn segment_filter() {
        let c = catalog();
        let rules = RuleSet::new(vec![ComplianceRule {
            segments: Some(vec!["wholesale".into()]),
            intents: Some(vec!["greet".into()]),
            ..rule("no-greet-wholesale")
        }])
        .unwrap();
        assert!(check(c.get(0).unwrap(), &state(0), &rules).allowed);
        let mut s = state(0);
        s.segment_id = "wholesale".into();
        assert!(!check(c.get(0).unwrap(), &s, &rules).allowed);
    }

    #[test]
    fn invalid_rule_sets() {
        assert!(RuleSet::new(vec![rule("a"), rule("a")]).is_err());
        assert!(RuleSet::new(vec![ComplianceRule {
            turn_min: Some(3),
            turn_max: Some(1),
            ..rule("a")
        }])
        .is_err());
        assert!(RuleSet::from_json(r#"[{"rule_id": "x", "regex": ".*"}]"#).is_err());
    }

    #[test]
    fn enforce_substitutes_fallback_and_audits() {
        let c = Arc::new(catalog());
        let rules = Arc::new(
            RuleSet::new(vec![ComplianceRule {
                pattern: Some("guaranteed".into()),
                ..rule("no-guarantees")
            }])
            .unwrap(),
        );
        let gate = ComplianceGate::new(c, rules);
        let ok = gate.enforce(0, &state(0), ActionOrigin::Agent).unwrap();
        assert_eq!(ok.executed, 0);
        let blocked = gate.enforce(1, &state(0), ActionOrigin::External).unwrap();
        assert_eq!(blocked.executed, 3);
        let events = gate.audit().events();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].action_id, "invest");
        assert_eq!(gate.audit().agent_blocks(), 0);
    }

    #[test]
    fn audit_file_is_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        let log = AuditLog::to_file(&path);
        for i in 0..2 {
            log.record(AuditEvent {
                timestamp: i,
                rule_id: "r".into(),
                action_id: "a".into(),
                state_digest: "00".into(),
                origin: ActionOrigin::External,
            })
            .unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let e: AuditEvent = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(e.rule_id, "r");
    }
}
