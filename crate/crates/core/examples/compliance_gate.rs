//! Show which catalog actions the bundled rules block at the opening turn,
//! then push a blocked action through the gate and read the audit trail.

use std::sync::Arc;

use talktrack::compliance::{ActionOrigin, AuditLog};
use talktrack::world::toyshop;

fn main() -> talktrack::Result<()> {
    let audit = Arc::new(AuditLog::in_memory());
    let world = toyshop().with_audit(audit.clone());
    let state = world.scenario().reset("retail")?;

    println!("rules:");
    for rule in world.rules().rules() {
        println!("  {}", serde_json::to_string(rule)?);
    }
    println!("opening turn, retail segment:");
    let mut blocked = None;
    for (i, u) in world.catalog().iter().enumerate() {
        let verdict = world.gate().check(i, &state);
        println!(
            "  {:<18} {:<8} {}",
            u.id,
            u.intent_tag,
            verdict.blocking_rule.as_deref().map_or("allowed".to_owned(), |r| format!("blocked by {r}"))
        );
        if !verdict.allowed && blocked.is_none() {
            blocked = Some(i);
        }
    }

    if let Some(action) = blocked {
        let outcome = world.gate().enforce(action, &state, ActionOrigin::External)?;
        println!(
            "external request for {} executed {} instead",
            world.catalog().get(action).unwrap().id,
            world.catalog().get(outcome.executed).unwrap().id
        );
    }
    for event in audit.events() {
        println!("audit: {}", serde_json::to_string(&event)?);
    }
    println!("agent blocks: {}", audit.agent_blocks());
    Ok(())
}
