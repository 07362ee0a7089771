//! One chat session with the mock providers, printing turn events.
use skillharness::runtime::{Harness, TurnEvent};
use skillharness::workspace::init_workspace;

fn main() -> skillharness::Result<()> {
    let dir = std::env::temp_dir().join(format!("skillharness-session-{}", std::process::id()));
    let mut ws = init_workspace(&dir, "demo")?;
    let harness = Harness::mock();
    let mut state = harness.open_session(&ws)?;

    for input in ["We sell cotton tote bags. Quote for 200 to Germany?", "what HS code applies?"] {
        println!("> {input}");
        let result = harness.run_turn(&mut ws, &mut state, input, &mut |event| match event {
            TurnEvent::MatchResult { skill: Some(s), stage, .. } => println!("  matched {s} ({stage:?})"),
            TurnEvent::Delta { text } => print!("{text}"),
            _ => {}
        })?;
        println!("\n  turn {} success={} tokens={}", result.turn, result.success, result.token_estimate);
    }
    let first = state.turns[0].turn_index;
    let outcome = harness.feedback(&mut ws, &mut state, first, true)?;
    println!("feedback on {}: usage {} success {}", outcome.skill, outcome.meta.usage_count, outcome.meta.success_count);
    println!("evolution {:?}", harness.end_session(&mut state)?);
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
