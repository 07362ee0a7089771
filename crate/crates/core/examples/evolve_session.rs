//! Ends a session and runs the offline review with the mock reviewer.
use skillharness::evolution::{run_evolution, EvolutionConfig, EvolutionRun};
use skillharness::provider::{MockChatProvider, MockEmbeddingProvider};
use skillharness::runtime::Harness;
use skillharness::workspace::init_workspace;

fn main() -> skillharness::Result<()> {
    let dir = std::env::temp_dir().join(format!("skillharness-evolve-{}", std::process::id()));
    let mut ws = init_workspace(&dir, "demo")?;
    let harness = Harness::mock();
    let mut state = harness.open_session(&ws)?;
    harness.run_turn(&mut ws, &mut state, "We sell solar lamps and our main market is Brazil.", &mut |_| {})?;
    harness.end_session(&mut state)?;

    let chat = MockChatProvider::synthetic();
    let embed = MockEmbeddingProvider::new(64);
    match run_evolution(&mut ws, &state.session_id, &chat, Some(&embed), &EvolutionConfig::default())? {
        EvolutionRun::Applied(record) => {
            println!("review: {}", record.review_text);
            for g in &record.gate {
                println!("candidate {} accepted={} {:?}", g.name, g.accepted, g.reason);
            }
            println!("reward {:.3}", record.reward.reward);
        }
        EvolutionRun::AlreadyEvolved => println!("already evolved"),
    }
    println!("{}", ws.user_profile()?);
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
