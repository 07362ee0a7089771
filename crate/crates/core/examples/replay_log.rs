//! Records a session log, replays it, then replays a tampered copy.
use skillharness::replay::replay_text;
use skillharness::runtime::Harness;
use skillharness::workspace::init_workspace;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("skillharness-replay-{}", std::process::id()));
    let mut ws = init_workspace(&dir, "demo")?;
    let harness = Harness::mock();
    let mut state = harness.open_session(&ws)?;
    for input in ["quote for 100 steel racks", "follow up with the buyer next week"] {
        harness.run_turn(&mut ws, &mut state, input, &mut |_| {})?;
    }
    harness.end_session(&mut state)?;
    let path = state.log.as_ref().expect("session log").path().to_path_buf();
    let log = std::fs::read_to_string(&path)?;

    let report = replay_text(&log)?;
    println!("{} records, {} turns, consistent={}", report.records, report.turns, report.consistent());

    let tampered = log.replacen("steel racks", "steel rack", 1);
    for d in replay_text(&tampered)?.divergences {
        println!("divergence at turn {:?} line {}: {}", d.turn, d.line, d.field);
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
