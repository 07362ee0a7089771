//! Long scripted session under a small context budget.
use skillharness::context::ContextBudget;
use skillharness::soak::{run_soak, soak_harness, SoakOptions};
use skillharness::workspace::init_workspace;

fn main() -> skillharness::Result<()> {
    let dir = std::env::temp_dir().join(format!("skillharness-soak-{}", std::process::id()));
    let mut ws = init_workspace(&dir, "soak")?;
    let options = SoakOptions {
        turns: 120,
        budget: ContextBudget::new(4096, 10)?,
        ..SoakOptions::default()
    };
    let report = run_soak(&mut ws, &soak_harness(&options)?, &options)?;
    println!(
        "{} turns, {} compressions (max level {}), {} errors",
        report.turns_completed,
        report.compressions,
        report.max_compression_level,
        report.errors.len()
    );
    for row in &report.maturity {
        println!("  {:<20} {:>3} uses {:>5.2} {:?}", row.skill, row.usage_count, row.success_rate, row.maturity);
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
