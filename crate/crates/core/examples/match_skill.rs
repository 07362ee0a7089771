//! Runs the three matching stages against the built-in skills.
use skillharness::matcher::{match_skill, EmbeddingCache, MatcherConfig};
use skillharness::provider::{MockChatProvider, MockEmbeddingProvider};
use skillharness::workspace::init_workspace;

fn main() -> skillharness::Result<()> {
    let dir = std::env::temp_dir().join(format!("skillharness-match-{}", std::process::id()));
    let ws = init_workspace(&dir, "demo")?;
    let embed = MockEmbeddingProvider::new(64);
    let chat = MockChatProvider::synthetic();
    let cache = EmbeddingCache::in_memory();

    for input in [
        "Can you give me a quote for 500 solar lamps?",
        "Demand, competitors, certification requirements and channels in Chile",
        "good morning",
    ] {
        let outcome = match_skill(input, &ws.skills, &MatcherConfig::default(), &cache, &embed, &chat);
        match outcome.result {
            Some(r) => println!("{input:?} -> {} via {} ({:.2})", r.skill_name, r.match_type, r.confidence),
            None => println!("{input:?} -> no skill"),
        }
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
