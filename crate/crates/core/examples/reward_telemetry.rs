//! Per-session rewards and their discounted sum.
use chrono::Utc;
use skillharness::evolution::{compute_reward, cumulative_reward, RewardConfig, RewardWeights};
use skillharness::skills::SkillMeta;

fn main() -> skillharness::Result<()> {
    let config = RewardConfig {
        weights: RewardWeights::new(0.5, 0.25, 0.25)?,
        gamma: 0.9,
        ..RewardConfig::default()
    };
    let mut records = Vec::new();
    for (i, (usage, success, profile, memory)) in [(1, 1, 400, 0), (4, 3, 120, 300), (10, 9, 0, 80)].into_iter().enumerate() {
        let meta = SkillMeta {
            usage_count: usage,
            success_count: success,
            created_at: Utc::now(),
            updated_at: Utc::now(),
        };
        let r = compute_reward(&format!("s{i}"), Some(&meta), profile, memory, &config);
        println!("{}: maturity {:.2} profile {:.2} memory {:.2} -> {:.3}", r.session_id, r.maturity_term, r.profile_term, r.memory_term, r.reward);
        records.push(r);
    }
    println!("cumulative (gamma {}) = {:.4}", config.gamma, cumulative_reward(&records, config.gamma));
    Ok(())
}
