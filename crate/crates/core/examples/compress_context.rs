//! Compresses a long history into a structured checkpoint.
use skillharness::context::{compress_history, push_message, CharHeuristic, CompressionState, ContextBudget, TokenEstimator};
use skillharness::message::Message;
use skillharness::provider::MockChatProvider;

fn main() -> skillharness::Result<()> {
    let mut history = Vec::new();
    for i in 0..40 {
        push_message(&mut history, Message::user(format!("order {i}: 300 units at 4.{i} USD FOB, spec sheet at https://example.com/spec/{i}.pdf")));
        push_message(&mut history, Message::assistant("noted, ".repeat(60)));
    }
    let estimator = CharHeuristic;
    let budget = ContextBudget::new(2048, 4)?;
    let before = estimator.estimate(&history);
    let (compressed, state) = compress_history(
        &history,
        &CompressionState::default(),
        &budget,
        &MockChatProvider::synthetic(),
        &estimator,
    )?;
    println!("{} messages / {before} tokens -> {} messages / {} tokens", history.len(), compressed.len(), estimator.estimate(&compressed));
    println!("level {}, {} assets indexed", state.level, state.asset_index.len());
    println!("{}", compressed[0].content);
    Ok(())
}
