//! Long-session soak runs: a seeded script of synthetic trade requests
//! driven through one session with the mock provider.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{extract_asset_index, AssetKind, ContextBudget};
use crate::error::Result;
use crate::provider::{ChatProvider, MockChatProvider, MockEmbeddingProvider, MockTranscript, SyntheticChat};
use crate::runtime::{Harness, RuntimeConfig, SessionState};
use crate::skills::MaturityLevel;
use crate::workspace::Workspace;

const PRODUCTS: &[&str] = &[
    "solar inverters",
    "LED panel lights",
    "stainless steel cookware",
    "bamboo cutting boards",
    "cotton t-shirts",
    "lithium battery packs",
    "ceramic floor tiles",
    "PVC garden hoses",
];

const MARKETS: &[&str] = &[
    "Germany",
    "Brazil",
    "Saudi Arabia",
    "Vietnam",
    "Kenya",
    "Mexico",
    "Poland",
    "Australia",
];

/// `{p}` is the product, `{m}` the market, `{q}` a quantity.
const SCENARIOS: &[&str] = &[
    "Please prepare a quotation for {q} units of {p} shipped to {m}, FOB Ningbo, payment 30% deposit.",
    "What is the HS code for {p}? The buyer in {m} asks for the customs classification before ordering {q} units.",
    "Do a market research on {p} in {m}: demand, competitors and certifications for a first order of {q} units.",
    "Draft a follow-up email to the buyer in {m} who went quiet after our offer on {q} units of {p}.",
    "Compare sea and air freight for {q} units of {p} to {m} and list the documents we need.",
    "The buyer in {m} wants a sample of {p} before confirming {q} units; how should we handle sample costs?",
];

const CONTEXT_NOTE: &str = " Background: our factory has produced this line for eight years, \
holds ISO 9001, and usually ships within 25 days of deposit; the buyer compared us with two \
other suppliers last month and cares most about consistent quality and clear paperwork.";

/// Deterministic request generator over the product x market x scenario grid.
#[derive(Debug, Clone)]
pub struct SoakScript {
    rng: ChaCha8Rng,
}

impl SoakScript {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_turn(&mut self) -> String {
        let product = PRODUCTS.choose(&mut self.rng).expect("non-empty");
        let market = MARKETS.choose(&mut self.rng).expect("non-empty");
        let scenario = SCENARIOS.choose(&mut self.rng).expect("non-empty");
        let quantity = self.rng.gen_range(1..=50) * 100;
        let mut text = scenario
            .replace("{p}", product)
            .replace("{m}", market)
            .replace("{q}", &quantity.to_string());
        text.push_str(CONTEXT_NOTE);
        text
    }
}

impl Iterator for SoakScript {
    type Item = String;

    fn next(&mut self) -> Option<String> {
        Some(self.next_turn())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoakOptions {
    pub turns: usize,
    pub budget: ContextBudget,
    pub seed: u64,
    pub transcript: Option<PathBuf>,
}

impl Default for SoakOptions {
    fn default() -> Self {
        Self {
            turns: 420,
            budget: ContextBudget::default(),
            seed: 7,
            transcript: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoakError {
    pub turn: u32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaturityRow {
    pub skill: String,
    pub usage_count: u64,
    pub success_count: u64,
    pub success_rate: f64,
    pub maturity: MaturityLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoakReport {
    pub session_id: Option<String>,
    pub log_path: Option<PathBuf>,
    pub turns_requested: usize,
    pub turns_completed: usize,
    pub compressions: usize,
    pub max_compression_level: u32,
    pub errors: Vec<SoakError>,
    pub token_estimates: Vec<usize>,
    pub maturity: Vec<MaturityRow>,
    /// Skills loaded during the first 20 turns.
    pub early_skill_references: Vec<String>,
    /// Early skill references still recoverable from the final history.
    pub retained_skill_references: Vec<String>,
}

impl SoakReport {
    pub fn ok(&self) -> bool {
        self.errors.is_empty() && self.turns_completed == self.turns_requested
    }
}

const EARLY_TURNS: u32 = 20;

fn maturity_table(ws: &Workspace) -> Vec<MaturityRow> {
    ws.skills
        .iter()
        .map(|s| MaturityRow {
            skill: s.name.to_string(),
            usage_count: s.meta.usage_count,
            success_count: s.meta.success_count,
            success_rate: s.meta.success_rate(),
            maturity: s.meta.maturity(),
        })
        .collect()
}

/// The offline harness a soak run uses: synthetic chat (or a scripted
/// transcript with synthetic fallback) and hashed embeddings.
pub fn soak_harness(options: &SoakOptions) -> Result<Harness> {
    let chat: Arc<dyn ChatProvider> = match &options.transcript {
        Some(path) => {
            let transcript = MockTranscript::from_file(path)?;
            Arc::new(
                MockChatProvider::from_transcript(&transcript)
                    .with_fallback(SyntheticChat::default())
                    .without_request_log(),
            )
        }
        None => Arc::new(MockChatProvider::synthetic().without_request_log()),
    };
    let config = RuntimeConfig {
        budget: options.budget,
        ..RuntimeConfig::default()
    };
    Ok(Harness::new(chat, Arc::new(MockEmbeddingProvider::new(64))).with_config(config))
}

/// Runs `options.turns` sequential turns in one session, then ends it.
/// Turn failures are collected in the report rather than aborting the run.
pub fn run_soak(ws: &mut Workspace, harness: &Harness, options: &SoakOptions) -> Result<SoakReport> {
    let mut report = SoakReport {
        session_id: None,
        log_path: None,
        turns_requested: options.turns,
        turns_completed: 0,
        compressions: 0,
        max_compression_level: 0,
        errors: Vec::new(),
        token_estimates: Vec::new(),
        maturity: Vec::new(),
        early_skill_references: Vec::new(),
        retained_skill_references: Vec::new(),
    };
    if options.turns == 0 {
        return Ok(report);
    }
    let mut state: SessionState = harness.open_session(ws)?;
    report.session_id = Some(state.session_id.clone());
    report.log_path = state.log.as_ref().map(|l| l.path().to_path_buf());
    let mut early = BTreeSet::new();
    for (i, input) in SoakScript::new(options.seed).take(options.turns).enumerate() {
        let turn = i as u32 + 1;
        match harness.run_turn(ws, &mut state, &input, &mut |_| {}) {
            Ok(result) => {
                report.turns_completed += 1;
                report.token_estimates.push(result.token_estimate);
                if let Some(c) = &result.compression {
                    report.compressions += 1;
                    report.max_compression_level = c.level;
                }
                if turn <= EARLY_TURNS {
                    if let Some(skill) = &result.skill_used {
                        early.insert(skill.clone());
                    }
                }
                let mut problems: Vec<String> = result
                    .tool_errors
                    .iter()
                    .map(|e| format!("{}: {}", e.tool, e.error))
                    .collect();
                problems.extend(result.provider_error.clone());
                problems.extend(result.compression_error.clone());
                for message in problems {
                    report.errors.push(SoakError { turn, message });
                }
            }
            Err(e) => report.errors.push(SoakError {
                turn,
                message: e.to_string(),
            }),
        }
    }
    harness.end_session(&mut state)?;

    let retained: BTreeSet<String> = extract_asset_index(&state.history)
        .into_iter()
        .filter(|a| a.kind == AssetKind::SkillReference)
        .map(|a| a.value)
        .collect();
    report.retained_skill_references = early.iter().filter(|s| retained.contains(*s)).cloned().collect();
    report.early_skill_references = early.into_iter().collect();
    report.maturity = maturity_table(ws);
    Ok(report)
}
