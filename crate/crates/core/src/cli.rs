//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! error, 3 verification failure (soak errors, replay divergences).

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::{Config, ProviderKind};
use crate::context::ContextBudget;
use crate::error::{Error, Result};
use crate::evolution::{run_evolution, EvolutionConfig, EvolutionRun};
use crate::fsio::os_fs;
use crate::replay::replay_file;
use crate::runtime::{EvolutionMode, Harness, SessionPhase, TurnEvent};
use crate::skills::{parse_skill, SkillStore, REFERENCES_DIR};
use crate::soak::{run_soak, soak_harness, SoakOptions, SoakReport};
use crate::workspace::{init_workspace, Workspace};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "skillharness", version, about = "Self-evolving agent harness")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Workspace owner.
    #[arg(long, global = true, default_value = "default")]
    pub user: String,
    /// Line-delimited JSON output.
    #[arg(long, global = true)]
    pub json: bool,
    #[arg(long, global = true, value_parser = parse_provider)]
    pub provider: Option<ProviderKind>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_provider(raw: &str) -> std::result::Result<ProviderKind, String> {
    raw.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Interactive session. `/end` closes it, `/feedback +|-` rates the last turn.
    Chat,
    #[command(subcommand)]
    Skills(SkillsCommand),
    #[command(subcommand)]
    Memory(MemoryCommand),
    /// Run the offline review for an ended session.
    Evolve { session_id: String },
    /// Verify a session log.
    Replay { log: PathBuf },
    /// Drive a long synthetic session with the mock provider.
    Soak {
        #[arg(long, default_value_t = 420)]
        turns: usize,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Scripted mock replies; unscripted calls fall back to synthetic ones.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Host the HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum SkillsCommand {
    List,
    Show { name: String },
    /// Install a skill directory containing SKILL.md.
    Add { dir: PathBuf },
    Rm { name: String },
}

#[derive(Debug, Subcommand)]
pub enum MemoryCommand {
    Show,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = if code == EXIT_OK {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&cli, input, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if matches!(e, Error::Config(_) | Error::InvalidUserId(_)) {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut config = Config::load(cli.config.as_deref())?;
    if let Some(kind) = cli.provider {
        config.provider.kind = kind;
    }
    Ok(config)
}

fn workspace(config: &Config, user: &str) -> Result<Workspace> {
    init_workspace(&config.data_root, user)
}

fn emit(out: &mut dyn Write, value: serde_json::Value) -> Result<()> {
    writeln!(out, "{value}").map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn execute(cli: &Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<i32> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::Chat => {
            let mut ws = workspace(&config, &cli.user)?;
            let harness = config.harness()?;
            chat(&harness, &mut ws, &config.evolution_config()?, input, out, cli.json)?;
            Ok(EXIT_OK)
        }
        Command::Skills(sub) => skills(&config, cli, sub, out),
        Command::Memory(MemoryCommand::Show) => {
            let ws = workspace(&config, &cli.user)?;
            if cli.json {
                emit(
                    out,
                    json!({"user_id": cli.user, "user": ws.user_profile()?, "memory": ws.memory()?}),
                )?;
            } else {
                say(out, ws.user_profile()?)?;
                say(out, ws.memory()?)?;
            }
            Ok(EXIT_OK)
        }
        Command::Evolve { session_id } => {
            let mut ws = workspace(&config, &cli.user)?;
            let (chat, embed) = config.providers();
            let run = run_evolution(
                &mut ws,
                session_id,
                chat.as_ref(),
                Some(embed.as_ref()),
                &config.evolution_config()?,
            )?;
            let value = match run {
                EvolutionRun::Applied(record) => json!({"status": "applied", "record": record}),
                EvolutionRun::AlreadyEvolved => json!({"status": "already_evolved", "session_id": session_id}),
            };
            if cli.json {
                emit(out, value)?;
            } else {
                say(out, serde_json::to_string_pretty(&value).unwrap_or_default())?;
            }
            Ok(EXIT_OK)
        }
        Command::Replay { log } => {
            let report = replay_file(log)?;
            if cli.json {
                emit(out, serde_json::to_value(&report).unwrap_or_default())?;
            } else {
                say(
                    out,
                    format!(
                        "records: {}  turns: {}  compressions: {}  ended: {}",
                        report.records, report.turns, report.compressions, report.ended
                    ),
                )?;
                for d in &report.divergences {
                    let turn = d.turn.map_or("end".to_string(), |t| t.to_string());
                    say(
                        out,
                        format!(
                            "divergence at turn {turn} (line {}): {} expected {} found {}",
                            d.line, d.field, d.expected, d.found
                        ),
                    )?;
                }
                say(out, if report.consistent() { "consistent" } else { "DIVERGED" })?;
            }
            Ok(if report.consistent() { EXIT_OK } else { EXIT_VERIFY })
        }
        Command::Soak {
            turns,
            budget,
            seed,
            transcript,
        } => {
            let budget = match budget {
                Some(max_tokens) => ContextBudget::new(*max_tokens, config.retain_recent)?,
                None => config.runtime_config().budget,
            };
            let options = SoakOptions {
                turns: *turns,
                budget,
                seed: *seed,
                transcript: transcript.clone(),
            };
            let mut ws = workspace(&config, &cli.user)?;
            let report = run_soak(&mut ws, &soak_harness(&options)?, &options)?;
            print_soak(out, &report, cli.json)?;
            Ok(if report.ok() { EXIT_OK } else { EXIT_VERIFY })
        }
        Command::Serve { bind } => {
            let mut config = config;
            if let Some(bind) = bind {
                config.bind_address = bind.clone();
            }
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::Config(e.to_string()))?;
            runtime.block_on(crate::service::serve(&config))?;
            Ok(EXIT_OK)
        }
    }
}

fn skills(config: &Config, cli: &Cli, sub: &SkillsCommand, out: &mut dyn Write) -> Result<i32> {
    let mut ws = workspace(config, &cli.user)?;
    match sub {
        SkillsCommand::List => {
            for skill in ws.skills.iter() {
                let m = &skill.meta;
                if cli.json {
                    emit(
                        out,
                        json!({
                            "name": skill.name.as_str(),
                            "maturity": m.maturity(),
                            "usage_count": m.usage_count,
                            "success_count": m.success_count,
                            "success_rate": m.success_rate(),
                            "description": skill.description,
                        }),
                    )?;
                } else {
                    say(
                        out,
                        format!(
                            "{:<24} {:<10} {:>4} uses {:>5.2} success  {}",
                            skill.name,
                            m.maturity().to_string(),
                            m.usage_count,
                            m.success_rate(),
                            skill.description
                        ),
                    )?;
                }
            }
        }
        SkillsCommand::Show { name } => {
            let skill = ws.skills.get(name).ok_or_else(|| Error::SkillNotFound(name.clone()))?;
            if cli.json {
                emit(out, serde_json::to_value(skill).unwrap_or_default())?;
            } else {
                say(out, crate::skills::render_skill(skill)?)?;
            }
        }
        SkillsCommand::Add { dir } => {
            let mut skill = parse_skill(os_fs().as_ref(), dir)?;
            let name = skill.name.to_string();
            if ws.skills.get(&name).is_some() {
                return Err(Error::MalformedSkill(format!("skill {name} already exists")));
            }
            skill.meta.usage_count = 0;
            skill.meta.success_count = 0;
            let target = SkillStore::skills_dir(ws.root()).join(&name).join(REFERENCES_DIR);
            for rel in skill.references.values() {
                let from = dir.join(rel);
                let to = target.join(from.file_name().unwrap_or_default());
                std::fs::create_dir_all(&target).map_err(|e| Error::io(&target, e))?;
                std::fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
            }
            ws.skills.save_skill(skill)?;
            say(out, if cli.json { json!({"added": name}).to_string() } else { format!("added {name}") })?;
        }
        SkillsCommand::Rm { name } => {
            ws.skills.delete_skill(name)?;
            say(out, if cli.json { json!({"removed": name}).to_string() } else { format!("removed {name}") })?;
        }
    }
    Ok(EXIT_OK)
}

fn print_soak(out: &mut dyn Write, report: &SoakReport, json_mode: bool) -> Result<()> {
    if json_mode {
        return emit(out, serde_json::to_value(report).unwrap_or_default());
    }
    say(out, format!("turns completed: {}/{}", report.turns_completed, report.turns_requested))?;
    say(out, format!("compressions: {}", report.compressions))?;
    say(out, format!("errors: {}", report.errors.len()))?;
    for e in &report.errors {
        say(out, format!("  turn {}: {}", e.turn, e.message))?;
    }
    if let (Some(first), Some(max)) = (report.token_estimates.first(), report.token_estimates.iter().max()) {
        say(out, format!("token estimate: first {first}, peak {max}, last {}", report.token_estimates.last().unwrap_or(first)))?;
    }
    if let Some(path) = &report.log_path {
        say(out, format!("session log: {}", path.display()))?;
    }
    if !report.maturity.is_empty() {
        say(out, "skill                    maturity   uses  success")?;
    }
    for row in &report.maturity {
        say(
            out,
            format!(
                "{:<24} {:<10} {:>4}  {:>7.2}",
                row.skill,
                row.maturity.to_string(),
                row.usage_count,
                row.success_rate
            ),
        )?;
    }
    Ok(())
}

/// One line per notable event; deltas are returned verbatim for inline printing.
pub fn render_event(event: &TurnEvent) -> Option<String> {
    match event {
        TurnEvent::MatchResult {
            stage: Some(stage),
            skill: Some(skill),
            confidence: Some(confidence),
            ..
        } => Some(format!("[skill: {skill} via {stage} {confidence:.2}]")),
        TurnEvent::MatchResult { .. } => None,
        TurnEvent::ToolStarted { name, .. } => Some(format!("[tool: {name}]")),
        TurnEvent::ToolFinished { name, ok: false, error, .. } => {
            Some(format!("[tool failed: {name}: {}]", error.as_deref().unwrap_or("")))
        }
        TurnEvent::ToolFinished { .. } => None,
        TurnEvent::Delta { text } => Some(text.clone()),
        TurnEvent::Compression { level, assets, tokens_before, tokens_after } => Some(format!(
            "[context compressed: level {level}, {assets} assets, {tokens_before} -> {tokens_after} tokens]"
        )),
        TurnEvent::TurnSummary { .. } => None,
        TurnEvent::Error { message } => Some(format!("[error: {message}]")),
    }
}

/// The chat REPL over arbitrary streams. In auto mode `/end` runs the
/// evolution pass inline.
pub fn chat(
    harness: &Harness,
    ws: &mut Workspace,
    evolution: &EvolutionConfig,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
    json_mode: bool,
) -> Result<()> {
    let mut state = harness.open_session(ws)?;
    if !json_mode {
        say(out, format!("session {} (/end to finish, /feedback + or - to rate the last turn)", state.session_id))?;
    }
    let mut last_turn: Option<u64> = None;
    let mut line = String::new();
    loop {
        line.clear();
        if !json_mode {
            write!(out, "> ").and_then(|_| out.flush()).ok();
        }
        if input.read_line(&mut line).map_err(|e| Error::io(Path::new("<stdin>"), e))? == 0 {
            break;
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if text == "/end" {
            break;
        }
        if let Some(rest) = text.strip_prefix("/feedback") {
            let positive = match rest.trim() {
                "+" => true,
                "-" => false,
                _ => {
                    say(out, "usage: /feedback + | /feedback -")?;
                    continue;
                }
            };
            let Some(turn_index) = last_turn else {
                say(out, "no turn to rate yet")?;
                continue;
            };
            match harness.feedback(ws, &mut state, turn_index, positive) {
                Ok(outcome) if json_mode => emit(out, json!({"type": "feedback", "outcome": outcome}))?,
                Ok(outcome) => say(
                    out,
                    format!("[feedback recorded for {}: success rate {:.2}]", outcome.skill, outcome.meta.success_rate()),
                )?,
                Err(e) => say(out, format!("[feedback rejected: {e}]"))?,
            }
            continue;
        }
        let mut sink = |event: TurnEvent| {
            if json_mode {
                let _ = writeln!(out, "{}", serde_json::to_string(&event).unwrap_or_default());
            } else if let Some(text) = render_event(&event) {
                if matches!(event, TurnEvent::Delta { .. }) {
                    let _ = write!(out, "{text} ");
                } else {
                    let _ = writeln!(out, "{text}");
                }
            }
        };
        let result = harness.run_turn(ws, &mut state, text, &mut sink)?;
        if !json_mode {
            say(out, "")?;
        }
        last_turn = Some(result.turn_index);
    }
    if state.phase == SessionPhase::Open {
        harness.end_session(&mut state)?;
        let mut status = "pending".to_string();
        if harness.config.evolution_mode == EvolutionMode::Auto {
            status = match run_evolution(ws, &state.session_id, harness.chat.as_ref(), Some(harness.embed.as_ref()), evolution) {
                Ok(_) => "evolved".into(),
                Err(Error::EvolutionDeferred(reason)) => format!("deferred ({reason})"),
                Err(e) => return Err(e),
            };
        }
        if json_mode {
            emit(out, json!({"type": "session_ended", "session_id": state.session_id, "evolution": status}))?;
        } else {
            say(out, format!("session {} ended; evolution {status}", state.session_id))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::MatchType;

    #[test]
    fn banner_format() {
        let event = TurnEvent::MatchResult {
            stage: Some(MatchType::Keyword),
            skill: Some("quotation".into()),
            confidence: Some(1.0),
            degraded: Vec::new(),
        };
        assert_eq!(render_event(&event).unwrap(), "[skill: quotation via keyword 1.00]");
    }

    fn run_cli<S: AsRef<str>>(args: &[S], stdin: &str) -> (i32, String, String) {
        let mut input = std::io::Cursor::new(stdin.as_bytes().to_vec());
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(args.iter().map(|a| a.as_ref().to_string()), &mut input, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    fn config_file(dir: &Path) -> String {
        let path = dir.join("c.toml");
        std::fs::write(&path, format!("data_root = {:?}\n", dir.join("data"))).unwrap();
        path.to_string_lossy().into_owned()
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run_cli(&["skillharness", "frobnicate"], "").0, EXIT_USAGE);
        assert_eq!(run_cli(&["skillharness", "--provider", "cloud", "chat"], "").0, EXIT_USAGE);
        assert_eq!(run_cli(&["skillharness", "--help"], "").0, EXIT_OK);
    }

    #[test]
    fn chat_feedback_and_end() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config_file(tmp.path());
        let (code, out, _) = run_cli(
            &["skillharness", "--config", &cfg, "--user", "bob", "chat"],
            "please send a quote for 200 lamps\n/feedback -\n/end\n",
        );
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("[skill: quotation via keyword 1.00]"), "{out}");
        assert!(out.contains("[feedback recorded for quotation: success rate 0.00]"), "{out}");
        assert!(out.contains("evolution evolved"), "{out}");
    }

    #[test]
    fn soak_then_replay() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config_file(tmp.path());
        let (code, out, _) = run_cli(
            &["skillharness", "--config", &cfg, "--json", "soak", "--turns", "30", "--budget", "4096"],
            "",
        );
        assert_eq!(code, EXIT_OK);
        let report: SoakReport = serde_json::from_str(out.trim()).unwrap();
        assert_eq!(report.turns_completed, 30);
        let log = report.log_path.unwrap();
        let (code, out, _) = run_cli(&["skillharness", "--json", "replay", log.to_str().unwrap()], "");
        assert_eq!(code, EXIT_OK, "{out}");

        let (code, out, _) = run_cli(&["skillharness", "--config", &cfg, "--json", "soak", "--turns", "0"], "");
        assert_eq!(code, EXIT_OK);
        let empty: SoakReport = serde_json::from_str(out.trim()).unwrap();
        assert_eq!(empty.turns_completed, 0);
    }

    #[test]
    fn skills_admin_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config_file(tmp.path());
        let src = tmp.path().join("incoterms");
        std::fs::create_dir_all(src.join("references")).unwrap();
        std::fs::write(
            src.join("SKILL.md"),
            "---\nname: incoterms\ndescription: Explain Incoterms 2020 rules.\ntriggers:\n- incoterm\n---\n1. Identify the rule.\n",
        )
        .unwrap();
        std::fs::write(src.join("references/rules.md"), "EXW FCA FOB").unwrap();
        let base = ["skillharness", "--config", cfg.as_str(), "--json"];
        let with = |extra: &[&str]| -> Vec<String> {
            base.iter().chain(extra).map(|s| s.to_string()).collect()
        };
        assert_eq!(run_cli(&with(&["skills", "add", src.to_str().unwrap()]), "").0, EXIT_OK);
        let (_, out, _) = run_cli(&with(&["skills", "list"]), "");
        assert_eq!(out.lines().count(), 5);
        assert!(out.contains("\"Budding\""));
        let (code, out, _) = run_cli(&with(&["skills", "show", "incoterms"]), "");
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("rules.md"));
        assert_eq!(run_cli(&with(&["skills", "rm", "incoterms"]), "").0, EXIT_OK);
        assert_eq!(run_cli(&with(&["skills", "show", "incoterms"]), "").0, EXIT_RUNTIME);
    }
}
