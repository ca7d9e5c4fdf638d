//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation or executability failure, 2 transport
//! or configuration error. Human-readable output goes to stdout; `--json`
//! prints the library's own serialized types instead.

use std::fs;
use std::io::{self, BufRead, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::{
    bundled_replay_scripts, bundled_scenarios, load_scenarios, render_report, run_suite, InstructionVariant,
    ReportFormat, SuiteConfig, SuiteReport,
};
use crate::env::{diff_environments, parse_environment, EnvDiff, Environment};
use crate::executor::GoalSpec;
use crate::feedback::{generate_feedback, validate_plan, Issue, LoopResult, Outcome, Planner, DEFAULT_MAX_ROUNDS};
use crate::llm::{BackendProvider, ChatBackend, HttpBackend, HttpConfig, InferenceParams, ScriptLibrary, ScriptedBackend, SharedBackend};
use crate::plan::{serialize_plan, Plan};
use crate::prompt::{load_prompt_set, PromptSet, DEFAULT_BUDGET};
use crate::session::{resolve_action_set, resolve_prompt_set, SessionManager, SessionStore, SessionSummary};

#[derive(Debug, Parser)]
#[command(name = "chatplan", version, about = "Plan robot tasks with a chat model and check every plan symbolically")]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan one instruction with automatic feedback.
    Plan(PlanArgs),
    /// Interactive session: instruct, give feedback, approve.
    Repl(ReplArgs),
    /// Check a stored plan against an environment.
    Validate(ValidateArgs),
    /// Run the scenario suite and print a success report.
    Bench(BenchArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// `http`, `http:<config.json>` or `script:<file>`.
    #[arg(long, default_value = "http")]
    pub backend: String,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Token budget for the whole conversation.
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    pub budget: usize,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub env: PathBuf,
    /// `lfo`, `virtualhome` or a definition file.
    #[arg(long, default_value = "lfo")]
    pub set: String,
    /// Prompt directory; defaults to the bundled prompts of the set.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub instruction: String,
    /// Goal file checked against the executed plan.
    #[arg(long)]
    pub goal: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_ROUNDS)]
    pub max_rounds: usize,
    /// Write the final plan JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct ReplArgs {
    #[arg(long)]
    pub env: PathBuf,
    #[arg(long, default_value = "lfo")]
    pub set: String,
    /// Bundled prompt set name or prompt directory; defaults to `--set`.
    #[arg(long)]
    pub prompts: Option<String>,
    #[arg(long, default_value = "sessions")]
    pub sessions_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_ROUNDS)]
    pub max_rounds: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub env: PathBuf,
    #[arg(long, default_value = "lfo")]
    pub set: String,
    #[arg(long)]
    pub goal: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Original,
    HigherLevel,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Scenario file; defaults to the bundled suite.
    #[arg(long)]
    pub scenarios: Option<PathBuf>,
    #[arg(long, default_value = "virtualhome")]
    pub set: String,
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// `replay` (bundled scripts), `script:<dir>`, `http` or `http:<config.json>`.
    #[arg(long, default_value = "replay")]
    pub backend: String,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_ROUNDS)]
    pub max_rounds: usize,
    #[arg(long, default_value = "md")]
    pub report: ReportFormat,
    #[arg(long, value_enum, default_value_t = VariantArg::Original)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 4)]
    pub parallelism: usize,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    #[arg(long, default_value = "sessions")]
    pub sessions_dir: PathBuf,
    /// `http`, `http:<config.json>` or `script:<file>`.
    #[arg(long, default_value = "http")]
    pub backend: String,
}

/// Failure with its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Config(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Config(_) => 2,
        }
    }
}

fn config<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Config(format!("{context}: {e}"))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(config(path.display()))
}

fn read_env(path: &Path) -> Result<Environment, CliError> {
    parse_environment(&read(path)?).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn read_goal(path: Option<&PathBuf>) -> Result<Option<GoalSpec>, CliError> {
    path.map(|p| serde_json::from_str(&read(p)?).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display()))))
        .transpose()
}

/// Builds a single backend from `http`, `http:<config>` or `script:<file>`.
pub fn backend_from_spec(spec: &str) -> Result<Arc<dyn ChatBackend>, CliError> {
    if let Some(file) = spec.strip_prefix("script:") {
        let b = ScriptedBackend::from_file(Path::new(file)).map_err(config(file))?;
        return Ok(Arc::new(b));
    }
    let cfg = match spec.strip_prefix("http:") {
        Some(file) => HttpConfig::from_file(Path::new(file)),
        None if spec == "http" => HttpConfig::from_env(),
        None => return Err(CliError::Config(format!("unknown backend `{spec}`"))),
    }
    .map_err(config("backend"))?;
    Ok(Arc::new(HttpBackend::new(cfg).map_err(config("backend"))?))
}

fn provider_from_spec(spec: &str) -> Result<Box<dyn BackendProvider>, CliError> {
    if spec == "replay" {
        return Ok(Box::new(bundled_replay_scripts()));
    }
    if let Some(dir) = spec.strip_prefix("script:") {
        if Path::new(dir).is_dir() {
            return Ok(Box::new(ScriptLibrary::from_dir(dir)));
        }
    }
    Ok(Box::new(SharedBackend(backend_from_spec(spec)?)))
}

fn params(temperature: Option<f64>) -> Result<InferenceParams, CliError> {
    let mut p = InferenceParams::default();
    if let Some(t) = temperature {
        p.temperature = t;
    }
    p.validate().map_err(config("parameters"))?;
    Ok(p)
}

fn prompts_for(dir: Option<&PathBuf>, set: &str) -> Result<Arc<PromptSet>, CliError> {
    match dir {
        Some(d) => Ok(Arc::new(load_prompt_set(d).map_err(config(d.display()))?)),
        None => resolve_prompt_set(set).map_err(config("prompts")),
    }
}

fn emit<T: Serialize>(out: &mut dyn Write, json: bool, value: &T, text: impl FnOnce() -> String) -> io::Result<()> {
    if json {
        writeln!(out, "{}", serde_json::to_string_pretty(value).expect("output serializes"))
    } else {
        write!(out, "{}", text())
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(code) => code,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    let json = cli.json;
    match cli.command {
        Command::Plan(a) => plan(a, json, out),
        Command::Repl(a) => {
            let stdin = io::stdin();
            repl(a, json, &mut stdin.lock(), out)
        }
        Command::Validate(a) => validate(a, json, out),
        Command::Bench(a) => bench(a, json, out),
        Command::Serve(a) => serve(a),
    }
}

fn io_err(e: io::Error) -> CliError {
    CliError::Config(format!("output: {e}"))
}

fn plan(a: PlanArgs, json: bool, out: &mut dyn Write) -> Result<i32, CliError> {
    let env = read_env(&a.env)?;
    let set = resolve_action_set(&a.set).map_err(config("action set"))?;
    let prompts = prompts_for(a.prompts.as_ref(), &a.set)?;
    let goal = read_goal(a.goal.as_ref())?;
    if let Some(g) = &goal {
        g.validate_against(&env).map_err(CliError::Invalid)?;
    }
    let mut planner = Planner::new(set, prompts, backend_from_spec(&a.model.backend)?);
    planner.params = params(a.model.temperature)?;
    planner.budget = a.model.budget;
    let result = planner
        .run_loop(&[], &env, &a.instruction, goal.as_ref(), a.max_rounds, &mut |_| {})
        .map_err(config("planning"))?;
    if let (Some(path), Some(p)) = (&a.out, &result.final_plan) {
        fs::write(path, serialize_plan(p)).map_err(config(path.display()))?;
    }
    emit(out, json, &result, || render_loop_result(&result)).map_err(io_err)?;
    Ok(if result.outcome == Outcome::Exhausted { 1 } else { 0 })
}

fn render_diff(diff: &EnvDiff) -> String {
    if diff.is_empty() {
        return "  (no change)\n".into();
    }
    diff.to_string().split("; ").map(|l| format!("  {l}\n")).collect()
}

fn render_plan(p: &Plan) -> String {
    let mut s = String::new();
    if p.is_clarification() {
        s += &format!("Question: {}\n", p.question);
        return s;
    }
    s += &format!("Summary: {}\n", p.instruction_summary);
    for (i, (call, text)) in p.task_sequence.iter().zip(&p.step_instructions).enumerate() {
        s += &format!("  {:>2}. {:<32} {}\n", i + 1, call.to_plan_string(), text);
    }
    s += "Environment change:\n";
    s += &render_diff(&diff_environments(&p.environment_before, &p.environment_after));
    s
}

fn render_issue(issue: &Issue) -> String {
    match issue {
        Issue::Parse(e) => format!("parse: {e}"),
        Issue::Rule(v) => format!("rule {}: {}", v.rule_number, v.message),
        Issue::Step(e) => e.to_string(),
        Issue::Goal(g) => format!("goal not met: {}", serde_json::to_string(g).unwrap_or_default()),
        Issue::EnvMismatch(d) => format!("environment mismatch: {}", serde_json::to_string(d).unwrap_or_default()),
    }
}

pub fn render_loop_result(r: &LoopResult) -> String {
    let outcome = match r.outcome {
        Outcome::Success => "success",
        Outcome::Exhausted => "exhausted",
        Outcome::ClarificationRequested => "clarification requested",
    };
    let mut s = format!("Outcome: {outcome} after {} feedback round(s)\n", r.rounds_used);
    for (i, round) in r.transcript.rounds.iter().enumerate() {
        for issue in &round.issues {
            s += &format!("  attempt {i}: {}\n", render_issue(issue));
        }
        if let Some(f) = &round.feedback {
            s += &format!("  feedback: {}\n", f.text);
        }
    }
    if let Some(p) = &r.final_plan {
        s += &render_plan(p);
    }
    match r.claim_diff() {
        Some(d) if !d.is_empty() => s += &format!("Claimed environment_after differs from execution:\n{}", render_diff(d)),
        Some(_) => s += "Claimed environment_after matches execution.\n",
        None => {}
    }
    s
}

fn validate(a: ValidateArgs, json: bool, out: &mut dyn Write) -> Result<i32, CliError> {
    let env = read_env(&a.env)?;
    let set = resolve_action_set(&a.set).map_err(config("action set"))?;
    let goal = read_goal(a.goal.as_ref())?;
    let text = read(&a.plan)?;
    let report = validate_plan(&text, &set, &env, goal.as_ref());
    emit(out, json, &report, || {
        let mut s = String::new();
        if let Some(p) = &report.plan {
            s += &render_plan(p);
        }
        s += &format!("Executed steps: {}\n", report.steps_executed);
        for issue in &report.issues {
            s += &format!("{}\n", render_issue(issue));
            if let Some(f) = generate_feedback(issue, &set) {
                s += &format!("  suggestion: {}\n", f.text);
            }
        }
        if let Some(d) = report.claim_diff.as_ref().filter(|d| !d.is_empty()) {
            s += &format!("Claimed environment_after differs from execution:\n{}", render_diff(d));
        }
        if let Some(d) = report.before_mismatch.as_ref().filter(|d| !d.is_empty()) {
            s += &format!("warning: environment_before differs from --env:\n{}", render_diff(d));
        }
        s += if report.valid { "VALID\n" } else { "INVALID\n" };
        s
    })
    .map_err(io_err)?;
    Ok(if report.valid { 0 } else { 1 })
}

fn bench(a: BenchArgs, json: bool, out: &mut dyn Write) -> Result<i32, CliError> {
    let set = resolve_action_set(&a.set).map_err(config("action set"))?;
    let scenarios = match &a.scenarios {
        Some(p) => load_scenarios(&read(p)?, &set).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?,
        None => bundled_scenarios(),
    };
    let provider = provider_from_spec(&a.backend)?;
    let cfg = SuiteConfig {
        set: set.clone(),
        prompts: prompts_for(a.prompts.as_ref(), &a.set)?,
        params: params(a.temperature)?,
        budget: DEFAULT_BUDGET,
        trials: a.trials,
        max_rounds: a.max_rounds,
        variant: match a.variant {
            VariantArg::Original => InstructionVariant::Original,
            VariantArg::HigherLevel => InstructionVariant::HigherLevel,
        },
        parallelism: a.parallelism.max(1),
    };
    let report: SuiteReport = run_suite(&scenarios, provider.as_ref(), &cfg);
    let rendered = render_report(&report, a.report);
    if let Some(path) = &a.out {
        fs::write(path, &rendered).map_err(config(path.display()))?;
    }
    emit(out, json, &report, || rendered.clone()).map_err(io_err)?;
    Ok(if report.scored() == 0 && report.errors() > 0 { 2 } else { 0 })
}

fn serve(a: ServeArgs) -> Result<i32, CliError> {
    let store = SessionStore::open(&a.sessions_dir).map_err(config("sessions"))?;
    let manager = SessionManager::new(store, backend_from_spec(&a.backend)?);
    let addr = SocketAddr::new(a.host, a.port);
    let rt = tokio::runtime::Runtime::new().map_err(config("runtime"))?;
    println!("listening on http://{addr}");
    rt.block_on(crate::api::serve(addr, manager)).map_err(config(addr))?;
    Ok(0)
}

const REPL_HELP: &str = "Commands: <instruction> | feedback <text> | approve | show | help | quit\n";

/// Interactive loop over the session manager, reading commands from `input`.
pub fn repl(a: ReplArgs, json: bool, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<i32, CliError> {
    let env = read_env(&a.env)?;
    let store = SessionStore::open(&a.sessions_dir).map_err(config("sessions"))?;
    let mut manager = SessionManager::new(store, backend_from_spec(&a.model.backend)?);
    manager.params = params(a.model.temperature)?;
    manager.budget = a.model.budget;
    manager.max_rounds = a.max_rounds;
    let prompts = a.prompts.clone().unwrap_or_else(|| a.set.clone());
    let session = manager.create(env, &a.set, &prompts).map_err(config("session"))?;
    let id = session.id.clone();
    writeln!(out, "session {id}\n{REPL_HELP}").map_err(io_err)?;
    let mut line = String::new();
    loop {
        write!(out, "> ").map_err(io_err)?;
        out.flush().map_err(io_err)?;
        line.clear();
        if input.read_line(&mut line).map_err(io_err)? == 0 {
            break;
        }
        let cmd = line.trim();
        let (head, rest) = cmd.split_once(' ').map_or((cmd, ""), |(h, r)| (h, r.trim()));
        let result = match head {
            "" => continue,
            "quit" | "exit" => break,
            "help" => {
                write!(out, "{REPL_HELP}").map_err(io_err)?;
                continue;
            }
            "show" => manager.load(&id).map(|s| {
                let summary = SessionSummary::from(&s);
                if json {
                    serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"
                } else {
                    format!(
                        "Approved steps: {}\nCurrent environment:\n{}\n",
                        summary.approved_steps,
                        crate::env::serialize_environment(&summary.current_env)
                    )
                }
            }),
            "approve" => manager.load(&id).and_then(|s| {
                let attempt = s.latest_attempt().ok_or(crate::session::SessionError::NoExchange)?;
                let s = manager.approve(&id, attempt)?;
                let step = s.approved_steps().count();
                Ok(format!("approved attempt {attempt} as step {step}\n"))
            }),
            "feedback" if !rest.is_empty() => {
                manager.feedback(&id, rest, None, &mut |_| {}).map(|(_, r)| loop_text(&r, json))
            }
            _ => manager.instruct(&id, cmd, None, None, &mut |_| {}).map(|(_, r)| loop_text(&r, json)),
        };
        match result {
            Ok(text) => write!(out, "{text}").map_err(io_err)?,
            Err(e) => writeln!(out, "error: {e}").map_err(io_err)?,
        }
    }
    Ok(0)
}

fn loop_text(r: &LoopResult, json: bool) -> String {
    if json {
        serde_json::to_string_pretty(r).expect("result serializes") + "\n"
    } else {
        render_loop_result(r)
    }
}
