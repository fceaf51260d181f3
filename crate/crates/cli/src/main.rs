use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tracing::info;

use thor_core::analytics::{
    chi_square_2x2, code_ratio, contingency_from_trajectories, pass_at_k, round_histogram, token_cost,
    ContingencyTable2x2,
};
use thor_core::client::LlmClient;
use thor_core::inference::best_of_n;
use thor_core::rl::{
    build_step_dataset, dynamic_filter, export_training_records, step_records, step_rollout, summarize,
    trajectory_records, StepGroup, TrainingRecord,
};
use thor_core::rollout::{run_group, GroupRollout, GroupSpec};
use thor_core::tirgen::{run_pipeline, Agents, QuestionRecord, SftSample};
use thor_core::trajectory::{read_jsonl, write_jsonl, TokenizedTrajectory, Trajectory};

mod config;

use config::{build_client, Config};

#[derive(Parser, Debug)]
#[command(name = "thor", version, about = "Tool-integrated reasoning: data synthesis, rollouts, RL preparation, inference")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for rollouts and synthesis.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesise and filter tool-integrated training data.
    Tirgen(TirgenArgs),
    /// Sample trajectory groups for a question file.
    Rollout(RolloutArgs),
    /// Filter rollouts, build step samples and export training records.
    RlPrepare(RlPrepareArgs),
    /// Answer one question with optional self-correction and best-of-n.
    Infer(InferArgs),
    /// Corpus statistics and the code/answer independence test.
    Analyze(AnalyzeArgs),
    /// Print the effective configuration.
    ConfigCheck,
}

#[derive(Args, Debug)]
struct TirgenArgs {
    /// Question file, one {id, question, answer} record per line.
    #[arg(long)]
    questions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    #[arg(long)]
    questions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct RlPrepareArgs {
    /// Group rollout file written by `thor rollout`.
    #[arg(long)]
    rollouts: PathBuf,
    /// Training record output.
    #[arg(long)]
    out: PathBuf,
    /// Also write the step-level samples here.
    #[arg(long)]
    step_dataset: Option<PathBuf>,
    /// Skip step-level regeneration.
    #[arg(long)]
    no_step: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    question: String,
    /// Enable self-correction with this many attempts per failed step.
    #[arg(long)]
    self_correct: Option<u32>,
    /// Number of best-of-n candidates.
    #[arg(long)]
    bon: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Trajectories, tokenized trajectories, group rollouts or dataset samples (JSONL).
    #[arg(long)]
    trajectories: Option<PathBuf>,
    #[arg(long)]
    chi2: bool,
    /// Contingency table a,b,c,d (answer right/wrong by code ok/failed).
    #[arg(long)]
    table: Option<String>,
    #[arg(long)]
    pass_at_k: Option<u64>,
    #[arg(long)]
    rounds: bool,
    #[arg(long)]
    tokens: bool,
    #[arg(long)]
    json: bool,
}

/// Bad flag combination; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn load_config(cli: &Cli) -> Result<Config> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os("THOR_CONFIG").map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => Config::from_file(&p)?,
        None => Config::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    cfg.propagate();
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::ConfigCheck => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
        Command::Tirgen(args) => cmd_tirgen(&cfg, &args),
        Command::Rollout(args) => {
            if let Some(g) = args.group_size {
                if g < 2 {
                    return Err(usage("--group-size must be >= 2"));
                }
                cfg.rollout.group_size = g;
            }
            cmd_rollout(&cfg, &args)
        }
        Command::RlPrepare(args) => cmd_rl_prepare(&cfg, &args),
        Command::Infer(args) => {
            if let Some(n) = args.self_correct {
                cfg.inference.self_correct = true;
                cfg.inference.max_attempts = n;
            }
            if let Some(n) = args.bon {
                if n == 0 {
                    return Err(usage("--bon must be >= 1"));
                }
                cfg.inference.bon_n = n;
            }
            cmd_infer(&cfg, &args)
        }
        Command::Analyze(args) => cmd_analyze(&args),
    }
}

fn api_key() -> Option<String> {
    std::env::var("THOR_API_KEY").ok().filter(|k| !k.is_empty())
}

fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn write_records<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write_jsonl(&mut w, items)?;
    w.flush()?;
    Ok(())
}

fn read_questions(path: &Path) -> Result<Vec<QuestionRecord>> {
    let qs: Vec<QuestionRecord> = read_records(path)?;
    for (i, q) in qs.iter().enumerate() {
        if q.question.trim().is_empty() {
            bail!("{}: record {} ({}) has an empty question", path.display(), i + 1, q.id);
        }
    }
    let mut ids: Vec<&str> = qs.iter().map(|q| q.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        bail!("{}: duplicate question id {:?}", path.display(), w[0]);
    }
    Ok(qs)
}

fn cmd_tirgen(cfg: &Config, args: &TirgenArgs) -> Result<()> {
    let questions = read_questions(&args.questions)?;
    if args.dry_run {
        println!(
            "tirgen: {} questions, max_steps {}, step_len_cap {}, cot samples {}, per-stratum cap {}, seed {}",
            questions.len(),
            cfg.tirgen.max_steps,
            cfg.tirgen.step_len_cap,
            cfg.tirgen.cot_filter_samples,
            cfg.tirgen.per_stratum_cap,
            cfg.seed
        );
        return Ok(());
    }
    let key = api_key();
    let actor = build_client(&cfg.client, key.clone())?;
    let critic = match &cfg.critic {
        Some(c) => build_client(c, key.clone())?,
        None => actor.clone(),
    };
    let baseline = match &cfg.baseline {
        Some(c) => build_client(c, key)?,
        None => actor.clone(),
    };
    let executor = cfg.executor()?;
    let agents = Agents {
        actor: actor.as_ref(),
        critic: critic.as_ref(),
        baseline: Some(baseline.as_ref()),
    };
    let out = run_pipeline(&questions, &agents, &executor, &cfg.tirgen)?;
    write_records::<SftSample>(&args.out, &out.samples)?;
    let report = serde_json::to_string_pretty(&out.report)?;
    std::fs::write(&args.report, report + "\n").with_context(|| format!("writing {}", args.report.display()))?;
    println!("tirgen: kept {} of {} questions", out.report.kept_count, out.report.input_count);
    Ok(())
}

fn cmd_rollout(cfg: &Config, args: &RolloutArgs) -> Result<()> {
    let questions = read_questions(&args.questions)?;
    let g = cfg.rollout.group_size;
    if args.dry_run {
        println!(
            "rollout: {} questions x {} trajectories, max_code_rounds {}, max_total_tokens {}, jobs {}",
            questions.len(),
            g,
            cfg.rollout.max_code_rounds,
            cfg.rollout.max_total_tokens,
            cfg.jobs
        );
        return Ok(());
    }
    let client = build_client(&cfg.client, api_key())?;
    let executor = cfg.executor()?;
    let limits = cfg.limits();
    let mut groups = Vec::with_capacity(questions.len());
    for q in &questions {
        let spec = GroupSpec {
            query_id: &q.id,
            query: &q.question,
            gold: &q.answer,
            instruction: &cfg.instruction,
            group_size: g,
        };
        let group = run_group(&spec, client.as_ref(), &executor, &limits)?;
        info!(query_id = %q.id, rewards = ?group.rewards, "group done");
        groups.push(group);
    }
    write_records(&args.out, &groups)?;
    let solved: usize = groups.iter().map(|g| g.rewards.iter().map(|&r| r as usize).sum::<usize>()).sum();
    println!("rollout: {} groups, {} of {} trajectories correct", groups.len(), solved, groups.len() * g);
    Ok(())
}

fn cmd_rl_prepare(cfg: &Config, args: &RlPrepareArgs) -> Result<()> {
    let groups: Vec<GroupRollout> = read_records(&args.rollouts)?;
    for g in &groups {
        if !g.check_lengths() {
            bail!("group {}: trajectories, rewards and sample ids differ in length", g.query_id);
        }
        for (id, t) in g.sample_ids.iter().zip(&g.trajectories) {
            t.validate().with_context(|| format!("sample {id}"))?;
        }
    }
    let filtered = dynamic_filter(&groups, cfg.rl.adv_epsilon);
    let traj_groups = trajectory_records(&filtered)?;

    let origins: Vec<(String, &Trajectory)> = groups
        .iter()
        .flat_map(|g| g.sample_ids.iter().cloned().zip(g.trajectories.iter().map(|t| &t.trajectory)))
        .collect();
    let samples = build_step_dataset(&origins, cfg.rl.suffix_len, &cfg.rl.unit)?;
    if let Some(p) = &args.step_dataset {
        write_records(p, &samples)?;
    }

    let step_groups: Vec<StepGroup> = if args.no_step || samples.is_empty() {
        Vec::new()
    } else {
        let client: Arc<dyn LlmClient> = build_client(&cfg.client, api_key())?;
        let executor = cfg.executor()?;
        let limits = cfg.limits();
        samples
            .iter()
            .map(|s| step_rollout(s, cfg.rl.group_size, &cfg.instruction, client.as_ref(), &executor, &limits))
            .collect::<Result<_, _>>()?
    };
    let step_groups_records = step_records(&step_groups, cfg.rl.adv_epsilon)?;

    let all: Vec<TrainingRecord> = traj_groups
        .iter()
        .chain(&step_groups_records)
        .flatten()
        .cloned()
        .collect();
    let file = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut w = BufWriter::new(file);
    export_training_records(&all, &mut w)?;
    w.flush()?;

    let summary = summarize(groups.len(), samples.len(), &traj_groups, &step_groups_records, &cfg.rl)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_infer(cfg: &Config, args: &InferArgs) -> Result<()> {
    let client = build_client(&cfg.client, api_key())?;
    let executor = cfg.executor()?;
    let corr = cfg.inference.self_correct.then(|| cfg.correction());
    let bon = cfg.bon();
    let res = best_of_n(&args.question, &cfg.instruction, &bon, client.as_ref(), &executor, &cfg.limits(), corr.as_ref())?;
    let chosen = res.chosen();
    if args.json {
        let out = json!({
            "chosen_index": res.chosen_index,
            "scores": res.scores,
            "model_tokens": res.model_tokens,
            "trajectory": chosen,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    println!("{:<10} {:>9} {:>6} {:>7} {:>6} {:>13}", "candidate", "successes", "calls", "rate", "boxed", "model_tokens");
    for (i, (s, t)) in res.scores.iter().zip(&res.candidates).enumerate() {
        let rate = if s.calls == 0 { 0.0 } else { f64::from(s.successes) / f64::from(s.calls) };
        let mark = if i == res.chosen_index { " *" } else { "" };
        println!(
            "{:<10} {:>9} {:>6} {:>7.3} {:>6} {:>13}{}",
            i,
            s.successes,
            s.calls,
            rate,
            if t.final_answer.is_some() { "yes" } else { "no" },
            res.model_tokens[i],
            mark
        );
    }
    println!();
    print!("{}", chosen.render());
    if !chosen.render().ends_with('\n') {
        println!();
    }
    println!("answer: {}", chosen.final_answer.as_deref().unwrap_or("(none)"));
    Ok(())
}

/// One analysed trajectory with whatever extra facts its file carried.
struct Item {
    trajectory: Trajectory,
    tokenized: Option<TokenizedTrajectory>,
    gold: Option<String>,
}

struct Corpus {
    items: Vec<Item>,
    /// (group size, correct count) per group.
    groups: Vec<(u64, u64)>,
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let lines: Vec<Value> = read_records(path)?;
    let mut corpus = Corpus {
        items: Vec::new(),
        groups: Vec::new(),
    };
    for (i, v) in lines.into_iter().enumerate() {
        let line = i + 1;
        let ctx = || format!("{} line {line}", path.display());
        if v.get("trajectories").is_some() {
            let g: GroupRollout = serde_json::from_value(v).with_context(ctx)?;
            corpus
                .groups
                .push((g.len() as u64, g.rewards.iter().map(|&r| u64::from(r)).sum()));
            for t in g.trajectories {
                corpus.items.push(Item {
                    trajectory: t.trajectory.clone(),
                    tokenized: Some(t),
                    gold: Some(g.gold_answer.clone()),
                });
            }
        } else if v.get("records").is_some() {
            let t: TokenizedTrajectory = serde_json::from_value(v).with_context(ctx)?;
            corpus.items.push(Item {
                trajectory: t.trajectory.clone(),
                tokenized: Some(t),
                gold: None,
            });
        } else if v.get("answer").is_some() && v.get("trajectory").is_some() {
            let s: SftSample = serde_json::from_value(v).with_context(ctx)?;
            corpus.items.push(Item {
                trajectory: s.trajectory,
                tokenized: None,
                gold: Some(s.answer),
            });
        } else if v.get("segments").is_some() {
            let t: Trajectory = serde_json::from_value(v).with_context(ctx)?;
            corpus.items.push(Item {
                trajectory: t,
                tokenized: None,
                gold: None,
            });
        } else {
            bail!("{}: unrecognised record", ctx());
        }
    }
    Ok(corpus)
}

fn parse_table(s: &str) -> Result<ContingencyTable2x2> {
    let parts: Vec<u64> = s
        .split(',')
        .map(|p| p.trim().parse::<u64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--table expects four non-negative integers a,b,c,d, got {s:?}")))?;
    match parts[..] {
        [a, b, c, d] => Ok(ContingencyTable2x2::new(a, b, c, d)),
        _ => Err(usage(format!("--table expects four values a,b,c,d, got {}", parts.len()))),
    }
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    if args.trajectories.is_none() && args.table.is_none() {
        return Err(usage("analyze needs --trajectories or --table"));
    }
    if args.trajectories.is_none() && (args.rounds || args.tokens || args.pass_at_k.is_some()) {
        return Err(usage("--rounds, --tokens and --pass-at-k need --trajectories"));
    }
    let table = args.table.as_deref().map(parse_table).transpose()?;
    let corpus = args.trajectories.as_deref().map(load_corpus).transpose()?;
    let mut out = serde_json::Map::new();
    let mut text = Vec::new();

    if let Some(c) = &corpus {
        let trajs: Vec<Trajectory> = c.items.iter().map(|i| i.trajectory.clone()).collect();
        let ratio = code_ratio(&trajs);
        out.insert("trajectories".into(), json!(trajs.len()));
        out.insert("code_ratio".into(), json!(ratio));
        text.push(format!("trajectories: {}", trajs.len()));
        text.push(format!("code ratio: {ratio:.4}"));
        if args.rounds {
            let hist = round_histogram(&trajs);
            text.push("code call rounds:".into());
            for (k, v) in &hist {
                text.push(format!("  {k}: {v}"));
            }
            out.insert("rounds".into(), json!(hist));
        }
        if args.tokens {
            let tokenized: Vec<TokenizedTrajectory> = c
                .items
                .iter()
                .map(|i| i.tokenized.clone())
                .collect::<Option<_>>()
                .context("--tokens needs tokenized trajectories (rollout files or tokenized records)")?;
            let cost = token_cost(&tokenized);
            text.push(format!("mean model tokens: {:.2}", cost.mean_model_tokens));
            out.insert("tokens".into(), json!(cost));
        }
        if let Some(k) = args.pass_at_k {
            if c.groups.is_empty() {
                bail!("--pass-at-k needs group rollouts");
            }
            let vals = c
                .groups
                .iter()
                .map(|&(n, correct)| pass_at_k(n, correct, k))
                .collect::<Result<Vec<f64>, _>>()?;
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            text.push(format!("pass@{k}: {mean:.4} over {} groups", vals.len()));
            out.insert(format!("pass_at_{k}"), json!(mean));
        }
    }

    if args.chi2 || table.is_some() {
        let t = match (table, &corpus) {
            (Some(t), _) => t,
            (None, Some(c)) => {
                let pairs: Vec<(&Trajectory, &str)> = c
                    .items
                    .iter()
                    .filter_map(|i| i.gold.as_deref().map(|g| (&i.trajectory, g)))
                    .collect();
                if pairs.is_empty() {
                    bail!("--chi2 needs gold answers (group rollouts or dataset samples) or --table");
                }
                contingency_from_trajectories(&pairs)
            }
            (None, None) => unreachable!("checked above"),
        };
        let r = chi_square_2x2(&t)?;
        text.push(format!("table: a={} b={} c={} d={}", t.a, t.b, t.c, t.d));
        text.push(format!("chi2 = {:.4}  p = {:.4e}  dof = {}", r.chi2, r.p, r.dof));
        out.insert("table".into(), json!(t));
        out.insert("chi2".into(), json!(r));
    }

    if args.json {
        println!("{}", serde_json::to_string_pretty(&Value::Object(out))?);
    } else {
        for line in text {
            println!("{line}");
        }
    }
    Ok(())
}
