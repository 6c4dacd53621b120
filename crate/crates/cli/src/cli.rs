//! Argument parsing and subcommand dispatch.
//!
//! Exit codes: 0 success, 1 domain error (reported on standard error),
//! 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use ngd_core::checkpoint::{self, Model};
use ngd_core::config::RunConfig;
use ngd_core::detector::{
    attention_report, eval_classification, gen_benchmarks, gen_pool, rank_pool, EvalReport, NegativeMode, PerRelation,
};
use ngd_core::langparse::Relation;
use ngd_core::narrate::{self, relation_phrases, render, TEMPLATES};
use ngd_core::policy::{self, evaluate_policy, ObjectSet, RewardSource, Variant};
use ngd_core::synthesis::synthesize_goal;
use ngd_core::world::Scene;
use ngd_core::{rng, Execution};

use crate::session::{Models, Session};

type Failure = Box<dyn std::error::Error + Send + Sync>;
type Outcome = std::result::Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(name = "ngd", version, about = "Language-grounded rewards and instructable pick-and-place policies")]
struct Cli {
    /// RunConfig JSON document; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed for every module.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory [env: NGD_DATA_DIR, default: ngd-data].
    #[arg(long, global = true, value_name = "DIR")]
    data_dir: Option<PathBuf>,
    /// Override any RunConfig key, e.g. `--set dqn.batch=64` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run data-parallel loops on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Group,
}

#[derive(Debug, Subcommand)]
enum Group {
    /// Narrated demonstration datasets.
    #[command(subcommand)]
    Demos(DemosCmd),
    /// Relation detector training and evaluation.
    #[command(subcommand)]
    Detector(DetectorCmd),
    /// Goal configurations by analysis-by-synthesis.
    #[command(subcommand)]
    Goal(GoalCmd),
    /// Pick-and-place policies.
    #[command(subcommand)]
    Policy(PolicyCmd),
    /// Drive a trained agent with natural language.
    #[command(subcommand)]
    Instruct(InstructCmd),
}

#[derive(Debug, Subcommand)]
enum DemosCmd {
    /// Generate a synthetic narrated dataset.
    Gen {
        /// Output file [default: <data-dir>/demos.jsonl].
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        videos: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Negatives {
    Hard,
    Random,
}

#[derive(Debug, Args)]
struct CheckpointArg {
    /// Detector checkpoint.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
}

#[derive(Debug, Subcommand)]
enum DetectorCmd {
    /// Train the detector and its threshold network.
    Train {
        /// Dataset file [default: <data-dir>/demos.jsonl].
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint file [default: <data-dir>/detector.ckpt].
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        negatives: Option<Negatives>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Binary-reward accuracy on the per-relation benchmarks.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Report file [default: <data-dir>/detector_eval.json].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank a same-pair pool per relation and report precision@5.
    Retrieve {
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Report file [default: <data-dir>/retrieval.json].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention weight of every token.
    Attention {
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Utterances [default: one per relation].
        utterances: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
enum GoalCmd {
    /// Best-scoring placement for an instruction.
    Synth {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long)]
        text: String,
        /// Scene JSON [default: a workspace scene drawn from the seed].
        #[arg(long)]
        scene: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RewardArg {
    Oracle,
    Detector,
    BinaryOnly,
}

impl From<RewardArg> for RewardSource {
    fn from(r: RewardArg) -> Self {
        match r {
            RewardArg::Oracle => RewardSource::Oracle,
            RewardArg::Detector => RewardSource::Detector,
            RewardArg::BinaryOnly => RewardSource::BinaryOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Object,
    Raster,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Object => Variant::Object,
            VariantArg::Raster => Variant::Raster,
        }
    }
}

#[derive(Debug, Subcommand)]
enum PolicyCmd {
    /// Deep Q-learning; writes a checkpoint and a CSV learning curve.
    Train {
        #[arg(long, value_enum, default_value = "oracle")]
        reward: RewardArg,
        #[arg(long, value_enum, default_value = "object")]
        variant: VariantArg,
        /// Detector checkpoint, required for `--reward detector`.
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Checkpoint file [default: <data-dir>/policy-<variant>-<reward>.ckpt].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Success rate on seen and unseen objects.
    Eval {
        /// Policy checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        /// Report file [default: <data-dir>/policy_eval.json].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct AgentArgs {
    #[arg(long, value_name = "PATH")]
    detector: PathBuf,
    #[arg(long, value_name = "PATH")]
    policy: PathBuf,
}

#[derive(Debug, Subcommand)]
enum InstructCmd {
    /// Interactive session on standard input and output.
    Repl {
        #[command(flatten)]
        agent: AgentArgs,
    },
    /// HTTP+JSON server for the browser client.
    Serve {
        #[command(flatten)]
        agent: AgentArgs,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

/// Parse `argv` (program name first) and run it; returns the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Apply `a.b.c=value` to the JSON form of the config. Values that are not
/// valid JSON are taken as strings.
fn apply_override(doc: &mut Value, spec: &str) -> Outcome {
    let (key, raw) = spec.split_once('=').ok_or_else(|| format!("override `{spec}` is not KEY=VALUE"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| format!("`{}` is not a section", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            map.insert((*part).to_owned(), value);
            return Ok(());
        }
        node = map.entry(*part).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn load_config(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.seeded(seed);
    }
    if !cli.overrides.is_empty() {
        let mut doc = serde_json::to_value(&config)?;
        for o in &cli.overrides {
            apply_override(&mut doc, o)?;
        }
        config = RunConfig::from_json(&doc.to_string())?;
    }
    if let Some(dir) = &cli.data_dir {
        config.data_dir = Some(dir.clone());
    }
    config.validate()?;
    Ok(config)
}

struct Ctx {
    config: RunConfig,
    exec: Execution,
}

impl Ctx {
    fn path(&self, explicit: &Option<PathBuf>, default: &str) -> std::result::Result<PathBuf, Failure> {
        match explicit {
            Some(p) => Ok(p.clone()),
            None => {
                let dir = self.config.data_dir();
                fs::create_dir_all(&dir)?;
                Ok(dir.join(default))
            }
        }
    }

    fn digest(&self) -> std::result::Result<String, Failure> {
        Ok(checkpoint::config_digest(&self.config)?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome {
    let config = load_config(&cli)?;
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let ctx = Ctx { config, exec };
    match cli.command {
        Group::Demos(DemosCmd::Gen { out, videos }) => demos_gen(&ctx, out, videos),
        Group::Detector(cmd) => match cmd {
            DetectorCmd::Train { dataset, out, negatives, epochs } => detector_train(&ctx, dataset, out, negatives, epochs),
            DetectorCmd::Eval { ckpt, out } => detector_eval(&ctx, &ckpt.checkpoint, out),
            DetectorCmd::Retrieve { ckpt, out } => detector_retrieve(&ctx, &ckpt.checkpoint, out),
            DetectorCmd::Attention { ckpt, utterances } => detector_attention(&ckpt.checkpoint, utterances),
        },
        Group::Goal(GoalCmd::Synth { ckpt, text, scene }) => goal_synth(&ctx, &ckpt.checkpoint, &text, scene),
        Group::Policy(cmd) => match cmd {
            PolicyCmd::Train { reward, variant, detector, episodes, out } => {
                policy_train(&ctx, reward, variant, detector, episodes, out)
            }
            PolicyCmd::Eval { checkpoint, episodes, out } => policy_eval(&ctx, &checkpoint, episodes, out),
        },
        Group::Instruct(cmd) => instruct(&ctx, cmd),
    }
}

fn demos_gen(ctx: &Ctx, out: Option<PathBuf>, videos: Option<usize>) -> Outcome {
    let mut generator = ctx.config.generator.clone();
    if let Some(n) = videos {
        generator.n_videos = n;
    }
    generator.validate()?;
    let dataset = narrate::generate_dataset(&generator)?;
    let path = ctx.path(&out, "demos.jsonl")?;
    narrate::save_dataset(&path, &dataset)?;
    println!(
        "{} videos, {} segments, {} frames -> {}",
        dataset.demos.len(),
        dataset.segments().len(),
        dataset.total_frames(),
        path.display()
    );
    Ok(())
}

fn detector_train(
    ctx: &Ctx,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    negatives: Option<Negatives>,
    epochs: Option<usize>,
) -> Outcome {
    let mut train = ctx.config.detector.clone();
    if let Some(n) = negatives {
        train.negative_mode = match n {
            Negatives::Hard => NegativeMode::Hard,
            Negatives::Random => NegativeMode::Random,
        };
    }
    if let Some(e) = epochs {
        train.epochs = e;
    }
    let dataset = narrate::load_dataset(&ctx.path(&dataset, "demos.jsonl")?)?;
    let outcome = ngd_core::detector::fit(&dataset, &train)?;
    let path = ctx.path(&out, "detector.ckpt")?;
    checkpoint::save_checkpoint(&path, &Model::Detector(outcome.model), &checkpoint::config_digest(&train)?)?;
    let history = path.with_extension("history.json");
    write_json(
        &history,
        &json!({
            "contrastive_loss": outcome.contrastive_history,
            "threshold_loss": outcome.threshold_history,
        }),
    )?;
    println!(
        "final contrastive loss {:.4}, threshold loss {:.4} -> {}",
        outcome.contrastive_history.last().copied().unwrap_or(f64::NAN),
        outcome.threshold_history.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn detector_eval(ctx: &Ctx, ckpt: &Path, out: Option<PathBuf>) -> Outcome {
    let model = checkpoint::load_detector(ckpt)?;
    let benches = gen_benchmarks(rng::child_seed(ctx.config.seed, "benchmark"), &ctx.config.benchmark)?;
    let report = eval_classification(&model, &benches, ctx.exec)?;
    let path = ctx.path(&out, "detector_eval.json")?;
    write_json(&path, &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn detector_retrieve(ctx: &Ctx, ckpt: &Path, out: Option<PathBuf>) -> Outcome {
    let model = checkpoint::load_detector(ckpt)?;
    let mut p5 = PerRelation::default();
    let mut pools = Vec::new();
    for r in Relation::ALL {
        let pool = gen_pool(r, &ctx.config.benchmark, &mut rng::indexed(ctx.config.seed, "pool", r.index() as u64))?;
        let ranking = rank_pool(&model, &pool.utterance, &pool.items)?;
        p5.set(r, ranking.precision_at_5);
        let top: Vec<Value> = ranking
            .order
            .iter()
            .take(5)
            .map(|&i| json!({ "index": i, "score": ranking.scores[i], "label": pool.items[i].label }))
            .collect();
        pools.push(json!({ "relation": r, "utterance": pool.utterance, "precision_at_5": ranking.precision_at_5, "top5": top }));
    }
    let path = ctx.path(&out, "retrieval.json")?;
    write_json(&path, &json!({ "precision_at_5": p5, "pools": pools }))?;
    let mut report = EvalReport::from_accuracy(PerRelation::default());
    report.precision_at_5 = Some(p5);
    // Only the p@5 row is meaningful here.
    let table = report.to_table();
    let mut lines = table.lines();
    println!("{}", lines.next().unwrap_or_default());
    for l in lines.filter(|l| l.starts_with("p@5")) {
        println!("{l}");
    }
    Ok(())
}

fn default_utterances() -> Vec<String> {
    let pairs = [("orange", "bowl"), ("mug", "box"), ("apple", "plate"), ("cup", "book")];
    Relation::ALL
        .iter()
        .zip(pairs)
        .map(|(&r, (s, o))| render(TEMPLATES[0], s, relation_phrases(r)[0], o))
        .collect()
}

fn detector_attention(ckpt: &Path, utterances: Vec<String>) -> Outcome {
    let model = checkpoint::load_detector(ckpt)?;
    let utterances = if utterances.is_empty() { default_utterances() } else { utterances };
    let refs: Vec<&str> = utterances.iter().map(String::as_str).collect();
    for table in attention_report(&model, &refs)? {
        println!("{}", table.utterance);
        for (tok, w) in &table.rows {
            println!("  {tok:<12}{w:.3}");
        }
    }
    Ok(())
}

fn goal_synth(ctx: &Ctx, ckpt: &Path, text: &str, scene: Option<PathBuf>) -> Outcome {
    let model = checkpoint::load_detector(ckpt)?;
    let scene: Scene = match scene {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => policy::workspace_scene(&ctx.config.episode, ObjectSet::Seen, &mut rng::stream(ctx.config.seed, "goal.scene"))?,
    };
    let goal = synthesize_goal(&model, text, &scene, &ctx.config.synthesis)?;
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, &json!({ "utterance": text, "scene": scene, "goal": goal }))?;
    writeln!(stdout)?;
    Ok(())
}

fn policy_train(
    ctx: &Ctx,
    reward: RewardArg,
    variant: VariantArg,
    detector: Option<PathBuf>,
    episodes: Option<usize>,
    out: Option<PathBuf>,
) -> Outcome {
    let mut dqn = ctx.config.dqn.clone();
    if let Some(n) = episodes {
        dqn.episodes = n;
    }
    dqn.validate()?;
    let detector = detector.map(|p| checkpoint::load_detector(&p)).transpose()?;
    let scorer = detector.as_ref().map(|d| d as &dyn ngd_core::detector::Scorer);
    let variant = Variant::from(variant);
    let source = RewardSource::from(reward);
    let trained = policy::train_dqn(&ctx.config.episode, &dqn, source, variant, scorer, ctx.exec)?;
    let reward_name = reward.to_possible_value().map(|v| v.get_name().to_owned()).unwrap_or_default();
    let path = ctx.path(&out, &format!("policy-{}-{reward_name}.ckpt", variant.name()))?;
    checkpoint::save_checkpoint(&path, &Model::Policy(trained.net), &ctx.digest()?)?;
    let curve = path.with_extension("csv");
    fs::write(&curve, policy::curve_to_csv(&trained.curve))?;
    let last = trained.curve.last().map(|p| p.success_rate).unwrap_or(f64::NAN);
    println!("final training success {last:.3} -> {} ({})", path.display(), curve.display());
    Ok(())
}

fn policy_eval(ctx: &Ctx, ckpt: &Path, episodes: usize, out: Option<PathBuf>) -> Outcome {
    let net = checkpoint::load_policy(ckpt)?;
    let seed = rng::child_seed(ctx.config.seed, "policy.test");
    let seen = evaluate_policy(&net, &ctx.config.episode, episodes, ObjectSet::Seen, seed, ctx.exec)?;
    let unseen = evaluate_policy(&net, &ctx.config.episode, episodes, ObjectSet::Unseen, seed, ctx.exec)?;
    let path = ctx.path(&out, "policy_eval.json")?;
    write_json(
        &path,
        &json!({ "variant": net.variant().name(), "episodes": episodes, "seen": seen, "unseen": unseen }),
    )?;
    println!("{:<16}{:>8}{:>8}", "", "seen", "unseen");
    println!("{:<16}{seen:>8.3}{unseen:>8.3}", net.variant().name());
    Ok(())
}

fn load_models(ctx: &Ctx, agent: &AgentArgs) -> std::result::Result<Models, Failure> {
    Ok(Models {
        detector: checkpoint::load_detector(&agent.detector)?,
        policy: checkpoint::load_policy(&agent.policy)?,
        env: ctx.config.episode.clone(),
        synthesis: ctx.config.synthesis.clone(),
    })
}

fn instruct(ctx: &Ctx, cmd: InstructCmd) -> Outcome {
    match cmd {
        InstructCmd::Repl { agent } => {
            let models = load_models(ctx, &agent)?;
            let session = Session::new("repl".into(), ctx.config.seed, &models)?;
            crate::repl::run(session, &models, std::io::stdin().lock(), std::io::stdout().lock())?;
            Ok(())
        }
        InstructCmd::Serve { agent, host, port } => {
            let models = load_models(ctx, &agent)?;
            let app = crate::server::AppState::new(models, ctx.config.seed);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(crate::server::serve(SocketAddr::new(host, port), app))?;
            Ok(())
        }
    }
}
