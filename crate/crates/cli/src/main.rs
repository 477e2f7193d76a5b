// SPDX-License-Identifier: Apache-2.0

//! `tokalign`: run the pipeline stage by stage, or decode a single query.
//!
//! Settings resolve as command-line flags, then the `--config` file, then
//! built-in defaults. Artifact paths are relative to `--workdir`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tokalign::decode::{Combinator, DecodeInput, Expert, GuidedDecoder};
use tokalign::pipeline::{paths, EvalReport, Pipeline, RunConfig, Stage, StageOutcome};
use tokalign::Error;

#[derive(Parser, Debug)]
#[command(name = "tokalign", version, about = "Reward-guided token-level decoding pipeline")]
struct Cli {
    /// Directory holding every artifact and manifest.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// TOML (or .json) run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Re-run stages even when their inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Global seed; per-stage seeds derive from it unless set in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training records to generate.
    #[arg(long, global = true)]
    records: Option<usize>,
    #[arg(long, global = true)]
    eval_scenes: Option<usize>,
    /// Augmented views per preference pair.
    #[arg(long = "views", global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    dpo_lr: Option<f64>,
    #[arg(long, global = true)]
    dpo_epochs: Option<usize>,
    /// Guidance strength.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Reward tokens carried through the vocabulary map.
    #[arg(long, global = true)]
    top_k: Option<usize>,
    /// guided, guided_convex, base, vcd, m3id or marine.
    #[arg(long, global = true, value_parser = parse_combinator)]
    combinator: Option<Combinator>,
    #[arg(long, global = true)]
    max_len: Option<usize>,
}

fn parse_combinator(s: &str) -> Result<Combinator, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown combinator `{s}`"))
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.seeds.global = v;
        }
        if let Some(v) = self.records {
            cfg.data.records = v;
        }
        if let Some(v) = self.eval_scenes {
            cfg.data.eval_scenes = v;
            cfg.eval.scenes = v;
        }
        if let Some(v) = self.k {
            cfg.prefs.k = v;
        }
        if let Some(v) = self.beta {
            cfg.dpo.beta = v;
        }
        if let Some(v) = self.dpo_lr {
            cfg.dpo.lr = v;
        }
        if let Some(v) = self.dpo_epochs {
            cfg.dpo.epochs = v;
        }
        if let Some(v) = self.lambda {
            cfg.decode.lambda = v;
        }
        if let Some(v) = self.top_k {
            cfg.decode.map_top_k = v;
        }
        if let Some(v) = self.combinator {
            cfg.decode.combinator = v;
        }
        if let Some(v) = self.max_len {
            cfg.decode.max_len = v;
            cfg.prefs.max_len = v;
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scenes, the held-out eval set and both tokenizers.
    GenData,
    /// Train the base (target) model by maximum likelihood.
    TrainBase,
    /// Build preference pairs from augmented views.
    BuildPrefs,
    /// Pretrain and preference-train the reward model.
    TrainReward,
    /// Decode one query and print the response.
    Decode(DecodeArgs),
    /// Evaluate base and guided decoding on the held-out scenes.
    Eval,
    /// Lambda sweep and fusion ablation.
    Sweep,
    /// Every stage in order.
    Run,
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// Query text; read from stdin when absent.
    #[arg(long)]
    query: Option<String>,
    /// Rendered observation text.
    #[arg(long, conflicts_with = "eval_index")]
    observation: Option<String>,
    /// Use the plain view of this held-out scene as the observation.
    #[arg(long)]
    eval_index: Option<usize>,
    /// Trace file, relative to the workdir.
    #[arg(long, default_value = "traces/decode.jsonl")]
    trace: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::StaleArtifact { .. } => 3,
        Error::TrainingDiverged { .. } => 4,
        Error::InvalidConfig(_) | Error::InvalidInput(_) | Error::InvalidK(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> tokalign::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn report(stage: Stage, outcome: StageOutcome) {
    let state = match outcome {
        StageOutcome::Ran => "done",
        StageOutcome::UpToDate => "up to date",
    };
    println!("{}: {state}", stage.name());
}

fn run(cli: Cli) -> tokalign::Result<()> {
    let cfg = load_config(&cli)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    std::fs::create_dir_all(&cli.workdir).map_err(|e| Error::io(&cli.workdir, e))?;
    let pipe = Pipeline::new(&cli.workdir, cfg)?;
    let stage = match &cli.command {
        Command::GenData => Stage::GenData,
        Command::TrainBase => Stage::TrainBase,
        Command::BuildPrefs => Stage::BuildPrefs,
        Command::TrainReward => Stage::TrainReward,
        Command::Eval => Stage::Eval,
        Command::Sweep => Stage::Sweep,
        Command::Run => {
            for (stage, outcome) in pipe.run_all(cli.force)? {
                report(stage, outcome);
            }
            return print_summary(&pipe);
        }
        Command::Decode(args) => return decode(&pipe, args),
        Command::Config => unreachable!(),
    };
    report(stage, pipe.run(stage, cli.force)?);
    match stage {
        Stage::BuildPrefs => {
            let m = pipe.prefs_manifest()?;
            println!(
                "pairs kept {} of {} (drop rate {:.3}); judge prefers winner in {:.3}, ties {:.3}",
                m.kept, m.records, m.drop_rate, m.winner_rate, m.tie_rate
            );
        }
        Stage::TrainReward => {
            let r = pipe.reward_report()?;
            println!(
                "held-out margin accuracy {:.4} on {} pairs; loss per epoch {:?}",
                r.holdout_margin_acc, r.holdout_pairs, r.loss_per_epoch
            );
        }
        Stage::Eval => print_eval(&pipe)?,
        Stage::Sweep => print_file(&pipe.path(paths::SUMMARY))?,
        _ => {}
    }
    Ok(())
}

fn print_file(path: &Path) -> tokalign::Result<()> {
    print!("{}", std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?);
    Ok(())
}

fn print_eval(pipe: &Pipeline) -> tokalign::Result<()> {
    let path = pipe.path(paths::EVAL_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let r: EvalReport = serde_json::from_str(&text)?;
    println!("{:<8} {:>8} {:>8} {:>8}", "", "CHAIR_s", "CHAIR_i", "POPE");
    println!("{:<8} {:>8.4} {:>8.4} {:>8.4}", "base", r.base.chair_s, r.base.chair_i, r.base.pope_overall);
    println!(
        "{:<8} {:>8.4} {:>8.4} {:>8.4}",
        r.combinator.label(),
        r.guided.chair_s,
        r.guided.chair_i,
        r.guided.pope_overall
    );
    Ok(())
}

fn print_summary(pipe: &Pipeline) -> tokalign::Result<()> {
    print_eval(pipe)?;
    println!();
    print_file(&pipe.path(paths::SUMMARY))
}

fn decode(pipe: &Pipeline, args: &DecodeArgs) -> tokalign::Result<()> {
    let cfg = pipe.config();
    let query = match &args.query {
        Some(q) => q.clone(),
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).map_err(|e| Error::io("<stdin>", e))?;
            s.trim().to_string()
        }
    };
    if query.is_empty() {
        return Err(Error::InvalidInput("empty query".into()));
    }
    let input = match (&args.observation, args.eval_index) {
        (Some(obs), _) => DecodeInput::new(&query, obs),
        (None, Some(i)) => {
            let records = pipe.eval_records()?;
            let rec = records
                .get(i)
                .ok_or_else(|| Error::InvalidInput(format!("eval index {i} out of range ({} scenes)", records.len())))?;
            DecodeInput::for_scene(&rec.scene, &query, &cfg.scene.render, rec.seed)?
        }
        (None, None) => {
            return Err(Error::InvalidInput("give --observation or --eval-index".into()));
        }
    };
    let (tt, base) = pipe.load_target()?;
    let reward = if cfg.decode.combinator.needs_reward() {
        Some(pipe.load_reward()?)
    } else {
        None
    };
    let reward_expert = match &reward {
        Some((rt, params)) => Some(Expert::new(params, rt)?),
        None => None,
    };
    let dcfg = tokalign::decode::DecodeConfig {
        trace: true,
        ..cfg.decode
    };
    let decoder = GuidedDecoder::new(Expert::new(&base, &tt)?, reward_expert, dcfg)?;
    let out = decoder.decode(&input)?;

    let trace_path = pipe.path(&args.trace.to_string_lossy());
    if let Some(dir) = trace_path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
    for step in &out.trace {
        writeln!(f, "{}", serde_json::to_string(step)?).map_err(|e| Error::io(&trace_path, e))?;
    }
    println!("{}", out.text);
    eprintln!("trace: {}", trace_path.display());
    Ok(())
}
