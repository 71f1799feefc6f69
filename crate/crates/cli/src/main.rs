use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use etmpc::closed_loop::{run_episode, EpisodeOptions, EpisodeRecord, EpisodeTask};
use etmpc::config::RunConfig;
use etmpc::harness::{build_testset, compare, evaluate_policy, Comparison, TestSet};
use etmpc::policy::{PolicyKind, PolicyParams};
use etmpc::rl::{train, write_curve_csv, TrainOptions};
use etmpc::seed::{derive_seed, stream};
use etmpc::systems::{EpisodeSeeds, SystemKind, SystemModel};
use etmpc::Error;

#[derive(Parser, Debug)]
#[command(
    name = "etmpc",
    version,
    about = "Event-triggered MPC with a learned recomputation policy"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More output; repeat for solver diagnostics.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a frozen test set.
    GenTestset {
        #[arg(long)]
        system: Option<SystemKind>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the recomputation policy.
    Train {
        #[arg(long)]
        system: Option<SystemKind>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Test set for the learning curve (drawn from the config seed if absent).
        #[arg(long)]
        testset: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate one policy on a test set.
    Eval {
        /// always, never, periodic:T or a policy JSON file.
        #[arg(long)]
        policy: String,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Evaluate several policies on the same test set.
    Compare {
        /// Comma-separated policies.
        #[arg(long, value_delimiter = ',')]
        policies: Vec<String>,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Run and log a single episode.
    Trace {
        #[arg(long)]
        policy: String,
        /// Episode seed; ignored when a test-set episode is selected.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replay episode `--episode` of this test set instead.
        #[arg(long, requires = "episode")]
        testset: Option<PathBuf>,
        #[arg(long, requires = "testset")]
        episode: Option<usize>,
        #[arg(long)]
        system: Option<SystemKind>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

/// Usage problems exit with 1, everything else with 2.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::ConfigHashMismatch { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let command_line: Vec<String> = std::env::args().collect();

    match cli.command {
        Command::GenTestset {
            system,
            seed,
            out,
            episodes,
            steps,
        } => {
            override_opt(&mut cfg.system, system);
            override_opt(&mut cfg.seed, seed);
            override_opt(&mut cfg.out_dir, out);
            override_opt(&mut cfg.eval.episodes, episodes);
            override_opt(&mut cfg.eval.steps, steps);
            let sys = cfg.build_system()?;
            let ts = build_testset(sys.as_ref(), cfg.eval.episodes, cfg.eval.steps, cfg.seed);
            ts.save(&cfg.out_dir)?;
            println!(
                "{} test set: {} episodes of {} steps, config {}",
                ts.system,
                ts.len(),
                ts.steps,
                &ts.config_hash[..12]
            );
            finish(&cfg, &command_line, &["testset.json"])
        }
        Command::Train {
            system,
            out,
            testset,
            episodes,
            seed,
        } => {
            override_opt(&mut cfg.system, system);
            override_opt(&mut cfg.out_dir, out);
            override_opt(&mut cfg.train.episodes, episodes);
            override_opt(&mut cfg.train.seed, seed);
            let sys = cfg.build_system()?;
            let ts = match testset {
                Some(path) => TestSet::load(&path)?,
                None => {
                    let ts =
                        build_testset(sys.as_ref(), cfg.eval.episodes, cfg.eval.steps, cfg.seed);
                    ts.save(&cfg.out_dir.join("testset"))?;
                    ts
                }
            };
            ts.check(sys.as_ref())?;
            let outcome = train(
                sys.as_ref(),
                &cfg.train,
                &ts,
                &TrainOptions {
                    settings: cfg.solver,
                    steps: ts.steps,
                    out_dir: Some(cfg.out_dir.clone()),
                },
            )?;
            write_curve_csv(&outcome.curve, std::io::stdout().lock())?;
            if outcome.clip_events > 0 {
                println!("gradient clipped in {} batches", outcome.clip_events);
            }
            if let Some(at) = outcome.diverged_at {
                finish(&cfg, &command_line, &["learning_curve.csv"])?;
                return Err(Error::Diverged { episodes: at }.into());
            }
            finish(&cfg, &command_line, &["policy.json", "learning_curve.csv"])
        }
        Command::Eval {
            policy,
            testset,
            out,
            repeats,
        } => {
            override_opt(&mut cfg.out_dir, out);
            override_opt(&mut cfg.eval.rl_repeats, repeats);
            let ts = TestSet::load(&testset)?;
            cfg.system = ts.system;
            let sys = cfg.build_system()?;
            let policy = parse_policy(&policy)?;
            let report =
                evaluate_policy(sys.as_ref(), &policy, &ts, cfg.eval.rl_repeats, &cfg.solver)?;
            let cmp = Comparison {
                reports: vec![report],
            };
            write_comparison(&cmp, &cfg.out_dir, "eval")?;
            print!("{cmp}");
            finish(
                &cfg,
                &command_line,
                &["eval.csv", "eval_episodes.csv", "eval.json"],
            )?;
            flag_failures(&cmp)
        }
        Command::Compare {
            policies,
            testset,
            out,
            repeats,
        } => {
            override_opt(&mut cfg.out_dir, out);
            override_opt(&mut cfg.eval.rl_repeats, repeats);
            let ts = TestSet::load(&testset)?;
            cfg.system = ts.system;
            let sys = cfg.build_system()?;
            let policies = policies
                .iter()
                .map(|p| parse_policy(p))
                .collect::<CliResult<Vec<_>>>()?;
            let cmp = compare(
                sys.as_ref(),
                &policies,
                &ts,
                cfg.eval.rl_repeats,
                &cfg.solver,
            )?;
            write_comparison(&cmp, &cfg.out_dir, "compare")?;
            print!("{cmp}");
            finish(
                &cfg,
                &command_line,
                &["compare.csv", "compare_episodes.csv", "compare.json"],
            )?;
            flag_failures(&cmp)
        }
        Command::Trace {
            policy,
            seed,
            testset,
            episode,
            system,
            out,
            steps,
        } => {
            override_opt(&mut cfg.system, system);
            override_opt(&mut cfg.out_dir, out);
            override_opt(&mut cfg.eval.steps, steps);
            let task = match (testset, episode) {
                (Some(path), Some(index)) => {
                    let ts = TestSet::load(&path)?;
                    if index >= ts.len() {
                        return Err(Failure::Usage(format!(
                            "test set has {} episodes",
                            ts.len()
                        )));
                    }
                    cfg.system = ts.system;
                    cfg.eval.steps = ts.steps;
                    ts.task(index, 0)
                }
                _ => EpisodeTask {
                    id: seed,
                    seeds: EpisodeSeeds::derive(seed, 0),
                    policy_seed: derive_seed(seed, stream::POLICY, 0),
                },
            };
            let sys = cfg.build_system()?;
            let policy = parse_policy(&policy)?;
            let options = EpisodeOptions {
                steps: cfg.eval.steps,
                settings: cfg.solver,
                record_plans: true,
                record_features: true,
            };
            let record = run_episode(sys.as_ref(), &policy, &task, &options)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            record.write_jsonl(BufWriter::new(File::create(
                cfg.out_dir.join("episode.jsonl"),
            )?))?;
            write_trace_csv(
                &record,
                BufWriter::new(File::create(cfg.out_dir.join("trace.csv"))?),
            )?;
            let mut files = vec!["episode.jsonl", "trace.csv"];
            if sys.kind() == SystemKind::Battery {
                let env = sys.episode(&task.seeds, cfg.eval.steps);
                let market = env.market().expect("battery episodes carry a market");
                market.write_csv(BufWriter::new(File::create(
                    cfg.out_dir.join("market.csv"),
                )?))?;
                write_forecast_csv(
                    &record,
                    sys.as_ref(),
                    BufWriter::new(File::create(cfg.out_dir.join("forecast.csv"))?),
                )?;
                files.extend(["market.csv", "forecast.csv"]);
            }
            println!(
                "{} on {}: G = {:.6}, {} recomputes in {} steps",
                policy,
                sys.kind(),
                record.total_return(),
                record.recompute_count(),
                record.steps.len()
            );
            finish(&cfg, &command_line, &files)
        }
    }
}

fn override_opt<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn parse_policy(text: &str) -> CliResult<PolicyKind> {
    if let Ok(kind) = text.parse::<PolicyKind>() {
        return Ok(kind);
    }
    let path = Path::new(text);
    if path.extension().is_some_and(|e| e == "json") {
        if !path.exists() {
            return Err(Failure::Usage(format!("policy file {text} does not exist")));
        }
        return Ok(PolicyKind::Logistic(PolicyParams::load(path)?));
    }
    Err(Failure::Usage(format!(
        "unknown policy `{text}`; expected always, never, periodic:T or a .json file"
    )))
}

fn write_comparison(cmp: &Comparison, dir: &Path, stem: &str) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    cmp.write_csv(BufWriter::new(File::create(
        dir.join(format!("{stem}.csv")),
    )?))?;
    cmp.write_episodes_csv(BufWriter::new(File::create(
        dir.join(format!("{stem}_episodes.csv")),
    )?))?;
    std::fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(cmp).map_err(Error::from)?,
    )?;
    Ok(())
}

fn flag_failures(cmp: &Comparison) -> CliResult<()> {
    let failed: usize = cmp.reports.iter().map(|r| r.failed_episodes).sum();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} episodes failed")));
    }
    Ok(())
}

fn write_trace_csv<W: Write>(record: &EpisodeRecord, mut w: W) -> std::io::Result<()> {
    let nx = record.terminal.state.len();
    let states: Vec<String> = (0..nx).map(|i| format!("x{i}")).collect();
    writeln!(
        w,
        "step,{},input,action,recompute,steps_since,cost",
        states.join(",")
    )?;
    for s in &record.steps {
        let x: Vec<String> = s.state.iter().map(|v| v.to_string()).collect();
        let action = match s.action {
            Some(a) => u8::from(a).to_string(),
            None => String::new(),
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.step,
            x.join(","),
            s.input[0],
            action,
            u8::from(s.recompute),
            s.steps_since,
            s.cost
        )?;
    }
    let x: Vec<String> = record
        .terminal
        .state
        .iter()
        .map(|v| v.to_string())
        .collect();
    writeln!(
        w,
        "{},{},,,,,{}",
        record.steps.len(),
        x.join(","),
        record.terminal.cost
    )
}

/// Truth next to the forecast the active plan was solved with.
fn write_forecast_csv<W: Write>(
    record: &EpisodeRecord,
    sys: &dyn SystemModel,
    mut w: W,
) -> std::io::Result<()> {
    let env = sys.episode(&record.header.seeds, record.steps.len());
    writeln!(
        w,
        "step,production,price,forecast_production,forecast_price,anchor,recompute"
    )?;
    let mut plan = None;
    for s in &record.steps {
        if let Some(p) = &s.plan {
            plan = Some(p);
        }
        let Some(p) = plan else { continue };
        let obs = env.observation(s.step);
        let f = &p.forecast[s.step - p.anchor_time];
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.step,
            obs[0],
            obs[1],
            f[0],
            f[1],
            p.anchor_time,
            u8::from(s.recompute)
        )?;
    }
    Ok(())
}

/// Writes the resolved config and a manifest of the produced files.
fn finish(cfg: &RunConfig, command_line: &[String], files: &[&str]) -> CliResult<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join("config.toml"))?;
    let manifest = serde_json::json!({
        "command": command_line,
        "version": env!("CARGO_PKG_VERSION"),
        "config": "config.toml",
        "files": files,
    });
    std::fs::write(
        cfg.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(Error::from)?,
    )?;
    Ok(())
}
