//! Command-line front end: scenario generation, behavior cloning, training,
//! evaluation, the oracle, and report aggregation.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure,
//! 4 protocol or transport error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dualcritic::codec::external::{ExternalEncoder, DEFAULT_TIMEOUT};
use dualcritic::codec::{build_scenario, Difficulty, FrameEncoder, GopSpec, Simulator};
use dualcritic::config::{Mode, TrainerConfig};
use dualcritic::eval::{
    evaluate_policy, mean_bd_rate, oracle_solve, read_rows, Policy, Report, Summary, ORACLE_GRID,
};
use dualcritic::nn::Checkpoint;
use dualcritic::training::{
    bootstrap_agent, clone_base, derive_seed, with_anchors, Agent, ConstantTeacher,
    Trainer,
};
use dualcritic::{Error, Result};

#[derive(Parser)]
#[command(name = "dualcritic", about = "Frame-level bit allocation with dual-critic DDPG")]
struct Cli {
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with TrainerConfig fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DifficultyArg {
    Slow,
    Fast,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum TeacherArg {
    Ladder,
    Constant,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Dual,
    Single,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    ConstantQp,
    BaseOnly,
    SingleCritic,
    DualCritic,
    Oracle,
}

#[derive(Subcommand)]
enum Command {
    /// Write scenario files to <out>/scenarios.
    Generate {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        gop_size: Option<usize>,
        #[arg(long, value_enum, default_value = "both")]
        difficulty: DifficultyArg,
    },
    /// Clone the base module from a teacher; writes <out>/agent.json.
    Clone {
        #[arg(long, value_enum, default_value = "ladder")]
        teacher: TeacherArg,
        /// QP of the constant teacher.
        #[arg(long, default_value_t = 32)]
        qp: u8,
        /// Directory of scenario files; the config pool otherwise.
        #[arg(long)]
        scenarios: Option<PathBuf>,
    },
    /// RL training; writes <out>/train_log.csv, checkpoints and <out>/agent.json.
    Train {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Agent checkpoint with a frozen base; cloned from the ladder teacher otherwise.
        #[arg(long)]
        agent: Option<PathBuf>,
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        /// External encoder program speaking the line protocol.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Evaluate a policy at every anchor QP; writes <out>/eval-<policy>.csv and a summary.
    Eval {
        #[arg(long, value_enum)]
        policy: PolicyArg,
        #[arg(long)]
        agent: Option<PathBuf>,
        #[arg(long)]
        scenarios: Option<PathBuf>,
        /// Also report BD-rate against this baseline policy.
        #[arg(long, value_enum)]
        anchor_policy: Option<PolicyArg>,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Solve every scenario exhaustively; writes <out>/oracle.csv.
    Oracle {
        #[arg(long)]
        scenarios: Option<PathBuf>,
        /// Comma-separated ascending QP grid.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<u8>>,
    },
    /// Summarize evaluation CSVs; writes <out>/report.csv.
    Report {
        /// Evaluation CSVs to summarize.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Evaluation CSV used as the BD-rate anchor.
        #[arg(long)]
        anchor: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dualcritic: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<TrainerConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainerConfig::load(p)?,
        None => TrainerConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_scenarios(dir: &Path) -> Result<Vec<GopSpec>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "json"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no scenario files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let g: GopSpec = serde_json::from_str(&fs::read_to_string(p)?)?;
            g.validate()?;
            Ok(g)
        })
        .collect()
}

/// Base scenarios (one per difficulty and seed) from a directory or the config.
fn scenarios(cfg: &TrainerConfig, dir: Option<&Path>) -> Result<Vec<GopSpec>> {
    match dir {
        Some(d) => load_scenarios(d),
        None => {
            let mut out = Vec::new();
            for &d in &cfg.difficulties {
                for k in 0..cfg.scenario_count as u64 {
                    out.push(build_scenario(cfg.gop_size, cfg.scenario_seed_base + k, d, cfg.target_rate_anchor[0])?);
                }
            }
            Ok(out)
        }
    }
}

fn encoder(program: Option<&Path>) -> Result<Box<dyn FrameEncoder>> {
    Ok(match program {
        Some(p) => Box::new(ExternalEncoder::launch(p, std::iter::empty::<&str>(), DEFAULT_TIMEOUT)?),
        None => Box::new(Simulator::new()),
    })
}

fn load_agent(path: &Path) -> Result<Agent> {
    Agent::from_checkpoint(&Checkpoint::load(path)?)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Generate {
            count,
            gop_size,
            difficulty,
        } => {
            if let Some(n) = count {
                cfg.scenario_count = *n;
            }
            if let Some(n) = gop_size {
                cfg.gop_size = *n;
            }
            cfg.difficulties = match difficulty {
                DifficultyArg::Slow => vec![Difficulty::Slow],
                DifficultyArg::Fast => vec![Difficulty::Fast],
                DifficultyArg::Both => vec![Difficulty::Slow, Difficulty::Fast],
            };
            cfg.validate()?;
            let dir = cli.out.join("scenarios");
            fs::create_dir_all(&dir)?;
            let list = scenarios(&cfg, None)?;
            for g in &list {
                let name = format!("{}-{:06}.json", g.difficulty, g.seed);
                fs::write(dir.join(name), serde_json::to_string_pretty(g)? + "\n")?;
            }
            println!("wrote {} scenarios to {}", list.len(), dir.display());
        }
        Command::Clone {
            teacher,
            qp,
            scenarios: dir,
        } => {
            let pool = with_anchors(&scenarios(&cfg, dir.as_deref())?, &cfg.target_rate_anchor)?;
            let (agent, outcome) = match teacher {
                TeacherArg::Ladder => bootstrap_agent(&cfg, &pool)?,
                TeacherArg::Constant => {
                    let outcome = clone_base(&ConstantTeacher(*qp), &pool, &cfg, derive_seed(cfg.seed, 1))?;
                    let mut agent = Agent::new(&cfg.actor_widths, derive_seed(cfg.seed, 2))?;
                    agent.set_base(outcome.base.clone())?;
                    agent.freeze_base();
                    (agent, outcome)
                }
            };
            agent.to_checkpoint().save(&cli.out.join("agent.json"))?;
            println!(
                "cloned in {} steps: train MAE {:.3}, held-out MAE {:.3}{}",
                outcome.steps,
                outcome.train_mae,
                outcome.held_out_mae,
                if outcome.target_met { "" } else { " (target not met)" }
            );
        }
        Command::Train {
            mode,
            agent,
            scenarios: dir,
            episodes,
            lambda,
            encoder: program,
        } => {
            if let Some(m) = mode {
                cfg.mode = match m {
                    ModeArg::Dual => Mode::Dual,
                    ModeArg::Single => Mode::Single,
                };
            }
            if cfg.mode == Mode::Clone {
                return Err(Error::Config("use the clone subcommand for mode 'clone'".into()));
            }
            if let Some(n) = episodes {
                cfg.episodes = *n;
            }
            if let Some(l) = lambda {
                cfg.lambda_single_critic = *l;
            }
            cfg.validate()?;
            let pool = with_anchors(&scenarios(&cfg, dir.as_deref())?, &cfg.target_rate_anchor)?;
            let agent = match agent {
                Some(p) => load_agent(p)?,
                None => bootstrap_agent(&cfg, &pool)?.0,
            };
            let mut env = encoder(program.as_deref())?;
            let ck_dir = cli.out.join("checkpoints");
            fs::create_dir_all(&ck_dir)?;
            let mut trainer = Trainer::new(agent, cfg.clone())?;
            let log = trainer.train(env.as_mut(), &pool, |episode, ck| {
                ck.save(&ck_dir.join(format!("episode-{episode:06}.json")))
            })?;
            log.write_csv(fs::File::create(cli.out.join("train_log.csv"))?)?;
            trainer.agent().to_checkpoint().save(&cli.out.join("agent.json"))?;
            let aborted = log.rows.iter().filter(|r| r.bits.is_none()).count();
            println!(
                "trained {} episodes ({} aborted) in {} mode",
                log.rows.len(),
                aborted,
                cfg.mode.as_str()
            );
        }
        Command::Eval {
            policy,
            agent,
            scenarios: dir,
            anchor_policy,
            encoder: program,
        } => {
            let list = scenarios(&cfg, dir.as_deref())?;
            let loaded = agent.as_deref().map(load_agent).transpose()?;
            let mut env = encoder(program.as_deref())?;
            let mut report = evaluate(env.as_mut(), *policy, loaded.as_ref(), &list, &cfg)?;
            if let Some(a) = anchor_policy {
                let anchor = evaluate(env.as_mut(), *a, loaded.as_ref(), &list, &cfg)?;
                report.compare_to(&anchor)?;
            }
            let name = report.summary.policy.clone();
            report.write_csv(fs::File::create(cli.out.join(format!("eval-{name}.csv")))?)?;
            fs::write(cli.out.join(format!("eval-{name}-summary.json")), report.summary_json()? + "\n")?;
            print_summary(&report.summary);
        }
        Command::Oracle { scenarios: dir, grid } => {
            let grid = grid.clone().unwrap_or_else(|| ORACLE_GRID.to_vec());
            let list = scenarios(&cfg, dir.as_deref())?;
            let mut w = csv::Writer::from_path(cli.out.join("oracle.csv"))?;
            w.write_record(["difficulty", "scenario_seed", "anchor_qp", "budget", "bits", "mse_total", "feasible", "qps"])?;
            for base in &list {
                for &a in &cfg.target_rate_anchor {
                    let g = base.with_anchor(a)?;
                    let o = oracle_solve(&g, &grid)?;
                    let qps: Vec<String> = o.best_qps.iter().map(u8::to_string).collect();
                    w.write_record([
                        g.difficulty.to_string(),
                        g.seed.to_string(),
                        a.to_string(),
                        g.budget.to_string(),
                        o.bits_used.to_string(),
                        o.best_total_mse.to_string(),
                        u8::from(o.feasible).to_string(),
                        qps.join("-"),
                    ])?;
                }
            }
            w.flush()?;
            println!("solved {} instances", list.len() * cfg.target_rate_anchor.len());
        }
        Command::Report { inputs, anchor } => {
            let anchor_rows = anchor.as_deref().map(|p| read_rows(fs::File::open(p)?)).transpose()?;
            let mut w = csv::Writer::from_path(cli.out.join("report.csv"))?;
            for path in inputs {
                let rows = read_rows(fs::File::open(path)?)?;
                let mut s = Summary::from_rows(&rows)?;
                if let Some(a) = &anchor_rows {
                    let (bd, n) = mean_bd_rate(a, &rows)?;
                    s.anchor_policy = a.first().map(|r| r.policy.clone());
                    s.bd_rate = bd;
                    s.bd_rate_scenarios = n;
                }
                print_summary(&s);
                w.serialize(&s)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn evaluate(
    env: &mut dyn FrameEncoder,
    policy: PolicyArg,
    agent: Option<&Agent>,
    list: &[GopSpec],
    cfg: &TrainerConfig,
) -> Result<Report> {
    let need = || agent.ok_or_else(|| Error::Config("this policy needs --agent".into()));
    let p = match policy {
        PolicyArg::ConstantQp => Policy::ConstantQp,
        PolicyArg::BaseOnly => Policy::BaseOnly(need()?),
        PolicyArg::SingleCritic => Policy::SingleCritic(need()?),
        PolicyArg::DualCritic => Policy::DualCritic(need()?),
        PolicyArg::Oracle => Policy::Oracle(&ORACLE_GRID),
    };
    evaluate_policy(env, p, list, &cfg.target_rate_anchor)
}

fn print_summary(s: &Summary) {
    print!(
        "{}: {} episodes, rate deviation {:.3}%, mean PSNR {:.3} dB, mean MSE {:.3}, over budget {}",
        s.policy, s.episodes, s.rate_deviation, s.mean_psnr, s.mean_mse, s.over_budget_episodes
    );
    match (&s.anchor_policy, s.bd_rate) {
        (Some(a), Some(bd)) => println!(", BD-rate vs {a} {bd:.3}% over {} scenarios", s.bd_rate_scenarios),
        _ => println!(),
    }
}
