//! `bench`: run servo suites, train the policy, sweep ablations, export plots.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cns_core::bench::{
    ablation_config, parse_json, run_suite, write_results, AblationAxis, BenchmarkConfig, Controller, Summary,
    TrajectoryPoint,
};
use cns_core::plot;
use cns_core::policy::PolicyParams;
use cns_core::train::{train, TrainConfig};
use cns_core::Error;

#[derive(Parser)]
#[command(name = "bench", version, about = "Visual servoing benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct SuiteArgs {
    /// Benchmark config (JSON). Defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cns")]
    controller: Controller,
    /// Policy checkpoint, required for the cns controller.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Seed range `start..end` (end exclusive), overriding the config.
    #[arg(long)]
    seed_range: Option<String>,
    /// Distance prior in meters, overriding the config.
    #[arg(long)]
    distance_prior: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one suite and write episodes.csv, summary.json and timing files.
    Run {
        #[command(flatten)]
        suite: SuiteArgs,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Train the policy.
    Train {
        /// Training config (JSON). Defaults apply to omitted fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "train_out")]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run one suite per value of an ablation axis.
    Ablate {
        #[command(flatten)]
        suite: SuiteArgs,
        #[arg(long, value_enum)]
        axis: AblationAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Render error curves and trajectories from a results directory to SVG.
    Export {
        /// Directory holding trajectories.jsonl.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
        /// Episodes to draw.
        #[arg(long, default_value_t = 8)]
        max_episodes: usize,
    },
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: 1,
            msg: e.to_string(),
        }
    }
}

fn config_failure(path: &Path, e: Error) -> Failure {
    let code = match e {
        Error::Io(_) => 1,
        _ => 2,
    };
    Failure {
        code,
        msg: format!("{}: {e}", path.display()),
    }
}

fn parse_seed_range(s: &str) -> Result<[u64; 2], Failure> {
    let bad = || Failure {
        code: 2,
        msg: format!("--seed-range `{s}`: expected start..end"),
    };
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    Ok([a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?])
}

fn load_suite(args: &SuiteArgs) -> Result<(BenchmarkConfig, Option<PolicyParams>), Failure> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_failure(p, e.into()))?;
            parse_json::<BenchmarkConfig>(&text).map_err(|e| config_failure(p, e))?
        }
        None => BenchmarkConfig::default(),
    };
    if let Some(r) = &args.seed_range {
        cfg.seeds = parse_seed_range(r)?;
    }
    if let Some(d) = args.distance_prior {
        cfg.distance_prior = Some(d);
    }
    cfg.validate().map_err(|e| Failure {
        code: 2,
        msg: e.to_string(),
    })?;
    let params = match (&args.checkpoint, args.controller) {
        (Some(p), _) => Some(PolicyParams::load_file(p)?.0),
        (None, Controller::Cns) => {
            return Err(Failure {
                code: 2,
                msg: "--checkpoint is required for the cns controller".into(),
            })
        }
        (None, _) => None,
    };
    Ok((cfg, params))
}

fn set_threads(threads: Option<usize>) -> Result<(), Failure> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure {
                code: 1,
                msg: e.to_string(),
            })?;
    }
    Ok(())
}

fn print_summary(label: &str, s: &Summary) {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
    println!(
        "{label}: SR {:.2} ({:.2}, {:.2}) over {} episodes; SR@alt {:.2}; median RE {} deg, median TE {} mm",
        s.sr.percent,
        s.sr.ci_low,
        s.sr.ci_high,
        s.episodes,
        s.sr_alt.percent,
        opt(s.median_final_re_deg),
        opt(s.median_final_te_mm)
    );
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { suite, out } => {
            set_threads(suite.threads)?;
            let (cfg, params) = load_suite(&suite)?;
            let records = run_suite(&cfg, suite.controller, params.as_ref())?;
            let summary = write_results(&out, &records)?;
            print_summary(suite.controller.name(), &summary);
        }
        Command::Train { config, out, threads } => {
            set_threads(threads)?;
            let cfg = match &config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| config_failure(p, e.into()))?;
                    let cfg: TrainConfig = parse_json(&text).map_err(|e| config_failure(p, e))?;
                    cfg.validate().map_err(|e| config_failure(p, e))?;
                    cfg
                }
                None => TrainConfig::default(),
            };
            train(cfg, &out)?;
            println!("checkpoint written to {}", out.join("policy.ckpt").display());
        }
        Command::Ablate {
            suite,
            axis,
            values,
            out,
        } => {
            set_threads(suite.threads)?;
            let (base, params) = load_suite(&suite)?;
            let mut table = csv::Writer::from_path({
                std::fs::create_dir_all(&out).map_err(Error::from)?;
                out.join("ablation.csv")
            })
            .map_err(Error::from)?;
            table
                .write_record(["value", "episodes", "sr", "sr_ci_low", "sr_ci_high", "sr_alt", "median_re_deg", "median_te_mm"])
                .map_err(Error::from)?;
            for v in &values {
                let cfg = ablation_config(&base, axis, v).map_err(|e| Failure {
                    code: 2,
                    msg: e.to_string(),
                })?;
                let records = run_suite(&cfg, suite.controller, params.as_ref())?;
                let summary = write_results(&out.join(sanitize(v)), &records)?;
                print_summary(v, &summary);
                let opt = |x: Option<f64>| x.map_or(String::new(), |x| format!("{x:.6}"));
                table
                    .write_record([
                        v.clone(),
                        summary.episodes.to_string(),
                        format!("{:.6}", summary.sr.percent),
                        format!("{:.6}", summary.sr.ci_low),
                        format!("{:.6}", summary.sr.ci_high),
                        format!("{:.6}", summary.sr_alt.percent),
                        opt(summary.median_final_re_deg),
                        opt(summary.median_final_te_mm),
                    ])
                    .map_err(Error::from)?;
            }
            table.flush().map_err(Error::from)?;
        }
        Command::Export {
            input,
            out,
            max_episodes,
        } => {
            let path = input.join("trajectories.jsonl");
            let text = std::fs::read_to_string(&path).map_err(|e| Failure {
                code: 1,
                msg: format!("{}: {e} (run with \"trajectory_stride\" > 0)", path.display()),
            })?;
            let mut episodes = Vec::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let v: serde_json::Value = serde_json::from_str(line).map_err(Error::from)?;
                let traj: Vec<TrajectoryPoint> = serde_json::from_value(v["trajectory"].clone()).map_err(Error::from)?;
                let label = format!("{} seed {}", v["controller"].as_str().unwrap_or("?"), v["seed"]);
                episodes.push((label, traj));
            }
            episodes.truncate(max_episodes);
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            let (re, te) = plot::error_curves(&episodes);
            std::fs::write(out.join("rotation_error.svg"), re).map_err(Error::from)?;
            std::fs::write(out.join("translation_error.svg"), te).map_err(Error::from)?;
            std::fs::write(out.join("trajectory.svg"), plot::trajectory_plot(&episodes)).map_err(Error::from)?;
            println!("plots written to {}", out.display());
        }
    }
    Ok(())
}

fn sanitize(v: &str) -> String {
    v.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
