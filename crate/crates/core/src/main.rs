use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use opencrowd::adapt::{run_pda, PdaResult};
use opencrowd::crowd::{run_simulation, spawn_workers, wmv_baseline, Ratios, SimulationReport, TaskSet};
use opencrowd::open_set::{AssignConfig, MachineMetrics, PreparedTarget};
use opencrowd::pipeline::{
    ablate_alpha, build_task_set, compare_baseline, run_pipeline, write_ablation_csv, PipelineConfig, REPORT_FILE,
};
use opencrowd::synth::{make_default_scenario, Scenario, Style};
use opencrowd::{Error, Result};

#[derive(Parser)]
#[command(name = "opencrowd", version, about = "Open-set crowdsourcing pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by the pipeline commands; flags override the JSON config.
#[derive(Args)]
struct Overrides {
    /// JSON pipeline configuration; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    style: Option<Style>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Expert/reliable/unreliable percentages, e.g. 20,60,20 or ratio-2.
    #[arg(long)]
    ratios: Option<Ratios>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self, seed: Option<u64>) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = seed {
            cfg.seed = v;
        }
        if let Some(v) = self.style {
            cfg.style = v;
        }
        if let Some(v) = self.tau {
            cfg.pda.tau = v;
        }
        if let Some(v) = self.alpha {
            cfg.assign.alpha = v;
        }
        if let Some(v) = self.gamma {
            cfg.engine.gamma = v;
        }
        if let Some(v) = self.ratios {
            cfg.ratios = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Oscrowd,
    Wmv,
}

#[derive(Subcommand)]
enum Command {
    /// Write a default synthetic scenario.
    Generate {
        #[arg(long, default_value = "o31")]
        style: Style,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-round adversarial adaptation of a scenario.
    Adapt {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Machine-label the target of an adaptation result.
    Assign {
        #[arg(long)]
        pda: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        /// Label CSV.
        #[arg(long)]
        out: PathBuf,
        /// Also write the crowd task set (JSON) for `simulate`.
        #[arg(long)]
        tasks: Option<PathBuf>,
    },
    /// Crowd simulation over a task set.
    Simulate {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value = "oscrowd")]
        method: Method,
        /// Report path; printed summary only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Full pipeline, writing every artifact and the run report to the output directory.
    Run {
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Machine-label precision/coverage over a sweep of alpha values.
    Ablate {
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated; defaults to the config's ablation values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// OSCrowd against weighted majority voting on identical tasks and workers.
    Compare {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate { style, seed, out } => {
            let scenario = make_default_scenario(style, seed);
            scenario.validate()?;
            scenario.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Adapt {
            scenario,
            out,
            seed,
            overrides,
        } => {
            let scenario = Scenario::load(&scenario).map_err(|e| e.in_stage("generate"))?;
            let mut cfg = overrides.resolve(None)?.pda;
            cfg.seed = seed.unwrap_or(scenario.seed);
            let pda = run_pda(&scenario, &cfg).map_err(|e| e.in_stage("adapt"))?;
            pda.save(&out)?;
            println!("surviving domains {:?}, removed {:?}", pda.surviving_domains, pda.removed_domains());
            println!("shared classes {:?}", pda.shared_classes);
        }
        Command::Assign { pda, alpha, out, tasks } => {
            let pda = PdaResult::load(&pda).map_err(|e| e.in_stage("adapt"))?;
            let cfg = AssignConfig {
                alpha: alpha.unwrap_or(AssignConfig::default().alpha),
            };
            cfg.validate()?;
            let target = PreparedTarget::new(&pda).map_err(|e| e.in_stage("assign"))?;
            let labeling = target.label(&cfg).map_err(|e| e.in_stage("assign"))?;
            labeling.write_csv(&out)?;
            if let Some(path) = tasks {
                build_task_set(&pda, &target.target, &labeling)?.save(&path)?;
            }
            let m = MachineMetrics::evaluate(&labeling, &target.target)?;
            println!(
                "alpha {:.3}: labeled {}/{}, p {:.3}, r {:.3}, p*r {:.3}",
                m.alpha, m.n_labeled, m.n_tasks, m.precision, m.recall, m.yield_pr
            );
        }
        Command::Simulate {
            tasks,
            seed,
            method,
            out,
            overrides,
        } => {
            let cfg = overrides.resolve(Some(seed))?;
            let task_set = TaskSet::load(&tasks)?;
            let workers = spawn_workers(cfg.workers, &cfg.ratios, seed)?;
            let engine = cfg.engine_config();
            let report: SimulationReport = match method {
                Method::Oscrowd => run_simulation(&task_set, &workers, &engine),
                Method::Wmv => wmv_baseline(&task_set, &workers, &engine),
            }
            .map_err(|e| e.in_stage("simulate"))?;
            if let Some(path) = out {
                report.save(&path)?;
            }
            let s = &report.summary;
            println!(
                "{}: accuracy {:.3}, annotations {} aggregated / {} total, {} incomplete",
                s.method, s.accuracy, s.annotations_aggregated, s.annotations_total, s.incomplete_tasks
            );
        }
        Command::Run { seed, overrides } => {
            let cfg = overrides.resolve(Some(seed))?;
            let report = run_pipeline(&cfg)?;
            let s = &report.summary;
            println!("wrote {}", cfg.out_dir.join(REPORT_FILE).display());
            println!(
                "accuracy {:.3}, p {:.3}, r {:.3}, p*r {:.3}, annotations {}",
                s.accuracy, s.machine_precision, s.machine_recall, s.machine_yield, s.annotations_aggregated
            );
        }
        Command::Ablate {
            seed,
            values,
            out,
            overrides,
        } => {
            let cfg = overrides.resolve(seed)?;
            if cfg.ablation.parameter != "alpha" {
                return Err(Error::Config(format!(
                    "unsupported ablation parameter `{}` (only alpha)",
                    cfg.ablation.parameter
                )));
            }
            let values = if values.is_empty() { cfg.ablation.values.clone() } else { values };
            let rows = ablate_alpha(&cfg, &values)?;
            write_ablation_csv(&rows, &out)?;
            println!("{:>6} {:>6} {:>6} {:>6}", "alpha", "p", "r", "p*r");
            for r in &rows {
                println!("{:>6.3} {:>6.3} {:>6.3} {:>6.3}", r.alpha, r.p, r.r, r.pr);
            }
        }
        Command::Compare { seed, out, overrides } => {
            let cfg = overrides.resolve(Some(seed))?;
            let cmp = compare_baseline(&cfg)?;
            if let Some(path) = out {
                write_json(&path, &cmp)?;
            }
            println!(
                "oscrowd accuracy {:.3} ({} annotations), wmv accuracy {:.3} ({} annotations)",
                cmp.oscrowd.accuracy, cmp.oscrowd.annotations_aggregated, cmp.wmv.accuracy, cmp.wmv.annotations_aggregated
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
