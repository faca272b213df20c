//! End-to-end orchestration: scenario → adaptation → machine labels → crowd.
//!
//! Every run is driven by one seed. All artifacts land in the output directory
//! under fixed names, and the run report refers to them by file name only, so two
//! runs with the same configuration produce byte-identical reports wherever they
//! were written.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{run_pda, PdaConfig, PdaResult};
use crate::crowd::{
    run_simulation, spawn_workers, wmv_baseline, CrowdTask, EngineConfig, Ratios, SimulationReport, TaskSet,
};
use crate::open_set::{AssignConfig, Label, MachineLabeling, MachineMetrics, PreparedTarget};
use crate::synth::{make_default_scenario, ClassId, Sample, Scenario, Style};
use crate::{Error, Result};

pub const SCENARIO_FILE: &str = "scenario.json";
pub const PDA_FILE: &str = "pda.json";
pub const LABELS_FILE: &str = "machine_labels.csv";
pub const TASKS_FILE: &str = "tasks.json";
pub const SIMULATION_FILE: &str = "simulation.json";
pub const REPORT_FILE: &str = "run_report.json";

/// Values swept by `ablate` when none are given.
pub const DEFAULT_ALPHAS: [f64; 7] = [0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSpec {
    /// Only `alpha` is supported.
    pub parameter: String,
    pub values: Vec<f64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            parameter: "alpha".into(),
            values: DEFAULT_ALPHAS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub style: Style,
    /// Drives every stage; the `seed` fields of the nested configs are overwritten.
    pub seed: u64,
    pub pda: PdaConfig,
    pub assign: AssignConfig,
    pub engine: EngineConfig,
    pub ratios: Ratios,
    pub workers: usize,
    pub out_dir: PathBuf,
    pub ablation: AblationSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            style: Style::O31,
            seed: 0,
            pda: PdaConfig::default(),
            assign: AssignConfig::default(),
            engine: EngineConfig::default(),
            ratios: Ratios::RATIO_2,
            workers: 30,
            out_dir: PathBuf::from("out"),
            ablation: AblationSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("at least one worker is required".into()));
        }
        self.pda.validate()?;
        self.assign.validate()?;
        self.engine.validate()?;
        self.ratios.validate()?;
        self.ratios.split(self.workers)?;
        Ok(())
    }

    pub fn pda_config(&self) -> PdaConfig {
        PdaConfig {
            seed: self.seed,
            ..self.pda.clone()
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            seed: self.seed,
            ..self.engine.clone()
        }
    }
}

/// Builds the crowd task set: every target sample in id order with its machine
/// label, over the classes of the source domains that survived adaptation.
pub fn build_task_set(pda: &PdaResult, target: &[Sample], labeling: &MachineLabeling) -> Result<TaskSet> {
    let label_space: BTreeSet<ClassId> = pda
        .scenario
        .domains
        .iter()
        .filter(|d| pda.surviving_domains.contains(&d.domain_id))
        .flat_map(|d| d.class_set.iter().copied())
        .collect();
    let mut machine: Vec<(u64, Label)> = labeling.all().into_iter().map(|m| (m.task_id, m.label)).collect();
    machine.sort_by_key(|&(id, _)| id);
    let mut tasks: Vec<CrowdTask> = Vec::with_capacity(target.len());
    for s in target {
        let label = machine
            .binary_search_by_key(&s.id, |&(id, _)| id)
            .map(|i| machine[i].1)
            .map_err(|_| Error::Contract(format!("target sample {} has no machine label", s.id)))?;
        tasks.push(CrowdTask {
            task_id: s.id,
            truth: s.true_class,
            machine_label: label,
        });
    }
    tasks.sort_by_key(|t| t.task_id);
    let set = TaskSet {
        label_space: label_space.into_iter().collect(),
        tasks,
    };
    set.validate()?;
    Ok(set)
}

/// Everything up to (not including) the crowd stage.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub pda: PdaResult,
    pub target: PreparedTarget,
    pub labeling: MachineLabeling,
    pub metrics: MachineMetrics,
    pub task_set: TaskSet,
}

pub fn prepare(cfg: &PipelineConfig) -> Result<Prepared> {
    cfg.validate()?;
    let scenario = make_default_scenario(cfg.style, cfg.seed);
    scenario.validate().map_err(|e| e.in_stage("generate"))?;
    let pda = run_pda(&scenario, &cfg.pda_config()).map_err(|e| e.in_stage("adapt"))?;
    let assign = || -> Result<_> {
        let target = PreparedTarget::new(&pda)?;
        let labeling = target.label(&cfg.assign)?;
        let metrics = MachineMetrics::evaluate(&labeling, &target.target)?;
        let task_set = build_task_set(&pda, &target.target, &labeling)?;
        Ok((target, labeling, metrics, task_set))
    };
    let (target, labeling, metrics, task_set) = assign().map_err(|e| e.in_stage("assign"))?;
    Ok(Prepared {
        scenario,
        pda,
        target,
        labeling,
        metrics,
        task_set,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub scenario: String,
    pub pda: String,
    pub machine_labels: String,
    pub tasks: String,
    pub simulation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub accuracy: f64,
    pub machine_precision: f64,
    pub machine_recall: f64,
    pub machine_yield: f64,
    pub annotations_aggregated: usize,
    pub annotations_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub style: Style,
    pub alpha: f64,
    pub ratios: Ratios,
    pub workers: usize,
    pub surviving_domains: Vec<usize>,
    pub removed_domains: Vec<usize>,
    pub shared_classes: Vec<ClassId>,
    pub label_space: Vec<ClassId>,
    pub n_tasks: usize,
    pub n_unknown: usize,
    pub artifacts: Artifacts,
    pub summary: RunSummary,
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Full run, persisting every intermediate artifact into `cfg.out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    let out = cfg.out_dir.as_path();
    fs::create_dir_all(out)?;
    let prepared = prepare(cfg)?;
    prepared
        .scenario
        .save(&out.join(SCENARIO_FILE))
        .map_err(|e| e.in_stage("generate"))?;
    prepared.pda.save(&out.join(PDA_FILE)).map_err(|e| e.in_stage("adapt"))?;
    prepared
        .labeling
        .write_csv(&out.join(LABELS_FILE))
        .and_then(|_| prepared.task_set.save(&out.join(TASKS_FILE)))
        .map_err(|e| e.in_stage("assign"))?;

    let simulate = || -> Result<SimulationReport> {
        let workers = spawn_workers(cfg.workers, &cfg.ratios, cfg.seed)?;
        let sim = run_simulation(&prepared.task_set, &workers, &cfg.engine_config())?;
        sim.save(&out.join(SIMULATION_FILE))?;
        Ok(sim)
    };
    let sim = simulate().map_err(|e| e.in_stage("simulate"))?;

    let m = &prepared.metrics;
    let report = RunReport {
        seed: cfg.seed,
        style: cfg.style,
        alpha: cfg.assign.alpha,
        ratios: cfg.ratios,
        workers: cfg.workers,
        surviving_domains: prepared.pda.surviving_domains.clone(),
        removed_domains: prepared.pda.removed_domains(),
        shared_classes: prepared.pda.shared_classes.clone(),
        label_space: prepared.task_set.label_space.clone(),
        n_tasks: m.n_tasks,
        n_unknown: m.n_tasks - m.n_labeled,
        artifacts: Artifacts {
            scenario: SCENARIO_FILE.into(),
            pda: PDA_FILE.into(),
            machine_labels: LABELS_FILE.into(),
            tasks: TASKS_FILE.into(),
            simulation: SIMULATION_FILE.into(),
        },
        summary: RunSummary {
            accuracy: sim.summary.accuracy,
            machine_precision: m.precision,
            machine_recall: m.recall,
            machine_yield: m.yield_pr,
            annotations_aggregated: sim.summary.annotations_aggregated,
            annotations_total: sim.summary.annotations_total,
        },
    };
    report.save(&out.join(REPORT_FILE)).map_err(|e| e.in_stage("report"))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub alpha: f64,
    pub p: f64,
    pub r: f64,
    pub pr: f64,
}

/// Machine-label precision / coverage per `alpha`, sorted by `alpha`.
/// Adaptation runs once; only the assignment is repeated.
pub fn ablate_alpha(cfg: &PipelineConfig, values: &[f64]) -> Result<Vec<AblationRow>> {
    if values.len() < 2 {
        return Err(Error::Config("an alpha sweep needs at least two values".into()));
    }
    let mut alphas = values.to_vec();
    for &a in &alphas {
        AssignConfig { alpha: a }.validate()?;
    }
    alphas.sort_by(f64::total_cmp);
    let prepared = prepare(cfg)?;
    ablate_prepared(&prepared.target, &alphas)
}

/// Sweep over an already prepared target; `alphas` are used in the given order.
pub fn ablate_prepared(target: &PreparedTarget, alphas: &[f64]) -> Result<Vec<AblationRow>> {
    alphas
        .iter()
        .map(|&alpha| {
            let labeling = target.label(&AssignConfig { alpha })?;
            let m = MachineMetrics::evaluate(&labeling, &target.target)?;
            Ok(AblationRow {
                alpha,
                p: m.precision,
                r: m.recall,
                pr: m.yield_pr,
            })
        })
        .collect::<Result<_>>()
        .map_err(|e: Error| e.in_stage("assign"))
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub accuracy: f64,
    pub annotations_aggregated: usize,
    pub annotations_total: usize,
}

impl From<&SimulationReport> for MethodResult {
    fn from(r: &SimulationReport) -> Self {
        Self {
            accuracy: r.summary.accuracy,
            annotations_aggregated: r.summary.annotations_aggregated,
            annotations_total: r.summary.annotations_total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub ratios: Ratios,
    pub workers: usize,
    pub oscrowd: MethodResult,
    pub wmv: MethodResult,
}

/// Both crowd methods on the same tasks, worker roster and seed.
pub fn compare_on_tasks(
    task_set: &TaskSet,
    ratios: &Ratios,
    n_workers: usize,
    engine: &EngineConfig,
) -> Result<Comparison> {
    let go = || -> Result<Comparison> {
        let workers = spawn_workers(n_workers, ratios, engine.seed)?;
        let ours = run_simulation(task_set, &workers, engine)?;
        let wmv = wmv_baseline(task_set, &workers, engine)?;
        Ok(Comparison {
            seed: engine.seed,
            ratios: *ratios,
            workers: n_workers,
            oscrowd: (&ours).into(),
            wmv: (&wmv).into(),
        })
    };
    go().map_err(|e| e.in_stage("simulate"))
}

pub fn compare_baseline(cfg: &PipelineConfig) -> Result<Comparison> {
    let prepared = prepare(cfg)?;
    compare_on_tasks(&prepared.task_set, &cfg.ratios, cfg.workers, &cfg.engine_config())
}
