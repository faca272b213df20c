//! Online crowd simulation, truth inference and the weighted-majority baseline.
//!
//! Workers arrive one at a time and receive a batch of tasks chosen by their current
//! pool. Every `update_every` arrivals the engine re-runs EM over the aggregated
//! annotations, recomputes task completion and re-places workers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::open_set::Label;
use crate::synth::ClassId;
use crate::{stream_rng, Error, Result};

const WORKER_STREAM: u64 = 10;
const SIMULATION_STREAM: u64 = 11;
/// Arrivals allowed per task and batch slot before the simulation gives up.
const ARRIVAL_CAP_FACTOR: usize = 50;
/// Accuracy assumed for a worker with no scored answers yet.
const PRIOR_ACCURACY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkerType {
    Expert,
    Reliable,
    Unreliable,
}

impl WorkerType {
    pub const ALL: [WorkerType; 3] = [WorkerType::Expert, WorkerType::Reliable, WorkerType::Unreliable];

    /// Interval the generative accuracy is drawn from.
    pub fn accuracy_range(self) -> (f64, f64) {
        match self {
            WorkerType::Expert => (0.8, 1.0),
            WorkerType::Reliable => (0.4, 0.8),
            WorkerType::Unreliable => (0.1, 0.4),
        }
    }

    pub fn conscientious(self) -> u8 {
        match self {
            WorkerType::Unreliable => 0,
            _ => 1,
        }
    }

    /// The pool a correctly identified worker of this type ends up in.
    pub fn matching_pool(self) -> Pool {
        match self {
            WorkerType::Expert => Pool::Expert,
            WorkerType::Reliable => Pool::Reliable,
            WorkerType::Unreliable => Pool::Unreliable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Behavior {
    Honest,
    /// Always answers `label_space[pick % label_space.len()]`.
    Constant { pick: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pool {
    #[serde(rename = "unplaced")]
    Unplaced,
    #[serde(rename = "W_u")]
    Unreliable,
    #[serde(rename = "W_r")]
    Reliable,
    #[serde(rename = "W_e")]
    Expert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Worker {
    pub id: usize,
    pub kind: WorkerType,
    pub true_r: u8,
    pub true_a: f64,
    pub behavior: Behavior,
    pub n_correct: usize,
    pub n_total: usize,
    /// Starts at the prior and follows `n_correct / n_total` once anything is scored.
    pub a_est: f64,
    pub pool: Pool,
    /// Every answer given, by label; feeds the constant-answer check.
    pub label_counts: BTreeMap<ClassId, usize>,
}

impl Worker {
    pub fn new(id: usize, kind: WorkerType, true_a: f64, behavior: Behavior) -> Self {
        Self {
            id,
            kind,
            true_r: kind.conscientious(),
            true_a,
            behavior,
            n_correct: 0,
            n_total: 0,
            a_est: PRIOR_ACCURACY,
            pool: Pool::Unplaced,
            label_counts: BTreeMap::new(),
        }
    }

    /// Fraction of answers that went to the most frequent label; 0 with no answers.
    pub fn modal_fraction(&self) -> f64 {
        let total: usize = self.label_counts.values().sum();
        match self.label_counts.values().max() {
            Some(&m) if total > 0 => m as f64 / total as f64,
            _ => 0.0,
        }
    }

    /// Sets the counters and, when anything was scored, the accuracy estimate.
    pub fn update_accuracy(&mut self, n_correct: usize, n_total: usize) -> Option<f64> {
        self.n_correct = n_correct;
        self.n_total = n_total;
        let a = accuracy_from_counts(n_correct, n_total)?;
        self.a_est = a;
        Some(a)
    }
}

/// `n_correct / n_total`, or `None` without history.
pub fn accuracy_from_counts(n_correct: usize, n_total: usize) -> Option<f64> {
    (n_total > 0).then(|| n_correct.min(n_total) as f64 / n_total as f64)
}

/// Percentages of experts, reliable and unreliable workers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub expert: f64,
    pub reliable: f64,
    pub unreliable: f64,
}

impl Ratios {
    pub const RATIO_1: Ratios = Ratios::new(10.0, 70.0, 20.0);
    pub const RATIO_2: Ratios = Ratios::new(20.0, 60.0, 20.0);
    pub const RATIO_3: Ratios = Ratios::new(20.0, 70.0, 10.0);

    pub const fn new(expert: f64, reliable: f64, unreliable: f64) -> Self {
        Self {
            expert,
            reliable,
            unreliable,
        }
    }

    fn parts(&self) -> [f64; 3] {
        [self.expert, self.reliable, self.unreliable]
    }

    pub fn validate(&self) -> Result<()> {
        let parts = self.parts();
        if parts.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::Config(format!("worker ratios must be non-negative, got {self}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 100.0).abs() > 1e-9 {
            return Err(Error::Config(format!("worker ratios must sum to 100, got {sum}")));
        }
        Ok(())
    }

    /// Largest-remainder split of `count` workers; leftover seats go to the largest
    /// fractional parts, earlier types first on ties.
    pub fn split(&self, count: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let quotas = self.parts().map(|p| count as f64 * p / 100.0);
        let mut seats = quotas.map(|q| q.floor() as usize);
        let mut left = count - seats.iter().sum::<usize>();
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| {
            let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            seats[i] += 1;
            left -= 1;
        }
        Ok(seats)
    }
}

impl fmt::Display for Ratios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.expert, self.reliable, self.unreliable)
    }
}

impl FromStr for Ratios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let named = match s.trim().to_ascii_lowercase().as_str() {
            "ratio-1" | "ratio1" => Some(Self::RATIO_1),
            "ratio-2" | "ratio2" => Some(Self::RATIO_2),
            "ratio-3" | "ratio3" => Some(Self::RATIO_3),
            _ => None,
        };
        if let Some(r) = named {
            return Ok(r);
        }
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().trim_end_matches('%').parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("cannot parse worker ratios `{s}`")))?;
        let [e, r, u] = parts[..] else {
            return Err(Error::Config(format!("expected three worker ratios, got `{s}`")));
        };
        let ratios = Ratios::new(e, r, u);
        ratios.validate()?;
        Ok(ratios)
    }
}

/// Draws a worker population. Half of the unreliable workers (rounded down) answer a
/// constant label; the rest answer honestly at low accuracy.
pub fn spawn_workers(count: usize, ratios: &Ratios, seed: u64) -> Result<Vec<Worker>> {
    let seats = ratios.split(count)?;
    let mut rng = stream_rng(seed, WORKER_STREAM);
    let mut workers = Vec::with_capacity(count);
    for (kind, &n) in WorkerType::ALL.iter().zip(&seats) {
        let constant = if *kind == WorkerType::Unreliable { n / 2 } else { 0 };
        for i in 0..n {
            let (lo, hi) = kind.accuracy_range();
            let true_a = rng.random_range(lo..=hi);
            let behavior = if i < constant {
                Behavior::Constant { pick: rng.random() }
            } else {
                Behavior::Honest
            };
            workers.push(Worker::new(workers.len(), *kind, true_a, behavior));
        }
    }
    Ok(workers)
}

/// One simulated answer. Honest workers give the truth with probability `true_a` and
/// otherwise a uniformly chosen other label; truths outside the label space are always
/// missed.
pub fn simulate_answer<R: Rng + ?Sized>(
    worker: &Worker,
    truth: ClassId,
    label_space: &[ClassId],
    rng: &mut R,
) -> ClassId {
    let n = label_space.len();
    match worker.behavior {
        Behavior::Constant { pick } => label_space[pick as usize % n],
        Behavior::Honest => match label_space.iter().position(|&c| c == truth) {
            Some(t) if n == 1 || rng.random_bool(worker.true_a.clamp(0.0, 1.0)) => label_space[t],
            Some(t) => {
                let j = rng.random_range(0..n - 1);
                label_space[if j >= t { j + 1 } else { j }]
            }
            None => label_space[rng.random_range(0..n)],
        },
    }
}

/// Softens a one-hot annotation: the chosen entry becomes `a`, every other entry
/// `(1 - a) / n`. The result is deliberately left unnormalized.
pub fn soften(one_hot: &[f64], a: f64) -> Result<Vec<f64>> {
    let ones = one_hot.iter().filter(|&&v| v == 1.0).count();
    if ones != 1 || one_hot.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract("annotation is not one-hot".into()));
    }
    let idx = one_hot.iter().position(|&v| v == 1.0).expect("checked");
    Ok(soften_index(idx, a, one_hot.len()))
}

fn soften_index(label: usize, a: f64, n: usize) -> Vec<f64> {
    let off = (1.0 - a) / n as f64;
    (0..n).map(|i| if i == label { a } else { off }).collect()
}

/// Mean of softened annotation vectors.
pub fn aggregate(softened: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = softened
        .first()
        .ok_or_else(|| Error::Contract("cannot aggregate a task without annotations".into()))?;
    let n = first.len();
    if softened.iter().any(|v| v.len() != n) {
        return Err(Error::Shape("softened annotations differ in length".into()));
    }
    let q = softened.len() as f64;
    Ok((0..n).map(|i| softened.iter().map(|v| v[i]).sum::<f64>() / q).collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn consensus(a_hat: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in a_hat.iter().enumerate() {
        if v > a_hat[best] {
            best = i;
        }
    }
    best
}

/// One minus the normalized entropy of `a_hat` after scaling it to sum to one.
pub fn completion(a_hat: &[f64]) -> Result<f64> {
    if a_hat.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::Contract("completion needs finite non-negative entries".into()));
    }
    let total: f64 = a_hat.iter().sum();
    if total <= 0.0 {
        return Err(Error::Contract("completion of an all-zero vector".into()));
    }
    let n = a_hat.len();
    if n < 2 {
        return Ok(1.0);
    }
    let h: f64 = a_hat
        .iter()
        .map(|&v| v / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok((1.0 - h / (n as f64).ln()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub worker: usize,
    pub label: usize,
}

/// Starting point of EM: reference labels (cold start) or worker accuracies.
#[derive(Debug, Clone, PartialEq)]
pub enum EmInit {
    Labels(Vec<Option<usize>>),
    Accuracy(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Largest accuracy change still counted as settled once labels stop moving.
    pub tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmOutcome {
    pub labels: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn consensus_step(tasks: &[Vec<Vote>], accuracy: &[f64], n_labels: usize) -> Vec<usize> {
    tasks
        .iter()
        .map(|votes| {
            let mut a_hat = vec![0.0; n_labels];
            for v in votes {
                let a = accuracy[v.worker];
                let off = (1.0 - a) / n_labels as f64;
                for (i, x) in a_hat.iter_mut().enumerate() {
                    *x += if i == v.label { a } else { off };
                }
            }
            consensus(&a_hat)
        })
        .collect()
}

fn agreement_step(tasks: &[Vec<Vote>], labels: &[Option<usize>], prior: &[f64]) -> Vec<f64> {
    let mut correct = vec![0usize; prior.len()];
    let mut total = vec![0usize; prior.len()];
    for (votes, label) in tasks.iter().zip(labels) {
        if let Some(l) = label {
            for v in votes {
                total[v.worker] += 1;
                correct[v.worker] += usize::from(v.label == *l);
            }
        }
    }
    (0..prior.len())
        .map(|w| accuracy_from_counts(correct[w], total[w]).unwrap_or(prior[w]))
        .collect()
}

/// Alternates consensus labels (softened, accuracy-weighted votes) and per-worker
/// accuracy (agreement with the consensus) until the labels stop changing.
pub fn em_infer(
    tasks: &[Vec<Vote>],
    n_workers: usize,
    n_labels: usize,
    init: &EmInit,
    cfg: &EmConfig,
) -> Result<EmOutcome> {
    em_infer_anchored(tasks, &vec![None; tasks.len()], n_workers, n_labels, init, cfg)
}

/// As [`em_infer`], except that a task with an anchor scores its workers against the
/// anchor instead of the current consensus. The engine anchors thinly annotated tasks to
/// their machine label so that a lone vote cannot vouch for itself.
pub fn em_infer_anchored(
    tasks: &[Vec<Vote>],
    anchors: &[Option<usize>],
    n_workers: usize,
    n_labels: usize,
    init: &EmInit,
    cfg: &EmConfig,
) -> Result<EmOutcome> {
    if anchors.len() != tasks.len() {
        return Err(Error::Shape(format!("{} anchors for {} tasks", anchors.len(), tasks.len())));
    }
    if anchors.iter().flatten().any(|&a| a >= n_labels) {
        return Err(Error::Contract("anchor outside the label space".into()));
    }
    if n_labels == 0 {
        return Err(Error::Config("label space is empty".into()));
    }
    for (t, votes) in tasks.iter().enumerate() {
        if votes.is_empty() {
            return Err(Error::Contract(format!("task {t} has no annotations")));
        }
        if votes.iter().any(|v| v.worker >= n_workers || v.label >= n_labels) {
            return Err(Error::Contract(format!("task {t} has an out-of-range vote")));
        }
    }
    let reference = |labels: &[Option<usize>]| -> Vec<Option<usize>> {
        anchors.iter().zip(labels).map(|(a, l)| a.or(*l)).collect()
    };
    let (mut labels, mut accuracy) = match init {
        EmInit::Labels(l) => {
            if l.len() != tasks.len() {
                return Err(Error::Shape(format!("{} initial labels for {} tasks", l.len(), tasks.len())));
            }
            (l.clone(), agreement_step(tasks, &reference(l), &vec![PRIOR_ACCURACY; n_workers]))
        }
        EmInit::Accuracy(a) => {
            if a.len() != n_workers {
                return Err(Error::Shape(format!("{} initial accuracies for {n_workers} workers", a.len())));
            }
            (vec![None; tasks.len()], a.clone())
        }
    };
    let prior = accuracy.clone();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let next: Vec<Option<usize>> = consensus_step(tasks, &accuracy, n_labels).into_iter().map(Some).collect();
        let next_accuracy = agreement_step(tasks, &reference(&next), &prior);
        let settled = next == labels
            && next_accuracy
                .iter()
                .zip(&accuracy)
                .all(|(a, b)| (a - b).abs() <= cfg.tol);
        labels = next;
        accuracy = next_accuracy;
        if settled {
            converged = true;
            break;
        }
    }
    let labels = match labels.iter().copied().collect::<Option<Vec<usize>>>() {
        Some(l) => l,
        // No iteration ran: label from the starting accuracies.
        None => consensus_step(tasks, &accuracy, n_labels),
    };
    Ok(EmOutcome {
        labels,
        accuracy,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub gamma: f64,
    pub ceiling: usize,
    pub explore_min: usize,
    pub expert_min_answers: usize,
    pub expert_a: f64,
    pub reliable_a: f64,
    /// Workers whose most frequent answer exceeds this share are treated as unreliable.
    pub modal_limit: f64,
    /// Tasks handed to one arriving worker.
    pub batch_size: usize,
    /// Arrivals between EM/batch updates.
    pub update_every: usize,
    pub em_max_iters: usize,
    pub em_tol: f64,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            gamma: 0.75,
            ceiling: 5,
            explore_min: 5,
            expert_min_answers: 10,
            expert_a: 0.8,
            reliable_a: 0.4,
            modal_limit: 0.8,
            batch_size: 10,
            update_every: 10,
            em_max_iters: 100,
            em_tol: 1e-6,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(0.0 < self.reliable_a && self.reliable_a < self.expert_a && self.expert_a < 1.0) {
            return Err(Error::Config("need 0 < reliable_a < expert_a < 1".into()));
        }
        if !(self.modal_limit > 0.0 && self.modal_limit <= 1.0) {
            return Err(Error::Config("modal_limit must lie in (0, 1]".into()));
        }
        if self.ceiling == 0 || self.batch_size == 0 || self.update_every == 0 || self.em_max_iters == 0 {
            return Err(Error::Config(
                "ceiling, batch_size, update_every and em_max_iters must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn em(&self) -> EmConfig {
        EmConfig {
            max_iters: self.em_max_iters,
            tol: self.em_tol,
        }
    }
}

/// Pool for a worker's current record; `Unplaced` until `explore_min` answers are scored.
pub fn classify_worker(worker: &Worker, cfg: &EngineConfig) -> Pool {
    if worker.n_total < cfg.explore_min {
        return Pool::Unplaced;
    }
    if worker.a_est < cfg.reliable_a || worker.modal_fraction() > cfg.modal_limit {
        Pool::Unreliable
    } else if worker.a_est >= cfg.expert_a && worker.n_total >= cfg.expert_min_answers {
        Pool::Expert
    } else {
        Pool::Reliable
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrowdTask {
    pub task_id: u64,
    pub truth: ClassId,
    pub machine_label: Label,
}

/// The tasks handed to the crowd and the closed label set workers choose from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub label_space: Vec<ClassId>,
    pub tasks: Vec<CrowdTask>,
}

impl TaskSet {
    pub fn validate(&self) -> Result<()> {
        if self.label_space.is_empty() {
            return Err(Error::Config("label space is empty".into()));
        }
        if self.label_space.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("label space must be sorted and distinct".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(t.task_id) {
                return Err(Error::Config(format!("duplicate task id {}", t.task_id)));
            }
            if let Label::Class(c) = t.machine_label {
                if !self.label_space.contains(&c) {
                    return Err(Error::Config(format!(
                        "task {} has machine label {c} outside the label space",
                        t.task_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let set: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        set.validate()?;
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AnswerKind {
    Aggregated,
    Audit,
    Expert,
}

#[derive(Debug, Clone, Copy)]
struct Answer {
    task: usize,
    label: usize,
    kind: AnswerKind,
}

#[derive(Debug, Clone)]
struct TaskState {
    task: CrowdTask,
    /// Unknown to the machine, so routed to experts.
    hard: bool,
    machine_index: Option<usize>,
    votes: Vec<Vote>,
    annotators: BTreeSet<usize>,
    audits: usize,
    expert: Option<usize>,
    consensus: Option<usize>,
    completion: f64,
    completed: bool,
    trajectory: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Consensus,
    Expert,
    Machine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: u64,
    pub truth: ClassId,
    pub machine_label: Label,
    pub final_label: Label,
    pub source: LabelSource,
    /// Aggregated crowd annotations; audits and expert answers are counted separately.
    pub annotations: usize,
    pub audits: usize,
    pub expert_annotated: bool,
    pub completion: f64,
    pub completed: bool,
    /// Completion after each batch update while the task was open.
    pub trajectory: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub id: usize,
    pub kind: WorkerType,
    pub behavior: Behavior,
    pub true_a: f64,
    pub final_pool: Pool,
    pub a_est: f64,
    pub n_correct: usize,
    pub n_total: usize,
    pub answers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub method: String,
    pub n_tasks: usize,
    pub n_workers: usize,
    pub accuracy: f64,
    /// Accuracy over machine-labeled and machine-unknown tasks separately.
    pub accuracy_labeled: Option<f64>,
    pub accuracy_unknown: Option<f64>,
    pub annotations_aggregated: usize,
    pub annotations_total: usize,
    pub arrivals: usize,
    pub incomplete_tasks: usize,
    pub em_converged: bool,
    /// Share of workers whose final pool matches their generating type.
    pub placement_match: f64,
    pub machine_precision: f64,
    pub machine_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub summary: SimulationSummary,
    pub tasks: Vec<TaskReport>,
    pub workers: Vec<WorkerReport>,
}

impl SimulationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Mutable simulation state; `run_simulation` drives it to the end.
#[derive(Debug, Clone)]
pub struct Engine {
    cfg: EngineConfig,
    label_space: Vec<ClassId>,
    tasks: Vec<TaskState>,
    /// Task indices in the tie-breaking order, shuffled once so that ties do not follow
    /// the class-sorted input order.
    order: Vec<usize>,
    rank: Vec<usize>,
    workers: Vec<Worker>,
    answers: Vec<Vec<Answer>>,
    rng: ChaCha8Rng,
    arrivals: usize,
    annotations_total: usize,
    em_converged: bool,
}

impl Engine {
    pub fn new(task_set: &TaskSet, workers: &[Worker], cfg: &EngineConfig) -> Result<Self> {
        cfg.validate()?;
        task_set.validate()?;
        if workers.is_empty() {
            return Err(Error::Config("simulation needs at least one worker".into()));
        }
        let index_of = |c: ClassId| task_set.label_space.iter().position(|&l| l == c);
        let tasks: Vec<TaskState> = task_set
            .tasks
            .iter()
            .map(|t| TaskState {
                task: *t,
                hard: t.machine_label.is_unknown(),
                machine_index: t.machine_label.class().and_then(index_of),
                votes: Vec::new(),
                annotators: BTreeSet::new(),
                audits: 0,
                expert: None,
                consensus: None,
                completion: 0.0,
                completed: false,
                trajectory: Vec::new(),
            })
            .collect();
        let mut rng = stream_rng(cfg.seed, SIMULATION_STREAM);
        let mut order: Vec<usize> = (0..tasks.len()).collect();
        order.shuffle(&mut rng);
        let mut rank = vec![0; tasks.len()];
        for (r, &t) in order.iter().enumerate() {
            rank[t] = r;
        }
        let mut workers = workers.to_vec();
        for w in workers.iter_mut() {
            *w = Worker::new(w.id, w.kind, w.true_a, w.behavior);
        }
        Ok(Self {
            cfg: cfg.clone(),
            label_space: task_set.label_space.clone(),
            answers: vec![Vec::new(); workers.len()],
            tasks,
            order,
            rank,
            workers,
            rng,
            arrivals: 0,
            annotations_total: 0,
            em_converged: true,
        })
    }

    pub fn workers(&self) -> &[Worker] {
        &self.workers
    }

    pub fn arrivals(&self) -> usize {
        self.arrivals
    }

    pub fn all_completed(&self) -> bool {
        self.tasks.iter().all(|t| t.completed)
    }

    fn arrival_cap(&self) -> usize {
        (ARRIVAL_CAP_FACTOR * self.tasks.len()).div_ceil(self.cfg.batch_size).max(1)
    }

    fn open_plain(&self, worker: usize) -> impl Iterator<Item = usize> + '_ {
        self.order
            .iter()
            .copied()
            .filter(move |&t| {
                let s = &self.tasks[t];
                !s.hard && !s.completed && !s.annotators.contains(&worker)
            })
    }

    fn take_sorted<K: Ord>(&self, mut candidates: Vec<usize>, key: impl Fn(&TaskState) -> K) -> Vec<u64> {
        candidates.sort_by_key(|&t| (key(&self.tasks[t]), self.rank[t]));
        candidates
            .into_iter()
            .take(self.cfg.batch_size)
            .map(|t| self.tasks[t].task.task_id)
            .collect()
    }

    /// Task ids for the worker's next batch, chosen by its current pool.
    pub fn assign_batch(&self, worker: usize) -> Vec<u64> {
        match self.workers[worker].pool {
            Pool::Unplaced => self.take_sorted(self.open_plain(worker).collect(), |s| s.votes.len()),
            Pool::Unreliable => {
                let done: Vec<usize> = self
                    .order
                    .iter()
                    .copied()
                    .filter(|&t| {
                        let s = &self.tasks[t];
                        !s.hard && s.completed && s.consensus.is_some() && !s.annotators.contains(&worker)
                    })
                    .collect();
                self.take_sorted(done, |s| s.audits)
            }
            Pool::Expert => {
                let hard: Vec<usize> = self
                    .order
                    .iter()
                    .copied()
                    .filter(|&t| self.tasks[t].hard && self.tasks[t].expert.is_none())
                    .collect();
                if hard.is_empty() {
                    self.reliable_batch(worker)
                } else {
                    self.take_sorted(hard, |_| 0u8)
                }
            }
            Pool::Reliable => self.reliable_batch(worker),
        }
    }

    fn reliable_batch(&self, worker: usize) -> Vec<u64> {
        let mut open: Vec<usize> = self.open_plain(worker).collect();
        open.sort_by(|&a, &b| {
            self.tasks[a]
                .completion
                .total_cmp(&self.tasks[b].completion)
                .then(self.rank[a].cmp(&self.rank[b]))
        });
        open.into_iter()
            .take(self.cfg.batch_size)
            .map(|t| self.tasks[t].task.task_id)
            .collect()
    }

    /// One worker arrival: draw a worker, hand out a batch, record the answers.
    pub fn arrive(&mut self) -> Result<()> {
        let w = self.rng.random_range(0..self.workers.len());
        let batch = self.assign_batch(w);
        let pool = self.workers[w].pool;
        let by_id: BTreeMap<u64, usize> = batch
            .iter()
            .map(|id| (*id, self.tasks.iter().position(|t| t.task.task_id == *id).expect("own id")))
            .collect();
        for id in &batch {
            let t = by_id[id];
            let truth = self.tasks[t].task.truth;
            let answer = simulate_answer(&self.workers[w], truth, &self.label_space, &mut self.rng);
            let label = self.label_space.iter().position(|&c| c == answer).expect("in label space");
            let state = &mut self.tasks[t];
            let kind = if pool == Pool::Expert && state.hard {
                state.expert = Some(label);
                state.completed = true;
                AnswerKind::Expert
            } else if pool == Pool::Unreliable {
                state.audits += 1;
                AnswerKind::Audit
            } else {
                state.votes.push(Vote { worker: w, label });
                if state.votes.len() >= self.cfg.ceiling {
                    state.completed = true;
                }
                AnswerKind::Aggregated
            };
            state.annotators.insert(w);
            self.answers[w].push(Answer { task: t, label, kind });
            *self.workers[w].label_counts.entry(answer).or_default() += 1;
            self.annotations_total += 1;
        }
        self.arrivals += 1;
        if self.arrivals.is_multiple_of(self.cfg.update_every) {
            self.batch_update()?;
        }
        Ok(())
    }

    /// Enough crowd votes for the consensus to serve as a reference label.
    fn is_mature(&self, t: usize) -> bool {
        self.tasks[t].votes.len() >= self.cfg.explore_min
    }

    /// Label a worker's answer on `t` is scored against: the consensus once the task is
    /// mature, the machine label before that.
    fn reference_label(&self, t: usize) -> Option<usize> {
        if self.is_mature(t) {
            self.tasks[t].consensus
        } else {
            self.tasks[t].machine_index
        }
    }

    /// Re-infers labels and accuracies, refreshes completion and re-places workers.
    pub fn batch_update(&mut self) -> Result<()> {
        let scope: Vec<usize> = (0..self.tasks.len()).filter(|&t| !self.tasks[t].votes.is_empty()).collect();
        if scope.is_empty() {
            return Ok(());
        }
        let votes: Vec<Vec<Vote>> = scope.iter().map(|&t| self.tasks[t].votes.clone()).collect();
        // Known consensus where there is one, the machine label otherwise.
        let init: Vec<Option<usize>> = scope
            .iter()
            .map(|&t| self.tasks[t].consensus.or(self.tasks[t].machine_index))
            .collect();
        let anchors: Vec<Option<usize>> = scope
            .iter()
            .map(|&t| if self.is_mature(t) { None } else { self.tasks[t].machine_index })
            .collect();
        let em = em_infer_anchored(
            &votes,
            &anchors,
            self.workers.len(),
            self.label_space.len(),
            &EmInit::Labels(init),
            &self.cfg.em(),
        )?;
        self.em_converged = em.converged;
        for (i, &t) in scope.iter().enumerate() {
            let softened: Vec<Vec<f64>> = self.tasks[t]
                .votes
                .iter()
                .map(|v| soften_index(v.label, em.accuracy[v.worker], self.label_space.len()))
                .collect();
            let com = completion(&aggregate(&softened)?)?;
            let state = &mut self.tasks[t];
            state.consensus = Some(em.labels[i]);
            state.completion = com;
            if !state.completed {
                state.trajectory.push(com);
                if com >= self.cfg.gamma {
                    state.completed = true;
                }
            }
        }
        for w in 0..self.workers.len() {
            let (mut correct, mut total) = (0, 0);
            for a in &self.answers[w] {
                if a.kind == AnswerKind::Expert {
                    continue;
                }
                if let Some(reference) = self.reference_label(a.task) {
                    total += 1;
                    correct += usize::from(reference == a.label);
                }
            }
            self.workers[w].update_accuracy(correct, total);
            self.workers[w].pool = classify_worker(&self.workers[w], &self.cfg);
        }
        Ok(())
    }

    /// Runs arrivals until every task is completed or the arrival cap is reached.
    pub fn run(mut self, machine_metrics: (f64, f64)) -> Result<SimulationReport> {
        let cap = self.arrival_cap();
        while !self.all_completed() && self.arrivals < cap {
            self.arrive()?;
        }
        if !self.arrivals.is_multiple_of(self.cfg.update_every) {
            self.batch_update()?;
        }
        Ok(self.report("oscrowd", machine_metrics))
    }

    fn report(&self, method: &str, (machine_precision, machine_recall): (f64, f64)) -> SimulationReport {
        let tasks: Vec<TaskReport> = self
            .tasks
            .iter()
            .map(|s| {
                let (final_label, source) = match (s.expert, s.consensus) {
                    (Some(e), _) => (Label::Class(self.label_space[e]), LabelSource::Expert),
                    (None, Some(c)) => (Label::Class(self.label_space[c]), LabelSource::Consensus),
                    (None, None) => (s.task.machine_label, LabelSource::Machine),
                };
                TaskReport {
                    task_id: s.task.task_id,
                    truth: s.task.truth,
                    machine_label: s.task.machine_label,
                    final_label,
                    source,
                    annotations: s.votes.len(),
                    audits: s.audits,
                    expert_annotated: s.expert.is_some(),
                    completion: s.completion,
                    completed: s.completed,
                    trajectory: s.trajectory.clone(),
                }
            })
            .collect();
        let workers: Vec<WorkerReport> = self
            .workers
            .iter()
            .map(|w| WorkerReport {
                id: w.id,
                kind: w.kind,
                behavior: w.behavior,
                true_a: w.true_a,
                final_pool: w.pool,
                a_est: w.a_est,
                n_correct: w.n_correct,
                n_total: w.n_total,
                answers: w.label_counts.values().sum(),
            })
            .collect();
        let accuracy_of = |pick: &dyn Fn(&TaskReport) -> bool| -> Option<f64> {
            let chosen: Vec<&TaskReport> = tasks.iter().filter(|t| pick(t)).collect();
            (!chosen.is_empty()).then(|| {
                chosen.iter().filter(|t| t.final_label == Label::Class(t.truth)).count() as f64 / chosen.len() as f64
            })
        };
        let summary = SimulationSummary {
            method: method.to_string(),
            n_tasks: tasks.len(),
            n_workers: workers.len(),
            accuracy: accuracy_of(&|_| true).unwrap_or(0.0),
            accuracy_labeled: accuracy_of(&|t| !t.machine_label.is_unknown()),
            accuracy_unknown: accuracy_of(&|t| t.machine_label.is_unknown()),
            annotations_aggregated: tasks.iter().map(|t| t.annotations).sum(),
            annotations_total: self.annotations_total,
            arrivals: self.arrivals,
            incomplete_tasks: tasks.iter().filter(|t| !t.completed).count(),
            em_converged: self.em_converged,
            placement_match: workers.iter().filter(|w| w.final_pool == w.kind.matching_pool()).count() as f64
                / workers.len() as f64,
            machine_precision,
            machine_recall,
        };
        SimulationReport { summary, tasks, workers }
    }
}

/// Machine-label precision (correct over labeled, 1.0 when none) and coverage of a task set.
pub fn machine_metrics(task_set: &TaskSet) -> (f64, f64) {
    let labeled: Vec<&CrowdTask> = task_set.tasks.iter().filter(|t| !t.machine_label.is_unknown()).collect();
    let correct = labeled.iter().filter(|t| t.machine_label == Label::Class(t.truth)).count();
    let precision = if labeled.is_empty() { 1.0 } else { correct as f64 / labeled.len() as f64 };
    let recall = if task_set.tasks.is_empty() {
        0.0
    } else {
        labeled.len() as f64 / task_set.tasks.len() as f64
    };
    (precision, recall)
}

pub fn run_simulation(task_set: &TaskSet, workers: &[Worker], cfg: &EngineConfig) -> Result<SimulationReport> {
    Engine::new(task_set, workers, cfg)?.run(machine_metrics(task_set))
}

/// Weighted majority voting: randomly arriving workers fill every task up to the
/// ceiling with no pools or staging, then EM starts from uniform accuracy 0.5.
pub fn wmv_baseline(task_set: &TaskSet, workers: &[Worker], cfg: &EngineConfig) -> Result<SimulationReport> {
    let mut engine = Engine::new(task_set, workers, cfg)?;
    let cap = engine.arrival_cap();
    let full = |e: &Engine| e.tasks.iter().all(|t| t.votes.len() >= e.cfg.ceiling);
    while !full(&engine) && engine.arrivals < cap {
        let w = engine.rng.random_range(0..engine.workers.len());
        let candidates: Vec<usize> = engine
            .order
            .iter()
            .copied()
            .filter(|&t| engine.tasks[t].votes.len() < engine.cfg.ceiling && !engine.tasks[t].annotators.contains(&w))
            .collect();
        let mut batch = candidates;
        batch.sort_by_key(|&t| (engine.tasks[t].votes.len(), engine.rank[t]));
        batch.truncate(engine.cfg.batch_size);
        for t in batch {
            let answer = simulate_answer(&engine.workers[w], engine.tasks[t].task.truth, &engine.label_space, &mut engine.rng);
            let label = engine.label_space.iter().position(|&c| c == answer).expect("in label space");
            engine.tasks[t].votes.push(Vote { worker: w, label });
            engine.tasks[t].annotators.insert(w);
            engine.answers[w].push(Answer {
                task: t,
                label,
                kind: AnswerKind::Aggregated,
            });
            *engine.workers[w].label_counts.entry(answer).or_default() += 1;
            engine.annotations_total += 1;
        }
        engine.arrivals += 1;
    }
    let scope: Vec<usize> = (0..engine.tasks.len()).filter(|&t| !engine.tasks[t].votes.is_empty()).collect();
    if !scope.is_empty() {
        let votes: Vec<Vec<Vote>> = scope.iter().map(|&t| engine.tasks[t].votes.clone()).collect();
        let em = em_infer(
            &votes,
            engine.workers.len(),
            engine.label_space.len(),
            &EmInit::Accuracy(vec![0.5; engine.workers.len()]),
            &engine.cfg.em(),
        )?;
        engine.em_converged = em.converged;
        for (i, &t) in scope.iter().enumerate() {
            let n = engine.label_space.len();
            let softened: Vec<Vec<f64>> = engine.tasks[t]
                .votes
                .iter()
                .map(|v| soften_index(v.label, em.accuracy[v.worker], n))
                .collect();
            let state = &mut engine.tasks[t];
            state.consensus = Some(em.labels[i]);
            state.completion = completion(&aggregate(&softened)?)?;
            state.completed = state.votes.len() >= engine.cfg.ceiling;
        }
        for (w, worker) in engine.workers.iter_mut().enumerate() {
            let total = engine.answers[w].len();
            let correct = engine.answers[w]
                .iter()
                .filter(|a| engine.tasks[a.task].consensus == Some(a.label))
                .count();
            worker.update_accuracy(correct, total);
        }
    }
    Ok(engine.report("wmv", machine_metrics(task_set)))
}
