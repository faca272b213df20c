//! Open-set machine labeling.
//!
//! Each candidate class gets a center in the shared feature space and a radius, the
//! largest squared distance of its own source samples from that center. A target sample
//! is feasible for a class when its distance, divided by the class score `k_c`, is within
//! `alpha` times that radius; it takes the feasible class with the smallest weighted
//! distance, or stays unknown when nothing is feasible.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::adapt::{source_by_class, ClassScore, PdaResult};
use crate::nn::Mlp;
use crate::synth::{feature_matrix, ClassId, Sample};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCenter {
    pub class_id: ClassId,
    pub center: Vec<f64>,
    /// Largest squared distance from the center among the class's source samples.
    pub max_dist: f64,
    pub k_c: f64,
}

/// A machine label: a class id, or unknown. Serialized as the bare integer or `"unknown"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "RawLabel", try_from = "RawLabel")]
pub enum Label {
    Class(ClassId),
    Unknown,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawLabel {
    Id(ClassId),
    Word(String),
}

impl From<Label> for RawLabel {
    fn from(l: Label) -> Self {
        match l {
            Label::Class(c) => RawLabel::Id(c),
            Label::Unknown => RawLabel::Word("unknown".into()),
        }
    }
}

impl TryFrom<RawLabel> for Label {
    type Error = Error;

    fn try_from(raw: RawLabel) -> Result<Self> {
        match raw {
            RawLabel::Id(c) => Ok(Label::Class(c)),
            RawLabel::Word(w) => w.parse(),
        }
    }
}

impl Label {
    pub fn class(self) -> Option<ClassId> {
        match self {
            Label::Class(c) => Some(c),
            Label::Unknown => None,
        }
    }

    pub fn is_unknown(self) -> bool {
        self == Label::Unknown
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Class(c) => write!(f, "{c}"),
            Label::Unknown => f.write_str("unknown"),
        }
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("unknown") {
            return Ok(Label::Unknown);
        }
        s.parse()
            .map(Label::Class)
            .map_err(|_| Error::Config(format!("`{s}` is neither a class id nor `unknown`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MachineLabel {
    pub task_id: u64,
    pub label: Label,
    /// Weighted distance to the chosen class; absent for unknown.
    pub weighted_distance: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssignConfig {
    pub alpha: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self { alpha: 1.2 }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

fn squared_distance(a: &[f64], b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Centers of already-extracted feature rows. Classes are taken from `scores`; each must
/// have at least one row and a positive score.
pub fn centers_from_features(
    features: &BTreeMap<ClassId, Array2<f64>>,
    scores: &[ClassScore],
) -> Result<Vec<ClassCenter>> {
    scores
        .iter()
        .map(|s| {
            if !(s.k_c > 0.0) {
                return Err(Error::Contract(format!("class {} has score {} <= 0", s.class_id, s.k_c)));
            }
            let rows = features
                .get(&s.class_id)
                .filter(|m| m.nrows() > 0)
                .ok_or_else(|| Error::Contract(format!("class {} has no source samples", s.class_id)))?;
            let center = rows
                .mean_axis(ndarray::Axis(0))
                .expect("non-empty")
                .to_vec();
            let max_dist = rows
                .rows()
                .into_iter()
                .map(|r| squared_distance(&center, r))
                .fold(0.0, f64::max);
            Ok(ClassCenter {
                class_id: s.class_id,
                center,
                max_dist,
                k_c: s.k_c,
            })
        })
        .collect()
}

/// Centers of raw source rows after mapping them through the source extractor.
pub fn compute_centers(
    source_by_class: &BTreeMap<ClassId, Array2<f64>>,
    extractor: &Mlp,
    scores: &[ClassScore],
) -> Result<Vec<ClassCenter>> {
    let mut features = BTreeMap::new();
    for s in scores {
        if let Some(rows) = source_by_class.get(&s.class_id) {
            features.insert(s.class_id, extractor.forward(rows)?);
        }
    }
    centers_from_features(&features, scores)
}

/// Squared distance to the center divided by the class score.
pub fn weighted_distance(x: &[f64], center: &ClassCenter) -> Result<f64> {
    if !(center.k_c > 0.0) {
        return Err(Error::Contract(format!(
            "class {} has score {} <= 0",
            center.class_id, center.k_c
        )));
    }
    if x.len() != center.center.len() {
        return Err(Error::Shape(format!(
            "sample has {} features, center has {}",
            x.len(),
            center.center.len()
        )));
    }
    Ok(squared_distance(x, ArrayView1::from(&center.center)) / center.k_c)
}

/// Classes whose feasibility test passes, with their weighted distances.
pub fn feasible_classes(x: &[f64], centers: &[ClassCenter], cfg: &AssignConfig) -> Result<Vec<(ClassId, f64)>> {
    let mut out = Vec::new();
    for c in centers {
        let d = weighted_distance(x, c)?;
        if d <= cfg.alpha * c.max_dist {
            out.push((c.class_id, d));
        }
    }
    Ok(out)
}

/// Smallest weighted distance among the classes in `among`; ties go to the lowest id.
pub fn weighted_argmin(x: &[f64], centers: &[ClassCenter], among: &[ClassId]) -> Result<Option<(ClassId, f64)>> {
    let mut best: Option<(ClassId, f64)> = None;
    for c in centers.iter().filter(|c| among.contains(&c.class_id)) {
        let d = weighted_distance(x, c)?;
        best = match best {
            Some((bc, bd)) if bd < d || (bd == d && bc < c.class_id) => Some((bc, bd)),
            _ => Some((c.class_id, d)),
        };
    }
    Ok(best)
}

pub fn assign(task_id: u64, x: &[f64], centers: &[ClassCenter], cfg: &AssignConfig) -> Result<MachineLabel> {
    let feasible: Vec<ClassId> = feasible_classes(x, centers, cfg)?.into_iter().map(|(c, _)| c).collect();
    Ok(match weighted_argmin(x, centers, &feasible)? {
        Some((c, d)) => MachineLabel {
            task_id,
            label: Label::Class(c),
            weighted_distance: Some(d),
        },
        None => MachineLabel {
            task_id,
            label: Label::Unknown,
            weighted_distance: None,
        },
    })
}

/// Target tasks split into machine-labeled and unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineLabeling {
    pub alpha: f64,
    pub centers: Vec<ClassCenter>,
    pub labeled: Vec<MachineLabel>,
    pub unknown: Vec<MachineLabel>,
}

impl MachineLabeling {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unknown.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All labels ordered by task id.
    pub fn all(&self) -> Vec<MachineLabel> {
        let mut v: Vec<MachineLabel> = self.labeled.iter().chain(&self.unknown).copied().collect();
        v.sort_by_key(|l| l.task_id);
        v
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_labels_csv(&self.all(), path)
    }
}

/// Labels rows of target features that were already mapped into the shared space.
pub fn label_features(
    task_ids: &[u64],
    features: &Array2<f64>,
    centers: &[ClassCenter],
    cfg: &AssignConfig,
) -> Result<MachineLabeling> {
    cfg.validate()?;
    if task_ids.len() != features.nrows() {
        return Err(Error::Shape(format!(
            "{} task ids for {} feature rows",
            task_ids.len(),
            features.nrows()
        )));
    }
    let (mut labeled, mut unknown) = (Vec::new(), Vec::new());
    for (&id, row) in task_ids.iter().zip(features.rows()) {
        let label = assign(id, &row.to_vec(), centers, cfg)?;
        if label.label.is_unknown() {
            unknown.push(label);
        } else {
            labeled.push(label);
        }
    }
    Ok(MachineLabeling {
        alpha: cfg.alpha,
        centers: centers.to_vec(),
        labeled,
        unknown,
    })
}

/// Maps target samples through the adapted extractor and labels them.
pub fn label_target(
    target: &[Sample],
    generator: &Mlp,
    centers: &[ClassCenter],
    cfg: &AssignConfig,
) -> Result<MachineLabeling> {
    let dim = generator.input_dim();
    let features = generator.forward(&feature_matrix(target, dim))?;
    let ids: Vec<u64> = target.iter().map(|s| s.id).collect();
    label_features(&ids, &features, centers, cfg)
}

/// Rebuilds the surviving source and target samples of a finished adaptation run and
/// labels the target against the candidate classes.
pub fn label_from_pda(pda: &PdaResult, cfg: &AssignConfig) -> Result<MachineLabeling> {
    let prepared = PreparedTarget::new(pda)?;
    prepared.label(cfg)
}

/// Centers and target features of one adaptation run, reusable across `alpha` values.
#[derive(Debug, Clone)]
pub struct PreparedTarget {
    pub centers: Vec<ClassCenter>,
    pub target: Vec<Sample>,
    features: Array2<f64>,
}

impl PreparedTarget {
    pub fn new(pda: &PdaResult) -> Result<Self> {
        let data = pda.scenario.generate()?;
        let surviving: Vec<_> = data
            .sources
            .iter()
            .filter(|d| pda.surviving_domains.contains(&d.spec.domain_id))
            .collect();
        let dim = pda.scenario.feature_dim;
        let centers = compute_centers(
            &source_by_class(&surviving, dim),
            &pda.source_model.extractor,
            &pda.candidate_scores(),
        )?;
        let features = pda.generator.forward(&feature_matrix(&data.target, dim))?;
        Ok(Self {
            centers,
            target: data.target,
            features,
        })
    }

    pub fn label(&self, cfg: &AssignConfig) -> Result<MachineLabeling> {
        let ids: Vec<u64> = self.target.iter().map(|s| s.id).collect();
        label_features(&ids, &self.features, &self.centers, cfg)
    }
}

/// Precision, recall (coverage) and their product for a labeling against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MachineMetrics {
    pub alpha: f64,
    pub n_tasks: usize,
    pub n_labeled: usize,
    pub n_correct: usize,
    /// Correct labels over labeled tasks; 1.0 when nothing was labeled.
    pub precision: f64,
    /// Labeled tasks over all tasks.
    pub recall: f64,
    pub yield_pr: f64,
}

impl MachineMetrics {
    pub fn evaluate(labeling: &MachineLabeling, target: &[Sample]) -> Result<Self> {
        let truth: BTreeMap<u64, ClassId> = target.iter().map(|s| (s.id, s.true_class)).collect();
        let mut n_correct = 0;
        for l in &labeling.labeled {
            let t = truth
                .get(&l.task_id)
                .ok_or_else(|| Error::Contract(format!("task {} is not a target sample", l.task_id)))?;
            if l.label == Label::Class(*t) {
                n_correct += 1;
            }
        }
        let n_tasks = labeling.len();
        let n_labeled = labeling.labeled.len();
        let precision = if n_labeled == 0 { 1.0 } else { n_correct as f64 / n_labeled as f64 };
        let recall = if n_tasks == 0 { 0.0 } else { n_labeled as f64 / n_tasks as f64 };
        Ok(Self {
            alpha: labeling.alpha,
            n_tasks,
            n_labeled,
            n_correct,
            precision,
            recall,
            yield_pr: precision * recall,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    task_id: u64,
    label: String,
    weighted_distance: Option<f64>,
}

pub fn write_labels_csv(labels: &[MachineLabel], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for l in labels {
        w.serialize(CsvRow {
            task_id: l.task_id,
            label: l.label.to_string(),
            weighted_distance: l.weighted_distance,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<MachineLabel>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            Ok(MachineLabel {
                task_id: row.task_id,
                label: row.label.parse()?,
                weighted_distance: row.weighted_distance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn center(class_id: ClassId, c: &[f64], max_dist: f64, k_c: f64) -> ClassCenter {
        ClassCenter {
            class_id,
            center: c.to_vec(),
            max_dist,
            k_c,
        }
    }

    fn score(class_id: ClassId, k_c: f64) -> ClassScore {
        ClassScore { class_id, k_c, round: 2 }
    }

    #[test]
    fn two_sample_center_and_radius() {
        let mut f = BTreeMap::new();
        f.insert(0, array![[0.0, 0.0], [2.0, 0.0]]);
        let c = centers_from_features(&f, &[score(0, 0.8)]).unwrap();
        assert_eq!(c[0].center, vec![1.0, 0.0]);
        assert_eq!(c[0].max_dist, 1.0);
        assert_eq!(c[0].k_c, 0.8);
    }

    #[test]
    fn single_sample_class_has_zero_radius() {
        let mut f = BTreeMap::new();
        f.insert(3, array![[1.5, -2.0, 0.5]]);
        let c = centers_from_features(&f, &[score(3, 0.6)]).unwrap();
        assert_eq!(c[0].center, vec![1.5, -2.0, 0.5]);
        assert_eq!(c[0].max_dist, 0.0);
    }

    #[test]
    fn random_class_matches_loop_oracle() {
        let mut rng = crate::stream_rng(5, 0);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let mut mean = [0.0; 4];
        for r in &rows {
            for j in 0..4 {
                mean[j] += r[j] / 20.0;
            }
        }
        let mut radius: f64 = 0.0;
        for r in &rows {
            let mut d = 0.0;
            for j in 0..4 {
                d += (r[j] - mean[j]).powi(2);
            }
            radius = radius.max(d);
        }
        let m = Array2::from_shape_vec((20, 4), rows.concat()).unwrap();
        let mut f = BTreeMap::new();
        f.insert(1, m);
        let c = &centers_from_features(&f, &[score(1, 0.7)]).unwrap()[0];
        for j in 0..4 {
            assert!((c.center[j] - mean[j]).abs() < 1e-12);
        }
        assert!((c.max_dist - radius).abs() < 1e-10);
    }

    #[test]
    fn empty_or_missing_class_is_contract_violation() {
        let mut f = BTreeMap::new();
        f.insert(0, Array2::zeros((0, 2)));
        assert!(matches!(centers_from_features(&f, &[score(0, 0.7)]), Err(Error::Contract(_))));
        assert!(matches!(centers_from_features(&f, &[score(9, 0.7)]), Err(Error::Contract(_))));
    }

    #[test]
    fn weighted_distance_examples() {
        let c = center(0, &[1.0, 1.0], 1.0, 0.3);
        assert_eq!(weighted_distance(&[1.0, 1.0], &c).unwrap(), 0.0);
        let c = center(0, &[0.0, 0.0], 1.0, 0.5);
        assert_eq!(weighted_distance(&[1.0, 1.0], &c).unwrap(), 4.0);
        assert!(matches!(
            weighted_distance(&[1.0, 1.0], &center(0, &[0.0, 0.0], 1.0, 0.0)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            weighted_distance(&[1.0], &center(0, &[0.0, 0.0], 1.0, 0.5)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn higher_score_halves_distance_at_equidistant_point() {
        let a = center(1, &[-1.0, 0.0], 1.0, 0.8);
        let b = center(2, &[1.0, 0.0], 1.0, 0.4);
        let x = [0.0, 3.0];
        let (da, db) = (weighted_distance(&x, &a).unwrap(), weighted_distance(&x, &b).unwrap());
        assert!((2.0 * da - db).abs() < 1e-12);
    }

    #[test]
    fn sample_at_center_takes_that_class() {
        let cs = [center(0, &[0.0, 0.0], 1.0, 0.6), center(1, &[5.0, 0.0], 1.0, 0.6)];
        let l = assign(7, &[5.0, 0.0], &cs, &AssignConfig::default()).unwrap();
        assert_eq!(l.label, Label::Class(1));
        assert_eq!(l.weighted_distance, Some(0.0));
        assert_eq!(l.task_id, 7);
    }

    #[test]
    fn far_sample_is_unknown() {
        let cs = [center(0, &[0.0, 0.0], 1.0, 0.6), center(1, &[5.0, 0.0], 1.0, 0.6)];
        let l = assign(0, &[50.0, 50.0], &cs, &AssignConfig::default()).unwrap();
        assert_eq!(l.label, Label::Unknown);
        assert_eq!(l.weighted_distance, None);
        assert_eq!(assign(0, &[0.0, 0.0], &[], &AssignConfig::default()).unwrap().label, Label::Unknown);
    }

    #[test]
    fn nearest_but_infeasible_loses_to_farther_feasible() {
        // Class 0 is tight (radius 0.25), class 1 is wide (radius 16).
        let cs = [center(0, &[0.0, 0.0], 0.25, 1.0), center(1, &[3.0, 0.0], 16.0, 1.0)];
        let x = [1.0, 0.0];
        let cfg = AssignConfig { alpha: 1.0 };
        // Brute force: class 0 at distance 1 > 0.25, class 1 at distance 4 <= 16.
        assert!(weighted_distance(&x, &cs[0]).unwrap() < weighted_distance(&x, &cs[1]).unwrap());
        assert_eq!(feasible_classes(&x, &cs, &cfg).unwrap(), vec![(1, 4.0)]);
        assert_eq!(assign(0, &x, &cs, &cfg).unwrap().label, Label::Class(1));
    }

    #[test]
    fn ties_go_to_lowest_class_id() {
        let cs = [center(4, &[1.0, 0.0], 4.0, 0.5), center(2, &[-1.0, 0.0], 4.0, 0.5)];
        assert_eq!(assign(0, &[0.0, 0.0], &cs, &AssignConfig::default()).unwrap().label, Label::Class(2));
    }

    #[test]
    fn alpha_extremes() {
        let mut rng = crate::stream_rng(6, 0);
        let feats = Array2::from_shape_fn((40, 3), |_| rng.random_range(-2.0..2.0));
        let cs = [center(0, &[1.0, 0.0, 0.0], 0.5, 0.7), center(1, &[-1.0, 0.0, 0.0], 0.5, 0.9)];
        let ids: Vec<u64> = (0..40).collect();
        let all = label_features(&ids, &feats, &cs, &AssignConfig { alpha: 1e6 }).unwrap();
        assert!(all.unknown.is_empty());
        let none = label_features(&ids, &feats, &cs, &AssignConfig { alpha: 1e-12 }).unwrap();
        assert!(none.labeled.is_empty());
        assert_eq!(none.len(), 40);
        assert!(label_features(&ids, &feats, &cs, &AssignConfig { alpha: 0.0 }).is_err());
        assert!(label_features(&ids[..3], &feats, &cs, &AssignConfig::default()).is_err());
    }

    #[test]
    fn metrics_count_correct_over_labeled() {
        let target: Vec<Sample> = (0..4)
            .map(|i| Sample {
                id: i,
                features: vec![],
                true_class: (i % 2) as ClassId,
                domain_id: 0,
            })
            .collect();
        let l = |task_id, label| MachineLabel {
            task_id,
            label,
            weighted_distance: None,
        };
        let labeling = MachineLabeling {
            alpha: 1.0,
            centers: vec![],
            labeled: vec![l(0, Label::Class(0)), l(1, Label::Class(0))],
            unknown: vec![l(2, Label::Unknown), l(3, Label::Unknown)],
        };
        let m = MachineMetrics::evaluate(&labeling, &target).unwrap();
        assert_eq!((m.n_labeled, m.n_correct), (2, 1));
        assert_eq!((m.precision, m.recall, m.yield_pr), (0.5, 0.5, 0.25));
        let empty = MachineLabeling {
            labeled: vec![],
            ..labeling
        };
        assert_eq!(MachineMetrics::evaluate(&empty, &target).unwrap().precision, 1.0);
    }

    #[test]
    fn label_serializes_as_integer_or_unknown() {
        assert_eq!(serde_json::to_string(&Label::Class(3)).unwrap(), "3");
        assert_eq!(serde_json::to_string(&Label::Unknown).unwrap(), "\"unknown\"");
        assert_eq!(serde_json::from_str::<Label>("5").unwrap(), Label::Class(5));
        assert_eq!(serde_json::from_str::<Label>("\"unknown\"").unwrap(), Label::Unknown);
        assert!(serde_json::from_str::<Label>("\"cat\"").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        let labels = vec![
            MachineLabel {
                task_id: 4,
                label: Label::Class(2),
                weighted_distance: Some(0.125),
            },
            MachineLabel {
                task_id: 9,
                label: Label::Unknown,
                weighted_distance: None,
            },
        ];
        write_labels_csv(&labels, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "task_id,label,weighted_distance\n4,2,0.125\n9,unknown,\n");
        assert_eq!(read_labels_csv(&path).unwrap(), labels);
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<ClassCenter>, Vec<Vec<f64>>)> {
        let centers = prop::collection::vec(
            (prop::collection::vec(-3.0..3.0f64, 2), 0.1..4.0f64, 0.05..1.0f64),
            1..5,
        )
        .prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (c, r, k))| center(i, &c, r, k))
                .collect::<Vec<_>>()
        });
        let points = prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 2), 1..30);
        (centers, points)
    }

    proptest! {
        #[test]
        fn labeled_set_grows_with_alpha((cs, pts) in arb_instance(), a1 in 0.05..3.0f64, extra in 0.0..3.0f64) {
            let a2 = a1 + extra;
            for p in &pts {
                let l1 = assign(0, p, &cs, &AssignConfig { alpha: a1 }).unwrap();
                let l2 = assign(0, p, &cs, &AssignConfig { alpha: a2 }).unwrap();
                if !l1.label.is_unknown() {
                    prop_assert!(!l2.label.is_unknown());
                }
            }
        }

        #[test]
        fn argmin_over_fixed_feasible_set_ignores_uniform_score_scaling(
            (cs, pts) in arb_instance(),
            lambda in 0.1..10.0f64,
        ) {
            let scaled: Vec<ClassCenter> = cs.iter().map(|c| ClassCenter { k_c: c.k_c * lambda, ..c.clone() }).collect();
            for p in &pts {
                let feasible: Vec<ClassId> = feasible_classes(p, &cs, &AssignConfig::default())
                    .unwrap()
                    .into_iter()
                    .map(|(c, _)| c)
                    .collect();
                let a = weighted_argmin(p, &cs, &feasible).unwrap().map(|(c, _)| c);
                let b = weighted_argmin(p, &scaled, &feasible).unwrap().map(|(c, _)| c);
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn assign_is_pure((cs, pts) in arb_instance(), alpha in 0.1..3.0f64) {
            let cfg = AssignConfig { alpha };
            for p in &pts {
                prop_assert_eq!(assign(1, p, &cs, &cfg).unwrap(), assign(1, p, &cs, &cfg).unwrap());
            }
        }

        #[test]
        fn partition_is_complete((cs, pts) in arb_instance(), alpha in 0.1..3.0f64) {
            let m = Array2::from_shape_vec((pts.len(), 2), pts.concat()).unwrap();
            let ids: Vec<u64> = (0..pts.len() as u64).collect();
            let l = label_features(&ids, &m, &cs, &AssignConfig { alpha }).unwrap();
            prop_assert_eq!(l.len(), pts.len());
            prop_assert!(l.labeled.iter().all(|x| x.weighted_distance.is_some()));
            prop_assert!(l.unknown.iter().all(|x| x.label.is_unknown() && x.weighted_distance.is_none()));
        }
    }

    #[test]
    fn default_scenario_coverage_rises_with_alpha() {
        let sc = crate::synth::make_default_scenario(crate::synth::Style::O31, 0);
        let pda = crate::adapt::run_pda(&sc, &crate::adapt::PdaConfig::default()).unwrap();
        let prepared = PreparedTarget::new(&pda).unwrap();
        let mut last = 0;
        for alpha in [0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6] {
            let l = prepared.label(&AssignConfig { alpha }).unwrap();
            assert!(l.labeled.len() >= last);
            last = l.labeled.len();
        }
        assert!(last > 0);
    }
}
