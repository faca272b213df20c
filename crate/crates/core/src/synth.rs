//! Synthetic multi-source / target domain scenarios.
//!
//! Every class has a prototype mean in feature space. A domain draws isotropic normal
//! samples around `prototype + shift` with standard deviation `scale`, which gives each
//! domain its own marginal distribution over a shared class geometry.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{stream_rng, Error, Result};

pub type ClassId = usize;
pub type DomainId = usize;

pub const DEFAULT_FEATURE_DIM: usize = 10;
pub const DEFAULT_SOURCE_SAMPLES: usize = 30;
pub const DEFAULT_TARGET_SAMPLES: usize = 100;

/// Minimum ratio of pairwise prototype distance to within-class deviation in default
/// scenarios.
pub const SEPARATION_RATIO: f64 = 4.0;

const PROTOTYPE_RADIUS: f64 = 5.0;
const PROTOTYPE_JITTER: f64 = 0.25;
const SOURCE_SHIFT_NORM: f64 = 0.6;
const TARGET_SHIFT_NORM: f64 = 0.4;

const LAYOUT_STREAM: u64 = 0;
const DOMAIN_STREAM_BASE: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub true_class: ClassId,
    pub domain_id: DomainId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: DomainId,
    pub class_set: BTreeSet<ClassId>,
    pub samples_per_class: usize,
    pub shift: Vec<f64>,
    pub scale: f64,
    pub role: DomainRole,
}

impl DomainSpec {
    pub fn len(&self) -> usize {
        self.class_set.len() * self.samples_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub feature_dim: usize,
    pub prototypes: BTreeMap<ClassId, Vec<f64>>,
    pub domains: Vec<DomainSpec>,
    pub seed: u64,
}

/// Task composition template for [`make_default_scenario`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    /// Four sources drawn from two shift profiles.
    O31,
    /// Four sources drawn from three shift profiles.
    Oh,
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "o31" | "o31-like" => Ok(Style::O31),
            "oh" | "oh-like" => Ok(Style::Oh),
            other => Err(Error::Config(format!(
                "unknown scenario style `{other}` (expected o31 or oh)"
            ))),
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Style::O31 => f.write_str("o31"),
            Style::Oh => f.write_str("oh"),
        }
    }
}

/// Target classes shared by both default styles.
pub const DEFAULT_TARGET_CLASSES: [ClassId; 5] = [0, 1, 2, 3, 4];

/// Source compositions as `(class set, shift profile)`.
fn source_layout(style: Style) -> (usize, Vec<(&'static [ClassId], usize)>) {
    match style {
        Style::O31 => (
            2,
            vec![(&[0, 1], 0), (&[2, 5], 0), (&[3, 4, 6], 1), (&[7, 8], 1)],
        ),
        Style::Oh => (
            3,
            vec![(&[0, 1, 5], 0), (&[2, 3], 1), (&[4, 6], 2), (&[7, 8], 2)],
        ),
    }
}

fn profile_scale(style: Style, profile: usize) -> f64 {
    match (style, profile) {
        (Style::O31, 0) => 0.9,
        (Style::O31, _) => 1.1,
        (Style::Oh, 0) => 1.1,
        (Style::Oh, 1) => 0.9,
        (Style::Oh, _) => 1.0,
    }
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R, dim: usize, norm: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let len = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    raw.into_iter().map(|v| v * norm / len).collect()
}

/// Builds one of the two default task compositions.
///
/// Domain 0 is the target over classes {0..4}; domains 1..=4 are the sources in
/// the order of the composition table, the last one ({7,8}) sharing nothing with
/// the target.
pub fn make_default_scenario(style: Style, seed: u64) -> Scenario {
    let dim = DEFAULT_FEATURE_DIM;
    let mut rng = stream_rng(seed, LAYOUT_STREAM);

    let mut prototypes = BTreeMap::new();
    for class in 0..9 {
        let mut mean: Vec<f64> = (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                PROTOTYPE_JITTER * z
            })
            .collect();
        mean[class % dim] += PROTOTYPE_RADIUS;
        prototypes.insert(class, mean);
    }

    let (profiles, layout) = source_layout(style);
    let shifts: Vec<Vec<f64>> = (0..profiles)
        .map(|_| random_direction(&mut rng, dim, SOURCE_SHIFT_NORM))
        .collect();

    let mut domains = vec![DomainSpec {
        domain_id: 0,
        class_set: DEFAULT_TARGET_CLASSES.iter().copied().collect(),
        samples_per_class: DEFAULT_TARGET_SAMPLES,
        shift: random_direction(&mut rng, dim, TARGET_SHIFT_NORM),
        scale: 1.0,
        role: DomainRole::Target,
    }];
    for (i, (classes, profile)) in layout.into_iter().enumerate() {
        domains.push(DomainSpec {
            domain_id: i + 1,
            class_set: classes.iter().copied().collect(),
            samples_per_class: DEFAULT_SOURCE_SAMPLES,
            shift: shifts[profile].clone(),
            scale: profile_scale(style, profile),
            role: DomainRole::Source,
        });
    }

    Scenario {
        feature_dim: dim,
        prototypes,
        domains,
        seed,
    }
}

/// Samples of one domain.
#[derive(Debug, Clone)]
pub struct DomainSamples {
    pub spec: DomainSpec,
    pub samples: Vec<Sample>,
}

/// All samples of a scenario, split by role.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub sources: Vec<DomainSamples>,
    pub target: Vec<Sample>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim;
        if d == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        for (class, proto) in &self.prototypes {
            if proto.len() != d || proto.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "prototype of class {class} must have {d} finite entries"
                )));
            }
        }
        let mut ids = BTreeSet::new();
        let mut targets = 0;
        let mut source_classes = BTreeSet::new();
        for spec in &self.domains {
            if !ids.insert(spec.domain_id) {
                return Err(Error::Config(format!("duplicate domain id {}", spec.domain_id)));
            }
            if spec.samples_per_class == 0 {
                return Err(Error::Config(format!(
                    "domain {} has samples_per_class = 0",
                    spec.domain_id
                )));
            }
            if !(spec.scale > 0.0 && spec.scale.is_finite()) {
                return Err(Error::Config(format!(
                    "domain {} scale must be positive",
                    spec.domain_id
                )));
            }
            if spec.shift.len() != d {
                return Err(Error::Config(format!(
                    "domain {} shift has {} entries, expected {d}",
                    spec.domain_id,
                    spec.shift.len()
                )));
            }
            if spec.class_set.is_empty() {
                return Err(Error::Config(format!("domain {} has no classes", spec.domain_id)));
            }
            for class in &spec.class_set {
                if !self.prototypes.contains_key(class) {
                    return Err(Error::Config(format!(
                        "domain {} references class {class} without a prototype",
                        spec.domain_id
                    )));
                }
            }
            match spec.role {
                DomainRole::Target => targets += 1,
                DomainRole::Source => source_classes.extend(spec.class_set.iter().copied()),
            }
        }
        if targets != 1 {
            return Err(Error::Config(format!(
                "scenario needs exactly one target domain, found {targets}"
            )));
        }
        if !self.target()?.class_set.is_subset(&source_classes) {
            return Err(Error::Config(
                "source class sets must cover the target class set".into(),
            ));
        }
        Ok(())
    }

    pub fn target(&self) -> Result<&DomainSpec> {
        self.domains
            .iter()
            .find(|d| d.role == DomainRole::Target)
            .ok_or_else(|| Error::Config("scenario has no target domain".into()))
    }

    pub fn sources(&self) -> impl Iterator<Item = &DomainSpec> {
        self.domains.iter().filter(|d| d.role == DomainRole::Source)
    }

    pub fn source_classes(&self) -> BTreeSet<ClassId> {
        self.sources().flat_map(|d| d.class_set.iter().copied()).collect()
    }

    /// Smallest Euclidean distance between two prototypes.
    pub fn min_prototype_separation(&self) -> f64 {
        let protos: Vec<&Vec<f64>> = self.prototypes.values().collect();
        let mut best = f64::INFINITY;
        for i in 0..protos.len() {
            for j in i + 1..protos.len() {
                best = best.min(euclidean(protos[i], protos[j]));
            }
        }
        best
    }

    /// Largest within-class standard deviation of any domain.
    pub fn max_within_class_sd(&self) -> f64 {
        self.domains.iter().map(|d| d.scale).fold(0.0, f64::max)
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let mut sources = Vec::new();
        let mut target = Vec::new();
        for spec in &self.domains {
            let samples = sample_domain(spec, self)?;
            match spec.role {
                DomainRole::Source => sources.push(DomainSamples {
                    spec: spec.clone(),
                    samples,
                }),
                DomainRole::Target => target = samples,
            }
        }
        Ok(Dataset { sources, target })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let scenario: Scenario = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        scenario.validate()?;
        Ok(scenario)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Draws the samples of one domain.
///
/// Ids are assigned from an offset equal to the total size of the domains listed before
/// `spec` in the scenario, so ids are unique across the scenario.
pub fn sample_domain(spec: &DomainSpec, scenario: &Scenario) -> Result<Vec<Sample>> {
    let position = scenario
        .domains
        .iter()
        .position(|d| d.domain_id == spec.domain_id)
        .ok_or_else(|| {
            Error::Config(format!("domain {} is not part of the scenario", spec.domain_id))
        })?;
    if spec.shift.len() != scenario.feature_dim {
        return Err(Error::Config(format!(
            "domain {} shift has {} entries, expected {}",
            spec.domain_id,
            spec.shift.len(),
            scenario.feature_dim
        )));
    }
    let offset: usize = scenario.domains[..position].iter().map(DomainSpec::len).sum();

    let mut rng = stream_rng(scenario.seed, DOMAIN_STREAM_BASE + spec.domain_id as u64);
    let mut out = Vec::with_capacity(spec.len());
    for &class in &spec.class_set {
        let proto = scenario.prototypes.get(&class).ok_or_else(|| {
            Error::Config(format!("class {class} has no prototype"))
        })?;
        for _ in 0..spec.samples_per_class {
            let features = proto
                .iter()
                .zip(&spec.shift)
                .map(|(m, s)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + s + spec.scale * z
                })
                .collect();
            out.push(Sample {
                id: (offset + out.len()) as u64,
                features,
                true_class: class,
                domain_id: spec.domain_id,
            });
        }
    }
    Ok(out)
}

/// Stacks sample features into a row-major matrix.
pub fn feature_matrix<'a, I>(samples: I, dim: usize) -> Array2<f64>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let mut data = Vec::new();
    let mut rows = 0;
    for s in samples {
        data.extend_from_slice(&s.features);
        rows += 1;
    }
    Array2::from_shape_vec((rows, dim), data).expect("sample features have the scenario dimension")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_class_scenario(shift: Vec<f64>, scale: f64, n: usize) -> Scenario {
        let mut prototypes = BTreeMap::new();
        prototypes.insert(0, vec![1.0, -2.0, 0.5]);
        Scenario {
            feature_dim: 3,
            prototypes,
            domains: vec![
                DomainSpec {
                    domain_id: 0,
                    class_set: [0].into(),
                    samples_per_class: n,
                    shift: vec![0.0; 3],
                    scale: 1.0,
                    role: DomainRole::Target,
                },
                DomainSpec {
                    domain_id: 1,
                    class_set: [0].into(),
                    samples_per_class: n,
                    shift,
                    scale,
                    role: DomainRole::Source,
                },
            ],
            seed: 11,
        }
    }

    fn mean(samples: &[Sample]) -> Vec<f64> {
        let d = samples[0].features.len();
        let mut m = vec![0.0; d];
        for s in samples {
            for (acc, v) in m.iter_mut().zip(&s.features) {
                *acc += v;
            }
        }
        m.iter().map(|v| v / samples.len() as f64).collect()
    }

    #[test]
    fn o31_layout() {
        let sc = make_default_scenario(Style::O31, 1);
        sc.validate().unwrap();
        assert_eq!(sc.sources().count(), 4);
        assert_eq!(sc.source_classes(), (0..9).collect());
        assert_eq!(sc.target().unwrap().class_set, (0..5).collect());
        let unrelated = sc.sources().find(|d| d.class_set == [7, 8].into()).unwrap();
        assert!(unrelated.class_set.is_disjoint(&sc.target().unwrap().class_set));
        let profiles: BTreeSet<String> =
            sc.sources().map(|d| format!("{:?}", d.shift)).collect();
        assert_eq!(profiles.len(), 2);
    }

    #[test]
    fn oh_layout_has_three_profiles() {
        let sc = make_default_scenario(Style::Oh, 1);
        sc.validate().unwrap();
        assert_eq!(sc.sources().count(), 4);
        let profiles: BTreeSet<String> =
            sc.sources().map(|d| format!("{:?}", d.shift)).collect();
        assert_eq!(profiles.len(), 3);
    }

    #[test]
    fn default_scenarios_are_partial_and_separated() {
        for style in [Style::O31, Style::Oh] {
            for seed in 0..20 {
                let sc = make_default_scenario(style, seed);
                let target = &sc.target().unwrap().class_set;
                let sources = sc.source_classes();
                assert!(target.is_subset(&sources) && target.len() < sources.len());
                assert!(
                    sc.min_prototype_separation() >= SEPARATION_RATIO * sc.max_within_class_sd()
                );
            }
        }
    }

    #[test]
    fn deterministic_by_seed() {
        let a = make_default_scenario(Style::O31, 7);
        let b = make_default_scenario(Style::O31, 7);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let da = a.generate().unwrap();
        let db = b.generate().unwrap();
        assert_eq!(da.target, db.target);
        for (x, y) in da.sources.iter().zip(&db.sources) {
            assert_eq!(x.samples, y.samples);
        }
        assert_ne!(a, make_default_scenario(Style::O31, 8));
    }

    #[test]
    fn ids_unique_across_scenario() {
        let data = make_default_scenario(Style::Oh, 3).generate().unwrap();
        let mut ids = BTreeSet::new();
        for s in data.target.iter().chain(data.sources.iter().flat_map(|d| &d.samples)) {
            assert!(ids.insert(s.id));
            assert_eq!(s.features.len(), DEFAULT_FEATURE_DIM);
            assert!(s.features.iter().all(|v| v.is_finite()));
        }
        assert_eq!(ids.len(), 500 + 30 * 9);
    }

    #[test]
    fn count_contract() {
        let sc = single_class_scenario(vec![0.0; 3], 1.0, 10);
        let samples = sample_domain(&sc.domains[1], &sc).unwrap();
        assert_eq!(samples.len(), 10);
        assert!(samples.iter().all(|s| s.true_class == 0 && s.domain_id == 1));
    }

    #[test]
    fn sample_mean_within_standard_error() {
        let n = 400;
        let sc = single_class_scenario(vec![0.0; 3], 1.0, n);
        let m = mean(&sample_domain(&sc.domains[1], &sc).unwrap());
        let bound = 3.0 / (n as f64).sqrt();
        for (mi, pi) in m.iter().zip(&sc.prototypes[&0]) {
            assert!((mi - pi).abs() < bound, "{mi} vs {pi}");
        }
    }

    #[test]
    fn shift_moves_empirical_mean() {
        let n = 2000;
        let shift = vec![2.0, -1.0, 0.5];
        let sc = single_class_scenario(shift.clone(), 1.0, n);
        let base = mean(&sample_domain(&sc.domains[0], &sc).unwrap());
        let moved = mean(&sample_domain(&sc.domains[1], &sc).unwrap());
        // difference of two means with sd 1/sqrt(n) each
        let bound = 4.0 * (2.0 / n as f64).sqrt();
        for i in 0..3 {
            assert!(((moved[i] - base[i]) - shift[i]).abs() < bound);
        }
    }

    #[test]
    fn unknown_class_is_config_error() {
        let mut sc = single_class_scenario(vec![0.0; 3], 1.0, 5);
        sc.domains[1].class_set.insert(42);
        assert!(matches!(
            sample_domain(&sc.domains[1], &sc),
            Err(Error::Config(_))
        ));
        assert!(sc.validate().is_err());
    }

    #[test]
    fn validate_rejects_bad_specs() {
        let mut sc = single_class_scenario(vec![0.0; 3], 1.0, 5);
        sc.domains[1].scale = 0.0;
        assert!(sc.validate().is_err());

        let mut sc = single_class_scenario(vec![0.0; 3], 1.0, 5);
        sc.domains[1].role = DomainRole::Target;
        assert!(sc.validate().is_err());

        let mut sc = single_class_scenario(vec![0.0; 3], 1.0, 5);
        sc.prototypes.insert(1, vec![0.0; 3]);
        sc.domains[0].class_set.insert(1);
        assert!(sc.validate().is_err(), "target class 1 not covered by sources");
    }

    #[test]
    fn json_round_trip() {
        let sc = make_default_scenario(Style::Oh, 5);
        let text = serde_json::to_string(&sc).unwrap();
        let back: Scenario = serde_json::from_str(&text).unwrap();
        assert_eq!(sc, back);
    }

    #[test]
    fn style_parsing() {
        assert_eq!("o31-like".parse::<Style>().unwrap(), Style::O31);
        assert_eq!("OH".parse::<Style>().unwrap(), Style::Oh);
        assert!("office".parse::<Style>().is_err());
    }
}
