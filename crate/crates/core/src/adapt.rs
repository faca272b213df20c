//! Two-round partial domain adaptation.
//!
//! Round one merges every source domain, trains the source extractor, aligns a copy of
//! it to the target adversarially and scores each source class by the discriminator's
//! mean target probability. Domains whose classes all score below `tau` are dropped and
//! round two repeats training and scoring on the survivors.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::nn::{self, Activation, Head, Mlp, SourceModel, TrainConfig};
use crate::synth::{feature_matrix, ClassId, Dataset, DomainId, DomainSamples, DomainSpec, Scenario};
use crate::{stream_rng, Error, Result};

/// Anything that maps feature rows to a probability of target membership.
pub trait TargetScorer {
    fn target_probability(&self, features: &Array2<f64>) -> Result<Vec<f64>>;
}

impl TargetScorer for Mlp {
    fn target_probability(&self, features: &Array2<f64>) -> Result<Vec<f64>> {
        if self.head() != Head::Sigmoid {
            return Err(Error::Shape("discriminator must have a sigmoid head".into()));
        }
        Ok(self.forward(features)?.column(0).to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_id: ClassId,
    /// Mean target probability over the class's source samples.
    pub k_c: f64,
    pub round: u8,
}

/// `k_c` per source class: the mean discriminator target probability of the class's
/// source samples passed through the source extractor.
pub fn score_classes(
    disc: &dyn TargetScorer,
    extractor: &Mlp,
    by_class: &BTreeMap<ClassId, Array2<f64>>,
    round: u8,
) -> Result<Vec<ClassScore>> {
    by_class
        .iter()
        .map(|(&class_id, x)| {
            if x.nrows() == 0 {
                return Err(Error::Contract(format!("class {class_id} has no samples to score")));
            }
            let probs = disc.target_probability(&extractor.forward(x)?)?;
            let k_c = probs.iter().sum::<f64>() / probs.len() as f64;
            Ok(ClassScore { class_id, k_c, round })
        })
        .collect()
}

/// Keeps every domain that has at least one class scoring `>= tau`.
pub fn drop_irrelevant(
    domains: &[DomainSpec],
    scores: &[ClassScore],
    tau: f64,
) -> Result<Vec<DomainSpec>> {
    let by_class: BTreeMap<ClassId, f64> = scores.iter().map(|s| (s.class_id, s.k_c)).collect();
    let mut kept = Vec::new();
    for domain in domains {
        let mut relevant = false;
        for class in &domain.class_set {
            let k = by_class.get(class).ok_or_else(|| {
                Error::Contract(format!("class {class} of domain {} has no score", domain.domain_id))
            })?;
            relevant |= *k >= tau;
        }
        if relevant {
            kept.push(domain.clone());
        }
    }
    if kept.is_empty() {
        return Err(Error::NoTransferableSource { tau });
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PdaConfig {
    /// Classes scoring below this count as source-unique.
    pub tau: f64,
    pub source_training: TrainConfig,
    pub adversarial: TrainConfig,
    pub hidden_width: usize,
    pub feature_width: usize,
    pub disc_width: usize,
    /// Keep the round-one source extractor in round two instead of retraining it.
    pub reuse_source_extractor: bool,
    pub seed: u64,
}

impl Default for PdaConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            source_training: TrainConfig {
                max_epochs: 150,
                ..TrainConfig::default()
            },
            adversarial: TrainConfig {
                max_epochs: 80,
                generator_learning_rate: 0.002,
                ..TrainConfig::default()
            },
            hidden_width: 32,
            feature_width: 8,
            disc_width: 8,
            reuse_source_extractor: false,
            seed: 0,
        }
    }
}

impl PdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.hidden_width == 0 || self.feature_width == 0 || self.disc_width == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        self.source_training.validate()?;
        self.adversarial.validate()
    }

    fn round_seed(&self, round: u8, salt: u64) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(u64::from(round) << 8 | salt)
    }
}

/// Class scores of both rounds in a class-by-round layout; `None` marks classes whose
/// domain was dropped before the round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    #[serde(rename = "k_c-1")]
    pub round1: BTreeMap<ClassId, Option<f64>>,
    #[serde(rename = "k_c-2")]
    pub round2: BTreeMap<ClassId, Option<f64>>,
}

impl ScoreTable {
    fn build(classes: &BTreeSet<ClassId>, round1: &[ClassScore], round2: &[ClassScore]) -> Self {
        let lookup = |scores: &[ClassScore]| -> BTreeMap<ClassId, Option<f64>> {
            classes
                .iter()
                .map(|&c| (c, scores.iter().find(|s| s.class_id == c).map(|s| s.k_c)))
                .collect()
        };
        Self {
            round1: lookup(round1),
            round2: lookup(round2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdaResult {
    pub scenario: Scenario,
    pub tau: f64,
    pub input_domains: Vec<DomainId>,
    /// Source domains kept after round one; round two runs on exactly these.
    pub surviving_domains: Vec<DomainId>,
    pub round1: Vec<ClassScore>,
    pub round2: Vec<ClassScore>,
    pub score_table: ScoreTable,
    /// Classes with a final score `>= tau`.
    pub shared_classes: Vec<ClassId>,
    pub source_accuracy: Vec<f64>,
    pub adversarial_epochs: Vec<usize>,
    pub source_model: SourceModel,
    pub generator: Mlp,
    pub discriminator: Mlp,
}

impl PdaResult {
    /// Final-round scores of the classes that stay label candidates.
    pub fn candidate_scores(&self) -> Vec<ClassScore> {
        self.round2
            .iter()
            .filter(|s| s.k_c >= self.tau)
            .copied()
            .collect()
    }

    pub fn removed_domains(&self) -> Vec<DomainId> {
        self.input_domains
            .iter()
            .filter(|d| !self.surviving_domains.contains(d))
            .copied()
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Source samples of `domains` grouped by class, as raw input rows.
pub fn source_by_class(
    domains: &[&DomainSamples],
    dim: usize,
) -> BTreeMap<ClassId, Array2<f64>> {
    let mut grouped: BTreeMap<ClassId, Vec<&crate::synth::Sample>> = BTreeMap::new();
    for d in domains {
        for s in &d.samples {
            grouped.entry(s.true_class).or_default().push(s);
        }
    }
    grouped
        .into_iter()
        .map(|(c, v)| (c, feature_matrix(v, dim)))
        .collect()
}

struct RoundOutcome {
    model: SourceModel,
    generator: Mlp,
    discriminator: Mlp,
    scores: Vec<ClassScore>,
    adversarial_epochs: usize,
}

fn run_round(
    data: &Dataset,
    domains: &[DomainId],
    dim: usize,
    cfg: &PdaConfig,
    round: u8,
    reuse: Option<&SourceModel>,
) -> Result<RoundOutcome> {
    let selected: Vec<&DomainSamples> = data
        .sources
        .iter()
        .filter(|d| domains.contains(&d.spec.domain_id))
        .collect();
    let source_samples: Vec<_> = selected.iter().flat_map(|d| d.samples.iter()).collect();
    let source_x = feature_matrix(source_samples.iter().copied(), dim);
    let source_y: Vec<ClassId> = source_samples.iter().map(|s| s.true_class).collect();
    let target_x = feature_matrix(&data.target, dim);

    let mut rng = stream_rng(cfg.round_seed(round, 0), 0);
    let model = match reuse {
        Some(model) => model.clone(),
        None => {
            let n_classes = source_y.iter().collect::<BTreeSet<_>>().len();
            let extractor = Mlp::new(
                &[dim, cfg.hidden_width, cfg.feature_width],
                Activation::Tanh,
                Head::Linear,
                &mut rng,
            )?;
            let classifier = Mlp::new(
                &[cfg.feature_width, n_classes],
                Activation::Tanh,
                Head::Softmax,
                &mut rng,
            )?;
            let train_cfg = TrainConfig {
                seed: cfg.round_seed(round, 1),
                ..cfg.source_training.clone()
            };
            nn::train_source(extractor, classifier, &source_x, &source_y, &train_cfg)?
        }
    };

    let discriminator = Mlp::new(
        &[cfg.feature_width, cfg.disc_width, 1],
        Activation::Tanh,
        Head::Sigmoid,
        &mut rng,
    )?;
    let adv_cfg = TrainConfig {
        seed: cfg.round_seed(round, 2),
        ..cfg.adversarial.clone()
    };
    let adv = nn::train_adversarial(
        model.extractor.clone(),
        discriminator,
        &model.extractor,
        &source_x,
        &target_x,
        &adv_cfg,
    )?;
    let scores = score_classes(
        &adv.discriminator,
        &model.extractor,
        &source_by_class(&selected, dim),
        round,
    )?;
    Ok(RoundOutcome {
        model,
        generator: adv.generator,
        discriminator: adv.discriminator,
        scores,
        adversarial_epochs: adv.history.len(),
    })
}

/// Runs both adaptation rounds on a scenario.
pub fn run_pda(scenario: &Scenario, cfg: &PdaConfig) -> Result<PdaResult> {
    cfg.validate()?;
    let data = scenario.generate()?;
    if data.sources.is_empty() {
        return Err(Error::Config("scenario has no source domain".into()));
    }
    let dim = scenario.feature_dim;
    let input_domains: Vec<DomainId> = data.sources.iter().map(|d| d.spec.domain_id).collect();

    let first = run_round(&data, &input_domains, dim, cfg, 1, None)?;
    let specs: Vec<DomainSpec> = data.sources.iter().map(|d| d.spec.clone()).collect();
    let surviving_domains: Vec<DomainId> = drop_irrelevant(&specs, &first.scores, cfg.tau)?
        .iter()
        .map(|d| d.domain_id)
        .collect();

    let reuse = cfg.reuse_source_extractor.then_some(&first.model);
    let second = run_round(&data, &surviving_domains, dim, cfg, 2, reuse)?;

    let shared_classes = second
        .scores
        .iter()
        .filter(|s| s.k_c >= cfg.tau)
        .map(|s| s.class_id)
        .collect();
    Ok(PdaResult {
        scenario: scenario.clone(),
        tau: cfg.tau,
        input_domains,
        surviving_domains,
        score_table: ScoreTable::build(&scenario.source_classes(), &first.scores, &second.scores),
        shared_classes,
        source_accuracy: vec![first.model.train_accuracy, second.model.train_accuracy],
        adversarial_epochs: vec![first.adversarial_epochs, second.adversarial_epochs],
        round1: first.scores,
        round2: second.scores,
        source_model: second.model,
        generator: second.generator,
        discriminator: second.discriminator,
    })
}
