use std::collections::BTreeSet;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Head, Loss, Mlp};
use crate::synth::ClassId;
use crate::{stream_rng, Error, Result};

const SOURCE_STREAM: u64 = 1;
const ADVERSARIAL_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Step size of the generator in adversarial training; a slower generator keeps the
    /// discriminator near its optimum.
    pub generator_learning_rate: f64,
    pub batch_size: usize,
    /// Zero is allowed and leaves every network untouched.
    pub max_epochs: usize,
    /// Discriminator updates per generator update.
    pub disc_steps: usize,
    /// Consecutive flat epochs before stopping early.
    pub patience: usize,
    /// An epoch is flat when its losses move less than this.
    pub tolerance: f64,
    /// Discriminator-only epochs run after the adversarial phase, generator frozen.
    pub refine_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            generator_learning_rate: 0.005,
            batch_size: 32,
            max_epochs: 100,
            disc_steps: 1,
            patience: 10,
            tolerance: 1e-4,
            refine_epochs: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            || !(self.generator_learning_rate > 0.0 && self.generator_learning_rate.is_finite())
        {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.disc_steps == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch size, discriminator steps and patience must be at least 1".into(),
            ));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config("tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Source feature extractor with its softmax classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceModel {
    pub extractor: Mlp,
    pub classifier: Mlp,
    /// Class id of each classifier output, ascending.
    pub classes: Vec<ClassId>,
    pub train_accuracy: f64,
    pub epochs_run: usize,
}

impl SourceModel {
    pub fn predict(&self, batch: &Array2<f64>) -> Result<Vec<ClassId>> {
        let probs = self.classifier.forward(&self.extractor.forward(batch)?)?;
        Ok(probs
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                self.classes[best]
            })
            .collect())
    }
}

fn shuffled(n: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Trains the extractor and its classifier head jointly with softmax cross entropy.
pub fn train_source(
    mut extractor: Mlp,
    mut classifier: Mlp,
    features: &Array2<f64>,
    labels: &[ClassId],
    cfg: &TrainConfig,
) -> Result<SourceModel> {
    cfg.validate()?;
    if features.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    let classes: Vec<ClassId> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::Config(
            "source training needs at least two classes".into(),
        ));
    }
    if classifier.head() != Head::Softmax || classifier.output_dim() != classes.len() {
        return Err(Error::Shape(format!(
            "classifier must be a softmax head with {} outputs",
            classes.len()
        )));
    }
    if extractor.output_dim() != classifier.input_dim() {
        return Err(Error::Shape("extractor output does not feed classifier input".into()));
    }
    let targets: Vec<usize> = labels
        .iter()
        .map(|c| classes.binary_search(c).unwrap())
        .collect();

    let mut rng = stream_rng(cfg.seed, SOURCE_STREAM);
    let n = labels.len();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut epochs_run = 0;
    for _ in 0..cfg.max_epochs {
        let order = shuffled(n, &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = features.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let feats = extractor.forward(&x)?;
            let (loss, head_grads) = classifier.backward(&feats, &Loss::SoftmaxCrossEntropy(&y))?;
            let (_, body_grads) = extractor.backward(&x, &Loss::Upstream(&head_grads.input))?;
            classifier.sgd_step(&head_grads, cfg.learning_rate)?;
            extractor.sgd_step(&body_grads, cfg.learning_rate)?;
            epoch_loss += loss * chunk.len() as f64;
        }
        epochs_run += 1;
        epoch_loss /= n as f64;
        if epoch_loss < best - cfg.tolerance {
            best = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let mut model = SourceModel {
        extractor,
        classifier,
        classes,
        train_accuracy: 0.0,
        epochs_run,
    };
    let predicted = model.predict(features)?;
    let correct = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    model.train_accuracy = correct as f64 / n as f64;
    Ok(model)
}

fn domain_targets(n_source: usize, n_target: usize) -> (Vec<f64>, Vec<f64>) {
    let mut targets = vec![0.0; n_source];
    targets.resize(n_source + n_target, 1.0);
    let mut weights = vec![1.0 / n_source as f64; n_source];
    weights.resize(n_source + n_target, 1.0 / n_target as f64);
    (targets, weights)
}

fn check_domain_batches(source: &Array2<f64>, target: &Array2<f64>) -> Result<()> {
    if source.nrows() == 0 || target.nrows() == 0 {
        return Err(Error::Contract("domain batches must be non-empty".into()));
    }
    Ok(())
}

/// Domain loss of a discriminator that outputs target-membership probability:
/// source features are labeled 0 and target features 1, each side averaged separately.
pub fn discriminator_loss(
    disc: &Mlp,
    source_feats: &Array2<f64>,
    target_feats: &Array2<f64>,
) -> Result<f64> {
    check_domain_batches(source_feats, target_feats)?;
    let batch = concatenate(Axis(0), &[source_feats.view(), target_feats.view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    let (targets, weights) = domain_targets(source_feats.nrows(), target_feats.nrows());
    disc.loss(
        &batch,
        &Loss::WeightedBce {
            targets: &targets,
            weights: &weights,
        },
    )
}

/// One gradient step on [`discriminator_loss`]. Returns the loss before the step.
pub fn discriminator_step(
    disc: &mut Mlp,
    source_feats: &Array2<f64>,
    target_feats: &Array2<f64>,
    learning_rate: f64,
) -> Result<f64> {
    check_domain_batches(source_feats, target_feats)?;
    let batch = concatenate(Axis(0), &[source_feats.view(), target_feats.view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    let (targets, weights) = domain_targets(source_feats.nrows(), target_feats.nrows());
    let (loss, grads) = disc.backward(
        &batch,
        &Loss::WeightedBce {
            targets: &targets,
            weights: &weights,
        },
    )?;
    disc.sgd_step(&grads, learning_rate)?;
    Ok(loss)
}

/// Non-saturating generator step: push target features toward what the
/// discriminator calls source, i.e. minimize `-mean ln(1 - D(G(x)))`.
fn generator_step(gen: &mut Mlp, disc: &Mlp, target_x: &Array2<f64>, learning_rate: f64) -> Result<f64> {
    let n = target_x.nrows();
    let feats = gen.forward(target_x)?;
    let targets = vec![0.0; n];
    let weights = vec![1.0 / n as f64; n];
    let (loss, disc_grads) = disc.backward(
        &feats,
        &Loss::WeightedBce {
            targets: &targets,
            weights: &weights,
        },
    )?;
    let (_, gen_grads) = gen.backward(target_x, &Loss::Upstream(&disc_grads.input))?;
    gen.sgd_step(&gen_grads, learning_rate)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub discriminator: f64,
    pub generator: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialOutcome {
    pub generator: Mlp,
    pub discriminator: Mlp,
    pub history: Vec<EpochLosses>,
}

/// Alternates discriminator and generator updates with the source extractor frozen.
///
/// Source rows go through `extractor`, target rows through `generator`. Each epoch
/// walks the target set once in shuffled mini-batches; every target batch gets
/// `disc_steps` discriminator updates (against cycling source batches) followed by one
/// generator update. Training stops after `max_epochs` or once both epoch losses move
/// less than `tolerance` for `patience` epochs in a row. `refine_epochs` further
/// discriminator epochs then fit the discriminator to the final generator.
pub fn train_adversarial(
    mut generator: Mlp,
    mut discriminator: Mlp,
    extractor: &Mlp,
    source: &Array2<f64>,
    target: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<AdversarialOutcome> {
    cfg.validate()?;
    if target.nrows() == 0 {
        return Err(Error::Contract("adversarial training needs target samples".into()));
    }
    if source.nrows() == 0 {
        return Err(Error::Contract("adversarial training needs source samples".into()));
    }
    if discriminator.head() != Head::Sigmoid {
        return Err(Error::Shape("discriminator must have a sigmoid head".into()));
    }
    if generator.layer_sizes() != extractor.layer_sizes() {
        return Err(Error::Shape("generator and source extractor must share an architecture".into()));
    }
    let source_feats = extractor.forward(source)?;

    let mut rng = stream_rng(cfg.seed, ADVERSARIAL_STREAM);
    let mut history: Vec<EpochLosses> = Vec::new();
    let mut flat = 0;
    for _ in 0..cfg.max_epochs {
        let target_order = shuffled(target.nrows(), &mut rng);
        let source_order = shuffled(source.nrows(), &mut rng);
        let mut cursor = 0;
        let mut next_source = |count: usize| -> Vec<usize> {
            (0..count)
                .map(|_| {
                    let i = source_order[cursor % source_order.len()];
                    cursor += 1;
                    i
                })
                .collect()
        };

        let (mut d_sum, mut g_sum, mut batches) = (0.0, 0.0, 0);
        for chunk in target_order.chunks(cfg.batch_size) {
            let target_x = target.select(Axis(0), chunk);
            let target_feats = generator.forward(&target_x)?;
            for _ in 0..cfg.disc_steps {
                let src = source_feats.select(Axis(0), &next_source(chunk.len().min(cfg.batch_size)));
                d_sum += discriminator_step(&mut discriminator, &src, &target_feats, cfg.learning_rate)?;
            }
            g_sum += generator_step(&mut generator, &discriminator, &target_x, cfg.generator_learning_rate)?;
            batches += 1;
        }
        let epoch = EpochLosses {
            discriminator: d_sum / (batches * cfg.disc_steps) as f64,
            generator: g_sum / batches as f64,
        };
        if let Some(prev) = history.last() {
            let still = (epoch.discriminator - prev.discriminator).abs() < cfg.tolerance
                && (epoch.generator - prev.generator).abs() < cfg.tolerance;
            flat = if still { flat + 1 } else { 0 };
        }
        history.push(epoch);
        if flat >= cfg.patience {
            break;
        }
    }

    let target_feats = generator.forward(target)?;
    for _ in 0..cfg.refine_epochs {
        let target_order = shuffled(target.nrows(), &mut rng);
        let source_order = shuffled(source.nrows(), &mut rng);
        for (t_chunk, s_chunk) in target_order
            .chunks(cfg.batch_size)
            .zip(source_order.chunks(cfg.batch_size).cycle())
        {
            let tgt = target_feats.select(Axis(0), t_chunk);
            let src = source_feats.select(Axis(0), s_chunk);
            discriminator_step(&mut discriminator, &src, &tgt, cfg.learning_rate)?;
        }
    }

    Ok(AdversarialOutcome {
        generator,
        discriminator,
        history,
    })
}
