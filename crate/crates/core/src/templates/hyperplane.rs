use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ConceptTemplate, TemplateMeta};
use crate::error::{Error, Result};
use crate::pools::{subsample_sorted, SamplePools};
use crate::seed::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mining_rounds: usize,
    pub epochs_per_round: usize,
    /// Negatives per positive in each round's training set.
    pub neg_pos_ratio: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub rng_seed: u64,
    /// Z-score features before training. The learned template is mapped
    /// back to raw feature space either way.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mining_rounds: 5,
            epochs_per_round: 3,
            neg_pos_ratio: 2.0,
            learning_rate: 0.01,
            batch_size: 64,
            rng_seed: 0,
            standardize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("train config: {what}")));
        if self.mining_rounds == 0 {
            return bad("mining_rounds must be positive");
        }
        if self.epochs_per_round == 0 {
            return bad("epochs_per_round must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.neg_pos_ratio > 0.0 && self.neg_pos_ratio.is_finite()) {
            return bad("neg_pos_ratio must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

/// What happened in one mining round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub round: usize,
    /// Indices into the pool's negatives used in this round.
    pub negatives: Vec<usize>,
    /// Mean logistic loss on the round's set, before training and after each epoch.
    pub losses: Vec<f64>,
    /// Template as it stood at the end of the round.
    pub template: ConceptTemplate,
}

impl RoundTrace {
    pub fn loss_non_increasing(&self, tol: f64) -> bool {
        self.losses.windows(2).all(|w| w[1] <= w[0] + tol)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub rounds: Vec<RoundTrace>,
}

/// Indices of the `count` largest scores, highest first, ties by lower index.
pub(crate) fn top_k_indices(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// The `count` negatives the template scores highest, as indices into
/// `negatives`, highest first. Ties go to the lower index.
pub fn mine_hard_negatives<V: AsRef<[f32]>>(
    template: &ConceptTemplate,
    negatives: &[V],
    count: usize,
) -> Result<Vec<usize>> {
    if count > negatives.len() {
        log::warn!(
            "asked for {count} hard negatives from a pool of {}",
            negatives.len()
        );
    }
    let scores = negatives
        .iter()
        .map(|z| template.project(z.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    Ok(top_k_indices(&scores, count))
}

pub fn fit_hyperplane(pools: &SamplePools, config: &TrainConfig) -> Result<ConceptTemplate> {
    fit_hyperplane_traced(pools, config).map(|(t, _)| t)
}

struct Model {
    w: Vec<f64>,
    c: f64,
}

impl Model {
    fn score(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.c
    }
}

// softplus(s) - y*s, computed without overflow
fn logistic_loss(s: f64, y: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p() - y * s
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Logistic-regression hyperplane with hard negative mining.
///
/// Round 0 trains on all positives plus a uniform draw of negatives at
/// `neg_pos_ratio`; every later round swaps in the negatives the current
/// model scores highest. The model carries over between rounds and each
/// round runs `epochs_per_round` epochs of shuffled mini-batch gradient
/// descent from zero-initialized weights.
pub fn fit_hyperplane_traced(
    pools: &SamplePools,
    config: &TrainConfig,
) -> Result<(ConceptTemplate, TrainingTrace)> {
    config.validate()?;
    if pools.positives.is_empty() {
        return Err(Error::EmptyPool("no positives"));
    }
    if pools.negatives.is_empty() {
        return Err(Error::EmptyPool("no negatives"));
    }
    let dim = pools.positives[0].vector.len();
    for s in pools.positives.iter().chain(&pools.negatives) {
        if s.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.vector.len(),
            });
        }
    }

    let (shift, scale) = if config.standardize {
        feature_moments(pools, dim)
    } else {
        (vec![0.0; dim], vec![1.0; dim])
    };
    let to_train_space = |v: &[f32]| -> Vec<f64> {
        v.iter()
            .zip(shift.iter().zip(&scale))
            .map(|(&x, (m, s))| (x as f64 - m) / s)
            .collect()
    };
    let pos: Vec<Vec<f64>> = pools.positives.iter().map(|s| to_train_space(&s.vector)).collect();
    let neg: Vec<Vec<f64>> = pools.negatives.iter().map(|s| to_train_space(&s.vector)).collect();

    let per_round = ((config.neg_pos_ratio * pos.len() as f64).floor() as usize)
        .clamp(1, neg.len());
    let mut rng = rng_from(config.rng_seed);
    let mut model = Model {
        w: vec![0.0; dim],
        c: 0.0,
    };
    let to_template = |m: &Model| -> ConceptTemplate {
        // fold the standardization back into raw feature space
        let w_raw: Vec<f64> = m.w.iter().zip(&scale).map(|(w, s)| w / s).collect();
        let c_raw = m.c - w_raw.iter().zip(&shift).map(|(w, mu)| w * mu).sum::<f64>();
        let mut t = ConceptTemplate::hyperplane(
            pools.concept,
            w_raw.iter().map(|&x| x as f32).collect(),
            -c_raw,
        );
        t.metadata = TemplateMeta::Hyperplane {
            seed: config.rng_seed,
            rounds: config.mining_rounds,
            epochs: config.epochs_per_round,
            standardized: config.standardize,
        };
        t
    };

    let mut trace = TrainingTrace::default();
    for round in 0..config.mining_rounds {
        let chosen = if round == 0 {
            subsample_sorted(neg.len(), per_round, &mut rng)
        } else {
            let scores: Vec<f64> = neg.iter().map(|x| model.score(x)).collect();
            top_k_indices(&scores, per_round)
        };

        let set: Vec<(&[f64], f64)> = pos
            .iter()
            .map(|x| (x.as_slice(), 1.0))
            .chain(chosen.iter().map(|&i| (neg[i].as_slice(), 0.0)))
            .collect();
        let mean_loss = |m: &Model| {
            set.iter().map(|(x, y)| logistic_loss(m.score(x), *y)).sum::<f64>() / set.len() as f64
        };

        let mut losses = vec![mean_loss(&model)];
        let mut order: Vec<usize> = (0..set.len()).collect();
        let mut grad = vec![0.0; dim];
        for epoch in 0..config.epochs_per_round {
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch_size) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                let mut grad_c = 0.0;
                for &i in batch {
                    let (x, y) = set[i];
                    let r = sigmoid(model.score(x)) - y;
                    for (g, xi) in grad.iter_mut().zip(x) {
                        *g += r * xi;
                    }
                    grad_c += r;
                }
                let step = config.learning_rate / batch.len() as f64;
                for (w, g) in model.w.iter_mut().zip(&grad) {
                    *w -= step * g;
                }
                model.c -= step * grad_c;
            }
            let loss = mean_loss(&model);
            let overflow = model.w.iter().zip(&scale).any(|(w, s)| !((w / s) as f32).is_finite());
            if !loss.is_finite() || !model.c.is_finite() || overflow {
                return Err(Error::TrainingFailure { round, epoch });
            }
            losses.push(loss);
        }
        let round_trace = RoundTrace {
            round,
            negatives: chosen,
            losses,
            template: to_template(&model),
        };
        if !round_trace.loss_non_increasing(1e-12) {
            log::debug!(
                "concept {}: loss rose within round {round}: {:?}",
                pools.concept,
                round_trace.losses
            );
        }
        trace.rounds.push(round_trace);
    }

    Ok((to_template(&model), trace))
}

fn feature_moments(pools: &SamplePools, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (pools.positives.len() + pools.negatives.len()) as f64;
    let mut mean = vec![0.0; dim];
    for s in pools.positives.iter().chain(&pools.negatives) {
        for (m, &x) in mean.iter_mut().zip(&s.vector) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for s in pools.positives.iter().chain(&pools.negatives) {
        for ((v, &x), m) in var.iter_mut().zip(&s.vector).zip(&mean) {
            *v += (x as f64 - m).powi(2);
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}
