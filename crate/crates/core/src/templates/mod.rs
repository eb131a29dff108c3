//! Concept templates: a direction, a threshold and a projection.
//!
//! A template detects its concept in a feature vector `z` when
//! `project(z) >= threshold`. Two projections exist:
//!
//! * hyperplane: `project(z) = w·z`, threshold `b` (the rule `w·z - b >= 0`);
//! * cosine: `project(z) = α·z / (‖α‖‖z‖)`, threshold `cos θ`.

mod cosine;
mod hyperplane;
mod threshold;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::TokenType;

pub use cosine::fit_cosine;
pub use hyperplane::{fit_hyperplane, fit_hyperplane_traced, mine_hard_negatives, RoundTrace, TrainConfig, TrainingTrace};
pub use threshold::{f1_from_counts, search_threshold};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Hyperplane,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TemplateMeta {
    Hyperplane {
        seed: u64,
        rounds: usize,
        epochs: usize,
        standardized: bool,
    },
    Cosine {
        k: Option<usize>,
        trial: Option<usize>,
        support_f1: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTemplate {
    #[serde(rename = "concept_id")]
    pub concept: u32,
    pub rule: Rule,
    pub threshold: f64,
    pub direction: Vec<f32>,
    pub metadata: TemplateMeta,
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub(crate) fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

impl ConceptTemplate {
    pub fn hyperplane(concept: u32, weights: Vec<f32>, bias: f64) -> Self {
        Self {
            concept,
            rule: Rule::Hyperplane,
            threshold: bias,
            direction: weights,
            metadata: TemplateMeta::Hyperplane {
                seed: 0,
                rounds: 0,
                epochs: 0,
                standardized: false,
            },
        }
    }

    pub fn cosine(concept: u32, axis: Vec<f32>, cos_theta: f64) -> Self {
        Self {
            concept,
            rule: Rule::Cosine,
            threshold: cos_theta,
            direction: axis,
            metadata: TemplateMeta::Cosine {
                k: None,
                trial: None,
                support_f1: f64::NAN,
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.direction.len()
    }

    pub fn project(&self, z: &[f32]) -> Result<f64> {
        if z.len() != self.direction.len() {
            return Err(Error::DimensionMismatch {
                expected: self.direction.len(),
                got: z.len(),
            });
        }
        match self.rule {
            Rule::Hyperplane => Ok(dot(&self.direction, z)),
            Rule::Cosine => {
                let dn = norm(&self.direction);
                if dn == 0.0 {
                    return Err(Error::DegenerateDirection);
                }
                let zn = norm(z);
                if zn == 0.0 {
                    return Err(Error::DegenerateInput("zero vector under the cosine rule"));
                }
                Ok((dot(&self.direction, z) / (dn * zn)).clamp(-1.0, 1.0))
            }
        }
    }

    /// Inclusive decision: positive iff `project(z) >= threshold`.
    pub fn classify(&self, z: &[f32]) -> Result<bool> {
        Ok(self.project(z)? >= self.threshold)
    }

    pub fn classify_all<V: AsRef<[f32]>>(&self, zs: &[V]) -> Result<Vec<bool>> {
        zs.iter().map(|z| self.classify(z.as_ref())).collect()
    }
}

/// A serialized collection of templates learned on one token file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub model_tag: String,
    pub token_type: TokenType,
    pub templates: Vec<ConceptTemplate>,
}

impl TemplateSet {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hyperplane_projection_is_a_dot_product() {
        let t = ConceptTemplate::hyperplane(0, vec![1.0, 0.0], 0.0);
        assert_eq!(t.project(&[0.5, -3.0]).unwrap(), 0.5);
        // boundary is inclusive
        assert!(t.classify(&[0.0, 5.0]).unwrap());
    }

    #[test]
    fn cosine_projection() {
        let t = ConceptTemplate::cosine(0, vec![2.0, 0.0], 0.9);
        let s = t.project(&[1.0, 1.0]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(!t.classify(&[1.0, 1.0]).unwrap());

        let orth = ConceptTemplate::cosine(0, vec![1.0, 0.0], 0.0);
        assert_eq!(orth.project(&[0.0, 1.0]).unwrap(), 0.0);

        // cos = 1 / sqrt(1.25)
        let t = ConceptTemplate::cosine(0, vec![3.0, 0.0], 0.5);
        let s = t.project(&[1.0, 0.5]).unwrap();
        assert!((s - 1.0 / 1.25f64.sqrt()).abs() < 1e-12);
        assert!(t.classify(&[1.0, 0.5]).unwrap());
    }

    #[test]
    fn degenerate_inputs() {
        let t = ConceptTemplate::cosine(0, vec![1.0, 0.0], 0.0);
        assert!(matches!(t.project(&[0.0, 0.0]), Err(Error::DegenerateInput(_))));
        assert!(matches!(
            t.project(&[1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
        let z = ConceptTemplate::cosine(0, vec![0.0, 0.0], 0.0);
        assert!(matches!(z.project(&[1.0, 0.0]), Err(Error::DegenerateDirection)));
    }

    #[test]
    fn template_set_json_round_trip_is_exact() {
        let set = TemplateSet {
            model_tag: "dino_vits8".into(),
            token_type: TokenType::Q,
            templates: vec![
                ConceptTemplate::hyperplane(3, vec![0.1, -1.0e-7, 3.4028235e38], -0.25),
                ConceptTemplate::cosine(4, vec![std::f32::consts::PI, 1.1754944e-38], std::f64::consts::FRAC_1_SQRT_2),
            ],
        };
        let mut v = serde_json::to_value(&set).unwrap();
        assert_eq!(v["templates"][0]["concept_id"], 3);
        assert_eq!(v["templates"][0]["rule"], "hyperplane");
        // NaN support_f1 is not representable in JSON
        v["templates"][1]["metadata"]["support_f1"] = serde_json::json!(1.0);
        let back: TemplateSet = serde_json::from_value(v).unwrap();
        assert_eq!(back.templates[0], set.templates[0]);
        assert_eq!(back.templates[1].direction, set.templates[1].direction);
        assert_eq!(back.templates[1].threshold, set.templates[1].threshold);
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-100.0f32..100.0, dim)
    }

    proptest! {
        #[test]
        fn cosine_scores_stay_in_range(d in vec_strategy(8), z in vec_strategy(8)) {
            prop_assume!(norm(&d) > 1e-3 && norm(&z) > 1e-3);
            let s = ConceptTemplate::cosine(0, d, 0.0).project(&z).unwrap();
            prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&s));
        }

        #[test]
        fn decisions_invariant_to_positive_scaling(
            d in vec_strategy(6), z in vec_strategy(6), b in -50.0f64..50.0, lambda in 0.01f32..100.0,
        ) {
            prop_assume!(norm(&d) > 1e-3 && norm(&z) > 1e-3);
            let cos = ConceptTemplate::cosine(0, d.clone(), 0.3);
            let cos_scaled = ConceptTemplate::cosine(0, d.iter().map(|x| x * lambda).collect(), 0.3);
            // away from the boundary the decision must agree exactly
            let s = cos.project(&z).unwrap();
            prop_assume!((s - 0.3).abs() > 1e-5);
            prop_assert_eq!(cos.classify(&z).unwrap(), cos_scaled.classify(&z).unwrap());

            let hp = ConceptTemplate::hyperplane(0, d.clone(), b);
            let margin = hp.project(&z).unwrap() - b;
            prop_assume!(margin.abs() > 1e-3 * (1.0 + b.abs()));
            let hp_scaled = ConceptTemplate::hyperplane(
                0, d.iter().map(|x| x * lambda).collect(), b * lambda as f64);
            prop_assert_eq!(hp.classify(&z).unwrap(), hp_scaled.classify(&z).unwrap());
        }
    }
}
