use super::{search_threshold, ConceptTemplate, TemplateMeta};
use crate::error::{Error, Result};
use crate::pools::SamplePools;

/// Prototype template from a support pool.
///
/// The axis is the mean of the positive support features; the threshold is
/// the F1-maximizing cosine over all support features scored against that
/// axis (stored as f32, so scoring here matches later use). With no
/// negatives this reduces to the smallest positive similarity, i.e. the
/// tightest cone that still recalls every support positive.
pub fn fit_cosine(support: &SamplePools) -> Result<ConceptTemplate> {
    let first = support
        .positives
        .first()
        .ok_or(Error::EmptyPool("no positive support features"))?;
    let dim = first.vector.len();

    let mut sum = vec![0f64; dim];
    for s in &support.positives {
        if s.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.vector.len(),
            });
        }
        for (acc, &x) in sum.iter_mut().zip(&s.vector) {
            *acc += x as f64;
        }
    }
    let n = support.positives.len() as f64;
    let axis: Vec<f32> = sum.iter().map(|x| (x / n) as f32).collect();
    if axis.iter().all(|&x| x == 0.0) {
        return Err(Error::DegenerateDirection);
    }

    let mut template = ConceptTemplate::cosine(support.concept, axis, 0.0);
    let mut scored = Vec::with_capacity(support.positives.len() + support.negatives.len());
    for s in &support.positives {
        scored.push((template.project(&s.vector)?, true));
    }
    for s in &support.negatives {
        scored.push((template.project(&s.vector)?, false));
    }
    let (t, f1) = search_threshold(&scored)?;
    template.threshold = t;
    template.metadata = TemplateMeta::Cosine {
        k: None,
        trial: None,
        support_f1: f1,
    };
    Ok(template)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pools::Sample;
    use proptest::prelude::*;

    fn pools(pos: &[&[f32]], neg: &[&[f32]]) -> SamplePools {
        let mk = |v: &&[f32]| Sample {
            image_id: 0,
            vector: v.to_vec(),
        };
        SamplePools {
            concept: 5,
            positives: pos.iter().map(mk).collect(),
            negatives: neg.iter().map(mk).collect(),
            seed: 0,
        }
    }

    #[test]
    fn empty_negatives_use_tightest_cone() {
        let t = fit_cosine(&pools(&[&[1.0, 0.0], &[0.0, 1.0]], &[])).unwrap();
        assert_eq!(t.direction, vec![0.5, 0.5]);
        assert!((t.threshold - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        assert!(t.classify(&[1.0, 0.0]).unwrap());
        assert!(t.classify(&[0.0, 1.0]).unwrap());
    }

    #[test]
    fn separable_support_reaches_f1_one() {
        // positives at cos 0.9 and cos 0.8 from the x axis, scaled so their
        // mean lies on the x axis; negatives at cos 0.7 and 0.2
        let at = |c: f64, r: f64, up: bool| {
            let s = (1.0 - c * c).sqrt() * if up { 1.0 } else { -1.0 };
            [(r * c) as f32, (r * s) as f32]
        };
        let r2 = (1.0 - 0.81f64).sqrt() / (1.0 - 0.64f64).sqrt();
        let p1 = at(0.9, 1.0, true);
        let p2 = at(0.8, r2, false);
        let n1 = at(0.7, 1.0, true);
        let n2 = at(0.2, 1.0, false);
        let t = fit_cosine(&pools(&[&p1, &p2], &[&n1, &n2])).unwrap();
        assert!((t.threshold - 0.8).abs() < 1e-5, "t = {}", t.threshold);
        assert_eq!(t.threshold, t.project(&p2).unwrap());
        match t.metadata {
            TemplateMeta::Cosine { support_f1, .. } => assert_eq!(support_f1, 1.0),
            _ => unreachable!(),
        }
    }

    #[test]
    fn cancelling_positives_are_degenerate() {
        let err = fit_cosine(&pools(&[&[1.0, 0.0], &[-1.0, 0.0]], &[])).unwrap_err();
        assert!(matches!(err, Error::DegenerateDirection));
    }

    proptest! {
        #[test]
        fn support_positives_all_recalled_without_negatives(
            pts in prop::collection::vec(prop::collection::vec(0.1f32..10.0, 5), 1..30)
        ) {
            let refs: Vec<&[f32]> = pts.iter().map(|v| v.as_slice()).collect();
            let t = fit_cosine(&pools(&refs, &[])).unwrap();
            prop_assert!((-1.0..=1.0).contains(&t.threshold));
            for p in &pts {
                prop_assert!(t.classify(p).unwrap());
            }
        }
    }
}
