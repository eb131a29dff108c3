//! Per-concept positive/negative feature pools.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{ByFn, Category, DatasetHandle, RecordMeta};
use crate::seed::rng_from;

/// Downstream task. Classification probes CLS tokens, segmentation probes
/// patch tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Segmentation,
}

impl Task {
    pub fn accepts(self, meta: &RecordMeta<'_>) -> bool {
        match self {
            Task::Classification => meta.is_cls(),
            Task::Segmentation => !meta.is_cls(),
        }
    }
}

/// One feature vector and the image it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: u32,
    pub vector: Vec<f32>,
}

impl AsRef<[f32]> for Sample {
    fn as_ref(&self) -> &[f32] {
        &self.vector
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePools {
    pub concept: u32,
    pub positives: Vec<Sample>,
    pub negatives: Vec<Sample>,
    /// Seed of the subsampling that produced this pool.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolOptions {
    pub task: Task,
    /// Only records labeled with some concept of the target's category count
    /// as negatives.
    pub category_restrict: bool,
    /// Maximum negatives per positive kept from the raw pool.
    pub cap_ratio: f64,
}

impl PoolOptions {
    pub const DEFAULT_CAP_RATIO: f64 = 20.0;

    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            category_restrict: task == Task::Segmentation,
            cap_ratio: Self::DEFAULT_CAP_RATIO,
        }
    }
}

/// Decides positive/negative membership of records for one concept.
#[derive(Debug, Clone, Copy)]
pub struct ConceptMembership {
    pub concept: u32,
    pub task: Task,
    /// When set, negatives must carry a label of this category.
    pub restrict_to: Option<Category>,
}

impl ConceptMembership {
    pub fn new(handle: &DatasetHandle, concept: u32, task: Task, category_restrict: bool) -> Result<Self> {
        let category = handle
            .category_of(concept)
            .ok_or(Error::UnknownLabel(concept))?;
        Ok(Self {
            concept,
            task,
            restrict_to: category_restrict.then_some(category),
        })
    }

    /// `Some(true)` for a positive, `Some(false)` for an eligible negative,
    /// `None` for a record outside both pools.
    pub fn classify(&self, handle: &DatasetHandle, meta: &RecordMeta<'_>) -> Option<bool> {
        if !self.task.accepts(meta) {
            return None;
        }
        if meta.labels.contains(&self.concept) {
            return Some(true);
        }
        match self.restrict_to {
            None => Some(false),
            Some(cat) => meta
                .labels
                .iter()
                .any(|&l| handle.category_of(l) == Some(cat))
                .then_some(false),
        }
    }
}

/// Uniform sample of `amount` distinct indices from `0..len`, in ascending order.
pub(crate) fn subsample_sorted(len: usize, amount: usize, rng: &mut crate::seed::Rng) -> Vec<usize> {
    let mut picked = index::sample(rng, len, amount.min(len)).into_vec();
    picked.sort_unstable();
    picked
}

/// Build the positive pool and the capped negative pool of `concept`.
///
/// Runs two passes over the file: the first counts pool sizes from record
/// metadata alone, the second decodes the positives and the negatives chosen
/// by uniform subsampling without replacement. Nothing beyond the retained
/// samples is ever held in memory.
pub fn build_pools(
    handle: &DatasetHandle,
    concept: u32,
    options: &PoolOptions,
    seed: u64,
) -> Result<SamplePools> {
    if options.cap_ratio.is_nan() || options.cap_ratio <= 0.0 {
        return Err(Error::Config(format!(
            "cap ratio must be positive, got {}",
            options.cap_ratio
        )));
    }
    let membership = ConceptMembership::new(handle, concept, options.task, options.category_restrict)?;

    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    handle.scan_meta(|m| match membership.classify(handle, m) {
        Some(true) => n_pos += 1,
        Some(false) => n_neg += 1,
        None => {}
    })?;
    if n_pos == 0 {
        return Err(Error::EmptyConcept(concept));
    }

    let cap = (options.cap_ratio * n_pos as f64).floor() as usize;
    let keep: Option<Vec<usize>> = (n_neg > cap).then(|| {
        let mut rng = rng_from(seed);
        subsample_sorted(n_neg, cap, &mut rng)
    });

    let mut neg_ordinal = 0usize;
    let mut cursor = 0usize;
    let mut kinds = Vec::with_capacity(n_pos + cap.min(n_neg));
    let records = handle.iterate_with(ByFn(|m: &RecordMeta<'_>| {
        match membership.classify(handle, m) {
            Some(true) => {
                kinds.push(true);
                true
            }
            Some(false) => {
                let ord = neg_ordinal;
                neg_ordinal += 1;
                let take = match &keep {
                    None => true,
                    Some(k) => {
                        if cursor < k.len() && k[cursor] == ord {
                            cursor += 1;
                            true
                        } else {
                            false
                        }
                    }
                };
                if take {
                    kinds.push(false);
                }
                take
            }
            None => false,
        }
    }))?;
    let decoded: Vec<_> = records.collect::<Result<_>>()?;

    let mut positives = Vec::with_capacity(n_pos);
    let mut negatives = Vec::with_capacity(decoded.len() - n_pos);
    for (rec, is_pos) in decoded.into_iter().zip(kinds) {
        let sample = Sample {
            image_id: rec.image_id,
            vector: rec.vector,
        };
        if is_pos {
            positives.push(sample);
        } else {
            negatives.push(sample);
        }
    }

    Ok(SamplePools {
        concept,
        positives,
        negatives,
        seed,
    })
}

/// Subsample negatives down to `neg_pos_ratio` per positive. Pools that are
/// already short of negatives pass through unchanged with a warning.
pub fn rebalance(pools: &SamplePools, neg_pos_ratio: f64, seed: u64) -> SamplePools {
    let target = (neg_pos_ratio * pools.positives.len() as f64).floor() as usize;
    if pools.negatives.len() < target {
        log::warn!(
            "concept {}: only {} negatives for a target of {target}",
            pools.concept,
            pools.negatives.len()
        );
    }
    let mut rng = rng_from(seed);
    let picked = subsample_sorted(pools.negatives.len(), target, &mut rng);
    SamplePools {
        concept: pools.concept,
        positives: pools.positives.clone(),
        negatives: picked.into_iter().map(|i| pools.negatives[i].clone()).collect(),
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::{
        open_dataset, write_dataset, DatasetHeader, LabelEntry, Split, TokenRecord, TokenType,
    };

    const WHEEL: u32 = 1;
    const DOOR: u32 = 2;
    const STRIPED: u32 = 3;

    fn labels() -> Vec<LabelEntry> {
        vec![
            LabelEntry::new(WHEEL, Category::Part, "wheel"),
            LabelEntry::new(DOOR, Category::Part, "door"),
            LabelEntry::new(STRIPED, Category::Texture, "striped"),
        ]
    }

    fn write(records: &[TokenRecord]) -> (tempfile::TempDir, DatasetHandle) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tpf");
        let header = DatasetHeader::new(2, TokenType::K, Split::Train, "m");
        write_dataset(&header, &labels(), records, &path).unwrap();
        let h = open_dataset(&path).unwrap();
        (dir, h)
    }

    fn patch(i: u32, labels: Vec<u32>) -> TokenRecord {
        TokenRecord::patch(i, 0, 0, labels, vec![i as f32, 1.0])
    }

    fn seg_opts(restrict: bool) -> PoolOptions {
        PoolOptions {
            task: Task::Segmentation,
            category_restrict: restrict,
            cap_ratio: 20.0,
        }
    }

    #[test]
    fn cap_keeps_twenty_negatives_per_positive() {
        let mut recs: Vec<_> = (0..3).map(|i| patch(i, vec![WHEEL])).collect();
        recs.extend((3..103).map(|i| patch(i, vec![DOOR])));
        let (_d, h) = write(&recs);
        let pools = build_pools(&h, WHEEL, &seg_opts(true), 11).unwrap();
        assert_eq!(pools.positives.len(), 3);
        assert_eq!(pools.negatives.len(), 60);
        // subset of the raw pool, no duplicates
        let mut ids: Vec<_> = pools.negatives.iter().map(|s| s.image_id).collect();
        assert!(ids.iter().all(|&i| (3..103).contains(&i)));
        ids.dedup();
        assert_eq!(ids.len(), 60);
    }

    #[test]
    fn under_cap_keeps_everything() {
        let mut recs: Vec<_> = (0..5).map(|i| patch(i, vec![WHEEL])).collect();
        recs.extend((5..45).map(|i| patch(i, vec![DOOR])));
        let (_d, h) = write(&recs);
        let pools = build_pools(&h, WHEEL, &seg_opts(true), 0).unwrap();
        assert_eq!(pools.negatives.len(), 40);
    }

    #[test]
    fn restriction_drops_other_categories() {
        let mut recs = vec![patch(0, vec![WHEEL]), patch(1, vec![WHEEL, STRIPED])];
        recs.extend((2..10).map(|i| patch(i, vec![STRIPED])));
        recs.extend((10..14).map(|i| patch(i, vec![DOOR])));
        recs.push(patch(14, vec![DOOR, STRIPED]));
        recs.push(patch(15, vec![]));
        let (_d, h) = write(&recs);

        let pools = build_pools(&h, WHEEL, &seg_opts(true), 0).unwrap();
        assert_eq!(pools.positives.len(), 2);
        let neg_ids: Vec<_> = pools.negatives.iter().map(|s| s.image_id).collect();
        assert_eq!(neg_ids, vec![10, 11, 12, 13, 14]);

        let open = build_pools(&h, WHEEL, &seg_opts(false), 0).unwrap();
        assert_eq!(open.negatives.len(), 14);
    }

    #[test]
    fn classification_uses_cls_only() {
        let recs = vec![
            TokenRecord::cls(0, vec![WHEEL], vec![1.0, 0.0]),
            TokenRecord::patch(0, 0, 0, vec![WHEEL], vec![1.0, 0.0]),
            TokenRecord::cls(1, vec![DOOR], vec![0.0, 1.0]),
        ];
        let (_d, h) = write(&recs);
        let pools = build_pools(&h, WHEEL, &PoolOptions::for_task(Task::Classification), 0).unwrap();
        assert_eq!(pools.positives.len(), 1);
        assert_eq!(pools.negatives.len(), 1);
    }

    #[test]
    fn no_positives_is_an_error() {
        let (_d, h) = write(&[patch(0, vec![DOOR])]);
        let err = build_pools(&h, WHEEL, &seg_opts(true), 0).unwrap_err();
        assert!(matches!(err, Error::EmptyConcept(WHEEL)));
        let err = build_pools(&h, 99, &seg_opts(true), 0).unwrap_err();
        assert!(matches!(err, Error::UnknownLabel(99)));
    }

    fn synthetic_pools(n_pos: usize, n_neg: usize) -> SamplePools {
        let mk = |i: usize| Sample {
            image_id: i as u32,
            vector: vec![i as f32],
        };
        SamplePools {
            concept: 0,
            positives: (0..n_pos).map(mk).collect(),
            negatives: (n_pos..n_pos + n_neg).map(mk).collect(),
            seed: 0,
        }
    }

    #[test]
    fn rebalance_to_one_to_two() {
        let p = synthetic_pools(10, 60);
        let r = rebalance(&p, 2.0, 5);
        assert_eq!(r.positives, p.positives);
        assert_eq!(r.negatives.len(), 20);
        assert!(r.negatives.iter().all(|s| p.negatives.contains(s)));
        assert_eq!(r, rebalance(&p, 2.0, 5));
        assert_ne!(r.negatives, rebalance(&p, 2.0, 6).negatives);
    }

    #[test]
    fn rebalance_short_pool_passes_through() {
        let p = synthetic_pools(10, 15);
        let r = rebalance(&p, 2.0, 5);
        assert_eq!(r.negatives, p.negatives);
    }

    #[test]
    fn same_seed_same_pool() {
        let mut recs: Vec<_> = (0..4).map(|i| patch(i, vec![WHEEL])).collect();
        recs.extend((4..200).map(|i| patch(i, vec![DOOR])));
        let (_d, h) = write(&recs);
        let a = build_pools(&h, WHEEL, &seg_opts(true), 3).unwrap();
        let b = build_pools(&h, WHEEL, &seg_opts(true), 3).unwrap();
        assert_eq!(a, b);
    }
}
