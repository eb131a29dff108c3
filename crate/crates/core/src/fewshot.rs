//! 1-way k-shot cosine-template trials.
//!
//! Each trial samples `k` training images containing the concept, fits a
//! cosine template on their features, and scores it on a fresh balanced
//! query set of test images. Every trial owns an RNG stream derived from
//! `(master_seed, concept, k, trial)`, so trials can run in any order.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{ByFn, Category, DatasetHandle, RecordMeta};
use crate::metrics::{balanced_metrics, summarize_trials, BalancedMetrics, ConfusionCounts, TrialSummary};
use crate::par::Execution;
use crate::pools::{subsample_sorted, Sample, SamplePools, Task};
use crate::seed::{derive_seed, rng_from, Rng};
use crate::templates::{fit_cosine, ConceptTemplate, TemplateMeta};

/// The k values of the standard sweep.
pub const STANDARD_K: [usize; 6] = [1, 5, 10, 50, 100, 500];
pub const QUERY_POSITIVES: usize = 50;
pub const QUERY_NEGATIVES: usize = 50;
pub const DEFAULT_TRIALS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub concept: u32,
    pub k: usize,
    pub trial_index: usize,
    pub master_seed: u64,
    pub query_pos: usize,
    pub query_neg: usize,
}

impl TrialSpec {
    pub fn new(concept: u32, k: usize, trial_index: usize, master_seed: u64) -> Self {
        Self {
            concept,
            k,
            trial_index,
            master_seed,
            query_pos: QUERY_POSITIVES,
            query_neg: QUERY_NEGATIVES,
        }
    }

    pub fn seed(&self) -> u64 {
        derive_seed(
            self.master_seed,
            &[self.concept as u64, self.k as u64, self.trial_index as u64],
        )
    }
}

#[derive(Debug, Clone, Default)]
struct ImageInfo {
    cls_labels: Vec<u32>,
    patch_labels: BTreeSet<u32>,
}

/// Which images of one split contain which labels, built from metadata only.
#[derive(Debug, Clone, Default)]
pub struct ImageIndex {
    images: BTreeMap<u32, ImageInfo>,
}

impl ImageIndex {
    pub fn build(handle: &DatasetHandle) -> Result<Self> {
        let mut images: BTreeMap<u32, ImageInfo> = BTreeMap::new();
        handle.scan_meta(|m| {
            let info = images.entry(m.image_id).or_default();
            if m.is_cls() {
                info.cls_labels.extend_from_slice(m.labels);
            } else {
                info.patch_labels.extend(m.labels.iter().copied());
            }
        })?;
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn contains(info: &ImageInfo, task: Task, concept: u32) -> bool {
        match task {
            Task::Classification => info.cls_labels.contains(&concept),
            Task::Segmentation => info.patch_labels.contains(&concept),
        }
    }

    /// Image ids containing `concept`, ascending.
    pub fn positives(&self, task: Task, concept: u32) -> Vec<u32> {
        self.images
            .iter()
            .filter(|(_, info)| Self::contains(info, task, concept))
            .map(|(&id, _)| id)
            .collect()
    }

    /// Image ids usable as negatives for `concept`, ascending. For
    /// segmentation an image must be annotated in the concept's category
    /// without containing the concept itself.
    pub fn negatives(
        &self,
        task: Task,
        concept: u32,
        category_of: impl Fn(u32) -> Option<Category>,
    ) -> Vec<u32> {
        let category = category_of(concept);
        self.images
            .iter()
            .filter(|(_, info)| !Self::contains(info, task, concept))
            .filter(|(_, info)| match task {
                Task::Classification => true,
                Task::Segmentation => info
                    .patch_labels
                    .iter()
                    .any(|&l| category.is_some() && category_of(l) == category),
            })
            .map(|(&id, _)| id)
            .collect()
    }
}

/// Train/test handles plus their image indices.
#[derive(Debug, Clone)]
pub struct FewShotSource {
    pub train: DatasetHandle,
    pub test: DatasetHandle,
    pub task: Task,
    train_index: ImageIndex,
    test_index: ImageIndex,
}

impl FewShotSource {
    pub fn new(train: DatasetHandle, test: DatasetHandle, task: Task) -> Result<Self> {
        if train.dim() != test.dim() {
            return Err(Error::DimensionMismatch {
                expected: train.dim(),
                got: test.dim(),
            });
        }
        let train_index = ImageIndex::build(&train)?;
        let test_index = ImageIndex::build(&test)?;
        Ok(Self {
            train,
            test,
            task,
            train_index,
            test_index,
        })
    }

    pub fn train_index(&self) -> &ImageIndex {
        &self.train_index
    }

    pub fn test_index(&self) -> &ImageIndex {
        &self.test_index
    }
}

fn collect_images(
    handle: &DatasetHandle,
    task: Task,
    images: &HashSet<u32>,
) -> Result<Vec<(Sample, Vec<u32>)>> {
    let records = handle.iterate_with(ByFn(|m: &RecordMeta<'_>| {
        images.contains(&m.image_id) && task.accepts(m)
    }))?;
    records
        .map(|r| {
            r.map(|r| {
                (
                    Sample {
                        image_id: r.image_id,
                        vector: r.vector,
                    },
                    r.labels,
                )
            })
        })
        .collect()
}

/// Draw `k` training images containing `concept` and split their features
/// into support pools. Classification keeps one CLS vector per image and no
/// negatives; segmentation keeps every patch, split by the concept label.
pub fn sample_support(
    src: &FewShotSource,
    concept: u32,
    k: usize,
    rng: &mut Rng,
) -> Result<(SamplePools, Vec<u32>)> {
    if k == 0 {
        return Err(Error::InfeasibleTrial("k must be positive".into()));
    }
    let candidates = src.train_index.positives(src.task, concept);
    if candidates.len() < k {
        return Err(Error::InfeasibleTrial(format!(
            "concept {concept}: {k} support images requested, {} available",
            candidates.len()
        )));
    }
    let chosen: Vec<u32> = subsample_sorted(candidates.len(), k, rng)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    let set: HashSet<u32> = chosen.iter().copied().collect();

    let mut pools = SamplePools {
        concept,
        positives: Vec::new(),
        negatives: Vec::new(),
        seed: 0,
    };
    for (sample, labels) in collect_images(&src.train, src.task, &set)? {
        match src.task {
            Task::Classification => pools.positives.push(sample),
            Task::Segmentation if labels.contains(&concept) => pools.positives.push(sample),
            Task::Segmentation => pools.negatives.push(sample),
        }
    }
    Ok((pools, chosen))
}

/// A balanced query set and its evaluation objects.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub positive_images: Vec<u32>,
    pub negative_images: Vec<u32>,
    /// CLS tokens (classification) or all patches (segmentation) of the query images.
    pub samples: Vec<Sample>,
    /// Whether each sample carries the concept.
    pub truth: Vec<bool>,
}

impl QuerySet {
    pub fn images(&self) -> impl Iterator<Item = u32> + '_ {
        self.positive_images.iter().chain(&self.negative_images).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportQuerySplit {
    pub support_images: Vec<u32>,
    pub query: QuerySet,
}

impl SupportQuerySplit {
    pub fn is_disjoint(&self) -> bool {
        let support: HashSet<u32> = self.support_images.iter().copied().collect();
        self.query.images().all(|id| !support.contains(&id))
    }
}

/// Draw `n_pos` test images with the concept and `n_neg` without, skipping
/// any id in `exclude`.
pub fn sample_query(
    src: &FewShotSource,
    concept: u32,
    n_pos: usize,
    n_neg: usize,
    exclude: &HashSet<u32>,
    rng: &mut Rng,
) -> Result<QuerySet> {
    let keep = |ids: Vec<u32>| -> Vec<u32> { ids.into_iter().filter(|id| !exclude.contains(id)).collect() };
    let pos = keep(src.test_index.positives(src.task, concept));
    let neg = keep(
        src.test_index
            .negatives(src.task, concept, |l| src.test.category_of(l)),
    );
    if pos.len() < n_pos || neg.len() < n_neg {
        return Err(Error::InfeasibleTrial(format!(
            "concept {concept}: query needs {n_pos}+{n_neg} test images, {}+{} available",
            pos.len(),
            neg.len()
        )));
    }
    let positive_images: Vec<u32> = subsample_sorted(pos.len(), n_pos, rng)
        .into_iter()
        .map(|i| pos[i])
        .collect();
    let negative_images: Vec<u32> = subsample_sorted(neg.len(), n_neg, rng)
        .into_iter()
        .map(|i| neg[i])
        .collect();

    let set: HashSet<u32> = positive_images.iter().chain(&negative_images).copied().collect();
    let (samples, truth) = collect_images(&src.test, src.task, &set)?
        .into_iter()
        .map(|(s, labels)| (s, labels.contains(&concept)))
        .unzip();
    Ok(QuerySet {
        positive_images,
        negative_images,
        samples,
        truth,
    })
}

pub fn evaluate(template: &ConceptTemplate, samples: &[Sample], truth: &[bool]) -> Result<BalancedMetrics> {
    let mut c = ConfusionCounts::default();
    for (s, &y) in samples.iter().zip(truth) {
        c.record(template.classify(&s.vector)?, y);
    }
    balanced_metrics(&c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub spec: TrialSpec,
    pub split: SupportQuerySplit,
    pub template: ConceptTemplate,
    pub metrics: BalancedMetrics,
}

pub fn run_trial(src: &FewShotSource, spec: &TrialSpec) -> Result<TrialResult> {
    let mut rng = rng_from(spec.seed());
    let (support, support_images) = sample_support(src, spec.concept, spec.k, &mut rng)?;
    let mut template = fit_cosine(&support)?;
    if let TemplateMeta::Cosine { k, trial, .. } = &mut template.metadata {
        *k = Some(spec.k);
        *trial = Some(spec.trial_index);
    }
    let exclude: HashSet<u32> = support_images.iter().copied().collect();
    let query = sample_query(src, spec.concept, spec.query_pos, spec.query_neg, &exclude, &mut rng)?;
    let metrics = evaluate(&template, &query.samples, &query.truth)?;
    Ok(TrialResult {
        spec: *spec,
        split: SupportQuerySplit {
            support_images,
            query,
        },
        template,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialOutcome {
    Completed(BalancedMetrics),
    Skipped(String),
}

/// All trials of one (concept, k) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTrials {
    pub concept: u32,
    pub k: usize,
    pub trials: Vec<TrialOutcome>,
    /// `None` when every trial was infeasible.
    pub summary: Option<TrialSummary>,
    /// Template of the first completed trial, kept for inspection.
    #[serde(skip)]
    pub first_template: Option<ConceptTemplate>,
}

fn finish_cell(concept: u32, k: usize, results: Vec<Result<TrialResult>>) -> ConceptTrials {
    let mut first_template = None;
    let trials: Vec<TrialOutcome> = results
        .into_iter()
        .map(|r| match r {
            Ok(t) => {
                first_template.get_or_insert(t.template);
                TrialOutcome::Completed(t.metrics)
            }
            Err(e) => {
                log::info!("concept {concept}, k={k}: trial skipped: {e}");
                TrialOutcome::Skipped(e.to_string())
            }
        })
        .collect();
    let done: Vec<BalancedMetrics> = trials
        .iter()
        .filter_map(|t| match t {
            TrialOutcome::Completed(m) => Some(*m),
            TrialOutcome::Skipped(_) => None,
        })
        .collect();
    ConceptTrials {
        concept,
        k,
        summary: (!done.is_empty()).then(|| summarize_trials(&done)),
        trials,
        first_template,
    }
}

pub fn run_trials(
    src: &FewShotSource,
    concept: u32,
    k: usize,
    trials: usize,
    master_seed: u64,
    exec: Execution,
) -> ConceptTrials {
    let specs: Vec<TrialSpec> = (0..trials)
        .map(|t| TrialSpec::new(concept, k, t, master_seed))
        .collect();
    let results = exec.map(&specs, |s| run_trial(src, s));
    finish_cell(concept, k, results)
}

/// Concept × k grid of trial summaries, in (concept, k) input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<ConceptTrials>,
}

impl SweepTable {
    pub fn get(&self, concept: u32, k: usize) -> Option<&ConceptTrials> {
        self.cells.iter().find(|c| c.concept == concept && c.k == k)
    }

    pub fn infeasible(&self) -> impl Iterator<Item = &ConceptTrials> {
        self.cells.iter().filter(|c| c.summary.is_none())
    }
}

/// Query set sizes per trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySize {
    pub positives: usize,
    pub negatives: usize,
}

impl Default for QuerySize {
    fn default() -> Self {
        Self {
            positives: QUERY_POSITIVES,
            negatives: QUERY_NEGATIVES,
        }
    }
}

pub fn k_sweep(
    src: &FewShotSource,
    concepts: &[u32],
    k_list: &[usize],
    trials: usize,
    master_seed: u64,
    exec: Execution,
) -> SweepTable {
    k_sweep_sized(src, concepts, k_list, trials, master_seed, QuerySize::default(), exec)
}

pub fn k_sweep_sized(
    src: &FewShotSource,
    concepts: &[u32],
    k_list: &[usize],
    trials: usize,
    master_seed: u64,
    query: QuerySize,
    exec: Execution,
) -> SweepTable {
    let specs: Vec<TrialSpec> = concepts
        .iter()
        .flat_map(|&c| {
            k_list.iter().flat_map(move |&k| {
                (0..trials).map(move |t| TrialSpec {
                    query_pos: query.positives,
                    query_neg: query.negatives,
                    ..TrialSpec::new(c, k, t, master_seed)
                })
            })
        })
        .collect();
    let mut results = exec.map(&specs, |s| run_trial(src, s)).into_iter();
    let mut cells = Vec::with_capacity(concepts.len() * k_list.len());
    for &c in concepts {
        for &k in k_list {
            let chunk: Vec<_> = results.by_ref().take(trials).collect();
            cells.push(finish_cell(c, k, chunk));
        }
    }
    SweepTable { cells }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::{LabelEntry, ModelGrid, Split, TokenType};
    use crate::synth::{classification_images, segmentation_images, SynthImage, SynthSpec};

    fn class_source(dir: &std::path::Path, train_per: usize, test_per: usize) -> FewShotSource {
        let labels = vec![
            LabelEntry::new(0, Category::ImageClass, "a"),
            LabelEntry::new(1, Category::ImageClass, "b"),
        ];
        let spec = SynthSpec {
            model_tag: "m".into(),
            dim: 8,
            grid: ModelGrid {
                rows: 1,
                cols: 1,
                patch_size: 1,
            },
            labels,
            centers: [(0, vec![4.0, 0.0, 0., 0., 0., 0., 0., 0.]), (1, vec![-4.0, 0.0, 0., 0., 0., 0., 0., 0.])].into(),
            noise: 1.0,
            seed: 1,
        };
        let train = classification_images(&[0, 1], train_per, 0);
        let test = classification_images(&[0, 1], test_per, 10_000);
        let m = spec.write_experiment(dir, &[TokenType::X2], &train, &test).unwrap();
        FewShotSource::new(
            m.open("m", TokenType::X2, Split::Train).unwrap(),
            m.open("m", TokenType::X2, Split::Test).unwrap(),
            Task::Classification,
        )
        .unwrap()
    }

    #[test]
    fn classification_support_has_no_negatives() {
        let dir = tempfile::tempdir().unwrap();
        let src = class_source(dir.path(), 20, 60);
        let mut rng = rng_from(0);
        let (pools, ids) = sample_support(&src, 0, 5, &mut rng).unwrap();
        assert_eq!(pools.positives.len(), 5);
        assert!(pools.negatives.is_empty());
        assert_eq!(ids.len(), 5);

        let (_, again) = sample_support(&src, 0, 5, &mut rng_from(0)).unwrap();
        assert_eq!(ids, again);
        assert!(matches!(
            sample_support(&src, 0, 21, &mut rng_from(0)),
            Err(Error::InfeasibleTrial(_))
        ));
    }

    #[test]
    fn query_is_fifty_fifty_and_needs_enough_images() {
        let dir = tempfile::tempdir().unwrap();
        let src = class_source(dir.path(), 20, 300);
        let q = sample_query(&src, 0, 50, 50, &HashSet::new(), &mut rng_from(3)).unwrap();
        assert_eq!(q.positive_images.len(), 50);
        assert_eq!(q.negative_images.len(), 50);
        assert_eq!(q.samples.len(), 100);
        assert_eq!(q.truth.iter().filter(|&&t| t).count(), 50);
        let again = sample_query(&src, 0, 50, 50, &HashSet::new(), &mut rng_from(3)).unwrap();
        assert_eq!(q, again);

        let dir = tempfile::tempdir().unwrap();
        let small = class_source(dir.path(), 20, 49);
        assert!(matches!(
            sample_query(&small, 0, 50, 50, &HashSet::new(), &mut rng_from(3)),
            Err(Error::InfeasibleTrial(_))
        ));
    }

    #[test]
    fn segmentation_support_counts_patches() {
        let dir = tempfile::tempdir().unwrap();
        let labels = vec![
            LabelEntry::new(1, Category::Part, "c"),
            LabelEntry::new(2, Category::Part, "other"),
        ];
        let spec = SynthSpec {
            model_tag: "m".into(),
            dim: 4,
            grid: ModelGrid {
                rows: 14,
                cols: 14,
                patch_size: 16,
            },
            labels,
            centers: [(1, vec![1.0, 0.0, 0.0, 0.0]), (2, vec![0.0, 1.0, 0.0, 0.0])].into(),
            noise: 0.1,
            seed: 0,
        };
        // one image with exactly 10 patches of concept 1
        let mut patch_labels = vec![vec![2u32]; 196];
        for p in patch_labels.iter_mut().take(10) {
            *p = vec![1];
        }
        let img = SynthImage {
            image_id: 7,
            cls_labels: vec![1, 2],
            patch_labels,
        };
        let m = spec
            .write_experiment(dir.path(), &[TokenType::K], std::slice::from_ref(&img), std::slice::from_ref(&img))
            .unwrap();
        let src = FewShotSource::new(
            m.open("m", TokenType::K, Split::Train).unwrap(),
            m.open("m", TokenType::K, Split::Test).unwrap(),
            Task::Segmentation,
        )
        .unwrap();
        let (pools, ids) = sample_support(&src, 1, 1, &mut rng_from(0)).unwrap();
        assert_eq!(ids, vec![7]);
        assert_eq!(pools.positives.len(), 10);
        assert_eq!(pools.negatives.len(), 186);
    }

    #[test]
    fn segmentation_negative_images_need_category_annotation() {
        let dir = tempfile::tempdir().unwrap();
        let labels = vec![
            LabelEntry::new(1, Category::Part, "a"),
            LabelEntry::new(2, Category::Part, "b"),
            LabelEntry::new(3, Category::Part, "c"),
            LabelEntry::new(4, Category::Texture, "t"),
            LabelEntry::new(5, Category::Texture, "u"),
        ];
        let centers = (1..=5).map(|l| (l, vec![l as f32, 1.0])).collect();
        let spec = SynthSpec {
            model_tag: "m".into(),
            dim: 2,
            grid: ModelGrid {
                rows: 2,
                cols: 4,
                patch_size: 1,
            },
            labels,
            centers,
            noise: 0.1,
            seed: 0,
        };
        let mut rng = rng_from(1);
        let imgs = segmentation_images(&mut rng, &[vec![1, 2, 3], vec![4, 5]], 40, 2, 4, 0);
        let m = spec.write_experiment(dir.path(), &[TokenType::K], &imgs, &imgs).unwrap();
        let test = m.open("m", TokenType::K, Split::Test).unwrap();
        let idx = ImageIndex::build(&test).unwrap();
        let negs = idx.negatives(Task::Segmentation, 1, |l| test.category_of(l));
        for id in &negs {
            let img = &imgs[*id as usize];
            assert!(!img.cls_labels.contains(&1));
            assert!(img.cls_labels.iter().any(|l| [2, 3].contains(l)));
        }
        let texture_only = imgs
            .iter()
            .filter(|i| i.cls_labels.iter().all(|l| *l >= 4))
            .count();
        assert!(texture_only > 0);
        assert_eq!(
            negs.len() + idx.positives(Task::Segmentation, 1).len() + texture_only,
            40
        );
    }

    #[test]
    fn trials_are_deterministic_and_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let src = class_source(dir.path(), 60, 60);
        let a = run_trials(&src, 0, 10, 4, 77, Execution::Parallel);
        let b = run_trials(&src, 0, 10, 4, 77, Execution::Sequential);
        assert_eq!(a, b);
        assert_eq!(a.summary.unwrap().trials, 4);
        let r = run_trial(&src, &TrialSpec::new(0, 10, 2, 77)).unwrap();
        assert!(r.split.is_disjoint());
        assert_eq!(r.template.metadata, match r.template.metadata {
            TemplateMeta::Cosine { support_f1, .. } => TemplateMeta::Cosine { k: Some(10), trial: Some(2), support_f1 },
            _ => unreachable!(),
        });
    }

    #[test]
    fn sweep_marks_infeasible_cells() {
        let dir = tempfile::tempdir().unwrap();
        let src = class_source(dir.path(), 12, 60);
        let table = k_sweep(&src, &[0, 1], &[1, 5, 10, 50], 2, 5, Execution::Parallel);
        assert_eq!(table.cells.len(), 8);
        let bad: Vec<_> = table.infeasible().map(|c| (c.concept, c.k)).collect();
        assert_eq!(bad, vec![(0, 50), (1, 50)]);
        assert!(table.get(1, 10).unwrap().summary.is_some());
    }
}
