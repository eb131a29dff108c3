//! Experiment orchestration over the (model, token type, concept[, k]) grid.

mod config;
mod report;

use std::collections::BTreeMap;

pub use config::ExperimentConfig;
pub use report::{
    emit_report, CategoryRow, CellResult, ExperimentReport, ReportCell, ReportFormat, SkippedCell,
    REPORT_CSV, REPORT_JSON,
};

use crate::error::{Error, Result};
use crate::feature_store::{
    validate_manifest, ByFn, Category, DatasetHandle, Manifest, RecordMeta, Split, TokenType,
};
use crate::fewshot::{k_sweep_sized, FewShotSource, QuerySize, TrialOutcome};
use crate::metrics::{aggregate_values, balanced_metrics, BalancedMetrics, ConfusionCounts};
use crate::pools::{build_pools, ConceptMembership, PoolOptions, Task};
use crate::seed::derive_seed;
use crate::templates::{fit_hyperplane, ConceptTemplate, Rule, TemplateSet, TrainConfig};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// A report plus the templates that produced it. Cosine runs keep the
/// first completed trial's template of each (concept, k).
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub templates: Vec<(Option<usize>, TemplateSet)>,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with_templates(config).map(|o| o.report)
}

fn select_concepts(config: &ExperimentConfig, handle: &DatasetHandle) -> Result<Vec<u32>> {
    match &config.concepts {
        Some(list) => {
            for &c in list {
                if handle.label(c).is_none() {
                    return Err(Error::Config(format!("concept {c} is not in the label table")));
                }
            }
            Ok(list.clone())
        }
        None => Ok(handle
            .label_table()
            .iter()
            .filter(|l| (l.category == Category::ImageClass) == (config.task == Task::Classification))
            .map(|l| l.label_id)
            .collect()),
    }
}

/// Score a template on every eligible record of a split.
pub fn evaluate_on_split(
    template: &ConceptTemplate,
    handle: &DatasetHandle,
    membership: &ConceptMembership,
) -> Result<BalancedMetrics> {
    let mut kinds = Vec::new();
    let records = handle.iterate_with(ByFn(|m: &RecordMeta<'_>| match membership.classify(handle, m) {
        Some(is_pos) => {
            kinds.push(is_pos);
            true
        }
        None => false,
    }))?;
    let mut predictions = Vec::new();
    for r in records {
        predictions.push(template.classify(&r?.vector)?);
    }
    let mut counts = ConfusionCounts::default();
    for (p, y) in predictions.into_iter().zip(kinds) {
        counts.record(p, y);
    }
    balanced_metrics(&counts)
}

fn hyperplane_cell(
    train: &DatasetHandle,
    test: &DatasetHandle,
    concept: u32,
    opts: &PoolOptions,
    train_cfg: &TrainConfig,
    master_seed: u64,
) -> Result<(ConceptTemplate, BalancedMetrics)> {
    let pools = build_pools(train, concept, opts, derive_seed(master_seed, &[concept as u64, 0]))?;
    let cfg = TrainConfig {
        rng_seed: derive_seed(master_seed, &[concept as u64, 1, train_cfg.rng_seed]),
        ..train_cfg.clone()
    };
    let template = fit_hyperplane(&pools, &cfg)?;
    let membership = ConceptMembership::new(test, concept, opts.task, opts.category_restrict)?;
    let metrics = evaluate_on_split(&template, test, &membership)?;
    Ok((template, metrics))
}

struct Grid<'a> {
    config: &'a ExperimentConfig,
    cells: Vec<ReportCell>,
    skipped: Vec<SkippedCell>,
    templates: Vec<(Option<usize>, TemplateSet)>,
}

impl Grid<'_> {
    fn cell(&mut self, model: &str, tt: TokenType, handle: &DatasetHandle, concept: u32, k: Option<usize>, result: CellResult) {
        let label = handle.label(concept).expect("concept validated against label table");
        self.cells.push(ReportCell {
            model_tag: model.to_string(),
            token_type: tt,
            concept,
            concept_name: label.name.clone(),
            category: label.category,
            k,
            result,
        });
    }

    fn skip(&mut self, model: &str, tt: TokenType, concept: u32, k: Option<usize>, reason: String) {
        log::info!("{model}/{tt}: concept {concept} skipped: {reason}");
        self.skipped.push(SkippedCell {
            model_tag: model.to_string(),
            token_type: tt,
            concept,
            k,
            reason,
        });
    }

    fn run_file_pair(&mut self, model: &str, tt: TokenType, train: DatasetHandle, test: DatasetHandle) -> Result<()> {
        let config = self.config;
        let concepts = select_concepts(config, &train)?;
        let exec = config.execution;
        match config.rule {
            Rule::Hyperplane => {
                let opts = config.pool_options();
                let results = exec.map(&concepts, |&c| {
                    hyperplane_cell(&train, &test, c, &opts, &config.train, config.master_seed)
                });
                let mut set = TemplateSet {
                    model_tag: model.to_string(),
                    token_type: tt,
                    templates: Vec::new(),
                };
                for (&c, r) in concepts.iter().zip(results) {
                    match r {
                        Ok((template, metrics)) => {
                            set.templates.push(template);
                            self.cell(model, tt, &train, c, None, CellResult::Metrics(metrics));
                        }
                        Err(e) => self.skip(model, tt, c, None, e.to_string()),
                    }
                }
                self.templates.push((None, set));
            }
            Rule::Cosine => {
                let src = FewShotSource::new(train, test, config.task)?;
                let query = QuerySize {
                    positives: config.query_positives,
                    negatives: config.query_negatives,
                };
                let table = k_sweep_sized(&src, &concepts, &config.k_list, config.trials, config.master_seed, query, exec);
                for &k in &config.k_list {
                    let mut set = TemplateSet {
                        model_tag: model.to_string(),
                        token_type: tt,
                        templates: Vec::new(),
                    };
                    for cell in table.cells.iter().filter(|c| c.k == k) {
                        match &cell.summary {
                            Some(s) => {
                                self.cell(model, tt, &src.train, cell.concept, Some(k), CellResult::Trials(*s));
                                set.templates.extend(cell.first_template.clone());
                            }
                            None => {
                                let reason = cell
                                    .trials
                                    .iter()
                                    .find_map(|t| match t {
                                        TrialOutcome::Skipped(r) => Some(r.clone()),
                                        _ => None,
                                    })
                                    .unwrap_or_else(|| "no trials".into());
                                self.skip(model, tt, cell.concept, Some(k), reason);
                            }
                        }
                    }
                    self.templates.push((Some(k), set));
                }
            }
        }
        Ok(())
    }
}

/// Run every configured cell. Data problems in a single concept are recorded
/// as skipped cells; manifest problems abort before any compute.
pub fn run_experiment_with_templates(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let manifest = Manifest::load(&config.manifest)?;
    validate_manifest(&manifest)?;
    for model in &config.model_tags {
        for &tt in &config.token_types {
            for split in [Split::Train, Split::Test] {
                manifest.lookup(model, tt, split)?;
            }
        }
    }

    let mut grid = Grid {
        config,
        cells: Vec::new(),
        skipped: Vec::new(),
        templates: Vec::new(),
    };
    config.execution.install(config.workers, || -> Result<()> {
        for model in &config.model_tags {
            for &tt in &config.token_types {
                let train = manifest.open(model, tt, Split::Train)?;
                let test = manifest.open(model, tt, Split::Test)?;
                grid.run_file_pair(model, tt, train, test)?;
            }
        }
        Ok(())
    })?;

    let categories = aggregate_cells(&grid.cells);
    Ok(ExperimentOutcome {
        report: ExperimentReport {
            engine_version: ENGINE_VERSION.to_string(),
            generated_at: Some(chrono::Utc::now().to_rfc3339()),
            config: config.clone(),
            cells: grid.cells,
            categories,
            skipped: grid.skipped,
        },
        templates: grid.templates,
    })
}

/// Category means per (model, token type, k).
pub fn aggregate_cells(cells: &[ReportCell]) -> Vec<CategoryRow> {
    type Key = (String, TokenType, Option<usize>);
    type Row = (Category, [Option<f64>; 4]);
    let mut groups: BTreeMap<Key, Vec<Row>> = BTreeMap::new();
    for c in cells {
        groups
            .entry((c.model_tag.clone(), c.token_type, c.k))
            .or_default()
            .push((c.category, c.result.means()));
    }
    groups
        .into_iter()
        .flat_map(|((model_tag, token_type, k), rows)| {
            aggregate_values(rows)
                .into_iter()
                .map(move |(category, aggregate)| CategoryRow {
                    model_tag: model_tag.clone(),
                    token_type,
                    k,
                    category,
                    aggregate,
                })
        })
        .collect()
}
