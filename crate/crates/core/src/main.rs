use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tokenprobe::feature_store::{validate_manifest, Manifest, Split};
use tokenprobe::runner::{
    emit_report, run_experiment_with_templates, ExperimentConfig, ExperimentReport, ReportFormat, REPORT_JSON,
};
use tokenprobe::segmentation::{for_each_image, render_mask, top_samples_by_iou, upsample_mask, PatchGrid};
use tokenprobe::templates::{Rule, TemplateSet};
use tokenprobe::Error;

#[derive(Parser)]
#[command(name = "tokenprobe", version, about = "Probe frozen ViT token features with concept templates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a feature manifest and every file it references.
    Validate { manifest: PathBuf },
    /// Train hyperplane templates and score them on the test split.
    FitHyperplane {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the few-shot cosine template sweep.
    FitCosine {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write upsampled masks for the best-matching test images of each template.
    RenderMasks {
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        count: usize,
    },
    /// Re-emit a stored report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "json")]
        format: ReportFormat,
    },
}

enum Outcome {
    Done,
    Partial(usize),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial(n)) => {
            eprintln!("{n} cell(s) skipped; see the report's `skipped` list");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}

fn dispatch(command: Command) -> tokenprobe::Result<Outcome> {
    match command {
        Command::Validate { manifest } => {
            let summary = validate_manifest(&Manifest::load(&manifest)?)?;
            println!("ok: {} files, models: {}", summary.files, summary.models.join(", "));
            Ok(Outcome::Done)
        }
        Command::FitHyperplane { config } => fit(&config, Rule::Hyperplane),
        Command::FitCosine { config } => fit(&config, Rule::Cosine),
        Command::RenderMasks {
            templates,
            manifest,
            out,
            count,
        } => render(&templates, &manifest, &out, count),
        Command::Report { input, format } => {
            let report = ExperimentReport::load(input.join(REPORT_JSON))?;
            let path = emit_report(&report, format, &input)?;
            println!("{}", path.display());
            Ok(Outcome::Done)
        }
    }
}

fn fit(config_path: &Path, rule: Rule) -> tokenprobe::Result<Outcome> {
    let mut config = ExperimentConfig::load(config_path)?;
    if config.rule != rule {
        log::warn!("config rule {:?} overridden by subcommand", config.rule);
        config.rule = rule;
        config.validate()?;
    }
    let outcome = run_experiment_with_templates(&config)?;
    let dir = &config.output_dir;
    let path = emit_report(&outcome.report, ReportFormat::Json, dir)?;
    for (k, set) in &outcome.templates {
        let name = match k {
            Some(k) => format!("templates_{}_{}_k{k}.json", set.model_tag, set.token_type),
            None => format!("templates_{}_{}.json", set.model_tag, set.token_type),
        };
        set.save(dir.join(name))?;
    }
    println!("{}", path.display());
    match outcome.report.skipped.len() {
        0 => Ok(Outcome::Done),
        n => Ok(Outcome::Partial(n)),
    }
}

fn render(templates: &Path, manifest: &Path, out: &Path, count: usize) -> tokenprobe::Result<Outcome> {
    let set = TemplateSet::load(templates)?;
    let manifest = Manifest::load(manifest)?;
    let handle = manifest.open(&set.model_tag, set.token_type, Split::Test)?;
    let grid = PatchGrid::from_model(&manifest.grid(&set.model_tag)?)?;
    let selections = top_samples_by_iou(&set.templates, &handle, &grid, count)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;

    let mut short = 0;
    for s in &selections {
        if s.short {
            short += 1;
        }
        for (image, score) in &s.picks {
            println!("concept {} image {image} iou {score:.4}", s.concept);
        }
    }
    for_each_image(&handle, &grid, |img| {
        for (t, s) in set.templates.iter().zip(&selections) {
            if s.picks.iter().any(|(id, _)| *id == img.image_id) {
                let mask = upsample_mask(&render_mask(t, &img.vectors, &grid)?, &grid);
                mask.write_pgm(out.join(format!("{}_{}.pgm", t.concept, img.image_id)))?;
            }
        }
        Ok(())
    })?;
    Ok(if short == 0 { Outcome::Done } else { Outcome::Partial(short) })
}
