//! Synthetic token datasets with planted structure.
//!
//! Every label gets a center in feature space; a record's vector is the mean
//! of its labels' centers plus isotropic Gaussian noise. Used to exercise the
//! engine without a model exporter.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::feature_store::{
    write_dataset, DatasetHeader, LabelEntry, Manifest, ModelGrid, Split, TokenRecord, TokenType,
};
use crate::seed::{derive_seed, rng_from, Rng};

/// `n` points drawn from N(center, sigma² I).
pub fn gaussian_blob(rng: &mut Rng, center: &[f32], sigma: f32, n: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            center
                .iter()
                .map(|&c| c + sigma * rng.sample::<f32, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Uniformly random unit vector.
pub fn random_direction(rng: &mut Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image_id: u32,
    pub cls_labels: Vec<u32>,
    /// Row-major, rows × cols entries. Empty for CLS-only images.
    pub patch_labels: Vec<Vec<u32>>,
}

/// `per_class` CLS-only images of each class, ids counting up from `first_id`.
pub fn classification_images(classes: &[u32], per_class: usize, first_id: u32) -> Vec<SynthImage> {
    let mut id = first_id;
    let mut out = Vec::with_capacity(classes.len() * per_class);
    for &c in classes {
        for _ in 0..per_class {
            out.push(SynthImage {
                image_id: id,
                cls_labels: vec![c],
                patch_labels: Vec::new(),
            });
            id += 1;
        }
    }
    out
}

/// Images whose patch grid is split at a random column into two regions,
/// each labeled with a concept drawn from the same category group.
/// `groups` lists the concept ids of each category; every group needs at
/// least two concepts.
pub fn segmentation_images(
    rng: &mut Rng,
    groups: &[Vec<u32>],
    count: usize,
    rows: u16,
    cols: u16,
    first_id: u32,
) -> Vec<SynthImage> {
    (0..count)
        .map(|i| {
            let group = &groups[rng.random_range(0..groups.len())];
            let a = group[rng.random_range(0..group.len())];
            let b = loop {
                let b = group[rng.random_range(0..group.len())];
                if b != a {
                    break b;
                }
            };
            let split = rng.random_range(1..cols);
            let mut patch_labels = Vec::with_capacity(rows as usize * cols as usize);
            for _r in 0..rows {
                for c in 0..cols {
                    patch_labels.push(vec![if c < split { a } else { b }]);
                }
            }
            SynthImage {
                image_id: first_id + i as u32,
                cls_labels: vec![a, b],
                patch_labels,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub model_tag: String,
    pub dim: usize,
    pub grid: ModelGrid,
    pub labels: Vec<LabelEntry>,
    pub centers: BTreeMap<u32, Vec<f32>>,
    pub noise: f32,
    pub seed: u64,
}

impl SynthSpec {
    fn vector(&self, labels: &[u32], rng: &mut Rng, noise: f32) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        for l in labels {
            for (x, c) in v.iter_mut().zip(&self.centers[l]) {
                *x += c / labels.len() as f32;
            }
        }
        for x in v.iter_mut() {
            *x += noise * rng.sample::<f32, _>(StandardNormal);
        }
        v
    }

    /// Records of one (token type, split) file. Token types share labels and
    /// layout but draw independent noise, with noise growing slightly by type.
    pub fn records(&self, token_type: TokenType, split: Split, images: &[SynthImage]) -> Vec<TokenRecord> {
        let noise = self.noise * (1.0 + 0.1 * token_type.code() as f32);
        let mut out = Vec::new();
        for img in images {
            let mut rng = rng_from(derive_seed(
                self.seed,
                &[token_type.code() as u64, split.code() as u64, img.image_id as u64],
            ));
            out.push(TokenRecord::cls(
                img.image_id,
                img.cls_labels.clone(),
                self.vector(&img.cls_labels, &mut rng, noise),
            ));
            for (i, labels) in img.patch_labels.iter().enumerate() {
                let (r, c) = (i / self.grid.cols as usize, i % self.grid.cols as usize);
                out.push(TokenRecord::patch(
                    img.image_id,
                    r as u16,
                    c as u16,
                    labels.clone(),
                    self.vector(labels, &mut rng, noise),
                ));
            }
        }
        out
    }

    /// Write one file per (token type, split) under `dir` plus `manifest.json`.
    pub fn write_experiment(
        &self,
        dir: &Path,
        token_types: &[TokenType],
        train: &[SynthImage],
        test: &[SynthImage],
    ) -> Result<Manifest> {
        let mut manifest = Manifest::new(dir);
        manifest.models.insert(self.model_tag.clone(), self.grid);
        for &tt in token_types {
            for (split, images) in [(Split::Train, train), (Split::Test, test)] {
                let name = format!("{}_{}_{}.tpf", self.model_tag, tt, split);
                let header = DatasetHeader::new(self.dim as u32, tt, split, &self.model_tag);
                write_dataset(&header, &self.labels, self.records(tt, split, images), dir.join(&name))?;
                manifest.add(&self.model_tag, tt, split, name);
            }
        }
        manifest.save(dir.join("manifest.json"))?;
        Manifest::load(dir.join("manifest.json"))
    }
}
