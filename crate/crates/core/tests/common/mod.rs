#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use tokenprobe::feature_store::{
    write_dataset, Category, DatasetHeader, LabelEntry, Manifest, ModelGrid, Split, TokenRecord, TokenType,
};
use tokenprobe::seed::{rng_from, Rng};
use tokenprobe::synth::{classification_images, gaussian_blob, random_direction, segmentation_images, SynthSpec};

pub const MODEL: &str = "synth";

pub fn cls_grid() -> ModelGrid {
    ModelGrid {
        rows: 1,
        cols: 1,
        patch_size: 1,
    }
}

/// Two image classes with unit-variance clusters `distance` apart, placed
/// symmetrically about the origin along a random direction.
pub fn two_clusters(dim: usize, distance: f32, seed: u64) -> SynthSpec {
    let mut rng = rng_from(seed);
    let d = random_direction(&mut rng, dim);
    let half = distance / 2.0;
    SynthSpec {
        model_tag: MODEL.into(),
        dim,
        grid: cls_grid(),
        labels: vec![
            LabelEntry::new(0, Category::ImageClass, "near"),
            LabelEntry::new(1, Category::ImageClass, "far"),
        ],
        centers: BTreeMap::from([
            (0, d.iter().map(|x| x * half).collect()),
            (1, d.iter().map(|x| -x * half).collect()),
        ]),
        noise: 1.0,
        seed,
    }
}

/// Three well separated image classes.
pub fn three_classes(dim: usize, seed: u64) -> SynthSpec {
    let mut rng = rng_from(seed);
    let centers = (0..3u32)
        .map(|c| (c, random_direction(&mut rng, dim).into_iter().map(|x| 4.0 * x).collect()))
        .collect();
    SynthSpec {
        model_tag: MODEL.into(),
        dim,
        grid: cls_grid(),
        labels: vec![
            LabelEntry::new(0, Category::ImageClass, "alpha"),
            LabelEntry::new(1, Category::ImageClass, "beta"),
            LabelEntry::new(2, Category::ImageClass, "gamma"),
        ],
        centers,
        noise: 1.0,
        seed,
    }
}

/// A classification experiment with three classes over the given token types.
pub fn classification_experiment(dir: &Path, token_types: &[TokenType], per_class: usize) -> Manifest {
    let spec = three_classes(16, 11);
    let train = classification_images(&[0, 1, 2], per_class, 0);
    let test = classification_images(&[0, 1, 2], per_class, 100_000);
    spec.write_experiment(dir, token_types, &train, &test).unwrap()
}

/// Segmentation experiment: two object concepts and two material concepts
/// on a 4x4 patch grid.
pub fn segmentation_experiment(dir: &Path, token_types: &[TokenType], images: usize) -> Manifest {
    let mut rng = rng_from(5);
    let dim = 12;
    let centers = (10..14u32)
        .map(|c| (c, random_direction(&mut rng, dim).into_iter().map(|x| 4.0 * x).collect()))
        .collect();
    let spec = SynthSpec {
        model_tag: MODEL.into(),
        dim,
        grid: ModelGrid {
            rows: 4,
            cols: 4,
            patch_size: 2,
        },
        labels: vec![
            LabelEntry::new(10, Category::Object, "car"),
            LabelEntry::new(11, Category::Object, "tree"),
            LabelEntry::new(12, Category::Material, "wood"),
            LabelEntry::new(13, Category::Material, "metal"),
        ],
        centers,
        noise: 0.5,
        seed: 9,
    };
    let groups = [vec![10, 11], vec![12, 13]];
    let train = segmentation_images(&mut rng, &groups, images, 4, 4, 0);
    let test = segmentation_images(&mut rng, &groups, images, 4, 4, 50_000);
    spec.write_experiment(dir, token_types, &train, &test).unwrap()
}

/// Concept 0 is linearly separable from the rest, concept 1 is assigned at
/// random independently of the features.
pub fn separable_and_noise(dir: &Path, train_images: usize, test_images: usize) -> Manifest {
    let dim = 16;
    let mut rng = rng_from(23);
    let d = random_direction(&mut rng, dim);
    let labels = vec![
        LabelEntry::new(0, Category::ImageClass, "separable"),
        LabelEntry::new(1, Category::ImageClass, "noise"),
    ];
    let mut manifest = Manifest::new(dir);
    manifest.models.insert(MODEL.into(), cls_grid());
    for (split, n, first) in [(Split::Train, train_images, 0u32), (Split::Test, test_images, 1_000_000)] {
        let records = noise_records(&mut rng, &d, n, first);
        let name = format!("{MODEL}_x2_{split}.tpf");
        let header = DatasetHeader::new(dim as u32, TokenType::X2, split, MODEL);
        write_dataset(&header, &labels, &records, dir.join(&name)).unwrap();
        manifest.add(MODEL, TokenType::X2, split, name);
    }
    manifest.save(dir.join("manifest.json")).unwrap();
    manifest
}

fn noise_records(rng: &mut Rng, d: &[f32], n: usize, first: u32) -> Vec<TokenRecord> {
    use rand::Rng as _;
    (0..n)
        .map(|i| {
            let a = i % 2 == 0;
            let b = rng.random_bool(0.5);
            let center: Vec<f32> = d.iter().map(|x| if a { 3.0 * x } else { -3.0 * x }).collect();
            let v = gaussian_blob(rng, &center, 1.0, 1).remove(0);
            let labels = [(a, 0), (b, 1)].into_iter().filter(|p| p.0).map(|p| p.1).collect();
            TokenRecord::cls(first + i as u32, labels, v)
        })
        .collect()
}
