//! Patch-level segmentation: pixel maps to patch labels, template masks,
//! IoU and mask export.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{DatasetHandle, ModelGrid, RecordFilter, TokenRecord};
use crate::templates::ConceptTemplate;

pub const DEFAULT_COVERAGE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, patch_size: usize, image_height: usize, image_width: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || patch_size == 0 {
            return Err(Error::ShapeMismatch("grid dimensions must be positive".into()));
        }
        if rows * patch_size > image_height || cols * patch_size > image_width {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} patches of {patch_size}px do not fit a {image_height}x{image_width} image"
            )));
        }
        Ok(Self {
            rows,
            cols,
            patch_size,
            image_height,
            image_width,
        })
    }

    /// Grid covering exactly `rows*patch_size` by `cols*patch_size` pixels.
    pub fn exact(rows: usize, cols: usize, patch_size: usize) -> Result<Self> {
        Self::new(rows, cols, patch_size, rows * patch_size, cols * patch_size)
    }

    pub fn from_model(grid: &ModelGrid) -> Result<Self> {
        Self::exact(grid.rows as usize, grid.cols as usize, grid.patch_size as usize)
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// Per-pixel concept ids of one category (`None` = unlabeled), row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelLabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Option<u32>>,
}

impl PixelLabelMap {
    pub fn new(height: usize, width: usize, data: Vec<Option<u32>>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Merge overlapping per-concept layers of one category. Where layers
    /// overlap the first-listed concept wins; overlaps are logged.
    pub fn from_layers(height: usize, width: usize, layers: &[(u32, Vec<bool>)]) -> Result<Self> {
        let mut data = vec![None; height * width];
        let mut overlaps = 0usize;
        for (concept, layer) in layers {
            if layer.len() != data.len() {
                return Err(Error::ShapeMismatch(format!(
                    "layer of concept {concept} has {} pixels, expected {}",
                    layer.len(),
                    data.len()
                )));
            }
            for (px, &on) in data.iter_mut().zip(layer) {
                if on {
                    if px.is_none() {
                        *px = Some(*concept);
                    } else {
                        overlaps += 1;
                    }
                }
            }
        }
        if overlaps > 0 {
            log::warn!("{overlaps} pixels claimed by several concepts of one category; first listed kept");
        }
        Self::new(height, width, data)
    }
}

/// Labels of every patch, row-major. A patch carries concept `c` iff more
/// than `coverage` of its pixels are labeled `c`.
pub fn patch_labels(map: &PixelLabelMap, grid: &PatchGrid, coverage: f64) -> Result<Vec<Vec<u32>>> {
    if map.height != grid.image_height || map.width != grid.image_width {
        return Err(Error::ShapeMismatch(format!(
            "pixel map is {}x{}, grid expects {}x{}",
            map.height, map.width, grid.image_height, grid.image_width
        )));
    }
    let area = (grid.patch_size * grid.patch_size) as f64;
    let mut out = Vec::with_capacity(grid.cells());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for y in r * grid.patch_size..(r + 1) * grid.patch_size {
                let row = &map.data[y * map.width..(y + 1) * map.width];
                for id in row[c * grid.patch_size..(c + 1) * grid.patch_size].iter().flatten() {
                    *counts.entry(*id).or_default() += 1;
                }
            }
            out.push(
                counts
                    .into_iter()
                    .filter(|&(_, n)| n as f64 / area > coverage)
                    .map(|(id, _)| id)
                    .collect(),
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} cells for a {rows}x{cols} mask",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Binary PGM (P5): 0 negative, 255 positive.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        bytes.extend(self.data.iter().map(|&b| if b { 255u8 } else { 0 }));
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}

/// Classify each patch vector (row-major) with the template.
pub fn render_mask<V: AsRef<[f32]>>(
    template: &ConceptTemplate,
    patch_vectors: &[V],
    grid: &PatchGrid,
) -> Result<BinaryMask> {
    if patch_vectors.len() != grid.cells() {
        return Err(Error::ShapeMismatch(format!(
            "{} patch vectors for a {}x{} grid",
            patch_vectors.len(),
            grid.rows,
            grid.cols
        )));
    }
    let data = template.classify_all(patch_vectors)?;
    BinaryMask::new(grid.rows, grid.cols, data)
}

/// Nearest-neighbor expansion of a grid mask to pixels.
pub fn upsample_mask(mask: &BinaryMask, grid: &PatchGrid) -> BinaryMask {
    let ps = grid.patch_size;
    let (rows, cols) = (mask.rows * ps, mask.cols * ps);
    let mut data = Vec::with_capacity(rows * cols);
    for y in 0..rows {
        for x in 0..cols {
            data.push(mask.get(y / ps, x / ps));
        }
    }
    BinaryMask { rows, cols, data }
}

/// Intersection over union; two empty masks score 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.rows != gt.rows || pred.cols != gt.cols {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            pred.rows, pred.cols, gt.rows, gt.cols
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouSelection {
    pub concept: u32,
    /// (image_id, IoU), best first.
    pub picks: Vec<(u32, f64)>,
    /// Fewer candidate images than requested.
    pub short: bool,
}

/// Order `(image_id, iou)` candidates best first (ties by lower id) and keep `count`.
pub fn select_top(concept: u32, mut scored: Vec<(u32, f64)>, count: usize) -> IouSelection {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let short = scored.len() < count;
    scored.truncate(count);
    IouSelection {
        concept,
        picks: scored,
        short,
    }
}

/// One image's patches in grid order, with its ground truth per concept.
pub struct ImagePatches {
    pub image_id: u32,
    pub vectors: Vec<Vec<f32>>,
    pub labels: Vec<Vec<u32>>,
}

impl ImagePatches {
    pub fn ground_truth(&self, grid: &PatchGrid, concept: u32) -> BinaryMask {
        BinaryMask {
            rows: grid.rows,
            cols: grid.cols,
            data: self.labels.iter().map(|l| l.contains(&concept)).collect(),
        }
    }
}

fn assemble(image_id: u32, records: Vec<TokenRecord>, grid: &PatchGrid) -> Result<ImagePatches> {
    if records.len() != grid.cells() {
        return Err(Error::ShapeMismatch(format!(
            "image {image_id} has {} patches, grid has {}",
            records.len(),
            grid.cells()
        )));
    }
    let mut slots: Vec<Option<TokenRecord>> = vec![None; grid.cells()];
    for r in records {
        let (row, col) = (r.row as usize, r.col as usize);
        if row >= grid.rows || col >= grid.cols || slots[row * grid.cols + col].is_some() {
            return Err(Error::ShapeMismatch(format!(
                "image {image_id}: bad or repeated patch position ({row}, {col})"
            )));
        }
        slots[row * grid.cols + col] = Some(r);
    }
    let (vectors, labels) = slots
        .into_iter()
        .map(|s| {
            let r = s.expect("every slot filled");
            (r.vector, r.labels)
        })
        .unzip();
    Ok(ImagePatches {
        image_id,
        vectors,
        labels,
    })
}

/// Stream the patch records of `handle` one image at a time. Records of an
/// image must be contiguous in the file.
pub fn for_each_image(
    handle: &DatasetHandle,
    grid: &PatchGrid,
    mut f: impl FnMut(ImagePatches) -> Result<()>,
) -> Result<()> {
    let mut current: Option<(u32, Vec<TokenRecord>)> = None;
    let mut finished = std::collections::HashSet::new();
    for rec in handle.iterate(RecordFilter::PatchesOnly)? {
        let rec = rec?;
        match &mut current {
            Some((id, recs)) if *id == rec.image_id => recs.push(rec),
            _ => {
                if let Some((id, recs)) = current.take() {
                    finished.insert(id);
                    f(assemble(id, recs, grid)?)?;
                }
                if finished.contains(&rec.image_id) {
                    return Err(Error::Malformed(format!(
                        "patches of image {} are not contiguous",
                        rec.image_id
                    )));
                }
                current = Some((rec.image_id, vec![rec]));
            }
        }
    }
    if let Some((id, recs)) = current {
        f(assemble(id, recs, grid)?)?;
    }
    Ok(())
}

/// For each template, the `count` test images where its mask best matches
/// the ground truth. Only images containing the concept are candidates.
pub fn top_samples_by_iou(
    templates: &[ConceptTemplate],
    handle: &DatasetHandle,
    grid: &PatchGrid,
    count: usize,
) -> Result<Vec<IouSelection>> {
    let mut scored: Vec<Vec<(u32, f64)>> = vec![Vec::new(); templates.len()];
    for_each_image(handle, grid, |img| {
        for (t, out) in templates.iter().zip(scored.iter_mut()) {
            if !img.labels.iter().any(|l| l.contains(&t.concept)) {
                continue;
            }
            let pred = render_mask(t, &img.vectors, grid)?;
            out.push((img.image_id, iou(&pred, &img.ground_truth(grid, t.concept))?));
        }
        Ok(())
    })?;
    Ok(templates
        .iter()
        .zip(scored)
        .map(|(t, s)| select_top(t.concept, s, count))
        .collect())
}
