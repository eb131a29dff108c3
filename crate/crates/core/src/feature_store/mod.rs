//! Binary token-feature dumps.
//!
//! A dataset file holds one token type of one model over one split: a fixed
//! header, the label table, then a flat run of variable-length records. Files
//! are written once by the exporter and scanned sequentially by the engine.
//! A JSON [`Manifest`] groups the files of an experiment.

mod format;
mod manifest;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use format::{
    open_dataset, write_dataset, ByFn, DatasetHandle, Records, Selector, FORMAT_VERSION, MAGIC,
};
pub use manifest::{validate_manifest, Manifest, ManifestEntry, ManifestSummary, ModelGrid};

/// Row/col value marking the CLS token.
pub const CLS_SENTINEL: u16 = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenType {
    Q,
    K,
    V,
    X1,
    Xn,
    X2,
}

impl TokenType {
    pub const ALL: [TokenType; 6] = [
        TokenType::Q,
        TokenType::K,
        TokenType::V,
        TokenType::X1,
        TokenType::Xn,
        TokenType::X2,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TokenType::Q => "q",
            TokenType::K => "k",
            TokenType::V => "v",
            TokenType::X1 => "x1",
            TokenType::Xn => "xn",
            TokenType::X2 => "x2",
        }
    }
}

impl fmt::Display for TokenType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown token type {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Primary semantic category of a label. `ImageClass` covers classification labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Material,
    Object,
    Part,
    Scene,
    Texture,
    ImageClass,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Material,
        Category::Object,
        Category::Part,
        Category::Scene,
        Category::Texture,
        Category::ImageClass,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Material => "material",
            Category::Object => "object",
            Category::Part => "part",
            Category::Scene => "scene",
            Category::Texture => "texture",
            Category::ImageClass => "image_class",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub label_id: u32,
    pub category: Category,
    pub name: String,
}

impl LabelEntry {
    pub fn new(label_id: u32, category: Category, name: impl Into<String>) -> Self {
        Self {
            label_id,
            category,
            name: name.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub dim: u32,
    pub record_count: u64,
    pub token_type: TokenType,
    pub split: Split,
    pub model_tag: String,
}

impl DatasetHeader {
    /// Header for a new file. `record_count` is filled in by the writer.
    pub fn new(dim: u32, token_type: TokenType, split: Split, model_tag: impl Into<String>) -> Self {
        Self {
            version: FORMAT_VERSION,
            dim,
            record_count: 0,
            token_type,
            split,
            model_tag: model_tag.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub image_id: u32,
    pub row: u16,
    pub col: u16,
    pub labels: Vec<u32>,
    pub vector: Vec<f32>,
}

impl TokenRecord {
    pub fn cls(image_id: u32, labels: Vec<u32>, vector: Vec<f32>) -> Self {
        Self {
            image_id,
            row: CLS_SENTINEL,
            col: CLS_SENTINEL,
            labels,
            vector,
        }
    }

    pub fn patch(image_id: u32, row: u16, col: u16, labels: Vec<u32>, vector: Vec<f32>) -> Self {
        Self {
            image_id,
            row,
            col,
            labels,
            vector,
        }
    }

    pub fn is_cls(&self) -> bool {
        self.row == CLS_SENTINEL && self.col == CLS_SENTINEL
    }

    pub fn has_label(&self, label: u32) -> bool {
        self.labels.contains(&label)
    }
}

/// The part of a record visible to a filter, read before the vector.
#[derive(Debug, Clone, Copy)]
pub struct RecordMeta<'a> {
    pub image_id: u32,
    pub row: u16,
    pub col: u16,
    pub labels: &'a [u32],
}

impl RecordMeta<'_> {
    pub fn is_cls(&self) -> bool {
        self.row == CLS_SENTINEL && self.col == CLS_SENTINEL
    }
}

pub type MetaPredicate = Arc<dyn Fn(&RecordMeta<'_>) -> bool + Send + Sync>;

/// Record selection for [`DatasetHandle::iterate`]. Rejected records have
/// their vectors skipped, not decoded.
#[derive(Clone, Default)]
pub enum RecordFilter {
    #[default]
    All,
    ClsOnly,
    PatchesOnly,
    /// Records whose label set intersects the given labels.
    AnyLabel(Vec<u32>),
    Custom(MetaPredicate),
}

impl RecordFilter {
    pub fn custom(f: impl Fn(&RecordMeta<'_>) -> bool + Send + Sync + 'static) -> Self {
        RecordFilter::Custom(Arc::new(f))
    }

    pub fn matches(&self, meta: &RecordMeta<'_>) -> bool {
        match self {
            RecordFilter::All => true,
            RecordFilter::ClsOnly => meta.is_cls(),
            RecordFilter::PatchesOnly => !meta.is_cls(),
            RecordFilter::AnyLabel(wanted) => meta.labels.iter().any(|l| wanted.contains(l)),
            RecordFilter::Custom(f) => f(meta),
        }
    }
}

impl fmt::Debug for RecordFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordFilter::All => f.write_str("All"),
            RecordFilter::ClsOnly => f.write_str("ClsOnly"),
            RecordFilter::PatchesOnly => f.write_str("PatchesOnly"),
            RecordFilter::AnyLabel(l) => f.debug_tuple("AnyLabel").field(l).finish(),
            RecordFilter::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}
