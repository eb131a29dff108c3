use std::borrow::Borrow;
use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::hash::{Hash, Hasher};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{
    Category, DatasetHeader, LabelEntry, RecordFilter, RecordMeta, Split, TokenRecord, TokenType,
    CLS_SENTINEL,
};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TPF1";
pub const FORMAT_VERSION: u32 = 1;

/// Byte offset of the record_count field: magic, version, dim.
const RECORD_COUNT_OFFSET: u64 = 12;
/// image_id u32 | row u16 | col u16 | label_count u16
const RECORD_PREFIX_LEN: u64 = 10;

/// Write a complete dataset file. The file appears at `path` only once every
/// record has been written; on any error no file is left behind.
///
/// `header.record_count` is ignored; the number of records actually written
/// is stored and returned.
pub fn write_dataset<I, R>(
    header: &DatasetHeader,
    labels: &[LabelEntry],
    records: I,
    path: impl AsRef<Path>,
) -> Result<u64>
where
    I: IntoIterator<Item = R>,
    R: Borrow<TokenRecord>,
{
    let path = path.as_ref();
    if header.dim == 0 {
        return Err(Error::Malformed("dimension must be positive".into()));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(header.version));
    }
    let mut known = HashSet::with_capacity(labels.len());
    for entry in labels {
        if !known.insert(entry.label_id) {
            return Err(Error::DuplicateLabel(entry.label_id));
        }
    }

    let tmp = temp_path(path);
    let result = write_into(&tmp, header, labels, &known, records);
    match result {
        Ok(count) => {
            fs::rename(&tmp, path).map_err(|e| {
                let _ = fs::remove_file(&tmp);
                Error::io(path, e)
            })?;
            Ok(count)
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".partial-{}", std::process::id()));
    path.with_file_name(name)
}

fn write_into<I, R>(
    tmp: &Path,
    header: &DatasetHeader,
    labels: &[LabelEntry],
    known: &HashSet<u32>,
    records: I,
) -> Result<u64>
where
    I: IntoIterator<Item = R>,
    R: Borrow<TokenRecord>,
{
    let io_err = |e| Error::io(tmp, e);
    let file = File::create(tmp).map_err(io_err)?;
    let mut out = BufWriter::new(file);

    let mut head = Vec::with_capacity(64);
    head.extend_from_slice(&MAGIC);
    head.extend_from_slice(&header.version.to_le_bytes());
    head.extend_from_slice(&header.dim.to_le_bytes());
    head.extend_from_slice(&0u64.to_le_bytes());
    head.push(header.token_type.code());
    head.push(header.split.code());
    put_str(&mut head, &header.model_tag, "model tag")?;
    head.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for entry in labels {
        head.extend_from_slice(&entry.label_id.to_le_bytes());
        head.push(entry.category.code());
        put_str(&mut head, &entry.name, "label name")?;
    }
    out.write_all(&head).map_err(io_err)?;

    let dim = header.dim as usize;
    let mut count = 0u64;
    let mut buf = Vec::with_capacity(RECORD_PREFIX_LEN as usize + 4 * dim);
    for record in records {
        let record = record.borrow();
        if record.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: record.vector.len(),
            });
        }
        if (record.row == CLS_SENTINEL) != (record.col == CLS_SENTINEL) {
            return Err(Error::Malformed(format!(
                "record {count}: CLS sentinel must be set on both row and col"
            )));
        }
        if let Some(&bad) = record.labels.iter().find(|l| !known.contains(l)) {
            return Err(Error::UnknownLabel(bad));
        }
        let label_count = u16::try_from(record.labels.len())
            .map_err(|_| Error::Malformed(format!("record {count}: too many labels")))?;

        buf.clear();
        buf.extend_from_slice(&record.image_id.to_le_bytes());
        buf.extend_from_slice(&record.row.to_le_bytes());
        buf.extend_from_slice(&record.col.to_le_bytes());
        buf.extend_from_slice(&label_count.to_le_bytes());
        for l in &record.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        for v in &record.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(io_err)?;
        count += 1;
    }

    let mut file = out.into_inner().map_err(|e| io_err(e.into_error()))?;
    file.seek(SeekFrom::Start(RECORD_COUNT_OFFSET))
        .map_err(io_err)?;
    file.write_all(&count.to_le_bytes()).map_err(io_err)?;
    file.sync_all().map_err(io_err)?;
    Ok(count)
}

fn put_str(buf: &mut Vec<u8>, s: &str, what: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::Malformed(format!("{what} longer than {} bytes", u16::MAX)))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

/// An opened dataset file. Only the header and label table are held in memory;
/// records are streamed from disk on every [`iterate`](Self::iterate) call, each
/// with its own file descriptor, so one handle can serve concurrent readers.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    path: PathBuf,
    header: DatasetHeader,
    labels: Vec<LabelEntry>,
    label_index: HashMap<u32, usize>,
    data_offset: u64,
    layout_digest: u64,
    image_count: usize,
}

/// Open a dataset file and validate its framing.
///
/// The full record framing is walked (without decoding vectors) so that a
/// truncated file is rejected here, naming the first incomplete record.
pub fn open_dataset(path: impl AsRef<Path>) -> Result<DatasetHandle> {
    let path = path.as_ref();
    let io_err = |e| Error::io(path, e);
    let file = File::open(path).map_err(io_err)?;
    let file_len = file.metadata().map_err(io_err)?.len();
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_header_bytes(&mut r, &mut magic, path)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: MAGIC,
        });
    }
    let version = read_u32(&mut r, path)?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = read_u32(&mut r, path)?;
    if dim == 0 {
        return Err(Error::Malformed("dimension is zero".into()));
    }
    let record_count = read_u64(&mut r, path)?;
    let token_code = read_u8(&mut r, path)?;
    let token_type = TokenType::from_code(token_code)
        .ok_or_else(|| Error::Malformed(format!("unknown token type code {token_code}")))?;
    let split_code = read_u8(&mut r, path)?;
    let split = Split::from_code(split_code)
        .ok_or_else(|| Error::Malformed(format!("unknown split code {split_code}")))?;
    let model_tag = read_str(&mut r, path)?;

    let label_count = read_u32(&mut r, path)?;
    let mut labels = Vec::with_capacity(label_count.min(1 << 16) as usize);
    let mut label_index = HashMap::new();
    for _ in 0..label_count {
        let label_id = read_u32(&mut r, path)?;
        let cat_code = read_u8(&mut r, path)?;
        let category = Category::from_code(cat_code)
            .ok_or_else(|| Error::Malformed(format!("unknown category code {cat_code}")))?;
        let name = read_str(&mut r, path)?;
        if label_index.insert(label_id, labels.len()).is_some() {
            return Err(Error::DuplicateLabel(label_id));
        }
        labels.push(LabelEntry {
            label_id,
            category,
            name,
        });
    }
    let data_offset = r.stream_position().map_err(io_err)?;

    // framing walk
    let mut pos = data_offset;
    let mut digest = DefaultHasher::new();
    let mut images = HashSet::new();
    let mut prefix = [0u8; RECORD_PREFIX_LEN as usize];
    for index in 0..record_count {
        if pos + RECORD_PREFIX_LEN > file_len {
            return Err(Error::Truncated {
                index,
                declared: record_count,
            });
        }
        r.read_exact(&mut prefix).map_err(io_err)?;
        let image_id = u32::from_le_bytes(prefix[0..4].try_into().unwrap());
        let row = u16::from_le_bytes(prefix[4..6].try_into().unwrap());
        let col = u16::from_le_bytes(prefix[6..8].try_into().unwrap());
        let n_labels = u16::from_le_bytes(prefix[8..10].try_into().unwrap()) as u64;
        let rest = 4 * n_labels + 4 * dim as u64;
        if pos + RECORD_PREFIX_LEN + rest > file_len {
            return Err(Error::Truncated {
                index,
                declared: record_count,
            });
        }
        (image_id, row, col).hash(&mut digest);
        images.insert(image_id);
        r.seek_relative(rest as i64).map_err(io_err)?;
        pos += RECORD_PREFIX_LEN + rest;
    }
    if pos != file_len {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after {record_count} records",
            file_len - pos
        )));
    }

    Ok(DatasetHandle {
        path: path.to_path_buf(),
        header: DatasetHeader {
            version,
            dim,
            record_count,
            token_type,
            split,
            model_tag,
        },
        labels,
        label_index,
        data_offset,
        layout_digest: digest.finish(),
        image_count: images.len(),
    })
}

impl DatasetHandle {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    pub fn label_table(&self) -> &[LabelEntry] {
        &self.labels
    }

    pub fn label(&self, id: u32) -> Option<&LabelEntry> {
        self.label_index.get(&id).map(|&i| &self.labels[i])
    }

    pub fn category_of(&self, id: u32) -> Option<Category> {
        self.label(id).map(|l| l.category)
    }

    /// Hash of the (image_id, row, col) sequence. Files exported from the same
    /// images in the same order share it.
    pub fn layout_digest(&self) -> u64 {
        self.layout_digest
    }

    pub fn image_count(&self) -> usize {
        self.image_count
    }

    /// Stream records in file order, keeping those accepted by `filter`.
    pub fn iterate(&self, filter: RecordFilter) -> Result<Records> {
        self.iterate_with(filter)
    }

    /// Like [`iterate`](Self::iterate) with an arbitrary, possibly stateful,
    /// selector. The selector sees every record once, in file order.
    pub fn iterate_with<S: Selector>(&self, selector: S) -> Result<Records<S>> {
        let file = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let mut reader = BufReader::with_capacity(1 << 16, file);
        reader
            .seek(SeekFrom::Start(self.data_offset))
            .map_err(|e| Error::io(&self.path, e))?;
        Ok(Records {
            reader,
            path: self.path.clone(),
            dim: self.dim(),
            remaining: self.header.record_count,
            selector,
            byte_buf: Vec::new(),
        })
    }

    /// Visit the metadata of every record without decoding any vector.
    pub fn scan_meta(&self, mut f: impl FnMut(&RecordMeta<'_>)) -> Result<()> {
        let records = self.iterate_with(ByFn(|m: &RecordMeta<'_>| {
            f(m);
            false
        }))?;
        for r in records {
            r?;
        }
        Ok(())
    }

    /// Convenience: collect all records accepted by `filter`.
    pub fn collect(&self, filter: RecordFilter) -> Result<Vec<TokenRecord>> {
        self.iterate(filter)?.collect()
    }
}

/// Decides, from its metadata, whether a record's vector is decoded.
pub trait Selector {
    fn select(&mut self, meta: &RecordMeta<'_>) -> bool;
}

impl Selector for RecordFilter {
    fn select(&mut self, meta: &RecordMeta<'_>) -> bool {
        self.matches(meta)
    }
}

/// Adapts a closure into a [`Selector`].
pub struct ByFn<F>(pub F);

impl<F: FnMut(&RecordMeta<'_>) -> bool> Selector for ByFn<F> {
    fn select(&mut self, meta: &RecordMeta<'_>) -> bool {
        (self.0)(meta)
    }
}

/// Streaming record iterator returned by [`DatasetHandle::iterate`].
pub struct Records<S = RecordFilter> {
    reader: BufReader<File>,
    path: PathBuf,
    dim: usize,
    remaining: u64,
    selector: S,
    byte_buf: Vec<u8>,
}

impl<S: Selector> Records<S> {
    fn next_record(&mut self) -> io::Result<Option<TokenRecord>> {
        let mut prefix = [0u8; RECORD_PREFIX_LEN as usize];
        while self.remaining > 0 {
            self.remaining -= 1;
            self.reader.read_exact(&mut prefix)?;
            let image_id = u32::from_le_bytes(prefix[0..4].try_into().unwrap());
            let row = u16::from_le_bytes(prefix[4..6].try_into().unwrap());
            let col = u16::from_le_bytes(prefix[6..8].try_into().unwrap());
            let n_labels = u16::from_le_bytes(prefix[8..10].try_into().unwrap()) as usize;

            self.byte_buf.resize(4 * n_labels, 0);
            self.reader.read_exact(&mut self.byte_buf)?;
            let labels: Vec<u32> = self
                .byte_buf
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();

            let meta = RecordMeta {
                image_id,
                row,
                col,
                labels: &labels,
            };
            if !self.selector.select(&meta) {
                self.reader.seek_relative(4 * self.dim as i64)?;
                continue;
            }

            self.byte_buf.resize(4 * self.dim, 0);
            self.reader.read_exact(&mut self.byte_buf)?;
            let vector = self
                .byte_buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            return Ok(Some(TokenRecord {
                image_id,
                row,
                col,
                labels,
                vector,
            }));
        }
        Ok(None)
    }
}

impl<S: Selector> Iterator for Records<S> {
    type Item = Result<TokenRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => None,
            Err(e) => {
                self.remaining = 0;
                Some(Err(Error::io(&self.path, e)))
            }
        }
    }
}

fn read_header_bytes(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Malformed("file ends inside the header".into())
        } else {
            Error::io(path, e)
        }
    })
}

fn read_u8(r: &mut impl Read, path: &Path) -> Result<u8> {
    let mut b = [0u8; 1];
    read_header_bytes(r, &mut b, path)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read, path: &Path) -> Result<u16> {
    let mut b = [0u8; 2];
    read_header_bytes(r, &mut b, path)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_header_bytes(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_header_bytes(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read, path: &Path) -> Result<String> {
    let len = read_u16(r, path)? as usize;
    let mut b = vec![0u8; len];
    read_header_bytes(r, &mut b, path)?;
    String::from_utf8(b).map_err(|_| Error::Malformed("string is not valid UTF-8".into()))
}
