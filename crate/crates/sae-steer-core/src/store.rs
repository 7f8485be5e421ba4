//! Embedding datasets on disk and in memory: a bit-exact binary format with a
//! JSON-lines manifest, plus deduplication, shuffled batching, and summary
//! statistics.
//!
//! File layout (little-endian throughout):
//!
//! ```text
//! bytes 0..8    magic "LSAEEMB1"
//! bytes 8..12   u32 version (= 1)
//! bytes 12..16  u32 D (embedding dimensionality)
//! bytes 16..24  u64 N (row count)
//! bytes 24..    N * D * 4 bytes of f32, row-major
//! ```
//!
//! The manifest lives next to the data at `<path>.manifest.jsonl`, one object
//! per row in row order: `{"row": <int>, "id": "<string>", "uri": <string or
//! null>}`. Round trips are bitwise exact: the f32 payload is written and read
//! as raw IEEE-754 bits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"LSAEEMB1";
const VERSION: u32 = 1;

/// Identity of one dataset row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub row: usize,
    pub id: String,
    pub uri: Option<String>,
}

/// An N x D matrix of finite f32 embeddings with a row-aligned manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    data: Array2<f32>,
    manifest: Vec<RecordMeta>,
}

/// Per-dimension mean and population variance of a dataset.
#[derive(Debug, Clone)]
pub struct DatasetStats {
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
    pub count: usize,
}

impl EmbeddingDataset {
    /// Builds a dataset, validating finiteness and manifest alignment.
    /// Manifest ids may repeat here; [`dedup`] establishes uniqueness.
    pub fn new(data: Array2<f32>, manifest: Vec<RecordMeta>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains NaN or infinity"));
        }
        if manifest.len() != data.nrows() {
            return Err(Error::invalid(format!(
                "manifest has {} entries for {} rows",
                manifest.len(),
                data.nrows()
            )));
        }
        for (i, meta) in manifest.iter().enumerate() {
            if meta.row != i {
                return Err(Error::invalid(format!(
                    "manifest row index {} at position {i}",
                    meta.row
                )));
            }
            if meta.id.is_empty() {
                return Err(Error::invalid(format!("empty record id at row {i}")));
            }
        }
        Ok(EmbeddingDataset { data, manifest })
    }

    /// Convenience constructor that synthesizes ids `"<prefix>-<row>"`.
    pub fn with_generated_ids(data: Array2<f32>, prefix: &str) -> Result<Self> {
        let manifest = (0..data.nrows())
            .map(|i| RecordMeta {
                row: i,
                id: format!("{prefix}-{i}"),
                uri: None,
            })
            .collect();
        EmbeddingDataset::new(data, manifest)
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn count(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn data(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn manifest(&self) -> &[RecordMeta] {
        &self.manifest
    }

    pub fn ids(&self) -> Vec<String> {
        self.manifest.iter().map(|m| m.id.clone()).collect()
    }
}

/// Path of the manifest sidecar: `<path>.manifest.jsonl`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".manifest.jsonl");
    PathBuf::from(os)
}

/// Writes the dataset and its manifest sidecar. Rejects invalid datasets
/// before touching the filesystem.
pub fn write_dataset(dataset: &EmbeddingDataset, path: &Path) -> Result<()> {
    // new() validated at construction, but the matrix is reachable through
    // clones of `data()`; re-check so no bad bytes ever hit disk.
    if dataset.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("dataset contains NaN or infinity"));
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io_err)?;
    w.write_u32::<LittleEndian>(dataset.dim() as u32)
        .map_err(io_err)?;
    w.write_u64::<LittleEndian>(dataset.count() as u64)
        .map_err(io_err)?;
    for &v in dataset.data.iter() {
        w.write_f32::<LittleEndian>(v).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;

    let mpath = manifest_path(path);
    let mfile = File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut mw = BufWriter::new(mfile);
    for meta in &dataset.manifest {
        let line = serde_json::to_string(meta)
            .map_err(|e| Error::invalid(format!("manifest encode: {e}")))?;
        writeln!(mw, "{line}").map_err(|e| Error::io(&mpath, e))?;
    }
    mw.flush().map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`], validating magic, version,
/// exact payload length, finiteness, and manifest alignment.
pub fn read_dataset(path: &Path) -> Result<EmbeddingDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::invalid(format!("{}: bad magic (file too short)", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::invalid(format!("{}: bad magic", path.display())));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::invalid(format!("{}: truncated header", path.display())))?;
    if version != VERSION {
        return Err(Error::invalid(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let dim = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::invalid(format!("{}: truncated header", path.display())))?
        as usize;
    let count = r
        .read_u64::<LittleEndian>()
        .map_err(|_| Error::invalid(format!("{}: truncated header", path.display())))?
        as usize;
    if dim == 0 {
        return Err(Error::invalid(format!(
            "{}: zero dimension",
            path.display()
        )));
    }

    let mut values = vec![0f32; count * dim];
    for v in values.iter_mut() {
        *v = r
            .read_f32::<LittleEndian>()
            .map_err(|_| Error::invalid(format!("{}: truncated payload", path.display())))?;
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::invalid(format!(
                "{}: trailing bytes after payload",
                path.display()
            )))
        }
        Err(e) => return Err(Error::io(path, e)),
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "{}: non-finite value in payload",
            path.display()
        )));
    }
    let data = Array2::from_shape_vec((count, dim), values)
        .expect("shape follows from the validated header");

    let mpath = manifest_path(path);
    let mfile = File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut manifest = Vec::with_capacity(count);
    for (lineno, line) in BufReader::new(mfile).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&mpath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let meta: RecordMeta = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", mpath.display(), lineno + 1)))?;
        manifest.push(meta);
    }
    if manifest.len() != count {
        return Err(Error::invalid(format!(
            "{}: manifest has {} entries for {} rows",
            mpath.display(),
            manifest.len(),
            count
        )));
    }

    EmbeddingDataset::new(data, manifest)
}

/// Keeps the first occurrence of each record id, and of each uri when one is
/// present; rows are compacted and the manifest reindexed.
pub fn dedup(dataset: &EmbeddingDataset) -> EmbeddingDataset {
    let mut seen_ids = std::collections::HashSet::new();
    let mut seen_uris = std::collections::HashSet::new();
    let mut keep = Vec::new();
    for meta in &dataset.manifest {
        let dup_id = !seen_ids.insert(meta.id.clone());
        let dup_uri = match &meta.uri {
            Some(u) => !seen_uris.insert(u.clone()),
            None => false,
        };
        if !dup_id && !dup_uri {
            keep.push(meta.row);
        }
    }

    let dim = dataset.dim();
    let mut data = Array2::zeros((keep.len(), dim));
    let mut manifest = Vec::with_capacity(keep.len());
    for (new_row, &old_row) in keep.iter().enumerate() {
        data.row_mut(new_row).assign(&dataset.data.row(old_row));
        let old = &dataset.manifest[old_row];
        manifest.push(RecordMeta {
            row: new_row,
            id: old.id.clone(),
            uri: old.uri.clone(),
        });
    }
    EmbeddingDataset { data, manifest }
}

/// The row permutation used for `epoch`. Epoch permutations are re-derived
/// from scratch as `Rng::new(seed + epoch)`; splitmix64 seeding decorrelates
/// sequential seeds, which is exactly its designed use.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed.wrapping_add(epoch as u64)).shuffle(&mut idx);
    idx
}

/// Iterator over shuffled batches for one epoch. Yields owned `B x D`
/// matrices; with `drop_last` every batch has exactly `batch_size` rows, and
/// `batch_size > N` yields nothing.
pub struct BatchIter<'a> {
    dataset: &'a EmbeddingDataset,
    order: Vec<usize>,
    batch_size: usize,
    drop_last: bool,
    next_start: usize,
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Array2<f32>;

    fn next(&mut self) -> Option<Array2<f32>> {
        let remaining = self.order.len() - self.next_start;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let take = remaining.min(self.batch_size);
        let rows = &self.order[self.next_start..self.next_start + take];
        self.next_start += take;
        let mut out = Array2::zeros((take, self.dataset.dim()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&self.dataset.data.row(r));
        }
        Some(out)
    }
}

/// Shuffled batches of `dataset` for the given epoch. Deterministic in
/// `(seed, epoch)`; see [`epoch_permutation`].
pub fn batch_iter(
    dataset: &EmbeddingDataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    drop_last: bool,
) -> BatchIter<'_> {
    assert!(batch_size >= 1, "batch_size must be positive");
    BatchIter {
        dataset,
        order: epoch_permutation(dataset.count(), seed, epoch),
        batch_size,
        drop_last,
        next_start: 0,
    }
}

/// Per-dimension mean and population variance, two-pass in f64.
pub fn compute_stats(dataset: &EmbeddingDataset) -> Result<DatasetStats> {
    let n = dataset.count();
    if n == 0 {
        return Err(Error::invalid("empty dataset"));
    }
    let d = dataset.dim();
    let mut mean = Array1::<f64>::zeros(d);
    for row in dataset.data.axis_iter(Axis(0)) {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v as f64;
        }
    }
    mean /= n as f64;

    let mut variance = Array1::<f64>::zeros(d);
    for row in dataset.data.axis_iter(Axis(0)) {
        for ((s, &v), &m) in variance.iter_mut().zip(row.iter()).zip(mean.iter()) {
            let dlt = v as f64 - m;
            *s += dlt * dlt;
        }
    }
    variance /= n as f64;

    Ok(DatasetStats {
        mean,
        variance,
        count: n,
    })
}
