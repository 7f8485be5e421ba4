//! The sparse autoencoder itself: parameters, encoding, BatchTopK
//! sparsification, decoding, the training loss, and its exact analytic
//! gradients under the straight-through convention.
//!
//! Shapes follow the decoder-as-dictionary view: `w_dec` is M x D and row `j`
//! is the embedding-space direction of concept `j`. The encoder pre-activation
//! for a batch `X` (B x D) is
//!
//! ```text
//! Z_pre = (X - 1 b_dec^T) w_enc^T + 1 b_enc^T
//! ```
//!
//! and the reconstruction is `X_hat = Z w_dec + 1 b_dec^T`, where `Z` keeps
//! only the selected positive pre-activations.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! bytes 0..8   magic "LSAESAE1"
//! bytes 8..12  u32 version (= 1)
//! bytes 12..16 u32 D
//! bytes 16..20 u32 M
//! bytes 20..24 u32 k
//! bytes 24..28 f32 theta
//! then w_enc (M*D f32), b_enc (M f32), w_dec (M*D f32), b_dec (D f32),
//! row-major, round-tripping bit-exactly.
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::rng::Rng;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"LSAESAE1";
const VERSION: u32 = 1;

/// A sparse code for one sample: length M, zero outside the active set.
pub type SparseCode = Array1<f32>;

/// SAE parameters. `dim_in` is D, `dict_size` is M (always > D), `k` is the
/// per-sample sparsity target, `theta` the calibrated inference threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    pub dim_in: usize,
    pub dict_size: usize,
    pub k: usize,
    pub theta: f32,
    pub w_enc: Array2<f32>,
    pub b_enc: Array1<f32>,
    pub w_dec: Array2<f32>,
    pub b_dec: Array1<f32>,
}

impl SaeModel {
    /// Checks the structural invariants: finite parameters, matching shapes,
    /// overcomplete dictionary, `k <= M`, `theta >= 0`.
    pub fn validate(&self) -> Result<()> {
        if self.dict_size <= self.dim_in {
            return Err(Error::invalid("dictionary not overcomplete"));
        }
        if self.k == 0 || self.k > self.dict_size {
            return Err(Error::invalid(format!(
                "k = {} out of range for dictionary of {}",
                self.k, self.dict_size
            )));
        }
        if !(self.theta >= 0.0) {
            return Err(Error::invalid("theta must be nonnegative"));
        }
        let (m, d) = (self.dict_size, self.dim_in);
        if self.w_enc.dim() != (m, d)
            || self.w_dec.dim() != (m, d)
            || self.b_enc.len() != m
            || self.b_dec.len() != d
        {
            return Err(Error::invalid("parameter shape mismatch"));
        }
        let finite = self.w_enc.iter().all(|v| v.is_finite())
            && self.w_dec.iter().all(|v| v.is_finite())
            && self.b_enc.iter().all(|v| v.is_finite())
            && self.b_dec.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("non-finite parameter"));
        }
        Ok(())
    }
}

/// Sparsified batch: `codes = pre_activations` on the active set, zero
/// elsewhere; every active entry is strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBatch {
    pub codes: Array2<f32>,
    pub pre_activations: Array2<f32>,
    pub active_mask: Array2<bool>,
}

impl SparseBatch {
    /// Number of active entries.
    pub fn active_count(&self) -> usize {
        self.active_mask.iter().filter(|&&b| b).count()
    }

    /// True at `j` iff concept `j` is active in at least one sample.
    pub fn column_activity(&self) -> Vec<bool> {
        let (b, m) = self.active_mask.dim();
        let mut active = vec![false; m];
        for i in 0..b {
            for j in 0..m {
                active[j] |= self.active_mask[[i, j]];
            }
        }
        active
    }

    /// Smallest active pre-activation, if anything is active.
    pub fn min_active(&self) -> Option<f32> {
        let mut min: Option<f32> = None;
        for (&v, &a) in self.pre_activations.iter().zip(self.active_mask.iter()) {
            if a {
                min = Some(match min {
                    Some(cur) if cur <= v => cur,
                    _ => v,
                });
            }
        }
        min
    }
}

/// Loss components. `total = mse - lambda * reanimation`, composed exactly in
/// that order so repeated evaluations are bit-identical.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub reanimation: f64,
    pub lambda: f64,
    pub dead_mask: Vec<bool>,
}

/// Gradients of the training loss, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w_enc: Array2<f32>,
    pub b_enc: Array1<f32>,
    pub w_dec: Array2<f32>,
    pub b_dec: Array1<f32>,
}

/// Initializes a model: decoder rows are standard-normal draws (row-major
/// order) normalized to unit L2 norm, the encoder starts as a copy of the
/// decoder (used as an independent parameter from then on), biases are zero,
/// theta is zero. Deterministic in `seed`.
pub fn init_sae(dim_in: usize, dict_size: usize, k: usize, seed: u64) -> Result<SaeModel> {
    if dict_size <= dim_in {
        return Err(Error::invalid("dictionary not overcomplete"));
    }
    if k == 0 || k > dict_size {
        return Err(Error::invalid(format!(
            "k = {k} out of range for dictionary of {dict_size}"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut w_dec = Array2::<f32>::zeros((dict_size, dim_in));
    for mut row in w_dec.axis_iter_mut(Axis(0)) {
        let draws: Vec<f64> = (0..dim_in).map(|_| rng.next_normal()).collect();
        let norm = draws.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0, "degenerate zero draw");
        for (slot, v) in row.iter_mut().zip(&draws) {
            *slot = (v / norm) as f32;
        }
    }
    Ok(SaeModel {
        dim_in,
        dict_size,
        k,
        theta: 0.0,
        w_enc: w_dec.clone(),
        b_enc: Array1::zeros(dict_size),
        w_dec,
        b_dec: Array1::zeros(dim_in),
    })
}

/// Encoder pre-activations: `(X - 1 b_dec^T) w_enc^T + 1 b_enc^T`.
pub fn encode_pre(model: &SaeModel, x: ArrayView2<f32>) -> Result<Array2<f32>> {
    if x.ncols() != model.dim_in {
        return Err(Error::invalid(format!(
            "input has {} columns, model expects {}",
            x.ncols(),
            model.dim_in
        )));
    }
    let centered = &x - &model.b_dec;
    let mut z = centered.dot(&model.w_enc.t());
    z += &model.b_enc;
    Ok(z)
}

/// Keeps the `k * B` largest strictly positive entries of the flattened
/// pre-activation matrix (fewer if fewer are positive). Ties break toward the
/// lowest row-major flat index.
pub fn batch_topk(z_pre: &Array2<f32>, k: usize) -> SparseBatch {
    let (b, m) = z_pre.dim();
    assert!(k <= m, "k must not exceed the dictionary size");
    let k_batch = k * b;

    let flat = z_pre.as_slice().expect("z_pre is standard layout");
    let mut positive: Vec<(f32, u32)> = flat
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, &v)| (v, i as u32))
        .collect();

    // Total order: value descending, then flat index ascending. All values
    // are strictly positive finite, so partial_cmp cannot fail.
    let by_rank =
        |a: &(f32, u32), b: &(f32, u32)| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1));
    if positive.len() > k_batch {
        if k_batch == 0 {
            positive.clear();
        } else {
            positive.select_nth_unstable_by(k_batch - 1, by_rank);
            positive.truncate(k_batch);
        }
    }

    let mut codes = Array2::<f32>::zeros((b, m));
    let mut active_mask = Array2::from_elem((b, m), false);
    {
        let codes_flat = codes.as_slice_mut().unwrap();
        let mask_flat = active_mask.as_slice_mut().unwrap();
        for &(v, i) in &positive {
            codes_flat[i as usize] = v;
            mask_flat[i as usize] = true;
        }
    }
    SparseBatch {
        codes,
        pre_activations: z_pre.clone(),
        active_mask,
    }
}

/// Per-sample top-k: the `k` largest strictly positive entries of one
/// pre-activation vector, ties toward the lowest index.
pub fn topk_per_sample(z_pre: ArrayView1<f32>, k: usize) -> SparseCode {
    let m = z_pre.len();
    assert!(k <= m, "k must not exceed the dictionary size");
    let mut positive: Vec<(f32, u32)> = z_pre
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, &v)| (v, i as u32))
        .collect();
    let by_rank =
        |a: &(f32, u32), b: &(f32, u32)| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1));
    if positive.len() > k {
        if k == 0 {
            positive.clear();
        } else {
            positive.select_nth_unstable_by(k - 1, by_rank);
            positive.truncate(k);
        }
    }
    let mut code = Array1::zeros(m);
    for &(v, i) in &positive {
        code[i as usize] = v;
    }
    code
}

/// Threshold activation: keeps entries with `z_pre > theta`.
pub fn threshold_activate(z_pre: ArrayView1<f32>, theta: f32) -> SparseCode {
    assert!(theta >= 0.0, "theta must be nonnegative");
    z_pre.mapv(|v| if v > theta { v } else { 0.0 })
}

/// How codes are produced outside of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    /// Per-sample top-k at the model's trained `k` (the default).
    TopK,
    /// Keep everything above the calibrated threshold `theta`.
    Threshold,
}

/// Sparse codes for a whole matrix of inputs, one row at a time under the
/// chosen inference mode. Rows are processed in chunks to bound the size of
/// the intermediate pre-activation buffer.
pub fn encode_codes(
    model: &SaeModel,
    x: ArrayView2<f32>,
    mode: InferenceMode,
) -> Result<Array2<f32>> {
    const CHUNK: usize = 4096;
    let n = x.nrows();
    let mut codes = Array2::<f32>::zeros((n, model.dict_size));
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let z_pre = encode_pre(model, x.slice(ndarray::s![start..end, ..]))?;
        for (offset, row) in z_pre.axis_iter(Axis(0)).enumerate() {
            let code = match mode {
                InferenceMode::TopK => topk_per_sample(row, model.k),
                InferenceMode::Threshold => threshold_activate(row, model.theta),
            };
            codes.row_mut(start + offset).assign(&code);
        }
        start = end;
    }
    Ok(codes)
}

/// Decodes codes back to embedding space: `Z w_dec + 1 b_dec^T`.
pub fn decode(model: &SaeModel, z: ArrayView2<f32>) -> Result<Array2<f32>> {
    if z.ncols() != model.dict_size {
        return Err(Error::invalid(format!(
            "codes have {} columns, model expects {}",
            z.ncols(),
            model.dict_size
        )));
    }
    let mut x_hat = z.dot(&model.w_dec);
    x_hat += &model.b_dec;
    Ok(x_hat)
}

/// Fixed-order pairwise sum: runs of 8 or fewer sum sequentially, longer
/// slices split at the midpoint. Keeps accumulation bit-reproducible.
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        let mut acc = 0.0;
        for &v in xs {
            acc += v;
        }
        acc
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// The training loss: per-sample mean squared reconstruction error minus
/// `lambda` times the mean pre-activation of dead concepts.
///
/// `mse` is the mean over the batch of each sample's squared L2 error;
/// `reanimation` is the mean over all `B * M` entries of `Z_pre` masked to
/// dead concepts. Rows accumulate pairwise, the batch accumulates row by row,
/// everything in f64.
pub fn loss(
    x: ArrayView2<f32>,
    x_hat: ArrayView2<f32>,
    z_pre: ArrayView2<f32>,
    dead_mask: &[bool],
    lambda: f64,
) -> Result<LossBreakdown> {
    let (b, d) = x.dim();
    if x_hat.dim() != (b, d) {
        return Err(Error::invalid("reconstruction shape mismatch"));
    }
    let (zb, m) = z_pre.dim();
    if zb != b || dead_mask.len() != m {
        return Err(Error::invalid("pre-activation shape mismatch"));
    }
    if lambda < 0.0 {
        return Err(Error::invalid("lambda must be nonnegative"));
    }

    let mut row_buf = vec![0.0f64; d];
    let mut sq_err = 0.0f64;
    for (xr, hr) in x.axis_iter(Axis(0)).zip(x_hat.axis_iter(Axis(0))) {
        for ((slot, &a), &p) in row_buf.iter_mut().zip(xr.iter()).zip(hr.iter()) {
            let diff = a as f64 - p as f64;
            *slot = diff * diff;
        }
        sq_err += pairwise_sum(&row_buf);
    }
    let mse = if b == 0 { 0.0 } else { sq_err / b as f64 };

    let mut dead_buf = vec![0.0f64; m];
    let mut dead_sum = 0.0f64;
    for zr in z_pre.axis_iter(Axis(0)) {
        for ((slot, &v), &dead) in dead_buf.iter_mut().zip(zr.iter()).zip(dead_mask.iter()) {
            *slot = if dead { v as f64 } else { 0.0 };
        }
        dead_sum += pairwise_sum(&dead_buf);
    }
    let reanimation = if b == 0 {
        0.0
    } else {
        dead_sum / (b * m) as f64
    };

    Ok(LossBreakdown {
        total: mse - lambda * reanimation,
        mse,
        reanimation,
        lambda,
        dead_mask: dead_mask.to_vec(),
    })
}

/// Analytic gradients of [`loss`] with the active mask held constant (the
/// straight-through convention for top-k selection): the reconstruction term
/// propagates through active code entries only, the reanimation term through
/// every pre-activation of dead concepts.
pub fn grads(
    model: &SaeModel,
    x: ArrayView2<f32>,
    sparse: &SparseBatch,
    dead_mask: &[bool],
    lambda: f64,
) -> Result<Gradients> {
    let (b, d) = x.dim();
    let m = model.dict_size;
    if d != model.dim_in {
        return Err(Error::invalid("input width does not match model"));
    }
    if sparse.codes.dim() != (b, m) {
        return Err(Error::invalid("sparse batch does not match input"));
    }
    if dead_mask.len() != m {
        return Err(Error::invalid("dead mask length mismatch"));
    }

    let x_hat = decode(model, sparse.codes.view())?;
    let scale = 2.0 / b as f32;
    let g_xhat = (&x_hat - &x) * scale;

    // Reconstruction path through the selected codes.
    let mut g_z = g_xhat.dot(&model.w_dec.t());
    for (gz, &active) in g_z.iter_mut().zip(sparse.active_mask.iter()) {
        if !active {
            *gz = 0.0;
        }
    }
    // Reanimation path through every pre-activation of dead concepts.
    if lambda > 0.0 {
        let per_entry = (lambda / (b * m) as f64) as f32;
        for mut row in g_z.axis_iter_mut(Axis(0)) {
            for (gz, &dead) in row.iter_mut().zip(dead_mask.iter()) {
                if dead {
                    *gz -= per_entry;
                }
            }
        }
    }

    let centered = &x - &model.b_dec;
    let grad_w_enc = g_z.t().dot(&centered);
    let grad_b_enc = g_z.sum_axis(Axis(0));
    let grad_w_dec = sparse.codes.t().dot(&g_xhat);
    let grad_b_dec = g_xhat.sum_axis(Axis(0)) - grad_b_enc.dot(&model.w_enc);

    Ok(Gradients {
        w_enc: grad_w_enc,
        b_enc: grad_b_enc,
        w_dec: grad_w_dec,
        b_dec: grad_b_dec,
    })
}

/// Writes a checkpoint in the documented binary layout.
pub fn write_checkpoint(model: &SaeModel, path: &Path) -> Result<()> {
    model.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io_err)?;
    w.write_u32::<LittleEndian>(model.dim_in as u32)
        .map_err(io_err)?;
    w.write_u32::<LittleEndian>(model.dict_size as u32)
        .map_err(io_err)?;
    w.write_u32::<LittleEndian>(model.k as u32)
        .map_err(io_err)?;
    w.write_f32::<LittleEndian>(model.theta).map_err(io_err)?;
    for &v in model.w_enc.iter() {
        w.write_f32::<LittleEndian>(v).map_err(io_err)?;
    }
    for &v in model.b_enc.iter() {
        w.write_f32::<LittleEndian>(v).map_err(io_err)?;
    }
    for &v in model.w_dec.iter() {
        w.write_f32::<LittleEndian>(v).map_err(io_err)?;
    }
    for &v in model.b_dec.iter() {
        w.write_f32::<LittleEndian>(v).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(path: &Path) -> Result<SaeModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |what: &str| Error::invalid(format!("{}: {what}", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad("bad magic (file too short)"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| bad("truncated header"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let d = r
        .read_u32::<LittleEndian>()
        .map_err(|_| bad("truncated header"))? as usize;
    let m = r
        .read_u32::<LittleEndian>()
        .map_err(|_| bad("truncated header"))? as usize;
    let k = r
        .read_u32::<LittleEndian>()
        .map_err(|_| bad("truncated header"))? as usize;
    let theta = r
        .read_f32::<LittleEndian>()
        .map_err(|_| bad("truncated header"))?;

    let mut read_vec = |len: usize| -> Result<Vec<f32>> {
        let mut out = vec![0f32; len];
        for v in out.iter_mut() {
            *v = r
                .read_f32::<LittleEndian>()
                .map_err(|_| bad("truncated payload"))?;
        }
        Ok(out)
    };
    let w_enc = read_vec(m * d)?;
    let b_enc = read_vec(m)?;
    let w_dec = read_vec(m * d)?;
    let b_dec = read_vec(d)?;

    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(bad("trailing bytes after payload")),
        Err(e) => return Err(Error::io(path, e)),
    }

    let model = SaeModel {
        dim_in: d,
        dict_size: m,
        k,
        theta,
        w_enc: Array2::from_shape_vec((m, d), w_enc).expect("validated shape"),
        b_enc: Array1::from_vec(b_enc),
        w_dec: Array2::from_shape_vec((m, d), w_dec).expect("validated shape"),
        b_dec: Array1::from_vec(b_dec),
    };
    model.validate()?;
    Ok(model)
}
