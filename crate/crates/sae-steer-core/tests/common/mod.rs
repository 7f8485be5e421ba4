//! Reference implementations used to cross-check the library. Everything in
//! here is deliberately written the slow, obvious way (full sorts, scalar
//! loops, Jacobi rotations) and shares no code with the crate under test.

#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView2};
use sae_steer_core::rng::Rng;
use sae_steer_core::store::EmbeddingDataset;

/// Sort-and-select reference for batch-level top-k: gather every strictly
/// positive entry, fully sort by value descending with row-major index as
/// the tie-break, keep the first `k * B`.
pub fn batch_topk_reference(z_pre: &Array2<f32>, k: usize) -> Array2<f32> {
    let (b, m) = z_pre.dim();
    let mut entries: Vec<(usize, usize, f32)> = Vec::new();
    for i in 0..b {
        for j in 0..m {
            let v = z_pre[[i, j]];
            if v > 0.0 {
                entries.push((i, j, v));
            }
        }
    }
    entries.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then_with(|| (a.0 * m + a.1).cmp(&(b.0 * m + b.1)))
    });
    entries.truncate(k * b);

    let mut codes = Array2::<f32>::zeros((b, m));
    for (i, j, v) in entries {
        codes[[i, j]] = v;
    }
    codes
}

/// Plain f64 copy of the model parameters for finite-difference probing.
#[derive(Clone)]
pub struct ScalarParams {
    pub w_enc: Vec<Vec<f64>>,
    pub b_enc: Vec<f64>,
    pub w_dec: Vec<Vec<f64>>,
    pub b_dec: Vec<f64>,
}

impl ScalarParams {
    pub fn from_model(model: &sae_steer_core::sae::SaeModel) -> Self {
        let (m, d) = (model.dict_size, model.dim_in);
        ScalarParams {
            w_enc: (0..m)
                .map(|j| (0..d).map(|c| model.w_enc[[j, c]] as f64).collect())
                .collect(),
            b_enc: model.b_enc.iter().map(|&v| v as f64).collect(),
            w_dec: (0..m)
                .map(|j| (0..d).map(|c| model.w_dec[[j, c]] as f64).collect())
                .collect(),
            b_dec: model.b_dec.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Scalar-loop evaluation of the training loss with the active set and dead
/// mask frozen, which is exactly the function the analytic gradients
/// differentiate. All arithmetic is f64.
pub fn scalar_loss_frozen(
    params: &ScalarParams,
    x: ArrayView2<f32>,
    active_mask: &Array2<bool>,
    dead_mask: &[bool],
    lambda: f64,
) -> f64 {
    let b = x.nrows();
    let d = x.ncols();
    let m = params.b_enc.len();

    let mut mse_sum = 0.0f64;
    let mut rean_sum = 0.0f64;
    for i in 0..b {
        // Pre-activations for sample i.
        let mut z = vec![0.0f64; m];
        for j in 0..m {
            let mut acc = params.b_enc[j];
            for c in 0..d {
                acc += (x[[i, c]] as f64 - params.b_dec[c]) * params.w_enc[j][c];
            }
            z[j] = acc;
            if dead_mask[j] {
                rean_sum += acc;
            }
        }
        // Decode through the frozen active set.
        for c in 0..d {
            let mut xh = params.b_dec[c];
            for j in 0..m {
                if active_mask[[i, j]] {
                    xh += z[j] * params.w_dec[j][c];
                }
            }
            let diff = xh - x[[i, c]] as f64;
            mse_sum += diff * diff;
        }
    }
    mse_sum / b as f64 - lambda * (rean_sum / (b * m) as f64)
}

/// Central finite difference of `scalar_loss_frozen` in one coordinate of
/// one parameter tensor. `slot` addresses (tensor, row, col); bias tensors
/// ignore `col`.
pub fn central_difference(
    params: &ScalarParams,
    x: ArrayView2<f32>,
    active_mask: &Array2<bool>,
    dead_mask: &[bool],
    lambda: f64,
    tensor: Tensor,
    row: usize,
    col: usize,
    h: f64,
) -> f64 {
    let mut plus = params.clone();
    let mut minus = params.clone();
    *slot(&mut plus, tensor, row, col) += h;
    *slot(&mut minus, tensor, row, col) -= h;
    let lp = scalar_loss_frozen(&plus, x, active_mask, dead_mask, lambda);
    let lm = scalar_loss_frozen(&minus, x, active_mask, dead_mask, lambda);
    (lp - lm) / (2.0 * h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tensor {
    WEnc,
    BEnc,
    WDec,
    BDec,
}

fn slot(params: &mut ScalarParams, tensor: Tensor, row: usize, col: usize) -> &mut f64 {
    match tensor {
        Tensor::WEnc => &mut params.w_enc[row][col],
        Tensor::BEnc => &mut params.b_enc[row],
        Tensor::WDec => &mut params.w_dec[row][col],
        Tensor::BDec => &mut params.b_dec[row],
    }
}

/// Singular values by one-sided Jacobi rotation, descending. Input of any
/// aspect ratio; internally works on a tall copy.
pub fn singular_values_jacobi(w: ArrayView2<f32>) -> Vec<f64> {
    let (rows, cols) = w.dim();
    // Work tall: columns are rotated, so keep fewer columns than rows.
    let (n, m) = if rows >= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    let mut a = vec![vec![0.0f64; m]; n];
    for i in 0..rows {
        for j in 0..cols {
            if rows >= cols {
                a[i][j] = w[[i, j]] as f64;
            } else {
                a[j][i] = w[[i, j]] as f64;
            }
        }
    }

    let tol = 1e-14;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..m {
            for q in (p + 1)..m {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..n {
                    app += a[i][p] * a[i][p];
                    aqq += a[i][q] * a[i][q];
                    apq += a[i][p] * a[i][q];
                }
                if apq.abs() <= tol * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let theta = 0.5 * (2.0 * apq).atan2(app - aqq);
                let (s, c) = theta.sin_cos();
                for i in 0..n {
                    let vp = a[i][p];
                    let vq = a[i][q];
                    a[i][p] = c * vp + s * vq;
                    a[i][q] = -s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigmas: Vec<f64> = (0..m)
        .map(|j| (0..n).map(|i| a[i][j] * a[i][j]).sum::<f64>().sqrt())
        .collect();
    sigmas.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sigmas
}

/// Stable rank straight from the full spectrum.
pub fn stable_rank_from_svd(w: ArrayView2<f32>) -> f64 {
    let sigmas = singular_values_jacobi(w);
    let frob_sq: f64 = sigmas.iter().map(|s| s * s).sum();
    frob_sq / (sigmas[0] * sigmas[0])
}

/// Scalar reference for profile construction: per concept, walk the column
/// in row order, count and sum strictly positive entries, apply the closed
/// frequency test, scale the mean.
pub fn build_profile_reference(
    codes: ArrayView2<f32>,
    p: f64,
    s: f64,
) -> std::collections::BTreeMap<usize, f64> {
    let n = codes.nrows();
    let m = codes.ncols();
    let mut values = std::collections::BTreeMap::new();
    for j in 0..m {
        let mut count = 0usize;
        let mut sum = 0.0f64;
        for i in 0..n {
            let v = codes[[i, j]];
            if v > 0.0 {
                count += 1;
                sum += v as f64;
            }
        }
        if count > 0 && (count as f64) / (n as f64) >= p {
            values.insert(j, s * (sum / count as f64));
        }
    }
    values
}

/// Synthetic sparse-coding corpus: `m` unit-norm atoms in `d` dimensions,
/// each sample a positive combination of `sparsity` distinct atoms with
/// coefficients uniform in [0.5, 1.5].
pub fn planted_corpus(
    d: usize,
    m: usize,
    sparsity: usize,
    n: usize,
    seed: u64,
) -> (Array2<f32>, EmbeddingDataset) {
    let mut rng = Rng::new(seed);

    let mut atoms = Array2::<f32>::zeros((m, d));
    for j in 0..m {
        let row: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..d {
            atoms[[j, c]] = (row[c] / norm) as f32;
        }
    }

    let mut data = Array2::<f32>::zeros((n, d));
    let mut chosen = vec![usize::MAX; sparsity];
    for i in 0..n {
        for slot in 0..sparsity {
            // Rejection sampling keeps the atom picks distinct.
            let j = loop {
                let candidate = rng.next_below(m as u64) as usize;
                if !chosen[..slot].contains(&candidate) {
                    break candidate;
                }
            };
            chosen[slot] = j;
            let coeff = 0.5 + rng.next_f64();
            for c in 0..d {
                data[[i, c]] += (coeff * atoms[[j, c]] as f64) as f32;
            }
        }
        chosen.fill(usize::MAX);
    }

    let dataset = EmbeddingDataset::with_generated_ids(data, "planted").expect("valid corpus");
    (atoms, dataset)
}

/// Fraction of reference atoms whose best cosine match among the candidate
/// rows reaches `threshold`.
pub fn atom_recovery_fraction(
    atoms: ArrayView2<f32>,
    candidates: ArrayView2<f32>,
    threshold: f64,
) -> f64 {
    let m = atoms.nrows();
    let mut recovered = 0usize;
    for a in 0..m {
        let mut best = -1.0f64;
        for c in 0..candidates.nrows() {
            let cosine = cosine_f64(atoms.row(a), candidates.row(c));
            if cosine > best {
                best = cosine;
            }
        }
        if best >= threshold {
            recovered += 1;
        }
    }
    recovered as f64 / m as f64
}

fn cosine_f64(a: ndarray::ArrayView1<f32>, b: ndarray::ArrayView1<f32>) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Uniform random matrix with entries in [lo, hi).
pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| (lo + (hi - lo) * rng.next_f64()) as f32)
}

/// Random vector with entries in [lo, hi).
pub fn random_vector(rng: &mut Rng, len: usize, lo: f64, hi: f64) -> Array1<f32> {
    Array1::from_shape_fn(len, |_| (lo + (hi - lo) * rng.next_f64()) as f32)
}
