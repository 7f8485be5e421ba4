//! Style profiles and steering: turn a set of reference codes into a sparse
//! concept-intensity vector, diff and compose such vectors, decode them into
//! embedding-space residuals, and shift content embeddings along them.
//!
//! A profile stores `value[j] = S * mean(positive activations of concept j)`
//! for every concept whose activation frequency over the references reaches
//! the presence threshold `P` (closed comparison, so `P = 1.0` means "active
//! in every reference"). The residual is the profile decoded through the
//! dictionary rows alone; the decoder bias is deliberately left out because
//! the residual is an additive shift and a bias term would push every steered
//! embedding by the same content-free offset.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::sae::{self, InferenceMode, SaeModel};
use crate::store::EmbeddingDataset;
use crate::{Error, Result};

/// Default presence threshold for profile construction.
pub const DEFAULT_PRESENCE_THRESHOLD: f64 = 0.6;
/// Default profile strength multiplier.
pub const DEFAULT_STRENGTH: f64 = 5.0;
/// Default steering gain.
pub const DEFAULT_ALPHA: f64 = 2.0;
/// Recommended gain range for single-concept steering.
pub const SINGLE_CONCEPT_ALPHA_RANGE: (f64, f64) = (0.5, 3.5);

/// N x M matrix of nonnegative sparse codes with the id of each source row.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMatrix {
    codes: Array2<f32>,
    ref_ids: Vec<String>,
}

impl ConceptMatrix {
    pub fn new(codes: Array2<f32>, ref_ids: Vec<String>) -> Result<Self> {
        if ref_ids.len() != codes.nrows() {
            return Err(Error::invalid(format!(
                "{} ids for {} code rows",
                ref_ids.len(),
                codes.nrows()
            )));
        }
        if codes.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("codes must be finite and nonnegative"));
        }
        Ok(ConceptMatrix { codes, ref_ids })
    }

    /// Reinterprets a stored dataset as codes (the `encode` command persists
    /// codes in the embedding container with the dictionary as the width).
    pub fn from_dataset(dataset: &EmbeddingDataset) -> Result<Self> {
        ConceptMatrix::new(dataset.data().to_owned(), dataset.ids())
    }

    pub fn count(&self) -> usize {
        self.codes.nrows()
    }

    pub fn dict_size(&self) -> usize {
        self.codes.ncols()
    }

    pub fn codes(&self) -> ndarray::ArrayView2<'_, f32> {
        self.codes.view()
    }

    pub fn ref_ids(&self) -> &[String] {
        &self.ref_ids
    }
}

/// Sparse concept-intensity vector with its construction parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleProfile {
    pub values: BTreeMap<usize, f64>,
    pub dict_size: usize,
    pub presence_threshold: f64,
    pub strength: f64,
    pub ref_ids: Vec<String>,
}

impl StyleProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.presence_threshold > 0.0 && self.presence_threshold <= 1.0) {
            return Err(Error::invalid("presence threshold must lie in (0, 1]"));
        }
        if !(self.strength > 0.0 && self.strength.is_finite()) {
            return Err(Error::invalid("strength must be positive"));
        }
        for (&j, &v) in &self.values {
            if j >= self.dict_size {
                return Err(Error::invalid(format!(
                    "concept {j} outside dictionary of {}",
                    self.dict_size
                )));
            }
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("concept {j} has nonpositive value")));
            }
        }
        Ok(())
    }

    /// Concept indices in ascending order.
    pub fn support(&self) -> Vec<usize> {
        self.values.keys().copied().collect()
    }
}

/// Output of [`steer`]: the shifted embedding together with its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringResult {
    pub residual: Array1<f64>,
    pub alpha: f64,
    pub steered: Array1<f64>,
    pub content: Array1<f64>,
}

/// Difference between two profiles over the union of their supports.
/// `shared` rows are `(concept, value_a, value_b, delta)` with
/// `delta = value_a - value_b`, sorted by |delta| descending, ties by concept
/// index ascending. The one-sided lists are `(concept, value)` ascending by
/// concept.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffReport {
    pub shared: Vec<(usize, f64, f64, f64)>,
    pub only_a: Vec<(usize, f64)>,
    pub only_b: Vec<(usize, f64)>,
}

/// Encodes every reference through the model under the chosen inference mode.
pub fn collect_codes(
    model: &SaeModel,
    refs: &EmbeddingDataset,
    mode: InferenceMode,
) -> Result<ConceptMatrix> {
    let codes = sae::encode_codes(model, refs.data(), mode)?;
    ConceptMatrix::new(codes, refs.ids())
}

/// Builds a profile: concept `j` is kept iff its activation frequency
/// `count_positive / N` reaches `p` (closed), valued at `s` times the mean of
/// its positive activations. Columns are scanned sequentially in f64 so the
/// result is bit-identical to a scalar reference.
pub fn build_profile(codes: &ConceptMatrix, p: f64, s: f64) -> Result<StyleProfile> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid("presence threshold must lie in (0, 1]"));
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::invalid("strength must be positive"));
    }
    let n = codes.count();
    if n == 0 {
        return Err(Error::invalid(
            "cannot build a profile from zero references",
        ));
    }

    let c = codes.codes();
    let mut values = BTreeMap::new();
    for j in 0..codes.dict_size() {
        let mut count = 0usize;
        let mut sum = 0.0f64;
        for i in 0..n {
            let v = c[[i, j]];
            if v > 0.0 {
                count += 1;
                sum += v as f64;
            }
        }
        if count > 0 && (count as f64) / (n as f64) >= p {
            values.insert(j, s * (sum / count as f64));
        }
    }

    Ok(StyleProfile {
        values,
        dict_size: codes.dict_size(),
        presence_threshold: p,
        strength: s,
        ref_ids: codes.ref_ids().to_vec(),
    })
}

/// Partitions the union of two supports into shared and one-sided entries.
pub fn profile_diff(a: &StyleProfile, b: &StyleProfile) -> Result<DiffReport> {
    if a.dict_size != b.dict_size {
        return Err(Error::invalid(format!(
            "dictionary sizes differ: {} vs {}",
            a.dict_size, b.dict_size
        )));
    }
    let mut shared = Vec::new();
    let mut only_a = Vec::new();
    for (&j, &va) in &a.values {
        match b.values.get(&j) {
            Some(&vb) => shared.push((j, va, vb, va - vb)),
            None => only_a.push((j, va)),
        }
    }
    let only_b: Vec<(usize, f64)> = b
        .values
        .iter()
        .filter(|(j, _)| !a.values.contains_key(j))
        .map(|(&j, &v)| (j, v))
        .collect();
    shared.sort_by(|x, y| y.3.abs().total_cmp(&x.3.abs()).then_with(|| x.0.cmp(&y.0)));
    Ok(DiffReport {
        shared,
        only_a,
        only_b,
    })
}

/// Weighted sparse sum of profiles. Entries whose combined value is not
/// strictly positive are dropped so the profile invariant survives. The
/// result keeps the first profile's threshold and strength as provenance and
/// concatenates reference ids, first occurrence wins.
pub fn compose_profiles(weighted: &[(StyleProfile, f64)]) -> Result<StyleProfile> {
    let Some(((first, _), rest)) = weighted.split_first() else {
        return Err(Error::invalid("nothing to compose"));
    };
    for (p, _) in rest {
        if p.dict_size != first.dict_size {
            return Err(Error::invalid(format!(
                "dictionary sizes differ: {} vs {}",
                first.dict_size, p.dict_size
            )));
        }
    }

    let mut sums = BTreeMap::<usize, f64>::new();
    for (profile, weight) in weighted {
        for (&j, &v) in &profile.values {
            *sums.entry(j).or_insert(0.0) += weight * v;
        }
    }
    let values: BTreeMap<usize, f64> = sums.into_iter().filter(|&(_, v)| v > 0.0).collect();

    let mut ref_ids = Vec::new();
    for (profile, _) in weighted {
        for id in &profile.ref_ids {
            if !ref_ids.contains(id) {
                ref_ids.push(id.clone());
            }
        }
    }

    Ok(StyleProfile {
        values,
        dict_size: first.dict_size,
        presence_threshold: first.presence_threshold,
        strength: first.strength,
        ref_ids,
    })
}

/// Decodes a profile into the embedding-space residual
/// `sum_j value[j] * w_dec[j]`, accumulated in f64. The decoder bias is
/// excluded by design (see the module docs).
pub fn decode_residual(model: &SaeModel, profile: &StyleProfile) -> Result<Array1<f64>> {
    if profile.dict_size != model.dict_size {
        return Err(Error::invalid(format!(
            "profile dictionary {} does not match model dictionary {}",
            profile.dict_size, model.dict_size
        )));
    }
    let mut residual = Array1::<f64>::zeros(model.dim_in);
    for (&j, &v) in &profile.values {
        for d in 0..model.dim_in {
            residual[d] += v * model.w_dec[[j, d]] as f64;
        }
    }
    Ok(residual)
}

/// Shifts a content embedding: `steered = content + alpha * residual`.
pub fn steer(
    content: ArrayView1<f64>,
    residual: ArrayView1<f64>,
    alpha: f64,
) -> Result<SteeringResult> {
    if content.len() != residual.len() {
        return Err(Error::invalid(format!(
            "content dimension {} does not match residual dimension {}",
            content.len(),
            residual.len()
        )));
    }
    let content = content.to_owned();
    let residual = residual.to_owned();
    let steered = &content + &(alpha * &residual);
    Ok(SteeringResult {
        residual,
        alpha,
        steered,
        content,
    })
}

/// One-hot profile at concept `j`, valued at the concept's maximum observed
/// activation. The reference list is narrowed to the rows where the concept
/// actually fired, so the stored threshold of 1.0 stays truthful.
pub fn single_concept_profile(j: usize, codes: &ConceptMatrix) -> Result<StyleProfile> {
    if j >= codes.dict_size() {
        return Err(Error::invalid(format!(
            "concept {j} outside dictionary of {}",
            codes.dict_size()
        )));
    }
    let c = codes.codes();
    let mut max = 0.0f32;
    let mut ref_ids = Vec::new();
    for i in 0..codes.count() {
        let v = c[[i, j]];
        if v > 0.0 {
            ref_ids.push(codes.ref_ids()[i].clone());
            if v > max {
                max = v;
            }
        }
    }
    if max <= 0.0 {
        return Err(Error::invalid(format!(
            "concept {j}: no observed activation"
        )));
    }
    Ok(StyleProfile {
        values: BTreeMap::from([(j, max as f64)]),
        dict_size: codes.dict_size(),
        presence_threshold: 1.0,
        strength: 1.0,
        ref_ids,
    })
}

/// On-disk image of a profile. Field order is fixed; values are `[index,
/// value]` pairs sorted ascending by index.
#[derive(Serialize, Deserialize)]
struct ProfileFile {
    dict_size: usize,
    presence_threshold: f64,
    strength: f64,
    ref_ids: Vec<String>,
    values: Vec<(usize, f64)>,
}

pub fn write_profile(profile: &StyleProfile, path: &Path) -> Result<()> {
    profile.validate()?;
    let image = ProfileFile {
        dict_size: profile.dict_size,
        presence_threshold: profile.presence_threshold,
        strength: profile.strength,
        ref_ids: profile.ref_ids.clone(),
        values: profile.values.iter().map(|(&j, &v)| (j, v)).collect(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &image)
        .map_err(|e| Error::invalid(format!("profile encode: {e}")))?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_profile(path: &Path) -> Result<StyleProfile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let image: ProfileFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::invalid(format!("profile decode: {e}")))?;
    for pair in image.values.windows(2) {
        if pair[1].0 <= pair[0].0 {
            return Err(Error::invalid("profile values not sorted by concept"));
        }
    }
    let profile = StyleProfile {
        values: image.values.into_iter().collect(),
        dict_size: image.dict_size,
        presence_threshold: image.presence_threshold,
        strength: image.strength,
        ref_ids: image.ref_ids,
    };
    profile.validate()?;
    Ok(profile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn matrix(rows: Vec<Vec<f32>>) -> ConceptMatrix {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        let flat: Vec<f32> = rows.into_iter().flatten().collect();
        let codes = Array2::from_shape_vec((n, m), flat).unwrap();
        let ids = (0..n).map(|i| format!("ref-{i}")).collect();
        ConceptMatrix::new(codes, ids).unwrap()
    }

    fn profile_of(entries: &[(usize, f64)], dict_size: usize) -> StyleProfile {
        StyleProfile {
            values: entries.iter().copied().collect(),
            dict_size,
            presence_threshold: 0.6,
            strength: 5.0,
            ref_ids: vec!["a".into()],
        }
    }

    #[test]
    fn concept_matrix_rejects_negative_and_misaligned() {
        let neg = Array2::from_shape_vec((1, 2), vec![1.0, -0.5]).unwrap();
        assert!(ConceptMatrix::new(neg, vec!["a".into()]).is_err());
        let ok = Array2::from_shape_vec((1, 2), vec![1.0, 0.5]).unwrap();
        assert!(ConceptMatrix::new(ok.clone(), vec![]).is_err());
        assert!(ConceptMatrix::new(ok, vec!["a".into()]).is_ok());
    }

    #[test]
    fn profile_frequency_and_value_hand_case() {
        // Concept 0 fires in 2 of 3 rows with values 2 and 4.
        let codes = matrix(vec![vec![2.0, 0.0], vec![4.0, 1.0], vec![0.0, 0.0]]);
        let profile = build_profile(&codes, 0.6, 5.0).unwrap();
        // 2/3 >= 0.6, mean 3, scaled by 5.
        assert_eq!(profile.values.get(&0), Some(&15.0));
        // Concept 1 fires in 1 of 3 rows: 1/3 < 0.6.
        assert!(!profile.values.contains_key(&1));
        assert_eq!(profile.ref_ids.len(), 3);
    }

    #[test]
    fn profile_with_tiny_threshold_keeps_every_active_concept() {
        let codes = matrix(vec![vec![2.0, 0.0, 1.0], vec![4.0, 0.0, 0.0]]);
        let profile = build_profile(&codes, 1e-9, 1.0).unwrap();
        assert_eq!(profile.values.get(&0), Some(&3.0));
        assert!(!profile.values.contains_key(&1));
        assert_eq!(profile.values.get(&2), Some(&1.0));
    }

    #[test]
    fn profile_closed_threshold_includes_exact_boundary() {
        // Frequency exactly 0.5 with P = 0.5 must be included.
        let codes = matrix(vec![vec![2.0], vec![0.0]]);
        let profile = build_profile(&codes, 0.5, 1.0).unwrap();
        assert_eq!(profile.values.get(&0), Some(&2.0));
    }

    #[test]
    fn profile_rejects_bad_parameters_and_empty_matrix() {
        let codes = matrix(vec![vec![1.0]]);
        assert!(build_profile(&codes, 0.0, 1.0).is_err());
        assert!(build_profile(&codes, 1.5, 1.0).is_err());
        assert!(build_profile(&codes, 0.5, 0.0).is_err());
        let empty = ConceptMatrix::new(Array2::zeros((0, 3)), vec![]).unwrap();
        assert!(build_profile(&empty, 0.5, 1.0).is_err());
    }

    #[test]
    fn profile_matches_scalar_loop_exactly() {
        // Small random-ish instance checked against a literal reimplementation.
        let codes = matrix(vec![
            vec![0.25, 0.0, 1.5, 0.1],
            vec![0.75, 2.0, 0.0, 0.1],
            vec![0.0, 0.0, 3.5, 0.0],
        ]);
        let p = 0.5;
        let s = 5.0;
        let got = build_profile(&codes, p, s).unwrap();
        let c = codes.codes();
        for j in 0..4 {
            let mut count = 0usize;
            let mut sum = 0.0f64;
            for i in 0..3 {
                if c[[i, j]] > 0.0 {
                    count += 1;
                    sum += c[[i, j]] as f64;
                }
            }
            let expected = (count > 0 && count as f64 / 3.0 >= p).then(|| s * (sum / count as f64));
            assert_eq!(got.values.get(&j).copied(), expected, "concept {j}");
        }
    }

    #[test]
    fn diff_hand_case() {
        let a = profile_of(&[(1, 3.0), (2, 1.0)], 8);
        let b = profile_of(&[(2, 4.0), (5, 2.0)], 8);
        let report = profile_diff(&a, &b).unwrap();
        assert_eq!(report.shared, vec![(2, 1.0, 4.0, -3.0)]);
        assert_eq!(report.only_a, vec![(1, 3.0)]);
        assert_eq!(report.only_b, vec![(5, 2.0)]);
    }

    #[test]
    fn diff_identical_profiles_share_everything() {
        let a = profile_of(&[(0, 1.0), (3, 2.0)], 4);
        let report = profile_diff(&a, &a.clone()).unwrap();
        assert!(report.only_a.is_empty() && report.only_b.is_empty());
        assert!(report.shared.iter().all(|&(_, _, _, d)| d == 0.0));
    }

    #[test]
    fn diff_disjoint_profiles_share_nothing() {
        let a = profile_of(&[(0, 1.0)], 4);
        let b = profile_of(&[(1, 2.0)], 4);
        let report = profile_diff(&a, &b).unwrap();
        assert!(report.shared.is_empty());
        assert_eq!(report.only_a, vec![(0, 1.0)]);
        assert_eq!(report.only_b, vec![(1, 2.0)]);
    }

    #[test]
    fn diff_sorts_by_absolute_delta_then_index() {
        let a = profile_of(&[(0, 1.0), (1, 5.0), (2, 2.0)], 4);
        let b = profile_of(&[(0, 2.0), (1, 1.0), (2, 3.0)], 4);
        let report = profile_diff(&a, &b).unwrap();
        let order: Vec<usize> = report.shared.iter().map(|r| r.0).collect();
        // |deltas| are 1, 4, 1: concept 1 first, then the tie 0 before 2.
        assert_eq!(order, vec![1, 0, 2]);
        let sizes = profile_diff(&a, &profile_of(&[(0, 1.0)], 5));
        assert!(sizes.is_err());
    }

    #[test]
    fn compose_weighted_overlap() {
        let a = profile_of(&[(1, 2.0)], 4);
        let b = profile_of(&[(1, 3.0)], 4);
        let out = compose_profiles(&[(a, 1.0), (b, 0.5)]).unwrap();
        assert_eq!(out.values.get(&1), Some(&3.5));
    }

    #[test]
    fn compose_identity_union_and_dropping() {
        let a = profile_of(&[(0, 1.0), (2, 2.0)], 4);
        let same = compose_profiles(&[(a.clone(), 1.0)]).unwrap();
        assert_eq!(same.values, a.values);

        let b = profile_of(&[(1, 3.0)], 4);
        let union = compose_profiles(&[(a.clone(), 1.0), (b.clone(), 1.0)]).unwrap();
        assert_eq!(union.support(), vec![0, 1, 2]);

        // Negative weight cancels concept 0 past zero; it must vanish.
        let cancel =
            compose_profiles(&[(a.clone(), 1.0), (profile_of(&[(0, 2.0)], 4), -1.0)]).unwrap();
        assert_eq!(cancel.support(), vec![2]);

        assert!(compose_profiles(&[]).is_err());
        assert!(compose_profiles(&[(a, 1.0), (profile_of(&[], 5), 1.0)]).is_err());
    }

    #[test]
    fn compose_deduplicates_reference_ids() {
        let mut a = profile_of(&[(0, 1.0)], 4);
        a.ref_ids = vec!["x".into(), "y".into()];
        let mut b = profile_of(&[(1, 1.0)], 4);
        b.ref_ids = vec!["y".into(), "z".into()];
        let out = compose_profiles(&[(a, 1.0), (b, 1.0)]).unwrap();
        assert_eq!(out.ref_ids, vec!["x", "y", "z"]);
    }

    fn toy_model() -> SaeModel {
        // D = 2, M = 3; decoder rows chosen for easy hand arithmetic.
        SaeModel {
            dim_in: 2,
            dict_size: 3,
            k: 3,
            theta: 0.0,
            w_enc: array![[1.0f32, 0.0], [0.0, 1.0], [0.0, 0.0]],
            b_enc: Array1::zeros(3),
            w_dec: array![[1.0f32, 0.0], [0.0, 1.0], [1.0, 1.0]],
            b_dec: array![0.5f32, -0.5],
        }
    }

    #[test]
    fn residual_of_empty_profile_is_zero() {
        let model = toy_model();
        let empty = profile_of(&[], 3);
        let r = decode_residual(&model, &empty).unwrap();
        assert_eq!(r, Array1::<f64>::zeros(2));
    }

    #[test]
    fn residual_of_one_hot_profile_is_scaled_decoder_row() {
        let model = toy_model();
        let one_hot = profile_of(&[(2, 2.5)], 3);
        let r = decode_residual(&model, &one_hot).unwrap();
        assert_eq!(r, array![2.5, 2.5]);
        assert!(decode_residual(&model, &profile_of(&[], 7)).is_err());
    }

    #[test]
    fn residual_matches_dense_decode_minus_bias() {
        let model = toy_model();
        let profile = profile_of(&[(0, 1.5), (1, 0.25), (2, 3.0)], 3);
        let r = decode_residual(&model, &profile).unwrap();

        let mut dense = Array2::<f32>::zeros((1, 3));
        for (&j, &v) in &profile.values {
            dense[[0, j]] = v as f32;
        }
        let decoded = sae::decode(&model, dense.view()).unwrap();
        for d in 0..2 {
            let oracle = decoded[[0, d]] as f64 - model.b_dec[d] as f64;
            assert!((r[d] - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn steer_hand_cases() {
        let content = array![1.0f64, 0.0];
        let residual = array![0.0f64, 1.0];
        let out = steer(content.view(), residual.view(), 2.0).unwrap();
        assert_eq!(out.steered, array![1.0, 2.0]);
        assert_eq!(out.content, content);
        assert_eq!(out.alpha, 2.0);

        let id = steer(content.view(), residual.view(), 0.0).unwrap();
        assert_eq!(id.steered, content);
        let zero = steer(content.view(), Array1::zeros(2).view(), 2.0).unwrap();
        assert_eq!(zero.steered, content);
        assert!(steer(content.view(), Array1::zeros(3).view(), 1.0).is_err());
    }

    #[test]
    fn steering_gain_is_additive() {
        let content = array![0.5f64, -1.0, 2.0];
        let residual = array![1.0f64, 0.25, -0.5];
        let a = steer(content.view(), residual.view(), 0.7).unwrap();
        let b = steer(Array1::zeros(3).view(), residual.view(), 1.3).unwrap();
        let combined = steer(content.view(), residual.view(), 2.0).unwrap();
        for d in 0..3 {
            assert!((a.steered[d] + b.steered[d] - combined.steered[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_concept_takes_column_max() {
        let codes = matrix(vec![vec![0.0, 1.0], vec![3.0, 0.5], vec![1.0, 0.0]]);
        let profile = single_concept_profile(0, &codes).unwrap();
        assert_eq!(profile.values, BTreeMap::from([(0, 3.0)]));
        // Rows 1 and 2 fire; row 0 does not.
        assert_eq!(profile.ref_ids, vec!["ref-1", "ref-2"]);
        assert_eq!(profile.presence_threshold, 1.0);
        assert_eq!(profile.strength, 1.0);
    }

    #[test]
    fn single_concept_inert_column_is_an_error() {
        let codes = matrix(vec![vec![0.0, 1.0], vec![0.0, 2.0]]);
        let err = single_concept_profile(0, &codes).unwrap_err();
        assert!(err.to_string().contains("no observed activation"));
        assert!(single_concept_profile(5, &codes).is_err());

        let single = matrix(vec![vec![0.0, 7.0]]);
        let p = single_concept_profile(1, &single).unwrap();
        assert_eq!(p.values.get(&1), Some(&7.0));
    }

    #[test]
    fn collect_codes_carries_ids_and_matches_per_row_encode() {
        let model = toy_model();
        let data = array![[0.5f32, -0.7], [1.5, 2.0], [0.0, 0.0]];
        let refs = EmbeddingDataset::with_generated_ids(data.clone(), "img").unwrap();
        let codes = collect_codes(&model, &refs, InferenceMode::TopK).unwrap();
        assert_eq!(codes.ref_ids(), refs.ids().as_slice());

        for i in 0..3 {
            let row = data.row(i).insert_axis(ndarray::Axis(0));
            let z = sae::encode_pre(&model, row.view()).unwrap();
            let sparse = sae::topk_per_sample(z.row(0), model.k);
            for j in 0..3 {
                assert_eq!(codes.codes()[[i, j]], sparse[j], "row {i} concept {j}");
            }
        }

        let empty = EmbeddingDataset::with_generated_ids(Array2::zeros((0, 2)), "img").unwrap();
        let none = collect_codes(&model, &empty, InferenceMode::TopK).unwrap();
        assert_eq!(none.count(), 0);
        assert_eq!(none.dict_size(), 3);
    }

    #[test]
    fn profile_file_round_trip_and_field_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("style.profile.json");
        let mut profile = profile_of(&[(2, 1.5), (7, 0.25)], 16);
        profile.ref_ids = vec!["a".into(), "b".into()];
        write_profile(&profile, &path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"dict_size":16,"presence_threshold":0.6,"strength":5.0,"#));
        assert!(text.contains(r#""values":[[2,1.5],[7,0.25]]"#));

        let back = read_profile(&path).unwrap();
        assert_eq!(back, profile);
    }

    #[test]
    fn profile_reader_rejects_invalid_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");

        // Unsorted concept indices.
        std::fs::write(&path, r#"{"dict_size":4,"presence_threshold":0.6,"strength":5.0,"ref_ids":[],"values":[[2,1.0],[1,1.0]]}"#).unwrap();
        assert!(read_profile(&path).is_err());

        // Duplicate concept index.
        std::fs::write(&path, r#"{"dict_size":4,"presence_threshold":0.6,"strength":5.0,"ref_ids":[],"values":[[1,1.0],[1,2.0]]}"#).unwrap();
        assert!(read_profile(&path).is_err());

        // Nonpositive value.
        std::fs::write(&path, r#"{"dict_size":4,"presence_threshold":0.6,"strength":5.0,"ref_ids":[],"values":[[1,0.0]]}"#).unwrap();
        assert!(read_profile(&path).is_err());

        // Concept outside the dictionary.
        std::fs::write(&path, r#"{"dict_size":4,"presence_threshold":0.6,"strength":5.0,"ref_ids":[],"values":[[9,1.0]]}"#).unwrap();
        assert!(read_profile(&path).is_err());

        // Threshold outside (0, 1].
        std::fs::write(
            &path,
            r#"{"dict_size":4,"presence_threshold":0.0,"strength":5.0,"ref_ids":[],"values":[]}"#,
        )
        .unwrap();
        assert!(read_profile(&path).is_err());

        // Not JSON at all.
        std::fs::write(&path, "model took the weekend off").unwrap();
        assert!(read_profile(&path).is_err());
    }

    #[test]
    fn defaults_match_configuration() {
        assert_eq!(DEFAULT_PRESENCE_THRESHOLD, 0.6);
        assert_eq!(DEFAULT_STRENGTH, 5.0);
        assert_eq!(DEFAULT_ALPHA, 2.0);
        assert_eq!(SINGLE_CONCEPT_ALPHA_RANGE, (0.5, 3.5));
    }
}
