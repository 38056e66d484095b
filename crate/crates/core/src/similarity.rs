//! Patch self-similarity per attention component, the weighted ensemble over
//! q/k/v, head feature flattening and per-patch saliency.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::HeadId;
use crate::store::{ActivationDump, Component};
use crate::tensor::{self, Matrix};

pub const DEFAULT_TAU: f32 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapKind {
    Query,
    Key,
    Value,
    Ensemble,
}

impl From<Component> for MapKind {
    fn from(c: Component) -> Self {
        match c {
            Component::Query => MapKind::Query,
            Component::Key => MapKind::Key,
            Component::Value => MapKind::Value,
        }
    }
}

/// Row-stochastic `N × N` patch similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    kind: MapKind,
    matrix: Matrix,
}

impl SimilarityMap {
    pub fn new(kind: MapKind, matrix: Matrix) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::ShapeMismatch(format!(
                "similarity map must be square, got {}x{}",
                matrix.rows(),
                matrix.cols()
            )));
        }
        if matrix.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        Ok(Self { kind, matrix })
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn n_patches(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub w_q: f64,
    pub w_k: f64,
    pub w_v: f64,
}

impl Default for EnsembleWeights {
    fn default() -> Self {
        Self::uniform()
    }
}

impl EnsembleWeights {
    pub fn uniform() -> Self {
        Self {
            w_q: 1.0 / 3.0,
            w_k: 1.0 / 3.0,
            w_v: 1.0 / 3.0,
        }
    }

    pub fn new(w_q: f64, w_k: f64, w_v: f64) -> Result<Self> {
        let w = Self { w_q, w_k, w_v };
        if [w_q, w_k, w_v].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "ensemble weights must be nonnegative, got {w:?}"
            )));
        }
        if (w_q + w_k + w_v - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "ensemble weights must sum to 1, got {}",
                w_q + w_k + w_v
            )));
        }
        Ok(w)
    }

    /// Rescales nonnegative weights so they sum to exactly one (e.g. 0.33 × 3).
    pub fn normalized(w_q: f64, w_k: f64, w_v: f64) -> Result<Self> {
        let sum = w_q + w_k + w_v;
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "ensemble weights must have a positive sum, got {sum}"
            )));
        }
        Self::new(w_q / sum, w_k / sum, w_v / sum)
            .or_else(|_| Self::new(w_q / sum, w_k / sum, 1.0 - w_q / sum - w_k / sum))
    }

    pub fn weight(&self, c: Component) -> f64 {
        match c {
            Component::Query => self.w_q,
            Component::Key => self.w_k,
            Component::Value => self.w_v,
        }
    }
}

/// `softmax(r̃ r̃ᵀ / τ)` row-wise, where `r̃` has unit-norm rows.
pub fn component_similarity(r: &Matrix, tau: f32) -> Result<SimilarityMap> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    let unit = tensor::l2_normalize_rows(r)?;
    let mut sim = tensor::gram(&unit);
    for i in 0..sim.rows() {
        tensor::softmax_in_place(sim.row_mut(i), tau);
    }
    SimilarityMap::new(MapKind::Query, sim)
}

fn component_map(r: &Matrix, tau: f32, kind: MapKind) -> Result<SimilarityMap> {
    let mut m = component_similarity(r, tau)?;
    m.kind = kind;
    Ok(m)
}

/// Entrywise `w_q A_q + w_k A_k + w_v A_v`.
pub fn ensemble(
    a_q: &SimilarityMap,
    a_k: &SimilarityMap,
    a_v: &SimilarityMap,
    w: &EnsembleWeights,
) -> Result<SimilarityMap> {
    let n = a_q.n_patches();
    if a_k.n_patches() != n || a_v.n_patches() != n {
        return Err(Error::ShapeMismatch(format!(
            "ensemble over maps of size {}, {}, {}",
            n,
            a_k.n_patches(),
            a_v.n_patches()
        )));
    }
    let data = a_q
        .matrix
        .data()
        .iter()
        .zip(a_k.matrix.data())
        .zip(a_v.matrix.data())
        .map(|((&q, &k), &v)| (w.w_q * q as f64 + w.w_k * k as f64 + w.w_v * v as f64) as f32)
        .collect();
    SimilarityMap::new(MapKind::Ensemble, Matrix::new(n, n, data)?)
}

/// Per-component maps of one head, in q, k, v order.
pub fn head_component_maps(
    dump: &ActivationDump,
    head: HeadId,
    tau: f32,
) -> Result<[SimilarityMap; 3]> {
    let q = component_map(dump.tensor(head, Component::Query), tau, MapKind::Query)?;
    let k = component_map(dump.tensor(head, Component::Key), tau, MapKind::Key)?;
    let v = component_map(dump.tensor(head, Component::Value), tau, MapKind::Value)?;
    Ok([q, k, v])
}

/// Ensemble map of one head of one dump.
pub fn head_ensemble(
    dump: &ActivationDump,
    head: HeadId,
    tau: f32,
    weights: &EnsembleWeights,
) -> Result<SimilarityMap> {
    let [q, k, v] = head_component_maps(dump, head, tau)?;
    ensemble(&q, &k, &v, weights)
}

/// Row-major flattening into a length `N²` feature vector.
pub fn flatten_head_feature(a_ens: &SimilarityMap) -> Vec<f32> {
    a_ens.matrix.data().to_vec()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Vec<f32>,
}

impl SaliencyMap {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.grid_w + col]
    }
}

/// Column-mean saliency, min–max normalized to `[0, 1]`, optionally inverted.
/// A constant map yields all zeros.
pub fn saliency(
    a: &SimilarityMap,
    grid_h: usize,
    grid_w: usize,
    invert: bool,
) -> Result<SaliencyMap> {
    if grid_h * grid_w != a.n_patches() {
        return Err(Error::InconsistentGrid(format!(
            "{} patches on a {grid_h}x{grid_w} grid",
            a.n_patches()
        )));
    }
    let raw = a.matrix.col_means();
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = if max > min {
        raw.iter()
            .map(|&s| {
                let v = (s - min) / (max - min);
                (if invert { 1.0 - v } else { v }) as f32
            })
            .collect()
    } else {
        vec![0.0; raw.len()]
    };
    Ok(SaliencyMap {
        grid_h,
        grid_w,
        values,
    })
}

/// Mean of entries with both endpoints inside `mask`, and of entries with
/// exactly one endpoint inside.
pub fn within_cross_means(matrix: &Matrix, mask: &[bool]) -> (f64, f64) {
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for (i, row) in matrix.row_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            match (mask[i], mask[j]) {
                (true, true) => {
                    within += v as f64;
                    nw += 1;
                }
                (true, false) | (false, true) => {
                    cross += v as f64;
                    nc += 1;
                }
                _ => {}
            }
        }
    }
    (within / nw.max(1) as f64, cross / nc.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn sim(rows: &[&[f32]]) -> SimilarityMap {
        SimilarityMap::new(MapKind::Ensemble, mat(rows)).unwrap()
    }

    /// Independent scalar route: two logits, softmax by hand.
    fn two_way_softmax(a: f64, b: f64) -> (f64, f64) {
        let ea = a.exp();
        let eb = b.exp();
        (ea / (ea + eb), eb / (ea + eb))
    }

    #[test]
    fn single_patch_is_one() {
        let out = component_similarity(&mat(&[&[0.3, -2.0, 1.0]]), 60.0).unwrap();
        assert_eq!(out.matrix().data(), &[1.0]);
    }

    #[test]
    fn identical_rows_are_uniform() {
        let out = component_similarity(&mat(&[&[1.0, 2.0], &[2.0, 4.0]]), 1.0).unwrap();
        for &v in out.matrix().data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn orthogonal_rows_match_scalar_oracle() {
        let out = component_similarity(&mat(&[&[1.0, 0.0], &[0.0, 1.0]]), 1.0).unwrap();
        let (hi, lo) = two_way_softmax(1.0, 0.0);
        let m = out.matrix();
        assert!((m.get(0, 0) as f64 - hi).abs() < 1e-4);
        assert!((m.get(0, 1) as f64 - lo).abs() < 1e-4);
        assert!((m.get(1, 0) as f64 - lo).abs() < 1e-4);
        assert!((m.get(1, 1) as f64 - hi).abs() < 1e-4);
        assert!((hi - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn ensemble_examples() {
        let a = sim(&[&[0.2, 0.8], &[0.6, 0.4]]);
        let b = sim(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let out = ensemble(&a, &b, &b, &EnsembleWeights::new(1.0, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!(out.matrix(), a.matrix());
        assert_eq!(out.kind(), MapKind::Ensemble);

        let w = EnsembleWeights::new(0.2, 0.5, 0.3).unwrap();
        let out = ensemble(&a, &a, &a, &w).unwrap();
        for (x, y) in out.matrix().data().iter().zip(a.matrix().data()) {
            assert!((x - y).abs() < 1e-7);
        }

        let eye = sim(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let out = ensemble(&eye, &b, &b, &EnsembleWeights::uniform()).unwrap();
        let expect = [2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0];
        for (x, y) in out.matrix().data().iter().zip(expect) {
            assert!((*x as f64 - y).abs() < 1e-6);
        }
    }

    #[test]
    fn ensemble_rejects_mismatched_sizes() {
        let a = sim(&[&[1.0]]);
        let b = sim(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!(ensemble(&a, &b, &b, &EnsembleWeights::uniform()).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(EnsembleWeights::new(0.33, 0.33, 0.33).is_err());
        assert!(EnsembleWeights::new(-0.5, 1.0, 0.5).is_err());
        let w = EnsembleWeights::normalized(0.33, 0.33, 0.33).unwrap();
        assert!((w.w_q + w.w_k + w.w_v - 1.0).abs() <= 1e-9);
        assert!(EnsembleWeights::normalized(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn flatten_examples() {
        let m = sim(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let f = flatten_head_feature(&m);
        assert_eq!(f, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(Matrix::new(2, 2, f).unwrap(), *m.matrix());
        assert_eq!(flatten_head_feature(&sim(&[&[1.0]])), vec![1.0]);
    }

    #[test]
    fn saliency_degenerate_and_blocks() {
        let u = sim(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert_eq!(saliency(&u, 1, 2, true).unwrap().values, vec![0.0, 0.0]);

        // blocks {0,1} and {2,3,4}; column means differ by block
        let mut rows = vec![vec![0.0f32; 5]; 5];
        for i in 0..5 {
            for j in 0..5 {
                let same = (i < 2) == (j < 2);
                rows[i][j] = if i < 2 {
                    if same { 0.4 } else { 0.2 / 3.0 }
                } else if same {
                    0.3
                } else {
                    0.05
                };
            }
        }
        let m = SimilarityMap::new(MapKind::Ensemble, Matrix::from_rows(&rows).unwrap()).unwrap();
        let plain = saliency(&m, 1, 5, false).unwrap();
        let inv = saliency(&m, 1, 5, true).unwrap();
        // column means by hand: block A cols = (0.4*2 + 0.05*3)/5, block B cols = (0.2/3*2 + 0.3*3)/5
        let col_a = (0.8 + 0.15) / 5.0;
        let col_b = (0.4 / 3.0 + 0.9) / 5.0;
        assert!(col_b > col_a);
        assert_eq!(&plain.values[..2], &[0.0, 0.0]);
        assert_eq!(&plain.values[2..], &[1.0, 1.0, 1.0]);
        assert_eq!(&inv.values[..2], &[1.0, 1.0]);
        assert_eq!(&inv.values[2..], &[0.0, 0.0, 0.0]);

        let argmax_inv = argmax(&inv.values);
        let argmin_plain = argmin(&plain.values);
        assert_eq!(argmax_inv, argmin_plain);
        assert!(saliency(&m, 2, 2, false).is_err());
    }

    fn argmax(v: &[f32]) -> usize {
        v.iter()
            .enumerate()
            .fold((0, f32::MIN), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
            .0
    }

    fn argmin(v: &[f32]) -> usize {
        v.iter()
            .enumerate()
            .fold((0, f32::MAX), |b, (i, &x)| if x < b.1 { (i, x) } else { b })
            .0
    }

    fn rmat() -> impl Strategy<Value = Matrix> {
        (1usize..24, 1usize..10).prop_flat_map(|(n, d)| {
            proptest::collection::vec(-3.0f32..3.0, n * d)
                .prop_map(move |v| Matrix::new(n, d, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn similarity_is_row_stochastic(r in rmat(), tau_idx in 0usize..4) {
            let tau = [0.03f32, 1.0, 60.0, 100.0][tau_idx];
            let m = component_similarity(&r, tau).unwrap();
            prop_assert!(m.matrix().all_finite());
            for s in m.matrix().row_sums() {
                prop_assert!((s - 1.0).abs() < 1e-5);
            }
            prop_assert!(m.matrix().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn larger_tau_never_widens_rows(r in rmat(), t1 in 0.05f32..50.0, factor in 1.0f32..10.0) {
            let a = component_similarity(&r, t1).unwrap();
            let b = component_similarity(&r, t1 * factor).unwrap();
            for (ra, rb) in a.matrix().row_iter().zip(b.matrix().row_iter()) {
                let spread = |row: &[f32]| {
                    row.iter().copied().fold(f32::MIN, f32::max)
                        - row.iter().copied().fold(f32::MAX, f32::min)
                };
                prop_assert!(spread(rb) <= spread(ra) + 1e-6);
            }
        }

        #[test]
        fn ensemble_stays_row_stochastic(a in rmat(), wq in 0.0f64..1.0, wk in 0.0f64..1.0, wv in 0.0f64..1.0) {
            prop_assume!(wq + wk + wv > 1e-3);
            let q = component_similarity(&a, 1.0).unwrap();
            let k = component_similarity(&a, 5.0).unwrap();
            let v = component_similarity(&a, 60.0).unwrap();
            let w = EnsembleWeights::normalized(wq, wk, wv).unwrap();
            let e = ensemble(&q, &k, &v, &w).unwrap();
            for s in e.matrix().row_sums() {
                prop_assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}
