//! Normalized-cut object discovery on the patch-affinity graph built from
//! the selected heads.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AffinityScale, PipelineConfig};
use crate::error::{Error, Result};
use crate::heads::HeadSelection;
use crate::similarity::{head_ensemble, saliency, MapKind, SaliencyMap, SimilarityMap};
use crate::spectral::symmetric_eigen;
use crate::store::{ActivationDump, DumpHeader};
use crate::tensor::Matrix;

/// Mean ensemble map over the selected heads, symmetrized as `(M + Mᵀ) / 2`.
pub fn aggregate_affinity(
    dump: &ActivationDump,
    selection: &HeadSelection,
    cfg: &PipelineConfig,
) -> Result<SimilarityMap> {
    if selection.heads.is_empty() {
        return Err(Error::EmptySelection);
    }
    let header = dump.header();
    if let Some(h) = selection.heads.iter().find(|h| !header.contains(**h)) {
        return Err(Error::HeadOutOfBounds {
            layer: h.layer,
            head: h.head,
        });
    }
    let n = header.patches;
    let maps = selection
        .heads
        .par_iter()
        .map(|&h| head_ensemble(dump, h, cfg.tau, &cfg.weights))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![0.0f64; n * n];
    for m in &maps {
        for (a, &v) in acc.iter_mut().zip(m.matrix().data()) {
            *a += v as f64;
        }
    }
    let scale = 1.0 / maps.len() as f64;
    let mut data = vec![0.0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = ((acc[i * n + j] + acc[j * n + i]) * 0.5 * scale) as f32;
        }
    }
    SimilarityMap::new(MapKind::Ensemble, Matrix::new(n, n, data)?)
}

/// Maps a temperature-softmax affinity back to a cosine-like scale,
/// `1 + τ·ln(S_ij / sqrt(S_ii·S_jj))` on the symmetrized map, clamped to `[-1, 1]`.
pub fn affinity_to_cosine(sim: &SimilarityMap, tau: f32) -> Matrix {
    let m = sim.matrix();
    let n = m.rows();
    let tau = tau as f64;
    let tiny = f64::MIN_POSITIVE;
    let log_diag: Vec<f64> = (0..n).map(|i| (m.get(i, i) as f64).max(tiny).ln()).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let sij = 0.5 * (m.get(i, j) as f64 + m.get(j, i) as f64);
            let lij = sij.max(tiny).ln();
            let v = 1.0 + tau * (lij - 0.5 * (log_diag[i] + log_diag[j]));
            out.set(i, j, v.clamp(-1.0, 1.0) as f32);
        }
    }
    out
}

/// Binarized patch graph: unit weight where the similarity reaches `tau_cut`,
/// `epsilon` elsewhere, unit diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityGraph {
    pub n: usize,
    pub weights: Matrix,
    pub tau_cut: f64,
    pub epsilon: f64,
}

impl AffinityGraph {
    pub fn degrees(&self) -> Vec<f64> {
        self.weights.row_sums()
    }

    pub fn is_symmetric(&self, tol: f32) -> bool {
        (0..self.n).all(|i| (i + 1..self.n).all(|j| {
            (self.weights.get(i, j) - self.weights.get(j, i)).abs() <= tol
        }))
    }
}

pub fn build_graph(sim: &Matrix, tau_cut: f64, epsilon: f64) -> AffinityGraph {
    let n = sim.rows();
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = if i == j {
                1.0
            } else {
                let s = 0.5 * (sim.get(i, j) as f64 + sim.get(j, i) as f64);
                if s >= tau_cut {
                    1.0
                } else {
                    epsilon
                }
            };
            w.set(i, j, v as f32);
        }
    }
    AffinityGraph {
        n,
        weights: w,
        tau_cut,
        epsilon,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bipartition {
    /// Second-smallest generalized eigenvalue of `(D - W) x = λ D x`.
    pub eigenvalue: f64,
    /// Unit-norm eigenvector, signed so its largest-magnitude entry is positive.
    pub fiedler: Vec<f64>,
    /// `true` where the fiedler entry is `>= 0`.
    pub partition: Vec<bool>,
}

pub fn fiedler_bipartition(g: &AffinityGraph) -> Result<Bipartition> {
    if g.n < 2 {
        return Err(Error::TooFewNodes(g.n));
    }
    let n = g.n;
    let deg = g.degrees();
    if let Some(i) = deg.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::NonPositiveDegree(i));
    }
    debug_assert!(g.is_symmetric(1e-6));
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    // symmetric normalized Laplacian I - D^-1/2 W D^-1/2
    let mut lap = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let w = g.weights.get(i, j) as f64 * inv_sqrt[i] * inv_sqrt[j];
            lap[i * n + j] = if i == j { 1.0 - w } else { -w };
        }
    }
    let eig = symmetric_eigen(&lap, n)?;
    // Unit vector in span{v0, v1} orthogonal to the trivial direction D^1/2·1;
    // also separates components when the null space is degenerate.
    let trivial: Vec<f64> = {
        let t: Vec<f64> = deg.iter().map(|d| d.sqrt()).collect();
        let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        t.into_iter().map(|v| v / norm).collect()
    };
    let v0 = eig.vector(0);
    let v1 = eig.vector(1);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (a0, a1) = (dot(&v0, &trivial), dot(&v1, &trivial));
    let mut y: Vec<f64> = v0.iter().zip(&v1).map(|(p, q)| a1 * p - a0 * q).collect();
    if dot(&y, &y) < 1e-12 {
        y = v1;
    }
    let mut x: Vec<f64> = y.iter().zip(&inv_sqrt).map(|(a, b)| a * b).collect();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let peak = x
        .iter()
        .copied()
        .fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
    let sign = if peak < 0.0 { -1.0 } else { 1.0 };
    x.iter_mut().for_each(|v| *v *= sign / norm);
    let partition = x.iter().map(|&v| v >= 0.0).collect();
    Ok(Bipartition {
        eigenvalue: eig.values[1],
        fiedler: x,
        partition,
    })
}

/// Normalized cut `cut(A,B)/vol(A) + cut(A,B)/vol(B)`; infinite for a trivial split.
pub fn ncut_value(g: &AffinityGraph, side: &[bool]) -> f64 {
    let (mut cut, mut vol_a, mut vol_b) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..g.n {
        for j in 0..g.n {
            let w = g.weights.get(i, j) as f64;
            if side[i] {
                vol_a += w;
            } else {
                vol_b += w;
            }
            if side[i] && !side[j] {
                cut += w;
            }
        }
    }
    if vol_a == 0.0 || vol_b == 0.0 {
        return f64::INFINITY;
    }
    cut / vol_a + cut / vol_b
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscoveryResult {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Row-major, largest connected foreground component only.
    pub foreground_mask: Vec<bool>,
    /// `[x_min, y_min, x_max, y_max)` in pixels.
    pub bbox_pixels: [usize; 4],
    pub fiedler: Vec<f64>,
    pub saliency: SaliencyMap,
}

/// 4-connected components of `mask`, in raster order of their first cell.
pub fn connected_components(mask: &[bool], grid_h: usize, grid_w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (r, c) = (p / grid_w, p % grid_w);
            let mut push = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                push(p - grid_w);
            }
            if r + 1 < grid_h {
                push(p + grid_w);
            }
            if c > 0 {
                push(p - 1);
            }
            if c + 1 < grid_w {
                push(p + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Tight pixel box of a set of grid cells.
pub fn cells_to_pixel_box(cells: &[usize], grid_w: usize, patch_size: usize) -> [usize; 4] {
    let rows = cells.iter().map(|&p| p / grid_w);
    let cols = cells.iter().map(|&p| p % grid_w);
    let (r0, r1) = (rows.clone().min().unwrap(), rows.max().unwrap());
    let (c0, c1) = (cols.clone().min().unwrap(), cols.max().unwrap());
    [
        c0 * patch_size,
        r0 * patch_size,
        (c1 + 1) * patch_size,
        (r1 + 1) * patch_size,
    ]
}

/// Foreground is the partition side holding the largest-|fiedler| entry;
/// only its largest 4-connected component is kept.
pub fn extract_foreground(
    fiedler: &[f64],
    partition: &[bool],
    sim: &SimilarityMap,
    header: &DumpHeader,
) -> Result<DiscoveryResult> {
    let (gh, gw) = (header.grid_h, header.grid_w);
    if fiedler.len() != gh * gw || partition.len() != gh * gw {
        return Err(Error::InconsistentGrid(format!(
            "{} fiedler entries on a {gh}x{gw} grid",
            fiedler.len()
        )));
    }
    let peak = fiedler
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if v.abs() > fiedler[b].abs() { i } else { b });
    let side = partition[peak];
    let mask: Vec<bool> = partition.iter().map(|&p| p == side).collect();
    let comps = connected_components(&mask, gh, gw);
    let largest = comps
        .iter()
        .fold(&comps[0], |b, c| if c.len() > b.len() { c } else { b });
    let mut foreground_mask = vec![false; gh * gw];
    for &p in largest {
        foreground_mask[p] = true;
    }
    Ok(DiscoveryResult {
        grid_h: gh,
        grid_w: gw,
        bbox_pixels: cells_to_pixel_box(largest, gw, header.patch_size),
        foreground_mask,
        fiedler: fiedler.to_vec(),
        saliency: saliency(sim, gh, gw, true)?,
    })
}

/// Edge similarities for the graph under the configured scale.
pub fn graph_similarity(sim: &SimilarityMap, cfg: &PipelineConfig) -> Matrix {
    match cfg.affinity_scale {
        AffinityScale::Cosine => affinity_to_cosine(sim, cfg.tau),
        AffinityScale::Raw => sim.matrix().clone(),
    }
}

/// Aggregation, graph construction, bipartition and box extraction for one image.
pub fn discover(
    dump: &ActivationDump,
    selection: &HeadSelection,
    cfg: &PipelineConfig,
) -> Result<DiscoveryResult> {
    let sim = aggregate_affinity(dump, selection, cfg)?;
    let graph = build_graph(&graph_similarity(&sim, cfg), cfg.tau_cut, cfg.epsilon);
    let cut = fiedler_bipartition(&graph)?;
    extract_foreground(&cut.fiedler, &cut.partition, &sim, dump.header())
}

/// One line of the predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub bbox: [f64; 4],
}
