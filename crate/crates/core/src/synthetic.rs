//! Seeded synthetic activation dumps with planted object-centric heads.
//!
//! For a planted head every component places the patch tokens inside the
//! object box near one center and the rest near the opposite center.
//! Distractor heads do the same for a fixed positional pattern that ignores
//! the object. All remaining heads draw tokens from an isotropic Gaussian.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::HeadId;
use crate::store::{ActivationDump, DumpHeader, PlantedGroundTruth};
use crate::tensor::{self, Matrix};

pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub layers: usize,
    pub heads: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub head_dim: usize,
    pub patch_size: usize,
    /// `(row_min, col_min, row_max, col_max)` in grid cells, inclusive.
    pub object_box: [usize; 4],
    pub planted_heads: Vec<HeadId>,
    /// Extra head groups, each sharing one object-independent spatial pattern.
    pub distractor_groups: Vec<Vec<HeadId>>,
    pub noise_sigma: f64,
    /// Temperature used by the generation-time objectness check.
    pub check_tau: f32,
}

impl SyntheticSpec {
    pub fn header(&self) -> DumpHeader {
        DumpHeader::for_grid(
            self.layers,
            self.heads,
            self.head_dim,
            self.grid_h,
            self.grid_w,
            self.patch_size,
        )
    }

    /// Distinct head behaviors: the object group, each distractor group, and
    /// the unstructured background when any head is left over.
    pub fn behavior_groups(&self) -> usize {
        let structured = self.planted_heads.len()
            + self.distractor_groups.iter().map(Vec::len).sum::<usize>();
        1 + self.distractor_groups.len() + usize::from(structured < self.layers * self.heads)
    }

    fn validate(&self) -> Result<()> {
        self.header().validate()?;
        let [r0, c0, r1, c1] = self.object_box;
        if r0 > r1 || c0 > c1 || r1 >= self.grid_h || c1 >= self.grid_w {
            return Err(Error::DegenerateBox(format!(
                "{:?} on a {}x{} grid",
                self.object_box, self.grid_h, self.grid_w
            )));
        }
        if (r1 - r0 + 1) * (c1 - c0 + 1) == self.grid_h * self.grid_w {
            return Err(Error::DegenerateBox("box covers the whole grid".into()));
        }
        if self.planted_heads.is_empty() {
            return Err(Error::InvalidPlanted("no planted heads".into()));
        }
        let header = self.header();
        let mut seen = std::collections::BTreeSet::new();
        for h in self
            .planted_heads
            .iter()
            .chain(self.distractor_groups.iter().flatten())
        {
            if !header.contains(*h) {
                return Err(Error::InvalidPlanted(format!(
                    "head {h} outside {}x{}",
                    self.layers, self.heads
                )));
            }
            if !seen.insert(*h) {
                return Err(Error::InvalidPlanted(format!("head {h} listed twice")));
            }
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Planted set spanning two layers: two thirds of the final layer plus one
/// third of the layer two below it.
pub fn default_planted(layers: usize, heads: usize) -> Vec<HeadId> {
    let last = layers - 1;
    let mut out: Vec<HeadId> = (0..(2 * heads).div_ceil(3))
        .map(|h| HeadId::new(last, h))
        .collect();
    if layers >= 3 {
        out.extend((0..(heads / 3).max(1)).map(|h| HeadId::new(last - 2, h)));
    }
    out.sort();
    out
}

/// Membership mask of distractor pattern `g`.
fn distractor_mask(g: usize, grid_h: usize, grid_w: usize) -> Vec<bool> {
    (0..grid_h * grid_w)
        .map(|p| {
            let (r, c) = (p / grid_w, p % grid_w);
            match g % 4 {
                0 => c < grid_w.div_ceil(2),
                1 => r < grid_h.div_ceil(2),
                2 => (r / 2 + c / 2) % 2 == 0,
                _ => r + c < (grid_h + grid_w) / 2,
            }
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn two_center_tokens(rng: &mut ChaCha8Rng, mask: &[bool], d: usize, sigma: f64) -> Matrix {
    let u = unit_direction(rng, d);
    // centers at ±a·u keep the separation 2a at least 6σ
    let a = 1f64.max(3.0 * sigma);
    let mut data = Vec::with_capacity(mask.len() * d);
    for &inside in mask {
        let sign = if inside { a } else { -a };
        data.extend(u.iter().map(|&c| (sign * c + sigma * gaussian(rng)) as f32));
    }
    Matrix::new(mask.len(), d, data).unwrap()
}

fn isotropic_tokens(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    Matrix::new(n, d, (0..n * d).map(|_| gaussian(rng) as f32).collect()).unwrap()
}

/// Mean ensemble-map entry (uniform weights) over pairs of patches both in `mask`.
fn within_mask_similarity(dump: &ActivationDump, head: HeadId, mask: &[bool], tau: f32) -> Result<f64> {
    let inside: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let mut total = 0.0;
    for c in crate::store::Component::ALL {
        let unit = tensor::l2_normalize_rows(dump.tensor(head, c))?;
        for &i in &inside {
            let mut row: Vec<f32> = unit
                .row_iter()
                .map(|rj| {
                    unit.row(i)
                        .iter()
                        .zip(rj)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>() as f32
                })
                .collect();
            tensor::softmax_in_place(&mut row, tau);
            total += inside.iter().map(|&j| row[j] as f64).sum::<f64>() / 3.0;
        }
    }
    Ok(total / (inside.len() * inside.len()) as f64)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(ActivationDump, PlantedGroundTruth)> {
    spec.validate()?;
    let header = spec.header();
    let gt = PlantedGroundTruth {
        object_box_patches: spec.object_box,
        planted_heads: {
            let mut p = spec.planted_heads.clone();
            p.sort();
            p
        },
    };
    let object_mask: Vec<bool> = (0..header.patches)
        .map(|p| gt.contains_patch(p / spec.grid_w, p % spec.grid_w))
        .collect();
    let mut role = vec![None::<usize>; spec.layers * spec.heads];
    for g in 0..spec.distractor_groups.len() {
        for h in &spec.distractor_groups[g] {
            role[h.layer * spec.heads + h.head] = Some(g);
        }
    }
    let distractor_masks: Vec<Vec<bool>> = (0..spec.distractor_groups.len())
        .map(|g| distractor_mask(g, spec.grid_h, spec.grid_w))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tensors = Vec::with_capacity(header.tensor_count());
    for head in header.head_ids() {
        let planted = gt.planted_heads.binary_search(&head).is_ok();
        let group = role[head.layer * spec.heads + head.head];
        for _ in 0..3 {
            let m = if planted {
                two_center_tokens(&mut rng, &object_mask, spec.head_dim, spec.noise_sigma)
            } else if let Some(g) = group {
                two_center_tokens(&mut rng, &distractor_masks[g], spec.head_dim, spec.noise_sigma)
            } else {
                isotropic_tokens(&mut rng, header.patches, spec.head_dim)
            };
            tensors.push(m);
        }
    }
    let dump = ActivationDump::new(header, tensors)?;

    let mut weakest_planted = f64::INFINITY;
    let mut strongest_other = f64::NEG_INFINITY;
    for head in header.head_ids() {
        let s = within_mask_similarity(&dump, head, &object_mask, spec.check_tau)?;
        if gt.planted_heads.binary_search(&head).is_ok() {
            weakest_planted = weakest_planted.min(s);
        } else {
            strongest_other = strongest_other.max(s);
        }
    }
    if weakest_planted <= strongest_other {
        return Err(Error::GenerationCheck(format!(
            "weakest planted head {weakest_planted:.6e} <= strongest other head {strongest_other:.6e}"
        )));
    }
    Ok((dump, gt))
}

/// Random box with sides in `[max(2, g/5), 0.6·g]` covering at most 40% of the grid.
pub fn random_box(rng: &mut impl Rng, grid_h: usize, grid_w: usize) -> [usize; 4] {
    let side_range = |g: usize| {
        let lo = (g / 5).max(2).min(g.saturating_sub(1)).max(1);
        let hi = ((g * 3) / 5).max(lo);
        (lo, hi)
    };
    let (hlo, hhi) = side_range(grid_h);
    let (wlo, whi) = side_range(grid_w);
    let max_area = ((grid_h * grid_w) as f64 * 0.4).floor().max(1.0) as usize;
    for _ in 0..1000 {
        let bh = rng.random_range(hlo..=hhi);
        let bw = rng.random_range(wlo..=whi);
        if bh * bw > max_area {
            continue;
        }
        let r0 = rng.random_range(0..=grid_h - bh);
        let c0 = rng.random_range(0..=grid_w - bw);
        return [r0, c0, r0 + bh - 1, c0 + bw - 1];
    }
    [0, 0, hlo - 1, wlo - 1]
}

/// Parameters shared by every image of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub images: usize,
    pub layers: usize,
    pub heads: usize,
    pub grid: usize,
    pub head_dim: usize,
    pub patch_size: usize,
    pub planted_heads: Vec<HeadId>,
    pub distractor_groups: Vec<Vec<HeadId>>,
    pub noise_sigma: f64,
}

impl CorpusSpec {
    pub fn new(seed: u64, images: usize, grid: usize) -> Self {
        Self {
            seed,
            images,
            layers: 12,
            heads: 12,
            grid,
            head_dim: 16,
            patch_size: 16,
            planted_heads: default_planted(12, 12),
            distractor_groups: Vec::new(),
            noise_sigma: DEFAULT_NOISE_SIGMA,
        }
    }

    /// Per-image specs: a fresh random box and seed for each image.
    pub fn image_specs(&self) -> Vec<SyntheticSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.images)
            .map(|_| {
                let object_box = random_box(&mut rng, self.grid, self.grid);
                SyntheticSpec {
                    seed: rng.random(),
                    layers: self.layers,
                    heads: self.heads,
                    grid_h: self.grid,
                    grid_w: self.grid,
                    head_dim: self.head_dim,
                    patch_size: self.patch_size,
                    object_box,
                    planted_heads: self.planted_heads.clone(),
                    distractor_groups: self.distractor_groups.clone(),
                    noise_sigma: self.noise_sigma,
                    check_tau: crate::similarity::DEFAULT_TAU,
                }
            })
            .collect()
    }

    pub fn generate(&self) -> Result<Vec<(ActivationDump, PlantedGroundTruth)>> {
        use rayon::prelude::*;
        self.image_specs().par_iter().map(generate_synthetic).collect()
    }
}
