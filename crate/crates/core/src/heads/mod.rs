//! Head clustering and object-cluster selection.
//!
//! Every head of an image is described by its flattened ensemble map; the
//! heads are clustered with k-means and the cluster holding the most
//! final-layer heads is taken as the object-centric one. Over a dataset the
//! per-image picks are folded into selection frequencies.

mod kmeans;

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::similarity::{flatten_head_feature, head_ensemble};
use crate::store::ActivationDump;

pub use kmeans::{kmeans, kmeans_best_of, ClusterAssignment, MAX_ITERATIONS, SHIFT_TOLERANCE};

/// Zero-based `(layer, head)` index; the final layer is `L - 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl From<(usize, usize)> for HeadId {
    fn from((layer, head): (usize, usize)) -> Self {
        Self { layer, head }
    }
}

impl From<HeadId> for (usize, usize) {
    fn from(h: HeadId) -> Self {
        (h.layer, h.head)
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.layer, self.head)
    }
}

impl std::str::FromStr for HeadId {
    type Err = Error;

    /// Accepts `layer,head` or `layer:head`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidPlanted(format!("cannot parse head id {s:?}"));
        let (l, h) = s.trim().split_once([',', ':']).ok_or_else(bad)?;
        Ok(HeadId::new(
            l.trim().parse().map_err(|_| bad())?,
            h.trim().parse().map_err(|_| bad())?,
        ))
    }
}

/// The object-centric head set and how it was chosen.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSelection {
    pub object_cluster: usize,
    /// Sorted layer-major.
    pub heads: Vec<HeadId>,
    /// Final-layer heads per cluster. In dataset mode clusters are aligned per
    /// image so that the object cluster is index 0 and the rest are ranked by
    /// count, then summed over images.
    pub final_layer_counts: Vec<usize>,
    /// Fraction of images in which each head landed in the object cluster.
    pub per_head_frequency: BTreeMap<HeadId, f64>,
    pub images: usize,
}

impl HeadSelection {
    pub fn frequency(&self, head: HeadId) -> f64 {
        self.per_head_frequency.get(&head).copied().unwrap_or(0.0)
    }

    pub fn contains(&self, head: HeadId) -> bool {
        self.heads.binary_search(&head).is_ok()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl Serialize for HeadSelection {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        struct Freqs<'a>(&'a BTreeMap<HeadId, f64>);
        impl Serialize for Freqs<'_> {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                let mut m = s.serialize_map(Some(self.0.len()))?;
                for (h, f) in self.0 {
                    m.serialize_entry(&h.to_string(), f)?;
                }
                m.end()
            }
        }
        let mut m = s.serialize_map(Some(5))?;
        m.serialize_entry("object_cluster", &self.object_cluster)?;
        m.serialize_entry("heads", &self.heads)?;
        m.serialize_entry("frequencies", &Freqs(&self.per_head_frequency))?;
        m.serialize_entry("final_layer_counts", &self.final_layer_counts)?;
        m.serialize_entry("images", &self.images)?;
        m.end()
    }
}

impl<'de> Deserialize<'de> for HeadSelection {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            object_cluster: usize,
            heads: Vec<HeadId>,
            #[serde(default)]
            frequencies: BTreeMap<String, f64>,
            #[serde(default)]
            final_layer_counts: Vec<usize>,
            #[serde(default)]
            images: usize,
        }
        let raw = Raw::deserialize(d)?;
        let per_head_frequency = raw
            .frequencies
            .into_iter()
            .map(|(k, v)| {
                k.parse::<HeadId>()
                    .map(|h| (h, v))
                    .map_err(serde::de::Error::custom)
            })
            .collect::<std::result::Result<_, _>>()?;
        let mut heads = raw.heads;
        heads.sort();
        heads.dedup();
        Ok(HeadSelection {
            object_cluster: raw.object_cluster,
            heads,
            final_layer_counts: raw.final_layer_counts,
            per_head_frequency,
            images: raw.images,
        })
    }
}

/// Picks the cluster with the most final-layer heads (lowest index on ties)
/// and returns all of its heads, from any layer.
pub fn select_object_cluster(
    assignment: &ClusterAssignment,
    heads: &[HeadId],
    final_layer: usize,
) -> HeadSelection {
    let mut counts = vec![0usize; assignment.k];
    for (h, &l) in heads.iter().zip(&assignment.labels) {
        if h.layer == final_layer {
            counts[l] += 1;
        }
    }
    let object_cluster = argmax_first(&counts);
    let mut selected: Vec<HeadId> = heads
        .iter()
        .zip(&assignment.labels)
        .filter(|(_, &l)| l == object_cluster)
        .map(|(h, _)| *h)
        .collect();
    selected.sort();
    let per_head_frequency = heads
        .iter()
        .zip(&assignment.labels)
        .map(|(h, &l)| (*h, if l == object_cluster { 1.0 } else { 0.0 }))
        .collect();
    HeadSelection {
        object_cluster,
        heads: selected,
        final_layer_counts: counts,
        per_head_frequency,
        images: 1,
    }
}

fn argmax_first(counts: &[usize]) -> usize {
    counts
        .iter()
        .enumerate()
        .fold((0, 0usize), |best, (i, &c)| if c > best.1 { (i, c) } else { best })
        .0
}

/// Mean over clusters of the worst `(s_i + s_j) / d_ij` ratio, where `s_i` is
/// the mean point-to-centroid distance and `d_ij` the centroid distance.
pub fn davies_bouldin(features: &[Vec<f32>], assignment: &ClusterAssignment) -> Result<f64> {
    let k = assignment.k;
    if k < 2 {
        return Err(Error::InvalidClusterCount(k));
    }
    let mut spread = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for (f, &l) in features.iter().zip(&assignment.labels) {
        spread[l] += kmeans::sq_dist(f, &assignment.centroids[l]).sqrt();
        counts[l] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidConfig(format!("cluster {empty} is empty")));
    }
    for (s, &c) in spread.iter_mut().zip(&counts) {
        *s /= c as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in (0..k).filter(|&j| j != i) {
            let d: f64 = assignment.centroids[i]
                .iter()
                .zip(&assignment.centroids[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if d == 0.0 {
                return Err(Error::DegenerateCentroids(i.min(j), i.max(j)));
            }
            worst = worst.max((spread[i] + spread[j]) / d);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Davies-Bouldin score for each candidate K (best-of-`seeds` k-means);
/// returns the scores and the minimizing K (smallest K on ties).
pub fn davies_bouldin_sweep(
    features: &[Vec<f32>],
    ks: impl IntoIterator<Item = usize>,
    seeds: &[u64],
) -> Result<(Vec<(usize, f64)>, usize)> {
    let mut scores = Vec::new();
    for k in ks {
        let a = kmeans_best_of(features, k, seeds)?;
        if a.k < 2 {
            continue;
        }
        scores.push((k, davies_bouldin(features, &a)?));
    }
    let best = scores
        .iter()
        .fold(None::<(usize, f64)>, |b, &(k, s)| match b {
            Some((_, bs)) if bs <= s => b,
            _ => Some((k, s)),
        })
        .ok_or(Error::EmptyInput("no valid K"))?
        .0;
    Ok((scores, best))
}

/// Flattened ensemble maps for every head, layer-major.
pub fn head_features(dump: &ActivationDump, cfg: &PipelineConfig) -> Result<Vec<Vec<f32>>> {
    dump.header()
        .head_ids()
        .into_par_iter()
        .map(|h| head_ensemble(dump, h, cfg.tau, &cfg.weights).map(|m| flatten_head_feature(&m)))
        .collect()
}

/// Feature extraction, clustering and object-cluster pick for one image.
pub fn analyze_image(dump: &ActivationDump, cfg: &PipelineConfig) -> Result<HeadSelection> {
    let header = dump.header();
    let heads = header.head_ids();
    if cfg.k_clusters > heads.len() {
        return Err(Error::TooManyClusters {
            k: cfg.k_clusters,
            points: heads.len(),
        });
    }
    let features = head_features(dump, cfg)?;
    let assignment = kmeans(&features, cfg.k_clusters, cfg.seed)?;
    Ok(select_object_cluster(&assignment, &heads, header.final_layer()))
}

/// Runs [`analyze_image`] on every dump and keeps heads selected in at least
/// a `theta` fraction of images.
pub fn select_over_dataset(dumps: &[ActivationDump], cfg: &PipelineConfig) -> Result<HeadSelection> {
    let first = dumps.first().ok_or(Error::EmptyDataset)?.header();
    if let Some(bad) = dumps.iter().find(|d| !d.header().same_model(first)) {
        return Err(Error::MixedGeometry(format!(
            "L={}, H={} vs L={}, H={}",
            first.layers,
            first.heads,
            bad.header().layers,
            bad.header().heads
        )));
    }
    let per_image = dumps
        .iter()
        .map(|d| analyze_image(d, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate_selections(&per_image, &first.head_ids(), cfg.theta))
}

/// Folds per-image selections (in input order) into frequencies and the
/// thresholded head set.
pub fn aggregate_selections(per_image: &[HeadSelection], heads: &[HeadId], theta: f64) -> HeadSelection {
    let n = per_image.len().max(1) as f64;
    let mut hits: BTreeMap<HeadId, usize> = heads.iter().map(|&h| (h, 0)).collect();
    let width = per_image
        .iter()
        .map(|s| s.final_layer_counts.len())
        .max()
        .unwrap_or(0);
    let mut counts = vec![0usize; width];
    let mut cluster_votes = BTreeMap::<usize, usize>::new();
    for sel in per_image {
        for h in &sel.heads {
            *hits.entry(*h).or_default() += 1;
        }
        let mut others: Vec<usize> = sel
            .final_layer_counts
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != sel.object_cluster)
            .map(|(_, &c)| c)
            .collect();
        others.sort_by(|a, b| b.cmp(a));
        counts[0] += sel.final_layer_counts[sel.object_cluster];
        for (slot, c) in counts[1..].iter_mut().zip(others) {
            *slot += c;
        }
        *cluster_votes.entry(sel.object_cluster).or_default() += 1;
    }
    let per_head_frequency: BTreeMap<HeadId, f64> =
        hits.into_iter().map(|(h, c)| (h, c as f64 / n)).collect();
    let selected = per_head_frequency
        .iter()
        .filter(|(_, &f)| f >= theta)
        .map(|(h, _)| *h)
        .collect();
    if per_image.len() == 1 {
        return HeadSelection {
            per_head_frequency,
            heads: selected,
            ..per_image[0].clone()
        };
    }
    let object_cluster = cluster_votes
        .iter()
        .fold((0, 0), |b, (&c, &v)| if v > b.1 { (c, v) } else { b })
        .0;
    HeadSelection {
        object_cluster,
        heads: selected,
        final_layer_counts: counts,
        per_head_frequency,
        images: per_image.len(),
    }
}

/// Heads selected with frequency at least `threshold`, counted per layer.
pub fn active_heads_per_layer(sel: &HeadSelection, layers: usize, threshold: f64) -> Vec<usize> {
    let mut out = vec![0; layers];
    for (h, &f) in &sel.per_head_frequency {
        if f >= threshold && h.layer < layers {
            out[h.layer] += 1;
        }
    }
    out
}
