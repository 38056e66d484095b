//! Localization and hallucination metrics: IoU, CorLoc, CHAIR and POPE.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned pixel box, half-open `[min, max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = [x_min, y_min, x_max, y_max];
        if b.iter().any(|v| !v.is_finite()) || !(x_min < x_max) || !(y_min < y_max) {
            return Err(Error::InvalidBox(b));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(b: [f64; 4]) -> Result<Self> {
        BBox::new(b[0], b[1], b[2], b[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Percentage of predicted images whose box has IoU strictly above 0.5 with
/// some ground-truth box.
pub fn corloc(preds: &HashMap<String, BBox>, gts: &HashMap<String, Vec<BBox>>) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("no predictions"));
    }
    let mut correct = 0usize;
    for (image, pred) in preds {
        let boxes = gts
            .get(image)
            .filter(|b| !b.is_empty())
            .ok_or_else(|| Error::MissingGroundTruth(image.clone()))?;
        if boxes.iter().any(|gt| iou(pred, gt) > 0.5) {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / preds.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    #[serde(rename = "mentioned")]
    pub mentioned_objects: BTreeSet<String>,
    #[serde(rename = "truth")]
    pub ground_truth_objects: BTreeSet<String>,
}

/// Surface form → canonical object name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Synonyms(pub HashMap<String, String>);

impl Synonyms {
    pub fn canonical<'a>(&'a self, word: &'a str) -> &'a str {
        self.0.get(word).map(String::as_str).unwrap_or(word)
    }

    pub fn canonicalize(&self, rec: &CaptionRecord) -> CaptionRecord {
        let map = |set: &BTreeSet<String>| set.iter().map(|w| self.canonical(w).to_owned()).collect();
        CaptionRecord {
            mentioned_objects: map(&rec.mentioned_objects),
            ground_truth_objects: map(&rec.ground_truth_objects),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChairScores {
    pub chair_s: f64,
    pub chair_i: f64,
}

pub fn chair(records: &[CaptionRecord]) -> Result<ChairScores> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no captions"));
    }
    let mut hallucinated_captions = 0usize;
    let mut hallucinated = 0usize;
    let mut mentioned = 0usize;
    for r in records {
        let bad = r
            .mentioned_objects
            .difference(&r.ground_truth_objects)
            .count();
        hallucinated += bad;
        mentioned += r.mentioned_objects.len();
        if bad > 0 {
            hallucinated_captions += 1;
        }
    }
    if mentioned == 0 {
        return Err(Error::UndefinedDenominator("no mentioned objects for CHAIR_i"));
    }
    Ok(ChairScores {
        chair_s: 100.0 * hallucinated_captions as f64 / records.len() as f64,
        chair_i: 100.0 * hallucinated as f64 / mentioned as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryOutcome {
    #[serde(with = "yes_no")]
    pub predicted: bool,
    #[serde(with = "yes_no")]
    pub actual: bool,
}

mod yes_no {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(if *v { "yes" } else { "no" })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        let s = String::deserialize(d)?;
        match s.trim().to_ascii_lowercase().as_str() {
            "yes" => Ok(true),
            "no" => Ok(false),
            other => Err(serde::de::Error::custom(format!("expected yes/no, got {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PopeScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Percent accuracy, precision, recall and F1 with "yes" as the positive class.
pub fn pope_scores(outcomes: &[BinaryOutcome]) -> Result<PopeScores> {
    if outcomes.is_empty() {
        return Err(Error::EmptyInput("no outcomes"));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for o in outcomes {
        match (o.predicted, o.actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    if tp + fp == 0 {
        return Err(Error::UndefinedDenominator("no positive predictions for precision"));
    }
    if tp + fn_ == 0 {
        return Err(Error::UndefinedDenominator("no positive ground truth for recall"));
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    if precision + recall == 0.0 {
        return Err(Error::UndefinedDenominator("precision + recall is zero for F1"));
    }
    let f1 = 2.0 * precision * recall / (precision + recall);
    Ok(PopeScores {
        accuracy: 100.0 * (tp + tn) as f64 / outcomes.len() as f64,
        precision: 100.0 * precision,
        recall: 100.0 * recall,
        f1: 100.0 * f1,
    })
}

/// One line of a ground-truth file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLine {
    pub image_id: String,
    pub boxes: Vec<BBox>,
}
