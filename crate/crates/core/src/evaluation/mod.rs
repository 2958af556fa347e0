//! Classification metrics and the pointing game.

mod report;

use serde::{Deserialize, Serialize};

pub use report::{classification_report, pointing_game_report, ClassMetrics, ClassificationReport, PointingReport};

use crate::error::{Error, Result};
use crate::fusion::AttentionMap;
use crate::io::GrayImage;

fn check_binary(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|l| *l > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores must not be NaN".into()));
    }
    Ok(())
}

/// Area under the ROC curve via the Mann-Whitney rank statistic with
/// midranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_binary(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Predictions are `score >= threshold`.
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        check_binary(scores, labels)?;
        if !threshold.is_finite() {
            return Err(Error::InvalidArgument("threshold must be finite".into()));
        }
        let mut c = Confusion::default();
        for (s, l) in scores.iter().zip(labels) {
            match (*s >= threshold, *l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub f1: f64,
    pub acc: f64,
    pub mcc: f64,
}

/// F1, accuracy and Matthews correlation at `threshold`. F1 is 0 when there
/// are no positives at all; MCC is 0 when its denominator vanishes.
pub fn f1_acc_mcc(scores: &[f64], labels: &[u8], threshold: f64) -> Result<BinaryMetrics> {
    let c = Confusion::from_scores(scores, labels, threshold)?;
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let n = tp + fp + tn + fn_;
    if n == 0.0 {
        return Err(Error::Empty("no scores to evaluate".into()));
    }
    let f1_den = 2.0 * tp + fp + fn_;
    let f1 = if f1_den == 0.0 { 0.0 } else { 2.0 * tp / f1_den };
    let mcc_den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let mcc = if mcc_den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / mcc_den
    };
    Ok(BinaryMetrics {
        f1,
        acc: (tp + tn) / n,
        mcc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub mean: f64,
    /// Indices of classes whose metric was undefined.
    pub skipped: Vec<usize>,
}

/// Unweighted mean over defined entries.
pub fn macro_average(per_class: &[Option<f64>]) -> Result<MacroAverage> {
    if per_class.is_empty() {
        return Err(Error::Empty("no classes to average".into()));
    }
    let skipped: Vec<usize> = per_class
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_none())
        .map(|(i, _)| i)
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::InvalidArgument("every class was skipped".into()));
    }
    Ok(MacroAverage {
        mean: defined.iter().sum::<f64>() / defined.len() as f64,
        skipped,
    })
}

/// Binary mask at image resolution with at least one positive pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<bool>,
}

impl GroundTruthMask {
    pub fn new(height: usize, width: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{}x{} mask needs {} pixels, got {}",
                height,
                width,
                height * width,
                pixels.len()
            )));
        }
        if !pixels.iter().any(|p| *p) {
            return Err(Error::InvalidArgument("ground-truth mask is empty".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Nonzero pixels of a square grayscale mask are positive.
    pub fn from_gray(image: &GrayImage) -> Result<Self> {
        Self::new(image.size, image.size, image.to_mask())
    }
}

/// Hit when the footprint of the map's argmax patch (lowest index on ties)
/// contains a positive mask pixel.
pub fn pointing_game(map: &AttentionMap, mask: &GroundTruthMask) -> Result<bool> {
    let (gr, gc) = map.grid;
    if gr == 0 || gc == 0 || mask.height % gr != 0 || mask.width % gc != 0 {
        return Err(Error::Shape(format!(
            "{}x{} mask not divisible by {gr}x{gc} patch grid",
            mask.height, mask.width
        )));
    }
    let (ph, pw) = (mask.height / gr, mask.width / gc);
    let best = map.argmax();
    let (pr, pc) = (best / gc, best % gc);
    for r in pr * ph..(pr + 1) * ph {
        for c in pc * pw..(pc + 1) * pw {
            if mask.pixels[r * mask.width + c] {
                return Ok(true);
            }
        }
    }
    Ok(false)
}
