use std::collections::{BTreeMap, HashMap};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{auc, f1_acc_mcc, macro_average};
use crate::error::{Error, Result};
use crate::io::{LabelRecord, ScoreRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub entity: String,
    pub n: usize,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub f1: f64,
    pub acc: f64,
    pub mcc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub threshold: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_auc: Option<f64>,
    pub macro_f1: f64,
    pub macro_acc: f64,
    pub macro_mcc: f64,
    /// Entities left out of the AUC average.
    pub auc_skipped: Vec<String>,
}

impl ClassificationReport {
    /// Plain-text table: one row per entity and a final macro row.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>6} {:>8} {:>8} {:>8} {:>8}", "entity", "n", "AUC", "F1", "ACC", "MCC");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<24} {:>6} {:>8} {:>8.4} {:>8.4} {:>8.4}",
                c.entity,
                c.n,
                fmt(c.auc),
                c.f1,
                c.acc,
                c.mcc
            );
        }
        let _ = writeln!(
            s,
            "{:<24} {:>6} {:>8} {:>8.4} {:>8.4} {:>8.4}",
            "macro",
            "",
            fmt(self.macro_auc),
            self.macro_f1,
            self.macro_acc,
            self.macro_mcc
        );
        s
    }
}

/// Joins scores to labels on `(image_id, entity)` and computes per-entity
/// and macro metrics. Every label must have a score and vice versa.
pub fn classification_report(scores: &[ScoreRecord], labels: &[LabelRecord], threshold: f64) -> Result<ClassificationReport> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} score records but {} label records",
            scores.len(),
            labels.len()
        )));
    }
    let index: HashMap<(&str, &str), f64> = scores
        .iter()
        .map(|s| ((s.image_id.as_str(), s.entity.as_str()), s.score))
        .collect();
    let mut by_entity: BTreeMap<&str, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for l in labels {
        let score = index
            .get(&(l.image_id.as_str(), l.entity.as_str()))
            .ok_or_else(|| Error::InvalidArgument(format!("no score for image `{}` entity `{}`", l.image_id, l.entity)))?;
        let e = by_entity.entry(l.entity.as_str()).or_default();
        e.0.push(*score);
        e.1.push(l.label);
    }
    if by_entity.is_empty() {
        return Err(Error::Empty("no labels".into()));
    }
    let mut per_class = Vec::with_capacity(by_entity.len());
    for (entity, (s, y)) in &by_entity {
        let m = f1_acc_mcc(s, y, threshold)?;
        per_class.push(ClassMetrics {
            entity: entity.to_string(),
            n: s.len(),
            auc: auc(s, y).ok(),
            f1: m.f1,
            acc: m.acc,
            mcc: m.mcc,
        });
    }
    let aucs: Vec<Option<f64>> = per_class.iter().map(|c| c.auc).collect();
    let (macro_auc, auc_skipped) = match macro_average(&aucs) {
        Ok(m) => (Some(m.mean), m.skipped.iter().map(|&i| per_class[i].entity.clone()).collect()),
        Err(_) => (None, per_class.iter().map(|c| c.entity.clone()).collect()),
    };
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / per_class.len() as f64;
    Ok(ClassificationReport {
        threshold,
        macro_auc,
        macro_f1: mean(|c| c.f1),
        macro_acc: mean(|c| c.acc),
        macro_mcc: mean(|c| c.mcc),
        per_class,
        auc_skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointingReport {
    /// `(class, hit rate, samples)` in class order.
    pub classes: Vec<(String, f64, usize)>,
    /// Unweighted mean of class hit rates.
    pub mean: f64,
    pub warnings: Vec<String>,
}

impl PointingReport {
    /// Header row `Mean` followed by class names, then one row of rates.
    pub fn to_table(&self) -> String {
        let mut header = vec!["Mean".to_string()];
        let mut row = vec![format!("{:.3}", self.mean)];
        for (c, rate, _) in &self.classes {
            header.push(c.clone());
            row.push(format!("{rate:.3}"));
        }
        format!("{}\n{}\n", header.join(" | "), row.join(" | "))
    }
}

/// Per-class hit rates and their unweighted mean. Empty classes are left out
/// with a warning.
pub fn pointing_game_report(hits: &BTreeMap<String, Vec<bool>>) -> Result<PointingReport> {
    let mut classes = Vec::new();
    let mut warnings = Vec::new();
    for (class, h) in hits {
        if h.is_empty() {
            warnings.push(format!("class `{class}` has no samples and was excluded"));
            continue;
        }
        let rate = h.iter().filter(|x| **x).count() as f64 / h.len() as f64;
        classes.push((class.clone(), rate, h.len()));
    }
    if classes.is_empty() {
        return Err(Error::Empty("pointing game has no scored classes".into()));
    }
    let mean = classes.iter().map(|c| c.1).sum::<f64>() / classes.len() as f64;
    Ok(PointingReport {
        classes,
        mean,
        warnings,
    })
}
