//! Strong-matching span-level InKB scoring.
//!
//! Gold mentions whose entity is NIL, missing, or outside the entity table are
//! removed before scoring. A prediction is a true positive only when its
//! document, both span boundaries and its entity match a retained gold
//! mention exactly.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, EntityId, EntityNames};
use crate::decoder::PredictedMention;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    El,
    Ed,
}

/// Treatment of predictions that exactly cover a removed (NIL/out-of-table) gold span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum NilPolicy {
    /// Counted as false positives.
    #[default]
    Strict,
    /// Discarded before scoring.
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DocScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    /// `full-universe` or `candidates`, when known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub search: Option<String>,
    pub nil_policy: NilPolicy,
    pub micro_p: f64,
    pub micro_r: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gold_retained: usize,
    pub gold_removed: usize,
    pub duplicate_predictions: usize,
    pub discarded_predictions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub per_doc: BTreeMap<String, DocScore>,
}

/// Precision, recall and F1 with zero denominators mapped to zero.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let r = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

/// A gold span after InKB resolution; `entity` is `None` for removed mentions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GoldSpan {
    pub start: usize,
    pub end: usize,
    pub entity: Option<EntityId>,
}

pub fn gold_spans(doc: &Document, names: &EntityNames) -> Vec<GoldSpan> {
    doc.mentions()
        .into_iter()
        .map(|m| GoldSpan {
            start: m.start,
            end: m.end,
            entity: m.entity.as_ref().and_then(|e| names.resolve(e)),
        })
        .collect()
}

pub fn strong_match_f1(
    docs: &[Document],
    preds: &[PredictedMention],
    names: &EntityNames,
    nil_policy: NilPolicy,
) -> Result<EvalReport> {
    let mut by_doc: HashMap<&str, Vec<&PredictedMention>> = HashMap::new();
    let known: HashSet<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
    for p in preds {
        if !known.contains(p.doc_id.as_str()) {
            return Err(Error::Validation(format!(
                "prediction refers to unknown document `{}`",
                p.doc_id
            )));
        }
        by_doc.entry(p.doc_id.as_str()).or_default().push(p);
    }

    let mut per_doc = BTreeMap::new();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let (mut retained_total, mut removed_total) = (0, 0);
    let (mut duplicates, mut discarded) = (0, 0);
    let mut macro_sum = 0.0;
    let mut macro_docs = 0usize;

    for doc in docs {
        let spans = gold_spans(doc, names);
        let mut retained: HashMap<(usize, usize), EntityId> = HashMap::new();
        let mut removed: HashSet<(usize, usize)> = HashSet::new();
        for s in &spans {
            match s.entity {
                Some(id) => {
                    retained.insert((s.start, s.end), id);
                }
                None => {
                    removed.insert((s.start, s.end));
                }
            }
        }
        retained_total += retained.len();
        removed_total += removed.len();

        let mut seen = HashSet::new();
        let mut matched = HashSet::new();
        let (mut d_tp, mut d_fp) = (0, 0);
        for p in by_doc.get(doc.doc_id.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
            let key = (p.start_word, p.end_word, p.entity_id);
            if !seen.insert(key) {
                duplicates += 1;
                continue;
            }
            let span = (p.start_word, p.end_word);
            if nil_policy == NilPolicy::Lenient && removed.contains(&span) {
                discarded += 1;
                continue;
            }
            if retained.get(&span) == Some(&p.entity_id) && matched.insert(span) {
                d_tp += 1;
            } else {
                d_fp += 1;
            }
        }
        let d_fn = retained.len() - d_tp;
        tp += d_tp;
        fp += d_fp;
        fn_ += d_fn;
        if d_tp + d_fp + d_fn > 0 {
            let (_, _, f1) = prf(d_tp, d_fp, d_fn);
            macro_sum += f1;
            macro_docs += 1;
            per_doc.insert(
                doc.doc_id.clone(),
                DocScore {
                    tp: d_tp,
                    fp: d_fp,
                    fn_: d_fn,
                    f1,
                },
            );
        }
    }

    let (micro_p, micro_r, micro_f1) = prf(tp, fp, fn_);
    let macro_f1 = if macro_docs > 0 {
        macro_sum / macro_docs as f64
    } else {
        0.0
    };
    if duplicates > 0 {
        log::warn!("{} duplicate predictions ignored", duplicates);
    }
    Ok(EvalReport {
        mode: EvalMode::El,
        search: None,
        nil_policy,
        micro_p,
        micro_r,
        micro_f1,
        macro_f1,
        tp,
        fp,
        fn_,
        gold_retained: retained_total,
        gold_removed: removed_total,
        duplicate_predictions: duplicates,
        discarded_predictions: discarded,
        accuracy: None,
        per_doc,
    })
}

/// Fraction of gold mentions whose predicted entity is correct.
pub fn ed_accuracy(gold: &[EntityId], predicted: &[EntityId]) -> Result<f64> {
    if gold.len() != predicted.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gold mentions but {} predictions",
            gold.len(),
            predicted.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::InvalidArgument("no gold mentions to score".into()));
    }
    let correct = gold.iter().zip(predicted).filter(|(g, p)| g == p).count();
    Ok(correct as f64 / gold.len() as f64)
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            EvalMode::El => "EL",
            EvalMode::Ed => "ED",
        };
        writeln!(
            f,
            "mode {} | search {} | nil-policy {:?}",
            mode,
            self.search.as_deref().unwrap_or("-"),
            self.nil_policy
        )?;
        writeln!(f, "{:<12}{:>10}", "metric", "value")?;
        if let Some(acc) = self.accuracy {
            writeln!(f, "{:<12}{:>10.4}", "accuracy", acc)?;
        }
        writeln!(f, "{:<12}{:>10.4}", "micro P", self.micro_p)?;
        writeln!(f, "{:<12}{:>10.4}", "micro R", self.micro_r)?;
        writeln!(f, "{:<12}{:>10.4}", "micro F1", self.micro_f1)?;
        writeln!(f, "{:<12}{:>10.4}", "macro F1", self.macro_f1)?;
        write!(
            f,
            "{:<12}{:>10}\n{:<12}{:>10}\n{:<12}{:>10}",
            "TP", self.tp, "FP", self.fp, "FN", self.fn_
        )
    }
}
