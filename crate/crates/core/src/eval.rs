//! Confusion counts, precision/recall/F1 with COVID as the positive class,
//! macro-F1, stratified folds and the `key=value` report format.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::types::Label;
use crate::util::{fixed, seeded_rng};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, pred: Label, truth: Label) {
        match (pred, truth) {
            (Label::Covid, Label::Covid) => self.tp += 1,
            (Label::Covid, Label::NonCovid) => self.fp += 1,
            (Label::NonCovid, Label::Covid) => self.fn_ += 1,
            (Label::NonCovid, Label::NonCovid) => self.tn += 1,
        }
    }

    /// The same counts with NON_COVID treated as positive.
    pub fn swapped(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

/// Tallies predictions against ground truth; both maps must cover the same
/// patients.
pub fn confusion(pred: &BTreeMap<String, Label>, truth: &BTreeMap<String, Label>) -> Result<ConfusionMatrix> {
    if let Some(id) = pred
        .keys()
        .find(|k| !truth.contains_key(*k))
        .or_else(|| truth.keys().find(|k| !pred.contains_key(*k)))
    {
        return Err(Error::KeyMismatch(id.clone()));
    }
    let mut cm = ConfusionMatrix::default();
    for (id, &p) in pred {
        cm.add(p, truth[id]);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub precision_covid: f64,
    pub recall_covid: f64,
    pub f1_covid: f64,
    pub f1_noncovid: f64,
    pub macro_f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-class precision and recall use `0/0 = 0`; macro-F1 is the unweighted
/// mean of the two class F1 scores.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<Metrics> {
    if cm.total() == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let precision_covid = ratio(cm.tp, cm.tp + cm.fp);
    let recall_covid = ratio(cm.tp, cm.tp + cm.fn_);
    let precision_non = ratio(cm.tn, cm.tn + cm.fn_);
    let recall_non = ratio(cm.tn, cm.tn + cm.fp);
    let f1_covid = f1(precision_covid, recall_covid);
    let f1_noncovid = f1(precision_non, recall_non);
    Ok(Metrics {
        precision_covid,
        recall_covid,
        f1_covid,
        f1_noncovid,
        macro_f1: (f1_covid + f1_noncovid) / 2.0,
    })
}

/// Fold index of every patient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    k: usize,
    folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn folds(&self) -> &BTreeMap<String, usize> {
        &self.folds
    }

    pub fn fold_of(&self, patient: &str) -> Option<usize> {
        self.folds.get(patient).copied()
    }

    pub fn members(&self, fold: usize) -> impl Iterator<Item = &str> {
        self.folds
            .iter()
            .filter(move |(_, &f)| f == fold)
            .map(|(p, _)| p.as_str())
    }

    /// `(covid, non_covid)` count of each fold.
    pub fn class_counts(&self, labels: &BTreeMap<String, Label>) -> Vec<(usize, usize)> {
        let mut out = vec![(0, 0); self.k];
        for (p, &f) in &self.folds {
            match labels.get(p) {
                Some(Label::Covid) => out[f].0 += 1,
                Some(Label::NonCovid) => out[f].1 += 1,
                None => {}
            }
        }
        out
    }

    /// `patient_id,fold` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (p, f) in &self.folds {
            writeln!(s, "{p},{f}").unwrap();
        }
        s
    }
}

/// Shuffles each class with a seeded generator and deals it round-robin
/// over `k` folds. The second class continues the rotation where the first
/// stopped so fold sizes stay within one of each other.
pub fn stratified_folds(labels: &BTreeMap<String, Label>, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {k}")));
    }
    let mut folds = BTreeMap::new();
    let mut next = 0;
    for class in Label::ALL {
        let mut members: Vec<&String> = labels.iter().filter(|(_, &l)| l == class).map(|(p, _)| p).collect();
        if members.len() < k {
            return Err(Error::TooFewSamples {
                class: class.as_str(),
                have: members.len(),
                need: k,
            });
        }
        members.shuffle(&mut seeded_rng(seed, &[b"folds", class.as_str().as_bytes()]));
        for p in members {
            folds.insert(p.clone(), next);
            next = (next + 1) % k;
        }
    }
    Ok(FoldAssignment { k, folds })
}

const REPORT_KEYS: [&str; 9] = [
    "tp",
    "fp",
    "fn",
    "tn",
    "precision_covid",
    "recall_covid",
    "f1_covid",
    "f1_noncovid",
    "macro_f1",
];

/// Metadata as `# key=value` lines, then the counts and metrics as
/// `key=value` lines with six decimals.
pub fn report(cm: &ConfusionMatrix, metadata: &[(&str, String)]) -> Result<String> {
    let m = macro_f1(cm)?;
    let mut s = String::new();
    for (k, v) in metadata {
        writeln!(s, "# {k}={v}").unwrap();
    }
    writeln!(s, "tp={}\nfp={}\nfn={}\ntn={}", cm.tp, cm.fp, cm.fn_, cm.tn).unwrap();
    for (k, v) in [
        ("precision_covid", m.precision_covid),
        ("recall_covid", m.recall_covid),
        ("f1_covid", m.f1_covid),
        ("f1_noncovid", m.f1_noncovid),
        ("macro_f1", m.macro_f1),
    ] {
        writeln!(s, "{k}={}", fixed(v, 6)).unwrap();
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReport {
    pub metadata: Vec<(String, String)>,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

/// Parses a report, recomputing the metrics from the counts and checking
/// that the printed values agree with them.
pub fn parse_report(text: &str) -> Result<ParsedReport> {
    let mut metadata = Vec::new();
    let mut values: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedRecord { line: line_no, reason };
        if let Some(meta) = line.strip_prefix("# ") {
            let (k, v) = meta.split_once('=').ok_or_else(|| malformed("bad metadata".into()))?;
            metadata.push((k.to_string(), v.to_string()));
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| malformed("expected key=value".into()))?;
        let key = REPORT_KEYS
            .iter()
            .find(|&&r| r == k)
            .ok_or_else(|| malformed(format!("unknown key {k:?}")))?;
        if values.insert(key, (line_no, v)).is_some() {
            return Err(malformed(format!("duplicate key {k}")));
        }
    }
    let get = |k: &str| {
        values.get(k).copied().ok_or_else(|| Error::MalformedRecord {
            line: 0,
            reason: format!("missing key {k}"),
        })
    };
    let count = |k: &str| -> Result<usize> {
        let (line, v) = get(k)?;
        v.parse().map_err(|_| Error::MalformedRecord {
            line,
            reason: format!("bad count {v:?}"),
        })
    };
    let cm = ConfusionMatrix {
        tp: count("tp")?,
        fp: count("fp")?,
        fn_: count("fn")?,
        tn: count("tn")?,
    };
    let metrics = macro_f1(&cm)?;
    for (k, v) in [
        ("precision_covid", metrics.precision_covid),
        ("recall_covid", metrics.recall_covid),
        ("f1_covid", metrics.f1_covid),
        ("f1_noncovid", metrics.f1_noncovid),
        ("macro_f1", metrics.macro_f1),
    ] {
        let (line, printed) = get(k)?;
        if printed != fixed(v, 6) {
            return Err(Error::MalformedRecord {
                line,
                reason: format!("{k}={printed} disagrees with counts ({})", fixed(v, 6)),
            });
        }
    }
    Ok(ParsedReport {
        metadata,
        confusion: cm,
        metrics,
    })
}
