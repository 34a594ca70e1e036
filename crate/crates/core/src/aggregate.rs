//! CT-level aggregation of per-sub-volume votes and per-slice probabilities.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ingest::{canonical_micros, check_probs, micros_str};
use crate::preprocess::depth_resize;
use crate::types::Label;

/// Rows in a [`FeatureMatrix`].
pub const FEATURE_ROWS: usize = 96;
/// Length of a flattened feature matrix.
pub const FEATURE_DIM: usize = FEATURE_ROWS * 3;

/// Label returned when the vote is tied.
pub const DEFAULT_TIE_BREAK: Label = Label::Covid;

/// Confidence thresholds for the filtered vote. NON_COVID votes below
/// `t_noncovid` are discarded, then any vote below `t_all`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoteThresholds {
    pub t_noncovid: f64,
    pub t_all: f64,
}

impl VoteThresholds {
    pub fn new(t_noncovid: f64, t_all: f64) -> Result<Self> {
        for (what, v) in [("t_noncovid", t_noncovid), ("t_all", t_all)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange {
                    what,
                    value: v,
                    lo: 0.0,
                    hi: 1.0,
                });
            }
        }
        Ok(VoteThresholds { t_noncovid, t_all })
    }

    pub const DISABLED: VoteThresholds = VoteThresholds {
        t_noncovid: 0.0,
        t_all: 0.0,
    };

    pub fn keeps(&self, label: Label, confidence: f64) -> bool {
        !(label == Label::NonCovid && confidence < self.t_noncovid) && confidence >= self.t_all
    }
}

impl Default for VoteThresholds {
    fn default() -> Self {
        VoteThresholds {
            t_noncovid: 0.5,
            t_all: 0.5,
        }
    }
}

fn mode<I: IntoIterator<Item = Label>>(labels: I, tie: Label) -> Option<Label> {
    let (mut covid, mut non) = (0usize, 0usize);
    for l in labels {
        match l {
            Label::Covid => covid += 1,
            Label::NonCovid => non += 1,
        }
    }
    if covid + non == 0 {
        return None;
    }
    Some(match covid.cmp(&non) {
        std::cmp::Ordering::Greater => Label::Covid,
        std::cmp::Ordering::Less => Label::NonCovid,
        std::cmp::Ordering::Equal => tie,
    })
}

pub fn majority_vote_with(labels: &[Label], tie: Label) -> Result<Label> {
    mode(labels.iter().copied(), tie).ok_or(Error::EmptyPredictions)
}

/// Most frequent label; ties go to COVID.
pub fn majority_vote(labels: &[Label]) -> Result<Label> {
    majority_vote_with(labels, DEFAULT_TIE_BREAK)
}

/// Filtered majority vote. When the thresholds discard every prediction
/// the unfiltered mode is returned instead.
pub fn threshold_vote_with(preds: &[(Label, f64)], t: &VoteThresholds, tie: Label) -> Result<Label> {
    if preds.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    let survivors = preds.iter().filter(|(l, c)| t.keeps(*l, *c)).map(|(l, _)| *l);
    Ok(mode(survivors, tie).unwrap_or_else(|| mode(preds.iter().map(|(l, _)| *l), tie).expect("preds is non-empty")))
}

pub fn threshold_vote(preds: &[(Label, f64)], t: &VoteThresholds) -> Result<Label> {
    threshold_vote_with(preds, t, DEFAULT_TIE_BREAK)
}

/// Pools every model's predictions into one list, then applies
/// [`threshold_vote`].
pub fn pool_ensemble<K>(per_model: &BTreeMap<K, Vec<(Label, f64)>>, t: &VoteThresholds) -> Result<Label> {
    let pooled: Vec<(Label, f64)> = per_model.values().flatten().copied().collect();
    threshold_vote(&pooled, t)
}

/// Slice band filter settings: slices with `p_healthy >= hi` inside the
/// central `central_fraction` of the volume are kept as HEALTHY, slices with
/// `p_healthy <= lo` anywhere are kept as LESION.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceFilterConfig {
    pub lo: f64,
    pub hi: f64,
    pub central_fraction: f64,
}

impl SliceFilterConfig {
    pub fn new(lo: f64, hi: f64, central_fraction: f64) -> Result<Self> {
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= lo <= hi <= 1, got lo={lo} hi={hi}"
            )));
        }
        if !(central_fraction > 0.0 && central_fraction <= 1.0) {
            return Err(Error::OutOfRange {
                what: "central_fraction",
                value: central_fraction,
                lo: 0.0,
                hi: 1.0,
            });
        }
        Ok(SliceFilterConfig {
            lo,
            hi,
            central_fraction,
        })
    }

    /// Inclusive band `[n(1-c)/2, n(1+c)/2]` of slice positions.
    pub fn band(&self, n: usize) -> (f64, f64) {
        let n = n as f64;
        let c = self.central_fraction;
        (n * (1.0 - c) / 2.0, n * (1.0 + c) / 2.0)
    }
}

impl Default for SliceFilterConfig {
    fn default() -> Self {
        SliceFilterConfig {
            lo: 0.2,
            hi: 0.8,
            central_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceClass {
    Healthy,
    Lesion,
}

/// Keeps only confidently healthy (central) or confidently lesioned slices.
pub fn filter_slices(slice_probs: &[[f64; 3]], cfg: &SliceFilterConfig) -> Result<Vec<(usize, SliceClass)>> {
    if slice_probs.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    let (band_lo, band_hi) = cfg.band(slice_probs.len());
    Ok(slice_probs
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let healthy = p[2];
            let pos = i as f64;
            if healthy >= cfg.hi && pos >= band_lo && pos <= band_hi {
                Some((i, SliceClass::Healthy))
            } else if healthy <= cfg.lo {
                Some((i, SliceClass::Lesion))
            } else {
                None
            }
        })
        .collect())
}

/// Exactly [`FEATURE_ROWS`] slice probability vectors for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: Vec<[f64; 3]>,
}

impl FeatureMatrix {
    pub fn new(rows: Vec<[f64; 3]>) -> Result<Self> {
        if rows.len() != FEATURE_ROWS {
            return Err(Error::DimensionMismatch {
                expected: FEATURE_ROWS,
                got: rows.len(),
            });
        }
        for r in &rows {
            check_probs(r)?;
        }
        Ok(FeatureMatrix { rows })
    }

    pub fn rows(&self) -> &[[f64; 3]] {
        &self.rows
    }

    /// Row-major flattening, length [`FEATURE_DIM`].
    pub fn flatten(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }
}

/// Resamples slice predictions to [`FEATURE_ROWS`] rows by nearest-neighbour
/// depth resizing.
pub fn assemble_features(slice_probs: &[[f64; 3]]) -> Result<FeatureMatrix> {
    if slice_probs.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    FeatureMatrix::new(depth_resize(slice_probs, FEATURE_ROWS)?)
}

/// One `patient_id,v0,...,v287` line per patient, 6 decimals, each row
/// canonicalized to sum to exactly one.
pub fn format_features(features: &BTreeMap<String, FeatureMatrix>) -> String {
    let mut s = String::new();
    for (id, fm) in features {
        s.push_str(id);
        for row in fm.rows() {
            for k in canonical_micros(row) {
                write!(s, ",{}", micros_str(k)).unwrap();
            }
        }
        s.push('\n');
    }
    s
}

pub fn parse_features(text: &str) -> Result<BTreeMap<String, FeatureMatrix>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedRecord { line: i + 1, reason };
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().to_string();
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|_| malformed(format!("bad value {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if id.is_empty() || values.len() != FEATURE_DIM {
            return Err(malformed(format!(
                "expected id and {FEATURE_DIM} values, got {}",
                values.len()
            )));
        }
        let rows = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let fm = FeatureMatrix::new(rows).map_err(|e| malformed(e.to_string()))?;
        if out.insert(id.clone(), fm).is_some() {
            return Err(malformed(format!("duplicate patient {id}")));
        }
    }
    Ok(out)
}
