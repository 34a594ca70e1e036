//! Slice-directory ingestion, HU windowing, and the text formats that bridge
//! to externally run models (labels, diagnoses, prediction records).

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::preprocess::FlipSpec;
use crate::types::{Image, Label, Volume};
use crate::util::fixed;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Tolerance on the sum of a 3-class probability vector.
pub const PROB_SUM_TOL: f64 = 1e-6;

// ---------------------------------------------------------------------------
// natural ordering

#[derive(Debug, PartialEq, Eq)]
enum Chunk<'a> {
    Digits(&'a str),
    Text(&'a str),
}

fn chunks(s: &str) -> impl Iterator<Item = Chunk<'_>> {
    let bytes = s.as_bytes();
    let mut pos = 0;
    std::iter::from_fn(move || {
        if pos >= bytes.len() {
            return None;
        }
        let start = pos;
        let digit = bytes[pos].is_ascii_digit();
        while pos < bytes.len() && bytes[pos].is_ascii_digit() == digit {
            pos += 1;
        }
        let part = &s[start..pos];
        Some(if digit { Chunk::Digits(part) } else { Chunk::Text(part) })
    })
}

fn cmp_digits(a: &str, b: &str) -> Ordering {
    let a = a.trim_start_matches('0');
    let b = b.trim_start_matches('0');
    a.len().cmp(&b.len()).then_with(|| a.cmp(b))
}

/// Natural filename order: digit runs compare as integers of arbitrary
/// length, everything else byte-wise; names equal under that rule (e.g.
/// `01` vs `1`) fall back to plain lexicographic order, so the result is a
/// total order.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    let mut ca = chunks(a);
    let mut cb = chunks(b);
    loop {
        let ord = match (ca.next(), cb.next()) {
            (None, None) => return a.cmp(b),
            (None, Some(_)) => Ordering::Less,
            (Some(_), None) => Ordering::Greater,
            (Some(Chunk::Digits(x)), Some(Chunk::Digits(y))) => cmp_digits(x, y),
            (Some(Chunk::Text(x) | Chunk::Digits(x)), Some(Chunk::Text(y) | Chunk::Digits(y))) => x.cmp(y),
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
}

// ---------------------------------------------------------------------------
// windowing

/// Linear HU-to-intensity mapping: `level` is the window center, `window`
/// its width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    window: f64,
    level: f64,
}

impl WindowSpec {
    pub fn new(window: f64, level: f64) -> Result<Self> {
        if window.is_nan() || window <= 0.0 || window.is_infinite() {
            return Err(Error::NonPositiveWindow(window));
        }
        if !level.is_finite() {
            return Err(Error::InvalidConfig(format!("level {level} is not finite")));
        }
        Ok(WindowSpec { window, level })
    }

    /// Window covering the HU interval `[lo, hi]`.
    pub fn from_range(lo: f64, hi: f64) -> Result<Self> {
        WindowSpec::new(hi - lo, (lo + hi) / 2.0)
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    #[inline]
    pub fn map(&self, hu: f64) -> f64 {
        ((hu - (self.level - self.window / 2.0)) / self.window).clamp(0.0, 1.0)
    }
}

impl Default for WindowSpec {
    /// Width 350 HU at level 1150 HU.
    fn default() -> Self {
        WindowSpec {
            window: 350.0,
            level: 1150.0,
        }
    }
}

/// Windows a row-major grid of HU values into a `[0, 1]` image.
pub fn apply_window(raw: &[f64], width: usize, height: usize, spec: &WindowSpec) -> Result<Image> {
    if raw.len() != width * height {
        return Err(Error::DimensionMismatch {
            expected: width * height,
            got: raw.len(),
        });
    }
    WindowSpec::new(spec.window, spec.level)?;
    let data = raw.iter().map(|&hu| spec.map(hu) as f32).collect();
    Ok(Image::from_raw(width, height, data))
}

// ---------------------------------------------------------------------------
// slice directories

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
        .unwrap_or(false)
}

/// Image files of a slice directory in natural order.
pub fn list_slices(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
        let path = entry.path();
        if path.is_file() && is_image_file(&path) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| natural_cmp(&file_name(a), &file_name(b)));
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Decodes one 8-bit grayscale slice, mapping `p` to `p / 255`.
pub fn decode_slice(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::UndecodableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = img.into_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray.into_raw().into_iter().map(|p| f32::from(p) / 255.0).collect();
    Ok(Image::from_raw(w, h, data))
}

/// Loads one patient directory. The patient id is the directory name.
pub fn load_volume(dir: &Path, labels: Option<&BTreeMap<String, Label>>) -> Result<Volume> {
    let files = list_slices(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDirectory(dir.to_path_buf()));
    }
    let slices = files.par_iter().map(|p| decode_slice(p)).collect::<Result<Vec<_>>>()?;
    let (w, h) = (slices[0].width(), slices[0].height());
    for (path, s) in files.iter().zip(&slices) {
        if s.width() != w || s.height() != h {
            return Err(Error::MixedDimensions {
                name: file_name(path),
                want_w: w,
                want_h: h,
                got_w: s.width(),
                got_h: s.height(),
            });
        }
    }
    let patient_id = file_name(dir);
    let label = labels.and_then(|m| m.get(&patient_id).copied());
    Volume::new(patient_id, slices, label)
}

/// Patient directories under `data_dir`, sorted by natural order.
pub fn patient_dirs(data_dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(data_dir).map_err(|e| Error::io(format!("reading {}", data_dir.display()), e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("reading {}", data_dir.display()), e))?;
        if entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort_by(|a, b| natural_cmp(&file_name(a), &file_name(b)));
    Ok(dirs)
}

/// Writes a volume as `0.png, 1.png, ...` 8-bit grayscale slices.
pub fn write_volume(vol: &Volume, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    vol.slices().par_iter().enumerate().try_for_each(|(i, s)| {
        let px: Vec<u8> = s.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
        let buf = image::GrayImage::from_raw(s.width() as u32, s.height() as u32, px)
            .expect("buffer length matches dimensions");
        let path = dir.join(format!("{i}.png"));
        buf.save(&path).map_err(|e| Error::Io {
            context: format!("writing {}", path.display()),
            source: std::io::Error::other(e.to_string()),
        })
    })
}

// ---------------------------------------------------------------------------
// labels / diagnosis files

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains([',', '\n', '\r']) {
        return Err(Error::InvariantViolation(format!("invalid identifier {id:?}")));
    }
    Ok(())
}

/// Parses `patient_id,LABEL` lines. Blank lines are ignored.
pub fn parse_labels(text: &str) -> Result<BTreeMap<String, Label>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedRecord { line: line_no, reason };
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| malformed("expected patient_id,LABEL".into()))?;
        let label = label.parse::<Label>().map_err(malformed)?;
        if id.is_empty() {
            return Err(malformed("empty patient id".into()));
        }
        if out.insert(id.to_string(), label).is_some() {
            return Err(malformed(format!("duplicate patient {id}")));
        }
    }
    Ok(out)
}

pub fn format_labels(labels: &BTreeMap<String, Label>) -> Result<String> {
    let mut s = String::new();
    for (id, label) in labels {
        check_id(id)?;
        writeln!(s, "{id},{label}").unwrap();
    }
    Ok(s)
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, Label>> {
    parse_labels(&read_text(path)?)
}

/// Labels and diagnosis files share one format.
pub fn write_labels(labels: &BTreeMap<String, Label>, path: &Path) -> Result<()> {
    write_text(path, &format_labels(labels)?)
}

// ---------------------------------------------------------------------------
// prediction records

#[derive(Debug, Clone, PartialEq)]
pub enum PredictionKind {
    /// Hard label from a sub-volume classifier, keyed by plan start and
    /// flip combination.
    SubVolume {
        start: usize,
        flips: FlipSpec,
        label: Label,
        confidence: f64,
    },
    /// `(p_covid, p_pneumonia, p_healthy)` for one slice.
    Slice { index: usize, probs: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub patient_id: String,
    pub model_id: String,
    pub kind: PredictionKind,
}

impl PredictionRecord {
    pub fn subvolume(
        patient_id: impl Into<String>,
        model_id: impl Into<String>,
        start: usize,
        flips: FlipSpec,
        label: Label,
        confidence: f64,
    ) -> Self {
        PredictionRecord {
            patient_id: patient_id.into(),
            model_id: model_id.into(),
            kind: PredictionKind::SubVolume {
                start,
                flips,
                label,
                confidence,
            },
        }
    }

    pub fn slice(patient_id: impl Into<String>, model_id: impl Into<String>, index: usize, probs: [f64; 3]) -> Self {
        PredictionRecord {
            patient_id: patient_id.into(),
            model_id: model_id.into(),
            kind: PredictionKind::Slice { index, probs },
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_id(&self.patient_id)?;
        check_id(&self.model_id)?;
        match &self.kind {
            PredictionKind::SubVolume { confidence, .. } => {
                if !(0.0..=1.0).contains(confidence) {
                    return Err(Error::InvariantViolation(format!(
                        "confidence {confidence} outside [0, 1]"
                    )));
                }
            }
            PredictionKind::Slice { probs, .. } => check_probs(probs)?,
        }
        Ok(())
    }
}

pub(crate) fn check_probs(p: &[f64; 3]) -> Result<()> {
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvariantViolation(format!("probabilities {p:?} outside [0, 1]")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::InvariantViolation(format!(
            "probabilities {p:?} sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Rounds a distribution to integer millionths that sum to exactly
/// 1 000 000; the rounding residue goes to the largest component.
pub(crate) fn canonical_micros(p: &[f64; 3]) -> [i64; 3] {
    let mut k = p.map(|v| (v * 1e6).round_ties_even() as i64);
    let diff = 1_000_000 - k.iter().sum::<i64>();
    if diff != 0 {
        let mut big = 0;
        for i in 1..3 {
            if k[i] > k[big] {
                big = i;
            }
        }
        k[big] += diff;
    }
    k
}

pub(crate) fn micros_str(k: i64) -> String {
    format!("{}.{:06}", k / 1_000_000, k % 1_000_000)
}

fn flips_str(f: FlipSpec) -> String {
    [f.horizontal, f.vertical, f.depth]
        .iter()
        .map(|&b| if b { '1' } else { '0' })
        .collect()
}

/// One canonical line, without the trailing newline.
pub fn format_record(r: &PredictionRecord) -> Result<String> {
    r.validate()?;
    Ok(match &r.kind {
        PredictionKind::SubVolume {
            start,
            flips,
            label,
            confidence,
        } => format!(
            "{},{},SUBVOLUME,{},{},{},{}",
            r.patient_id,
            r.model_id,
            start,
            flips_str(*flips),
            label,
            fixed(*confidence, 6)
        ),
        PredictionKind::Slice { index, probs } => {
            let k = canonical_micros(probs);
            format!(
                "{},{},SLICE,{},{},{},{}",
                r.patient_id,
                r.model_id,
                index,
                micros_str(k[0]),
                micros_str(k[1]),
                micros_str(k[2])
            )
        }
    })
}

pub fn format_predictions(records: &[PredictionRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&format_record(r)?);
        s.push('\n');
    }
    Ok(s)
}

fn parse_prob(field: &str, what: &str) -> std::result::Result<f64, String> {
    let v: f64 = field.parse().map_err(|_| format!("bad {what} {field:?}"))?;
    if !v.is_finite() {
        return Err(format!("bad {what} {field:?}"));
    }
    Ok(v)
}

fn parse_record(line: &str) -> std::result::Result<PredictionRecord, String> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 7 {
        return Err(format!("expected 7 fields, found {}", fields.len()));
    }
    let (patient_id, model_id) = (fields[0], fields[1]);
    if patient_id.is_empty() || model_id.is_empty() {
        return Err("empty patient or model id".into());
    }
    let index: usize = fields[3].parse().map_err(|_| format!("bad index {:?}", fields[3]))?;
    let kind = match fields[2] {
        "SUBVOLUME" => {
            let f = fields[4].as_bytes();
            if f.len() != 3 || f.iter().any(|b| *b != b'0' && *b != b'1') {
                return Err(format!("bad flips {:?}", fields[4]));
            }
            PredictionKind::SubVolume {
                start: index,
                flips: FlipSpec::new(f[0] == b'1', f[1] == b'1', f[2] == b'1'),
                label: fields[5].parse()?,
                confidence: parse_prob(fields[6], "confidence")?,
            }
        }
        "SLICE" => PredictionKind::Slice {
            index,
            probs: [
                parse_prob(fields[4], "p_covid")?,
                parse_prob(fields[5], "p_pneumonia")?,
                parse_prob(fields[6], "p_healthy")?,
            ],
        },
        other => return Err(format!("unknown record kind {other:?}")),
    };
    Ok(PredictionRecord {
        patient_id: patient_id.to_string(),
        model_id: model_id.to_string(),
        kind,
    })
}

/// Parses a prediction file. Syntax errors are `MalformedRecord`, value
/// errors `InvariantViolation`; both carry the 1-based line number.
pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let rec = parse_record(line).map_err(|reason| Error::MalformedRecord { line: i + 1, reason })?;
        rec.validate().map_err(|e| match e {
            Error::InvariantViolation(m) => Error::InvariantViolation(format!("line {}: {m}", i + 1)),
            other => other,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    parse_predictions(&read_text(path)?)
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let text = format_predictions(records)?;
    write_text(path, &text)
}
