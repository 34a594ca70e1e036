//! Core data types shared by every stage: binary labels, normalized images
//! and patient volumes.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// CT-level diagnosis. COVID is the positive class everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Covid,
    NonCovid,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Covid, Label::NonCovid];

    /// Class index used by the heads: COVID = 0, NON_COVID = 1.
    pub fn index(self) -> usize {
        match self {
            Label::Covid => 0,
            Label::NonCovid => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Covid),
            1 => Some(Label::NonCovid),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Covid => "COVID",
            Label::NonCovid => "NON_COVID",
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Covid => Label::NonCovid,
            Label::NonCovid => Label::Covid,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "COVID" => Ok(Label::Covid),
            "NON_COVID" => Ok(Label::NonCovid),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvariantViolation(format!(
                "image data has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvariantViolation(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Image::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Image::new(width, height, data)
    }

    /// Construction path for internal transforms whose outputs are in range
    /// by construction.
    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.width..(row + 1) * self.width]
    }
}

/// Ordered stack of equally sized slices belonging to one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    patient_id: String,
    slices: Vec<Image>,
    label: Option<Label>,
}

impl Volume {
    pub fn new(patient_id: impl Into<String>, slices: Vec<Image>, label: Option<Label>) -> Result<Self> {
        let first = slices.first().ok_or(Error::EmptyInput)?;
        let (w, h) = (first.width(), first.height());
        for (i, s) in slices.iter().enumerate() {
            if s.width() != w || s.height() != h {
                return Err(Error::MixedDimensions {
                    name: format!("#{i}"),
                    want_w: w,
                    want_h: h,
                    got_w: s.width(),
                    got_h: s.height(),
                });
            }
        }
        Ok(Volume {
            patient_id: patient_id.into(),
            slices,
            label,
        })
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn slices(&self) -> &[Image] {
        &self.slices
    }

    pub fn into_slices(self) -> Vec<Image> {
        self.slices
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn label(&self) -> Option<Label> {
        self.label
    }

    pub fn set_label(&mut self, label: Option<Label>) {
        self.label = label;
    }

    pub fn width(&self) -> usize {
        self.slices[0].width()
    }

    pub fn height(&self) -> usize {
        self.slices[0].height()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_text_round_trip() {
        for l in Label::ALL {
            assert_eq!(l.as_str().parse::<Label>().unwrap(), l);
            assert_eq!(Label::from_index(l.index()), Some(l));
        }
        assert!("covid".parse::<Label>().is_err());
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(2, 1, vec![0.0, 1.5]).is_err());
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn volume_rejects_mixed_dimensions() {
        let a = Image::filled(4, 4, 0.0).unwrap();
        let b = Image::filled(4, 5, 0.0).unwrap();
        assert!(matches!(
            Volume::new("p", vec![a, b], None),
            Err(Error::MixedDimensions { .. })
        ));
        assert!(matches!(Volume::new("p", vec![], None), Err(Error::EmptyInput)));
    }
}
