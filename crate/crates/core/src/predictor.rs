//! Prediction sources: the [`Predictor`] contract plus a replaying
//! file-backed implementation and a seeded synthetic one.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ingest::{PredictionKind, PredictionRecord};
use crate::preprocess::FlipSpec;
use crate::sampling::{inference_plan, TtaPlan};
use crate::types::Label;
use crate::util::seeded_rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VolumeKey {
    pub patient_id: String,
    pub model_id: String,
}

impl VolumeKey {
    pub fn new(patient_id: impl Into<String>, model_id: impl Into<String>) -> Self {
        VolumeKey {
            patient_id: patient_id.into(),
            model_id: model_id.into(),
        }
    }
}

impl std::fmt::Display for VolumeKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.patient_id, self.model_id)
    }
}

/// A sub-volume and slice classifier.
pub trait Predictor: Send + Sync {
    /// Hard label and confidence for one TTA inference.
    fn predict_subvolume(&self, key: &VolumeKey, plan: &TtaPlan) -> Result<(Label, f64)>;

    /// `(p_covid, p_pneumonia, p_healthy)` for every slice, in slice order.
    fn predict_slices(&self, key: &VolumeKey) -> Result<Vec<[f64; 3]>>;
}

type SubvolumeKey = (String, String, usize, FlipSpec);

/// Replays externally computed predictions.
#[derive(Debug, Default, Clone)]
pub struct FilePredictor {
    subvolumes: BTreeMap<SubvolumeKey, (Label, f64)>,
    slices: BTreeMap<VolumeKey, BTreeMap<usize, [f64; 3]>>,
    slice_counts: BTreeMap<String, usize>,
}

impl FilePredictor {
    /// Fails with `InvariantViolation` on invalid or duplicate records.
    pub fn from_records(records: &[PredictionRecord]) -> Result<Self> {
        let mut p = FilePredictor::default();
        for r in records {
            r.validate()?;
            let dup = match &r.kind {
                PredictionKind::SubVolume {
                    start,
                    flips,
                    label,
                    confidence,
                } => p
                    .subvolumes
                    .insert(
                        (r.patient_id.clone(), r.model_id.clone(), *start, *flips),
                        (*label, *confidence),
                    )
                    .is_some(),
                PredictionKind::Slice { index, probs } => p
                    .slices
                    .entry(VolumeKey::new(&r.patient_id, &r.model_id))
                    .or_default()
                    .insert(*index, *probs)
                    .is_some(),
            };
            if dup {
                return Err(Error::InvariantViolation(format!(
                    "duplicate prediction record for {}/{}",
                    r.patient_id, r.model_id
                )));
            }
        }
        Ok(p)
    }

    /// Declares the true slice count of each patient so that missing
    /// trailing slices are detected too.
    pub fn with_slice_counts(mut self, counts: BTreeMap<String, usize>) -> Self {
        self.slice_counts = counts;
        self
    }

    /// All sub-volume votes grouped by patient and then model.
    pub fn subvolume_votes(&self) -> BTreeMap<String, BTreeMap<String, Vec<(Label, f64)>>> {
        let mut out: BTreeMap<String, BTreeMap<String, Vec<(Label, f64)>>> = BTreeMap::new();
        for ((patient, model, _, _), vote) in &self.subvolumes {
            out.entry(patient.clone())
                .or_default()
                .entry(model.clone())
                .or_default()
                .push(*vote);
        }
        out
    }

    /// Keys with slice-level predictions.
    pub fn slice_keys(&self) -> impl Iterator<Item = &VolumeKey> {
        self.slices.keys()
    }
}

impl Predictor for FilePredictor {
    fn predict_subvolume(&self, key: &VolumeKey, plan: &TtaPlan) -> Result<(Label, f64)> {
        self.subvolumes
            .get(&(
                key.patient_id.clone(),
                key.model_id.clone(),
                plan.subvolume.start,
                plan.flips,
            ))
            .copied()
            .ok_or_else(|| {
                Error::MissingPrediction(format!("{key} start {} flips {:?}", plan.subvolume.start, plan.flips))
            })
    }

    fn predict_slices(&self, key: &VolumeKey) -> Result<Vec<[f64; 3]>> {
        let by_index = self
            .slices
            .get(key)
            .ok_or_else(|| Error::MissingPrediction(format!("{key} slices")))?;
        let max = *by_index.keys().next_back().expect("entries are created with a value");
        let n = self
            .slice_counts
            .get(&key.patient_id)
            .copied()
            .unwrap_or(max + 1)
            .max(max + 1);
        let missing: Vec<usize> = (0..n).filter(|i| !by_index.contains_key(i)).collect();
        if !missing.is_empty() {
            return Err(Error::IncompleteSliceSet {
                patient: key.patient_id.clone(),
                missing,
            });
        }
        Ok(by_index.values().copied().collect())
    }
}

/// Parameters of the synthetic generative predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticPredictorConfig {
    /// Chance that a central slice of a COVID volume carries lesion signal.
    pub lesion_prob_covid: f64,
    /// Same for NON_COVID volumes (false-positive lesions).
    pub lesion_prob_noncovid: f64,
    /// Standard deviation of the additive logit noise.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Fraction of the volume, centered, where lesions can appear.
    pub band_fraction: f64,
    /// Logit margin of a clean slice prediction.
    pub logit_scale: f64,
}

impl SyntheticPredictorConfig {
    pub fn new(lesion_prob_covid: f64, lesion_prob_noncovid: f64, noise_sigma: f64, seed: u64) -> Result<Self> {
        SyntheticPredictorConfig {
            lesion_prob_covid,
            lesion_prob_noncovid,
            noise_sigma,
            seed,
            ..Default::default()
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        for (what, v) in [
            ("lesion_prob_covid", self.lesion_prob_covid),
            ("lesion_prob_noncovid", self.lesion_prob_noncovid),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange {
                    what,
                    value: v,
                    lo: 0.0,
                    hi: 1.0,
                });
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma {} must be >= 0",
                self.noise_sigma
            )));
        }
        if !(self.band_fraction > 0.0 && self.band_fraction <= 1.0) {
            return Err(Error::OutOfRange {
                what: "band_fraction",
                value: self.band_fraction,
                lo: 0.0,
                hi: 1.0,
            });
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::InvalidConfig("logit_scale must be positive".into()));
        }
        Ok(self)
    }
}

impl Default for SyntheticPredictorConfig {
    fn default() -> Self {
        SyntheticPredictorConfig {
            lesion_prob_covid: 0.8,
            lesion_prob_noncovid: 0.05,
            noise_sigma: 0.0,
            seed: 0,
            band_fraction: 0.5,
            logit_scale: 3.0,
        }
    }
}

/// Test double for the external networks. COVID-like lesions appear only in
/// a central band of slices, each with a per-class probability; predictions
/// are clean softmax outputs perturbed by Gaussian logit noise. Every draw
/// is keyed on `(seed, patient, ...)`, so repeated queries agree.
#[derive(Debug, Clone)]
pub struct SyntheticPredictor {
    cfg: SyntheticPredictorConfig,
    cohort: BTreeMap<String, (Label, usize)>,
}

impl SyntheticPredictor {
    /// `cohort` maps each patient to its ground truth and slice count.
    pub fn new(cfg: SyntheticPredictorConfig, cohort: BTreeMap<String, (Label, usize)>) -> Result<Self> {
        let cfg = cfg.validated()?;
        if cohort.values().any(|&(_, n)| n == 0) {
            return Err(Error::ZeroLength);
        }
        Ok(SyntheticPredictor { cfg, cohort })
    }

    pub fn config(&self) -> &SyntheticPredictorConfig {
        &self.cfg
    }

    pub fn cohort(&self) -> &BTreeMap<String, (Label, usize)> {
        &self.cohort
    }

    fn lookup(&self, patient: &str) -> Result<(Label, usize)> {
        self.cohort
            .get(patient)
            .copied()
            .ok_or_else(|| Error::MissingPrediction(format!("patient {patient} not in synthetic cohort")))
    }

    /// Whether slice `i` of `n` lies in the central band, by slice center.
    pub fn in_band(&self, i: usize, n: usize) -> bool {
        let pos = (i as f64 + 0.5) / n as f64;
        let half = self.cfg.band_fraction / 2.0;
        (0.5 - half..=0.5 + half).contains(&pos)
    }

    /// Ground-truth lesion flag of slice `i`; independent of the model.
    pub fn has_lesion(&self, patient: &str, label: Label, i: usize, n: usize) -> bool {
        if !self.in_band(i, n) {
            return false;
        }
        let p = match label {
            Label::Covid => self.cfg.lesion_prob_covid,
            Label::NonCovid => self.cfg.lesion_prob_noncovid,
        };
        let mut rng = seeded_rng(self.cfg.seed, &[b"lesion", patient.as_bytes(), &i.to_le_bytes()]);
        rng.random::<f64>() < p
    }

    fn noise<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.cfg.noise_sigma == 0.0 {
            0.0
        } else {
            let z: f64 = StandardNormal.sample(rng);
            z * self.cfg.noise_sigma
        }
    }

    /// Every TTA inference for every model as SUBVOLUME records, then every
    /// slice for every model as SLICE records.
    pub fn records(&self, models: &[String], target_len: usize) -> Result<Vec<PredictionRecord>> {
        let mut out = Vec::new();
        for (patient, &(_, n)) in &self.cohort {
            for model in models {
                let key = VolumeKey::new(patient, model);
                for plan in inference_plan(n, target_len)? {
                    let (label, conf) = self.predict_subvolume(&key, &plan)?;
                    out.push(PredictionRecord::subvolume(
                        patient,
                        model,
                        plan.subvolume.start,
                        plan.flips,
                        label,
                        conf,
                    ));
                }
            }
        }
        for patient in self.cohort.keys() {
            for model in models {
                let probs = self.predict_slices(&VolumeKey::new(patient, model))?;
                out.extend(
                    probs
                        .into_iter()
                        .enumerate()
                        .map(|(i, p)| PredictionRecord::slice(patient, model, i, p)),
                );
            }
        }
        Ok(out)
    }
}

fn softmax3(z: [f64; 3]) -> [f64; 3] {
    let m = z[0].max(z[1]).max(z[2]);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

fn flip_bits(f: FlipSpec) -> [u8; 3] {
    [f.horizontal as u8, f.vertical as u8, f.depth as u8]
}

impl Predictor for SyntheticPredictor {
    /// The COVID score is the lesion fraction over the plan's central-band
    /// slices; with zero noise it is used as is, otherwise noise is added
    /// in logit space.
    fn predict_subvolume(&self, key: &VolumeKey, plan: &TtaPlan) -> Result<(Label, f64)> {
        let (label, n) = self.lookup(&key.patient_id)?;
        if let Some(&bad) = plan.subvolume.indices.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        let mut observed: Vec<usize> = plan
            .subvolume
            .indices
            .iter()
            .copied()
            .filter(|&i| self.in_band(i, n))
            .collect();
        if observed.is_empty() {
            observed = plan.subvolume.indices.clone();
        }
        let lesions = observed
            .iter()
            .filter(|&&i| self.has_lesion(&key.patient_id, label, i, n))
            .count();
        let frac = lesions as f64 / observed.len() as f64;

        let mut rng = seeded_rng(
            self.cfg.seed,
            &[
                b"subvolume",
                key.patient_id.as_bytes(),
                key.model_id.as_bytes(),
                &plan.subvolume.start.to_le_bytes(),
                &plan.subvolume.stride.to_le_bytes(),
                &flip_bits(plan.flips),
            ],
        );
        let z = self.noise(&mut rng);
        let p = if z == 0.0 {
            frac
        } else {
            let f = frac.clamp(0.01, 0.99);
            1.0 / (1.0 + (-((f / (1.0 - f)).ln() + z)).exp())
        };
        Ok(if p >= 0.5 {
            (Label::Covid, p)
        } else {
            (Label::NonCovid, 1.0 - p)
        })
    }

    fn predict_slices(&self, key: &VolumeKey) -> Result<Vec<[f64; 3]>> {
        let (label, n) = self.lookup(&key.patient_id)?;
        let scale = self.cfg.logit_scale;
        let mut rng = seeded_rng(
            self.cfg.seed,
            &[b"slices", key.patient_id.as_bytes(), key.model_id.as_bytes()],
        );
        Ok((0..n)
            .map(|i| {
                let mut z = if self.has_lesion(&key.patient_id, label, i, n) {
                    [scale, 0.0, 0.0]
                } else {
                    [0.0, 0.0, scale]
                };
                for v in &mut z {
                    *v += self.noise(&mut rng);
                }
                softmax3(z)
            })
            .collect())
    }
}

/// A seeded cohort of `n_covid + n_noncovid` patients named `p0000`,
/// `p0001`, ... with slice counts uniform in `slices`.
pub fn synthetic_cohort(
    n_covid: usize,
    n_noncovid: usize,
    slices: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<BTreeMap<String, (Label, usize)>> {
    if *slices.start() == 0 || slices.is_empty() {
        return Err(Error::InvalidConfig(
            "slice range must be non-empty and start at 1 or more".into(),
        ));
    }
    let mut rng = seeded_rng(seed, &[b"cohort"]);
    let total = n_covid + n_noncovid;
    let width = total.max(1).to_string().len().max(4);
    Ok((0..total)
        .map(|i| {
            let label = if i < n_covid { Label::Covid } else { Label::NonCovid };
            let n = rng.random_range(slices.clone());
            (format!("p{i:0width$}"), (label, n))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::parse_predictions;
    use crate::sampling::{inference_subvolumes, tta_variants};

    fn degenerate(seed: u64) -> SyntheticPredictor {
        let cfg = SyntheticPredictorConfig::new(1.0, 0.0, 0.0, seed).unwrap();
        let cohort = [
            ("c".to_string(), (Label::Covid, 300)),
            ("n".to_string(), (Label::NonCovid, 90)),
        ]
        .into();
        SyntheticPredictor::new(cfg, cohort).unwrap()
    }

    #[test]
    fn file_lookup_and_missing() {
        let recs = parse_predictions(
            "p,m,SUBVOLUME,0,000,COVID,0.910000\n\
             p,m,SUBVOLUME,0,100,NON_COVID,0.600000\n",
        )
        .unwrap();
        let fp = FilePredictor::from_records(&recs).unwrap();
        let plans = tta_variants(&inference_subvolumes(100).unwrap()[0]);
        let key = VolumeKey::new("p", "m");
        assert_eq!(fp.predict_subvolume(&key, &plans[0]).unwrap(), (Label::Covid, 0.91));
        assert_eq!(fp.predict_subvolume(&key, &plans[4]).unwrap(), (Label::NonCovid, 0.6));
        assert!(matches!(
            fp.predict_subvolume(&key, &plans[1]),
            Err(Error::MissingPrediction(_))
        ));
        assert!(matches!(
            fp.predict_subvolume(&VolumeKey::new("q", "m"), &plans[0]),
            Err(Error::MissingPrediction(_))
        ));
    }

    #[test]
    fn file_slices_in_order_and_incomplete() {
        let mut recs: Vec<_> = (0..10)
            .rev()
            .map(|i| PredictionRecord::slice("p", "m", i, [i as f64 / 10.0, 0.0, 1.0 - i as f64 / 10.0]))
            .collect();
        let fp = FilePredictor::from_records(&recs).unwrap();
        let got = fp.predict_slices(&VolumeKey::new("p", "m")).unwrap();
        assert_eq!(got.len(), 10);
        assert!(got.iter().enumerate().all(|(i, p)| p[0] == i as f64 / 10.0));
        assert_eq!(fp.predict_slices(&VolumeKey::new("p", "m")).unwrap(), got);

        recs.retain(|r| !matches!(r.kind, PredictionKind::Slice { index: 5, .. }));
        let fp = FilePredictor::from_records(&recs).unwrap();
        match fp.predict_slices(&VolumeKey::new("p", "m")) {
            Err(Error::IncompleteSliceSet { missing, .. }) => assert_eq!(missing, vec![5]),
            other => panic!("{other:?}"),
        }
        recs.retain(|r| !matches!(r.kind, PredictionKind::Slice { index: 9, .. }));
        let fp = FilePredictor::from_records(&recs)
            .unwrap()
            .with_slice_counts([("p".to_string(), 10)].into());
        match fp.predict_slices(&VolumeKey::new("p", "m")) {
            Err(Error::IncompleteSliceSet { missing, .. }) => assert_eq!(missing, vec![5, 9]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_records_rejected() {
        let r = PredictionRecord::slice("p", "m", 0, [1.0, 0.0, 0.0]);
        assert!(FilePredictor::from_records(&[r.clone(), r]).is_err());
    }

    #[test]
    fn degenerate_synthetic_is_certain() {
        let sp = degenerate(3);
        for n_key in ["c", "n"] {
            let n = sp.cohort()[n_key].1;
            for plan in inference_plan(n, 256).unwrap() {
                let got = sp.predict_subvolume(&VolumeKey::new(n_key, "m0"), &plan).unwrap();
                let want = if n_key == "c" { Label::Covid } else { Label::NonCovid };
                assert_eq!(got, (want, 1.0));
            }
        }
    }

    #[test]
    fn synthetic_covid_center_is_lesioned() {
        let sp = degenerate(9);
        let probs = sp.predict_slices(&VolumeKey::new("c", "m")).unwrap();
        let n = probs.len();
        assert_eq!(n, 300);
        for (i, p) in probs.iter().enumerate() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if sp.in_band(i, n) {
                assert!(p[0] > p[2], "slice {i}: {p:?}");
            } else {
                assert!(p[2] > p[0]);
            }
        }
        let healthy = sp.predict_slices(&VolumeKey::new("n", "m")).unwrap();
        assert!(healthy.iter().all(|p| p[2] > p[0]));
    }

    #[test]
    fn synthetic_is_reproducible_and_noisy() {
        let cfg = SyntheticPredictorConfig::new(0.6, 0.1, 1.0, 42).unwrap();
        let cohort: BTreeMap<_, _> = [("c".to_string(), (Label::Covid, 120))].into();
        let a = SyntheticPredictor::new(cfg, cohort.clone()).unwrap();
        let b = SyntheticPredictor::new(cfg, cohort).unwrap();
        let key = VolumeKey::new("c", "m");
        assert_eq!(a.predict_slices(&key).unwrap(), b.predict_slices(&key).unwrap());
        let plans = inference_plan(120, 256).unwrap();
        let votes: Vec<_> = plans.iter().map(|p| a.predict_subvolume(&key, p).unwrap()).collect();
        let again: Vec<_> = plans.iter().map(|p| b.predict_subvolume(&key, p).unwrap()).collect();
        assert_eq!(votes, again);
        assert!(
            votes.windows(2).any(|w| w[0].1 != w[1].1),
            "flips should see different noise"
        );
        let other = a.predict_slices(&VolumeKey::new("c", "m2")).unwrap();
        assert_ne!(other, a.predict_slices(&key).unwrap());
    }

    #[test]
    fn synthetic_unknown_patient() {
        let sp = degenerate(0);
        assert!(matches!(
            sp.predict_slices(&VolumeKey::new("zz", "m")),
            Err(Error::MissingPrediction(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(SyntheticPredictorConfig::new(1.2, 0.0, 0.0, 0).is_err());
        assert!(SyntheticPredictorConfig::new(0.5, 0.0, -1.0, 0).is_err());
    }

    #[test]
    fn records_cover_every_inference() {
        let sp = degenerate(1);
        let recs = sp.records(&["a".into(), "b".into()], 256).unwrap();
        // c: 300 slices -> k = 1 -> 2 sub-volumes x 8; n: 90 -> 1 x 8
        let sub = recs
            .iter()
            .filter(|r| matches!(r.kind, PredictionKind::SubVolume { .. }))
            .count();
        assert_eq!(sub, 2 * (16 + 8));
        assert_eq!(recs.len() - sub, 2 * (300 + 90));
    }

    #[test]
    fn cohort_is_seeded() {
        let a = synthetic_cohort(3, 2, 10..=20, 5).unwrap();
        assert_eq!(a, synthetic_cohort(3, 2, 10..=20, 5).unwrap());
        assert_eq!(a.values().filter(|(l, _)| *l == Label::Covid).count(), 3);
        assert!(a.values().all(|(_, n)| (10..=20).contains(n)));
        assert!(a.contains_key("p0000"));
    }
}
