//! Slice-index selection for long volumes.
//!
//! A volume with `n` slices and a target length `L` is traversed with stride
//! `k = floor(n / L)`. Training draws one start in `0..=k`; inference takes
//! every start in `0..=k`, giving `k + 1` sub-volumes, each expanded into the
//! eight flip combinations for test-time augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::preprocess::{Flip, FlipSpec};
use crate::types::Volume;

pub const TRAIN_LEN: usize = 128;
pub const INFER_LEN: usize = 256;

/// A strided selection of slice indices, padded to `target_len` by
/// repeating the last real index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubVolumePlan {
    pub start: usize,
    pub stride: usize,
    pub indices: Vec<usize>,
    pub pad_count: usize,
    pub target_len: usize,
}

impl SubVolumePlan {
    fn build(n: usize, start: usize, stride: usize, target_len: usize) -> Self {
        let indices: Vec<usize> = (start..n).step_by(stride).take(target_len).collect();
        debug_assert!(!indices.is_empty());
        let pad_count = target_len - indices.len();
        SubVolumePlan {
            start,
            stride,
            indices,
            pad_count,
            target_len,
        }
    }

    /// Real indices followed by `pad_count` copies of the last one.
    pub fn entries(&self) -> Vec<usize> {
        let last = *self.indices.last().expect("plans are never empty");
        let mut out = self.indices.clone();
        out.extend(std::iter::repeat_n(last, self.pad_count));
        out
    }

    /// Gathers the planned slices (padding included) from `vol`.
    pub fn materialize(&self, vol: &Volume) -> Result<Volume> {
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= vol.len()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: vol.len(),
            });
        }
        let s = vol.slices();
        let slices = self.entries().into_iter().map(|i| s[i].clone()).collect();
        Volume::new(vol.patient_id(), slices, vol.label())
    }
}

/// Stride for a volume of `n` slices at target length `target_len`.
pub fn stride_for(n: usize, target_len: usize) -> usize {
    (n / target_len).max(1)
}

fn check(n: usize, target_len: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::ZeroLength);
    }
    if target_len == 0 {
        return Err(Error::InvalidConfig("target length must be at least 1".into()));
    }
    Ok(())
}

/// Training sample with a caller-chosen start; `start` must be in `0..=k`.
pub fn train_sample_at(n: usize, start: usize, target_len: usize) -> Result<SubVolumePlan> {
    check(n, target_len)?;
    if n < target_len {
        return Ok(SubVolumePlan::build(n, 0, 1, target_len));
    }
    let k = stride_for(n, target_len);
    if start > k {
        return Err(Error::IndexOutOfRange {
            index: start,
            len: k + 1,
        });
    }
    Ok(SubVolumePlan::build(n, start, k, target_len))
}

/// Training sample of `target_len` entries with the start drawn uniformly
/// from `0..=k` by a generator seeded with `seed`.
pub fn train_sample_with(n: usize, target_len: usize, seed: u64) -> Result<SubVolumePlan> {
    check(n, target_len)?;
    if n < target_len {
        return train_sample_at(n, 0, target_len);
    }
    let k = stride_for(n, target_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    train_sample_at(n, rng.random_range(0..=k), target_len)
}

pub fn train_sample(n: usize, seed: u64) -> Result<SubVolumePlan> {
    train_sample_with(n, TRAIN_LEN, seed)
}

/// All `k + 1` inference sub-volumes (a single padded plan when
/// `n < target_len`).
pub fn inference_subvolumes_with(n: usize, target_len: usize) -> Result<Vec<SubVolumePlan>> {
    check(n, target_len)?;
    if n < target_len {
        return Ok(vec![SubVolumePlan::build(n, 0, 1, target_len)]);
    }
    let k = stride_for(n, target_len);
    Ok((0..=k).map(|s| SubVolumePlan::build(n, s, k, target_len)).collect())
}

pub fn inference_subvolumes(n: usize) -> Result<Vec<SubVolumePlan>> {
    inference_subvolumes_with(n, INFER_LEN)
}

/// One inference unit: a sub-volume plus the flips applied to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TtaPlan {
    pub subvolume: SubVolumePlan,
    pub flips: FlipSpec,
}

impl TtaPlan {
    pub fn materialize(&self, vol: &Volume) -> Result<Volume> {
        Ok(self.subvolume.materialize(vol)?.flip(self.flips))
    }
}

/// The eight flip variants of `plan`, identity first.
pub fn tta_variants(plan: &SubVolumePlan) -> Vec<TtaPlan> {
    FlipSpec::all()
        .into_iter()
        .map(|flips| TtaPlan {
            subvolume: plan.clone(),
            flips,
        })
        .collect()
}

/// Every TTA inference for a volume of `n` slices, in sub-volume then flip
/// order.
pub fn inference_plan(n: usize, target_len: usize) -> Result<Vec<TtaPlan>> {
    Ok(inference_subvolumes_with(n, target_len)?
        .iter()
        .flat_map(tta_variants)
        .collect())
}

/// `patient_id,start,stride,pad_count,target_len`
pub fn format_plan_line(patient_id: &str, plan: &SubVolumePlan) -> String {
    format!(
        "{},{},{},{},{}",
        patient_id, plan.start, plan.stride, plan.pad_count, plan.target_len
    )
}
