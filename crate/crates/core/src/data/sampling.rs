use rand::Rng;

use super::{apply_mask, instance_normalize, MaskSpec, TimeSeriesFrame};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A past window, the current window `d` steps later, and the masked current
/// window fed to the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct SiamesePair {
    pub x_past: Tensor<f32>,
    pub x_curr: Tensor<f32>,
    pub x_curr_masked: Tensor<f32>,
    /// Row-major `T × C`, true where masked.
    pub mask: Vec<bool>,
    pub d: usize,
    pub curr_start: usize,
}

/// Distance `d` uniform on `{0, …, min(T·r, curr_start)}`.
pub fn sample_distance(curr_start: usize, t: usize, r: usize, rng: &mut impl Rng) -> usize {
    let max_d = (t * r).min(curr_start);
    rng.random_range(0..=max_d)
}

/// Pair whose current window starts at `curr_start`; no mask applied.
pub fn sample_siamese_pair_at(
    frame: &TimeSeriesFrame,
    curr_start: usize,
    t: usize,
    r: usize,
    rng: &mut impl Rng,
) -> Result<SiamesePair> {
    if t == 0 || t > frame.len() {
        return Err(Error::Data(format!(
            "window length {t} does not fit a series of length {}",
            frame.len()
        )));
    }
    if curr_start + t > frame.len() {
        return Err(Error::Data(format!(
            "current window at {curr_start} runs past the series end"
        )));
    }
    let d = sample_distance(curr_start, t, r, rng);
    let x_curr = frame.window(curr_start, t)?;
    let x_past = frame.window(curr_start - d, t)?;
    Ok(SiamesePair {
        mask: vec![false; x_curr.numel()],
        x_curr_masked: x_curr.clone(),
        x_past,
        x_curr,
        d,
        curr_start,
    })
}

/// Pair with `curr_start` uniform over all valid window starts; raw values,
/// no mask applied.
pub fn sample_siamese_pair(
    frame: &TimeSeriesFrame,
    t: usize,
    r: usize,
    rng: &mut impl Rng,
) -> Result<SiamesePair> {
    if t == 0 || t > frame.len() {
        return Err(Error::Data(format!(
            "window length {t} does not fit a series of length {}",
            frame.len()
        )));
    }
    let curr_start = rng.random_range(0..=frame.len() - t);
    sample_siamese_pair_at(frame, curr_start, t, r, rng)
}

/// `batch_size` independent pre-training pairs. Both windows are instance
/// normalised; only the current window is masked.
pub fn make_pretrain_batch(
    frame: &TimeSeriesFrame,
    t: usize,
    r: usize,
    mask: &MaskSpec,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<SiamesePair>> {
    (0..batch_size)
        .map(|_| {
            let raw = sample_siamese_pair(frame, t, r, rng)?;
            let (x_past, _) = instance_normalize(&raw.x_past);
            let (x_curr, _) = instance_normalize(&raw.x_curr);
            let (x_curr_masked, mask) = apply_mask(&x_curr, mask, rng)?;
            Ok(SiamesePair {
                x_past,
                x_curr,
                x_curr_masked,
                mask,
                d: raw.d,
                curr_start: raw.curr_start,
            })
        })
        .collect()
}
