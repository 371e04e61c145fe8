use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability with which either augmentation is applied.
pub const DEFAULT_AUG_PROB: f64 = 0.5;

/// Color augmentation applied to training images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    None,
    /// Broadcast one randomly chosen channel to all three.
    #[default]
    Channel,
    /// Replace all channels by luminance.
    Grayscale,
}

impl Augmentation {
    pub fn apply<R: Rng + ?Sized>(self, x: &[f64], channels: usize, prob: f64, rng: &mut R) -> Result<Vec<f64>> {
        match self {
            Augmentation::None => {
                check_channels(x, channels)?;
                Ok(x.to_vec())
            }
            Augmentation::Channel => channel_augment(x, channels, prob, rng),
            Augmentation::Grayscale => grayscale_augment(x, channels, prob, rng),
        }
    }
}

fn check_channels(x: &[f64], channels: usize) -> Result<usize> {
    if channels != 3 || x.is_empty() || !x.len().is_multiple_of(3) {
        return Err(Error::Input(format!(
            "expected a non-empty 3-channel tensor, got {channels} channels and {} values",
            x.len()
        )));
    }
    Ok(x.len() / 3)
}

/// Chosen channel, or `None` when the augmentation is skipped.
pub(crate) fn channel_choice<R: Rng + ?Sized>(prob: f64, rng: &mut R) -> Option<usize> {
    let apply = rng.random::<f64>() < prob;
    let channel = rng.random_range(0..3);
    apply.then_some(channel)
}

/// With probability `prob`, copies one uniformly chosen channel over the
/// other two.
pub fn channel_augment<R: Rng + ?Sized>(x: &[f64], channels: usize, prob: f64, rng: &mut R) -> Result<Vec<f64>> {
    let plane = check_channels(x, channels)?;
    Ok(match channel_choice(prob, rng) {
        Some(c) => x[c * plane..(c + 1) * plane].repeat(3),
        None => x.to_vec(),
    })
}

pub(crate) const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Per-channel mean and standard deviation used to standardize network
/// inputs (the usual ImageNet statistics).
pub const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Standardizes a channel-major `3×H×W` tensor in place.
pub fn normalize_input(x: &mut [f64]) {
    let plane = x.len() / 3;
    for (c, chunk) in x.chunks_mut(plane.max(1)).enumerate().take(3) {
        chunk.iter_mut().for_each(|v| *v = (*v - INPUT_MEAN[c]) / INPUT_STD[c]);
    }
}

/// With probability `prob`, replaces every channel by `0.299R + 0.587G + 0.114B`.
pub fn grayscale_augment<R: Rng + ?Sized>(x: &[f64], channels: usize, prob: f64, rng: &mut R) -> Result<Vec<f64>> {
    let plane = check_channels(x, channels)?;
    if rng.random::<f64>() >= prob {
        return Ok(x.to_vec());
    }
    let (r, rest) = x.split_at(plane);
    let (g, b) = rest.split_at(plane);
    let luma: Vec<f64> = (0..plane)
        .map(|i| (LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * b[i]).clamp(0.0, 1.0))
        .collect();
    Ok(luma.repeat(3))
}
