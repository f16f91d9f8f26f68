//! Per-channel image standardization.

use super::types::{ImageType, NormStats, Raster};
use crate::error::{Error, Result};

/// Streaming pooled mean/variance per channel (population convention).
///
/// Each raster is reduced with a two-pass mean/M2 and merged with Chan's
/// update, so the result does not depend on pixel magnitudes drifting.
#[derive(Debug, Clone)]
pub struct NormAccumulator {
    image_type: ImageType,
    count: Vec<f64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
    scenes: usize,
}

impl NormAccumulator {
    pub fn new(image_type: ImageType) -> Self {
        let c = image_type.channels();
        NormAccumulator {
            image_type,
            count: vec![0.0; c],
            mean: vec![0.0; c],
            m2: vec![0.0; c],
            scenes: 0,
        }
    }

    pub fn push(&mut self, raster: &Raster) -> Result<()> {
        if raster.channels != self.image_type.channels() {
            return Err(Error::InvalidInput(format!(
                "{}-channel raster given to {} statistics",
                raster.channels, self.image_type
            )));
        }
        for c in 0..raster.channels {
            let plane = raster.plane(c);
            if plane.is_empty() {
                continue;
            }
            let n_b = plane.len() as f64;
            let mean_b = plane.iter().map(|&v| v as f64).sum::<f64>() / n_b;
            let m2_b = plane
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean_b;
                    d * d
                })
                .sum::<f64>();
            let n_a = self.count[c];
            let n = n_a + n_b;
            let delta = mean_b - self.mean[c];
            self.mean[c] += delta * n_b / n;
            self.m2[c] += m2_b + delta * delta * n_a * n_b / n;
            self.count[c] = n;
        }
        self.scenes += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<NormStats> {
        if self.scenes < 2 {
            return Err(Error::Degenerate(format!(
                "normalization needs at least 2 scenes, got {}",
                self.scenes
            )));
        }
        let std: Vec<f64> = self
            .m2
            .iter()
            .zip(&self.count)
            .map(|(m2, n)| (m2 / n).sqrt())
            .collect();
        if let Some(c) = std.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::Degenerate(format!(
                "channel {c} of {} training images has zero variance",
                self.image_type
            )));
        }
        Ok(NormStats {
            image_type: self.image_type,
            mean: self.mean,
            std,
        })
    }
}

pub fn compute_norm_stats<'a, I>(train_scenes: I, image_type: ImageType) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a Raster>,
{
    let mut acc = NormAccumulator::new(image_type);
    for r in train_scenes {
        acc.push(r)?;
    }
    acc.finish()
}

fn check_channels(raster: &Raster, stats: &NormStats) -> Result<()> {
    if raster.channels != stats.mean.len() || stats.mean.len() != stats.std.len() {
        return Err(Error::InvalidInput(format!(
            "raster has {} channels, statistics have {}",
            raster.channels,
            stats.mean.len()
        )));
    }
    Ok(())
}

/// `(x - mean[c]) / std[c]` per channel.
pub fn normalize(raster: &Raster, stats: &NormStats) -> Result<Raster> {
    check_channels(raster, stats)?;
    let mut out = raster.clone();
    for c in 0..out.channels {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for v in out.plane_mut(c) {
            *v = ((*v as f64 - m) / s) as f32;
        }
    }
    Ok(out)
}

pub fn denormalize(raster: &Raster, stats: &NormStats) -> Result<Raster> {
    check_channels(raster, stats)?;
    let mut out = raster.clone();
    for c in 0..out.channels {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for v in out.plane_mut(c) {
            *v = (*v as f64 * s + m) as f32;
        }
    }
    Ok(out)
}
