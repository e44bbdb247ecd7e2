use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub grid: (usize, usize),
    pub channels: usize,
    pub size: usize,
}

/// Samples as `[N×channels]` token matrices (row-major grid order).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Elementwise mean of the samples of class `c`, if any.
    pub fn class_mean(&self, c: usize) -> Option<Tensor> {
        let members: Vec<&Tensor> = self
            .samples
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == c)
            .map(|(s, _)| s)
            .collect();
        let first = members.first()?;
        let mut acc = vec![0.0; first.numel()];
        for m in &members {
            for (a, v) in acc.iter_mut().zip(m.data()) {
                *a += v;
            }
        }
        let k = members.len() as f64;
        Some(Tensor::raw(first.shape().to_vec(), acc.into_iter().map(|a| a / k).collect()))
    }
}

/// Even classes are oriented gratings, odd classes Gaussian blobs; angle,
/// frequency and blob centre depend on the class, phase and position jitter
/// on the sample. Channels are phase-shifted copies. The whole dataset is
/// then standardized to zero mean and unit variance.
pub fn synth_dataset(seed: u64, spec: &DatasetSpec) -> Result<Dataset> {
    let DatasetSpec {
        classes,
        grid: (gh, gw),
        channels,
        size,
    } = *spec;
    if classes == 0 || channels == 0 || gh == 0 || gw == 0 {
        return Err(Error::config("dataset needs at least one class, channel and grid cell"));
    }
    let mut r = rng::stream(seed, Stream::Data, 0);
    let mut samples = Vec::with_capacity(size);
    let mut labels = Vec::with_capacity(size);
    for i in 0..size {
        let c = i % classes;
        let k = c / 2;
        let mut data = Vec::with_capacity(gh * gw * channels);
        let (jy, jx): (f64, f64) = (r.gen_range(-0.05..0.05), r.gen_range(-0.05..0.05));
        let phase: f64 = r.gen_range(-0.3..0.3);
        for y in 0..gh {
            for x in 0..gw {
                let (u, v) = ((y as f64 + 0.5) / gh as f64, (x as f64 + 0.5) / gw as f64);
                for ch in 0..channels {
                    let shift = ch as f64 * PI / 3.0;
                    let val = if c % 2 == 0 {
                        let theta = PI * k as f64 / (classes.div_ceil(2)) as f64;
                        let freq = 1.0 + (k % 3) as f64;
                        let s = u * theta.cos() + v * theta.sin();
                        (2.0 * PI * freq * s + phase + shift).sin()
                    } else {
                        let a = 2.0 * PI * (k as f64 + 0.5) / (classes / 2).max(1) as f64;
                        let (cy, cx) = (0.5 + 0.25 * a.sin() + jy, 0.5 + 0.25 * a.cos() + jx);
                        let d2 = (u - cy).powi(2) + (v - cx).powi(2);
                        (-d2 / 0.02).exp() * (1.0 + 0.3 * shift.cos()) - 0.5
                    };
                    data.push(val + r.gen_range(-0.05..0.05));
                }
            }
        }
        samples.push(Tensor::raw(vec![gh * gw, channels], data));
        labels.push(c);
    }
    let count = (size * gh * gw * channels) as f64;
    if size > 0 {
        let mean = samples.iter().map(Tensor::sum).sum::<f64>() / count;
        let var = samples
            .iter()
            .flat_map(|s| s.data().iter())
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / count;
        let std = var.sqrt().max(1e-12);
        for s in &mut samples {
            *s = s.map(|v| (v - mean) / std);
        }
    }
    Ok(Dataset { samples, labels })
}

/// Linear interpolant `x_t = (1 − t)·x + t·ε` and its velocity `ε − x`.
pub fn interpolate(x: &Tensor, eps: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("interpolation time {t} outside [0, 1]")));
    }
    let x_t = x.zip_map(eps, |a, e| (1.0 - t) * a + t * e)?;
    let v = x.zip_map(eps, |a, e| e - a)?;
    Ok((x_t, v))
}
