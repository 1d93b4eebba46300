//! Synthetic conditioned trajectories standing in for motion capture.
//!
//! Each sample is `FRAMES` points in the plane traced by a closed-form curve
//! whose shape depends on the class label:
//!
//! | label | name     | curve                                                    |
//! |-------|----------|----------------------------------------------------------|
//! | 0     | circle   | `c + r (cos(phi + 2 pi f tau), sin(phi + 2 pi f tau))`   |
//! | 1     | line     | `c + len (tau - 1/2) (cos theta, sin theta)`             |
//! | 2     | zigzag   | `(2 tau - 1, a tri(f tau + phi))`, `tri` a unit triangle |
//! | 3     | sine     | `(2 tau - 1, a sin(2 pi f tau + phi))`                   |
//!
//! with `tau = l / (FRAMES - 1)`. Per-sample parameters are drawn uniformly
//! around class centres; `jitter` scales the width of those ranges.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};

pub const FRAMES: usize = 16;
pub const CHANNELS: usize = 2;
pub const FLAT: usize = FRAMES * CHANNELS;
pub const CLASS_NAMES: [&str; 4] = ["circle", "line", "zigzag", "sine"];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyMotion {
    /// `FRAMES x CHANNELS`.
    pub frames: Array2<f64>,
    pub label: usize,
    /// Shape parameters (amplitude / radius, phase / angle, frequency / length).
    pub params: [f64; 3],
}

/// `(centre, half_width)` of a uniformly drawn parameter.
type Range = (f64, f64);

fn draw<R: Rng + ?Sized>(rng: &mut R, (mid, half): Range, jitter: f64) -> f64 {
    if jitter == 0.0 || half == 0.0 {
        mid
    } else {
        mid + jitter * half * rng.random_range(-1.0..1.0)
    }
}

fn triangle(x: f64) -> f64 {
    let f = x - x.floor();
    1.0 - 4.0 * (f - 0.5).abs()
}

pub fn gen_sample<R: Rng + ?Sized>(label: usize, jitter: f64, rng: &mut R) -> ToyMotion {
    let mut frames = Array2::zeros((FRAMES, CHANNELS));
    let params;
    let tau = |l: usize| l as f64 / (FRAMES - 1) as f64;
    match label {
        0 => {
            let r = draw(rng, (0.8, 0.2), jitter);
            let phi = draw(rng, (PI, PI), jitter);
            let f = draw(rng, (0.75, 0.15), jitter);
            let (cx, cy) = (draw(rng, (0.0, 0.2), jitter), draw(rng, (0.0, 0.2), jitter));
            for l in 0..FRAMES {
                let a = phi + 2.0 * PI * f * tau(l);
                frames[[l, 0]] = cx + r * a.cos();
                frames[[l, 1]] = cy + r * a.sin();
            }
            params = [r, phi, f];
        }
        1 => {
            let len = draw(rng, (1.6, 0.4), jitter);
            let theta = draw(rng, (PI, PI), jitter);
            let (cx, cy) = (draw(rng, (0.0, 0.2), jitter), draw(rng, (0.0, 0.2), jitter));
            for l in 0..FRAMES {
                let d = len * (tau(l) - 0.5);
                frames[[l, 0]] = cx + d * theta.cos();
                frames[[l, 1]] = cy + d * theta.sin();
            }
            params = [len, theta, 0.0];
        }
        2 => {
            let a = draw(rng, (0.45, 0.15), jitter);
            let phi = draw(rng, (0.5, 0.5), jitter);
            let f = draw(rng, (2.0, 0.5), jitter);
            for l in 0..FRAMES {
                frames[[l, 0]] = 2.0 * tau(l) - 1.0;
                frames[[l, 1]] = a * triangle(f * tau(l) + phi);
            }
            params = [a, phi, f];
        }
        3 => {
            let a = draw(rng, (0.45, 0.15), jitter);
            let phi = draw(rng, (PI, PI), jitter);
            let f = draw(rng, (1.0, 0.2), jitter);
            for l in 0..FRAMES {
                frames[[l, 0]] = 2.0 * tau(l) - 1.0;
                frames[[l, 1]] = a * (2.0 * PI * f * tau(l) + phi).sin();
            }
            params = [a, phi, f];
        }
        _ => unreachable!("label checked by caller"),
    }
    ToyMotion {
        frames,
        label,
        params,
    }
}

/// `n` samples with labels cycling through `0..classes`.
pub fn gen_dataset<R: Rng + ?Sized>(n: usize, classes: usize, jitter: f64, rng: &mut R) -> Result<Vec<ToyMotion>> {
    if classes == 0 || classes > CLASS_NAMES.len() {
        return Err(Error::Invalid(format!(
            "classes must be in 1..={}, got {classes}",
            CLASS_NAMES.len()
        )));
    }
    if n < classes {
        return Err(Error::Invalid(format!("need at least {classes} samples, got {n}")));
    }
    Ok((0..n).map(|i| gen_sample(i % classes, jitter, rng)).collect())
}

/// Row-flattened view of a dataset: one `FLAT`-wide row per sample,
/// frames stored `[x0, y0, x1, y1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSet {
    pub frames: Array2<f64>,
    pub labels: Vec<usize>,
}

impl MotionSet {
    pub fn from_samples(samples: &[ToyMotion]) -> Self {
        let mut frames = Array2::zeros((samples.len(), FLAT));
        for (mut row, s) in frames.rows_mut().into_iter().zip(samples) {
            row.assign(&ArrayView1::from(s.frames.as_slice().expect("standard layout")));
        }
        Self {
            frames,
            labels: samples.iter().map(|s| s.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
