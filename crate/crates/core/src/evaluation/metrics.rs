//! Pixel metrics, texture codes and the success rule.

use serde::{Deserialize, Serialize};

use crate::dataio::ImageTensor;
use crate::error::{config, shape, Result};
use crate::Task;

/// Default corruption threshold for both tasks.
pub const DEFAULT_THRESHOLD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistanceKind {
    /// Mean absolute difference.
    L1,
    /// Mean squared difference.
    L2,
}

impl DistanceKind {
    /// Metric that decides success for a task.
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::AttributeEditing => DistanceKind::L2,
            Task::Reenactment => DistanceKind::L1,
        }
    }
}

fn check_pair(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if !a.same_shape(b) {
        return Err(shape(format!(
            "images differ in shape: {}×{}×{} vs {}×{}×{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    Ok(())
}

pub fn distance(a: &ImageTensor, b: &ImageTensor, kind: DistanceKind) -> Result<f64> {
    check_pair(a, b)?;
    let diffs = a.data().iter().zip(b.data()).map(|(&p, &q)| p as f64 - q as f64);
    let total: f64 = match kind {
        DistanceKind::L1 => diffs.map(f64::abs).sum(),
        DistanceKind::L2 => diffs.map(|d| d * d).sum(),
    };
    Ok(total / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB for peak 1; `+∞` for identical images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let mse = distance(a, b, DistanceKind::L2)?;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// PSNR guaranteed by an `ℓ∞` budget: `10·log10(1/ε²)`.
pub fn psnr_floor(epsilon: f64) -> f64 {
    psnr_from_mse(epsilon * epsilon)
}

/// 8-neighbour local binary pattern of the luma channel. Bit `i` is set when
/// neighbour `i` is at least the centre; neighbours run clockwise from the
/// top-left and neighbour `i` owns the value `2^i`; outside pixels read as
/// zero. Codes are divided by 255.
pub fn lbp_map(img: &ImageTensor) -> ImageTensor {
    const RING: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)];
    let luma = img.to_luma();
    let (h, w) = (luma.height as isize, luma.width as isize);
    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h || x >= w {
            0.0
        } else {
            luma.get(y as usize, x as usize, 0)
        }
    };
    let mut out = Vec::with_capacity((h * w) as usize);
    for y in 0..h {
        for x in 0..w {
            let c = at(y, x);
            let code = RING
                .iter()
                .enumerate()
                .filter(|(_, (dy, dx))| at(y + dy, x + dx) >= c)
                .fold(0u32, |acc, (i, _)| acc | 1 << i);
            out.push(code as f32 / 255.0);
        }
    }
    ImageTensor::new(luma.height, luma.width, 1, out).expect("codes lie in [0,1]")
}

/// Flags `d > threshold` and returns the success fraction.
pub fn success_flags(distances: &[f64], threshold: f64) -> Result<(f64, Vec<bool>)> {
    if distances.is_empty() {
        return Err(config("success rate of an empty set"));
    }
    let flags: Vec<bool> = distances.iter().map(|&d| d > threshold).collect();
    let hits = flags.iter().filter(|&&f| f).count();
    Ok((hits as f64 / flags.len() as f64, flags))
}

/// Defense success rate over output pairs `(y, y')`, using L2 for editing and
/// L1 for reenactment.
pub fn defense_success_rate(
    pairs: &[(ImageTensor, ImageTensor)],
    task: Task,
    threshold: f64,
) -> Result<(f64, Vec<bool>)> {
    let kind = DistanceKind::for_task(task);
    let d = pairs
        .iter()
        .map(|(y, yp)| distance(y, yp, kind))
        .collect::<Result<Vec<_>>>()?;
    success_flags(&d, threshold)
}
