//! Image and trajectory quality metrics.

use serde::Serialize;

use crate::dynamics::Trajectory;

/// Collected evaluation numbers for one guided solve.
#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub terminal_loss: f64,
    pub control_energy: f64,
    pub trajectory_distance: Option<f64>,
}

/// Peak signal-to-noise ratio `10 log10(L^2 / MSE)` in dB; identical inputs
/// return the `+inf` sentinel.
pub fn psnr(x: &[f64], x_ref: &[f64], data_range: f64) -> f64 {
    assert_eq!(x.len(), x_ref.len(), "psnr: length {} vs {}", x.len(), x_ref.len());
    assert!(data_range > 0.0, "psnr: data range must be positive");
    let mse: f64 =
        x.iter().zip(x_ref).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

/// Mean local structural similarity over a uniform square window.
///
/// Small desk-scale images force a 7x7 uniform window rather than the
/// common 11x11 Gaussian, so values are comparable only within this
/// codebase. `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`.
pub fn ssim(x: &[f64], x_ref: &[f64], h: usize, w: usize, data_range: f64) -> f64 {
    const WIN: usize = 7;
    assert_eq!(x.len(), h * w, "ssim: pixel count {} vs {}x{}", x.len(), h, w);
    assert_eq!(x.len(), x_ref.len(), "ssim: length {} vs {}", x.len(), x_ref.len());
    assert!(h >= WIN && w >= WIN, "ssim: image {h}x{w} smaller than {WIN}x{WIN} window");

    let c1 = (0.01 * data_range) * (0.01 * data_range);
    let c2 = (0.03 * data_range) * (0.03 * data_range);
    let n = (WIN * WIN) as f64;

    let mut total = 0.0;
    let mut windows = 0usize;
    for r0 in 0..=(h - WIN) {
        for c0 in 0..=(w - WIN) {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + WIN {
                for c in c0..c0 + WIN {
                    let (a, b) = (x[r * w + c], x_ref[r * w + c]);
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cov = sxy / n - mx * my;
            let score = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += score;
            windows += 1;
        }
    }
    total / windows as f64
}

/// Mean over grid nodes of the Euclidean distance between states.
pub fn trajectory_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    assert_eq!(a.grid, b.grid, "trajectory_distance: grid mismatch");
    assert_eq!(a.states.len(), b.states.len(), "trajectory_distance: node count mismatch");
    let total: f64 = a
        .states
        .iter()
        .zip(&b.states)
        .map(|(xa, xb)| {
            xa.iter().zip(xb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
        })
        .sum();
    total / a.states.len() as f64
}
