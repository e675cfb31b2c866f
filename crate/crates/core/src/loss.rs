//! Training loss: photometric L1 + D-SSIM on the bottom crop of the image,
//! plus a per-Gaussian scale isotropy regularizer, with analytic gradients.
//!
//! Images are H x W x 3 row-major f64 in [0, 1]. SSIM uses a Gaussian window
//! and only windows that fit entirely inside the cropped region, so boundary
//! artifacts never feed the calibration gradients.

use thiserror::Error;

use crate::geometry::Vec3;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: rendered {0}x{1}, ground truth {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// D-SSIM mixing weight (λ1).
    pub lambda_dssim: f64,
    /// Scale-regularization weight (λ2).
    pub lambda_scale: f64,
    /// Fraction of image height kept from the bottom.
    pub crop_bottom_fraction: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_dssim: 0.2,
            lambda_scale: 0.001,
            crop_bottom_fraction: 0.5,
            ssim_window: 11,
            ssim_sigma: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    pub scale_reg: f64,
    pub pixel_count: usize,
}

/// Row range of the bottom crop: the bottom ceil(crop * H) rows.
pub fn crop_bottom_rows(height: usize, crop_fraction: f64) -> (usize, usize) {
    assert!(crop_fraction > 0.0 && crop_fraction <= 1.0);
    let rows = ((crop_fraction * height as f64).ceil() as usize).clamp(1, height);
    (height - rows, rows)
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let center = (window as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-mode separable blur of a rows x cols field. The kernel loop sits
/// outermost so the inner additions run over contiguous, independent slots.
fn blur_valid(field: &[f64], rows: usize, cols: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let oc = cols - k + 1;
    let or = rows - k + 1;
    let mut horiz = vec![0.0; rows * oc];
    for (i, &kv) in kernel.iter().enumerate() {
        for r in 0..rows {
            let src = &field[r * cols + i..r * cols + i + oc];
            let dst = &mut horiz[r * oc..(r + 1) * oc];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s * kv;
            }
        }
    }
    let mut out = vec![0.0; or * oc];
    for (i, &kv) in kernel.iter().enumerate() {
        for r in 0..or {
            let src = &horiz[(r + i) * oc..(r + i + 1) * oc];
            let dst = &mut out[r * oc..(r + 1) * oc];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s * kv;
            }
        }
    }
    out
}

/// Adjoint of [`blur_valid`]: scatter window-level gradients back to pixels.
fn blur_scatter(grad: &[f64], rows: usize, cols: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let oc = cols - k + 1;
    let or = rows - k + 1;
    let mut horiz = vec![0.0; rows * oc];
    for (i, &kv) in kernel.iter().enumerate() {
        for r in 0..or {
            let src = &grad[r * oc..(r + 1) * oc];
            let dst = &mut horiz[(r + i) * oc..(r + i + 1) * oc];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s * kv;
            }
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (i, &kv) in kernel.iter().enumerate() {
        for r in 0..rows {
            let src = &horiz[r * oc..(r + 1) * oc];
            let dst = &mut out[r * cols + i..r * cols + i + oc];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s * kv;
            }
        }
    }
    out
}

/// Mean SSIM between two images over valid windows of the full frame.
/// Returns 1.0 exactly for identical images.
pub fn ssim_mean(x: &[f64], y: &[f64], width: usize, height: usize, window: usize, sigma: f64) -> f64 {
    let (s, _count) = ssim_forward(x, y, width, height, 0, height, window, sigma);
    s
}

/// SSIM over the row range [row0, row0+rows). Returns (mean ssim, windows*channels).
#[allow(clippy::too_many_arguments)]
fn ssim_forward(
    x: &[f64],
    y: &[f64],
    width: usize,
    height: usize,
    row0: usize,
    rows: usize,
    window: usize,
    sigma: f64,
) -> (f64, usize) {
    assert!(row0 + rows <= height);
    if rows < window || width < window {
        return (1.0, 0);
    }
    let kernel = gaussian_kernel(window, sigma);
    let oc = width - window + 1;
    let or = rows - window + 1;
    let mut total = 0.0;
    let mut xc = vec![0.0; rows * width];
    let mut yc = vec![0.0; rows * width];
    let mut xx = vec![0.0; rows * width];
    let mut yy = vec![0.0; rows * width];
    let mut xy = vec![0.0; rows * width];
    for ch in 0..3 {
        for r in 0..rows {
            for c in 0..width {
                let xi = x[((row0 + r) * width + c) * 3 + ch];
                let yi = y[((row0 + r) * width + c) * 3 + ch];
                xc[r * width + c] = xi;
                yc[r * width + c] = yi;
                xx[r * width + c] = xi * xi;
                yy[r * width + c] = yi * yi;
                xy[r * width + c] = xi * yi;
            }
        }
        let mu_x = blur_valid(&xc, rows, width, &kernel);
        let mu_y = blur_valid(&yc, rows, width, &kernel);
        let e_xx = blur_valid(&xx, rows, width, &kernel);
        let e_yy = blur_valid(&yy, rows, width, &kernel);
        let e_xy = blur_valid(&xy, rows, width, &kernel);
        for i in 0..or * oc {
            total += ssim_value(mu_x[i], mu_y[i], e_xx[i], e_yy[i], e_xy[i]);
        }
    }
    let count = 3 * or * oc;
    (total / count as f64, count)
}

#[inline]
fn ssim_value(mu_x: f64, mu_y: f64, e_xx: f64, e_yy: f64, e_xy: f64) -> f64 {
    let var_x = e_xx - mu_x * mu_x;
    let var_y = e_yy - mu_y * mu_y;
    let cov = e_xy - mu_x * mu_y;
    let n1 = 2.0 * mu_x * mu_y + SSIM_C1;
    let n2 = 2.0 * cov + SSIM_C2;
    let d1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1;
    let d2 = var_x + var_y + SSIM_C2;
    (n1 * n2) / (d1 * d2)
}

/// Photometric loss on the bottom crop: (1-λ1)·L1 + λ1·D-SSIM, with the
/// gradient with respect to the rendered image (full size; zero outside the
/// crop). Returns (l1, dssim, gradient).
pub fn photometric_loss(
    rendered: &[f64],
    ground_truth: &[f64],
    width: usize,
    height: usize,
    cfg: &LossConfig,
) -> Result<(f64, f64, Vec<f64>), LossError> {
    if rendered.len() != ground_truth.len() || rendered.len() != width * height * 3 {
        return Err(LossError::ShapeMismatch(
            rendered.len() / 3 / height.max(1),
            height,
            ground_truth.len() / 3 / height.max(1),
            height,
        ));
    }
    let (row0, rows) = crop_bottom_rows(height, cfg.crop_bottom_fraction);
    let mut grad = vec![0.0; rendered.len()];

    // L1 term: mean absolute difference over cropped pixels and channels.
    let n = rows * width * 3;
    let mut l1 = 0.0;
    for r in row0..height {
        for i in (r * width * 3)..((r + 1) * width * 3) {
            let d = rendered[i] - ground_truth[i];
            l1 += d.abs();
            // Subgradient 0 at exact equality.
            grad[i] = (1.0 - cfg.lambda_dssim) * d.signum() * f64::from(d != 0.0) / n as f64;
        }
    }
    l1 /= n as f64;

    // D-SSIM term with analytic gradient through the windowed statistics.
    let window = cfg.ssim_window;
    let (mean_ssim, count) = ssim_forward(
        rendered,
        ground_truth,
        width,
        height,
        row0,
        rows,
        window,
        cfg.ssim_sigma,
    );
    let dssim = (1.0 - mean_ssim) / 2.0;
    if count > 0 && cfg.lambda_dssim != 0.0 {
        let kernel = gaussian_kernel(window, cfg.ssim_sigma);
        let oc = width - window + 1;
        let or = rows - window + 1;
        // dL/dS per window for L += λ1 * (1 - mean S) / 2.
        let w_s = -cfg.lambda_dssim / (2.0 * count as f64);
        let mut xc = vec![0.0; rows * width];
        let mut yc = vec![0.0; rows * width];
        let mut xx = vec![0.0; rows * width];
        let mut yy = vec![0.0; rows * width];
        let mut xy = vec![0.0; rows * width];
        for ch in 0..3 {
            for r in 0..rows {
                for c in 0..width {
                    let xi = rendered[((row0 + r) * width + c) * 3 + ch];
                    let yi = ground_truth[((row0 + r) * width + c) * 3 + ch];
                    xc[r * width + c] = xi;
                    yc[r * width + c] = yi;
                    xx[r * width + c] = xi * xi;
                    yy[r * width + c] = yi * yi;
                    xy[r * width + c] = xi * yi;
                }
            }
            let mu_x = blur_valid(&xc, rows, width, &kernel);
            let mu_y = blur_valid(&yc, rows, width, &kernel);
            let e_xx = blur_valid(&xx, rows, width, &kernel);
            let e_yy = blur_valid(&yy, rows, width, &kernel);
            let e_xy = blur_valid(&xy, rows, width, &kernel);
            let mut g_mu_x = vec![0.0; or * oc];
            let mut g_e_xx = vec![0.0; or * oc];
            let mut g_e_xy = vec![0.0; or * oc];
            for i in 0..or * oc {
                let (mx, my) = (mu_x[i], mu_y[i]);
                let cov = e_xy[i] - mx * my;
                let var_x = e_xx[i] - mx * mx;
                let var_y = e_yy[i] - my * my;
                let n1 = 2.0 * mx * my + SSIM_C1;
                let n2 = 2.0 * cov + SSIM_C2;
                let d1 = mx * mx + my * my + SSIM_C1;
                let d2 = var_x + var_y + SSIM_C2;
                let s = (n1 * n2) / (d1 * d2);
                let ds_dn1 = n2 / (d1 * d2);
                let ds_dn2 = n1 / (d1 * d2);
                let ds_dd1 = -s / d1;
                let ds_dd2 = -s / d2;
                g_mu_x[i] = w_s
                    * (ds_dn1 * 2.0 * my + ds_dn2 * (-2.0 * my) + ds_dd1 * 2.0 * mx
                        + ds_dd2 * (-2.0 * mx));
                g_e_xx[i] = w_s * ds_dd2;
                g_e_xy[i] = w_s * ds_dn2 * 2.0;
            }
            let sc_mu = blur_scatter(&g_mu_x, rows, width, &kernel);
            let sc_xx = blur_scatter(&g_e_xx, rows, width, &kernel);
            let sc_xy = blur_scatter(&g_e_xy, rows, width, &kernel);
            for r in 0..rows {
                for c in 0..width {
                    let i = r * width + c;
                    let gi = ((row0 + r) * width + c) * 3 + ch;
                    grad[gi] += sc_mu[i] + 2.0 * xc[i] * sc_xx[i] + yc[i] * sc_xy[i];
                }
            }
        }
    }
    Ok((l1, dssim, grad))
}

/// Per-Gaussian L1 distance of the scale vector to its own componentwise
/// mean, summed over the batch (subgradient 0 at exact ties).
pub fn scale_regularization(scales: &[Vec3]) -> (f64, Vec<Vec3>) {
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(scales.len());
    for s in scales {
        let mean = (s.x + s.y + s.z) / 3.0;
        let mut sign_sum = 0.0;
        let mut signs = [0.0; 3];
        for k in 0..3 {
            let d = s[k] - mean;
            loss += d.abs();
            signs[k] = if d == 0.0 { 0.0 } else { d.signum() };
            sign_sum += signs[k];
        }
        grads.push(Vec3::new(
            signs[0] - sign_sum / 3.0,
            signs[1] - sign_sum / 3.0,
            signs[2] - sign_sum / 3.0,
        ));
    }
    (loss, grads)
}

/// Full objective: photometric over the crop plus λ2-weighted scale
/// regularization over the visible batch.
pub fn total_loss(
    rendered: &[f64],
    ground_truth: &[f64],
    width: usize,
    height: usize,
    scales: &[Vec3],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>, Vec<Vec3>), LossError> {
    let (l1, dssim, grad_image) = photometric_loss(rendered, ground_truth, width, height, cfg)?;
    let (scale_reg, reg_grads) = scale_regularization(scales);
    let grad_scales: Vec<Vec3> = reg_grads.iter().map(|g| g * cfg.lambda_scale).collect();
    let (_, rows) = crop_bottom_rows(height, cfg.crop_bottom_fraction);
    let total =
        (1.0 - cfg.lambda_dssim) * l1 + cfg.lambda_dssim * dssim + cfg.lambda_scale * scale_reg;
    Ok((
        LossBreakdown {
            total,
            l1,
            dssim,
            scale_reg,
            pixel_count: rows * width,
        },
        grad_image,
        grad_scales,
    ))
}
