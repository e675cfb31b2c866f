//! Differentiable forward rendering of 3D Gaussians via EWA splatting:
//! perspective projection of means and covariances, depth-sorted tile-based
//! alpha compositing, and a hand-derived backward producing gradients for the
//! Gaussian attributes, camera-frame positions, and camera-frame orientations.
//!
//! All math is double precision. The tiled renderer and the naive reference
//! renderer share projection, sorting, and compositing rules; they differ only
//! in which Gaussians a pixel ever sees, and the binning radius is chosen so
//! the truncated tails stay below 1e-5 per channel.

use nalgebra::{Matrix2, Matrix3, Quaternion};

use crate::field::GaussianAttributes;
use crate::geometry::{CameraModel, Quat, Vec3};

/// sqrt of the chi-square 99% quantile with 2 degrees of freedom: the
/// marginal-sigma radius of the 99% confidence ellipse.
const CONFIDENCE_99_SIGMA: f64 = 3.034854258770293;

#[derive(Debug, Clone, Copy)]
pub struct RenderConfig {
    pub tile_size: usize,
    pub background: [f64; 3],
    /// Per-splat alpha ceiling; bounds compositing depth.
    pub alpha_clamp: f64,
    /// Compositing stops once transmittance falls below this.
    pub transmittance_stop: f64,
    /// Contributions below this alpha are skipped (standard splatting floor);
    /// applied identically by the tiled renderer, the naive reference, and
    /// the backward pass.
    pub alpha_min: f64,
    /// Low-pass dilation added to the 2D covariance diagonal, px^2.
    pub dilation: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            tile_size: 16,
            background: [0.5, 0.5, 0.5],
            alpha_clamp: 0.99,
            transmittance_stop: 1e-4,
            alpha_min: 1.0 / 255.0,
            dilation: 0.3,
        }
    }
}

/// A Gaussian after perspective projection, ready for compositing.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedGaussian {
    pub mean: [f64; 2],
    /// Symmetric 2x2 covariance after dilation, stored as (a, b, c) =
    /// (cov_xx, cov_xy, cov_yy).
    pub cov: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Index into the culled input set this splat came from.
    pub source: usize,
}

/// Rendered image plus the per-pixel state the backward pass replays.
#[derive(Debug, Clone)]
pub struct RenderBuffer {
    pub width: usize,
    pub height: usize,
    /// H x W x 3, row-major, [0, 1].
    pub color: Vec<f64>,
    /// Final transmittance per pixel.
    pub transmittance: Vec<f64>,
    /// Number of splats composited per pixel before termination.
    pub contributors: Vec<u32>,
    /// Sum of compositing weights per pixel (excludes the background term).
    pub weight_sum: Vec<f64>,
}

/// Gradients for the culled input set; dropped (off-screen) Gaussians keep
/// exact zeros.
#[derive(Debug, Clone)]
pub struct RasterGradients {
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub scales: Vec<Vec3>,
    pub rotations: Vec<Quaternion<f64>>,
    pub positions: Vec<Vec3>,
}

impl RasterGradients {
    fn zeros(n: usize) -> RasterGradients {
        RasterGradients {
            colors: vec![[0.0; 3]; n],
            opacities: vec![0.0; n],
            scales: vec![Vec3::zeros(); n],
            rotations: vec![Quaternion::new(0.0, 0.0, 0.0, 0.0); n],
            positions: vec![Vec3::zeros(); n],
        }
    }
}

fn rotation_matrix(q: &Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

fn projection_jacobian(p: &Vec3, camera: &CameraModel) -> [[f64; 3]; 2] {
    let inv_z = 1.0 / p.z;
    let inv_z2 = inv_z * inv_z;
    [
        [camera.fx * inv_z, 0.0, -camera.fx * p.x * inv_z2],
        [0.0, camera.fy * inv_z, -camera.fy * p.y * inv_z2],
    ]
}

/// Project camera-frame Gaussians to screen space. Gaussians whose
/// 99%-confidence ellipse misses the image are dropped; survivors carry their
/// source index so gradients can scatter back.
pub fn project(
    points_cam: &[Vec3],
    rotations_cam: &[Quat],
    scales: &[Vec3],
    opacities: &[f64],
    colors: &[[f64; 3]],
    camera: &CameraModel,
    cfg: &RenderConfig,
) -> Vec<ProjectedGaussian> {
    let n = points_cam.len();
    assert!(
        rotations_cam.len() == n && scales.len() == n && opacities.len() == n && colors.len() == n
    );
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let p = points_cam[i];
        debug_assert!(p.z > 0.0, "culling must run before projection");
        let mean = [
            camera.fx * p.x / p.z + camera.cx,
            camera.fy * p.y / p.z + camera.cy,
        ];
        let r = rotation_matrix(&rotations_cam[i]);
        let s = scales[i];
        let sigma3 = r * Matrix3::from_diagonal(&Vec3::new(s.x * s.x, s.y * s.y, s.z * s.z)) * r.transpose();
        let j = projection_jacobian(&p, camera);
        // cov2 = J * Sigma3 * J^T + dilation * I
        let mut js = [[0.0; 3]; 2];
        for row in 0..2 {
            for col in 0..3 {
                js[row][col] =
                    j[row][0] * sigma3[(0, col)] + j[row][1] * sigma3[(1, col)] + j[row][2] * sigma3[(2, col)];
            }
        }
        let a = js[0][0] * j[0][0] + js[0][1] * j[0][1] + js[0][2] * j[0][2] + cfg.dilation;
        let b = js[0][0] * j[1][0] + js[0][1] * j[1][1] + js[0][2] * j[1][2];
        let c = js[1][0] * j[1][0] + js[1][1] * j[1][1] + js[1][2] * j[1][2] + cfg.dilation;

        // Axis-aligned bounds of the 99% ellipse are +/- k * marginal sigma.
        let rx = CONFIDENCE_99_SIGMA * a.sqrt();
        let ry = CONFIDENCE_99_SIGMA * c.sqrt();
        if mean[0] + rx < 0.0
            || mean[0] - rx > camera.width as f64
            || mean[1] + ry < 0.0
            || mean[1] - ry > camera.height as f64
        {
            continue;
        }
        out.push(ProjectedGaussian {
            mean,
            cov: [a, b, c],
            depth: p.z,
            opacity: opacities[i],
            color: colors[i],
            source: i,
        });
    }
    out
}

/// Convenience wrapper taking field-predicted attributes.
pub fn project_attributes(
    points_cam: &[Vec3],
    rotations_cam: &[Quat],
    attrs: &GaussianAttributes,
    camera: &CameraModel,
    cfg: &RenderConfig,
) -> Vec<ProjectedGaussian> {
    project(
        points_cam,
        rotations_cam,
        &attrs.scales,
        &attrs.opacities,
        &attrs.colors,
        camera,
        cfg,
    )
}

/// Front-to-back order: depth ascending, source index breaking ties.
fn sorted_order(projected: &[ProjectedGaussian]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..projected.len() as u32).collect();
    order.sort_unstable_by(|&ia, &ib| {
        let (a, b) = (&projected[ia as usize], &projected[ib as usize]);
        a.depth
            .partial_cmp(&b.depth)
            .expect("depths are finite")
            .then(a.source.cmp(&b.source))
    });
    order
}

/// Per-splat quantities hoisted out of the pixel loops: the inverse 2D
/// covariance, the alpha-floor power threshold, and the pixel radius beyond
/// which alpha provably falls under the floor (marginal-sigma extent of the
/// alpha_min level set, plus a safety pixel so borderline pixels are decided
/// by the alpha test itself in every code path).
struct SplatEval {
    mean: [f64; 2],
    m00: f64,
    m01: f64,
    m11: f64,
    opacity: f64,
    color: [f64; 3],
    power_floor: f64,
    radius: [f64; 2],
}

fn prepare_splats(projected: &[ProjectedGaussian], cfg: &RenderConfig) -> Vec<SplatEval> {
    projected
        .iter()
        .map(|g| {
            let [a, b, c] = g.cov;
            let det = a * c - b * b;
            let power_floor = (cfg.alpha_min / g.opacity).ln();
            let q2 = -2.0 * power_floor;
            let radius = if q2 > 0.0 {
                let q = q2.sqrt();
                [q * a.sqrt() + 1.0, q * c.sqrt() + 1.0]
            } else {
                // Opacity at or below the floor: can never contribute.
                [0.0, 0.0]
            };
            SplatEval {
                mean: g.mean,
                m00: c / det,
                m01: -b / det,
                m11: a / det,
                opacity: g.opacity,
                color: g.color,
                power_floor,
                radius,
            }
        })
        .collect()
}

#[inline]
fn splat_alpha(se: &SplatEval, px: f64, py: f64, cfg: &RenderConfig) -> Option<f64> {
    let dx = px - se.mean[0];
    let dy = py - se.mean[1];
    let power = -0.5 * (se.m00 * dx * dx + 2.0 * se.m01 * dx * dy + se.m11 * dy * dy);
    if power < se.power_floor {
        return None;
    }
    Some((se.opacity * power.exp()).min(cfg.alpha_clamp))
}

struct TileGrid {
    tiles_x: usize,
    tiles_y: usize,
    tile_size: usize,
    /// Per tile, projected-gaussian indices in front-to-back order.
    lists: Vec<Vec<u32>>,
}

fn build_tiles(
    splats: &[SplatEval],
    order: &[u32],
    camera: &CameraModel,
    cfg: &RenderConfig,
) -> TileGrid {
    let ts = cfg.tile_size;
    let tiles_x = camera.width.div_ceil(ts);
    let tiles_y = camera.height.div_ceil(ts);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for &pi in order {
        let se = &splats[pi as usize];
        if se.radius[0] <= 0.0 {
            continue;
        }
        let x0 = (se.mean[0] - se.radius[0]).floor().max(0.0);
        let y0 = (se.mean[1] - se.radius[1]).floor().max(0.0);
        let x1 = (se.mean[0] + se.radius[0]).ceil().min(camera.width as f64 - 1.0);
        let y1 = (se.mean[1] + se.radius[1]).ceil().min(camera.height as f64 - 1.0);
        if x1 < x0 || y1 < y0 {
            continue;
        }
        let (tx0, ty0) = (x0 as usize / ts, y0 as usize / ts);
        let (tx1, ty1) = ((x1 as usize / ts).min(tiles_x - 1), (y1 as usize / ts).min(tiles_y - 1));
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(pi);
            }
        }
    }
    TileGrid {
        tiles_x,
        tiles_y,
        tile_size: ts,
        lists,
    }
}

/// Pixel-range of a splat clipped to a tile, in absolute pixel indices.
#[inline]
fn splat_rect(
    se: &SplatEval,
    tile_x0: usize,
    tile_y0: usize,
    tile_x1: usize,
    tile_y1: usize,
) -> Option<(usize, usize, usize, usize)> {
    let x0 = (se.mean[0] - se.radius[0]).floor().max(tile_x0 as f64) as usize;
    let y0 = (se.mean[1] - se.radius[1]).floor().max(tile_y0 as f64) as usize;
    let x1 = (se.mean[0] + se.radius[0]).ceil().min(tile_x1 as f64 - 1.0);
    let y1 = (se.mean[1] + se.radius[1]).ceil().min(tile_y1 as f64 - 1.0);
    if x1 < x0 as f64 || y1 < y0 as f64 {
        return None;
    }
    Some((x0, y0, x1 as usize, y1 as usize))
}

/// Tiled forward rendering: front-to-back alpha compositing over 16x16 tiles
/// with early termination, the remaining transmittance taking the background.
pub fn render(
    projected: &[ProjectedGaussian],
    camera: &CameraModel,
    cfg: &RenderConfig,
) -> RenderBuffer {
    let order = sorted_order(projected);
    let splats = prepare_splats(projected, cfg);
    let tiles = build_tiles(&splats, &order, camera, cfg);
    let (w, h) = (camera.width, camera.height);
    let mut buf = RenderBuffer {
        width: w,
        height: h,
        color: vec![0.0; w * h * 3],
        transmittance: vec![1.0; w * h],
        contributors: vec![0; w * h],
        weight_sum: vec![0.0; w * h],
    };
    for ty in 0..tiles.tiles_y {
        for tx in 0..tiles.tiles_x {
            let list = &tiles.lists[ty * tiles.tiles_x + tx];
            let y_end = ((ty + 1) * tiles.tile_size).min(h);
            let x_end = ((tx + 1) * tiles.tile_size).min(w);
            let (x_start, y_start) = (tx * tiles.tile_size, ty * tiles.tile_size);
            for &pi in list {
                let se = &splats[pi as usize];
                let Some((rx0, ry0, rx1, ry1)) = splat_rect(se, x_start, y_start, x_end, y_end)
                else {
                    continue;
                };
                for y in ry0..=ry1 {
                    let row = y * w;
                    for x in rx0..=rx1 {
                        let pix = row + x;
                        let t = buf.transmittance[pix];
                        if t < cfg.transmittance_stop {
                            continue;
                        }
                        let Some(alpha) = splat_alpha(se, x as f64 + 0.5, y as f64 + 0.5, cfg)
                        else {
                            continue;
                        };
                        let weight = alpha * t;
                        buf.color[pix * 3] += se.color[0] * weight;
                        buf.color[pix * 3 + 1] += se.color[1] * weight;
                        buf.color[pix * 3 + 2] += se.color[2] * weight;
                        buf.weight_sum[pix] += weight;
                        buf.transmittance[pix] = t * (1.0 - alpha);
                        buf.contributors[pix] += 1;
                    }
                }
            }
        }
    }
    for pix in 0..w * h {
        let t = buf.transmittance[pix];
        for ch in 0..3 {
            buf.color[pix * 3 + ch] += t * cfg.background[ch];
        }
    }
    buf
}

/// Naive reference renderer: every pixel composites every projected Gaussian
/// in depth order, no tiling or binning. Same compositing rules as [`render`].
pub fn render_reference(
    projected: &[ProjectedGaussian],
    camera: &CameraModel,
    cfg: &RenderConfig,
) -> RenderBuffer {
    let order = sorted_order(projected);
    let splats = prepare_splats(projected, cfg);
    let (w, h) = (camera.width, camera.height);
    let mut buf = RenderBuffer {
        width: w,
        height: h,
        color: vec![0.0; w * h * 3],
        transmittance: vec![0.0; w * h],
        contributors: vec![0; w * h],
        weight_sum: vec![0.0; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut color = [0.0; 3];
            let mut transmittance = 1.0;
            let mut count = 0u32;
            let mut weight_sum = 0.0;
            for &pi in &order {
                if transmittance < cfg.transmittance_stop {
                    break;
                }
                let Some(alpha) = splat_alpha(&splats[pi as usize], px, py, cfg) else {
                    continue;
                };
                let se = &splats[pi as usize];
                let weight = alpha * transmittance;
                color[0] += se.color[0] * weight;
                color[1] += se.color[1] * weight;
                color[2] += se.color[2] * weight;
                weight_sum += weight;
                transmittance *= 1.0 - alpha;
                count += 1;
            }
            for ch in 0..3 {
                color[ch] += transmittance * cfg.background[ch];
            }
            let pix = y * w + x;
            buf.color[pix * 3..pix * 3 + 3].copy_from_slice(&color);
            buf.transmittance[pix] = transmittance;
            buf.contributors[pix] = count;
            buf.weight_sum[pix] = weight_sum;
        }
    }
    buf
}

/// Exact reverse of the compositing and projection chain.
///
/// `upstream` is dL/d(image), H x W x 3. The inputs must be the same arrays
/// `projected` was built from; gradients come back in that index space with
/// dropped Gaussians at exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn render_backward(
    projected: &[ProjectedGaussian],
    points_cam: &[Vec3],
    rotations_cam: &[Quat],
    scales: &[Vec3],
    camera: &CameraModel,
    cfg: &RenderConfig,
    buffer: &RenderBuffer,
    upstream: &[f64],
) -> RasterGradients {
    let n_in = points_cam.len();
    assert_eq!(upstream.len(), buffer.color.len());
    let mut grads = RasterGradients::zeros(n_in);

    let order = sorted_order(projected);
    let splats = prepare_splats(projected, cfg);
    let tiles = build_tiles(&splats, &order, camera, cfg);
    let (w, h) = (camera.width, camera.height);

    // Per-projected accumulators in screen space.
    let np = projected.len();
    let mut g_mean = vec![[0.0f64; 2]; np];
    let mut g_cov = vec![[0.0f64; 3]; np]; // d/d(a, b, c) with b counted once
    let mut g_color = vec![[0.0f64; 3]; np];
    let mut g_opacity = vec![0.0f64; np];

    let ts = cfg.tile_size;
    let tile_pixels = ts * ts;
    // Per-pixel compositing stacks for one tile: (splat, alpha, T before).
    let mut stacks: Vec<Vec<(u32, f64, f64)>> = vec![Vec::new(); tile_pixels];
    let mut t_state = vec![1.0f64; tile_pixels];
    for ty in 0..tiles.tiles_y {
        for tx in 0..tiles.tiles_x {
            let list = &tiles.lists[ty * tiles.tiles_x + tx];
            if list.is_empty() {
                continue;
            }
            let y_end = ((ty + 1) * ts).min(h);
            let x_end = ((tx + 1) * ts).min(w);
            let (x_start, y_start) = (tx * ts, ty * ts);
            // Skip tiles whose every pixel has zero upstream gradient.
            let mut any_upstream = false;
            'scan: for y in y_start..y_end {
                for x in x_start..x_end {
                    let pix = y * w + x;
                    if upstream[pix * 3] != 0.0
                        || upstream[pix * 3 + 1] != 0.0
                        || upstream[pix * 3 + 2] != 0.0
                    {
                        any_upstream = true;
                        break 'scan;
                    }
                }
            }
            if !any_upstream {
                continue;
            }

            for st in stacks.iter_mut() {
                st.clear();
            }
            t_state.fill(1.0);

            // Replay the forward compositing with identical traversal.
            for &pi in list {
                let se = &splats[pi as usize];
                let Some((rx0, ry0, rx1, ry1)) = splat_rect(se, x_start, y_start, x_end, y_end)
                else {
                    continue;
                };
                for y in ry0..=ry1 {
                    for x in rx0..=rx1 {
                        let local = (y - y_start) * ts + (x - x_start);
                        let t = t_state[local];
                        if t < cfg.transmittance_stop {
                            continue;
                        }
                        let Some(alpha) = splat_alpha(se, x as f64 + 0.5, y as f64 + 0.5, cfg)
                        else {
                            continue;
                        };
                        stacks[local].push((pi, alpha, t));
                        t_state[local] = t * (1.0 - alpha);
                    }
                }
            }

            for y in y_start..y_end {
                for x in x_start..x_end {
                    let pix = y * w + x;
                    let up = &upstream[pix * 3..pix * 3 + 3];
                    if up[0] == 0.0 && up[1] == 0.0 && up[2] == 0.0 {
                        continue;
                    }
                    let local = (y - y_start) * ts + (x - x_start);
                    let stack = &stacks[local];
                    debug_assert_eq!(stack.len() as u32, buffer.contributors[pix]);
                    let t_final = t_state[local];
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    // Suffix color (everything composited after splat i,
                    // including the background term).
                    let mut suffix = [
                        t_final * cfg.background[0],
                        t_final * cfg.background[1],
                        t_final * cfg.background[2],
                    ];
                    for &(pi, alpha, t_before) in stack.iter().rev() {
                        let se = &splats[pi as usize];
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            g_color[pi as usize][ch] += up[ch] * alpha * t_before;
                            d_alpha +=
                                up[ch] * (se.color[ch] * t_before - suffix[ch] / (1.0 - alpha));
                            suffix[ch] += se.color[ch] * alpha * t_before;
                        }
                        // Through the clamp: zero slope when saturated.
                        if alpha < cfg.alpha_clamp {
                            let weight = alpha / se.opacity;
                            g_opacity[pi as usize] += d_alpha * weight;
                            let d_weight = d_alpha * se.opacity;
                            let d_power = d_weight * weight;
                            let dx = px - se.mean[0];
                            let dy = py - se.mean[1];
                            // power = -1/2 d^T M d
                            let mdx = se.m00 * dx + se.m01 * dy;
                            let mdy = se.m01 * dx + se.m11 * dy;
                            g_mean[pi as usize][0] += d_power * mdx;
                            g_mean[pi as usize][1] += d_power * mdy;
                            // dL/dSigma2 = +1/2 (M d)(M d)^T scaled by d_power
                            let ha = 0.5 * d_power * mdx * mdx;
                            let hb = d_power * mdx * mdy;
                            let hc = 0.5 * d_power * mdy * mdy;
                            g_cov[pi as usize][0] += ha;
                            g_cov[pi as usize][1] += hb;
                            g_cov[pi as usize][2] += hc;
                        }
                    }
                }
            }
        }
    }

    // Chain screen-space gradients back to the 3D inputs.
    for (pi, g) in projected.iter().enumerate() {
        let src = g.source;
        for ch in 0..3 {
            grads.colors[src][ch] += g_color[pi][ch];
        }
        grads.opacities[src] += g_opacity[pi];

        let p = points_cam[src];
        let q = rotations_cam[src];
        let s = scales[src];
        let r = rotation_matrix(&q);
        let sigma3 = r * Matrix3::from_diagonal(&Vec3::new(s.x * s.x, s.y * s.y, s.z * s.z)) * r.transpose();
        let j = projection_jacobian(&p, camera);

        // Full symmetric matrix form of the covariance gradient.
        let g2 = Matrix2::new(g_cov[pi][0], 0.5 * g_cov[pi][1], 0.5 * g_cov[pi][1], g_cov[pi][2]);

        // dL/dJ = 2 G2 J Sigma3  (2x3)
        let jm = Matrix2x3::from_fn(|r_, c_| j[r_][c_]);
        let dj = 2.0 * g2 * jm * sigma3;
        // G3 = J^T G2 J  (3x3, symmetric)
        let g3 = jm.transpose() * g2 * jm;

        // Scale gradient: dL/ds_k = 2 s_k (R^T G3 R)_kk
        let rtg3r = r.transpose() * g3 * r;
        grads.scales[src] += Vec3::new(
            2.0 * s.x * rtg3r[(0, 0)],
            2.0 * s.y * rtg3r[(1, 1)],
            2.0 * s.z * rtg3r[(2, 2)],
        );

        // Rotation gradient via dL/dR = 2 G3 R S^2.
        let s2 = Matrix3::from_diagonal(&Vec3::new(s.x * s.x, s.y * s.y, s.z * s.z));
        let dr = 2.0 * g3 * r * s2;
        let (qw, qx, qy, qz) = (q.w, q.i, q.j, q.k);
        let dr_dw = Matrix3::new(0.0, -qz, qy, qz, 0.0, -qx, -qy, qx, 0.0) * 2.0;
        let dr_dx = Matrix3::new(0.0, qy, qz, qy, -2.0 * qx, -qw, qz, qw, -2.0 * qx) * 2.0;
        let dr_dy = Matrix3::new(-2.0 * qy, qx, qw, qx, 0.0, qz, -qw, qz, -2.0 * qy) * 2.0;
        let dr_dz = Matrix3::new(-2.0 * qz, -qw, qx, qw, -2.0 * qz, qy, qx, qy, 0.0) * 2.0;
        let dot = |m: &Matrix3<f64>| dr.component_mul(m).sum();
        grads.rotations[src] += Quaternion::new(dot(&dr_dw), dot(&dr_dx), dot(&dr_dy), dot(&dr_dz));

        // Position gradient: the pixel-mean path plus the Jacobian-of-J path.
        let inv_z = 1.0 / p.z;
        let inv_z2 = inv_z * inv_z;
        let inv_z3 = inv_z2 * inv_z;
        let gm = g_mean[pi];
        let mut gp = Vec3::new(
            gm[0] * camera.fx * inv_z,
            gm[1] * camera.fy * inv_z,
            -gm[0] * camera.fx * p.x * inv_z2 - gm[1] * camera.fy * p.y * inv_z2,
        );
        gp.x += dj[(0, 2)] * (-camera.fx * inv_z2);
        gp.y += dj[(1, 2)] * (-camera.fy * inv_z2);
        gp.z += dj[(0, 0)] * (-camera.fx * inv_z2)
            + dj[(1, 1)] * (-camera.fy * inv_z2)
            + dj[(0, 2)] * (2.0 * camera.fx * p.x * inv_z3)
            + dj[(1, 2)] * (2.0 * camera.fy * p.y * inv_z3);
        grads.positions[src] += gp;
    }
    grads
}

use nalgebra::Matrix2x3;
