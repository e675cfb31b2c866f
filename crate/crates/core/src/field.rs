//! Neural field predicting per-Gaussian attributes (color, opacity, scale,
//! rotation) from 3D position: a multiresolution hash encoding feeding a small
//! MLP trunk with four output heads.
//!
//! The scale head saturates at the current voxel size so no Gaussian can
//! outgrow the voxel it came from.

use nalgebra::Quaternion;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cloud::Aabb;
use crate::geometry::{Quat, Vec3};

/// Spatial hash primes from the multiresolution hash encoding construction.
const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("non-finite field parameters (diverged training)")]
    NonFiniteParams,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct FieldConfig {
    pub levels: usize,
    pub table_size_log2: u32,
    pub features_per_level: usize,
    pub base_resolution: u32,
    pub growth_factor: f64,
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            levels: 16,
            table_size_log2: 19,
            features_per_level: 2,
            base_resolution: 16,
            growth_factor: 1.382,
            hidden_layers: 2,
            hidden_width: 64,
        }
    }
}

impl FieldConfig {
    pub fn table_size(&self) -> usize {
        1usize << self.table_size_log2
    }

    pub fn encoded_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn level_resolution(&self, level: usize) -> u32 {
        ((self.base_resolution as f64) * self.growth_factor.powi(level as i32)).floor() as u32
    }
}

/// One dense layer, row-major weights (out x in).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    fn kaiming(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Linear {
        let bound = (6.0 / in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Linear {
            weights,
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    fn zeros_like(&self) -> Linear {
        Linear {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
            in_dim: self.in_dim,
            out_dim: self.out_dim,
        }
    }

    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, row) in out.iter_mut().zip(self.weights.chunks_exact(self.in_dim)) {
            *o = dot(row, x);
        }
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
    }

    /// Accumulate parameter gradients and the input gradient for one sample.
    fn backward_accum(
        &self,
        x: &[f64],
        g_out: &[f64],
        g_self: &mut Linear,
        g_x: &mut [f64],
    ) {
        let x = &x[..self.in_dim];
        let g_x = &mut g_x[..self.in_dim];
        for (i, &go) in g_out.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.in_dim..(i + 1) * self.in_dim];
            let g_row = &mut g_self.weights[i * self.in_dim..(i + 1) * self.in_dim];
            for j in 0..self.in_dim {
                g_row[j] += go * x[j];
                g_x[j] += go * row[j];
            }
            g_self.bias[i] += go;
        }
    }
}

/// Dot product with four independent accumulators; f64 additions do not
/// reassociate on their own, so the latency chain has to be broken by hand.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let b = &b[..a.len()];
    let n4 = a.len() & !3;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < n4 {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut rest = 0.0;
    while i < a.len() {
        rest += a[i] * b[i];
        i += 1;
    }
    (s0 + s1) + (s2 + s3) + rest
}

/// Trunk plus the four attribute heads.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub trunk: Vec<Linear>,
    pub color: Linear,
    pub opacity: Linear,
    pub scale: Linear,
    pub rotation: Linear,
}

impl Mlp {
    fn new(cfg: &FieldConfig, rng: &mut ChaCha8Rng) -> Mlp {
        let mut trunk = Vec::new();
        let mut in_dim = cfg.encoded_dim();
        for _ in 0..cfg.hidden_layers {
            trunk.push(Linear::kaiming(in_dim, cfg.hidden_width, rng));
            in_dim = cfg.hidden_width;
        }
        let mut rotation = Linear::kaiming(in_dim, 4, rng);
        // Near-identity rotation at the start of training.
        rotation.bias = vec![1.0, 0.0, 0.0, 0.0];
        Mlp {
            trunk,
            color: Linear::kaiming(in_dim, 3, rng),
            opacity: Linear::kaiming(in_dim, 1, rng),
            scale: Linear::kaiming(in_dim, 3, rng),
            rotation,
        }
    }

    pub fn zeros_like(&self) -> Mlp {
        Mlp {
            trunk: self.trunk.iter().map(Linear::zeros_like).collect(),
            color: self.color.zeros_like(),
            opacity: self.opacity.zeros_like(),
            scale: self.scale.zeros_like(),
            rotation: self.rotation.zeros_like(),
        }
    }

    fn layers(&self) -> Vec<&Linear> {
        let mut v: Vec<&Linear> = self.trunk.iter().collect();
        v.push(&self.color);
        v.push(&self.opacity);
        v.push(&self.scale);
        v.push(&self.rotation);
        v
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Flatten all parameters in a stable order (trunk layers, then the
    /// color/opacity/scale/rotation heads, weights before bias).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        let mut assign = |l: &mut Linear| {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        };
        for l in &mut self.trunk {
            assign(l);
        }
        assign(&mut self.color);
        assign(&mut self.opacity);
        assign(&mut self.scale);
        assign(&mut self.rotation);
        assert_eq!(off, flat.len());
    }
}

/// Hash tables + MLP weights, plus the normalization box and the active
/// voxel size (the scale cap).
#[derive(Debug, Clone)]
pub struct FieldParams {
    pub cfg: FieldConfig,
    pub aabb: Aabb,
    pub voxel_size: f64,
    pub hash_tables: Vec<f64>,
    pub mlp: Mlp,
}

impl FieldParams {
    pub fn init(cfg: FieldConfig, aabb: Aabb, voxel_size: f64, seed: u64) -> FieldParams {
        let extent = aabb.extent();
        assert!(
            extent.x > 0.0 && extent.y > 0.0 && extent.z > 0.0,
            "field AABB must have positive extent on all axes"
        );
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table_len = cfg.levels * cfg.table_size() * cfg.features_per_level;
        let hash_tables = (0..table_len).map(|_| rng.gen_range(-1e-4..1e-4)).collect();
        let mlp = Mlp::new(&cfg, &mut rng);
        FieldParams {
            cfg,
            aabb,
            voxel_size,
            hash_tables,
            mlp,
        }
    }

    fn all_finite(&self) -> bool {
        self.hash_tables.iter().all(|v| v.is_finite())
            && self
                .mlp
                .layers()
                .iter()
                .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Predicted attributes for a batch of points, struct-of-arrays.
#[derive(Debug, Clone, Default)]
pub struct GaussianAttributes {
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub scales: Vec<Vec3>,
    pub rotations: Vec<Quat>,
}

impl GaussianAttributes {
    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacities.is_empty()
    }
}

/// Upstream gradients with respect to every attribute of the batch. Rotation
/// gradients are raw 4-vectors against the unit quaternion output.
#[derive(Debug, Clone)]
pub struct AttributeGradients {
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub scales: Vec<Vec3>,
    pub rotations: Vec<Quaternion<f64>>,
}

impl AttributeGradients {
    pub fn zeros(n: usize) -> AttributeGradients {
        AttributeGradients {
            colors: vec![[0.0; 3]; n],
            opacities: vec![0.0; n],
            scales: vec![Vec3::zeros(); n],
            rotations: vec![Quaternion::new(0.0, 0.0, 0.0, 0.0); n],
        }
    }
}

/// Gradients for every field parameter. Hash entries never touched by the
/// batch stay exactly zero.
#[derive(Debug, Clone)]
pub struct FieldGradients {
    pub hash_tables: Vec<f64>,
    pub mlp: Mlp,
}

/// Forward activations cached for the backward pass of the same batch.
pub struct FieldCache {
    n: usize,
    /// Per point, per level, 8 table base indices (already scaled by F).
    corner_base: Vec<u32>,
    /// Matching trilinear weights.
    corner_w: Vec<f64>,
    encoded: Vec<f64>,
    /// Post-ReLU activations per trunk layer.
    hidden: Vec<Vec<f64>>,
    raw_rotation: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct LevelGeometry {
    corners: [(u32, f64); 8],
}

/// Position normalized into the unit cube of the field AABB, clamped.
fn normalized_position(params: &FieldParams, p: &Vec3) -> [f64; 3] {
    let extent = params.aabb.extent();
    [
        ((p.x - params.aabb.min.x) / extent.x).clamp(0.0, 1.0),
        ((p.y - params.aabb.min.y) / extent.y).clamp(0.0, 1.0),
        ((p.z - params.aabb.min.z) / extent.z).clamp(0.0, 1.0),
    ]
}

fn level_geometry(params: &FieldParams, level: usize, x01: &[f64; 3]) -> LevelGeometry {
    let cfg = &params.cfg;
    let res = cfg.level_resolution(level);
    let table_size = cfg.table_size() as u64;
    let mut cell = [0i64; 3];
    let mut frac = [0f64; 3];
    for k in 0..3 {
        let xg = x01[k] * res as f64;
        let c = (xg.floor() as i64).clamp(0, res as i64 - 1);
        cell[k] = c;
        frac[k] = xg - c as f64;
    }
    let side = res as u64 + 1;
    let dense = side * side * side <= table_size;
    let f = cfg.features_per_level as u64;
    let mut corners = [(0u32, 0f64); 8];
    for (ci, corner) in corners.iter_mut().enumerate() {
        let dx = (ci & 1) as i64;
        let dy = ((ci >> 1) & 1) as i64;
        let dz = ((ci >> 2) & 1) as i64;
        let (x, y, z) = (
            (cell[0] + dx) as u64,
            (cell[1] + dy) as u64,
            (cell[2] + dz) as u64,
        );
        let idx = if dense {
            x + y * side + z * side * side
        } else {
            (x.wrapping_mul(HASH_PRIMES[0])
                ^ y.wrapping_mul(HASH_PRIMES[1])
                ^ z.wrapping_mul(HASH_PRIMES[2]))
                & (table_size - 1)
        };
        let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
        let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
        let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
        let base = (level as u64 * table_size + idx) * f;
        *corner = (base as u32, wx * wy * wz);
    }
    LevelGeometry { corners }
}

/// Multiresolution hash encoding of one position: concatenation of per-level
/// trilinearly blended table entries. Positions outside the AABB clamp to it.
pub fn encode(position: &Vec3, params: &FieldParams) -> Vec<f64> {
    let cfg = &params.cfg;
    let f = cfg.features_per_level;
    let x01 = normalized_position(params, position);
    let mut out = vec![0.0; cfg.encoded_dim()];
    for level in 0..cfg.levels {
        let geo = level_geometry(params, level, &x01);
        let dst = &mut out[level * f..(level + 1) * f];
        for (base, w) in geo.corners {
            let entry = &params.hash_tables[base as usize..base as usize + f];
            for (d, e) in dst.iter_mut().zip(entry) {
                *d += w * e;
            }
        }
    }
    out
}

/// Predict attributes for the whole batch. Fails fast on non-finite
/// parameters, which signals diverged training.
pub fn field_forward(
    points: &[Vec3],
    params: &FieldParams,
) -> Result<(GaussianAttributes, FieldCache), FieldError> {
    if !params.all_finite() {
        return Err(FieldError::NonFiniteParams);
    }
    let cfg = &params.cfg;
    let n = points.len();
    let f = cfg.features_per_level;
    let enc_dim = cfg.encoded_dim();
    let mut cache = FieldCache {
        n,
        corner_base: vec![0; n * cfg.levels * 8],
        corner_w: vec![0.0; n * cfg.levels * 8],
        encoded: vec![0.0; n * enc_dim],
        hidden: (0..cfg.hidden_layers)
            .map(|_| vec![0.0; n * cfg.hidden_width])
            .collect(),
        raw_rotation: vec![0.0; n * 4],
    };
    let mut attrs = GaussianAttributes {
        colors: Vec::with_capacity(n),
        opacities: Vec::with_capacity(n),
        scales: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
    };

    let mut raw3 = [0.0; 3];
    let mut raw1 = [0.0; 1];
    let mut raw4 = [0.0; 4];
    let corner_stride = cfg.levels * 8;
    for (i, p) in points.iter().enumerate() {
        let enc = &mut cache.encoded[i * enc_dim..(i + 1) * enc_dim];
        let x01 = normalized_position(params, p);
        for level in 0..cfg.levels {
            let geo = level_geometry(params, level, &x01);
            let dst = &mut enc[level * f..(level + 1) * f];
            for (ci, (base, w)) in geo.corners.into_iter().enumerate() {
                let slot = i * corner_stride + level * 8 + ci;
                cache.corner_base[slot] = base;
                cache.corner_w[slot] = w;
                let entry = &params.hash_tables[base as usize..base as usize + f];
                for (d, e) in dst.iter_mut().zip(entry) {
                    *d += w * e;
                }
            }
        }

        let mut x: &[f64] = &cache.encoded[i * enc_dim..(i + 1) * enc_dim];
        for (layer, buf) in params.mlp.trunk.iter().zip(cache.hidden.iter_mut()) {
            let out = &mut buf[i * cfg.hidden_width..(i + 1) * cfg.hidden_width];
            layer.forward_into(x, out);
            for v in out.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            // Reborrow immutably for the next layer.
            x = &buf[i * cfg.hidden_width..(i + 1) * cfg.hidden_width];
        }

        params.mlp.color.forward_into(x, &mut raw3);
        attrs
            .colors
            .push([sigmoid(raw3[0]), sigmoid(raw3[1]), sigmoid(raw3[2])]);
        params.mlp.opacity.forward_into(x, &mut raw1);
        attrs.opacities.push(sigmoid(raw1[0]));
        let mut s = [0.0; 3];
        params.mlp.scale.forward_into(x, &mut s);
        attrs.scales.push(Vec3::new(
            params.voxel_size * sigmoid(s[0]),
            params.voxel_size * sigmoid(s[1]),
            params.voxel_size * sigmoid(s[2]),
        ));
        params.mlp.rotation.forward_into(x, &mut raw4);
        cache.raw_rotation[i * 4..(i + 1) * 4].copy_from_slice(&raw4);
        let q = Quaternion::new(raw4[0], raw4[1], raw4[2], raw4[3]);
        attrs.rotations.push(Quat::new_normalize(q));
    }
    Ok((attrs, cache))
}

/// Backpropagate attribute gradients to every hash entry and MLP weight
/// touched by the batch of the given cache.
pub fn field_backward(
    params: &FieldParams,
    cache: &FieldCache,
    attrs: &GaussianAttributes,
    upstream: &AttributeGradients,
) -> FieldGradients {
    let cfg = &params.cfg;
    let n = cache.n;
    assert_eq!(upstream.opacities.len(), n);
    let f = cfg.features_per_level;
    let enc_dim = cfg.encoded_dim();
    let mut grads = FieldGradients {
        hash_tables: vec![0.0; params.hash_tables.len()],
        mlp: params.mlp.zeros_like(),
    };

    let width = cfg.hidden_width;
    let mut g_hidden = vec![0.0; width.max(enc_dim)];
    let mut g_prev = vec![0.0; width.max(enc_dim)];
    for i in 0..n {
        let last: &[f64] = if cfg.hidden_layers > 0 {
            let buf = cache.hidden.last().unwrap();
            &buf[i * width..(i + 1) * width]
        } else {
            &cache.encoded[i * enc_dim..(i + 1) * enc_dim]
        };
        let last_dim = last.len();
        let gh = &mut g_hidden[..last_dim];
        gh.fill(0.0);

        // Color head: c = sigmoid(raw).
        let c = attrs.colors[i];
        let g_raw3 = [
            upstream.colors[i][0] * c[0] * (1.0 - c[0]),
            upstream.colors[i][1] * c[1] * (1.0 - c[1]),
            upstream.colors[i][2] * c[2] * (1.0 - c[2]),
        ];
        params.mlp.color.backward_accum(last, &g_raw3, &mut grads.mlp.color, gh);

        // Opacity head.
        let a = attrs.opacities[i];
        let g_raw1 = [upstream.opacities[i] * a * (1.0 - a)];
        params
            .mlp
            .opacity
            .backward_accum(last, &g_raw1, &mut grads.mlp.opacity, gh);

        // Scale head: s = voxel * sigmoid(raw); sigma = s / voxel.
        let s = attrs.scales[i];
        let v = params.voxel_size;
        let g_raw_s = [
            upstream.scales[i].x * s.x * (1.0 - s.x / v),
            upstream.scales[i].y * s.y * (1.0 - s.y / v),
            upstream.scales[i].z * s.z * (1.0 - s.z / v),
        ];
        params.mlp.scale.backward_accum(last, &g_raw_s, &mut grads.mlp.scale, gh);

        // Rotation head: r = o / |o|, full quotient rule.
        let o = &cache.raw_rotation[i * 4..(i + 1) * 4];
        let norm = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2] + o[3] * o[3]).sqrt();
        let r = attrs.rotations[i].into_inner();
        let rv = [r.w, r.i, r.j, r.k];
        let gq = upstream.rotations[i];
        let gqv = [gq.w, gq.i, gq.j, gq.k];
        let dot: f64 = rv.iter().zip(&gqv).map(|(a, b)| a * b).sum();
        let mut g_raw_r = [0.0; 4];
        for k in 0..4 {
            g_raw_r[k] = (gqv[k] - rv[k] * dot) / norm;
        }
        params
            .mlp
            .rotation
            .backward_accum(last, &g_raw_r, &mut grads.mlp.rotation, gh);

        // Trunk backward.
        for li in (0..cfg.hidden_layers).rev() {
            let h = &cache.hidden[li][i * width..(i + 1) * width];
            // ReLU: zero activation means zero derivative.
            for (g, hv) in g_hidden.iter_mut().zip(h) {
                if *hv <= 0.0 {
                    *g = 0.0;
                }
            }
            let input: &[f64] = if li == 0 {
                &cache.encoded[i * enc_dim..(i + 1) * enc_dim]
            } else {
                &cache.hidden[li - 1][i * width..(i + 1) * width]
            };
            let in_dim = input.len();
            let gp = &mut g_prev[..in_dim];
            gp.fill(0.0);
            params.mlp.trunk[li].backward_accum(
                input,
                &g_hidden[..width],
                &mut grads.mlp.trunk[li],
                gp,
            );
            g_hidden[..in_dim].copy_from_slice(gp);
        }

        // Encoding backward: scatter into the touched corners.
        let g_enc = &g_hidden[..enc_dim];
        let stride = cfg.levels * 8;
        for level in 0..cfg.levels {
            for ci in 0..8 {
                let slot = i * stride + level * 8 + ci;
                let base = cache.corner_base[slot] as usize;
                let w = cache.corner_w[slot];
                for fi in 0..f {
                    grads.hash_tables[base + fi] += w * g_enc[level * f + fi];
                }
            }
        }
    }
    grads
}

/// Decoupled weight decay on the hash tables only, applied once per optimizer
/// step at the current learning rate.
pub fn hash_weight_decay(params: &mut FieldParams, coefficient: f64, learning_rate: f64) {
    assert!(coefficient >= 0.0);
    let factor = 1.0 - learning_rate * coefficient;
    for v in &mut params.hash_tables {
        *v *= factor;
    }
}
