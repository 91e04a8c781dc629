//! Spatio-temporal deformation field.
//!
//! Six 2D feature planes over the axis pairs `(x,y) (x,z) (y,z) (x,t) (y,t)
//! (z,t)` are sampled bilinearly at a Gaussian's canonical mean and the
//! normalized time. The concatenated features, a sinusoidal time encoding and
//! the raw mean feed a small ReLU network whose three zero-initialized heads
//! emit offsets for the mean, log-scale and rotation.
//!
//! The decoder is evaluated for all Gaussians at once as dense matrix
//! products, which keeps the reduction order fixed regardless of threading.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::scene::{normalize_quat, normalize_quat_vjp, GaussianGrad, GaussianSet};
use crate::{Error, Result};

/// Axis pairs of the six planes; axis 3 is time.
pub const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];
/// Number of decoder outputs: 3 (mean) + 3 (log-scale) + 4 (rotation).
pub const HEAD_OUTPUTS: usize = 10;

/// Shape of the deformation field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldConfig {
    pub spatial_res: usize,
    pub time_res: usize,
    pub features: usize,
    pub width: usize,
    pub depth: usize,
    pub time_freqs: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            spatial_res: 32,
            time_res: 16,
            features: 16,
            width: 64,
            depth: 2,
            time_freqs: 6,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_res < 2 || self.time_res < 2 {
            return Err(Error::Config("grid resolutions must be at least 2".into()));
        }
        if self.features == 0 || self.width == 0 || self.depth == 0 {
            return Err(Error::Config("feature count, decoder width and depth must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        6 * self.features + 2 * (self.time_freqs + 1) + 3
    }
}

/// `(sin(2^k pi t), cos(2^k pi t))` for `k = 0..=k_max`, interleaved.
pub fn encode_time(t: f64, k_max: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range(format!("normalized time {t} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(2 * (k_max + 1));
    push_time_encoding(t, k_max, &mut out);
    Ok(out)
}

fn push_time_encoding(t: f64, k_max: usize, out: &mut Vec<f64>) {
    for k in 0..=k_max {
        let (s, c) = ((1u64 << k) as f64 * std::f64::consts::PI * t).sin_cos();
        out.push(s);
        out.push(c);
    }
}

/// Six feature planes over a box in space and `[0, 1]` in time.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneGrids {
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub spatial_res: usize,
    pub time_res: usize,
    pub features: usize,
    /// All planes back to back; plane `k` is `res(a) x res(b) x features`.
    pub data: Vec<f64>,
}

/// Bilinear footprint on one plane: the four corner offsets and weights,
/// and the derivative of each weight along the two plane axes.
#[derive(Clone, Copy, Debug)]
struct PlaneSample {
    corners: [usize; 4],
    weights: [f64; 4],
    dweights: [[f64; 4]; 2],
}

impl PlaneGrids {
    /// Grids over the box `[min, max]`, features uniform in `(-1e-4, 1e-4)`.
    pub fn new(bounds_min: [f64; 3], bounds_max: [f64; 3], cfg: &FieldConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        for a in 0..3 {
            if !(bounds_max[a] > bounds_min[a]) {
                return Err(Error::Config(format!("empty grid extent on axis {a}")));
            }
        }
        let mut g = Self {
            bounds_min,
            bounds_max,
            spatial_res: cfg.spatial_res,
            time_res: cfg.time_res,
            features: cfg.features,
            data: Vec::new(),
        };
        let n = g.plane_offset(6);
        g.data = (0..n).map(|_| rng.random_range(-1e-4..1e-4)).collect();
        Ok(g)
    }

    pub fn res(&self, axis: usize) -> usize {
        if axis == 3 {
            self.time_res
        } else {
            self.spatial_res
        }
    }

    pub fn plane_offset(&self, plane: usize) -> usize {
        PLANE_AXES[..plane]
            .iter()
            .map(|&(a, b)| self.res(a) * self.res(b) * self.features)
            .sum()
    }

    pub fn plane(&self, k: usize) -> &[f64] {
        &self.data[self.plane_offset(k)..self.plane_offset(k + 1)]
    }

    pub fn plane_mut(&mut self, k: usize) -> &mut [f64] {
        let (s, e) = (self.plane_offset(k), self.plane_offset(k + 1));
        &mut self.data[s..e]
    }

    /// Offset of node `(i, j)` of plane `k` in `data`.
    pub fn node_offset(&self, k: usize, i: usize, j: usize) -> usize {
        let (_, b) = PLANE_AXES[k];
        self.plane_offset(k) + (i * self.res(b) + j) * self.features
    }

    /// Continuous grid coordinate along `axis` and its derivative with
    /// respect to the input (zero when clamped).
    fn coord(&self, axis: usize, value: f64) -> (f64, f64) {
        let r = (self.res(axis) - 1) as f64;
        let (lo, hi) = if axis == 3 {
            (0.0, 1.0)
        } else {
            (self.bounds_min[axis], self.bounds_max[axis])
        };
        let u = (value - lo) / (hi - lo);
        if u <= 0.0 {
            (0.0, 0.0)
        } else if u >= 1.0 {
            (r, 0.0)
        } else {
            (u * r, r / (hi - lo))
        }
    }

    fn plane_sample(&self, k: usize, point: &[f64; 4]) -> (PlaneSample, [f64; 2]) {
        let (a, b) = PLANE_AXES[k];
        let (u, du) = self.coord(a, point[a]);
        let (v, dv) = self.coord(b, point[b]);
        let i0 = (u.floor() as usize).min(self.res(a) - 2);
        let j0 = (v.floor() as usize).min(self.res(b) - 2);
        let fu = u - i0 as f64;
        let fv = v - j0 as f64;
        let o00 = self.node_offset(k, i0, j0);
        let o01 = self.node_offset(k, i0, j0 + 1);
        let o10 = self.node_offset(k, i0 + 1, j0);
        let o11 = self.node_offset(k, i0 + 1, j0 + 1);
        (
            PlaneSample {
                corners: [o00, o10, o01, o11],
                weights: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
                dweights: [[-(1.0 - fv), 1.0 - fv, -fv, fv], [-(1.0 - fu), -fu, 1.0 - fu, fu]],
            },
            [du, dv],
        )
    }

    fn sample_into(&self, mu: &[f64; 3], t: f64, out: &mut [f64]) {
        let point = [mu[0], mu[1], mu[2], t];
        let f = self.features;
        for k in 0..6 {
            let (s, _) = self.plane_sample(k, &point);
            let dst = &mut out[k * f..(k + 1) * f];
            dst.fill(0.0);
            for c in 0..4 {
                let w = s.weights[c];
                let src = &self.data[s.corners[c]..s.corners[c] + f];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += w * v;
                }
            }
        }
    }

    /// Backpropagates `grad` (length `6F`) into `dgrid` and returns the
    /// gradient on the spatial coordinates.
    fn sample_vjp(&self, mu: &[f64; 3], t: f64, grad: &[f64], dgrid: &mut [f64]) -> [f64; 3] {
        let point = [mu[0], mu[1], mu[2], t];
        let f = self.features;
        let mut dmu = [0.0; 4];
        for k in 0..6 {
            let (a, b) = PLANE_AXES[k];
            let (s, [du, dv]) = self.plane_sample(k, &point);
            let g = &grad[k * f..(k + 1) * f];
            for c in 0..4 {
                let w = s.weights[c];
                let off = s.corners[c];
                let mut dot = 0.0;
                for (ch, gv) in g.iter().enumerate() {
                    dgrid[off + ch] += w * gv;
                    dot += gv * self.data[off + ch];
                }
                dmu[a] += s.dweights[0][c] * du * dot;
                dmu[b] += s.dweights[1][c] * dv * dot;
            }
        }
        [dmu[0], dmu[1], dmu[2]]
    }

    /// Bilinear sample of all six planes at `(mu, t)`, concatenated.
    /// Coordinates outside the extent are clamped.
    pub fn sample(&self, mu: &[f64; 3], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; 6 * self.features];
        self.sample_into(mu, t, &mut out);
        out
    }

    /// Mean squared second difference along time over the three time planes.
    pub fn smoothness(&self) -> Result<f64> {
        Ok(self.smoothness_with_grad(None)?)
    }

    /// As [`PlaneGrids::smoothness`], optionally accumulating `scale * dL/dg` into
    /// `grad`.
    pub fn smoothness_with_grad(&self, mut grad: Option<(&mut [f64], f64)>) -> Result<f64> {
        if self.time_res < 3 {
            return Err(Error::Config(format!(
                "temporal smoothness needs at least 3 time nodes, grid has {}",
                self.time_res
            )));
        }
        let f = self.features;
        let tr = self.time_res;
        let count: usize = (3..6).map(|k| self.res(PLANE_AXES[k].0) * (tr - 2) * f).sum();
        let norm = 1.0 / count as f64;
        let mut total = 0.0;
        for k in 3..6 {
            let ra = self.res(PLANE_AXES[k].0);
            for i in 0..ra {
                for j in 1..tr - 1 {
                    let o_prev = self.node_offset(k, i, j - 1);
                    let o_mid = self.node_offset(k, i, j);
                    let o_next = self.node_offset(k, i, j + 1);
                    for ch in 0..f {
                        let sd = self.data[o_prev + ch] - 2.0 * self.data[o_mid + ch] + self.data[o_next + ch];
                        total += sd * sd;
                        if let Some((g, scale)) = grad.as_mut() {
                            let d = 2.0 * sd * norm * *scale;
                            g[o_prev + ch] += d;
                            g[o_mid + ch] -= 2.0 * d;
                            g[o_next + ch] += d;
                        }
                    }
                }
            }
        }
        Ok(total * norm)
    }
}

/// Offsets of one dense layer inside the decoder parameter vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: usize,
    pub bias: usize,
}

/// Fully connected ReLU decoder. Parameters live in one flat vector; the
/// last layer holds the three heads stacked as rows `[mean(3), scale(3),
/// rotation(4)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformDecoder {
    pub layers: Vec<LayerShape>,
    pub params: Vec<f64>,
}

impl DeformDecoder {
    pub fn new(cfg: &FieldConfig, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut inputs = cfg.input_dim();
        for l in 0..=cfg.depth {
            let outputs = if l == cfg.depth { HEAD_OUTPUTS } else { cfg.width };
            layers.push(LayerShape {
                inputs,
                outputs,
                weight: offset,
                bias: offset + inputs * outputs,
            });
            offset += inputs * outputs + outputs;
            inputs = outputs;
        }
        let mut params = vec![0.0; offset];
        for layer in &layers[..cfg.depth] {
            let bound = (6.0 / layer.inputs as f64).sqrt();
            for w in &mut params[layer.weight..layer.weight + layer.inputs * layer.outputs] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Self { layers, params }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn head(&self) -> &LayerShape {
        self.layers.last().expect("decoder has a head layer")
    }

    /// Head weights and biases (zero at initialization).
    pub fn head_params(&self) -> &[f64] {
        &self.params[self.head().weight..]
    }

    pub fn head_params_mut(&mut self) -> &mut [f64] {
        let start = self.head().weight;
        &mut self.params[start..]
    }
}

/// Grids plus decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub config: FieldConfig,
    pub grids: PlaneGrids,
    pub decoder: DeformDecoder,
}

/// Gradients on the field parameters, laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrad {
    pub grids: Vec<f64>,
    pub decoder: Vec<f64>,
}

impl FieldGrad {
    pub fn zeros(field: &DeformationField) -> Self {
        Self {
            grids: vec![0.0; field.grids.data.len()],
            decoder: vec![0.0; field.decoder.params.len()],
        }
    }

    pub fn add_assign(&mut self, o: &FieldGrad) {
        for (a, b) in self.grids.iter_mut().zip(&o.grids) {
            *a += b;
        }
        for (a, b) in self.decoder.iter_mut().zip(&o.decoder) {
            *a += b;
        }
    }
}

/// Activations retained from a forward evaluation for the backward pass.
#[derive(Clone, Debug)]
pub struct DeformTape {
    t: f64,
    n: usize,
    input: Vec<f64>,
    /// Post-activation output of every hidden layer.
    hidden: Vec<Vec<f64>>,
    output: Vec<f64>,
}

/// `C = op(A) * op(B)` (or `C += ...` when `accumulate`), row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index reachable through the
    // given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl DeformationField {
    /// Fresh field over `[min, max]` (the caller dilates the scene box).
    pub fn new(bounds_min: [f64; 3], bounds_max: [f64; 3], config: FieldConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grids = PlaneGrids::new(bounds_min, bounds_max, &config, &mut rng)?;
        let decoder = DeformDecoder::new(&config, &mut rng);
        Ok(Self {
            config,
            grids,
            decoder,
        })
    }

    /// Bounding box of `points` dilated by `fraction` of its size per axis.
    pub fn dilated_bounds(points: &[[f64; 3]], fraction: f64) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        for a in 0..3 {
            if !lo[a].is_finite() {
                lo[a] = -1.0;
                hi[a] = 1.0;
            }
            let pad = ((hi[a] - lo[a]) * fraction).max(1e-3);
            lo[a] -= pad;
            hi[a] += pad;
        }
        (lo, hi)
    }

    pub fn sample_grids(&self, mu: &[f64; 3], t: f64) -> Vec<f64> {
        self.grids.sample(mu, t)
    }

    pub fn smoothness(&self) -> Result<f64> {
        self.grids.smoothness()
    }

    /// Deformed copy of `gs` at normalized time `t`.
    pub fn deform(&self, gs: &GaussianSet, t: f64) -> Result<GaussianSet> {
        Ok(self.deform_with_tape(gs, t)?.0)
    }

    /// Raw decoder outputs `[dmu(3), ds(3), dr(4)]` per Gaussian.
    pub fn offsets(&self, gs: &GaussianSet, t: f64) -> Result<Vec<[f64; HEAD_OUTPUTS]>> {
        let tape = self.forward(gs, t)?;
        Ok(tape
            .output
            .chunks_exact(HEAD_OUTPUTS)
            .map(|c| c.try_into().expect("head width"))
            .collect())
    }

    fn forward(&self, gs: &GaussianSet, t: f64) -> Result<DeformTape> {
        let enc = encode_time(t, self.config.time_freqs)?;
        let n = gs.len();
        let in_dim = self.decoder.input_dim();
        let f6 = 6 * self.grids.features;
        let mut input = vec![0.0; n * in_dim];
        input.par_chunks_mut(in_dim).enumerate().for_each(|(i, row)| {
            let mu = &gs.means[i];
            self.grids.sample_into(mu, t, &mut row[..f6]);
            row[f6..f6 + enc.len()].copy_from_slice(&enc);
            row[f6 + enc.len()..].copy_from_slice(mu);
        });

        let mut hidden = Vec::with_capacity(self.decoder.layers.len() - 1);
        let mut output = Vec::new();
        for (l, layer) in self.decoder.layers.iter().enumerate() {
            let x = if l == 0 { &input } else { &hidden[l - 1] };
            let mut y = vec![0.0; n * layer.outputs];
            for row in y.chunks_exact_mut(layer.outputs) {
                row.copy_from_slice(&self.decoder.params[layer.bias..layer.bias + layer.outputs]);
            }
            let w = &self.decoder.params[layer.weight..layer.bias];
            gemm(n, layer.inputs, layer.outputs, x, false, w, true, &mut y, true);
            if l + 1 < self.decoder.layers.len() {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
                hidden.push(y);
            } else {
                output = y;
            }
        }
        Ok(DeformTape {
            t,
            n,
            input,
            hidden,
            output,
        })
    }

    /// Deformed set plus the tape needed by [`DeformationField::deform_vjp`].
    pub fn deform_with_tape(&self, gs: &GaussianSet, t: f64) -> Result<(GaussianSet, DeformTape)> {
        let tape = self.forward(gs, t)?;
        let mut out = gs.clone();
        for i in 0..gs.len() {
            let d = &tape.output[i * HEAD_OUTPUTS..(i + 1) * HEAD_OUTPUTS];
            if !d.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    index: i,
                    field: "deformation offset",
                });
            }
            for a in 0..3 {
                out.means[i][a] += d[a];
                out.log_scales[i][a] += d[3 + a];
            }
            if d[6..10].iter().any(|&v| v != 0.0) {
                let r = gs.rotations[i];
                out.rotations[i] = normalize_quat([r[0] + d[6], r[1] + d[7], r[2] + d[8], r[3] + d[9]])
                    .map_err(|_| Error::NonFinite {
                        index: i,
                        field: "deformed rotation",
                    })?;
            }
        }
        Ok((out, tape))
    }

    /// Backward pass of [`DeformationField::deform_with_tape`]. `upstream`
    /// holds gradients on the deformed Gaussians; returns gradients on the
    /// canonical Gaussians and accumulates field gradients into `field_grad`.
    pub fn deform_vjp(
        &self,
        gs: &GaussianSet,
        tape: &DeformTape,
        upstream: &[GaussianGrad],
        field_grad: &mut FieldGrad,
    ) -> Result<Vec<GaussianGrad>> {
        let n = tape.n;
        if n != gs.len() || upstream.len() != n {
            return Err(Error::Dimension("deformation tape does not match the Gaussian set".into()));
        }
        let mut canonical: Vec<GaussianGrad> = upstream.to_vec();
        let mut d_out = vec![0.0; n * HEAD_OUTPUTS];
        for i in 0..n {
            let up = &upstream[i];
            let d = &tape.output[i * HEAD_OUTPUTS..(i + 1) * HEAD_OUTPUTS];
            let r = gs.rotations[i];
            let dr = normalize_quat_vjp([r[0] + d[6], r[1] + d[7], r[2] + d[8], r[3] + d[9]], up.rotation);
            canonical[i].rotation = dr;
            let row = &mut d_out[i * HEAD_OUTPUTS..(i + 1) * HEAD_OUTPUTS];
            row[..3].copy_from_slice(&up.mean);
            row[3..6].copy_from_slice(&up.log_scale);
            row[6..].copy_from_slice(&dr);
        }

        let layers = &self.decoder.layers;
        let mut d_y = d_out;
        for l in (0..layers.len()).rev() {
            let layer = layers[l];
            let x = if l == 0 { &tape.input } else { &tape.hidden[l - 1] };
            // weight and bias gradients
            let (dw, rest) = field_grad.decoder[layer.weight..].split_at_mut(layer.inputs * layer.outputs);
            gemm(layer.outputs, n, layer.inputs, &d_y, true, x, false, dw, true);
            let db = &mut rest[..layer.outputs];
            for row in d_y.chunks_exact(layer.outputs) {
                for (b, v) in db.iter_mut().zip(row) {
                    *b += v;
                }
            }
            let w = &self.decoder.params[layer.weight..layer.bias];
            let mut d_x = vec![0.0; n * layer.inputs];
            gemm(n, layer.outputs, layer.inputs, &d_y, false, w, false, &mut d_x, false);
            if l > 0 {
                for (dv, hv) in d_x.iter_mut().zip(&tape.hidden[l - 1]) {
                    if *hv <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            d_y = d_x;
        }

        let in_dim = self.decoder.input_dim();
        let f6 = 6 * self.grids.features;
        let mu_off = in_dim - 3;
        for i in 0..n {
            let row = &d_y[i * in_dim..(i + 1) * in_dim];
            let dmu_grid = self.grids.sample_vjp(&gs.means[i], tape.t, &row[..f6], &mut field_grad.grids);
            for a in 0..3 {
                canonical[i].mean[a] += row[mu_off + a] + dmu_grid[a];
            }
        }
        Ok(canonical)
    }
}
