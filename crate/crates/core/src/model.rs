//! Two-headed toy networks for joint LA segmentation and scar-probability
//! prediction, with hand-written reverse passes and a plain SGD trainer.
//!
//! Activations are stored channel-major: element `(c, v)` of a tensor lives at
//! `c * voxels + v`, with `v` the linear voxel index of [`Grid::index`].

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distance::{
    dpm_from_labels, signed_edt, ChannelPair, DpmVariant, DEFAULT_CLIP, NORMAL_WALL, SCAR,
};
use crate::error::{Error, Result};
use crate::losses::{
    objective, LossReport, LossTargets, M2Mode, ObjectiveConfig, Reduction, ScarMetric, TermSet,
    Weights, T_LA,
};
use crate::metrics::{evaluate_case, MetricsReport};
use crate::numeric::logistic;
use crate::phantom::{PhantomCase, Split, Suite};
use crate::surface::{
    classify_surface, hard_boundary_mask, LabeledSurface, DEFAULT_PROJECTION_RADIUS,
};
use crate::volume::{
    hex, read_mvol, write_mvol, Dims, Grid, LabelVolume, ValueKind, Volume3, VolumeHeader,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Three free per-voxel logit fields; ignores the image.
    Field,
    /// Shared 3-level encoder with an LA decoder and a two-channel scar decoder.
    Conv,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "field" => Ok(ModelKind::Field),
            "conv" => Ok(ModelKind::Conv),
            other => Err(Error::InvalidArgument(format!(
                "unknown model kind {other:?}"
            ))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Field => "field",
            ModelKind::Conv => "conv",
        })
    }
}

/// One convolution: zero padding `k / 2`, weights `[cout][cin][k³]` then `cout` biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub offset: usize,
}

impl ConvLayer {
    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    fn n_weights(&self) -> usize {
        self.cout * self.cin * self.taps()
    }

    pub fn n_params(&self) -> usize {
        self.n_weights() + self.cout
    }

    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.n_weights()]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset + self.n_weights()..self.offset + self.n_params()]
    }
}

const ENC: [(usize, usize, usize, usize); 3] = [(1, 8, 3, 1), (8, 16, 3, 2), (16, 32, 3, 2)];
/// Per head: bottleneck, 1×1 after the additive skip, 1×1 after the concatenated skip, output.
const HEAD: [(usize, usize, usize, usize); 3] = [(32, 16, 3, 1), (16, 16, 1, 1), (24, 8, 1, 1)];
const HEAD_WIDTH: usize = 8;
/// Indices of the two output convolutions in [`conv_layout`].
const OUTPUT_LAYERS: [usize; 2] = [6, 10];
/// Output layers start small and biased towards the rare foreground (logistic(-3) ≈ 0.047).
const OUTPUT_GAIN: f64 = 0.1;
const OUTPUT_PRIOR_LOGIT: f64 = -3.0;

fn conv_layout() -> Vec<ConvLayer> {
    let mut layers = Vec::new();
    let mut offset = 0;
    let mut push = |(cin, cout, k, stride): (usize, usize, usize, usize)| {
        let layer = ConvLayer {
            cin,
            cout,
            k,
            stride,
            offset,
        };
        offset += layer.n_params();
        layers.push(layer);
    };
    ENC.into_iter().for_each(&mut push);
    for outputs in [1, 2] {
        HEAD.into_iter().for_each(&mut push);
        push((HEAD_WIDTH, outputs, 1, 1));
    }
    layers
}

fn half(d: Dims) -> Dims {
    d.map(|n| (n - 1) / 2 + 1)
}

fn voxels(d: Dims) -> usize {
    d[0] * d[1] * d[2]
}

/// A toy model bound to one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    kind: ModelKind,
    grid: Grid,
    params: Vec<f64>,
}

/// Model predictions: LA probability and the two scar-head channels, all in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Outputs {
    pub la: Volume3,
    pub dpm: ChannelPair,
}

/// Intermediate activations kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    kind: ModelKind,
    n_params: usize,
    outputs: Outputs,
    conv: Option<ConvCache>,
}

impl ForwardCache {
    pub fn outputs(&self) -> &Outputs {
        &self.outputs
    }
}

#[derive(Clone, Debug)]
struct ConvCache {
    dims: [Dims; 3],
    cols: [Vec<f64>; 3],
    enc: [Vec<f64>; 3],
    bottleneck_col: Vec<f64>,
    heads: [HeadCache; 2],
}

#[derive(Clone, Debug)]
struct HeadCache {
    h3: Vec<f64>,
    u2: Vec<f64>,
    h2: Vec<f64>,
    u1: Vec<f64>,
    h1: Vec<f64>,
    y: Vec<f64>,
}

impl ToyModel {
    /// Field model with every logit zero.
    pub fn zero_field(grid: Grid) -> Self {
        Self {
            kind: ModelKind::Field,
            grid,
            params: vec![0.0; 3 * grid.len()],
        }
    }

    /// Seeded initialization: field logits ~ N(0, 0.01²); conv weights He-normal with
    /// zero biases, except the output layers (see `OUTPUT_GAIN`, `OUTPUT_PRIOR_LOGIT`).
    pub fn new(kind: ModelKind, grid: Grid, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match kind {
            ModelKind::Field => {
                let normal = Normal::new(0.0, 0.01).expect("valid std");
                (0..3 * grid.len())
                    .map(|_| normal.sample(&mut rng))
                    .collect()
            }
            ModelKind::Conv => {
                let layers = conv_layout();
                let mut params = Vec::with_capacity(layers.iter().map(ConvLayer::n_params).sum());
                for (index, l) in layers.iter().enumerate() {
                    let output = OUTPUT_LAYERS.contains(&index);
                    let gain = if output { OUTPUT_GAIN } else { 1.0 };
                    let std = gain * (2.0 / (l.cin * l.taps()) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("valid std");
                    params.extend((0..l.n_weights()).map(|_| normal.sample(&mut rng)));
                    let bias = if output { OUTPUT_PRIOR_LOGIT } else { 0.0 };
                    params.extend(std::iter::repeat_n(bias, l.cout));
                }
                params
            }
        };
        Self { kind, grid, params }
    }

    pub fn from_params(kind: ModelKind, grid: Grid, params: Vec<f64>) -> Result<Self> {
        let expected = Self::param_count(kind, grid);
        if params.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "{kind} model on {:?} needs {expected} parameters, got {}",
                grid.dims(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::OutOfRange("non-finite model parameter".into()));
        }
        Ok(Self { kind, grid, params })
    }

    pub fn param_count(kind: ModelKind, grid: Grid) -> usize {
        match kind {
            ModelKind::Field => 3 * grid.len(),
            ModelKind::Conv => conv_layout().iter().map(ConvLayer::n_params).sum(),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Layer table of the conv model (empty for the field model).
    pub fn layers(&self) -> Vec<ConvLayer> {
        match self.kind {
            ModelKind::Field => Vec::new(),
            ModelKind::Conv => conv_layout(),
        }
    }

    pub fn forward(&self, intensity: &Volume3) -> Result<Outputs> {
        Ok(self.forward_cached(intensity)?.outputs)
    }

    pub fn forward_cached(&self, intensity: &Volume3) -> Result<ForwardCache> {
        self.grid
            .ensure_same(&intensity.grid(), "model/intensity")?;
        let (outputs, conv) = match self.kind {
            ModelKind::Field => (self.field_forward(), None),
            ModelKind::Conv => {
                let cache = self.conv_forward(intensity.data());
                let n = self.grid.len();
                let la = Volume3::from_vec(self.grid, cache.heads[0].y.clone())?;
                let scar_y = &cache.heads[1].y;
                let dpm = ChannelPair::new(
                    Volume3::from_vec(self.grid, scar_y[..n].to_vec())?,
                    Volume3::from_vec(self.grid, scar_y[n..].to_vec())?,
                )?;
                (Outputs { la, dpm }, Some(cache))
            }
        };
        Ok(ForwardCache {
            kind: self.kind,
            n_params: self.params.len(),
            outputs,
            conv,
        })
    }

    fn field_forward(&self) -> Outputs {
        let n = self.grid.len();
        let squash =
            |s: &[f64]| Volume3::from_raw(self.grid, s.iter().map(|&z| logistic(z)).collect());
        Outputs {
            la: squash(&self.params[..n]),
            dpm: ChannelPair::new(
                squash(&self.params[n..2 * n]),
                squash(&self.params[2 * n..]),
            )
            .expect("channels share the model grid"),
        }
    }

    /// Gradient of the objective in `report` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, report: &LossReport) -> Result<Vec<f64>> {
        if cache.kind != self.kind || cache.n_params != self.params.len() {
            return Err(Error::InvalidArgument(
                "forward state belongs to a different model".into(),
            ));
        }
        self.grid
            .ensure_same(&report.grad_la.grid(), "model/loss gradient")?;
        let out = &cache.outputs;
        let chain = |g: &Volume3, y: &Volume3| -> Vec<f64> {
            g.data()
                .iter()
                .zip(y.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect()
        };
        match (self.kind, &cache.conv) {
            (ModelKind::Field, _) => {
                let mut grad = chain(&report.grad_la, &out.la);
                grad.extend(chain(&report.grad_normal, out.dpm.normal()));
                grad.extend(chain(&report.grad_scar, out.dpm.scar()));
                Ok(grad)
            }
            (ModelKind::Conv, Some(conv)) => {
                let n = self.grid.len();
                let dz_la = chain(&report.grad_la, &out.la);
                let mut dz_scar = chain(&report.grad_normal, out.dpm.normal());
                dz_scar.extend(chain(&report.grad_scar, out.dpm.scar()));
                debug_assert_eq!(dz_scar.len(), 2 * n);
                Ok(self.conv_backward(conv, [dz_la, dz_scar]))
            }
            (ModelKind::Conv, None) => Err(Error::InvalidArgument("missing forward state".into())),
        }
    }

    fn conv_forward(&self, x: &[f64]) -> ConvCache {
        let layers = conv_layout();
        let d0 = self.grid.dims();
        let d1 = half(d0);
        let d2 = half(d1);
        let p = &self.params;

        let col0 = im2col(x, 1, d0, 3, 1, d0);
        let e1 = relu(conv_apply(&layers[0], p, &col0, voxels(d0)));
        let col1 = im2col(&e1, 8, d0, 3, 2, d1);
        let e2 = relu(conv_apply(&layers[1], p, &col1, voxels(d1)));
        let col2 = im2col(&e2, 16, d1, 3, 2, d2);
        let e3 = relu(conv_apply(&layers[2], p, &col2, voxels(d2)));
        let bottleneck_col = im2col(&e3, 32, d2, 3, 1, d2);

        let head = |h: usize| -> HeadCache {
            let l = &layers[3 + 4 * h..7 + 4 * h];
            let h3 = relu(conv_apply(&l[0], p, &bottleneck_col, voxels(d2)));
            let mut u2 = upsample(&h3, 16, d2, d1);
            for (u, e) in u2.iter_mut().zip(&e2) {
                *u += e;
            }
            let h2 = relu(conv_apply(&l[1], p, &u2, voxels(d1)));
            let mut u1 = upsample(&h2, 16, d1, d0);
            u1.extend_from_slice(&e1);
            let h1 = relu(conv_apply(&l[2], p, &u1, voxels(d0)));
            let y = conv_apply(&l[3], p, &h1, voxels(d0))
                .into_iter()
                .map(logistic)
                .collect();
            HeadCache {
                h3,
                u2,
                h2,
                u1,
                h1,
                y,
            }
        };
        let heads = [head(0), head(1)];
        ConvCache {
            dims: [d0, d1, d2],
            cols: [col0, col1, col2],
            enc: [e1, e2, e3],
            bottleneck_col,
            heads,
        }
    }

    fn conv_backward(&self, c: &ConvCache, dz: [Vec<f64>; 2]) -> Vec<f64> {
        let layers = conv_layout();
        let [d0, d1, d2] = c.dims;
        let (n0, n1, n2) = (voxels(d0), voxels(d1), voxels(d2));
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];
        let mut de1 = vec![0.0; 8 * n0];
        let mut de2 = vec![0.0; 16 * n1];
        let mut de3 = vec![0.0; 32 * n2];

        for (h, dz) in dz.iter().enumerate() {
            let l = &layers[3 + 4 * h..7 + 4 * h];
            let hc = &c.heads[h];
            let mut dh1 = conv_grad(&l[3], p, &hc.h1, dz, n0, &mut grad);
            relu_back(&mut dh1, &hc.h1);
            let du1 = conv_grad(&l[2], p, &hc.u1, &dh1, n0, &mut grad);
            let mut dh2 = upsample_back(&du1[..16 * n0], 16, d1, d0);
            for (d, g) in de1.iter_mut().zip(&du1[16 * n0..]) {
                *d += g;
            }
            relu_back(&mut dh2, &hc.h2);
            let du2 = conv_grad(&l[1], p, &hc.u2, &dh2, n1, &mut grad);
            for (d, g) in de2.iter_mut().zip(&du2) {
                *d += g;
            }
            let mut dh3 = upsample_back(&du2, 16, d2, d1);
            relu_back(&mut dh3, &hc.h3);
            let dcol = conv_grad(&l[0], p, &c.bottleneck_col, &dh3, n2, &mut grad);
            for (d, g) in de3.iter_mut().zip(col2im(&dcol, 32, d2, 3, 1, d2)) {
                *d += g;
            }
        }

        relu_back(&mut de3, &c.enc[2]);
        let dcol = conv_grad(&layers[2], p, &c.cols[2], &de3, n2, &mut grad);
        for (d, g) in de2.iter_mut().zip(col2im(&dcol, 16, d1, 3, 2, d2)) {
            *d += g;
        }
        relu_back(&mut de2, &c.enc[1]);
        let dcol = conv_grad(&layers[1], p, &c.cols[1], &de2, n1, &mut grad);
        for (d, g) in de1.iter_mut().zip(col2im(&dcol, 8, d0, 3, 2, d1)) {
            *d += g;
        }
        relu_back(&mut de1, &c.enc[0]);
        conv_grad(&layers[0], p, &c.cols[0], &de1, n0, &mut grad);
        grad
    }
}

/// Row-major `C = op(A) · op(B) + beta · C` with `op(A)` m×k and `op(B)` k×n.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index reached through these strides.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `x` (cin × din) into a `(cin·k³) × voxels(dout)` patch matrix.
fn im2col(x: &[f64], cin: usize, din: Dims, k: usize, stride: usize, dout: Dims) -> Vec<f64> {
    if k == 1 && stride == 1 {
        return x.to_vec();
    }
    let nin = voxels(din);
    let nout = voxels(dout);
    let taps = k * k * k;
    let pad = (k / 2) as isize;
    let mut col = vec![0.0; cin * taps * nout];
    for t in 0..taps {
        let (tx, ty, tz) = (
            (t % k) as isize,
            ((t / k) % k) as isize,
            (t / (k * k)) as isize,
        );
        for oz in 0..dout[2] {
            let iz = (oz * stride) as isize + tz - pad;
            if iz < 0 || iz >= din[2] as isize {
                continue;
            }
            for oy in 0..dout[1] {
                let iy = (oy * stride) as isize + ty - pad;
                if iy < 0 || iy >= din[1] as isize {
                    continue;
                }
                for ox in 0..dout[0] {
                    let ix = (ox * stride) as isize + tx - pad;
                    if ix < 0 || ix >= din[0] as isize {
                        continue;
                    }
                    let o = ox + dout[0] * (oy + dout[1] * oz);
                    let i = ix as usize + din[0] * (iy as usize + din[1] * iz as usize);
                    for ch in 0..cin {
                        col[(ch * taps + t) * nout + o] = x[ch * nin + i];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im(col: &[f64], cin: usize, din: Dims, k: usize, stride: usize, dout: Dims) -> Vec<f64> {
    if k == 1 && stride == 1 {
        return col.to_vec();
    }
    let nin = voxels(din);
    let nout = voxels(dout);
    let taps = k * k * k;
    let pad = (k / 2) as isize;
    let mut x = vec![0.0; cin * nin];
    for t in 0..taps {
        let (tx, ty, tz) = (
            (t % k) as isize,
            ((t / k) % k) as isize,
            (t / (k * k)) as isize,
        );
        for oz in 0..dout[2] {
            let iz = (oz * stride) as isize + tz - pad;
            if iz < 0 || iz >= din[2] as isize {
                continue;
            }
            for oy in 0..dout[1] {
                let iy = (oy * stride) as isize + ty - pad;
                if iy < 0 || iy >= din[1] as isize {
                    continue;
                }
                for ox in 0..dout[0] {
                    let ix = (ox * stride) as isize + tx - pad;
                    if ix < 0 || ix >= din[0] as isize {
                        continue;
                    }
                    let o = ox + dout[0] * (oy + dout[1] * oz);
                    let i = ix as usize + din[0] * (iy as usize + din[1] * iz as usize);
                    for ch in 0..cin {
                        x[ch * nin + i] += col[(ch * taps + t) * nout + o];
                    }
                }
            }
        }
    }
    x
}

fn conv_apply(l: &ConvLayer, params: &[f64], col: &[f64], nout: usize) -> Vec<f64> {
    let mut y = vec![0.0; l.cout * nout];
    for (row, &b) in y.chunks_mut(nout).zip(l.bias(params)) {
        row.fill(b);
    }
    gemm(
        l.cout,
        l.cin * l.taps(),
        nout,
        l.weights(params),
        false,
        col,
        false,
        &mut y,
        1.0,
    );
    y
}

/// Accumulates the layer's weight and bias gradients into `grad`; returns the patch-matrix gradient.
fn conv_grad(
    l: &ConvLayer,
    params: &[f64],
    col: &[f64],
    dy: &[f64],
    nout: usize,
    grad: &mut [f64],
) -> Vec<f64> {
    let kk = l.cin * l.taps();
    let nw = l.n_weights();
    let (gw, gb) = grad[l.offset..l.offset + l.n_params()].split_at_mut(nw);
    gemm(l.cout, nout, kk, dy, false, col, true, gw, 1.0);
    for (g, row) in gb.iter_mut().zip(dy.chunks(nout)) {
        *g += row.iter().sum::<f64>();
    }
    let mut dcol = vec![0.0; kk * nout];
    gemm(
        kk,
        l.cout,
        nout,
        l.weights(params),
        true,
        dy,
        false,
        &mut dcol,
        0.0,
    );
    dcol
}

/// Negative-side slope of the hidden activations; keeps units from dying under large early steps.
pub const LEAK: f64 = 0.01;

fn relu(mut v: Vec<f64>) -> Vec<f64> {
    v.iter_mut().filter(|x| **x < 0.0).for_each(|x| *x *= LEAK);
    v
}

fn relu_back(grad: &mut [f64], activation: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a < 0.0 {
            *g *= LEAK;
        }
    }
}

fn upsample(x: &[f64], ch: usize, small: Dims, big: Dims) -> Vec<f64> {
    let (ns, nb) = (voxels(small), voxels(big));
    let mut out = vec![0.0; ch * nb];
    for c in 0..ch {
        for z in 0..big[2] {
            for y in 0..big[1] {
                for x_ in 0..big[0] {
                    let s = x_ / 2 + small[0] * (y / 2 + small[1] * (z / 2));
                    out[c * nb + x_ + big[0] * (y + big[1] * z)] = x[c * ns + s];
                }
            }
        }
    }
    out
}

fn upsample_back(g: &[f64], ch: usize, small: Dims, big: Dims) -> Vec<f64> {
    let (ns, nb) = (voxels(small), voxels(big));
    let mut out = vec![0.0; ch * ns];
    for c in 0..ch {
        for z in 0..big[2] {
            for y in 0..big[1] {
                for x_ in 0..big[0] {
                    let s = x_ / 2 + small[0] * (y / 2 + small[1] * (z / 2));
                    out[c * ns + s] += g[c * nb + x_ + big[0] * (y + big[1] * z)];
                }
            }
        }
    }
    out
}

/// Ablation arms: cross-entropy only, spatially encoded, and spatially encoded plus shape attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Bce,
    Se,
    Sesa,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Bce, Arm::Se, Arm::Sesa];

    pub fn terms(self) -> TermSet {
        match self {
            Arm::Bce => TermSet {
                se_la: false,
                se_scar: false,
                bce_scar: true,
                sa_m1: false,
                sa_m2: false,
            },
            Arm::Se => TermSet {
                sa_m1: false,
                sa_m2: false,
                ..TermSet::FULL
            },
            Arm::Sesa => TermSet::FULL,
        }
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(Arm::Bce),
            "se" => Ok(Arm::Se),
            "sesa" => Ok(Arm::Sesa),
            other => Err(Error::InvalidArgument(format!("unknown arm {other:?}"))),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Bce => "bce",
            Arm::Se => "se",
            Arm::Sesa => "sesa",
        })
    }
}

/// Desk-scale defaults: mean-reduced objective, a 100× larger initial rate and a
/// 10× shorter step interval, sized for ~1000-iteration runs on 32³ phantoms.
pub const DESK_LR: f64 = 0.1;
pub const DESK_LR_STEP: usize = 400;
pub const LONG_LR: f64 = 1e-3;
pub const LONG_LR_STEP: usize = 4000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Cases per step; their gradients are averaged.
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// The learning rate is multiplied by `lr_factor` every `lr_step` iterations.
    pub lr_step: usize,
    pub lr_factor: f64,
    /// Initial balancing weights.
    pub weights: Weights,
    /// λ_LA and λ_M2 are multiplied by `lambda_factor` every `lambda_step` iterations.
    pub lambda_step: usize,
    pub lambda_factor: f64,
    pub arm: Arm,
    pub m2_mode: M2Mode,
    pub scar_metric: ScarMetric,
    pub dpm_variant: DpmVariant,
    /// Exponent of the LA distance map.
    pub beta: f64,
    pub reduction: Reduction,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 1,
            lr: DESK_LR,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_step: DESK_LR_STEP,
            lr_factor: 0.1,
            weights: Weights::default(),
            lambda_step: 200,
            lambda_factor: 1.1,
            arm: Arm::Sesa,
            m2_mode: M2Mode::Differentiable,
            scar_metric: ScarMetric::L2,
            dpm_variant: DpmVariant::Exp,
            beta: 1.0,
            reduction: Reduction::Mean,
            seed: 7,
        }
    }
}

impl TrainConfig {
    /// Long-run schedule: lr 1e-3 divided by 10 every 4000 iterations.
    pub fn long_schedule() -> Self {
        Self {
            lr: LONG_LR,
            lr_step: LONG_LR_STEP,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let positive = [
            ("lr", self.lr),
            ("lr_factor", self.lr_factor),
            ("lambda_factor", self.lambda_factor),
            ("beta", self.beta),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum)
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return Err(Error::InvalidArgument(
                "momentum must lie in [0, 1) and weight decay be >= 0".into(),
            ));
        }
        if self.batch_size == 0 || self.lr_step == 0 || self.lambda_step == 0 {
            return Err(Error::InvalidArgument(
                "batch size and schedule steps must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate in effect at `iteration`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr * self.lr_factor.powi((iteration / self.lr_step) as i32)
    }

    /// Balancing weights in effect at `iteration`.
    pub fn weights_at(&self, iteration: usize) -> Weights {
        let growth = self
            .lambda_factor
            .powi((iteration / self.lambda_step) as i32);
        Weights {
            la: self.weights.la * growth,
            m2: self.weights.m2 * growth,
            ..self.weights
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            terms: self.arm.terms(),
            m2_mode: self.m2_mode,
            scar_metric: self.scar_metric,
            reduction: self.reduction,
            t_la: T_LA,
        }
    }
}

/// One training case with its precomputed targets.
#[derive(Clone, Debug)]
pub struct TrainingCase {
    pub intensity: Volume3,
    pub targets: LossTargets,
}

/// Builds the loss targets of a phantom case: LA distance map at `beta`, DPM of the
/// wall/scar label, the hard boundary mask and binary wall/scar indicators.
pub fn prepare_case(case: &PhantomCase, beta: f64, variant: DpmVariant) -> Result<TrainingCase> {
    let la_dtm = signed_edt(&case.la_label, beta, DEFAULT_CLIP, false)?;
    let dpm = dpm_from_labels(&case.wall_scar_label, variant)?.into_channels();
    let m1 = hard_boundary_mask(&case.la_label)?;
    let grid = case.la_label.grid();
    let indicator = |class: u8| {
        Volume3::from_raw(
            grid,
            case.wall_scar_label
                .labels()
                .map(|l| f64::from(u8::from(l == class)))
                .collect(),
        )
    };
    let scar_indicators = Some(ChannelPair::new(indicator(NORMAL_WALL), indicator(SCAR))?);
    Ok(TrainingCase {
        intensity: case.intensity.clone(),
        targets: LossTargets {
            la_label: case.la_label.clone(),
            la_dtm,
            dpm,
            m1,
            scar_indicators,
        },
    })
}

/// One optimizer step of the log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub iteration: usize,
    pub case: usize,
    pub lr: f64,
    pub lambda_la: f64,
    pub lambda_scar: f64,
    pub lambda_m1: f64,
    pub lambda_m2: f64,
    pub bce_la: f64,
    pub se_la: f64,
    pub se_scar: f64,
    pub bce_scar: f64,
    pub sa_m1: f64,
    pub sa_m2: f64,
    pub total: f64,
    pub grad_norm: f64,
}

pub const TRAIN_LOG_HEADER: &str =
    "iteration,case,lr,lambda_la,lambda_scar,lambda_m1,lambda_m2,bce_la,se_la,se_scar,bce_scar,sa_m1,sa_m2,total,grad_norm";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.case,
                r.lr,
                r.lambda_la,
                r.lambda_scar,
                r.lambda_m1,
                r.lambda_m2,
                r.bce_la,
                r.se_la,
                r.se_scar,
                r.bce_scar,
                r.sa_m1,
                r.sa_m2,
                r.total,
                r.grad_norm
            );
        }
        out
    }

    /// SHA-256 of the CSV rendering.
    pub fn checksum(&self) -> String {
        hex(&Sha256::digest(self.to_csv().as_bytes()))
    }
}

/// Optimizes `model` over `cases` in round-robin order with SGD and the configured schedules.
///
/// A non-finite loss or gradient, or an LA output collapsed to a constant, aborts
/// with [`Error::Diverged`] carrying the parameters from before the failing step.
pub fn train_model(
    mut model: ToyModel,
    cases: &[TrainingCase],
    config: &TrainConfig,
) -> Result<(ToyModel, TrainLog)> {
    config.validate()?;
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no training cases".into()));
    }
    for c in cases {
        model
            .grid
            .ensure_same(&c.intensity.grid(), "model/training case")?;
    }
    let objective_config = config.objective();
    let mut velocity = vec![0.0; model.n_params()];
    let mut log = TrainLog::default();
    let mut cursor = 0usize;
    for iteration in 0..config.iterations {
        let weights = config.weights_at(iteration);
        let lr = config.lr_at(iteration);
        let mut grad = vec![0.0; model.n_params()];
        let mut sums = [0.0; 7];
        let first_case = cursor % cases.len();
        for _ in 0..config.batch_size {
            let case = &cases[cursor % cases.len()];
            cursor += 1;
            let cache = model.forward_cached(&case.intensity)?;
            let out = cache.outputs();
            let report = match objective(
                &out.la,
                &out.dpm,
                &case.targets,
                &weights,
                &objective_config,
            ) {
                Ok(r) => r,
                // a non-finite objective, or an LA output saturated to a constant
                Err(Error::OutOfRange(_) | Error::Degenerate(_)) => {
                    return Err(Error::Diverged {
                        iteration,
                        last_good: Box::new(model),
                    })
                }
                Err(e) => return Err(e),
            };
            for (g, d) in grad.iter_mut().zip(model.backward(&cache, &report)?) {
                *g += d;
            }
            let terms = [
                report.bce_la,
                report.se_la,
                report.se_scar,
                report.bce_scar,
                report.sa_m1,
                report.sa_m2,
                report.total,
            ];
            for (s, t) in sums.iter_mut().zip(terms) {
                *s += t;
            }
        }
        let scale = 1.0 / config.batch_size as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        sums.iter_mut().for_each(|s| *s *= scale);
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() || !sums[6].is_finite() {
            return Err(Error::Diverged {
                iteration,
                last_good: Box::new(model),
            });
        }
        let mut next = model.params.clone();
        for ((p, v), g) in next.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = config.momentum * *v + g + config.weight_decay * *p;
            *p -= lr * *v;
        }
        if next.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                iteration,
                last_good: Box::new(model),
            });
        }
        model.params = next;
        log.rows.push(TrainRow {
            iteration,
            case: first_case,
            lr,
            lambda_la: weights.la,
            lambda_scar: weights.scar,
            lambda_m1: weights.m1,
            lambda_m2: weights.m2,
            bce_la: sums[0],
            se_la: sums[1],
            se_scar: sums[2],
            bce_scar: sums[3],
            sa_m1: sums[4],
            sa_m2: sums[5],
            total: sums[6],
            grad_norm,
        });
    }
    Ok((model, log))
}

/// Initializes a `kind` model from `config.seed` and trains it on the suite's training split.
pub fn train(kind: ModelKind, suite: &Suite, config: &TrainConfig) -> Result<(ToyModel, TrainLog)> {
    let cases = suite
        .split(Split::Train)
        .map(|(_, c)| prepare_case(c, config.beta, config.dpm_variant))
        .collect::<Result<Vec<_>>>()?;
    let grid = cases
        .first()
        .map(|c| c.intensity.grid())
        .ok_or_else(|| Error::InvalidArgument("suite has no training cases".into()))?;
    train_model(ToyModel::new(kind, grid, config.seed), &cases, config)
}

/// Thresholded LA and its classified boundary for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub outputs: Outputs,
    pub la_label: LabelVolume,
    pub surface: LabeledSurface,
}

/// Thresholds the LA at `T_LA`, takes its hard boundary and labels it by the scar-channel rule.
pub fn infer_outputs(outputs: Outputs) -> Result<Inference> {
    let grid = outputs.la.grid();
    let mask: Vec<bool> = outputs.la.data().iter().map(|&p| p > T_LA).collect();
    if !mask.contains(&true) {
        return Err(Error::EmptyClass("predicted LA is empty".into()));
    }
    let la_label = LabelVolume::from_mask(grid, &mask)?;
    let boundary = hard_boundary_mask(&la_label)?;
    let surface = classify_surface(&outputs.dpm, &boundary)?;
    Ok(Inference {
        outputs,
        la_label,
        surface,
    })
}

pub fn infer_case(model: &ToyModel, intensity: &Volume3) -> Result<Inference> {
    infer_outputs(model.forward(intensity)?)
}

/// Infers and scores every case of `split`.
pub fn evaluate_split(model: &ToyModel, suite: &Suite, split: Split) -> Result<Vec<MetricsReport>> {
    suite
        .split(split)
        .map(|(entry, case)| {
            let inf = infer_case(model, &case.intensity)?;
            evaluate_case(
                &entry.id,
                &inf.la_label,
                &inf.surface,
                &case.la_label,
                &case.wall_scar_label,
                DEFAULT_PROJECTION_RADIUS,
            )
        })
        .collect()
}

pub const CHECKPOINT_PARAMS: &str = "params.mvol";
pub const CHECKPOINT_MANIFEST: &str = "model.json";

/// JSON manifest stored next to the parameter volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: ModelKind,
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub n_params: usize,
    pub layers: Vec<ConvLayer>,
    pub params_checksum: String,
}

/// Writes `params.mvol` (an n×1×1 parameter volume) and `model.json` into `dir`.
pub fn save_checkpoint(model: &ToyModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let volume = Volume3::from_vec(Grid::unit([model.n_params(), 1, 1])?, model.params.clone())?;
    let header = VolumeHeader::new(&volume, ValueKind::Parameter);
    write_mvol(dir.join(CHECKPOINT_PARAMS), &header, &volume)?;
    let manifest = CheckpointManifest {
        kind: model.kind,
        dims: model.grid.dims(),
        spacing: model.grid.spacing(),
        n_params: model.n_params(),
        layers: model.layers(),
        params_checksum: crate::volume::payload_checksum(&volume),
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ToyModel> {
    let dir = dir.as_ref();
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let (header, volume) = read_mvol(dir.join(CHECKPOINT_PARAMS))?;
    if header.kind != ValueKind::Parameter {
        return Err(Error::InvalidArgument(format!(
            "{CHECKPOINT_PARAMS} is not a parameter volume"
        )));
    }
    if header.checksum.as_deref() != Some(manifest.params_checksum.as_str()) {
        return Err(Error::Checksum {
            offset: 0,
            expected: manifest.params_checksum,
            found: header.checksum.unwrap_or_default(),
        });
    }
    let grid = Grid::new(manifest.dims, manifest.spacing)?;
    ToyModel::from_params(manifest.kind, grid, volume.into_data())
}
