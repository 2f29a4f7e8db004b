use rand::Rng;

use super::{gemm, Tensor};
use crate::error::{shape_err, Result};

/// 2-D cross-correlation with weights `[k, c, kh, kw]` and bias `[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Fan-in scaled uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / (in_channels * kernel * kernel) as f64).sqrt();
        Conv2d {
            name: name.into(),
            weight: Tensor::uniform(&[out_channels, in_channels, kernel, kernel], bound, rng),
            bias: Tensor::zeros(&[out_channels]),
            stride,
            padding,
        }
    }

    pub fn from_parts(
        name: impl Into<String>,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(shape_err!(
                "conv weight must be rank 4 [k,c,w,h], got {:?}",
                weight.shape()
            ));
        }
        if bias.shape() != [weight.shape()[0]] {
            return Err(shape_err!(
                "conv bias {:?} does not match {} filters",
                bias.shape(),
                weight.shape()[0]
            ));
        }
        if stride == 0 {
            return Err(shape_err!("stride must be positive"));
        }
        Ok(Conv2d {
            name: name.into(),
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < kh || wp < kw {
            return Err(shape_err!(
                "{}: input {h}x{w} too small for {kh}x{kw} kernel with padding {}",
                self.name,
                self.padding
            ));
        }
        Ok(((hp - kh) / self.stride + 1, (wp - kw) / self.stride + 1))
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [c, h, w] = input else {
            return Err(shape_err!("{}: expected [c,h,w], got {input:?}", self.name));
        };
        if *c != self.in_channels() {
            return Err(shape_err!(
                "{}: input has {c} channels, layer expects {}",
                self.name,
                self.in_channels()
            ));
        }
        let (ho, wo) = self.output_hw(*h, *w)?;
        Ok(vec![self.out_channels(), ho, wo])
    }

    fn geometry(&self, x: &Tensor) -> Result<ConvGeometry> {
        if x.rank() != 4 {
            return Err(shape_err!(
                "{}: expected [n,c,h,w] input, got {:?}",
                self.name,
                x.shape()
            ));
        }
        let s = x.shape();
        let out = self.output_shape(&s[1..])?;
        let (kh, kw) = self.kernel();
        Ok(ConvGeometry {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            k: self.out_channels(),
            kh,
            kw,
            ho: out[1],
            wo: out[2],
            stride: self.stride,
            pad: self.padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let cols = g.ho * g.wo;
        let patch = g.c * g.kh * g.kw;
        let mut out = vec![0.0; g.n * g.k * cols];
        let mut col = if g.pointwise() { Vec::new() } else { vec![0.0; patch * cols] };
        let bias = self.bias.data();
        for (i, out_s) in out.chunks_mut(g.k * cols).enumerate() {
            for (ch, row) in out_s.chunks_mut(cols).enumerate() {
                row.fill(bias[ch]);
            }
            let xs = x.sample(i);
            let col_ref: &[f64] = if g.pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut col);
                &col
            };
            gemm(g.k, patch, cols, self.weight.data(), false, col_ref, false, out_s, 1.0);
        }
        Tensor::new(vec![g.n, g.k, g.ho, g.wo], out)
    }

    fn backward(&mut self, x: &Tensor, gy: &Tensor, need_gx: bool) -> Result<Option<Tensor>> {
        let g = self.geometry(x)?;
        let cols = g.ho * g.wo;
        let patch = g.c * g.kh * g.kw;
        if gy.shape() != [g.n, g.k, g.ho, g.wo] {
            return Err(shape_err!(
                "{}: upstream gradient {:?} does not match output",
                self.name,
                gy.shape()
            ));
        }
        let mut col = if g.pointwise() { Vec::new() } else { vec![0.0; patch * cols] };
        let mut dcol = vec![0.0; patch * cols];
        let mut gx = if need_gx { vec![0.0; x.numel()] } else { Vec::new() };
        let mut gw = self.weight.take_grad();
        let mut gb = self.bias.take_grad();
        let sample_in = g.c * g.h * g.w;
        for i in 0..g.n {
            let gys = gy.sample(i);
            let xs = x.sample(i);
            let col_ref: &[f64] = if g.pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut col);
                &col
            };
            gemm(g.k, cols, patch, gys, false, col_ref, true, &mut gw, 1.0);
            for (ch, row) in gys.chunks(cols).enumerate() {
                gb[ch] += row.iter().sum::<f64>();
            }
            if need_gx {
                let gxs = &mut gx[i * sample_in..(i + 1) * sample_in];
                if g.pointwise() {
                    gemm(patch, g.k, cols, self.weight.data(), true, gys, false, gxs, 1.0);
                } else {
                    gemm(patch, g.k, cols, self.weight.data(), true, gys, false, &mut dcol, 0.0);
                    col2im(&dcol, &g, gxs);
                }
            }
        }
        self.weight.set_grad(gw);
        self.bias.set_grad(gb);
        if need_gx {
            Ok(Some(Tensor::new(x.shape().to_vec(), gx)?))
        } else {
            Ok(None)
        }
    }
}

/// Free-function form of [`Conv2d::forward`].
pub fn conv2d_forward(input: &Tensor, layer: &Conv2d) -> Result<Tensor> {
    layer.forward(input)
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox*stride + kj - pad` is in range.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if self.pad > kj {
            (self.pad - kj).div_ceil(self.stride)
        } else {
            0
        };
        let hi = (self.w + self.pad)
            .checked_sub(kj)
            .map_or(0, |v| v.div_ceil(self.stride))
            .min(self.wo);
        (lo.min(hi), hi)
    }
}

fn im2col(x: &[f64], g: &ConvGeometry, col: &mut [f64]) {
    let cols = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * cols;
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.ho {
                    let dst = &mut col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let x0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[x0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeometry, x: &mut [f64]) {
    let cols = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * cols;
                let (lo, hi) = g.valid_cols(kj);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let x0 = lo * g.stride + kj - g.pad;
                    for (j, s) in src[lo..hi].iter().enumerate() {
                        dst[x0 + j * g.stride] += s;
                    }
                }
            }
        }
    }
}

/// Fully connected layer `y = W x + b` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / inputs as f64).sqrt();
        Dense {
            name: name.into(),
            weight: Tensor::uniform(&[outputs, inputs], bound, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn from_parts(name: impl Into<String>, weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(shape_err!(
                "dense weight {:?} / bias {:?} inconsistent",
                weight.shape(),
                bias.shape()
            ));
        }
        Ok(Dense {
            name: name.into(),
            weight,
            bias,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.inputs() {
            return Err(shape_err!(
                "{}: expected [n,{}], got {:?}",
                self.name,
                self.inputs(),
                x.shape()
            ));
        }
        let n = x.shape()[0];
        let mut out = Vec::with_capacity(n * self.outputs());
        for _ in 0..n {
            out.extend_from_slice(self.bias.data());
        }
        gemm(
            n,
            self.inputs(),
            self.outputs(),
            x.data(),
            false,
            self.weight.data(),
            true,
            &mut out,
            1.0,
        );
        Tensor::new(vec![n, self.outputs()], out)
    }

    fn backward(&mut self, x: &Tensor, gy: &Tensor, need_gx: bool) -> Result<Option<Tensor>> {
        let n = x.shape()[0];
        let (inp, outp) = (self.inputs(), self.outputs());
        gemm(outp, n, inp, gy.data(), true, x.data(), false, self.weight.grad_mut(), 1.0);
        let gb = self.bias.grad_mut();
        for row in gy.data().chunks(outp) {
            for (b, g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
        if !need_gx {
            return Ok(None);
        }
        let mut gx = vec![0.0; n * inp];
        gemm(n, outp, inp, gy.data(), false, self.weight.data(), false, &mut gx, 0.0);
        Ok(Some(Tensor::new(x.shape().to_vec(), gx)?))
    }
}

/// `relu(conv_b(relu(conv_a(x))) + x)`; both convs preserve shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub name: String,
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(name: impl Into<String>, channels: usize, rng: &mut R) -> Self {
        let name = name.into();
        ResidualBlock {
            conv_a: Conv2d::new(format!("{name}.conv_a"), channels, channels, 3, 1, 1, rng),
            conv_b: Conv2d::new(format!("{name}.conv_b"), channels, channels, 3, 1, 1, rng),
            name,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mid = self.conv_a.output_shape(input)?;
        let out = self.conv_b.output_shape(&mid)?;
        if out != input {
            return Err(shape_err!(
                "{}: identity skip needs equal shapes, {input:?} -> {out:?}",
                self.name
            ));
        }
        Ok(out)
    }
}

/// The fixed layer vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    MaxPool2d { window: usize },
    Relu,
    Flatten,
    Dense(Dense),
    Softmax,
    Residual(ResidualBlock),
    NearestUpsample { factor: usize },
    GlobalAvgPool,
}

#[derive(Debug)]
pub(crate) enum Cache {
    Input(Tensor),
    Output(Tensor),
    Pool { argmax: Vec<usize>, input_shape: Vec<usize> },
    Shape(Vec<usize>),
    Residual(Box<ResidualCache>),
}

#[derive(Debug)]
pub(crate) struct ResidualCache {
    x: Tensor,
    a: Tensor,
    r: Tensor,
    s: Tensor,
}

#[cfg(test)]
pub(crate) mod fault {
    use std::cell::Cell;

    thread_local! {
        /// Flips the sign of the standalone ReLU backward pass.
        pub static NEGATE_RELU_BACKWARD: Cell<bool> = const { Cell::new(false) };
    }

    pub fn negate_relu() -> bool {
        NEGATE_RELU_BACKWARD.with(|c| c.get())
    }
}

fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.clear_grad();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Zeroes `g` where `gate <= 0`.
fn relu_mask(g: &mut Tensor, gate: &Tensor) {
    for (gv, &a) in g.data_mut().iter_mut().zip(gate.data()) {
        if a <= 0.0 {
            *gv = 0.0;
        }
    }
}

/// Softmax over axis 1 of a `[n, C]` or `[n, C, H, W]` tensor.
pub(crate) fn softmax_axis1(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 && s.len() != 4 {
        return Err(shape_err!("softmax expects [n,C] or [n,C,H,W], got {s:?}"));
    }
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut y = vec![0.0; x.numel()];
    let xd = x.data();
    for i in 0..n {
        let base = i * c * inner;
        for p in 0..inner {
            let idx = |ch: usize| base + ch * inner + p;
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(xd[idx(ch)]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                let e = (xd[idx(ch)] - m).exp();
                y[idx(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                y[idx(ch)] /= z;
            }
        }
    }
    Tensor::new(s.to_vec(), y)
}

impl Layer {
    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv2d(c) => Some(&c.name),
            Layer::Dense(d) => Some(&d.name),
            Layer::Residual(r) => Some(&r.name),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
            Layer::Softmax => "softmax",
            Layer::Residual(_) => "residual",
            Layer::NearestUpsample { .. } => "upsample",
            Layer::GlobalAvgPool => "global_avg_pool",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(c) => c.output_shape(input),
            Layer::MaxPool2d { window } => match input {
                [c, h, w] if *window > 0 && h / window > 0 && w / window > 0 => {
                    Ok(vec![*c, h / window, w / window])
                }
                _ => Err(shape_err!("maxpool {window} cannot reduce {input:?}")),
            },
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Dense(d) => match input {
                [n] if *n == d.inputs() => Ok(vec![d.outputs()]),
                _ => Err(shape_err!(
                    "{}: expects [{}], got {input:?}",
                    d.name,
                    d.inputs()
                )),
            },
            Layer::Softmax => match input.len() {
                1 | 3 => Ok(input.to_vec()),
                _ => Err(shape_err!("softmax over {input:?}")),
            },
            Layer::Residual(r) => r.output_shape(input),
            Layer::NearestUpsample { factor } => match input {
                [c, h, w] if *factor > 0 => Ok(vec![*c, h * factor, w * factor]),
                _ => Err(shape_err!("upsample {factor} over {input:?}")),
            },
            Layer::GlobalAvgPool => match input {
                [c, _, _] => Ok(vec![*c]),
                _ => Err(shape_err!("global average pool over {input:?}")),
            },
        }
    }

    pub(crate) fn forward(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Option<Cache>)> {
        let out = match self {
            Layer::Conv2d(c) => {
                let y = c.forward(x)?;
                (y, keep.then(|| Cache::Input(x.clone())))
            }
            Layer::Dense(d) => {
                let y = d.forward(x)?;
                (y, keep.then(|| Cache::Input(x.clone())))
            }
            Layer::Relu => {
                let y = relu(x);
                let cache = keep.then(|| Cache::Output(y.clone()));
                (y, cache)
            }
            Layer::Softmax => {
                let y = softmax_axis1(x)?;
                let cache = keep.then(|| Cache::Output(y.clone()));
                (y, cache)
            }
            Layer::Flatten => {
                let n = x.shape()[0];
                let y = x.clone().reshape(vec![n, x.sample_len()])?;
                (y, keep.then(|| Cache::Shape(x.shape().to_vec())))
            }
            Layer::MaxPool2d { window } => {
                let (y, argmax) = maxpool(x, *window)?;
                let cache = keep.then(|| Cache::Pool {
                    argmax,
                    input_shape: x.shape().to_vec(),
                });
                (y, cache)
            }
            Layer::NearestUpsample { factor } => {
                let y = upsample(x, *factor)?;
                (y, keep.then(|| Cache::Shape(x.shape().to_vec())))
            }
            Layer::GlobalAvgPool => {
                let s = x.shape();
                if s.len() != 4 {
                    return Err(shape_err!("global average pool over {s:?}"));
                }
                let inner = s[2] * s[3];
                let data: Vec<f64> = x
                    .data()
                    .chunks(inner)
                    .map(|p| p.iter().sum::<f64>() / inner as f64)
                    .collect();
                let y = Tensor::new(vec![s[0], s[1]], data)?;
                (y, keep.then(|| Cache::Shape(s.to_vec())))
            }
            Layer::Residual(r) => {
                let a = r.conv_a.forward(x)?;
                let rr = relu(&a);
                let b = r.conv_b.forward(&rr)?;
                if b.shape() != x.shape() {
                    return Err(shape_err!("{}: skip shape mismatch", r.name));
                }
                let mut s = b;
                for (sv, xv) in s.data_mut().iter_mut().zip(x.data()) {
                    *sv += xv;
                }
                let y = relu(&s);
                let cache = keep.then(|| {
                    Cache::Residual(Box::new(ResidualCache {
                        x: x.clone(),
                        a,
                        r: rr,
                        s,
                    }))
                });
                (y, cache)
            }
        };
        Ok(out)
    }

    pub(crate) fn backward(
        &mut self,
        cache: Cache,
        gy: Tensor,
        need_gx: bool,
    ) -> Result<Option<Tensor>> {
        match (self, cache) {
            (Layer::Conv2d(c), Cache::Input(x)) => c.backward(&x, &gy, need_gx),
            (Layer::Dense(d), Cache::Input(x)) => d.backward(&x, &gy, need_gx),
            (Layer::Relu, Cache::Output(y)) => {
                let mut g = gy;
                relu_mask(&mut g, &y);
                #[cfg(test)]
                if fault::negate_relu() {
                    for v in g.data_mut() {
                        *v = -*v;
                    }
                }
                Ok(Some(g))
            }
            (Layer::Softmax, Cache::Output(y)) => Ok(Some(softmax_backward(&y, &gy)?)),
            (Layer::Flatten, Cache::Shape(shape)) => Ok(Some(gy.reshape(shape)?)),
            (Layer::MaxPool2d { .. }, Cache::Pool { argmax, input_shape }) => {
                let mut gx = Tensor::zeros(&input_shape);
                let gxd = gx.data_mut();
                for (&src, g) in argmax.iter().zip(gy.data()) {
                    gxd[src] += g;
                }
                Ok(Some(gx))
            }
            (Layer::NearestUpsample { factor }, Cache::Shape(shape)) => {
                let f = *factor;
                let (h, w) = (shape[2], shape[3]);
                let mut gx = Tensor::zeros(&shape);
                let gxd = gx.data_mut();
                let wo = w * f;
                for (plane, gplane) in gxd.chunks_mut(h * w).zip(gy.data().chunks(h * w * f * f)) {
                    for oy in 0..h * f {
                        for ox in 0..wo {
                            plane[(oy / f) * w + ox / f] += gplane[oy * wo + ox];
                        }
                    }
                }
                Ok(Some(gx))
            }
            (Layer::GlobalAvgPool, Cache::Shape(shape)) => {
                let inner = shape[2] * shape[3];
                let mut data = Vec::with_capacity(inner * gy.numel());
                for g in gy.data() {
                    data.extend(std::iter::repeat_n(g / inner as f64, inner));
                }
                Ok(Some(Tensor::new(shape, data)?))
            }
            (Layer::Residual(r), Cache::Residual(c)) => {
                let ResidualCache { x, a, r: rr, s } = *c;
                let mut gs = gy;
                relu_mask(&mut gs, &s);
                let mut gr = r
                    .conv_b
                    .backward(&rr, &gs, true)?
                    .expect("input gradient requested");
                relu_mask(&mut gr, &a);
                let main = r.conv_a.backward(&x, &gr, need_gx)?;
                Ok(main.map(|mut gx| {
                    for (v, g) in gx.data_mut().iter_mut().zip(gs.data()) {
                        *v += g;
                    }
                    gx
                }))
            }
            (layer, _) => Err(shape_err!("cache does not belong to {} layer", layer.kind())),
        }
    }

    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        match self {
            Layer::Conv2d(c) => vec![
                (format!("{}.weight", c.name), &c.weight),
                (format!("{}.bias", c.name), &c.bias),
            ],
            Layer::Dense(d) => vec![
                (format!("{}.weight", d.name), &d.weight),
                (format!("{}.bias", d.name), &d.bias),
            ],
            Layer::Residual(r) => vec![
                (format!("{}.weight", r.conv_a.name), &r.conv_a.weight),
                (format!("{}.bias", r.conv_a.name), &r.conv_a.bias),
                (format!("{}.weight", r.conv_b.name), &r.conv_b.weight),
                (format!("{}.bias", r.conv_b.name), &r.conv_b.bias),
            ],
            _ => Vec::new(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            Layer::Conv2d(c) => vec![
                (format!("{}.weight", c.name), &mut c.weight),
                (format!("{}.bias", c.name), &mut c.bias),
            ],
            Layer::Dense(d) => vec![
                (format!("{}.weight", d.name), &mut d.weight),
                (format!("{}.bias", d.name), &mut d.bias),
            ],
            Layer::Residual(r) => vec![
                (format!("{}.weight", r.conv_a.name), &mut r.conv_a.weight),
                (format!("{}.bias", r.conv_a.name), &mut r.conv_a.bias),
                (format!("{}.weight", r.conv_b.name), &mut r.conv_b.weight),
                (format!("{}.bias", r.conv_b.name), &mut r.conv_b.bias),
            ],
            _ => Vec::new(),
        }
    }
}

fn softmax_backward(y: &Tensor, gy: &Tensor) -> Result<Tensor> {
    let s = y.shape();
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let (yd, gd) = (y.data(), gy.data());
    let mut gx = vec![0.0; y.numel()];
    for i in 0..n {
        let base = i * c * inner;
        for p in 0..inner {
            let dot: f64 = (0..c)
                .map(|ch| yd[base + ch * inner + p] * gd[base + ch * inner + p])
                .sum();
            for ch in 0..c {
                let k = base + ch * inner + p;
                gx[k] = yd[k] * (gd[k] - dot);
            }
        }
    }
    Tensor::new(s.to_vec(), gx)
}

/// Non-overlapping max pool; ties resolve to the first row-major element.
fn maxpool(x: &Tensor, window: usize) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 || window == 0 || s[2] / window == 0 || s[3] / window == 0 {
        return Err(shape_err!("maxpool {window} cannot reduce {s:?}"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / window, w / window);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * window * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let k = base + (oy * window + dy) * w + ox * window + dx;
                        if xd[k] > xd[best] {
                            best = k;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, argmax))
}

fn upsample(x: &Tensor, f: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || f == 0 {
        return Err(shape_err!("upsample {f} over {s:?}"));
    }
    let (h, w) = (s[2], s[3]);
    let wo = w * f;
    let mut out = Vec::with_capacity(x.numel() * f * f);
    for plane in x.data().chunks(h * w) {
        for oy in 0..h * f {
            let row = &plane[(oy / f) * w..(oy / f + 1) * w];
            for ox in 0..wo {
                out.push(row[ox / f]);
            }
        }
    }
    Tensor::new(vec![s[0], s[1], h * f, wo], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct quadruple-loop cross-correlation, independent of im2col.
    fn conv_oracle(x: &Tensor, c: &Conv2d) -> Vec<f64> {
        let s = x.shape();
        let (n, ci, h, w) = (s[0], s[1], s[2], s[3]);
        let (kh, kw) = c.kernel();
        let k = c.out_channels();
        let (ho, wo) = c.output_hw(h, w).unwrap();
        let wt = c.weight.data();
        let mut out = vec![0.0; n * k * ho * wo];
        for b in 0..n {
            for f in 0..k {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = c.bias.data()[f];
                        for ch in 0..ci {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * c.stride + i) as isize - c.padding as isize;
                                    let ix = (ox * c.stride + j) as isize - c.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wt[((f * ci + ch) * kh + i) * kw + j]
                                        * x.data()[((b * ci + ch) * h + iy as usize) * w
                                            + ix as usize];
                                }
                            }
                        }
                        out[((b * k + f) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let conv = Conv2d::from_parts(
            "id",
            Tensor::new(vec![1, 1, 3, 3], w).unwrap(),
            Tensor::zeros(&[1]),
            1,
            1,
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let y = conv2d_forward(&x, &conv).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn same_padding_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new("c", 4, 8, 3, 1, 1, &mut rng);
        let x = Tensor::uniform(&[2, 4, 16, 16], 1.0, &mut rng);
        assert_eq!(conv.forward(&x).unwrap().shape(), [2, 8, 16, 16]);
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::uniform(&[1, 2, 5, 5], 1.0, &mut rng);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let mut conv = Conv2d::new("c", 2, 3, 3, stride, pad, &mut rng);
            conv.bias = Tensor::uniform(&[3], 0.5, &mut rng);
            let y = conv.forward(&x).unwrap();
            let want = conv_oracle(&x, &conv);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn channel_mismatch_and_tiny_input_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new("c", 3, 2, 3, 1, 0, &mut rng);
        assert!(conv.forward(&Tensor::zeros(&[1, 4, 5, 5])).is_err());
        assert!(conv.forward(&Tensor::zeros(&[1, 3, 2, 2])).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let (y, argmax) = maxpool(&x, 2).unwrap();
        assert_eq!(y.data(), &[1.0]);
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn upsample_then_gradient_sums() {
        let layer = Layer::NearestUpsample { factor: 2 };
        let x = Tensor::new(vec![1, 1, 1, 2], vec![3.0, 4.0]).unwrap();
        let (y, cache) = layer.forward(&x, true).unwrap();
        assert_eq!(y.data(), &[3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]);
        let mut layer = layer;
        let gx = layer
            .backward(cache.unwrap(), Tensor::full(&[1, 1, 2, 4], 1.0), true)
            .unwrap()
            .unwrap();
        assert_eq!(gx.data(), &[4.0, 4.0]);
    }
}
