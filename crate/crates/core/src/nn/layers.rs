use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Init, LayerSpec, Param, Sequential, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    #[default]
    Zero,
    Reflect,
    Replicate,
}

impl PadMode {
    #[inline]
    fn map(self, i: isize, n: usize) -> Option<usize> {
        let n = n as isize;
        if (0..n).contains(&i) {
            return Some(i as usize);
        }
        match self {
            PadMode::Zero => None,
            PadMode::Replicate => Some(i.clamp(0, n - 1) as usize),
            PadMode::Reflect => {
                if n == 1 {
                    return Some(0);
                }
                let period = 2 * (n - 1);
                let mut j = i.rem_euclid(period);
                if j >= n {
                    j = period - j;
                }
                Some(j as usize)
            }
        }
    }
}

fn init_array(init: Init, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    match init {
        Init::Zero => ArrayD::zeros(IxDyn(shape)),
        Init::He => {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            ArrayD::from_shape_simple_fn(IxDyn(shape), || d.sample(rng))
        }
        Init::Normal { std } => {
            let d = Normal::new(0.0, std).unwrap();
            ArrayD::from_shape_simple_fn(IxDyn(shape), || d.sample(rng))
        }
        Init::Xavier => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-a..=a))
        }
        Init::Identity => ArrayD::zeros(IxDyn(shape)),
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    /// `(out, in * k * k)`
    weight: Param,
    bias: Option<Param>,
    input: Option<Tensor>,
}

impl Conv2d {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Row index `c*k*k + ky*k + kx`, column index `n*oh*ow + oy*ow + ox`.
    fn im2col(&self, x: &Tensor) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let k = self.k;
        let cols_per = oh * ow;
        let mut cols = Array2::<f64>::zeros((c * k * k, n * cols_per));
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let ymap = self.index_map(h, oh);
        let xmap = self.index_map(w, ow);
        let out = cols.as_slice_mut().unwrap();
        let row_len = n * cols_per;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut out[row * row_len..(row + 1) * row_len];
                    for b in 0..n {
                        let plane = &xs[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                        for oy in 0..oh {
                            let Some(iy) = ymap[ky * oh + oy] else { continue };
                            let base = b * cols_per + oy * ow;
                            for ox in 0..ow {
                                if let Some(ix) = xmap[kx * ow + ox] {
                                    dst[base + ox] = plane[iy * w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        let (n, c, h, w) = shape;
        let (oh, ow) = self.out_hw(h, w);
        let k = self.k;
        let cols_per = oh * ow;
        let mut dx = vec![0.0; n * c * h * w];
        let src = cols.as_standard_layout();
        let src = src.as_slice().unwrap();
        let ymap = self.index_map(h, oh);
        let xmap = self.index_map(w, ow);
        let row_len = n * cols_per;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let s = &src[row * row_len..(row + 1) * row_len];
                    for b in 0..n {
                        let plane = &mut dx[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                        for oy in 0..oh {
                            let Some(iy) = ymap[ky * oh + oy] else { continue };
                            let base = b * cols_per + oy * ow;
                            for ox in 0..ow {
                                if let Some(ix) = xmap[kx * ow + ox] {
                                    plane[iy * w + ix] += s[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        Array4::from_shape_vec((n, c, h, w), dx).unwrap()
    }

    /// Source index for each (kernel tap, output position).
    fn index_map(&self, n: usize, on: usize) -> Vec<Option<usize>> {
        let mut m = Vec::with_capacity(self.k * on);
        for kk in 0..self.k {
            for o in 0..on {
                let i = (o * self.stride + kk) as isize - self.pad as isize;
                m.push(self.mode.map(i, n));
            }
        }
        m
    }

    fn weight2(&self) -> ndarray::ArrayView2<'_, f64> {
        self.weight.value.view().into_dimensionality::<Ix2>().unwrap()
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channel mismatch");
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.im2col(x);
        let mut y = self.weight2().dot(&cols);
        if let Some(b) = &self.bias {
            let b = b.value.view().into_dimensionality::<Ix1>().unwrap();
            for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(b.iter()) {
                row += bv;
            }
        }
        y.into_shape_with_order((self.out_ch, n, oh, ow))
            .unwrap()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("conv backward without forward_train");
        let (n, _, oh, ow) = grad.dim();
        let g = grad
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_ch, n * oh * ow))
            .unwrap();
        let cols = self.im2col(&x);
        let dw = g.dot(&cols.t());
        {
            let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            gw += &dw;
        }
        if let Some(b) = &mut self.bias {
            let mut gb = b.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            gb += &g.sum_axis(Axis(1));
        }
        let dcols = self.weight2().t().dot(&g);
        self.col2im(&dcols, x.dim())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    /// `(out, in)`
    weight: Param,
    bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    fn flat(x: &Tensor) -> Array2<f64> {
        let n = x.dim().0;
        let f = x.len() / n.max(1);
        x.as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, f))
            .unwrap()
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let xm = Self::flat(x);
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let y = xm.dot(&w.t()) + &b;
        let (n, o) = y.dim();
        y.into_shape_with_order((n, o, 1, 1)).unwrap()
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("linear backward without forward_train");
        let xm = Self::flat(&x);
        let g = Self::flat(grad);
        {
            let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            gw += &g.t().dot(&xm);
            let mut gb = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            gb += &g.sum_axis(Axis(0));
        }
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let dx = g.dot(&w);
        dx.into_shape_with_order(x.raw_dim()).unwrap()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    eps: f64,
    momentum: f64,
    gamma: Param,
    beta: Param,
    running_mean: Param,
    running_var: Param,
    /// normalized input and per-channel inverse std from the last training pass
    cache: Option<(Tensor, Array1<f64>)>,
}

impl BatchNorm {
    fn vec(p: &Param) -> ndarray::ArrayView1<'_, f64> {
        p.value.view().into_dimensionality::<Ix1>().unwrap()
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let mean = Self::vec(&self.running_mean);
        let var = Self::vec(&self.running_var);
        let gamma = Self::vec(&self.gamma);
        let beta = Self::vec(&self.beta);
        let mut y = x.clone();
        for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let inv = 1.0 / (var[c] + self.eps).sqrt();
            plane.mapv_inplace(|v| (v - mean[c]) * inv * gamma[c] + beta[c]);
        }
        y
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(c);
        for ch in 0..c {
            let plane = x.index_axis(Axis(1), ch);
            let mean = plane.sum() / count;
            let var = plane.mapv(|v| (v - mean).powi(2)).sum() / count;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = inv;
            xhat.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| (v - mean) * inv);
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            let m = self.momentum;
            let rm = &mut self.running_mean.value[[ch]];
            *rm = (1.0 - m) * *rm + m * mean;
            let rv = &mut self.running_var.value[[ch]];
            *rv = (1.0 - m) * *rv + m * unbiased;
        }
        let gamma = Self::vec(&self.gamma).to_owned();
        let beta = Self::vec(&self.beta).to_owned();
        let mut y = xhat.clone();
        for (ch, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            plane.mapv_inplace(|v| v * gamma[ch] + beta[ch]);
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("batchnorm backward without forward_train");
        let (n, c, h, w) = grad.dim();
        let count = (n * h * w) as f64;
        let gamma = Self::vec(&self.gamma).to_owned();
        let mut dx = Array4::zeros(grad.raw_dim());
        for ch in 0..c {
            let g = grad.index_axis(Axis(1), ch);
            let xh = xhat.index_axis(Axis(1), ch);
            let dbeta = g.sum();
            let dgamma = (&g * &xh).sum();
            self.beta.grad[[ch]] += dbeta;
            self.gamma.grad[[ch]] += dgamma;
            let scale = gamma[ch] * inv_std[ch];
            let mean_g = dbeta / count;
            let mean_gx = dgamma / count;
            let mut d = dx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut d)
                .and(&g)
                .and(&xh)
                .for_each(|d, &gv, &xv| *d = scale * (gv - mean_g - xv * mean_gx));
        }
        dx
    }
}

fn instance_norm(x: &Tensor, eps: f64) -> Tensor {
    let mut y = x.clone();
    for mut sample in y.axis_iter_mut(Axis(0)) {
        for mut plane in sample.axis_iter_mut(Axis(0)) {
            let n = plane.len() as f64;
            let mean = plane.sum() / n;
            let var = plane.mapv(|v| (v - mean).powi(2)).sum() / n;
            let inv = 1.0 / (var + eps).sqrt();
            plane.mapv_inplace(|v| (v - mean) * inv);
        }
    }
    y
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Conv(Box<Conv2d>),
    Linear(Box<Linear>),
    Relu(Option<Tensor>),
    LeakyRelu(f64, Option<Tensor>),
    Tanh(Option<Tensor>),
    Sigmoid(Option<Tensor>),
    MaxPool {
        size: usize,
        cache: Option<(Vec<usize>, (usize, usize, usize, usize))>,
    },
    Upsample(usize),
    InstanceNorm {
        eps: f64,
        /// output and per-plane inverse std
        cache: Option<(Tensor, Vec<f64>)>,
    },
    BatchNorm(Box<BatchNorm>),
    Flatten(Option<(usize, usize, usize, usize)>),
    Residual {
        body: Sequential,
        shortcut: Option<Sequential>,
    },
}

impl Op {
    pub(crate) fn build(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Result<Op> {
        Ok(match spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                pad_mode,
                bias,
                init,
            } => {
                if *kernel == 0 || *stride == 0 {
                    return Err(Error::validation("conv kernel and stride must be >= 1"));
                }
                let (ci, co, k) = (*in_channels, *out_channels, *kernel);
                let fan_in = ci * k * k;
                let mut w = init_array(*init, &[co, fan_in], fan_in, co * k * k, rng);
                if *init == Init::Identity {
                    if ci != co || k % 2 == 0 {
                        return Err(Error::validation(
                            "identity init needs in == out channels and an odd kernel",
                        ));
                    }
                    let centre = (k / 2) * k + k / 2;
                    for c in 0..co {
                        w[[c, c * k * k + centre]] = 1.0;
                    }
                }
                Op::Conv(Box::new(Conv2d {
                    in_ch: ci,
                    out_ch: co,
                    k,
                    stride: *stride,
                    pad: *padding,
                    mode: *pad_mode,
                    weight: Param::new(w),
                    bias: bias.then(|| Param::new(ArrayD::zeros(IxDyn(&[co])))),
                    input: None,
                }))
            }
            LayerSpec::Linear {
                in_features,
                out_features,
                init,
            } => {
                let mut w = init_array(*init, &[*out_features, *in_features], *in_features, *out_features, rng);
                if *init == Init::Identity {
                    for i in 0..(*in_features).min(*out_features) {
                        w[[i, i]] = 1.0;
                    }
                }
                Op::Linear(Box::new(Linear {
                    weight: Param::new(w),
                    bias: Param::new(ArrayD::zeros(IxDyn(&[*out_features]))),
                    input: None,
                }))
            }
            LayerSpec::Relu => Op::Relu(None),
            LayerSpec::LeakyRelu { slope } => Op::LeakyRelu(*slope, None),
            LayerSpec::Tanh => Op::Tanh(None),
            LayerSpec::Sigmoid => Op::Sigmoid(None),
            LayerSpec::MaxPool { size } => {
                if *size == 0 {
                    return Err(Error::validation("pool size must be >= 1"));
                }
                Op::MaxPool {
                    size: *size,
                    cache: None,
                }
            }
            LayerSpec::Upsample { factor } => {
                if *factor == 0 {
                    return Err(Error::validation("upsample factor must be >= 1"));
                }
                Op::Upsample(*factor)
            }
            LayerSpec::InstanceNorm { eps } => Op::InstanceNorm {
                eps: *eps,
                cache: None,
            },
            LayerSpec::BatchNorm {
                channels,
                eps,
                momentum,
            } => {
                let c = *channels;
                Op::BatchNorm(Box::new(BatchNorm {
                    eps: *eps,
                    momentum: *momentum,
                    gamma: Param::new(ArrayD::ones(IxDyn(&[c]))),
                    beta: Param::new(ArrayD::zeros(IxDyn(&[c]))),
                    running_mean: Param::frozen(ArrayD::zeros(IxDyn(&[c]))),
                    running_var: Param::frozen(ArrayD::ones(IxDyn(&[c]))),
                    cache: None,
                }))
            }
            LayerSpec::Flatten => Op::Flatten(None),
            LayerSpec::Residual { body, shortcut } => Op::Residual {
                body: Sequential::build(body, rng)?,
                shortcut: if shortcut.is_empty() {
                    None
                } else {
                    Some(Sequential::build(shortcut, rng)?)
                },
            },
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Op::Conv(c) => c.forward(x),
            Op::Linear(l) => l.forward(x),
            Op::Relu(_) => x.mapv(|v| v.max(0.0)),
            Op::LeakyRelu(s, _) => x.mapv(|v| if v > 0.0 { v } else { s * v }),
            Op::Tanh(_) => x.mapv(f64::tanh),
            Op::Sigmoid(_) => x.mapv(sigmoid),
            Op::MaxPool { size, .. } => maxpool(x, *size).0,
            Op::Upsample(f) => upsample(x, *f),
            Op::InstanceNorm { eps, .. } => instance_norm(x, *eps),
            Op::BatchNorm(b) => b.forward(x),
            Op::Flatten(_) => {
                let (n, c, h, w) = x.dim();
                x.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((n, c * h * w, 1, 1))
                    .unwrap()
            }
            Op::Residual { body, shortcut } => {
                let a = body.forward(x);
                match shortcut {
                    Some(s) => a + s.forward(x),
                    None => a + x,
                }
            }
        }
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Tensor {
        match self {
            Op::Conv(c) => {
                let y = c.forward(x);
                c.input = Some(x.clone());
                y
            }
            Op::Linear(l) => {
                let y = l.forward(x);
                l.input = Some(x.clone());
                y
            }
            Op::Relu(cache) | Op::LeakyRelu(_, cache) => {
                *cache = Some(x.clone());
                self.forward(x)
            }
            Op::Tanh(cache) => {
                let y = x.mapv(f64::tanh);
                *cache = Some(y.clone());
                y
            }
            Op::Sigmoid(cache) => {
                let y = x.mapv(sigmoid);
                *cache = Some(y.clone());
                y
            }
            Op::MaxPool { size, cache } => {
                let (y, idx) = maxpool(x, *size);
                *cache = Some((idx, x.dim()));
                y
            }
            Op::Upsample(f) => upsample(x, *f),
            Op::InstanceNorm { eps, cache } => {
                let y = instance_norm(x, *eps);
                let inv: Vec<f64> = x
                    .outer_iter()
                    .flat_map(|s| {
                        s.outer_iter()
                            .map(|p| {
                                let n = p.len() as f64;
                                let mean = p.sum() / n;
                                let var = p.mapv(|v| (v - mean).powi(2)).sum() / n;
                                1.0 / (var + *eps).sqrt()
                            })
                            .collect::<Vec<_>>()
                    })
                    .collect();
                *cache = Some((y.clone(), inv));
                y
            }
            Op::BatchNorm(b) => b.forward_train(x),
            Op::Flatten(shape) => {
                *shape = Some(x.dim());
                let (n, c, h, w) = x.dim();
                x.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((n, c * h * w, 1, 1))
                    .unwrap()
            }
            Op::Residual { body, shortcut } => {
                let a = body.forward_train(x);
                match shortcut {
                    Some(s) => a + s.forward_train(x),
                    None => a + x,
                }
            }
        }
    }

    pub(crate) fn backward(&mut self, g: &Tensor) -> Tensor {
        match self {
            Op::Conv(c) => c.backward(g),
            Op::Linear(l) => l.backward(g),
            Op::Relu(cache) => {
                let x = cache.take().expect("relu backward without forward_train");
                ndarray::Zip::from(g).and(&x).map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 })
            }
            Op::LeakyRelu(s, cache) => {
                let s = *s;
                let x = cache.take().expect("leaky relu backward without forward_train");
                ndarray::Zip::from(g).and(&x).map_collect(|&g, &x| if x > 0.0 { g } else { s * g })
            }
            Op::Tanh(cache) => {
                let y = cache.take().expect("tanh backward without forward_train");
                ndarray::Zip::from(g).and(&y).map_collect(|&g, &y| g * (1.0 - y * y))
            }
            Op::Sigmoid(cache) => {
                let y = cache.take().expect("sigmoid backward without forward_train");
                ndarray::Zip::from(g).and(&y).map_collect(|&g, &y| g * y * (1.0 - y))
            }
            Op::MaxPool { cache, .. } => {
                let (idx, shape) = cache.take().expect("pool backward without forward_train");
                let mut dx = vec![0.0; shape.0 * shape.1 * shape.2 * shape.3];
                for (&i, &gv) in idx.iter().zip(g.iter()) {
                    dx[i] += gv;
                }
                Array4::from_shape_vec(shape, dx).unwrap()
            }
            Op::Upsample(f) => {
                let f = *f;
                let (n, c, h, w) = g.dim();
                let mut dx = Array4::zeros((n, c, h / f, w / f));
                for ((b, ch, y, x), &v) in g.indexed_iter() {
                    dx[[b, ch, y / f, x / f]] += v;
                }
                dx
            }
            Op::InstanceNorm { cache, .. } => {
                let (y, inv) = cache.take().expect("instance norm backward without forward_train");
                let mut dx = Array4::zeros(g.raw_dim());
                let (n, c, _, _) = g.dim();
                for b in 0..n {
                    for ch in 0..c {
                        let gp = g.slice(ndarray::s![b, ch, .., ..]);
                        let yp = y.slice(ndarray::s![b, ch, .., ..]);
                        let m = gp.len() as f64;
                        let mean_g = gp.sum() / m;
                        let mean_gy = (&gp * &yp).sum() / m;
                        let s = inv[b * c + ch];
                        let mut d = dx.slice_mut(ndarray::s![b, ch, .., ..]);
                        ndarray::Zip::from(&mut d)
                            .and(&gp)
                            .and(&yp)
                            .for_each(|d, &gv, &yv| *d = s * (gv - mean_g - yv * mean_gy));
                    }
                }
                dx
            }
            Op::BatchNorm(b) => b.backward(g),
            Op::Flatten(shape) => {
                let shape = shape.take().expect("flatten backward without forward_train");
                g.as_standard_layout().into_owned().into_shape_with_order(shape).unwrap()
            }
            Op::Residual { body, shortcut } => {
                let a = body.backward(g);
                match shortcut {
                    Some(s) => a + s.backward(g),
                    None => a + g,
                }
            }
        }
    }

    pub(crate) fn params(&self) -> Vec<&Param> {
        match self {
            Op::Conv(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Op::Linear(l) => vec![&l.weight, &l.bias],
            Op::BatchNorm(b) => vec![&b.gamma, &b.beta, &b.running_mean, &b.running_var],
            Op::Residual { body, shortcut } => {
                let mut v = body.params();
                if let Some(s) = shortcut {
                    v.extend(s.params());
                }
                v
            }
            _ => Vec::new(),
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Op::Conv(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Op::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Op::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta, &mut b.running_mean, &mut b.running_var],
            Op::Residual { body, shortcut } => {
                let mut v = body.params_mut();
                if let Some(s) = shortcut {
                    v.extend(s.params_mut());
                }
                v
            }
            _ => Vec::new(),
        }
    }

    pub(crate) fn clear_cache(&mut self) {
        match self {
            Op::Conv(c) => c.input = None,
            Op::Linear(l) => l.input = None,
            Op::Relu(c) | Op::LeakyRelu(_, c) | Op::Tanh(c) | Op::Sigmoid(c) => *c = None,
            Op::MaxPool { cache, .. } => *cache = None,
            Op::InstanceNorm { cache, .. } => *cache = None,
            Op::BatchNorm(b) => b.cache = None,
            Op::Flatten(s) => *s = None,
            Op::Residual { body, shortcut } => {
                body.clear_cache();
                if let Some(s) = shortcut {
                    s.clear_cache();
                }
            }
            Op::Upsample(_) => {}
        }
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Non-overlapping max pooling; also returns the flat input index of each
/// maximum (first occurrence on ties).
fn maxpool(x: &Tensor, size: usize) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / size, w / size);
    let mut y = Array4::zeros((n, c, oh, ow));
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (f64::NEG_INFINITY, 0usize);
                    for dy in 0..size {
                        for dx in 0..size {
                            let (iy, ix) = (oy * size + dy, ox * size + dx);
                            let v = x[[b, ch, iy, ix]];
                            if v > best.0 {
                                best = (v, ((b * c + ch) * h + iy) * w + ix);
                            }
                        }
                    }
                    y[[b, ch, oy, ox]] = best.0;
                    idx.push(best.1);
                }
            }
        }
    }
    (y, idx)
}

fn upsample(x: &Tensor, f: usize) -> Tensor {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, h * f, w * f), |(b, ch, y, xx)| x[[b, ch, y / f, xx / f]])
}
