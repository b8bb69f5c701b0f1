//! Layer kinds with per-sample forward and backward passes.
//!
//! Spatial activations are `[C, H, W]`; vectors are `[N]`. Every forward
//! returns a [`Cache`] that the matching backward call consumes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv2d {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    PointwiseConv2d {
        in_channels: usize,
        out_channels: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    GlobalAvgPool,
    Softmax,
    /// Per-channel trainable scale and shift (no running statistics).
    ChannelAffine { channels: usize },
    /// `y = concat(x, conv(relu(affine(x))))` with a same-padded `kernel` conv
    /// producing `growth` new channels.
    ConcatDenseBlock {
        in_channels: usize,
        growth: usize,
        kernel: usize,
    },
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::DepthwiseConv2d { .. } => "depthwise_conv2d",
            LayerKind::PointwiseConv2d { .. } => "pointwise_conv2d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Relu => "relu",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Softmax => "softmax",
            LayerKind::ChannelAffine { .. } => "channel_affine",
            LayerKind::ConcatDenseBlock { .. } => "concat_dense_block",
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]],
            LayerKind::DepthwiseConv2d {
                channels, kernel, ..
            } => vec![vec![channels, 1, kernel, kernel], vec![channels]],
            LayerKind::PointwiseConv2d {
                in_channels,
                out_channels,
            } => vec![vec![out_channels, in_channels], vec![out_channels]],
            LayerKind::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            LayerKind::ChannelAffine { channels } => vec![vec![channels], vec![channels]],
            LayerKind::ConcatDenseBlock {
                in_channels,
                growth,
                kernel,
            } => vec![
                vec![in_channels],
                vec![in_channels],
                vec![growth, in_channels, kernel, kernel],
                vec![growth],
            ],
            LayerKind::Relu | LayerKind::GlobalAvgPool | LayerKind::Softmax => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Convolution and dense kinds: the layers counted by the freeze rule.
    pub fn is_weight_layer(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. }
                | LayerKind::DepthwiseConv2d { .. }
                | LayerKind::PointwiseConv2d { .. }
                | LayerKind::Dense { .. }
                | LayerKind::ConcatDenseBlock { .. }
        )
    }

    /// Kinds whose output is a convolutional feature map.
    pub fn is_convolutional(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. }
                | LayerKind::DepthwiseConv2d { .. }
                | LayerKind::PointwiseConv2d { .. }
                | LayerKind::ConcatDenseBlock { .. }
        )
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv2d {
                in_channels, kernel, ..
            }
            | LayerKind::ConcatDenseBlock {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            LayerKind::DepthwiseConv2d { kernel, .. } => kernel * kernel,
            LayerKind::PointwiseConv2d { in_channels, .. } => in_channels,
            LayerKind::Dense { inputs, .. } => inputs,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("{}: {msg}", self.label())));
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 => {
                bad("channels, kernel and stride must be positive")
            }
            LayerKind::DepthwiseConv2d {
                channels,
                kernel,
                stride,
                ..
            } if channels == 0 || kernel == 0 || stride == 0 => {
                bad("channels, kernel and stride must be positive")
            }
            LayerKind::PointwiseConv2d {
                in_channels,
                out_channels,
            } if in_channels == 0 || out_channels == 0 => bad("channels must be positive"),
            LayerKind::Dense { inputs, outputs } if inputs == 0 || outputs == 0 => {
                bad("sizes must be positive")
            }
            LayerKind::ChannelAffine { channels } if channels == 0 => bad("channels must be positive"),
            LayerKind::ConcatDenseBlock {
                in_channels,
                growth,
                kernel,
            } if in_channels == 0 || growth == 0 || kernel % 2 == 0 => {
                bad("channels and growth must be positive and the kernel odd")
            }
            _ => Ok(()),
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let name = self.label();
        let spatial = |c: usize| -> Result<(usize, usize)> {
            match input {
                [ic, h, w] if *ic == c => Ok((*h, *w)),
                _ => Err(Error::shape(
                    name,
                    format!("expected [{c}, H, W] input, got {input:?}"),
                )),
            }
        };
        let conv_out = |h: usize, w: usize, k: usize, s: usize, p: usize| -> Result<(usize, usize)> {
            if h + 2 * p < k || w + 2 * p < k {
                return Err(Error::shape(
                    name,
                    format!("kernel {k} larger than padded input {h}x{w} (padding {p})"),
                ));
            }
            Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
        };
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (h, w) = spatial(in_channels)?;
                let (oh, ow) = conv_out(h, w, kernel, stride, padding)?;
                Ok(vec![out_channels, oh, ow])
            }
            LayerKind::DepthwiseConv2d {
                channels,
                kernel,
                stride,
                padding,
            } => {
                let (h, w) = spatial(channels)?;
                let (oh, ow) = conv_out(h, w, kernel, stride, padding)?;
                Ok(vec![channels, oh, ow])
            }
            LayerKind::PointwiseConv2d {
                in_channels,
                out_channels,
            } => {
                let (h, w) = spatial(in_channels)?;
                Ok(vec![out_channels, h, w])
            }
            LayerKind::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(Error::shape(
                        name,
                        format!("expected [{inputs}] input, got {input:?}"),
                    ));
                }
                Ok(vec![outputs])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::GlobalAvgPool => match input {
                [c, h, w] if h * w > 0 => Ok(vec![*c]),
                _ => Err(Error::shape(name, format!("expected [C, H, W] input, got {input:?}"))),
            },
            LayerKind::Softmax => match input {
                [k] if *k > 0 => Ok(vec![*k]),
                _ => Err(Error::shape(name, format!("expected [K] input, got {input:?}"))),
            },
            LayerKind::ChannelAffine { channels } => {
                spatial(channels)?;
                Ok(input.to_vec())
            }
            LayerKind::ConcatDenseBlock {
                in_channels,
                growth,
                ..
            } => {
                let (h, w) = spatial(in_channels)?;
                Ok(vec![in_channels + growth, h, w])
            }
        }
    }
}

/// A layer description: kind, hyperparameters and trainability.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub trainable: bool,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            trainable: true,
        }
    }

    pub fn param_count(&self) -> usize {
        self.kind.param_count()
    }
}

/// Values saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    layer: String,
    kind: LayerKind,
    input: Tensor,
    output_shape: Vec<usize>,
    aux: Option<Tensor>,
}

impl Cache {
    pub fn input(&self) -> &Tensor {
        &self.input
    }
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub input: Option<Tensor>,
    pub params: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Tensor>,
}

#[derive(Clone, Copy)]
struct ConvGeom {
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.w + self.pad > kx {
            ((self.w - 1 + self.pad - kx) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

fn conv_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    for oc in 0..g.out_c {
        let o = &mut out[oc * plane_out..(oc + 1) * plane_out];
        o.fill(bias[oc]);
        for ic in 0..g.in_c {
            let inp = &input[ic * plane_in..(ic + 1) * plane_in];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = weight[((oc * g.in_c + ic) * g.k + ky) * g.k + kx];
                    let (x0, x1) = g.col_range(kx);
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let in_row = &inp[iy * g.w..(iy + 1) * g.w];
                        let out_row = &mut o[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let shift = x0 + kx - g.pad;
                            for (ov, iv) in out_row[x0..x1].iter_mut().zip(&in_row[shift..]) {
                                *ov += wv * iv;
                            }
                        } else {
                            for ox in x0..x1 {
                                out_row[ox] += wv * in_row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_in: Option<&mut [f64]>,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let mut grad_in = grad_in;
    for oc in 0..g.out_c {
        let go = &grad_out[oc * plane_out..(oc + 1) * plane_out];
        grad_b[oc] += go.iter().sum::<f64>();
        for ic in 0..g.in_c {
            let inp = &input[ic * plane_in..(ic + 1) * plane_in];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let widx = ((oc * g.in_c + ic) * g.k + ky) * g.k + kx;
                    let wv = weight[widx];
                    let (x0, x1) = g.col_range(kx);
                    let mut acc = 0.0;
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let go_row = &go[oy * g.ow..(oy + 1) * g.ow];
                        let row_base = ic * plane_in + iy * g.w;
                        for ox in x0..x1 {
                            let ix = ox * g.stride + kx - g.pad;
                            acc += go_row[ox] * inp[iy * g.w + ix];
                        }
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let gi_row = &mut gi[row_base..row_base + g.w];
                            for ox in x0..x1 {
                                gi_row[ox * g.stride + kx - g.pad] += wv * go_row[ox];
                            }
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
}

fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl Layer {
    pub fn new(spec: LayerSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.kind.validate()?;
        let shapes = spec.kind.param_shapes();
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::shape(
                &spec.name,
                format!(
                    "parameter shapes {:?} do not match {:?}",
                    params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>(),
                    shapes
                ),
            ));
        }
        Ok(Layer { spec, params })
    }

    /// He-uniform weights, zero biases and shifts, unit scales.
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        spec.kind.validate()?;
        let limit = (6.0 / spec.kind.fan_in() as f64).sqrt();
        let he = |shape: Vec<usize>, rng: &mut R| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
            Tensor::new(shape, data).expect("shape product matches")
        };
        let shapes = spec.kind.param_shapes();
        let params = match spec.kind {
            LayerKind::ChannelAffine { .. } => {
                vec![Tensor::filled(shapes[0].clone(), 1.0), Tensor::zeros(shapes[1].clone())]
            }
            LayerKind::ConcatDenseBlock { .. } => vec![
                Tensor::filled(shapes[0].clone(), 1.0),
                Tensor::zeros(shapes[1].clone()),
                he(shapes[2].clone(), rng),
                Tensor::zeros(shapes[3].clone()),
            ],
            _ if shapes.is_empty() => Vec::new(),
            _ => vec![he(shapes[0].clone(), rng), Tensor::zeros(shapes[1].clone())],
        };
        Ok(Layer { spec, params })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn geom(&self, input: &[usize], out: &[usize]) -> ConvGeom {
        let (k, stride, pad) = match self.spec.kind {
            LayerKind::Conv2d {
                kernel,
                stride,
                padding,
                ..
            }
            | LayerKind::DepthwiseConv2d {
                kernel,
                stride,
                padding,
                ..
            } => (kernel, stride, padding),
            LayerKind::ConcatDenseBlock { kernel, .. } => (kernel, 1, kernel / 2),
            _ => (1, 1, 0),
        };
        ConvGeom {
            in_c: input[0],
            h: input[1],
            w: input[2],
            out_c: out[0],
            k,
            stride,
            pad,
            oh: out[1],
            ow: out[2],
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Cache)> {
        let out_shape = self
            .spec
            .kind
            .output_shape(input.shape())
            .map_err(|e| match e {
                Error::Shape { message, .. } => Error::shape(&self.spec.name, message),
                other => other,
            })?;
        let x = input.data();
        let mut aux = None;
        let out: Vec<f64> = match &self.spec.kind {
            LayerKind::Conv2d { .. } => {
                let g = self.geom(input.shape(), &out_shape);
                let mut out = vec![0.0; out_shape.iter().product()];
                conv_forward(&g, x, self.params[0].data(), self.params[1].data(), &mut out);
                out
            }
            LayerKind::DepthwiseConv2d { channels, kernel, .. } => {
                let mut g = self.geom(input.shape(), &out_shape);
                g.in_c = 1;
                g.out_c = 1;
                let (pin, pout, kk) = (g.h * g.w, g.oh * g.ow, kernel * kernel);
                let mut out = vec![0.0; out_shape.iter().product()];
                for c in 0..*channels {
                    conv_forward(
                        &g,
                        &x[c * pin..(c + 1) * pin],
                        &self.params[0].data()[c * kk..(c + 1) * kk],
                        &self.params[1].data()[c..c + 1],
                        &mut out[c * pout..(c + 1) * pout],
                    );
                }
                out
            }
            LayerKind::PointwiseConv2d {
                in_channels,
                out_channels,
            } => {
                let plane = input.shape()[1] * input.shape()[2];
                let (wt, b) = (self.params[0].data(), self.params[1].data());
                let mut out = vec![0.0; out_channels * plane];
                for oc in 0..*out_channels {
                    let o = &mut out[oc * plane..(oc + 1) * plane];
                    o.fill(b[oc]);
                    for ic in 0..*in_channels {
                        let wv = wt[oc * in_channels + ic];
                        for (ov, iv) in o.iter_mut().zip(&x[ic * plane..(ic + 1) * plane]) {
                            *ov += wv * iv;
                        }
                    }
                }
                out
            }
            LayerKind::Dense { inputs, outputs } => {
                let (wt, b) = (self.params[0].data(), self.params[1].data());
                (0..*outputs)
                    .map(|o| {
                        b[o] + wt[o * inputs..(o + 1) * inputs]
                            .iter()
                            .zip(x)
                            .map(|(w, v)| w * v)
                            .sum::<f64>()
                    })
                    .collect()
            }
            LayerKind::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            LayerKind::GlobalAvgPool => {
                let plane = input.shape()[1] * input.shape()[2];
                x.chunks_exact(plane)
                    .map(|c| c.iter().sum::<f64>() / plane as f64)
                    .collect()
            }
            LayerKind::Softmax => {
                let y = softmax(x);
                aux = Some(Tensor::vector(y.clone()));
                y
            }
            LayerKind::ChannelAffine { .. } => {
                let plane = input.shape()[1] * input.shape()[2];
                let (s, b) = (self.params[0].data(), self.params[1].data());
                x.chunks_exact(plane)
                    .enumerate()
                    .flat_map(|(c, ch)| ch.iter().map(move |v| s[c] * v + b[c]))
                    .collect()
            }
            LayerKind::ConcatDenseBlock {
                in_channels,
                growth,
                ..
            } => {
                let plane = input.shape()[1] * input.shape()[2];
                let (s, b) = (self.params[0].data(), self.params[1].data());
                let mut r: Vec<f64> = x
                    .chunks_exact(plane)
                    .enumerate()
                    .flat_map(|(c, ch)| ch.iter().map(move |v| s[c] * v + b[c]))
                    .collect();
                relu_inplace(&mut r);
                let conv_shape = [*growth, out_shape[1], out_shape[2]];
                let g = self.geom(input.shape(), &conv_shape);
                let mut out = vec![0.0; (in_channels + growth) * plane];
                out[..in_channels * plane].copy_from_slice(x);
                conv_forward(
                    &g,
                    &r,
                    self.params[2].data(),
                    self.params[3].data(),
                    &mut out[in_channels * plane..],
                );
                aux = Some(Tensor::new(input.shape().to_vec(), r)?);
                out
            }
        };
        let out = Tensor::new(out_shape.clone(), out)?;
        out.ensure_finite(&format!("forward of {}", self.spec.name))?;
        Ok((
            out,
            Cache {
                layer: self.spec.name.clone(),
                kind: self.spec.kind.clone(),
                input: input.clone(),
                output_shape: out_shape,
                aux,
            },
        ))
    }

    /// Gradients with respect to the input (when requested) and every
    /// parameter tensor, given the gradient of the loss at this layer's output.
    pub fn backward(&self, cache: &Cache, grad_out: &Tensor, need_input_grad: bool) -> Result<LayerGrads> {
        if cache.kind != self.spec.kind || cache.layer != self.spec.name {
            return Err(Error::Contract(format!(
                "cache from layer '{}' ({}) used for '{}' ({})",
                cache.layer,
                cache.kind.label(),
                self.spec.name,
                self.spec.kind.label()
            )));
        }
        if grad_out.shape() != cache.output_shape.as_slice() {
            return Err(Error::Contract(format!(
                "{}: upstream gradient shape {:?} does not match cached output {:?}",
                self.spec.name,
                grad_out.shape(),
                cache.output_shape
            )));
        }
        let in_shape = cache.input.shape().to_vec();
        let x = cache.input.data();
        let go = grad_out.data();
        let mut grad_in = need_input_grad.then(|| vec![0.0; x.len()]);
        let mut pgrads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();

        match &self.spec.kind {
            LayerKind::Conv2d { .. } => {
                let g = self.geom(&in_shape, &cache.output_shape);
                let (gw, gb) = pgrads.split_at_mut(1);
                conv_backward(
                    &g,
                    x,
                    self.params[0].data(),
                    go,
                    grad_in.as_deref_mut(),
                    &mut gw[0],
                    &mut gb[0],
                );
            }
            LayerKind::DepthwiseConv2d { channels, kernel, .. } => {
                let mut g = self.geom(&in_shape, &cache.output_shape);
                g.in_c = 1;
                g.out_c = 1;
                let (pin, pout, kk) = (g.h * g.w, g.oh * g.ow, kernel * kernel);
                let (gw, gb) = pgrads.split_at_mut(1);
                for c in 0..*channels {
                    conv_backward(
                        &g,
                        &x[c * pin..(c + 1) * pin],
                        &self.params[0].data()[c * kk..(c + 1) * kk],
                        &go[c * pout..(c + 1) * pout],
                        grad_in.as_deref_mut().map(|gi| &mut gi[c * pin..(c + 1) * pin]),
                        &mut gw[0][c * kk..(c + 1) * kk],
                        &mut gb[0][c..c + 1],
                    );
                }
            }
            LayerKind::PointwiseConv2d {
                in_channels,
                out_channels,
            } => {
                let plane = in_shape[1] * in_shape[2];
                let wt = self.params[0].data();
                for oc in 0..*out_channels {
                    let g = &go[oc * plane..(oc + 1) * plane];
                    pgrads[1][oc] = g.iter().sum();
                    for ic in 0..*in_channels {
                        let xi = &x[ic * plane..(ic + 1) * plane];
                        pgrads[0][oc * in_channels + ic] =
                            g.iter().zip(xi).map(|(a, b)| a * b).sum();
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let wv = wt[oc * in_channels + ic];
                            for (d, gv) in gi[ic * plane..(ic + 1) * plane].iter_mut().zip(g) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
            LayerKind::Dense { inputs, outputs } => {
                let wt = self.params[0].data();
                for o in 0..*outputs {
                    pgrads[1][o] = go[o];
                    for i in 0..*inputs {
                        pgrads[0][o * inputs + i] = go[o] * x[i];
                    }
                    if let Some(gi) = grad_in.as_deref_mut() {
                        for (d, w) in gi.iter_mut().zip(&wt[o * inputs..(o + 1) * inputs]) {
                            *d += w * go[o];
                        }
                    }
                }
            }
            LayerKind::Relu => {
                if let Some(gi) = grad_in.as_deref_mut() {
                    for ((d, &v), &g) in gi.iter_mut().zip(x).zip(go) {
                        *d = if v > 0.0 { g } else { 0.0 };
                    }
                }
            }
            LayerKind::GlobalAvgPool => {
                if let Some(gi) = grad_in.as_deref_mut() {
                    let plane = in_shape[1] * in_shape[2];
                    for (c, chunk) in gi.chunks_exact_mut(plane).enumerate() {
                        chunk.fill(go[c] / plane as f64);
                    }
                }
            }
            LayerKind::Softmax => {
                if let Some(gi) = grad_in.as_deref_mut() {
                    let y = cache
                        .aux
                        .as_ref()
                        .ok_or_else(|| Error::Contract("softmax cache lacks output".into()))?
                        .data();
                    let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
                    for ((d, &yi), &gv) in gi.iter_mut().zip(y).zip(go) {
                        *d = yi * (gv - dot);
                    }
                }
            }
            LayerKind::ChannelAffine { .. } => {
                let plane = in_shape[1] * in_shape[2];
                let s = self.params[0].data();
                for (c, (xc, gc)) in x.chunks_exact(plane).zip(go.chunks_exact(plane)).enumerate() {
                    pgrads[0][c] = xc.iter().zip(gc).map(|(a, b)| a * b).sum();
                    pgrads[1][c] = gc.iter().sum();
                    if let Some(gi) = grad_in.as_deref_mut() {
                        for (d, gv) in gi[c * plane..(c + 1) * plane].iter_mut().zip(gc) {
                            *d = s[c] * gv;
                        }
                    }
                }
            }
            LayerKind::ConcatDenseBlock {
                in_channels,
                growth,
                ..
            } => {
                let plane = in_shape[1] * in_shape[2];
                let r = cache
                    .aux
                    .as_ref()
                    .ok_or_else(|| Error::Contract("dense block cache lacks activations".into()))?
                    .data();
                let conv_shape = [*growth, in_shape[1], in_shape[2]];
                let g = self.geom(&in_shape, &conv_shape);
                let mut grad_r = vec![0.0; r.len()];
                {
                    let (head, tail) = pgrads.split_at_mut(3);
                    conv_backward(
                        &g,
                        r,
                        self.params[2].data(),
                        &go[in_channels * plane..],
                        Some(&mut grad_r),
                        &mut head[2],
                        &mut tail[0],
                    );
                }
                let s = self.params[0].data();
                for c in 0..*in_channels {
                    let range = c * plane..(c + 1) * plane;
                    let (mut gs, mut gb) = (0.0, 0.0);
                    for p in range.clone() {
                        // relu(z) > 0 exactly where z > 0
                        let gz = if r[p] > 0.0 { grad_r[p] } else { 0.0 };
                        gs += gz * x[p];
                        gb += gz;
                        if let Some(gi) = grad_in.as_deref_mut() {
                            gi[p] = go[p] + s[c] * gz;
                        }
                    }
                    pgrads[0][c] = gs;
                    pgrads[1][c] = gb;
                }
            }
        }

        let params = pgrads
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| Tensor::new(p.shape().to_vec(), g))
            .collect::<Result<Vec<_>>>()?;
        for p in &params {
            p.ensure_finite(&format!("parameter gradient of {}", self.spec.name))?;
        }
        let input = grad_in.map(|g| Tensor::new(in_shape, g)).transpose()?;
        if let Some(gi) = &input {
            gi.ensure_finite(&format!("input gradient of {}", self.spec.name))?;
        }
        Ok(LayerGrads { input, params })
    }
}
