//! The layer set of the residual network and its forward/backward rules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::{conv_backward, conv_forward, ConvGeom};
use crate::array::{gemm, DenseArray, MatRef, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Batchnorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    Maxpool2x2,
    GlobalAvgPool,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    ResidualAdd,
    Dropout {
        rate: f64,
    },
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Batchnorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool2x2 => "maxpool2x2",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Dense { .. } => "dense",
            LayerKind::ResidualAdd => "residual_add",
            LayerKind::Dropout { .. } => "dropout",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            LayerKind::ResidualAdd => 2,
            _ => 1,
        }
    }

    /// Shapes of the trainable parameters, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![vec![out_channels, in_channels, kernel, kernel]];
                if bias {
                    v.push(vec![out_channels]);
                }
                v
            }
            LayerKind::Batchnorm { channels, .. } => vec![vec![channels], vec![channels]],
            LayerKind::Dense {
                in_features,
                out_features,
            } => vec![vec![out_features, in_features], vec![out_features]],
            _ => Vec::new(),
        }
    }

    /// Shapes of the non-trainable state buffers (batchnorm running stats).
    pub fn buffer_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Batchnorm { channels, .. } => vec![vec![channels], vec![channels]],
            _ => Vec::new(),
        }
    }
}

/// One layer with its parameters and state.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode<T> {
    pub name: String,
    pub kind: LayerKind,
    /// conv: kernel `(Cout,Cin,k,k)` then optional bias; batchnorm: scale, shift;
    /// dense: weight `(out,in)` then bias.
    pub params: Vec<DenseArray<T>>,
    /// batchnorm: running mean, running variance.
    pub buffers: Vec<DenseArray<T>>,
}

impl<T: Scalar> LayerNode<T> {
    /// Node with zeroed parameters, unit batchnorm scale and unit running variance.
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        let mut params: Vec<DenseArray<T>> = kind
            .param_shapes()
            .iter()
            .map(|s| DenseArray::zeros(s))
            .collect();
        let mut buffers: Vec<DenseArray<T>> = kind
            .buffer_shapes()
            .iter()
            .map(|s| DenseArray::zeros(s))
            .collect();
        if let LayerKind::Batchnorm { .. } = kind {
            params[0].data_mut().fill(T::one());
            buffers[1].data_mut().fill(T::one());
        }
        LayerNode {
            name: name.into(),
            kind,
            params,
            buffers,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> LayerNode<U> {
        LayerNode {
            name: self.name.clone(),
            kind: self.kind.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            buffers: self.buffers.iter().map(|p| p.cast()).collect(),
        }
    }

    /// Checks parameter shapes and buffer invariants against the declared kind.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.kind.param_shapes();
        if shapes.len() != self.params.len()
            || shapes.iter().zip(&self.params).any(|(s, p)| s[..] != *p.shape())
        {
            return Err(Error::config(format!(
                "node `{}`: parameter shapes do not match {}",
                self.name,
                self.kind.tag()
            )));
        }
        let bshapes = self.kind.buffer_shapes();
        if bshapes.len() != self.buffers.len()
            || bshapes.iter().zip(&self.buffers).any(|(s, p)| s[..] != *p.shape())
        {
            return Err(Error::config(format!(
                "node `{}`: buffer shapes do not match {}",
                self.name,
                self.kind.tag()
            )));
        }
        if let LayerKind::Batchnorm { .. } = self.kind {
            if self.buffers[1].data().iter().any(|&v| v < T::zero()) {
                return Err(Error::config(format!(
                    "node `{}`: negative running variance",
                    self.name
                )));
            }
        }
        if let LayerKind::Dropout { rate } = self.kind {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::config(format!(
                    "node `{}`: dropout rate {rate} outside [0,1)",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Per-pass settings: phase, and the random stream consumed by active dropout.
pub struct ForwardCtx<'a> {
    pub phase: Phase,
    /// Forces every dropout node active at this rate regardless of phase (MC-dropout).
    pub force_dropout: Option<f64>,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        ForwardCtx {
            phase: Phase::Eval,
            force_dropout: None,
            rng: None,
        }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        ForwardCtx {
            phase: Phase::Train,
            force_dropout: None,
            rng: Some(rng),
        }
    }

    pub fn mc_dropout(rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        ForwardCtx {
            phase: Phase::Eval,
            force_dropout: Some(rate),
            rng: Some(rng),
        }
    }
}

/// What a node's backward pass needs from its forward pass.
#[derive(Clone, Debug)]
pub enum Cache<T> {
    Conv { input: DenseArray<T>, geom: ConvGeom },
    Batchnorm { xhat: DenseArray<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu { mask: Vec<bool> },
    Maxpool { argmax: Vec<usize>, in_shape: Vec<usize> },
    GlobalAvgPool { in_shape: Vec<usize> },
    Dense { input: DenseArray<T> },
    ResidualAdd,
    Dropout { scale: Option<Vec<T>> },
}

/// Forward result of one node.
pub struct LayerOutput<T> {
    pub value: DenseArray<T>,
    pub cache: Cache<T>,
    /// Batch mean and biased variance per channel, for running-stat updates.
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

fn expect_inputs<'a, T>(
    node_name: &str,
    kind: &LayerKind,
    inputs: &[&'a DenseArray<T>],
) -> Result<()> {
    if inputs.len() != kind.arity() {
        return Err(Error::config(format!(
            "node `{node_name}` ({}) takes {} inputs, got {}",
            kind.tag(),
            kind.arity(),
            inputs.len()
        )));
    }
    Ok(())
}

/// Runs one node forward.
pub fn layer_forward<T: Scalar>(
    node: &LayerNode<T>,
    inputs: &[&DenseArray<T>],
    ctx: &mut ForwardCtx<'_>,
) -> Result<LayerOutput<T>> {
    expect_inputs(&node.name, &node.kind, inputs)?;
    let x = inputs[0];
    let shape_err = |what: String| Error::config(format!("node `{}`: {what}", node.name));
    let out = match node.kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias,
        } => {
            let (_, c, h, w) = x.dims4()?;
            if c != in_channels {
                return Err(shape_err(format!(
                    "expects {in_channels} input channels, got {c}"
                )));
            }
            let geom = ConvGeom::new(in_channels, out_channels, kernel, stride, padding, h, w)?;
            let value = conv_forward(
                &geom,
                x,
                &node.params[0],
                if bias { Some(&node.params[1]) } else { None },
            );
            LayerOutput {
                value,
                cache: Cache::Conv {
                    input: x.clone(),
                    geom,
                },
                batch_stats: None,
            }
        }
        LayerKind::Batchnorm { channels, eps, .. } => {
            let (n, c, h, w) = x.dims4()?;
            if c != channels {
                return Err(shape_err(format!("expects {channels} channels, got {c}")));
            }
            batchnorm_forward(node, x, (n, c, h * w), eps, ctx.phase == Phase::Train)
        }
        LayerKind::Relu => {
            let mask: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
            let data = x
                .data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect();
            LayerOutput {
                value: DenseArray::from_vec(x.shape(), data)?,
                cache: Cache::Relu { mask },
                batch_stats: None,
            }
        }
        LayerKind::Maxpool2x2 => {
            let (n, c, h, w) = x.dims4()?;
            let (oh, ow) = (h / 2, w / 2);
            if oh == 0 || ow == 0 {
                return Err(shape_err(format!("input {h}x{w} too small for 2x2 pooling")));
            }
            let mut value = DenseArray::zeros(&[n, c, oh, ow]);
            let mut argmax = vec![0usize; n * c * oh * ow];
            let src = x.data();
            let dst = value.data_mut();
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + 2 * oy * w + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                        let o = plane * oh * ow + oy * ow + ox;
                        dst[o] = src[best];
                        argmax[o] = best;
                    }
                }
            }
            LayerOutput {
                value,
                cache: Cache::Maxpool {
                    argmax,
                    in_shape: x.shape().to_vec(),
                },
                batch_stats: None,
            }
        }
        LayerKind::GlobalAvgPool => {
            let (n, c, h, w) = x.dims4()?;
            let hw = h * w;
            let inv = T::one() / T::lit(hw as f64);
            let data = x
                .data()
                .chunks_exact(hw)
                .map(|plane| plane.iter().copied().sum::<T>() * inv)
                .collect();
            LayerOutput {
                value: DenseArray::from_vec(&[n, c], data)?,
                cache: Cache::GlobalAvgPool {
                    in_shape: x.shape().to_vec(),
                },
                batch_stats: None,
            }
        }
        LayerKind::Dense {
            in_features,
            out_features,
        } => {
            let (n, f) = x.dims2()?;
            if f != in_features {
                return Err(shape_err(format!(
                    "expects {in_features} features, got {f}"
                )));
            }
            let mut value = DenseArray::zeros(&[n, out_features]);
            let bias = node.params[1].data();
            for row in value.data_mut().chunks_exact_mut(out_features) {
                row.copy_from_slice(bias);
            }
            gemm(
                MatRef::new(x.data(), n, in_features),
                MatRef::new(node.params[0].data(), out_features, in_features).t(),
                T::one(),
                value.data_mut(),
            );
            LayerOutput {
                value,
                cache: Cache::Dense { input: x.clone() },
                batch_stats: None,
            }
        }
        LayerKind::ResidualAdd => {
            let y = inputs[1];
            if x.shape() != y.shape() {
                return Err(shape_err(format!(
                    "residual branches disagree: {:?} vs {:?}",
                    x.shape(),
                    y.shape()
                )));
            }
            let mut value = x.clone();
            value.add_assign(y);
            LayerOutput {
                value,
                cache: Cache::ResidualAdd,
                batch_stats: None,
            }
        }
        LayerKind::Dropout { rate } => {
            let active_rate = match ctx.force_dropout {
                Some(r) => Some(r),
                None if ctx.phase == Phase::Train && rate > 0.0 => Some(rate),
                None => None,
            };
            match active_rate {
                Some(r) if r > 0.0 => {
                    if !(0.0..1.0).contains(&r) {
                        return Err(Error::config(format!("dropout rate {r} outside [0,1)")));
                    }
                    let rng = ctx.rng.as_deref_mut().ok_or_else(|| {
                        Error::usage(format!("node `{}`: active dropout needs an rng", node.name))
                    })?;
                    let keep = T::lit(1.0 / (1.0 - r));
                    let scale: Vec<T> = (0..x.len())
                        .map(|_| {
                            if rng.random::<f64>() < r {
                                T::zero()
                            } else {
                                keep
                            }
                        })
                        .collect();
                    let data = x.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
                    LayerOutput {
                        value: DenseArray::from_vec(x.shape(), data)?,
                        cache: Cache::Dropout { scale: Some(scale) },
                        batch_stats: None,
                    }
                }
                _ => LayerOutput {
                    value: x.clone(),
                    cache: Cache::Dropout { scale: None },
                    batch_stats: None,
                },
            }
        }
    };
    out.value.ensure_finite(&node.name)?;
    Ok(out)
}

fn batchnorm_forward<T: Scalar>(
    node: &LayerNode<T>,
    x: &DenseArray<T>,
    (n, c, hw): (usize, usize, usize),
    eps: f64,
    use_batch: bool,
) -> LayerOutput<T> {
    let gamma = node.params[0].data();
    let beta = node.params[1].data();
    let count = T::lit((n * hw) as f64);
    let eps = T::lit(eps);
    let (mean, var) = if use_batch {
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let plane = &x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                mean[ch] += plane.iter().copied().sum::<T>();
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for i in 0..n {
            for ch in 0..c {
                let plane = &x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                let m = mean[ch];
                var[ch] += plane.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
        }
        for v in &mut var {
            *v /= count;
        }
        (mean, var)
    } else {
        (
            node.buffers[0].data().to_vec(),
            node.buffers[1].data().to_vec(),
        )
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = DenseArray::zeros(x.shape());
    let mut value = DenseArray::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            let (m, s, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for ((xh, y), &v) in xhat.data_mut()[range.clone()]
                .iter_mut()
                .zip(&mut value.data_mut()[range.clone()])
                .zip(&x.data()[range])
            {
                *xh = (v - m) * s;
                *y = g * *xh + b;
            }
        }
    }
    LayerOutput {
        value,
        cache: Cache::Batchnorm {
            xhat,
            inv_std,
            batch_stats: use_batch,
        },
        batch_stats: use_batch.then_some((mean, var)),
    }
}

/// Gradients of one node given the upstream gradient.
///
/// Returns one input gradient per forward input (in order) and one gradient
/// per parameter. `need_input_grad = false` lets the first layer skip work
/// nobody consumes; its input gradient is then all zeros.
pub fn layer_backward<T: Scalar>(
    node: &LayerNode<T>,
    cache: &Cache<T>,
    grad_out: &DenseArray<T>,
    need_input_grad: bool,
) -> Result<(Vec<DenseArray<T>>, Vec<DenseArray<T>>)> {
    let mismatch = || {
        Error::Internal(format!(
            "node `{}`: cache does not belong to a {} layer",
            node.name,
            node.kind.tag()
        ))
    };
    match (&node.kind, cache) {
        (LayerKind::Conv2d { bias, .. }, Cache::Conv { input, geom }) => {
            let (dx, dk, db) = conv_backward(
                geom,
                input,
                &node.params[0],
                grad_out,
                *bias,
                need_input_grad,
            );
            let mut grads = vec![dk];
            grads.extend(db);
            Ok((vec![dx], grads))
        }
        (
            LayerKind::Batchnorm { .. },
            Cache::Batchnorm {
                xhat,
                inv_std,
                batch_stats,
            },
        ) => {
            let (n, c, h, w) = grad_out.dims4()?;
            let hw = h * w;
            let gamma = node.params[0].data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for i in 0..n {
                for ch in 0..c {
                    let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                    for (&g, &xh) in grad_out.data()[r.clone()].iter().zip(&xhat.data()[r]) {
                        dgamma[ch] += g * xh;
                        dbeta[ch] += g;
                    }
                }
            }
            let mut dx = DenseArray::zeros(grad_out.shape());
            let m = T::lit((n * hw) as f64);
            for i in 0..n {
                for ch in 0..c {
                    let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                    let k = gamma[ch] * inv_std[ch];
                    let (mean_g, mean_gx) = (dbeta[ch] / m, dgamma[ch] / m);
                    for ((d, &g), &xh) in dx.data_mut()[r.clone()]
                        .iter_mut()
                        .zip(&grad_out.data()[r.clone()])
                        .zip(&xhat.data()[r])
                    {
                        *d = if *batch_stats {
                            k * (g - mean_g - xh * mean_gx)
                        } else {
                            k * g
                        };
                    }
                }
            }
            Ok((
                vec![dx],
                vec![
                    DenseArray::from_vec(&[c], dgamma)?,
                    DenseArray::from_vec(&[c], dbeta)?,
                ],
            ))
        }
        (LayerKind::Relu, Cache::Relu { mask }) => {
            let data = grad_out
                .data()
                .iter()
                .zip(mask)
                .map(|(&g, &m)| if m { g } else { T::zero() })
                .collect();
            Ok((vec![DenseArray::from_vec(grad_out.shape(), data)?], vec![]))
        }
        (LayerKind::Maxpool2x2, Cache::Maxpool { argmax, in_shape }) => {
            let mut dx = DenseArray::zeros(in_shape);
            let d = dx.data_mut();
            for (&src, &g) in argmax.iter().zip(grad_out.data()) {
                d[src] += g;
            }
            Ok((vec![dx], vec![]))
        }
        (LayerKind::GlobalAvgPool, Cache::GlobalAvgPool { in_shape }) => {
            let hw = in_shape[2] * in_shape[3];
            let inv = T::one() / T::lit(hw as f64);
            let mut dx = DenseArray::zeros(in_shape);
            for (plane, &g) in dx.data_mut().chunks_exact_mut(hw).zip(grad_out.data()) {
                plane.fill(g * inv);
            }
            Ok((vec![dx], vec![]))
        }
        (
            LayerKind::Dense {
                in_features,
                out_features,
            },
            Cache::Dense { input },
        ) => {
            let (n, _) = grad_out.dims2()?;
            let (fi, fo) = (*in_features, *out_features);
            let mut dw = DenseArray::zeros(&[fo, fi]);
            gemm(
                MatRef::new(grad_out.data(), n, fo).t(),
                MatRef::new(input.data(), n, fi),
                T::zero(),
                dw.data_mut(),
            );
            let mut db = vec![T::zero(); fo];
            for row in grad_out.data().chunks_exact(fo) {
                for (b, &g) in db.iter_mut().zip(row) {
                    *b += g;
                }
            }
            let mut dx = DenseArray::zeros(&[n, fi]);
            if need_input_grad {
                gemm(
                    MatRef::new(grad_out.data(), n, fo),
                    MatRef::new(node.params[0].data(), fo, fi),
                    T::zero(),
                    dx.data_mut(),
                );
            }
            Ok((vec![dx], vec![dw, DenseArray::from_vec(&[fo], db)?]))
        }
        (LayerKind::ResidualAdd, Cache::ResidualAdd) => {
            Ok((vec![grad_out.clone(), grad_out.clone()], vec![]))
        }
        (LayerKind::Dropout { .. }, Cache::Dropout { scale }) => {
            let dx = match scale {
                None => grad_out.clone(),
                Some(s) => DenseArray::from_vec(
                    grad_out.shape(),
                    grad_out.data().iter().zip(s).map(|(&g, &k)| g * k).collect(),
                )?,
            };
            Ok((vec![dx], vec![]))
        }
        _ => Err(mismatch()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], v: &[f64]) -> DenseArray<f64> {
        DenseArray::from_f64(shape, v).unwrap()
    }

    #[test]
    fn relu_forward_and_backward() {
        let node = LayerNode::<f64>::new("r", LayerKind::Relu);
        let x = arr(&[3], &[-1.0, 2.0, 0.0]);
        let out = layer_forward(&node, &[&x], &mut ForwardCtx::eval()).unwrap();
        assert_eq!(out.value.data(), &[0.0, 2.0, 0.0]);

        let x = arr(&[2], &[-1.0, 2.0]);
        let out = layer_forward(&node, &[&x], &mut ForwardCtx::eval()).unwrap();
        let (gi, _) = layer_backward(&node, &out.cache, &arr(&[2], &[1.0, 1.0]), true).unwrap();
        assert_eq!(gi[0].data(), &[0.0, 1.0]);
    }

    #[test]
    fn conv_all_ones_center_is_nine() {
        let mut node = LayerNode::<f64>::new(
            "c",
            LayerKind::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: false,
            },
        );
        node.params[0].data_mut().fill(1.0);
        let x = DenseArray::full(&[1, 1, 3, 3], 1.0);
        let out = layer_forward(&node, &[&x], &mut ForwardCtx::eval()).unwrap();
        assert_eq!(out.value.shape(), &[1, 1, 3, 3]);
        assert_eq!(out.value.data()[4], 9.0);
        // corner sees a 2x2 window
        assert_eq!(out.value.data()[0], 4.0);
    }

    #[test]
    fn residual_add_backward_copies_gradient() {
        let node = LayerNode::<f64>::new("add", LayerKind::ResidualAdd);
        let a = arr(&[2], &[1.0, 2.0]);
        let b = arr(&[2], &[3.0, 4.0]);
        let out = layer_forward(&node, &[&a, &b], &mut ForwardCtx::eval()).unwrap();
        assert_eq!(out.value.data(), &[4.0, 6.0]);
        let g = arr(&[2], &[0.5, -0.25]);
        let (gi, _) = layer_backward(&node, &out.cache, &g, true).unwrap();
        assert_eq!(gi[0], g);
        assert_eq!(gi[1], g);
    }

    #[test]
    fn conv_channel_mismatch_is_config_error() {
        let node = LayerNode::<f32>::new(
            "stem",
            LayerKind::Conv2d {
                in_channels: 2,
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: false,
            },
        );
        let x = DenseArray::<f32>::zeros(&[1, 3, 8, 8]);
        let err = layer_forward(&node, &[&x], &mut ForwardCtx::eval()).err().unwrap();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn non_finite_output_names_node() {
        let node = LayerNode::<f32>::new("act7", LayerKind::Relu);
        let x = DenseArray::from_vec(&[2], vec![f32::INFINITY, 1.0]).unwrap();
        match layer_forward(&node, &[&x], &mut ForwardCtx::eval()) {
            Err(Error::Numerical { node, .. }) => assert_eq!(node, "act7"),
            _ => panic!("expected numerical error"),
        }
    }

    #[test]
    fn dropout_inert_in_eval_and_needs_rng_when_forced() {
        let node = LayerNode::<f64>::new("drop", LayerKind::Dropout { rate: 0.5 });
        let x = arr(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let out = layer_forward(&node, &[&x], &mut ForwardCtx::eval()).unwrap();
        assert_eq!(out.value, x);
        let mut ctx = ForwardCtx {
            phase: Phase::Eval,
            force_dropout: Some(0.5),
            rng: None,
        };
        assert!(matches!(
            layer_forward(&node, &[&x], &mut ctx),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let node = LayerNode::<f64>::new("mp", LayerKind::Maxpool2x2);
        let x = arr(&[1, 1, 2, 2], &[1.0, 5.0, 3.0, 2.0]);
        let out = layer_forward(&node, &[&x], &mut ForwardCtx::eval()).unwrap();
        assert_eq!(out.value.data(), &[5.0]);
        let (gi, _) = layer_backward(&node, &out.cache, &arr(&[1, 1, 1, 1], &[2.0]), true).unwrap();
        assert_eq!(gi[0].data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn negative_running_variance_rejected() {
        let mut node = LayerNode::<f32>::new(
            "bn",
            LayerKind::Batchnorm {
                channels: 2,
                eps: 1e-5,
                momentum: 0.1,
            },
        );
        assert!(node.validate().is_ok());
        node.buffers[1].data_mut()[1] = -0.1;
        assert!(node.validate().is_err());
    }
}
