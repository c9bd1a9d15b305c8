//! Layer kernels: forward maps and their vector-Jacobian products.
//!
//! Every function here is pure. The autodiff graph composes them; the model
//! never calls them directly. All spatial tensors are `(H, W, C)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a (possibly grouped) 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Ungrouped `k x k` convolution with "same" zero padding (`k` odd).
    pub fn same(in_channels: usize, out_channels: usize, k: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: k,
            kernel_w: k,
            pad_h: k / 2,
            pad_w: k / 2,
            groups: 1,
            bias: true,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::same(in_channels, out_channels, 1)
    }

    /// Grouped single-channel kernels covering the whole `h x w` map, so the
    /// output is `1 x 1 x (channels * per_group)`.
    pub fn full_extent(channels: usize, per_group: usize, h: usize, w: usize) -> Self {
        ConvSpec {
            in_channels: channels,
            out_channels: channels * per_group,
            kernel_h: h,
            kernel_w: w,
            pad_h: 0,
            pad_w: 0,
            groups: channels,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.out_channels,
            self.kernel_h,
            self.kernel_w,
            self.groups,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("conv2d", format!("non-positive dimension in {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "channels {} -> {} not divisible by groups {}",
                    self.in_channels, self.out_channels, self.groups
                ),
            ));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.kernel_h, self.kernel_w, self.in_channels / self.groups, self.out_channels]
    }

    pub fn fan_in(&self) -> usize {
        self.kernel_h * self.kernel_w * (self.in_channels / self.groups)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.fan_in() + if self.bias { self.out_channels } else { 0 }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.pad_h;
        let pw = w + 2 * self.pad_w;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {}x{} larger than padded input {ph}x{pw}",
                    self.kernel_h, self.kernel_w
                ),
            ));
        }
        Ok((ph - self.kernel_h + 1, pw - self.kernel_w + 1))
    }

    fn check_operands(&self, input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<()> {
        self.validate()?;
        let (_, _, cin) = input.hwc()?;
        if cin != self.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, spec expects {}", self.in_channels),
            ));
        }
        if weights.shape() != self.weight_shape() {
            return Err(Error::shape(
                "conv2d",
                format!("weights {:?}, expected {:?}", weights.shape(), self.weight_shape()),
            ));
        }
        match (self.bias, bias) {
            (true, Some(b)) if b.shape() == [self.out_channels] => Ok(()),
            (false, None) => Ok(()),
            (true, Some(b)) => Err(Error::shape(
                "conv2d",
                format!("bias {:?}, expected [{}]", b.shape(), self.out_channels),
            )),
            (true, None) => Err(Error::shape("conv2d", "spec has bias but none given")),
            (false, Some(_)) => Err(Error::shape("conv2d", "bias given but spec has none")),
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Offset of `base + k - pad` when it lands inside `0..len`.
#[inline]
fn tap(base: usize, k: usize, pad: usize, len: usize) -> Option<usize> {
    (base + k).checked_sub(pad).filter(|&v| v < len)
}

/// Cross-correlation (no kernel flip), stride 1, zero padding.
///
/// Output channel `o` of group `g = o / (C_out / groups)` sums over input
/// channels `g * C_in/groups .. (g + 1) * C_in/groups`. The ungrouped case is
/// the same loop with one group.
pub fn conv2d(input: &Tensor, spec: &ConvSpec, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    spec.check_operands(input, weights, bias)?;
    let (h, w, cin) = input.hwc()?;
    let (oh, ow) = spec.output_hw(h, w)?;
    let cout = spec.out_channels;
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let x = input.data();
    let wt = weights.data();

    let mut out = vec![0.0; oh * ow * cout];
    if let Some(b) = bias {
        for px in out.chunks_exact_mut(cout) {
            px.copy_from_slice(b.data());
        }
    }
    for oi in 0..oh {
        for oj in 0..ow {
            let obase = (oi * ow + oj) * cout;
            for ki in 0..spec.kernel_h {
                let Some(ii) = tap(oi, ki, spec.pad_h, h) else { continue };
                for kj in 0..spec.kernel_w {
                    let Some(jj) = tap(oj, kj, spec.pad_w, w) else { continue };
                    let xbase = (ii * w + jj) * cin;
                    let wbase = (ki * spec.kernel_w + kj) * cin_g * cout;
                    for g in 0..spec.groups {
                        let orow = &mut out[obase + g * cout_g..obase + (g + 1) * cout_g];
                        for cg in 0..cin_g {
                            let xv = x[xbase + g * cin_g + cg];
                            if xv == 0.0 {
                                continue;
                            }
                            let woff = wbase + cg * cout + g * cout_g;
                            axpy(orow, xv, &wt[woff..woff + cout_g]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[oh, ow, cout], out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    input: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let (h, w, cin) = input.hwc()?;
    let (oh, ow) = spec.output_hw(h, w)?;
    let cout = spec.out_channels;
    if grad_out.shape() != [oh, ow, cout] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad {:?}, expected {:?}", grad_out.shape(), [oh, ow, cout]),
        ));
    }
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let x = input.data();
    let wt = weights.data();
    let go = grad_out.data();

    let mut gw = vec![0.0; wt.len()];
    let mut gx = if need_input { vec![0.0; x.len()] } else { Vec::new() };
    for oi in 0..oh {
        for oj in 0..ow {
            let obase = (oi * ow + oj) * cout;
            for ki in 0..spec.kernel_h {
                let Some(ii) = tap(oi, ki, spec.pad_h, h) else { continue };
                for kj in 0..spec.kernel_w {
                    let Some(jj) = tap(oj, kj, spec.pad_w, w) else { continue };
                    let xbase = (ii * w + jj) * cin;
                    let wbase = (ki * spec.kernel_w + kj) * cin_g * cout;
                    for g in 0..spec.groups {
                        let grow = &go[obase + g * cout_g..obase + (g + 1) * cout_g];
                        for cg in 0..cin_g {
                            let xi = xbase + g * cin_g + cg;
                            let woff = wbase + cg * cout + g * cout_g;
                            let xv = x[xi];
                            if xv != 0.0 {
                                axpy(&mut gw[woff..woff + cout_g], xv, grow);
                            }
                            if need_input {
                                gx[xi] += dot(&wt[woff..woff + cout_g], grow);
                            }
                        }
                    }
                }
            }
        }
    }
    let bias = spec.bias.then(|| {
        let mut gb = vec![0.0; cout];
        for px in go.chunks_exact(cout) {
            axpy(&mut gb, 1.0, px);
        }
        Tensor::new(&[cout], gb).expect("bias grad shape")
    });
    Ok(ConvGrads {
        input: need_input.then(|| Tensor::new(input.shape(), gx).expect("input grad shape")),
        weights: Tensor::new(weights.shape(), gw)?,
        bias,
    })
}

/// Per-channel softmax over all spatial positions, max-shifted for stability.
pub fn spatial_softmax(z: &Tensor) -> Result<Tensor> {
    let (h, w, c) = z.hwc()?;
    let n = h * w;
    let zd = z.data();
    let mut out = vec![0.0; zd.len()];
    let mut max = vec![f64::NEG_INFINITY; c];
    for px in zd.chunks_exact(c) {
        for (m, &v) in max.iter_mut().zip(px) {
            *m = m.max(v);
        }
    }
    let mut sum = vec![0.0; c];
    for (opx, px) in out.chunks_exact_mut(c).zip(zd.chunks_exact(c)) {
        for l in 0..c {
            let e = (px[l] - max[l]).exp();
            opx[l] = e;
            sum[l] += e;
        }
    }
    for opx in out.chunks_exact_mut(c) {
        for l in 0..c {
            opx[l] /= sum[l];
        }
    }
    debug_assert_eq!(out.len(), n * c);
    Tensor::new(z.shape(), out)
}

/// Given `a = spatial_softmax(z)` and `dL/da`, returns `dL/dz`.
pub fn spatial_softmax_backward(a: &Tensor, grad_a: &Tensor) -> Result<Tensor> {
    let (_, _, c) = a.hwc()?;
    same_shape("spatial_softmax_backward", a, grad_a)?;
    let mut inner = vec![0.0; c];
    for (apx, gpx) in a.data().chunks_exact(c).zip(grad_a.data().chunks_exact(c)) {
        for l in 0..c {
            inner[l] += apx[l] * gpx[l];
        }
    }
    let mut out = vec![0.0; a.len()];
    for ((opx, apx), gpx) in out
        .chunks_exact_mut(c)
        .zip(a.data().chunks_exact(c))
        .zip(grad_a.data().chunks_exact(c))
    {
        for l in 0..c {
            opx[l] = apx[l] * (gpx[l] - inner[l]);
        }
    }
    Tensor::new(a.shape(), out)
}

/// Attention-weighted feature pooling: row `l` of the `C x D` output is
/// `sum_{i,j} x[i,j,:] * a[i,j,l]`.
///
/// Callers are expected to pass normalized attention (each channel of `a`
/// summing to one); the map itself is linear in `a` and does not check this.
pub fn weighted_pool(x: &Tensor, a: &Tensor) -> Result<Tensor> {
    let (h, w, d) = x.hwc()?;
    let (ha, wa, c) = a.hwc()?;
    if (h, w) != (ha, wa) {
        return Err(Error::shape(
            "weighted_pool",
            format!("features {h}x{w} vs attention {ha}x{wa}"),
        ));
    }
    let mut v = vec![0.0; c * d];
    for (xpx, apx) in x.data().chunks_exact(d).zip(a.data().chunks_exact(c)) {
        for (l, &al) in apx.iter().enumerate() {
            axpy(&mut v[l * d..(l + 1) * d], al, xpx);
        }
    }
    Tensor::new(&[c, d], v)
}

pub fn weighted_pool_backward(x: &Tensor, a: &Tensor, grad_v: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, d) = x.hwc()?;
    let (_, _, c) = a.hwc()?;
    if grad_v.shape() != [c, d] {
        return Err(Error::shape(
            "weighted_pool_backward",
            format!("grad {:?}, expected [{c}, {d}]", grad_v.shape()),
        ));
    }
    let gv = grad_v.data();
    let mut gx = vec![0.0; x.len()];
    let mut ga = vec![0.0; a.len()];
    for (p, (xpx, apx)) in x.data().chunks_exact(d).zip(a.data().chunks_exact(c)).enumerate() {
        let gxpx = &mut gx[p * d..(p + 1) * d];
        for l in 0..c {
            let grow = &gv[l * d..(l + 1) * d];
            axpy(gxpx, apx[l], grow);
            ga[p * c + l] = dot(xpx, grow);
        }
    }
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new(a.shape(), ga)?))
}

/// Pointwise operations available to the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Multiply,
}

pub fn elementwise(op: Elementwise, inputs: &[&Tensor]) -> Result<Tensor> {
    match (op, inputs) {
        (Elementwise::Relu, [x]) => Ok(relu(x)),
        (Elementwise::Sigmoid, [x]) => Ok(sigmoid(x)),
        (Elementwise::Multiply, [a, b]) => multiply(a, b),
        _ => Err(Error::shape(
            "elementwise",
            format!("{op:?} given {} operands", inputs.len()),
        )),
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, grad: &Tensor) -> Result<Tensor> {
    same_shape("relu_backward", x, grad)?;
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), data)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Uses the forward output `s = sigmoid(x)`.
pub fn sigmoid_backward(s: &Tensor, grad: &Tensor) -> Result<Tensor> {
    same_shape("sigmoid_backward", s, grad)?;
    let data = s.data().iter().zip(grad.data()).map(|(&s, &g)| g * s * (1.0 - s)).collect();
    Tensor::new(s.shape(), data)
}

pub fn multiply(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("multiply", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape(), data)
}

/// Fully connected map `W x + b` with `W: C x D`.
pub fn linear(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, d) = linear_dims(input, weights, bias)?;
    let x = input.data();
    let out = (0..c)
        .map(|l| dot(&weights.data()[l * d..(l + 1) * d], x) + bias.data()[l])
        .collect();
    Tensor::new(&[c], out)
}

/// Returns `(dL/dx, dL/dW, dL/db)`.
pub fn linear_backward(input: &Tensor, weights: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, d) = match weights.shape() {
        [c, d] => (*c, *d),
        s => return Err(Error::shape("linear_backward", format!("weights {s:?}"))),
    };
    if grad.shape() != [c] || input.len() != d {
        return Err(Error::shape(
            "linear_backward",
            format!("grad {:?}, input {:?}, weights [{c}, {d}]", grad.shape(), input.shape()),
        ));
    }
    let x = input.data();
    let g = grad.data();
    let mut gx = vec![0.0; d];
    let mut gw = vec![0.0; c * d];
    for l in 0..c {
        let wrow = &weights.data()[l * d..(l + 1) * d];
        axpy(&mut gx, g[l], wrow);
        axpy(&mut gw[l * d..(l + 1) * d], g[l], x);
    }
    Ok((
        Tensor::new(input.shape(), gx)?,
        Tensor::new(weights.shape(), gw)?,
        grad.clone(),
    ))
}

fn linear_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let (c, d) = match weights.shape() {
        [c, d] => (*c, *d),
        s => return Err(Error::shape("linear", format!("weights must be rank 2, got {s:?}"))),
    };
    if input.shape() != [d] {
        return Err(Error::shape(
            "linear",
            format!("input {:?} does not match weights [{c}, {d}]", input.shape()),
        ));
    }
    if bias.shape() != [c] {
        return Err(Error::shape("linear", format!("bias {:?}, expected [{c}]", bias.shape())));
    }
    Ok((c, d))
}

/// Per-channel sum over all spatial positions.
pub fn spatial_sum_pool(m: &Tensor) -> Result<Tensor> {
    let (_, _, c) = m.hwc()?;
    let mut out = vec![0.0; c];
    for px in m.data().chunks_exact(c) {
        axpy(&mut out, 1.0, px);
    }
    Tensor::new(&[c], out)
}

pub fn spatial_sum_pool_backward(shape: &[usize], grad: &Tensor) -> Result<Tensor> {
    let c = *shape.last().unwrap_or(&0);
    if grad.shape() != [c] {
        return Err(Error::shape("spatial_sum_pool_backward", format!("grad {:?}", grad.shape())));
    }
    Ok(Tensor::from_fn(shape, |k| grad.data()[k % c]))
}

/// Spatial mean, `H x W x D -> D`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (h, w, _) = x.hwc()?;
    let sum = spatial_sum_pool(x)?;
    Ok(sum.map(|v| v / (h * w) as f64))
}

pub fn global_avg_pool_backward(shape: &[usize], grad: &Tensor) -> Result<Tensor> {
    let n = (shape[0] * shape[1]) as f64;
    spatial_sum_pool_backward(shape, &grad.map(|g| g / n))
}

/// Non-overlapping 2x2 mean pooling; both spatial dims must be even.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("avg_pool2", format!("spatial dims {h}x{w} must be even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; oh * ow * c];
    for oi in 0..oh {
        for oj in 0..ow {
            let o = &mut out[(oi * ow + oj) * c..(oi * ow + oj + 1) * c];
            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let base = ((2 * oi + di) * w + 2 * oj + dj) * c;
                axpy(o, 0.25, &xd[base..base + c]);
            }
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

pub fn avg_pool2_backward(shape: &[usize], grad: &Tensor) -> Result<Tensor> {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let ow = w / 2;
    if grad.shape() != [h / 2, ow, c] {
        return Err(Error::shape("avg_pool2_backward", format!("grad {:?}", grad.shape())));
    }
    let g = grad.data();
    let mut out = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let src = ((i / 2) * ow + j / 2) * c;
            let dst = (i * w + j) * c;
            for k in 0..c {
                out[dst + k] = 0.25 * g[src + k];
            }
        }
    }
    Tensor::new(shape, out)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct per-output-element evaluation of an ungrouped convolution.
    fn naive_conv(x: &Tensor, spec: &ConvSpec, w: &Tensor, b: Option<&Tensor>) -> Tensor {
        let (h, wd, cin) = x.hwc().unwrap();
        let (oh, ow) = spec.output_hw(h, wd).unwrap();
        let cin_g = cin / spec.groups;
        let cout_g = spec.out_channels / spec.groups;
        let ws = w.shape().to_vec();
        let mut out = Tensor::zeros(&[oh, ow, spec.out_channels]);
        for oi in 0..oh {
            for oj in 0..ow {
                for o in 0..spec.out_channels {
                    let g = o / cout_g;
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for ki in 0..spec.kernel_h {
                        for kj in 0..spec.kernel_w {
                            let ii = oi as isize + ki as isize - spec.pad_h as isize;
                            let jj = oj as isize + kj as isize - spec.pad_w as isize;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                continue;
                            }
                            for cg in 0..cin_g {
                                let xv = x.at3(ii as usize, jj as usize, g * cin_g + cg);
                                let wi = ((ki * ws[1] + kj) * ws[2] + cg) * ws[3] + o;
                                acc += xv * w.data()[wi];
                            }
                        }
                    }
                    out.data_mut()[(oi * ow + oj) * spec.out_channels + o] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[4, 5, 3], &mut rng);
        let spec = ConvSpec::pointwise(3, 3);
        let w = Tensor::from_fn(&[1, 1, 3, 3], |k| if k / 3 == k % 3 { 1.0 } else { 0.0 });
        let b = Tensor::zeros(&[3]);
        let y = conv2d(&x, &spec, &w, Some(&b)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let x = Tensor::full(&[3, 3, 1], 1.0);
        let spec = ConvSpec { bias: false, ..ConvSpec::same(1, 1, 3) };
        let w = Tensor::full(&[3, 3, 1, 1], 1.0);
        let y = conv2d(&x, &spec, &w, None).unwrap();
        assert_eq!(y.at3(1, 1, 0), 9.0);
        assert_eq!(y.at3(0, 1, 0), 6.0);
        assert_eq!(y.at3(1, 2, 0), 6.0);
        assert_eq!(y.at3(0, 0, 0), 4.0);
        assert_eq!(y.at3(2, 2, 0), 4.0);
    }

    #[test]
    fn conv_matches_naive_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in [
            ConvSpec::same(3, 5, 3),
            ConvSpec { groups: 2, ..ConvSpec::same(4, 6, 3) },
            ConvSpec::full_extent(3, 4, 5, 6),
            ConvSpec { pad_h: 0, pad_w: 2, ..ConvSpec::same(2, 2, 3) },
        ] {
            let x = random(&[5, 6, spec.in_channels], &mut rng);
            let w = random(&spec.weight_shape(), &mut rng);
            let b = random(&[spec.out_channels], &mut rng);
            let fast = conv2d(&x, &spec, &w, Some(&b)).unwrap();
            let slow = naive_conv(&x, &spec, &w, Some(&b));
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn depthwise_groups_equal_per_channel_convolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (cin, per) = (3, 4);
        let spec = ConvSpec { groups: cin, ..ConvSpec::same(cin, cin * per, 3) };
        let x = random(&[6, 6, cin], &mut rng);
        let w = random(&spec.weight_shape(), &mut rng);
        let b = random(&[cin * per], &mut rng);
        let grouped = conv2d(&x, &spec, &w, Some(&b)).unwrap();

        for c in 0..cin {
            let xc = Tensor::new(&[6, 6, 1], x.channel(c)).unwrap();
            let single = ConvSpec::same(1, per, 3);
            let wc = Tensor::from_fn(&[3, 3, 1, per], |k| {
                let (tap, o) = (k / per, k % per);
                w.data()[tap * cin * per + c * per + o]
            });
            let bc = Tensor::new(&[per], b.data()[c * per..(c + 1) * per].to_vec()).unwrap();
            let yc = conv2d(&xc, &single, &wc, Some(&bc)).unwrap();
            for o in 0..per {
                let got = grouped.channel(c * per + o);
                let want = yc.channel(o);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_bad_grouping() {
        let spec = ConvSpec { groups: 2, ..ConvSpec::same(3, 4, 1) };
        assert!(spec.validate().is_err());
        let x = Tensor::zeros(&[2, 2, 3]);
        let w = Tensor::zeros(&[1, 1, 1, 4]);
        let err = conv2d(&x, &spec, &w, Some(&Tensor::zeros(&[4]))).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "conv2d", .. }));
    }

    #[test]
    fn param_count_formula() {
        let spec = ConvSpec::full_extent(512, 4, 14, 14);
        assert_eq!(spec.param_count(), 2048 * 14 * 14 + 2048);
        let spec = ConvSpec { bias: false, ..ConvSpec::same(8, 16, 3) };
        assert_eq!(spec.param_count(), 16 * 8 * 9);
    }

    #[test]
    fn softmax_constant_channel_is_uniform() {
        let z = Tensor::full(&[4, 4, 2], 3.7);
        let a = spatial_softmax(&z).unwrap();
        for v in a.data() {
            assert!((v - 1.0 / 16.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random(&[5, 5, 3], &mut rng);
        let mut shifted = z.clone();
        for (k, v) in shifted.data_mut().iter_mut().enumerate() {
            if k % 3 == 1 {
                *v += 17.25;
            }
        }
        let a = spatial_softmax(&z).unwrap();
        let b = spatial_softmax(&shifted).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn softmax_peak_dominates() {
        let mut z = Tensor::zeros(&[14, 14, 1]);
        z.data_mut()[37] = 20.0;
        let a = spatial_softmax(&z).unwrap();
        // e^20 / (e^20 + 195)
        let expected = 1.0 / (1.0 + 195.0 * (-20.0f64).exp());
        assert!((a.data()[37] - expected).abs() < 1e-13, "{} vs {expected}", a.data()[37]);
        assert!(a.data()[37] > 0.999999);
    }

    #[test]
    fn weighted_pool_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 4, 5], &mut rng);
        let uniform = Tensor::full(&[3, 4, 2], 1.0 / 12.0);
        let v = weighted_pool(&x, &uniform).unwrap();
        let mean = global_avg_pool(&x).unwrap();
        for l in 0..2 {
            for d in 0..5 {
                assert!((v.data()[l * 5 + d] - mean.data()[d]).abs() < 1e-15);
            }
        }
        let mut delta = Tensor::zeros(&[3, 4, 1]);
        delta.data_mut()[2 * 4 + 1] = 1.0;
        let v = weighted_pool(&x, &delta).unwrap();
        for d in 0..5 {
            assert_eq!(v.data()[d], x.at3(2, 1, d));
        }
    }

    #[test]
    fn weighted_pool_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[4, 3, 6], &mut rng);
        let a = spatial_softmax(&random(&[4, 3, 5], &mut rng)).unwrap();
        let v = weighted_pool(&x, &a).unwrap();
        for l in 0..5 {
            for d in 0..6 {
                let mut acc = 0.0;
                for i in 0..4 {
                    for j in 0..3 {
                        acc += x.at3(i, j, d) * a.at3(i, j, l);
                    }
                }
                assert!((v.data()[l * 6 + d] - acc).abs() < 1e-14);
            }
        }
        assert!(weighted_pool(&x, &Tensor::zeros(&[3, 4, 5])).is_err());
    }

    #[test]
    fn elementwise_values() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        let x = Tensor::new(&[2], vec![-3.2, 3.2]).unwrap();
        assert_eq!(elementwise(Elementwise::Relu, &[&x]).unwrap().data(), &[0.0, 3.2]);
        let y = Tensor::new(&[2], vec![2.0, -0.5]).unwrap();
        let p = elementwise(Elementwise::Multiply, &[&x, &y]).unwrap();
        assert_eq!(p.data(), &[-6.4, -1.6]);
        assert!(multiply(&x, &Tensor::zeros(&[3])).is_err());
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) == 1.0);
    }

    #[test]
    fn linear_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[4], &mut rng);
        let eye = Tensor::from_fn(&[4, 4], |k| if k / 4 == k % 4 { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[4])).unwrap(), x);
        let c = Tensor::full(&[3], 2.5);
        assert_eq!(linear(&x, &Tensor::zeros(&[3, 4]), &c).unwrap(), c);

        let w = random(&[3, 4], &mut rng);
        let b = random(&[3], &mut rng);
        let y = linear(&x, &w, &b).unwrap();
        for l in 0..3 {
            let mut acc = b.data()[l];
            for d in 0..4 {
                acc += w.data()[l * 4 + d] * x.data()[d];
            }
            assert!((y.data()[l] - acc).abs() < 1e-15);
        }
        assert!(linear(&random(&[5], &mut rng), &w, &b).is_err());
    }

    #[test]
    fn sum_pool_cases() {
        let ones = Tensor::full(&[14, 14, 1], 1.0);
        assert_eq!(spatial_sum_pool(&ones).unwrap().data(), &[196.0]);
        let mut single = Tensor::zeros(&[3, 3, 2]);
        single.data_mut()[9] = -1.75;
        assert_eq!(spatial_sum_pool(&single).unwrap().data(), &[0.0, -1.75]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random(&[3, 5, 4], &mut rng);
        let s = spatial_sum_pool(&m).unwrap();
        for c in 0..4 {
            let acc: f64 = m.channel(c).iter().sum();
            assert!((s.data()[c] - acc).abs() < 1e-14);
        }
    }

    #[test]
    fn avg_pool_halves_and_requires_even() {
        let x = Tensor::from_fn(&[2, 2, 1], |k| k as f64);
        assert_eq!(avg_pool2(&x).unwrap().data(), &[1.5]);
        assert!(avg_pool2(&Tensor::zeros(&[3, 2, 1])).is_err());
    }
}
