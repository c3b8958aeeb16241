//! Forward and backward kernels for the layer types the networks use.
//!
//! Every function here is pure: caches are whatever the caller keeps from the
//! forward pass, and parameter gradients are returned rather than stored.

use crate::error::{shape_err, Result};
use crate::tensor::{Float, Tensor};

/// Static geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, size: usize) -> Result<usize> {
        let padded = size + 2 * self.pad;
        if padded < self.kernel {
            return Err(shape_err!(
                "input of size {size} too small for a {}x{} kernel",
                self.kernel,
                self.kernel
            ));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

/// Output columns `[lo, hi)` whose input index `o·stride + k − pad` lies in `0..len`.
fn valid_range(k: usize, g: ConvGeom, len: usize, out: usize) -> (usize, usize) {
    if len + g.pad < k + 1 {
        return (0, 0);
    }
    let first = g.pad.saturating_sub(k).div_ceil(g.stride);
    let last = (len + g.pad).saturating_sub(k + 1) / g.stride + 1;
    (first.min(out), last.min(out).max(first.min(out)))
}

/// Unfolds one sample into columns `off..off + ho·wo` of a `[c·k·k, ld]` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    g: ConvGeom,
    (ho, wo): (usize, usize),
    cols: &mut [T],
    ld: usize,
    off: usize,
) {
    let k = g.kernel;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ld + off..row * ld + off + ho * wo];
                let (x0, x1) = valid_range(kx, g, w, wo);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out_row[..x0].fill(T::zero());
                    out_row[x1..].fill(T::zero());
                    if x0 == x1 {
                        continue;
                    }
                    let base = x0 * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out_row[x0..x1].copy_from_slice(&src[base..base + (x1 - x0)]);
                    } else {
                        for (j, o) in out_row[x0..x1].iter_mut().enumerate() {
                            *o = src[base + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    g: ConvGeom,
    (ho, wo): (usize, usize),
    ld: usize,
    off: usize,
    dx: &mut [T],
) {
    let k = g.kernel;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ld + off..row * ld + off + ho * wo];
                let (x0, x1) = valid_range(kx, g, w, wo);
                if x0 >= x1 {
                    continue;
                }
                let base = x0 * g.stride + kx - g.pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let s = &src[oy * wo + x0..oy * wo + x1];
                    if g.stride == 1 {
                        for (d, &v) in dst[base..base + s.len()].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in s.iter().enumerate() {
                            dst[base + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Samples per GEMM: enough columns to keep the kernel busy, bounded in memory.
fn samples_per_chunk(n: usize, p: usize, kk: usize) -> usize {
    const MAX_ELEMS: usize = 1 << 23;
    const TARGET_COLS: usize = 2048;
    let by_mem = (MAX_ELEMS / (kk * p).max(1)).max(1);
    let by_cols = TARGET_COLS.div_ceil(p).max(1);
    by_mem.min(by_cols).min(n).max(1)
}

/// `weight` is `[out, in, k, k]`, `bias` has `out` entries.
pub fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    let kk = c * g.kernel * g.kernel;
    if weight.len() != out_channels * kk {
        return Err(shape_err!(
            "conv expects {} input channels for its {}-element weight, got {c}",
            weight.len() / (out_channels * g.kernel * g.kernel).max(1),
            weight.len()
        ));
    }
    let (ho, wo) = (g.out_size(h)?, g.out_size(w)?);
    let p = ho * wo;
    let mut out = Tensor::zeros([n, out_channels, ho, wo]);
    let chunk = samples_per_chunk(n, p, kk);
    let mut cols = vec![T::zero(); kk * chunk * p];
    let mut tmp = vec![T::zero(); out_channels * chunk * p];
    for start in (0..n).step_by(chunk) {
        let b = chunk.min(n - start);
        let ld = b * p;
        for j in 0..b {
            im2col(x.item(start + j), (c, h, w), g, (ho, wo), &mut cols, ld, j * p);
        }
        T::gemm(
            out_channels,
            kk,
            ld,
            T::one(),
            weight,
            (kk, 1),
            &cols,
            (ld, 1),
            T::zero(),
            &mut tmp,
            (ld, 1),
        );
        for j in 0..b {
            let y = out.item_mut(start + j);
            for (o, row) in y.chunks_mut(p).enumerate() {
                let src = &tmp[o * ld + j * p..o * ld + (j + 1) * p];
                match bias {
                    Some(bv) => {
                        for (d, &s) in row.iter_mut().zip(src) {
                            *d = s + bv[o];
                        }
                    }
                    None => row.copy_from_slice(src),
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution. `dweight`/`dbias` are accumulated into when
/// given; the input gradient is produced only when `want_dx` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &[T],
    out_channels: usize,
    g: ConvGeom,
    dy: &Tensor<T>,
    want_dx: bool,
    mut dweight: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) -> Option<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    let [_, _, ho, wo] = dy.shape();
    let kk = c * g.kernel * g.kernel;
    let p = ho * wo;
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    if let Some(db) = dbias.as_deref_mut() {
        for i in 0..n {
            for (o, row) in dy.item(i).chunks(p).enumerate() {
                db[o] += row.iter().copied().sum::<T>();
            }
        }
    }
    let chunk = samples_per_chunk(n, p, kk);
    let mut cols = vec![T::zero(); kk * chunk * p];
    let mut dyc = vec![T::zero(); out_channels * chunk * p];
    for start in (0..n).step_by(chunk) {
        let b = chunk.min(n - start);
        let ld = b * p;
        // gather dy into [out, b·p]
        for j in 0..b {
            for (o, row) in dy.item(start + j).chunks(p).enumerate() {
                dyc[o * ld + j * p..o * ld + (j + 1) * p].copy_from_slice(row);
            }
        }
        if let Some(dw) = dweight.as_deref_mut() {
            for j in 0..b {
                im2col(x.item(start + j), (c, h, w), g, (ho, wo), &mut cols, ld, j * p);
            }
            T::gemm(
                out_channels,
                ld,
                kk,
                T::one(),
                &dyc,
                (ld, 1),
                &cols,
                (1, ld),
                T::one(),
                dw,
                (kk, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                kk,
                out_channels,
                ld,
                T::one(),
                weight,
                (1, kk),
                &dyc,
                (ld, 1),
                T::zero(),
                &mut cols,
                (ld, 1),
            );
            for j in 0..b {
                col2im(&cols, (c, h, w), g, (ho, wo), ld, j * p, dx.item_mut(start + j));
            }
        }
    }
    dx
}

/// `x` is `[n, in, 1, 1]`, `weight` is `[out, in]`.
pub fn linear_forward<T: Float>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    out_features: usize,
) -> Result<Tensor<T>> {
    let n = x.batch();
    let f = x.item_len();
    if weight.len() != out_features * f {
        return Err(shape_err!(
            "linear layer expects {} inputs, got {f}",
            weight.len() / out_features.max(1)
        ));
    }
    let mut out = Tensor::zeros([n, out_features, 1, 1]);
    for row in out.data_mut().chunks_mut(out_features) {
        row.copy_from_slice(bias);
    }
    T::gemm(
        n,
        f,
        out_features,
        T::one(),
        x.data(),
        (f, 1),
        weight,
        (1, f),
        T::one(),
        out.data_mut(),
        (out_features, 1),
    );
    Ok(out)
}

pub fn linear_backward<T: Float>(
    x: &Tensor<T>,
    weight: &[T],
    out_features: usize,
    dy: &Tensor<T>,
    want_dx: bool,
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) -> Option<Tensor<T>> {
    let n = x.batch();
    let f = x.item_len();
    if let Some(db) = dbias {
        for row in dy.data().chunks(out_features) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
    }
    if let Some(dw) = dweight {
        T::gemm(
            out_features,
            n,
            f,
            T::one(),
            dy.data(),
            (1, out_features),
            x.data(),
            (f, 1),
            T::one(),
            dw,
            (f, 1),
        );
    }
    want_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(
            n,
            out_features,
            f,
            T::one(),
            dy.data(),
            (out_features, 1),
            weight,
            (f, 1),
            T::zero(),
            dx.data_mut(),
            (f, 1),
        );
        dx
    })
}

/// Per-channel statistics kept from a training-mode batch-norm forward.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T: Float> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub fn batch_norm_train<T: Float>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Tensor<T>, BatchNormCache<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let count = T::from_usize(n * hw).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for i in 0..n {
        for (ch, plane) in x.item(i).chunks(hw).enumerate() {
            mean[ch] += plane.iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    for i in 0..n {
        for (ch, plane) in x.item(i).chunks(hw).enumerate() {
            let m = mean[ch];
            var[ch] += plane.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v = *v / count);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n {
        let src = x.item(i);
        let (nrm, o) = (normalized.item_mut(i), &mut out.data_mut()[i * c * hw..(i + 1) * c * hw]);
        for ch in 0..c {
            for j in ch * hw..(ch + 1) * hw {
                let xh = (src[j] - mean[ch]) * inv_std[ch];
                nrm[j] = xh;
                o[j] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (out, BatchNormCache { normalized, inv_std }, mean, var)
}

pub fn batch_norm_eval<T: Float>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = x.clone();
    for i in 0..n {
        for (ch, plane) in out.item_mut(i).chunks_mut(hw).enumerate() {
            let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
            let shift = beta[ch] - running_mean[ch] * scale;
            plane.iter_mut().for_each(|v| *v = *v * scale + shift);
        }
    }
    let _ = c;
    out
}

pub fn batch_norm_backward<T: Float>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    dy: &Tensor<T>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) -> Tensor<T> {
    let [n, c, h, w] = dy.shape();
    let hw = h * w;
    let count = T::from_usize(n * hw).unwrap();
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xh = vec![T::zero(); c];
    for i in 0..n {
        let (g, xh) = (dy.item(i), cache.normalized.item(i));
        for ch in 0..c {
            for j in ch * hw..(ch + 1) * hw {
                sum_dy[ch] += g[j];
                sum_dy_xh[ch] += g[j] * xh[j];
            }
        }
    }
    if let Some(dg) = dgamma {
        dg.iter_mut().zip(&sum_dy_xh).for_each(|(d, &s)| *d += s);
    }
    if let Some(db) = dbeta {
        db.iter_mut().zip(&sum_dy).for_each(|(d, &s)| *d += s);
    }
    let mut dx = Tensor::zeros(dy.shape());
    for i in 0..n {
        let (g, xh) = (dy.item(i), cache.normalized.item(i));
        let out = &mut dx.data_mut()[i * c * hw..(i + 1) * c * hw];
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / count;
            for j in ch * hw..(ch + 1) * hw {
                out[j] = k * (count * g[j] - sum_dy[ch] - xh[j] * sum_dy_xh[ch]);
            }
        }
    }
    dx
}

fn check_even(x: &[usize; 4], op: &str) -> Result<()> {
    if x[2] % 2 != 0 || x[3] % 2 != 0 {
        return Err(shape_err!("{op} needs even spatial size, got {x:?}"));
    }
    Ok(())
}

/// 2×2 max pooling; returns the output and the flat argmax index per output.
pub fn max_pool2<T: Float>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let s = x.shape();
    check_even(&s, "max pool")?;
    let [n, c, h, w] = s;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let src = x.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[j] > src[best] {
                        best = j;
                    }
                }
                dst[o] = src[best];
                arg.push(best as u32);
                o += 1;
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2_backward<T: Float>(in_shape: [usize; 4], argmax: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (&j, &g) in argmax.iter().zip(dy.data()) {
        d[j as usize] += g;
    }
    dx
}

pub fn avg_pool2<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    check_even(&s, "average pool")?;
    let [n, c, h, w] = s;
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let src = x.data();
    for (plane, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let j = base + 2 * oy * w + 2 * ox;
                dst[oy * wo + ox] = (src[j] + src[j + 1] + src[j + w] + src[j + w + 1]) * quarter;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward<T: Float>(in_shape: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = in_shape;
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut dx = Tensor::zeros(in_shape);
    for (plane, g) in dy.data().chunks(ho * wo).enumerate() {
        let d = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let v = g[oy * wo + ox] * quarter;
                let j = 2 * oy * w + 2 * ox;
                d[j] += v;
                d[j + 1] += v;
                d[j + w] += v;
                d[j + w + 1] += v;
            }
        }
    }
    dx
}

/// Nearest-neighbour up-sampling by a factor of two.
pub fn upsample2<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(ho * wo)) {
        for oy in 0..ho {
            for ox in 0..wo {
                dst[oy * wo + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Float>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, ho, wo] = dy.shape();
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for (g, d) in dy.data().chunks(ho * wo).zip(dx.data_mut().chunks_mut(h * w)) {
        for oy in 0..ho {
            for ox in 0..wo {
                d[(oy / 2) * w + ox / 2] += g[oy * wo + ox];
            }
        }
    }
    dx
}

pub fn global_avg_pool<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let data = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec([n, c, 1, 1], data).expect("pooled shape")
}

pub fn global_avg_pool_backward<T: Float>(in_shape: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = in_shape;
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let mut dx = Tensor::zeros(in_shape);
    for (d, &g) in dx.data_mut().chunks_mut(h * w).zip(dy.data()) {
        d.fill(g * inv);
    }
    dx
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Float>(&self, x: &Tensor<T>) -> Tensor<T> {
        match *self {
            Activation::Relu => x.map(|v| v.max(T::zero())),
            Activation::LeakyRelu(s) => {
                let s = T::from_f64_lossy(s as f64);
                x.map(|v| if v > T::zero() { v } else { v * s })
            }
            Activation::Tanh => x.map(|v| v.tanh()),
            Activation::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
        }
    }

    /// Input gradient given the forward input `x` and output `y`.
    pub fn backward<T: Float>(&self, x: &Tensor<T>, y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let zip = |src: &Tensor<T>, f: &dyn Fn(T, T) -> T| {
            src.zip_map(dy, |a, g| f(a, g)).expect("activation shapes")
        };
        match *self {
            Activation::Relu => zip(x, &|v, g| if v > T::zero() { g } else { T::zero() }),
            Activation::LeakyRelu(s) => {
                let s = T::from_f64_lossy(s as f64);
                zip(x, &|v, g| if v > T::zero() { g } else { g * s })
            }
            Activation::Tanh => zip(y, &|t, g| g * (T::one() - t * t)),
            Activation::Sigmoid => zip(y, &|s, g| g * s * (T::one() - s)),
        }
    }

    pub fn needs_output(&self) -> bool {
        matches!(self, Activation::Tanh | Activation::Sigmoid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    // Direct seven-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &[f64], b: &[f64], co: usize, g: ConvGeom) -> Tensor<f64> {
        let [n, c, h, wd] = x.shape();
        let (ho, wo) = (g.out_size(h).unwrap(), g.out_size(wd).unwrap());
        let k = g.kernel;
        let mut out = Tensor::zeros([n, co, ho, wo]);
        for i in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += w[((o * c + ci) * k + ky) * k + kx]
                                            * x.item(i)[ci * h * wd + iy as usize * wd + ix as usize];
                                    }
                                }
                            }
                        }
                        out.item_mut(i)[o * ho * wo + oy * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_naive_loops() {
        for (g, h) in [
            (ConvGeom { kernel: 3, stride: 1, pad: 1 }, 5),
            (ConvGeom { kernel: 3, stride: 2, pad: 1 }, 6),
            (ConvGeom { kernel: 5, stride: 2, pad: 2 }, 7),
            (ConvGeom { kernel: 7, stride: 2, pad: 3 }, 8),
        ] {
            let x = random([2, 3, h, h], 1);
            let w = random([4, 3, g.kernel, g.kernel], 2).into_vec();
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let fast = conv2d_forward(&x, &w, Some(&b), 4, g).unwrap();
            let slow = naive_conv(&x, &w, &b, 4, g);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_forward_handles_tiny_inputs_and_multiple_chunks() {
        for (g, h, n) in [
            (ConvGeom { kernel: 7, stride: 2, pad: 3 }, 1, 2),
            (ConvGeom { kernel: 5, stride: 2, pad: 2 }, 2, 3),
            (ConvGeom { kernel: 3, stride: 1, pad: 1 }, 50, 3),
        ] {
            let x = random([n, 2, h, h], 11);
            let w = random([3, 2, g.kernel, g.kernel], 12).into_vec();
            let b = vec![0.0; 3];
            let fast = conv2d_forward(&x, &w, None, 3, g).unwrap();
            let slow = naive_conv(&x, &w, &b, 3, g);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint_of_forward() {
        // <conv(x, w), y> = <x, dx(y)> = <w, dw(y)> for a bias-free convolution
        for (g, h, n) in [
            (ConvGeom { kernel: 7, stride: 2, pad: 3 }, 8, 2),
            (ConvGeom { kernel: 3, stride: 2, pad: 1 }, 3, 4),
            (ConvGeom { kernel: 3, stride: 1, pad: 1 }, 48, 3),
        ] {
            let x = random([n, 2, h, h], 21);
            let w = random([3, 2, g.kernel, g.kernel], 22).into_vec();
            let y = conv2d_forward(&x, &w, None, 3, g).unwrap();
            let probe = random(y.shape(), 23);
            let mut dw = vec![0.0; w.len()];
            let dx = conv2d_backward(&x, &w, 3, g, &probe, true, Some(&mut dw), None).unwrap();
            let lhs = dot(&y, &probe);
            let via_x = dot(&x, &dx);
            let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-9 * lhs.abs().max(1.0));
            assert!((lhs - via_w).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let g = ConvGeom { kernel: 3, stride: 2, pad: 1 };
        let x = random([2, 2, 5, 5], 3);
        let w = random([3, 2, 3, 3], 4).into_vec();
        let b = vec![0.0; 3];
        let probe = random([2, 3, 3, 3], 5);
        let loss = |x: &Tensor<f64>, w: &[f64]| dot(&conv2d_forward(x, w, Some(&b), 3, g).unwrap(), &probe);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 3];
        let dx = conv2d_backward(&x, &w, 3, g, &probe, true, Some(&mut dw), Some(&mut db)).unwrap();
        let eps = 1e-6;
        for j in [0, 7, 20, 49] {
            let mut xp = x.clone();
            xp.data_mut()[j] += eps;
            let mut xm = x.clone();
            xm.data_mut()[j] -= eps;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * eps);
            assert!((fd - dx.data()[j]).abs() < 1e-6, "dx[{j}]");
        }
        for j in [0, 10, 53] {
            let mut wp = w.clone();
            wp[j] += eps;
            let mut wm = w.clone();
            wm[j] -= eps;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * eps);
            assert!((fd - dw[j]).abs() < 1e-6, "dw[{j}]");
        }
        let sum_probe: f64 = probe.item(0)[..9].iter().chain(&probe.item(1)[..9]).sum();
        assert!((db[0] - sum_probe).abs() < 1e-12);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let x = random([3, 4, 1, 1], 6);
        let w = random([2, 4, 1, 1], 7).into_vec();
        let b = vec![0.5, -0.5];
        let probe = random([3, 2, 1, 1], 8);
        let mut dw = vec![0.0; 8];
        let dx = linear_backward(&x, &w, 2, &probe, true, Some(&mut dw), None).unwrap();
        let loss = |x: &Tensor<f64>, w: &[f64]| dot(&linear_forward(x, w, &b, 2).unwrap(), &probe);
        let eps = 1e-6;
        for j in 0..12 {
            let mut xp = x.clone();
            xp.data_mut()[j] += eps;
            let mut xm = x.clone();
            xm.data_mut()[j] -= eps;
            assert!(((loss(&xp, &w) - loss(&xm, &w)) / (2.0 * eps) - dx.data()[j]).abs() < 1e-6);
        }
        for j in 0..8 {
            let mut wp = w.clone();
            wp[j] += eps;
            let mut wm = w.clone();
            wm[j] -= eps;
            assert!(((loss(&x, &wp) - loss(&x, &wm)) / (2.0 * eps) - dw[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_backward_matches_finite_differences() {
        let x = random([3, 2, 2, 2], 9);
        let gamma = vec![1.5, 0.7];
        let beta = vec![0.1, -0.3];
        let probe = random([3, 2, 2, 2], 10);
        let loss = |x: &Tensor<f64>, gm: &[f64]| dot(&batch_norm_train(x, gm, &beta, 1e-5).0, &probe);
        let (_, cache, _, _) = batch_norm_train(&x, &gamma, &beta, 1e-5);
        let mut dg = vec![0.0; 2];
        let dx = batch_norm_backward(&cache, &gamma, &probe, Some(&mut dg), None);
        let eps = 1e-6;
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[j] += eps;
            let mut xm = x.clone();
            xm.data_mut()[j] -= eps;
            let fd = (loss(&xp, &gamma) - loss(&xm, &gamma)) / (2.0 * eps);
            assert!((fd - dx.data()[j]).abs() < 1e-5, "bn dx[{j}]: {fd} vs {}", dx.data()[j]);
        }
        let fd = (loss(&x, &[1.5 + eps, 0.7]) - loss(&x, &[1.5 - eps, 0.7])) / (2.0 * eps);
        assert!((fd - dg[0]).abs() < 1e-6);
    }

    #[test]
    fn pooling_and_upsampling_shapes_and_adjoints() {
        let x = random([1, 2, 4, 4], 11);
        let (mp, arg) = max_pool2(&x).unwrap();
        assert_eq!(mp.shape(), [1, 2, 2, 2]);
        assert_eq!(mp.data()[0], x.data()[arg[0] as usize]);
        let up = upsample2(&mp);
        assert_eq!(up.shape(), [1, 2, 4, 4]);
        // <up(a), b> == <a, up^T(b)>
        let b = random([1, 2, 4, 4], 12);
        assert!((dot(&up, &b) - dot(&mp, &upsample2_backward(&b))).abs() < 1e-12);
        let ap = avg_pool2(&x).unwrap();
        let c = random([1, 2, 2, 2], 13);
        assert!((dot(&ap, &c) - dot(&x, &avg_pool2_backward(x.shape(), &c))).abs() < 1e-12);
        assert!(max_pool2(&random([1, 1, 3, 4], 1)).is_err());
    }

    #[test]
    fn activation_derivatives() {
        let x = random([1, 1, 2, 3], 14);
        let dy = Tensor::full([1, 1, 2, 3], 1.0);
        for act in [Activation::Relu, Activation::LeakyRelu(0.2), Activation::Tanh, Activation::Sigmoid] {
            let y = act.apply(&x);
            let d = act.backward(&x, &y, &dy);
            for j in 0..x.len() {
                let eps = 1e-6;
                let mut xp = x.clone();
                xp.data_mut()[j] += eps;
                let mut xm = x.clone();
                xm.data_mut()[j] -= eps;
                let fd = (act.apply(&xp).data()[j] - act.apply(&xm).data()[j]) / (2.0 * eps);
                assert!((fd - d.data()[j]).abs() < 1e-6, "{act:?}");
            }
        }
    }
}
