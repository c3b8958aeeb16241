//! A small convolutional network toolkit with hand-written backward passes.
//!
//! Networks are [`Sequential`] stacks of [`Layer`]s. A forward pass returns a
//! [`Tape`] of per-layer caches; `backward` consumes it, accumulating parameter
//! gradients into the stack's own gradient buffers.

pub mod ops;
pub mod optim;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::tensor::{Float, Tensor};
pub use ops::{Activation, ConvGeom};

#[derive(Clone, Debug)]
pub struct Conv2d<T: Float = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeom,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Float> Conv2d<T> {
    /// Kaiming-uniform initialisation for a leaky-relu slope of `slope`.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        bias: bool,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_channels * geom.kernel * geom.kernel) as f64;
        let bound = (6.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
        let n = out_channels * in_channels * geom.kernel * geom.kernel;
        Self {
            in_channels,
            out_channels,
            geom,
            weight: (0..n)
                .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                .collect(),
            bias: bias.then(|| vec![T::zero(); out_channels]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T: Float = f32> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Float> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let bound = gain * (3.0 / in_features as f64).sqrt();
        Self {
            in_features,
            out_features,
            weight: (0..in_features * out_features)
                .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                .collect(),
            bias: vec![T::zero(); out_features],
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Float = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T: Float = f32> {
    Conv(Conv2d<T>),
    Norm(BatchNorm2d<T>),
    Dense(Linear<T>),
    Act(Activation),
    /// Drops whole channels with the given probability while training.
    SpatialDropout(f64),
    MaxPool2,
    AvgPool2,
    Upsample2,
    GlobalAvgPool,
    /// `[n, c·h·w, 1, 1]` → `[n, c, h, w]`.
    Unflatten([usize; 3]),
    Flatten,
}

/// A named parameter view.
pub struct ParamRef<'a, T: Float> {
    pub name: &'static str,
    pub value: &'a [T],
    pub trainable: bool,
}

impl<T: Float> Layer<T> {
    pub fn conv(cin: usize, cout: usize, kernel: usize, stride: usize, slope: f64, rng: &mut ChaCha8Rng) -> Self {
        Layer::Conv(Conv2d::new(
            cin,
            cout,
            ConvGeom {
                kernel,
                stride,
                pad: kernel / 2,
            },
            true,
            slope,
            rng,
        ))
    }

    /// Parameters in serialization order; running statistics are non-trainable.
    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        fn p<'a, T: Float>(name: &'static str, value: &'a [T], trainable: bool) -> ParamRef<'a, T> {
            ParamRef {
                name,
                value,
                trainable,
            }
        }
        match self {
            Layer::Conv(c) => {
                let mut v = vec![p("weight", &c.weight[..], true)];
                if let Some(b) = &c.bias {
                    v.push(p("bias", &b[..], true));
                }
                v
            }
            Layer::Norm(n) => vec![
                p("gamma", &n.gamma[..], true),
                p("beta", &n.beta[..], true),
                p("running_mean", &n.running_mean[..], false),
                p("running_var", &n.running_var[..], false),
            ],
            Layer::Dense(l) => vec![p("weight", &l.weight[..], true), p("bias", &l.bias[..], true)],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Vec<T>, bool)> {
        match self {
            Layer::Conv(c) => {
                let mut v = vec![("weight", &mut c.weight, true)];
                if let Some(b) = &mut c.bias {
                    v.push(("bias", b, true));
                }
                v
            }
            Layer::Norm(n) => vec![
                ("gamma", &mut n.gamma, true),
                ("beta", &mut n.beta, true),
                ("running_mean", &mut n.running_mean, false),
                ("running_var", &mut n.running_var, false),
            ],
            Layer::Dense(l) => vec![("weight", &mut l.weight, true), ("bias", &mut l.bias, true)],
            _ => Vec::new(),
        }
    }

    fn trainable_lens(&self) -> Vec<usize> {
        self.params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .collect()
    }

    /// The same layer with parameters converted to another precision.
    pub fn cast<U: Float>(&self) -> Layer<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect::<Vec<U>>();
        match self {
            Layer::Conv(c) => Layer::Conv(Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                geom: c.geom,
                weight: cv(&c.weight),
                bias: c.bias.as_deref().map(cv),
            }),
            Layer::Norm(n) => Layer::Norm(BatchNorm2d {
                gamma: cv(&n.gamma),
                beta: cv(&n.beta),
                running_mean: cv(&n.running_mean),
                running_var: cv(&n.running_var),
                momentum: n.momentum,
                eps: n.eps,
            }),
            Layer::Dense(l) => Layer::Dense(Linear {
                in_features: l.in_features,
                out_features: l.out_features,
                weight: cv(&l.weight),
                bias: cv(&l.bias),
            }),
            Layer::Act(a) => Layer::Act(*a),
            Layer::SpatialDropout(p) => Layer::SpatialDropout(*p),
            Layer::MaxPool2 => Layer::MaxPool2,
            Layer::AvgPool2 => Layer::AvgPool2,
            Layer::Upsample2 => Layer::Upsample2,
            Layer::GlobalAvgPool => Layer::GlobalAvgPool,
            Layer::Unflatten(s) => Layer::Unflatten(*s),
            Layer::Flatten => Layer::Flatten,
        }
    }
}

enum Cache<T: Float> {
    None,
    Input(Tensor<T>),
    InOut(Tensor<T>, Tensor<T>),
    Norm(ops::BatchNormCache<T>),
    NormEval,
    Dropout(Vec<T>),
    MaxPool([usize; 4], Vec<u32>),
    Shape([usize; 4]),
}

/// Per-layer caches from one forward pass, plus requested tap outputs.
pub struct Tape<T: Float = f32> {
    caches: Vec<Cache<T>>,
    training: bool,
}

impl<T: Float> Tape<T> {
    /// A tape with no caches, for inference-only passes.
    pub fn empty() -> Self {
        Self {
            caches: Vec::new(),
            training: false,
        }
    }
}

/// Forward-pass mode.
pub enum Mode<'a> {
    /// Batch statistics, active dropout; running statistics are updated.
    Train(&'a mut ChaCha8Rng),
    /// Running statistics, no dropout.
    Eval,
}

/// An ordered stack of layers with gradient buffers for its trainable parameters.
#[derive(Clone, Debug)]
pub struct Sequential<T: Float = f32> {
    layers: Vec<Layer<T>>,
    grads: Vec<Vec<Vec<T>>>,
}

impl<T: Float> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        let grads = layers
            .iter()
            .map(|l| l.trainable_lens().into_iter().map(|n| vec![T::zero(); n]).collect())
            .collect();
        Self { layers, grads }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Visits every parameter (trainable or not) as `("{layer}.{name}", values)`.
    pub fn named_params(&self) -> Vec<(String, &[T])> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params()
                    .into_iter()
                    .map(move |p| (format!("{i}.{}", p.name), p.value))
            })
            .collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params_mut()
                    .into_iter()
                    .map(move |(name, v, _)| (format!("{i}.{name}"), v))
            })
            .collect()
    }

    /// Trainable `(value, grad)` pairs in a stable order.
    pub fn trainable_mut(&mut self) -> Vec<(&mut Vec<T>, &Vec<T>)> {
        let mut out = Vec::new();
        for (layer, grads) in self.layers.iter_mut().zip(&self.grads) {
            let values = layer.params_mut().into_iter().filter(|p| p.2).map(|p| p.1);
            out.extend(values.zip(grads.iter()));
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.fill(T::zero());
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode<'_>) -> Result<(Tensor<T>, Tape<T>)> {
        self.forward_taps(x, mode, &[]).map(|(y, _, tape)| (y, tape))
    }

    /// Forward pass that also returns the outputs of the layers listed in `taps`.
    pub fn forward_taps(
        &mut self,
        x: &Tensor<T>,
        mode: Mode<'_>,
        taps: &[usize],
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>, Tape<T>)> {
        let training = matches!(mode, Mode::Train(_));
        let (y, tapped, tape, stats) = self.run(x, mode, taps, true)?;
        if training {
            for (i, mean, var) in stats {
                if let Layer::Norm(n) = &mut self.layers[i] {
                    let m = T::from_f64_lossy(n.momentum);
                    let count = tape_count(&tape, i);
                    let unbias = if count > 1 {
                        T::from_f64_lossy(count as f64 / (count - 1) as f64)
                    } else {
                        T::one()
                    };
                    for c in 0..mean.len() {
                        n.running_mean[c] = (T::one() - m) * n.running_mean[c] + m * mean[c];
                        n.running_var[c] = (T::one() - m) * n.running_var[c] + m * var[c] * unbias;
                    }
                }
            }
        }
        Ok((y, tapped, tape))
    }

    /// Evaluation-mode forward that keeps a tape, for backpropagating through a frozen net.
    pub fn forward_eval(&self, x: &Tensor<T>, taps: &[usize]) -> Result<(Tensor<T>, Vec<Tensor<T>>, Tape<T>)> {
        let (y, tapped, tape, _) = self.run(x, Mode::Eval, taps, true)?;
        Ok((y, tapped, tape))
    }

    /// Evaluation-mode forward without caches.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x, Mode::Eval, &[], false)?.0)
    }

    /// Evaluation-mode forward returning only the tapped outputs.
    pub fn infer_taps(&self, x: &Tensor<T>, taps: &[usize]) -> Result<Vec<Tensor<T>>> {
        Ok(self.run(x, Mode::Eval, taps, false)?.1)
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        x: &Tensor<T>,
        mut mode: Mode<'_>,
        taps: &[usize],
        record: bool,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>, Tape<T>, Vec<(usize, Vec<T>, Vec<T>)>)> {
        let training = matches!(mode, Mode::Train(_));
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::new();
        let mut tapped = Vec::with_capacity(taps.len());
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, cache) = match layer {
                Layer::Conv(c) => {
                    if cur.channels() != c.in_channels {
                        return Err(shape_err!(
                            "layer {i}: conv expects {} channels, got {}",
                            c.in_channels,
                            cur.channels()
                        ));
                    }
                    let y = ops::conv2d_forward(&cur, &c.weight, c.bias.as_deref(), c.out_channels, c.geom)?;
                    (y, Cache::Input(cur))
                }
                Layer::Norm(n) => {
                    if cur.channels() != n.gamma.len() {
                        return Err(shape_err!("layer {i}: batch norm channel mismatch"));
                    }
                    let eps = T::from_f64_lossy(n.eps);
                    if training {
                        let (y, cache, mean, var) = ops::batch_norm_train(&cur, &n.gamma, &n.beta, eps);
                        stats.push((i, mean, var));
                        (y, Cache::Norm(cache))
                    } else {
                        let y = ops::batch_norm_eval(&cur, &n.gamma, &n.beta, &n.running_mean, &n.running_var, eps);
                        (y, Cache::NormEval)
                    }
                }
                Layer::Dense(l) => {
                    let y = ops::linear_forward(&cur, &l.weight, &l.bias, l.out_features)?;
                    (y, Cache::Input(cur))
                }
                Layer::Act(a) => {
                    let y = a.apply(&cur);
                    if a.needs_output() {
                        (y.clone(), Cache::InOut(Tensor::zeros([0, 0, 0, 0]), y))
                    } else {
                        (y, Cache::Input(cur))
                    }
                }
                Layer::SpatialDropout(p) => match &mut mode {
                    Mode::Train(rng) if *p > 0.0 => {
                        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
                        let [n, c, h, w] = cur.shape();
                        let scales: Vec<T> = (0..n * c)
                            .map(|_| if rng.random::<f64>() < *p { T::zero() } else { keep })
                            .collect();
                        let mut y = cur;
                        for (plane, &s) in y.data_mut().chunks_mut(h * w).zip(&scales) {
                            plane.iter_mut().for_each(|v| *v *= s);
                        }
                        (y, Cache::Dropout(scales))
                    }
                    _ => (cur, Cache::None),
                },
                Layer::MaxPool2 => {
                    let shape = cur.shape();
                    let (y, arg) = ops::max_pool2(&cur)?;
                    (y, Cache::MaxPool(shape, arg))
                }
                Layer::AvgPool2 => {
                    let shape = cur.shape();
                    (ops::avg_pool2(&cur)?, Cache::Shape(shape))
                }
                Layer::Upsample2 => (ops::upsample2(&cur), Cache::None),
                Layer::GlobalAvgPool => {
                    let shape = cur.shape();
                    (ops::global_avg_pool(&cur), Cache::Shape(shape))
                }
                Layer::Unflatten([c, h, w]) => {
                    let shape = cur.shape();
                    let n = cur.batch();
                    (cur.reshape([n, *c, *h, *w])?, Cache::Shape(shape))
                }
                Layer::Flatten => {
                    let shape = cur.shape();
                    let (n, f) = (cur.batch(), cur.item_len());
                    (cur.reshape([n, f, 1, 1])?, Cache::Shape(shape))
                }
            };
            if taps.contains(&i) {
                tapped.push(next.clone());
            }
            caches.push(if record { cache } else { Cache::None });
            cur = next;
        }
        Ok((cur, tapped, Tape { caches, training }, stats))
    }

    /// Backpropagates `dy`, accumulating parameter gradients.
    pub fn backward(&mut self, tape: Tape<T>, dy: Tensor<T>, want_dx: bool) -> Result<Option<Tensor<T>>> {
        let (layers, grads) = (&self.layers, &mut self.grads);
        backward_impl(layers, Some(grads), tape, vec![(layers.len().wrapping_sub(1), dy)], want_dx)
    }

    /// Backpropagates to the input only; parameters are treated as constants.
    pub fn backward_input(&self, tape: Tape<T>, dy: Tensor<T>) -> Result<Tensor<T>> {
        let last = self.layers.len().wrapping_sub(1);
        backward_impl(&self.layers, None, tape, vec![(last, dy)], true)
            .map(|d| d.expect("input gradient requested"))
    }

    /// Input gradient when several layer outputs received gradients.
    /// Each `(layer, grad)` entry is the loss gradient with respect to that layer's output.
    pub fn backward_taps_input(&self, tape: Tape<T>, tap_grads: Vec<(usize, Tensor<T>)>) -> Result<Tensor<T>> {
        backward_impl(&self.layers, None, tape, tap_grads, true).map(|d| d.expect("input gradient requested"))
    }
}

fn tape_count<T: Float>(tape: &Tape<T>, layer: usize) -> usize {
    match &tape.caches[layer] {
        Cache::Norm(c) => {
            let [n, _, h, w] = c.normalized.shape();
            n * h * w
        }
        _ => 0,
    }
}

fn backward_impl<T: Float>(
    layers: &[Layer<T>],
    mut grads: Option<&mut Vec<Vec<Vec<T>>>>,
    tape: Tape<T>,
    mut injections: Vec<(usize, Tensor<T>)>,
    want_dx: bool,
) -> Result<Option<Tensor<T>>> {
    if tape.caches.len() != layers.len() {
        return Err(shape_err!("tape does not belong to this network"));
    }
    let mut caches = tape.caches;
    let mut cur: Option<Tensor<T>> = None;
    for i in (0..layers.len()).rev() {
        while let Some(pos) = injections.iter().position(|(j, _)| *j == i) {
            let (_, g) = injections.swap_remove(pos);
            cur = Some(match cur {
                None => g,
                Some(mut c) => {
                    c.add_assign(&g)?;
                    c
                }
            });
        }
        let Some(dy) = cur.take() else {
            continue;
        };
        let need_dx = want_dx || i > 0;
        let cache = std::mem::replace(&mut caches[i], Cache::None);
        let mut lg = grads.as_deref_mut().map(|g| &mut g[i]);
        let dx = match (&layers[i], cache) {
            (Layer::Conv(c), Cache::Input(x)) => {
                let (gw, gb) = match lg.as_mut().map(|g| g.as_mut_slice()) {
                    Some([gw, gb]) => (Some(&mut gw[..]), Some(&mut gb[..])),
                    Some([gw]) => (Some(&mut gw[..]), None),
                    _ => (None, None),
                };
                ops::conv2d_backward(&x, &c.weight, c.out_channels, c.geom, &dy, need_dx, gw, gb)
            }
            (Layer::Dense(l), Cache::Input(x)) => {
                let (gw, gb) = match lg.as_mut().map(|g| g.as_mut_slice()) {
                    Some([gw, gb]) => (Some(&mut gw[..]), Some(&mut gb[..])),
                    _ => (None, None),
                };
                ops::linear_backward(&x, &l.weight, l.out_features, &dy, need_dx, gw, gb)
            }
            (Layer::Norm(n), Cache::Norm(cache)) => {
                let (gg, gb) = match lg.as_mut().map(|g| g.as_mut_slice()) {
                    Some([gg, gb]) => (Some(&mut gg[..]), Some(&mut gb[..])),
                    _ => (None, None),
                };
                Some(ops::batch_norm_backward(&cache, &n.gamma, &dy, gg, gb))
            }
            (Layer::Norm(n), Cache::NormEval) => {
                let [_, c, h, w] = dy.shape();
                let mut dx = dy;
                for item in dx.data_mut().chunks_mut(c * h * w) {
                    for (ch, plane) in item.chunks_mut(h * w).enumerate() {
                        let s = n.gamma[ch] / (n.running_var[ch] + T::from_f64_lossy(n.eps)).sqrt();
                        plane.iter_mut().for_each(|v| *v *= s);
                    }
                }
                Some(dx)
            }
            (Layer::Act(a), Cache::Input(x)) => Some(a.backward(&x, &x, &dy)),
            (Layer::Act(a), Cache::InOut(x, y)) => Some(a.backward(&x, &y, &dy)),
            (Layer::SpatialDropout(_), Cache::Dropout(scales)) => {
                let [_, _, h, w] = dy.shape();
                let mut dx = dy;
                for (plane, &s) in dx.data_mut().chunks_mut(h * w).zip(&scales) {
                    plane.iter_mut().for_each(|v| *v *= s);
                }
                Some(dx)
            }
            (Layer::SpatialDropout(_), Cache::None) => Some(dy),
            (Layer::MaxPool2, Cache::MaxPool(shape, arg)) => Some(ops::max_pool2_backward(shape, &arg, &dy)),
            (Layer::AvgPool2, Cache::Shape(shape)) => Some(ops::avg_pool2_backward(shape, &dy)),
            (Layer::Upsample2, Cache::None) => Some(ops::upsample2_backward(&dy)),
            (Layer::GlobalAvgPool, Cache::Shape(shape)) => Some(ops::global_avg_pool_backward(shape, &dy)),
            (Layer::Unflatten(_) | Layer::Flatten, Cache::Shape(shape)) => Some(dy.reshape(shape)?),
            _ => {
                return Err(shape_err!(
                    "layer {i} has no cached activations (tape recorded without caches or in another mode: training={})",
                    tape.training
                ))
            }
        };
        cur = if i == 0 && !want_dx { None } else { dx };
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn small_net(r: &mut ChaCha8Rng) -> Sequential<f64> {
        Sequential::new(vec![
            Layer::conv(2, 4, 3, 2, 0.2, r),
            Layer::Norm(BatchNorm2d::new(4)),
            Layer::Act(Activation::LeakyRelu(0.2)),
            Layer::Upsample2,
            Layer::conv(4, 3, 3, 1, 0.0, r),
            Layer::Act(Activation::Tanh),
            Layer::GlobalAvgPool,
            Layer::Flatten,
            Layer::Dense(Linear::new(3, 1, 1.0, r)),
            Layer::Act(Activation::Sigmoid),
        ])
    }

    fn loss_of(net: &mut Sequential<f64>, x: &Tensor<f64>) -> f64 {
        let mut r = rng();
        net.forward(x, Mode::Train(&mut r)).unwrap().0.sum()
    }

    #[test]
    fn sequential_gradients_match_finite_differences() {
        let mut r = rng();
        let mut net = small_net(&mut r);
        let x = Tensor::from_vec([2, 2, 4, 4], (0..64).map(|i| ((i * 37 % 17) as f64 / 8.0) - 1.0).collect()).unwrap();
        let mut rr = rng();
        let (y, tape) = net.forward(&x, Mode::Train(&mut rr)).unwrap();
        let dy = Tensor::full(y.shape(), 1.0);
        let dx = net.backward(tape, dy, true).unwrap().unwrap();
        let eps = 1e-6;
        for j in [0, 5, 33, 63] {
            let mut xp = x.clone();
            xp.data_mut()[j] += eps;
            let mut xm = x.clone();
            xm.data_mut()[j] -= eps;
            let fd = (loss_of(&mut net.clone(), &xp) - loss_of(&mut net.clone(), &xm)) / (2.0 * eps);
            assert!((fd - dx.data()[j]).abs() < 1e-7, "dx[{j}] {fd} vs {}", dx.data()[j]);
        }
        // first conv weight gradient
        let analytic = net.grads[0][0][3];
        let mut plus = net.clone();
        if let Layer::Conv(c) = &mut plus.layers[0] {
            c.weight[3] += eps;
        }
        let mut minus = net.clone();
        if let Layer::Conv(c) = &mut minus.layers[0] {
            c.weight[3] -= eps;
        }
        let fd = (loss_of(&mut plus, &x) - loss_of(&mut minus, &x)) / (2.0 * eps);
        assert!((fd - analytic).abs() < 1e-7);
    }

    #[test]
    fn eval_mode_is_deterministic_and_uses_running_stats() {
        let mut r = rng();
        let mut net = small_net(&mut r);
        let x = Tensor::full([1, 2, 4, 4], 0.3);
        let a = net.infer(&x).unwrap();
        assert_eq!(a, net.infer(&x).unwrap());
        let mut rr = rng();
        let _ = net.forward(&Tensor::full([3, 2, 4, 4], 0.7), Mode::Train(&mut rr)).unwrap();
        if let Layer::Norm(n) = &net.layers[1] {
            assert!(n.running_mean.iter().any(|&m| m != 0.0));
        }
    }

    #[test]
    fn dropout_zeroes_whole_channels() {
        let mut r = rng();
        let mut net: Sequential<f32> = Sequential::new(vec![Layer::SpatialDropout(0.5)]);
        let x = Tensor::full([4, 8, 3, 3], 1.0);
        let (y, _) = net.forward(&x, Mode::Train(&mut r)).unwrap();
        for plane in y.data().chunks(9) {
            assert!(plane.iter().all(|&v| v == 0.0) || plane.iter().all(|&v| v == 2.0));
        }
        assert_eq!(net.infer(&x).unwrap(), x);
    }

    #[test]
    fn param_count_of_single_conv() {
        let mut r = rng();
        let net: Sequential<f32> = Sequential::new(vec![Layer::conv(3, 64, 3, 1, 0.0, &mut r)]);
        assert_eq!(net.count_params(), 3 * 64 * 9 + 64);
        assert_eq!(Sequential::<f32>::new(vec![]).count_params(), 0);
    }
}
