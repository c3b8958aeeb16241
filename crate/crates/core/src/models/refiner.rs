//! Unet refiner: six stride-2 encoder convs, a factor-2 bottleneck pool, and
//! seven upsample + skip-concat + conv decoder stages.

use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::imaging::Image;
use crate::nn::ops::{max_pool2, max_pool2_backward, upsample2, upsample2_backward};
use crate::nn::{Activation, BatchNorm2d, Layer, Mode, Sequential, Tape};
use crate::tensor::{concat_channels, split_channels, Tensor};

/// Encoder kernel sizes, Conv1..Conv6.
const ENC_KERNELS: [usize; 6] = [7, 5, 5, 3, 3, 3];
/// Encoder widths as multiples of the base width.
const ENC_MULT: [usize; 6] = [1, 2, 4, 8, 8, 8];

/// Total downsampling factor (six convs plus the bottleneck pool).
pub const DEPTH_STRIDE: usize = 128;

#[derive(Clone, Debug)]
pub struct Refiner {
    width: usize,
    encoder: Vec<Sequential>,
    decoder: Vec<Sequential>,
}

/// Per-stage activation shapes from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerTrace {
    pub encoder: Vec<[usize; 4]>,
    pub bottleneck: [usize; 4],
    pub upsampled: Vec<[usize; 4]>,
    pub concat: Vec<[usize; 4]>,
    pub decoder: Vec<[usize; 4]>,
}

pub struct RefinerTape {
    enc: Vec<Tape>,
    dec: Vec<Tape>,
    pool_shape: [usize; 4],
    pool_argmax: Vec<u32>,
    up_channels: Vec<usize>,
}

impl Refiner {
    pub fn new(width: usize, rng: &mut ChaCha8Rng) -> Self {
        let enc_out: Vec<usize> = ENC_MULT.iter().map(|m| m * width).collect();
        let mut encoder = Vec::new();
        let mut cin = 3;
        for (k, &cout) in ENC_KERNELS.iter().zip(&enc_out) {
            encoder.push(Sequential::new(vec![
                Layer::conv(cin, cout, *k, 2, 0.0, rng),
                Layer::Norm(BatchNorm2d::new(cout)),
                Layer::Act(Activation::Relu),
            ]));
            cin = cout;
        }
        // skips, deepest first: Conv6..Conv1 then the input
        let skips: Vec<usize> = enc_out.iter().rev().copied().chain([3]).collect();
        let outs: Vec<usize> = enc_out.iter().rev().copied().chain([3]).collect();
        let mut decoder = Vec::new();
        let mut up = cin;
        for (i, (&skip, &cout)) in skips.iter().zip(&outs).enumerate() {
            let last = i + 1 == skips.len();
            let mut layers = vec![Layer::conv(up + skip, cout, 3, 1, if last { 1.0 } else { 0.2 }, rng)];
            if last {
                layers.push(Layer::Act(Activation::Tanh));
            } else {
                layers.push(Layer::Norm(BatchNorm2d::new(cout)));
                layers.push(Layer::Act(Activation::LeakyRelu(0.2)));
            }
            decoder.push(Sequential::new(layers));
            up = cout;
        }
        Self { width, encoder, decoder }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count_params(&self) -> usize {
        self.stacks().map(|s| s.count_params()).sum()
    }

    fn stacks(&self) -> impl Iterator<Item = &Sequential> {
        self.encoder.iter().chain(&self.decoder)
    }

    /// Every stack with a stable name prefix, for checkpointing.
    pub fn named_stacks(&self) -> Vec<(String, &Sequential)> {
        let enc = self.encoder.iter().enumerate().map(|(i, s)| (format!("enc{}", i + 1), s));
        let dec = self.decoder.iter().enumerate().map(|(i, s)| (format!("dec{}", i + 1), s));
        enc.chain(dec).collect()
    }

    pub fn named_stacks_mut(&mut self) -> Vec<(String, &mut Sequential)> {
        let enc = self.encoder.iter_mut().enumerate().map(|(i, s)| (format!("enc{}", i + 1), s));
        let dec = self.decoder.iter_mut().enumerate().map(|(i, s)| (format!("dec{}", i + 1), s));
        enc.chain(dec).collect()
    }

    pub fn zero_grad(&mut self) {
        for s in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            s.zero_grad();
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<(&mut Vec<f32>, &Vec<f32>)> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|s| s.trainable_mut())
            .collect()
    }

    fn check_input(x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != 3 || h != w || h == 0 || h % DEPTH_STRIDE != 0 {
            return Err(shape_err!(
                "refiner needs 3-channel square input divisible by {DEPTH_STRIDE}, got {:?}",
                x.shape()
            ));
        }
        Ok(())
    }

    fn run(&mut self, x: &Tensor, mut mode: Mode<'_>, keep: bool) -> Result<(Tensor, RefinerTape, RefinerTrace)> {
        Self::check_input(x)?;
        let mut trace = RefinerTrace {
            encoder: Vec::new(),
            bottleneck: [0; 4],
            upsampled: Vec::new(),
            concat: Vec::new(),
            decoder: Vec::new(),
        };
        let mut tape = RefinerTape {
            enc: Vec::new(),
            dec: Vec::new(),
            pool_shape: [0; 4],
            pool_argmax: Vec::new(),
            up_channels: Vec::new(),
        };
        let mut skips = vec![x.clone()];
        let mut h = x.clone();
        for stack in &mut self.encoder {
            let (y, t) = forward_stack(stack, &h, &mut mode, keep)?;
            trace.encoder.push(y.shape());
            tape.enc.push(t);
            skips.push(y.clone());
            h = y;
        }
        tape.pool_shape = h.shape();
        let (pooled, argmax) = max_pool2(&h)?;
        tape.pool_argmax = argmax;
        trace.bottleneck = pooled.shape();
        h = pooled;
        for stack in &mut self.decoder {
            let up = upsample2(&h);
            trace.upsampled.push(up.shape());
            tape.up_channels.push(up.channels());
            let skip = skips.pop().expect("one skip per decoder stage");
            let cat = concat_channels(&up, &skip)?;
            trace.concat.push(cat.shape());
            let (y, t) = forward_stack(stack, &cat, &mut mode, keep)?;
            trace.decoder.push(y.shape());
            tape.dec.push(t);
            h = y;
        }
        Ok((h, tape, trace))
    }

    /// Training-mode forward keeping everything needed for [`Refiner::backward`].
    pub fn forward_train(&mut self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<(Tensor, RefinerTape)> {
        let (y, tape, _) = self.run(x, Mode::Train(rng), true)?;
        Ok((y, tape))
    }

    /// Inference-mode forward returning the raw tanh output and the stage shapes.
    pub fn infer_traced(&self, x: &Tensor) -> Result<(Tensor, RefinerTrace)> {
        // eval mode never mutates; a clone keeps the signature `&self`
        let mut this = self.clone();
        let (y, _, trace) = this.run(x, Mode::Eval, false)?;
        Ok((y, trace))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Self::check_input(x)?;
        let mut skips = vec![x.clone()];
        let mut h = x.clone();
        for stack in &self.encoder {
            h = stack.infer(&h)?;
            skips.push(h.clone());
        }
        h = max_pool2(&h)?.0;
        for stack in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            h = stack.infer(&concat_channels(&upsample2(&h), &skip)?)?;
        }
        Ok(h)
    }

    /// Refines one image; output has the input's shape and lies in `[-1, 1]`.
    pub fn refine(&self, img: &Image) -> Result<Image> {
        Image::from_tensor(&self.infer(&img.to_tensor())?, 0)
    }

    /// Accumulates parameter gradients for `dy`, the loss gradient of the output.
    pub fn backward(&mut self, tape: RefinerTape, dy: Tensor) -> Result<()> {
        let n_enc = self.encoder.len();
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; n_enc + 1];
        let mut dh = dy;
        for (i, (stack, t)) in self.decoder.iter_mut().zip(tape.dec).enumerate().rev() {
            let dcat = stack.backward(t, dh, true)?.expect("input gradient");
            let (dup, dskip) = split_channels(&dcat, tape.up_channels[i]);
            skip_grads[n_enc - i] = Some(dskip);
            dh = upsample2_backward(&dup);
        }
        dh = max_pool2_backward(tape.pool_shape, &tape.pool_argmax, &dh);
        for (j, (stack, t)) in self.encoder.iter_mut().zip(tape.enc).enumerate().rev() {
            if let Some(g) = skip_grads[j + 1].take() {
                dh.add_assign(&g)?;
            }
            match stack.backward(t, dh, j > 0)? {
                Some(d) => dh = d,
                None => break,
            }
        }
        Ok(())
    }
}

fn forward_stack(stack: &mut Sequential, x: &Tensor, mode: &mut Mode<'_>, keep: bool) -> Result<(Tensor, Tape)> {
    match mode {
        Mode::Train(rng) => stack.forward(x, Mode::Train(rng)),
        Mode::Eval if keep => stack.forward_eval(x, &[]).map(|(y, _, t)| (y, t)),
        Mode::Eval => {
            let y = stack.infer(x)?;
            Ok((y, Tape::empty()))
        }
    }
}
