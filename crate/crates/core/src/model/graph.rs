//! A small reverse-mode differentiation tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep visits
//! every consumer before its producers. Parameters only enter through
//! convolutions; inputs are constants.

use rayon::prelude::*;

use crate::erp::{cyclic_swap_tensor, pixel_shuffle, pixel_unshuffle};
use crate::error::{Result, S3poError};
use crate::model::params::{Conv, ConvPadding, ParameterSet};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Conv { x: Var, conv: Conv },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    /// `x * gate` with an `H×W×1` gate broadcast over channels.
    MulSpatial { x: Var, gate: Var },
    /// `x * gate` with a `1×1×C` gate broadcast over space.
    MulChannel { x: Var, gate: Var },
    ChannelMax(Var),
    ChannelMean(Var),
    GlobalMax(Var),
    GlobalMean(Var),
    Shuffle(Var, usize),
    Unshuffle(Var, usize),
    Swap(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParameterSet,
    padding: ConvPadding,
    nodes: Vec<Node>,
}

/// Parameter gradients, aligned with the arrays of the [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub arrays: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Gradients {
            arrays: params.arrays().iter().map(|a| vec![0.0; a.values.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.arrays
            .iter_mut()
            .flatten()
            .for_each(|v| *v *= factor);
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().flatten().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.arrays.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParameterSet, padding: ConvPadding) -> Self {
        Graph {
            params,
            padding,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn conv(&mut self, x: Var, conv: Conv) -> Result<Var> {
        let xv = self.value(x);
        if xv.channels() != conv.in_channels {
            return Err(S3poError::shape(format!(
                "convolution expects {} input channels, got {}",
                conv.in_channels,
                xv.channels()
            )));
        }
        let out = conv3x3(
            xv,
            self.params.get(conv.weight),
            self.params.get(conv.bias),
            conv.out_channels,
            self.padding,
        );
        Ok(self.push(out, Op::Conv { x, conv }, true))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.grad_flag(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.grad_flag(&[x]);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.grad_flag(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.grad_flag(&[x]);
        self.push(out, Op::Scale(x, factor), ng)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_channels(&tensors)?;
        let ng = self.grad_flag(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    pub fn mul_spatial(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gate));
        if gv.channels() != 1 || gv.height() != xv.height() || gv.width() != xv.width() {
            return Err(S3poError::shape("spatial gate must be H×W×1"));
        }
        let c = xv.channels();
        let out = Tensor::from_fn(xv.height(), xv.width(), c, |y, x_, k| {
            xv.at(y, x_, k) * gv.at(y, x_, 0)
        });
        let ng = self.grad_flag(&[x, gate]);
        Ok(self.push(out, Op::MulSpatial { x, gate }, ng))
    }

    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gate));
        if gv.height() != 1 || gv.width() != 1 || gv.channels() != xv.channels() {
            return Err(S3poError::shape("channel gate must be 1×1×C"));
        }
        let g = gv.data();
        let out = Tensor::from_fn(xv.height(), xv.width(), xv.channels(), |y, x_, k| {
            xv.at(y, x_, k) * g[k]
        });
        let ng = self.grad_flag(&[x, gate]);
        Ok(self.push(out, Op::MulChannel { x, gate }, ng))
    }

    /// Maximum over channels, `H×W×1`.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.height(), xv.width(), 1, |y, x_, _| {
            xv.pixel(y, x_).iter().copied().fold(f64::NEG_INFINITY, f64::max)
        });
        let ng = self.grad_flag(&[x]);
        self.push(out, Op::ChannelMax(x), ng)
    }

    /// Mean over channels, `H×W×1`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.channels() as f64;
        let out = Tensor::from_fn(xv.height(), xv.width(), 1, |y, x_, _| {
            xv.pixel(y, x_).iter().sum::<f64>() / c
        });
        let ng = self.grad_flag(&[x]);
        self.push(out, Op::ChannelMean(x), ng)
    }

    /// Maximum over space, `1×1×C`.
    pub fn global_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.channels();
        let mut m = vec![f64::NEG_INFINITY; c];
        for px in xv.data().chunks_exact(c) {
            m.iter_mut().zip(px).for_each(|(a, &b)| *a = a.max(b));
        }
        let out = Tensor::from_vec(1, 1, c, m).expect("sized");
        let ng = self.grad_flag(&[x]);
        self.push(out, Op::GlobalMax(x), ng)
    }

    /// Mean over space, `1×1×C`.
    pub fn global_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.channels();
        let n = (xv.height() * xv.width()) as f64;
        let mut m = vec![0.0; c];
        for px in xv.data().chunks_exact(c) {
            m.iter_mut().zip(px).for_each(|(a, &b)| *a += b);
        }
        m.iter_mut().for_each(|v| *v /= n);
        let out = Tensor::from_vec(1, 1, c, m).expect("sized");
        let ng = self.grad_flag(&[x]);
        self.push(out, Op::GlobalMean(x), ng)
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = pixel_shuffle(self.value(x), r)?;
        let ng = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Shuffle(x, r), ng))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = pixel_unshuffle(self.value(x), r)?;
        let ng = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Unshuffle(x, r), ng))
    }

    pub fn cyclic_swap(&mut self, x: Var) -> Result<Var> {
        let out = cyclic_swap_tensor(self.value(x))?;
        let ng = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Swap(x), ng))
    }

    /// Back-propagates `seeds` (upstream gradients of output nodes) and returns
    /// the gradient of every parameter array.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if !g.same_shape(self.value(*v)) {
                return Err(S3poError::shape("seed gradient does not match its node"));
            }
            accumulate(&mut grads[v.0], g.clone());
        }
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {}
                Op::Conv { x, conv } => {
                    let xv = self.value(*x);
                    let w = self.params.get(conv.weight);
                    let (gw, gb) = conv3x3_param_grads(xv, &g, conv.out_channels, self.padding);
                    out.arrays[conv.weight.0]
                        .iter_mut()
                        .zip(&gw)
                        .for_each(|(a, b)| *a += b);
                    out.arrays[conv.bias.0]
                        .iter_mut()
                        .zip(&gb)
                        .for_each(|(a, b)| *a += b);
                    if self.nodes[x.0].needs_grad {
                        let gx = conv3x3_input_grad(&g, w, xv.shape(), self.padding);
                        accumulate(&mut grads[x.0], gx);
                    }
                }
                Op::Relu(x) => {
                    let gx = g.zip_map(&node.value, |gv, y| if y > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s))?;
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Scale(x, f) => {
                    accumulate(&mut grads[x.0], g.map(|v| v * f));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.value(*p).channels();
                        if self.nodes[p.0].needs_grad {
                            let gp = Tensor::from_fn(g.height(), g.width(), pc, |y, x, k| {
                                g.at(y, x, offset + k)
                            });
                            accumulate(&mut grads[p.0], gp);
                        }
                        offset += pc;
                    }
                }
                Op::MulSpatial { x, gate } => {
                    let (xv, gv) = (self.value(*x), self.value(*gate));
                    if self.nodes[x.0].needs_grad {
                        let gx = Tensor::from_fn(g.height(), g.width(), g.channels(), |y, x_, k| {
                            g.at(y, x_, k) * gv.at(y, x_, 0)
                        });
                        accumulate(&mut grads[x.0], gx);
                    }
                    if self.nodes[gate.0].needs_grad {
                        let gg = Tensor::from_fn(g.height(), g.width(), 1, |y, x_, _| {
                            g.pixel(y, x_)
                                .iter()
                                .zip(xv.pixel(y, x_))
                                .map(|(a, b)| a * b)
                                .sum()
                        });
                        accumulate(&mut grads[gate.0], gg);
                    }
                }
                Op::MulChannel { x, gate } => {
                    let (xv, gv) = (self.value(*x), self.value(*gate));
                    let c = g.channels();
                    if self.nodes[x.0].needs_grad {
                        let gate_vals = gv.data();
                        let gx = Tensor::from_fn(g.height(), g.width(), c, |y, x_, k| {
                            g.at(y, x_, k) * gate_vals[k]
                        });
                        accumulate(&mut grads[x.0], gx);
                    }
                    if self.nodes[gate.0].needs_grad {
                        let mut gg = vec![0.0; c];
                        for (gp, xp) in g.data().chunks_exact(c).zip(xv.data().chunks_exact(c)) {
                            for k in 0..c {
                                gg[k] += gp[k] * xp[k];
                            }
                        }
                        accumulate(&mut grads[gate.0], Tensor::from_vec(1, 1, c, gg)?);
                    }
                }
                Op::ChannelMax(x) => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.height(), xv.width(), xv.channels());
                    for y in 0..xv.height() {
                        for x_ in 0..xv.width() {
                            let k = argmax(xv.pixel(y, x_));
                            gx.set(y, x_, k, g.at(y, x_, 0));
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ChannelMean(x) => {
                    let xv = self.value(*x);
                    let c = xv.channels();
                    let gx = Tensor::from_fn(xv.height(), xv.width(), c, |y, x_, _| {
                        g.at(y, x_, 0) / c as f64
                    });
                    accumulate(&mut grads[x.0], gx);
                }
                Op::GlobalMax(x) => {
                    let xv = self.value(*x);
                    let c = xv.channels();
                    let mut gx = Tensor::zeros(xv.height(), xv.width(), c);
                    for k in 0..c {
                        let mut best = (0, f64::NEG_INFINITY);
                        for (p, px) in xv.data().chunks_exact(c).enumerate() {
                            if px[k] > best.1 {
                                best = (p, px[k]);
                            }
                        }
                        gx.data_mut()[best.0 * c + k] = g.data()[k];
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::GlobalMean(x) => {
                    let xv = self.value(*x);
                    let n = (xv.height() * xv.width()) as f64;
                    let gd = g.data();
                    let gx = Tensor::from_fn(xv.height(), xv.width(), xv.channels(), |_, _, k| {
                        gd[k] / n
                    });
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Shuffle(x, r) => accumulate(&mut grads[x.0], pixel_unshuffle(&g, *r)?),
                Op::Unshuffle(x, r) => accumulate(&mut grads[x.0], pixel_shuffle(&g, *r)?),
                Op::Swap(x) => accumulate(&mut grads[x.0], cyclic_swap_tensor(&g)?),
            }
        }
        Ok(out)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// Source column for tap `kx` (0..3) at output column `x`, if any.
#[inline]
fn source_col(x: usize, kx: usize, w: usize, padding: ConvPadding) -> Option<usize> {
    let sx = x as isize + kx as isize - 1;
    if (0..w as isize).contains(&sx) {
        Some(sx as usize)
    } else {
        match padding {
            ConvPadding::Zero => None,
            ConvPadding::Wrap => Some(sx.rem_euclid(w as isize) as usize),
        }
    }
}

#[inline]
fn source_row(y: usize, ky: usize, h: usize) -> Option<usize> {
    let sy = y as isize + ky as isize - 1;
    (0..h as isize).contains(&sy).then_some(sy as usize)
}

/// Rows per work item. Fixed so results do not depend on the thread count.
const ROW_CHUNK: usize = 4;

/// Same-size 3×3 convolution, stride 1. Weight layout `[ky][kx][in][out]`.
pub fn conv3x3(x: &Tensor, w: &[f64], b: &[f64], cout: usize, padding: ConvPadding) -> Tensor {
    let (h, wd, cin) = x.shape();
    debug_assert_eq!(w.len(), 9 * cin * cout);
    let mut out = vec![0.0; h * wd * cout];
    out.par_chunks_mut(wd * cout)
        .enumerate()
        .for_each(|(y, row)| {
            for (xo, acc) in row.chunks_exact_mut(cout).enumerate() {
                acc.copy_from_slice(b);
                for ky in 0..3 {
                    let Some(sy) = source_row(y, ky, h) else { continue };
                    for kx in 0..3 {
                        let Some(sx) = source_col(xo, kx, wd, padding) else { continue };
                        let px = x.pixel(sy, sx);
                        let tap = &w[(ky * 3 + kx) * cin * cout..][..cin * cout];
                        for (i, &xv) in px.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let wr = &tap[i * cout..(i + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(wr) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        });
    Tensor::from_vec(h, wd, cout, out).expect("sized")
}

/// Gradients of a [`conv3x3`] with respect to its weight and bias.
fn conv3x3_param_grads(
    x: &Tensor,
    g: &Tensor,
    cout: usize,
    padding: ConvPadding,
) -> (Vec<f64>, Vec<f64>) {
    let (h, wd, cin) = x.shape();
    let chunks: Vec<usize> = (0..h).step_by(ROW_CHUNK).collect();
    let partials: Vec<(Vec<f64>, Vec<f64>)> = chunks
        .par_iter()
        .map(|&y0| {
            let mut gw = vec![0.0; 9 * cin * cout];
            let mut gb = vec![0.0; cout];
            for y in y0..(y0 + ROW_CHUNK).min(h) {
                for xo in 0..wd {
                    let gp = g.pixel(y, xo);
                    gb.iter_mut().zip(gp).for_each(|(a, b)| *a += b);
                    for ky in 0..3 {
                        let Some(sy) = source_row(y, ky, h) else { continue };
                        for kx in 0..3 {
                            let Some(sx) = source_col(xo, kx, wd, padding) else { continue };
                            let px = x.pixel(sy, sx);
                            let tap = &mut gw[(ky * 3 + kx) * cin * cout..][..cin * cout];
                            for (i, &xv) in px.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let wr = &mut tap[i * cout..(i + 1) * cout];
                                for (a, &gv) in wr.iter_mut().zip(gp) {
                                    *a += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
            (gw, gb)
        })
        .collect();
    let mut gw = vec![0.0; 9 * cin * cout];
    let mut gb = vec![0.0; cout];
    for (pw, pb) in partials {
        gw.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
        gb.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
    }
    (gw, gb)
}

/// Gradient of a [`conv3x3`] with respect to its input, gathered per input
/// pixel so rows can be processed independently.
fn conv3x3_input_grad(
    g: &Tensor,
    w: &[f64],
    (h, wd, cin): (usize, usize, usize),
    padding: ConvPadding,
) -> Tensor {
    let cout = g.channels();
    let mut out = vec![0.0; h * wd * cin];
    out.par_chunks_mut(wd * cin)
        .enumerate()
        .for_each(|(sy, row)| {
            for ky in 0..3 {
                // Output row that read input row `sy` through tap `ky`.
                let y = sy as isize + 1 - ky as isize;
                if !(0..h as isize).contains(&y) {
                    continue;
                }
                let y = y as usize;
                for xo in 0..wd {
                    let gp = g.pixel(y, xo);
                    if gp.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    for kx in 0..3 {
                        let Some(sx) = source_col(xo, kx, wd, padding) else { continue };
                        let acc = &mut row[sx * cin..(sx + 1) * cin];
                        let tap = &w[(ky * 3 + kx) * cin * cout..][..cin * cout];
                        for (i, a) in acc.iter_mut().enumerate() {
                            let wr = &tap[i * cout..(i + 1) * cout];
                            *a += wr.iter().zip(gp).map(|(p, q)| p * q).sum::<f64>();
                        }
                    }
                }
            }
        });
    Tensor::from_vec(h, wd, cin, out).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{ModelConfig, ParamArray};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_conv(cin: usize, cout: usize, seed: u64) -> (ParameterSet, Conv) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arrays = vec![
            ParamArray {
                name: "c.weight".into(),
                shape: vec![3, 3, cin, cout],
                values: (0..9 * cin * cout).map(|_| rng.gen::<f64>() - 0.5).collect(),
            },
            ParamArray {
                name: "c.bias".into(),
                shape: vec![cout],
                values: (0..cout).map(|_| rng.gen::<f64>() - 0.5).collect(),
            },
        ];
        let set = ParameterSet::from_arrays(arrays).unwrap();
        let conv = Conv {
            weight: set.id("c.weight").unwrap(),
            bias: set.id("c.bias").unwrap(),
            in_channels: cin,
            out_channels: cout,
        };
        (set, conv)
    }

    /// Direct definition of a zero-padded 3×3 convolution.
    fn naive_conv(x: &Tensor, w: &[f64], b: &[f64], cout: usize) -> Tensor {
        let (h, wd, cin) = x.shape();
        Tensor::from_fn(h, wd, cout, |y, xo, o| {
            let mut acc = b[o];
            for ky in 0..3i64 {
                for kx in 0..3i64 {
                    let (sy, sx) = (y as i64 + ky - 1, xo as i64 + kx - 1);
                    if sy < 0 || sx < 0 || sy >= h as i64 || sx >= wd as i64 {
                        continue;
                    }
                    for i in 0..cin {
                        acc += x.at(sy as usize, sx as usize, i)
                            * w[((ky as usize * 3 + kx as usize) * cin + i) * cout + o];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_naive_definition() {
        let (set, conv) = one_conv(3, 5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(7, 6, 3, |_, _, _| rng.gen::<f64>() - 0.5);
        let got = conv3x3(&x, set.get(conv.weight), set.get(conv.bias), 5, ConvPadding::Zero);
        let want = naive_conv(&x, set.get(conv.weight), set.get(conv.bias), 5);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn wrap_padding_is_shift_equivariant() {
        let (set, conv) = one_conv(2, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(5, 8, 2, |_, _, _| rng.gen::<f64>());
        let swapped = cyclic_swap_tensor(&x).unwrap();
        let (w, b) = (set.get(conv.weight), set.get(conv.bias));
        let a = conv3x3(&swapped, w, b, 3, ConvPadding::Wrap);
        let c = cyclic_swap_tensor(&conv3x3(&x, w, b, 3, ConvPadding::Wrap)).unwrap();
        assert!(a.max_abs_diff(&c) < 1e-12);
    }

    /// Every op's backward pass against central differences of a random
    /// linear functional of the output.
    #[test]
    fn ops_match_finite_differences() {
        let (set, conv) = one_conv(4, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = Tensor::from_fn(4, 6, 4, |_, _, _| rng.gen::<f64>() - 0.5);
        let probe = Tensor::from_fn(8, 12, 1, |_, _, _| rng.gen::<f64>() - 0.5);

        let forward = |params: &ParameterSet| -> (f64, Gradients) {
            let mut g = Graph::new(params, ConvPadding::Zero);
            let x = g.input(x0.clone());
            let a = g.conv(x, conv).unwrap();
            let r = g.relu(a);
            let s = g.sigmoid(a);
            let sm = g.channel_max(r);
            let mean = g.channel_mean(s);
            let cat = g.concat(&[sm, mean]).unwrap();
            let gate = g.sigmoid(cat);
            let gate1 = g.channel_max(gate);
            let m = g.mul_spatial(a, gate1).unwrap();
            let gm = g.global_max(m);
            let ga = g.global_mean(m);
            let cg = g.add(gm, ga).unwrap();
            let mc = g.mul_channel(m, cg).unwrap();
            let sc = g.scale(mc, 0.7);
            let sw = g.cyclic_swap(sc).unwrap();
            let sh = g.pixel_shuffle(sw, 2).unwrap();
            let un = g.pixel_unshuffle(sh, 2).unwrap();
            let sh2 = g.pixel_shuffle(un, 2).unwrap();
            let out = g.value(sh2);
            let loss: f64 = out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
            let grads = g.backward(&[(sh2, probe.clone())]).unwrap();
            (loss, grads)
        };

        let (_, analytic) = forward(&set);
        let h = 1e-6;
        for (ai, array) in set.arrays().iter().enumerate() {
            for vi in 0..array.values.len() {
                let mut plus = set.clone();
                plus.arrays_mut()[ai].values[vi] += h;
                let mut minus = set.clone();
                minus.arrays_mut()[ai].values[vi] -= h;
                let numeric = (forward(&plus).0 - forward(&minus).0) / (2.0 * h);
                let a = analytic.arrays[ai][vi];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs()),
                    "{} [{vi}]: analytic {a} vs numeric {numeric}",
                    array.name
                );
            }
        }
    }

    #[test]
    fn conv_rejects_wrong_depth() {
        let cfg = ModelConfig::tiny(4, 1);
        let set = ParameterSet::zeros(&cfg);
        let (layers, _) = crate::model::params::layout(&cfg);
        let mut g = Graph::new(&set, ConvPadding::Zero);
        let x = g.input(Tensor::zeros(4, 4, 5));
        assert!(g.conv(x, layers.joint[0]).is_err());
    }
}
