//! Define-by-run computation tape over [`Tensor`]s with reverse-mode differentiation.
//!
//! Parameters live in a [`ParamStore`] and are referenced by id; only activations become
//! tape nodes. A graph built with `Graph::inference` stores no backward caches.

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize, dilation: usize) -> ConvSpec {
        ConvSpec {
            kernel,
            stride,
            padding,
            dilation,
        }
    }

    /// Odd kernel, "same" padding for the given dilation.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> ConvSpec {
        ConvSpec::new(kernel, stride, dilation * (kernel - 1) / 2, dilation)
    }

    fn out_size(&self, n: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (n + 2 * self.padding).saturating_sub(span) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Conv {
        x: Var,
        weight: ParamId,
        bias: Option<ParamId>,
        spec: ConvSpec,
        cols: Vec<f32>,
    },
    GroupNorm {
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        groups: usize,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        weight: ParamId,
        bias: ParamId,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    record: bool,
}

const GN_EPS: f32 = 1e-5;

impl<'s> Graph<'s> {
    /// Graph that records what backward needs; every parameter is trainable.
    pub fn training(store: &'s ParamStore) -> Graph<'s> {
        Graph {
            store,
            nodes: Vec::new(),
            record: true,
        }
    }

    /// Forward-only graph.
    pub fn inference(store: &'s ParamStore) -> Graph<'s> {
        Graph {
            store,
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(0, 0, 0))
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input whose gradient is tracked (gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// 2D convolution; `weight` has shape `[out, in, k, k]`.
    pub fn conv2d(&mut self, x: Var, weight: ParamId, bias: Option<ParamId>, spec: ConvSpec) -> Var {
        let p = self.store.get(weight);
        let (cout, cin, k) = (p.shape[0], p.shape[1], p.shape[2]);
        assert_eq!(k, spec.kernel, "{}: kernel size mismatch", p.name);
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.c, cin, "{}: expected {} input channels, got {}", p.name, cin, xv.c);
        let (ho, wo) = (spec.out_size(xv.h), spec.out_size(xv.w));
        let kk = cin * k * k;
        let mut out = Tensor::zeros(cout, ho, wo);
        let cols = if spec.is_pointwise() {
            gemm(cout, kk, ho * wo, &p.value, false, &xv.data, false, 0.0, &mut out.data);
            Vec::new()
        } else {
            let cols = im2col(xv, spec, ho, wo);
            gemm(cout, kk, ho * wo, &p.value, false, &cols, false, 0.0, &mut out.data);
            cols
        };
        if let Some(b) = bias {
            let bv = self.store.value(b);
            for (co, &bias) in bv.iter().enumerate() {
                out.plane_mut(co).iter_mut().for_each(|v| *v += bias);
            }
        }
        let cols = if self.record { cols } else { Vec::new() };
        self.push(
            out,
            Op::Conv {
                x,
                weight,
                bias,
                spec,
                cols,
            },
            true,
        )
    }

    pub fn group_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, groups: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.c % groups, 0, "channels not divisible by groups");
        let per = xv.c / groups * xv.plane_len();
        let (g_val, b_val) = (self.store.value(gamma), self.store.value(beta));
        let mut out = Tensor::zeros(xv.c, xv.h, xv.w);
        let mut xhat = vec![0.0f32; xv.len()];
        let mut rstd = vec![0.0f32; groups];
        let plane = xv.plane_len();
        for g in 0..groups {
            let seg = &xv.data[g * per..(g + 1) * per];
            let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
            let var = seg.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
            let r = 1.0 / (var + GN_EPS as f64).sqrt();
            rstd[g] = r as f32;
            for (i, &v) in seg.iter().enumerate() {
                let idx = g * per + i;
                let xh = ((v as f64 - mean) * r) as f32;
                xhat[idx] = xh;
                let ch = idx / plane;
                out.data[idx] = g_val[ch] * xh + b_val[ch];
            }
        }
        let (xhat, rstd) = if self.record {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        let needs = self.needs(x) || self.record;
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            needs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = Tensor::from_vec(xv.c, xv.h, xv.w, xv.data.iter().map(|v| v.max(0.0)).collect());
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let out = Tensor::from_vec(
            av.c,
            av.h,
            av.w,
            av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect(),
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, needs)
    }

    /// 3×3 max pooling, stride 2, padding 1.
    pub fn max_pool(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let spec = ConvSpec::new(3, 2, 1, 1);
        let (ho, wo) = (spec.out_size(xv.h), spec.out_size(xv.w));
        let mut out = Tensor::zeros(xv.c, ho, wo);
        let mut argmax = vec![0u32; xv.c * ho * wo];
        for c in 0..xv.c {
            let plane = xv.plane(c);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for ky in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= xv.h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix < 0 || ix >= xv.w as isize {
                                continue;
                            }
                            let i = iy as usize * xv.w + ix as usize;
                            if plane[i] > best {
                                best = plane[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (c * ho + oy) * wo + ox;
                    out.data[o] = best;
                    argmax[o] = best_i as u32;
                }
            }
        }
        let needs = self.needs(x);
        let argmax = if needs { argmax } else { Vec::new() };
        self.push(out, Op::MaxPool { x, argmax }, needs)
    }

    /// Bilinear resize to `h × w` with half-pixel centres (edge clamped).
    pub fn upsample(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let ty = axis_taps(xv.h, h);
        let tx = axis_taps(xv.w, w);
        let mut out = Tensor::zeros(xv.c, h, w);
        for c in 0..xv.c {
            let src = xv.plane(c);
            let dst = out.plane_mut(c);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = src[y0 * xv.w + x0] * (1.0 - lx) + src[y0 * xv.w + x1] * lx;
                    let bottom = src[y1 * xv.w + x0] * (1.0 - lx) + src[y1 * xv.w + x1] * lx;
                    dst[oy * w + ox] = top * (1.0 - ly) + bottom * ly;
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Upsample { x }, needs)
    }

    /// Channel concatenation of equally sized maps.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = &self.nodes[parts[0].0].value;
        let (h, w) = (first.h, first.w);
        let mut data = Vec::new();
        let mut c = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!((v.h, v.w), (h, w), "concat: spatial size mismatch");
            data.extend_from_slice(&v.data);
            c += v.c;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::from_vec(c, h, w, data),
            Op::Concat { parts: parts.to_vec() },
            needs,
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = xv.plane_len() as f32;
        let data = (0..xv.c).map(|c| xv.plane(c).iter().sum::<f32>() / n).collect();
        let needs = self.needs(x);
        self.push(Tensor::from_vec(xv.c, 1, 1, data), Op::GlobalAvgPool { x }, needs)
    }

    /// Fully connected layer over the flattened input; `weight` is `[out, in]`.
    pub fn linear(&mut self, x: Var, weight: ParamId, bias: ParamId) -> Var {
        let p = self.store.get(weight);
        let (nout, nin) = (p.shape[0], p.shape[1]);
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), nin, "{}: expected {} inputs, got {}", p.name, nin, xv.len());
        let mut out = Tensor::from_vec(nout, 1, 1, self.store.value(bias).to_vec());
        gemm(nout, nin, 1, &p.value, false, &xv.data, false, 1.0, &mut out.data);
        self.push(out, Op::Linear { x, weight, bias }, true)
    }

    /// Reverse pass. `seeds` are upstream gradients for chosen nodes; parameter gradients
    /// accumulate into `grads`. Returns the gradients of every node, indexed like the tape
    /// (only tracked nodes are populated).
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>, grads: &mut Grads) -> Vec<Option<Vec<f32>>> {
        assert!(self.record, "backward on an inference graph");
        let mut g: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, t) in seeds {
            assert_eq!(t.shape(), self.nodes[v.0].value.shape(), "seed shape mismatch");
            accumulate(&mut g[v.0], &t.data);
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = g[i].take() else { continue };
            self.backward_node(node, &dy, &mut g, grads);
            g[i] = Some(dy);
        }
        g
    }

    fn backward_node(&self, node: &Node, dy: &[f32], g: &mut [Option<Vec<f32>>], grads: &mut Grads) {
        let out = &node.value;
        match &node.op {
            Op::Input => {}
            Op::Conv {
                x,
                weight,
                bias,
                spec,
                cols,
            } => {
                let xv = &self.nodes[x.0].value;
                let p = self.store.get(*weight);
                let (cout, kk, n) = (out.c, p.value.len() / out.c, out.plane_len());
                let input_cols: &[f32] = if spec.is_pointwise() { &xv.data } else { cols };
                gemm(cout, n, kk, dy, false, input_cols, true, 1.0, grads.get_mut(*weight));
                if let Some(b) = bias {
                    let gb = grads.get_mut(*b);
                    for co in 0..cout {
                        gb[co] += dy[co * n..(co + 1) * n].iter().sum::<f32>();
                    }
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0f32; kk * n];
                    gemm(kk, cout, n, &p.value, true, dy, false, 0.0, &mut dcols);
                    if spec.is_pointwise() {
                        accumulate(&mut g[x.0], &dcols);
                    } else {
                        let dx = col2im(&dcols, xv, *spec, out.h, out.w);
                        accumulate(&mut g[x.0], &dx);
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let plane = out.plane_len();
                let per = out.len() / groups;
                let gv = self.store.value(*gamma);
                {
                    let dg = grads.get_mut(*gamma);
                    for i in 0..out.len() {
                        dg[i / plane] += dy[i] * xhat[i];
                    }
                }
                {
                    let db = grads.get_mut(*beta);
                    for i in 0..out.len() {
                        db[i / plane] += dy[i];
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0f32; out.len()];
                    for grp in 0..*groups {
                        let range = grp * per..(grp + 1) * per;
                        let (mut s1, mut s2) = (0.0f64, 0.0f64);
                        for i in range.clone() {
                            let dxh = (dy[i] * gv[i / plane]) as f64;
                            s1 += dxh;
                            s2 += dxh * xhat[i] as f64;
                        }
                        let (m1, m2) = (s1 / per as f64, s2 / per as f64);
                        for i in range {
                            let dxh = (dy[i] * gv[i / plane]) as f64;
                            dx[i] = (rstd[grp] as f64 * (dxh - m1 - xhat[i] as f64 * m2)) as f32;
                        }
                    }
                    accumulate(&mut g[x.0], &dx);
                }
            }
            Op::Relu { x } => {
                let dx: Vec<f32> = dy
                    .iter()
                    .zip(&out.data)
                    .map(|(d, o)| if *o > 0.0 { *d } else { 0.0 })
                    .collect();
                accumulate(&mut g[x.0], &dx);
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(&mut g[a.0], dy);
                }
                if self.needs(*b) {
                    accumulate(&mut g[b.0], dy);
                }
            }
            Op::MaxPool { x, argmax } => {
                let xv = &self.nodes[x.0].value;
                let mut dx = vec![0.0f32; xv.len()];
                let n = out.plane_len();
                for (o, &d) in dy.iter().enumerate() {
                    let c = o / n;
                    dx[c * xv.plane_len() + argmax[o] as usize] += d;
                }
                accumulate(&mut g[x.0], &dx);
            }
            Op::Upsample { x } => {
                let xv = &self.nodes[x.0].value;
                let ty = axis_taps(xv.h, out.h);
                let tx = axis_taps(xv.w, out.w);
                let mut dx = vec![0.0f32; xv.len()];
                for c in 0..out.c {
                    let base = c * xv.plane_len();
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let d = dy[(c * out.h + oy) * out.w + ox];
                            dx[base + y0 * xv.w + x0] += d * (1.0 - ly) * (1.0 - lx);
                            dx[base + y0 * xv.w + x1] += d * (1.0 - ly) * lx;
                            dx[base + y1 * xv.w + x0] += d * ly * (1.0 - lx);
                            dx[base + y1 * xv.w + x1] += d * ly * lx;
                        }
                    }
                }
                accumulate(&mut g[x.0], &dx);
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    if self.needs(*p) {
                        accumulate(&mut g[p.0], &dy[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::GlobalAvgPool { x } => {
                let xv = &self.nodes[x.0].value;
                let n = xv.plane_len();
                let mut dx = vec![0.0f32; xv.len()];
                for c in 0..xv.c {
                    dx[c * n..(c + 1) * n].fill(dy[c] / n as f32);
                }
                accumulate(&mut g[x.0], &dx);
            }
            Op::Linear { x, weight, bias } => {
                let xv = &self.nodes[x.0].value;
                let p = self.store.get(*weight);
                let (nout, nin) = (p.shape[0], p.shape[1]);
                gemm(nout, 1, nin, dy, false, &xv.data, false, 1.0, grads.get_mut(*weight));
                for (gb, d) in grads.get_mut(*bias).iter_mut().zip(dy) {
                    *gb += d;
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0f32; nin];
                    gemm(nin, nout, 1, &p.value, true, dy, false, 0.0, &mut dx);
                    accumulate(&mut g[x.0], &dx);
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, d: &[f32]) {
    match slot {
        Some(v) => v.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        None => *slot = Some(d.to_vec()),
    }
}

/// Source taps `(i0, i1, weight of i1)` for each output index of a bilinear resize.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

fn im2col(x: &Tensor, spec: ConvSpec, ho: usize, wo: usize) -> Vec<f32> {
    let k = spec.kernel;
    let n = ho * wo;
    let mut cols = vec![0.0f32; x.c * k * k * n];
    for c in 0..x.c {
        let plane = x.plane(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * n;
                let dst = &mut cols[row..row + n];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                        if ix >= 0 && ix < x.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], x: &Tensor, spec: ConvSpec, ho: usize, wo: usize) -> Vec<f32> {
    let k = spec.kernel;
    let n = ho * wo;
    let mut dx = vec![0.0f32; x.len()];
    for c in 0..x.c {
        let plane = &mut dx[c * x.plane_len()..(c + 1) * x.plane_len()];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * n;
                let src = &cols[row..row + n];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let base = iy as usize * x.w;
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                        if ix >= 0 && ix < x.w as isize {
                            plane[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::super::params::Init;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Loss `Σ out · r` for a fixed random `r`; returns (loss, parameter grads, input grad).
    fn probe(
        store: &ParamStore,
        input: &Tensor,
        r: &Tensor,
        build: &dyn Fn(&mut Graph, Var) -> Var,
    ) -> (f64, Grads, Vec<f32>) {
        let mut g = Graph::training(store);
        let x = g.input_with_grad(input.clone());
        let y = build(&mut g, x);
        let loss = g
            .value(y)
            .data
            .iter()
            .zip(&r.data)
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        let mut grads = Grads::zeros_like(store);
        let node_grads = g.backward(vec![(y, r.clone())], &mut grads);
        let dx = node_grads[x.0].clone().unwrap_or_else(|| vec![0.0; input.len()]);
        (loss, grads, dx)
    }

    fn check_gradients(store: &ParamStore, input: &Tensor, build: &dyn Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let shape = {
            let mut g = Graph::inference(store);
            let x = g.input(input.clone());
            let y = build(&mut g, x);
            g.value(y).shape()
        };
        let r = random_tensor(&mut rng, shape[0], shape[1], shape[2]);
        let (_, grads, dx) = probe(store, input, &r, build);
        let eps = 1e-3f32;
        let close = |analytic: f32, numeric: f64, what: &str| {
            let err = (analytic as f64 - numeric).abs();
            assert!(
                err <= 2e-2 * numeric.abs().max(analytic.abs() as f64) + 2e-3,
                "{what}: analytic {analytic} numeric {numeric}"
            );
        };
        for i in (0..input.len()).step_by((input.len() / 17).max(1)) {
            let mut plus = input.clone();
            plus.data[i] += eps;
            let mut minus = input.clone();
            minus.data[i] -= eps;
            let lp = probe(store, &plus, &r, build).0;
            let lm = probe(store, &minus, &r, build).0;
            close(dx[i], (lp - lm) / (2.0 * eps as f64), &format!("input {i}"));
        }
        for (pi, p) in store.params().iter().enumerate() {
            for j in (0..p.value.len()).step_by((p.value.len() / 7).max(1)) {
                let mut s = store.clone();
                s.params_mut()[pi].value[j] += eps;
                let lp = probe(&s, input, &r, build).0;
                s.params_mut()[pi].value[j] -= 2.0 * eps;
                let lm = probe(&s, input, &r, build).0;
                close(
                    grads.data[pi][j],
                    (lp - lm) / (2.0 * eps as f64),
                    &format!("{} [{j}]", p.name),
                );
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spec in [
            ConvSpec::same(3, 1, 1),
            ConvSpec::same(3, 2, 1),
            ConvSpec::same(3, 1, 2),
            ConvSpec::new(1, 1, 0, 1),
            ConvSpec::new(1, 2, 0, 1),
            ConvSpec::same(7, 2, 1),
        ] {
            let mut store = ParamStore::new();
            let k = spec.kernel;
            let w = store.add("w", &[3, 2, k, k], Init::He { fan_in: 2 * k * k }, &mut rng);
            let b = store.add("b", &[3], Init::Uniform { fan_in: 4 }, &mut rng);
            let input = random_tensor(&mut rng, 2, 7, 6);
            check_gradients(&store, &input, &|g, x| g.conv2d(x, w, Some(b), spec));
        }
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let spec = ConvSpec::same(3, 2, 2);
        let w = store.add("w", &[2, 3, 3, 3], Init::He { fan_in: 27 }, &mut rng);
        let x = random_tensor(&mut rng, 3, 9, 8);
        let mut g = Graph::inference(&store);
        let xi = g.input(x.clone());
        let y = g.conv2d(xi, w, None, spec);
        let out = g.value(y).clone();
        let wv = store.value(w);
        for co in 0..2 {
            for oy in 0..out.h {
                for ox in 0..out.w {
                    let mut acc = 0.0f32;
                    for ci in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky * 2) as isize - 2;
                                let ix = (ox * 2 + kx * 2) as isize - 2;
                                if iy >= 0 && iy < 9 && ix >= 0 && ix < 8 {
                                    acc += wv[((co * 3 + ci) * 3 + ky) * 3 + kx] * x.at(ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    assert!((acc - out.at(co, oy, ox)).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn group_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let gamma = store.add("gamma", &[4], Init::Uniform { fan_in: 1 }, &mut rng);
        let beta = store.add("beta", &[4], Init::Uniform { fan_in: 1 }, &mut rng);
        let input = random_tensor(&mut rng, 4, 3, 3);
        check_gradients(&store, &input, &|g, x| g.group_norm(x, gamma, beta, 2));
    }

    #[test]
    fn pooling_resize_concat_and_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let w = store.add("w", &[3, 4], Init::Uniform { fan_in: 4 }, &mut rng);
        let b = store.add("b", &[3], Init::Uniform { fan_in: 4 }, &mut rng);
        let input = random_tensor(&mut rng, 2, 6, 5);
        check_gradients(&store, &input, &|g, x| g.max_pool(x));
        check_gradients(&store, &input, &|g, x| g.upsample(x, 13, 7));
        check_gradients(&store, &input, &|g, x| g.upsample(x, 3, 2));
        check_gradients(&store, &input, &|g, x| {
            let p = g.max_pool(x);
            let u = g.upsample(p, 6, 5);
            let c = g.concat(&[x, u]);
            let s = g.add(x, u);
            let r = g.relu(s);
            let c2 = g.concat(&[c, r]);
            let avg = g.global_avg_pool(c2);
            let _ = avg;
            let pooled = g.global_avg_pool(c);
            g.linear(pooled, w, b)
        });
    }

    #[test]
    fn upsample_of_constant_is_constant_and_identity_resize_is_exact() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _ = store.add("unused", &[1], Init::Constant(0.0), &mut rng);
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::from_vec(1, 2, 2, vec![3.0; 4]));
        let y = g.upsample(x, 16, 16);
        assert!(g.value(y).data.iter().all(|v| (v - 3.0).abs() < 1e-6));
        let t = random_tensor(&mut rng, 2, 5, 4);
        let x2 = g.input(t.clone());
        let y2 = g.upsample(x2, 5, 4);
        assert_eq!(g.value(y2), &t);
    }
}
