//! A small recording tape over [`Act`] tensors.
//!
//! Building the network on a tape caches everything the backward pass needs.
//! The same tape serves forward-mode products: [`Tape::jvp`] pushes `K`
//! tangent directions per batch element through the recorded primal, so a
//! full Jacobian-trace costs one batched pass.

use super::act::{gemm, Act};
use super::params::{GradientSet, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

const GN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Input,
    Conv {
        input: NodeId,
        weight: ParamId,
        bias: ParamId,
        kernel: usize,
        stride: usize,
        cols: Vec<f64>,
    },
    GroupNorm {
        input: NodeId,
        gamma: ParamId,
        beta: ParamId,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Silu {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// `a[c][b][i] + t[c][b][0]`
    AddBroadcast {
        a: NodeId,
        t: NodeId,
    },
    /// Nearest-neighbour doubling, cropped to the requested length.
    Upsample {
        input: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Act,
    label: &'static str,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn out_len(len: usize, kernel: usize, stride: usize) -> usize {
    let pad = (kernel - 1) / 2;
    (len + 2 * pad - kernel) / stride + 1
}

/// Unfolds `x` into `[c_in * kernel][b * out_len]` columns.
fn im2col(x: &Act, kernel: usize, stride: usize) -> (Vec<f64>, usize) {
    let pad = (kernel - 1) / 2;
    let lo = out_len(x.len, kernel, stride);
    let ncols = x.b * lo;
    let mut cols = vec![0.0; x.c * kernel * ncols];
    for ci in 0..x.c {
        for kk in 0..kernel {
            let row = &mut cols[(ci * kernel + kk) * ncols..(ci * kernel + kk + 1) * ncols];
            for b in 0..x.b {
                let src = &x.data[x.idx(ci, b, 0)..x.idx(ci, b, 0) + x.len];
                for o in 0..lo {
                    let pos = (o * stride + kk) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < x.len {
                        row[b * lo + o] = src[pos as usize];
                    }
                }
            }
        }
    }
    (cols, lo)
}

fn col2im(dcols: &[f64], c: usize, b: usize, len: usize, kernel: usize, stride: usize) -> Act {
    let pad = (kernel - 1) / 2;
    let lo = out_len(len, kernel, stride);
    let ncols = b * lo;
    let mut dx = Act::zeros(c, b, len);
    for ci in 0..c {
        for kk in 0..kernel {
            let row = &dcols[(ci * kernel + kk) * ncols..(ci * kernel + kk + 1) * ncols];
            for bb in 0..b {
                let base = dx.idx(ci, bb, 0);
                for o in 0..lo {
                    let pos = (o * stride + kk) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < len {
                        dx.data[base + pos as usize] += row[bb * lo + o];
                    }
                }
            }
        }
    }
    dx
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn add_into(acc: &mut Option<Act>, g: Act) {
    match acc {
        Some(a) => a.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y),
        None => *acc = Some(g),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Act, label: &'static str) -> NodeId {
        self.nodes.push(Node { op, value, label });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Act {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, value: Act) -> NodeId {
        self.push(Op::Input, value, "input")
    }

    /// 1-D convolution with zero "same" padding; `kernel` must be odd.
    /// A kernel-1 convolution over length-1 inputs is a dense layer.
    pub fn conv(
        &mut self,
        input: NodeId,
        weight: ParamId,
        bias: ParamId,
        kernel: usize,
        stride: usize,
        label: &'static str,
    ) -> NodeId {
        let x = &self.nodes[input.0].value;
        let shape = &self.params.spec(weight).shape;
        let (c_out, c_in) = (shape[0], shape[1]);
        debug_assert_eq!(shape[2], kernel, "{label}");
        debug_assert_eq!(x.c, c_in, "{label}");
        let (cols, lo) = im2col(x, kernel, stride);
        let mut out = Act::zeros(c_out, x.b, lo);
        let n = out.cols();
        let bvec = self.params.get(bias);
        for co in 0..c_out {
            out.data[co * n..(co + 1) * n].fill(bvec[co]);
        }
        gemm(
            c_out,
            c_in * kernel,
            n,
            self.params.get(weight),
            false,
            &cols,
            false,
            1.0,
            &mut out.data,
        );
        self.push(
            Op::Conv {
                input,
                weight,
                bias,
                kernel,
                stride,
                cols,
            },
            out,
            label,
        )
    }

    pub fn group_norm(
        &mut self,
        input: NodeId,
        gamma: ParamId,
        beta: ParamId,
        groups: usize,
        label: &'static str,
    ) -> NodeId {
        let x = &self.nodes[input.0].value;
        let cg = x.c / groups;
        let n = (cg * x.len) as f64;
        let mut xhat = vec![0.0; x.data.len()];
        let mut inv_std = vec![0.0; groups * x.b];
        let mut out = Act::zeros(x.c, x.b, x.len);
        let (gm, bt) = (self.params.get(gamma), self.params.get(beta));
        for g in 0..groups {
            for b in 0..x.b {
                let mut mean = 0.0;
                for c in g * cg..(g + 1) * cg {
                    let s = x.idx(c, b, 0);
                    mean += x.data[s..s + x.len].iter().sum::<f64>();
                }
                mean /= n;
                let mut var = 0.0;
                for c in g * cg..(g + 1) * cg {
                    let s = x.idx(c, b, 0);
                    var += x.data[s..s + x.len].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                }
                var /= n;
                let inv = 1.0 / (var + GN_EPS).sqrt();
                inv_std[g * x.b + b] = inv;
                for c in g * cg..(g + 1) * cg {
                    let s = x.idx(c, b, 0);
                    for i in s..s + x.len {
                        let h = (x.data[i] - mean) * inv;
                        xhat[i] = h;
                        out.data[i] = gm[c] * h + bt[c];
                    }
                }
            }
        }
        self.push(
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            out,
            label,
        )
    }

    pub fn silu(&mut self, input: NodeId, label: &'static str) -> NodeId {
        let x = &self.nodes[input.0].value;
        let mut out = x.clone();
        out.data.iter_mut().for_each(|v| *v *= sigmoid(*v));
        self.push(Op::Silu { input }, out, label)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, label: &'static str) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert!(va.same_shape(vb), "{label}");
        let mut out = va.clone();
        out.data.iter_mut().zip(&vb.data).for_each(|(x, y)| *x += y);
        self.push(Op::Add { a, b }, out, label)
    }

    pub fn add_broadcast(&mut self, a: NodeId, t: NodeId, label: &'static str) -> NodeId {
        let (va, vt) = (&self.nodes[a.0].value, &self.nodes[t.0].value);
        debug_assert_eq!((va.c, va.b, vt.len), (vt.c, vt.b, 1), "{label}");
        let mut out = va.clone();
        for c in 0..va.c {
            for b in 0..va.b {
                let add = vt.data[vt.idx(c, b, 0)];
                let s = out.idx(c, b, 0);
                out.data[s..s + va.len].iter_mut().for_each(|v| *v += add);
            }
        }
        self.push(Op::AddBroadcast { a, t }, out, label)
    }

    pub fn upsample(&mut self, input: NodeId, len: usize, label: &'static str) -> NodeId {
        let x = &self.nodes[input.0].value;
        debug_assert!(len <= 2 * x.len && len >= x.len);
        let out = upsample_act(x, len);
        self.push(Op::Upsample { input }, out, label)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, label: &'static str) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!((va.b, va.len), (vb.b, vb.len), "{label}");
        let mut out = Act::zeros(va.c + vb.c, va.b, va.len);
        out.data[..va.data.len()].copy_from_slice(&va.data);
        out.data[va.data.len()..].copy_from_slice(&vb.data);
        self.push(Op::Concat { a, b }, out, label)
    }

    /// Reverse pass from `output` with cotangent `seed`, accumulating
    /// parameter gradients into `grads`. Returns the label of the first node
    /// whose incoming gradient is non-finite, if any.
    pub fn backward(&self, output: NodeId, seed: Act, grads: &mut GradientSet) -> Option<&'static str> {
        let mut adj: Vec<Option<Act>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if g.data.iter().any(|v| !v.is_finite()) {
                return Some(node.label);
            }
            match &node.op {
                Op::Input => {}
                Op::Conv {
                    input,
                    weight,
                    bias,
                    kernel,
                    stride,
                    cols,
                } => {
                    let x = &self.nodes[input.0].value;
                    let (c_out, n) = (g.c, g.cols());
                    let k = x.c * kernel;
                    gemm(c_out, n, k, &g.data, false, cols, true, 1.0, grads.get_mut(*weight));
                    let db = grads.get_mut(*bias);
                    for co in 0..c_out {
                        db[co] += g.data[co * n..(co + 1) * n].iter().sum::<f64>();
                    }
                    if needs_grad(&self.nodes, *input) {
                        let mut dcols = vec![0.0; k * n];
                        gemm(k, c_out, n, self.params.get(*weight), true, &g.data, false, 0.0, &mut dcols);
                        add_into(&mut adj[input.0], col2im(&dcols, x.c, x.b, x.len, *kernel, *stride));
                    }
                }
                Op::GroupNorm {
                    input,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    inv_std,
                } => {
                    let gm = self.params.get(*gamma);
                    {
                        let dg = grads.get_mut(*gamma);
                        for c in 0..g.c {
                            let s = g.idx(c, 0, 0);
                            let e = s + g.b * g.len;
                            dg[c] += g.data[s..e].iter().zip(&xhat[s..e]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    {
                        let dbt = grads.get_mut(*beta);
                        for c in 0..g.c {
                            let s = g.idx(c, 0, 0);
                            dbt[c] += g.data[s..s + g.b * g.len].iter().sum::<f64>();
                        }
                    }
                    let cg = g.c / groups;
                    let n = (cg * g.len) as f64;
                    let mut dx = Act::zeros(g.c, g.b, g.len);
                    for grp in 0..*groups {
                        for b in 0..g.b {
                            let (mut m1, mut m2) = (0.0, 0.0);
                            for c in grp * cg..(grp + 1) * cg {
                                let s = g.idx(c, b, 0);
                                for i in s..s + g.len {
                                    let dh = g.data[i] * gm[c];
                                    m1 += dh;
                                    m2 += dh * xhat[i];
                                }
                            }
                            m1 /= n;
                            m2 /= n;
                            let inv = inv_std[grp * g.b + b];
                            for c in grp * cg..(grp + 1) * cg {
                                let s = g.idx(c, b, 0);
                                for i in s..s + g.len {
                                    dx.data[i] = inv * (g.data[i] * gm[c] - m1 - xhat[i] * m2);
                                }
                            }
                        }
                    }
                    add_into(&mut adj[input.0], dx);
                }
                Op::Silu { input } => {
                    let x = &self.nodes[input.0].value;
                    let mut dx = g;
                    dx.data.iter_mut().zip(&x.data).for_each(|(d, xv)| *d *= silu_grad(*xv));
                    add_into(&mut adj[input.0], dx);
                }
                Op::Add { a, b } => {
                    add_into(&mut adj[b.0], g.clone());
                    add_into(&mut adj[a.0], g);
                }
                Op::AddBroadcast { a, t } => {
                    let mut dt = Act::zeros(g.c, g.b, 1);
                    for c in 0..g.c {
                        for b in 0..g.b {
                            let s = g.idx(c, b, 0);
                            dt.data[c * g.b + b] = g.data[s..s + g.len].iter().sum();
                        }
                    }
                    add_into(&mut adj[t.0], dt);
                    add_into(&mut adj[a.0], g);
                }
                Op::Upsample { input } => {
                    let x = &self.nodes[input.0].value;
                    let mut dx = Act::zeros(x.c, x.b, x.len);
                    for c in 0..g.c {
                        for b in 0..g.b {
                            let (so, si) = (g.idx(c, b, 0), dx.idx(c, b, 0));
                            for i in 0..g.len {
                                dx.data[si + i / 2] += g.data[so + i];
                            }
                        }
                    }
                    add_into(&mut adj[input.0], dx);
                }
                Op::Concat { a, b } => {
                    let va = &self.nodes[a.0].value;
                    let split = va.data.len();
                    let ga = Act {
                        c: va.c,
                        b: g.b,
                        len: g.len,
                        data: g.data[..split].to_vec(),
                    };
                    let gb = Act {
                        c: g.c - va.c,
                        b: g.b,
                        len: g.len,
                        data: g.data[split..].to_vec(),
                    };
                    add_into(&mut adj[a.0], ga);
                    add_into(&mut adj[b.0], gb);
                }
            }
        }
        None
    }

    /// Forward-mode pass: `tangent` has batch `k * B` (tangent `j` of batch
    /// element `b` at index `j * B + b`) and seeds node `input`; returns the
    /// tangent of `output`, or `None` if `output` does not depend on `input`.
    pub fn jvp(&self, input: NodeId, tangent: Act, output: NodeId) -> Option<Act> {
        let mut tan: Vec<Option<Act>> = (0..self.nodes.len()).map(|_| None).collect();
        tan[input.0] = Some(tangent);
        for idx in input.0 + 1..=output.0 {
            let node = &self.nodes[idx];
            let t = match &node.op {
                Op::Input => None,
                Op::Conv {
                    input,
                    weight,
                    kernel,
                    stride,
                    ..
                } => tan[input.0].as_ref().map(|t| {
                    let c_out = self.params.spec(*weight).shape[0];
                    let (cols, lo) = im2col(t, *kernel, *stride);
                    let mut out = Act::zeros(c_out, t.b, lo);
                    let n = out.cols();
                    gemm(c_out, t.c * kernel, n, self.params.get(*weight), false, &cols, false, 0.0, &mut out.data);
                    out
                }),
                Op::GroupNorm {
                    input,
                    gamma,
                    groups,
                    xhat,
                    inv_std,
                    ..
                } => tan[input.0].as_ref().map(|t| {
                    let gm = self.params.get(*gamma);
                    let pb = node.value.b;
                    let cg = t.c / groups;
                    let n = (cg * t.len) as f64;
                    let mut out = Act::zeros(t.c, t.b, t.len);
                    for grp in 0..*groups {
                        for tb in 0..t.b {
                            let b = tb % pb;
                            let (mut m1, mut m2) = (0.0, 0.0);
                            for c in grp * cg..(grp + 1) * cg {
                                let (st, sp) = (t.idx(c, tb, 0), node.value.idx(c, b, 0));
                                for i in 0..t.len {
                                    m1 += t.data[st + i];
                                    m2 += t.data[st + i] * xhat[sp + i];
                                }
                            }
                            m1 /= n;
                            m2 /= n;
                            let inv = inv_std[grp * pb + b];
                            for c in grp * cg..(grp + 1) * cg {
                                let (st, sp) = (t.idx(c, tb, 0), node.value.idx(c, b, 0));
                                for i in 0..t.len {
                                    out.data[st + i] = gm[c] * inv * (t.data[st + i] - m1 - xhat[sp + i] * m2);
                                }
                            }
                        }
                    }
                    out
                }),
                Op::Silu { input } => tan[input.0].as_ref().map(|t| {
                    let x = &self.nodes[input.0].value;
                    let mut out = t.clone();
                    for c in 0..t.c {
                        for tb in 0..t.b {
                            let (st, sp) = (t.idx(c, tb, 0), x.idx(c, tb % x.b, 0));
                            for i in 0..t.len {
                                out.data[st + i] *= silu_grad(x.data[sp + i]);
                            }
                        }
                    }
                    out
                }),
                Op::Add { a, b } => match (&tan[a.0], &tan[b.0]) {
                    (Some(ta), Some(tb)) => {
                        let mut out = ta.clone();
                        out.data.iter_mut().zip(&tb.data).for_each(|(x, y)| *x += y);
                        Some(out)
                    }
                    (Some(t), None) | (None, Some(t)) => Some(t.clone()),
                    (None, None) => None,
                },
                Op::AddBroadcast { a, t } => {
                    // tangents through the time path are never seeded
                    debug_assert!(tan[t.0].is_none());
                    tan[a.0].clone()
                }
                Op::Upsample { input } => tan[input.0]
                    .as_ref()
                    .map(|t| upsample_act(t, node.value.len)),
                Op::Concat { a, b } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    match (&tan[a.0], &tan[b.0]) {
                        (None, None) => None,
                        (ta, tb) => {
                            let kb = ta.as_ref().or(tb.as_ref()).map(|t| t.b).unwrap_or(0);
                            let len = va.len;
                            let za;
                            let ta = match ta {
                                Some(t) => t,
                                None => {
                                    za = Act::zeros(va.c, kb, len);
                                    &za
                                }
                            };
                            let zb;
                            let tb = match tb {
                                Some(t) => t,
                                None => {
                                    zb = Act::zeros(vb.c, kb, len);
                                    &zb
                                }
                            };
                            let mut out = Act::zeros(va.c + vb.c, kb, len);
                            out.data[..ta.data.len()].copy_from_slice(&ta.data);
                            out.data[ta.data.len()..].copy_from_slice(&tb.data);
                            Some(out)
                        }
                    }
                }
            };
            tan[idx] = t;
        }
        tan[output.0].take()
    }
}

fn needs_grad(nodes: &[Node], id: NodeId) -> bool {
    !matches!(nodes[id.0].op, Op::Input)
}

fn upsample_act(x: &Act, len: usize) -> Act {
    let mut out = Act::zeros(x.c, x.b, len);
    for c in 0..x.c {
        for b in 0..x.b {
            let (so, si) = (out.idx(c, b, 0), x.idx(c, b, 0));
            for i in 0..len {
                out.data[so + i] = x.data[si + i / 2];
            }
        }
    }
    out
}
