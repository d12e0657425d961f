//! The conditional score network `S_θ(x^l, condition, l)`.
//!
//! A 1-D convolutional encoder-decoder over the window's time axis. The
//! diffused window and the (zero-padded) condition are stacked as input
//! channels; a Gaussian-Fourier embedding of `l` is added inside every
//! residual block. The network predicts the injected noise `ε̂`, and the
//! score is returned as `-ε̂ / std(l)`.

mod act;
mod checkpoint;
mod params;
mod tape;

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, Normal, StandardNormal};

pub use act::Act;
pub use checkpoint::{load, save, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{GradientSet, ParamId, ParamSpec, ParamStore};
use tape::{NodeId, Tape};

use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::sde::SdeSchedule;

/// Standard deviation of the Fourier-feature frequencies.
pub const FOURIER_SCALE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreNetConfig {
    /// Window offset; sequences have `omega + 1` rows.
    pub omega: usize,
    /// Feature dimension `m`.
    pub dim: usize,
    pub n_layer: usize,
    pub n_resnet: usize,
    pub channel_width: usize,
    pub time_embed_dim: usize,
    pub seed: u64,
}

impl ScoreNetConfig {
    pub fn new(omega: usize, dim: usize) -> Self {
        Self {
            omega,
            dim,
            n_layer: 3,
            n_resnet: 1,
            channel_width: 32,
            time_embed_dim: 32,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.omega == 0 || self.dim == 0 || self.channel_width == 0 || self.time_embed_dim == 0 {
            return bad("network dimensions must be positive".into());
        }
        if !(2..=4).contains(&self.n_layer) {
            return bad(format!("n_layer {} outside 2..=4", self.n_layer));
        }
        if !(1..=4).contains(&self.n_resnet) {
            return bad(format!("n_resnet {} outside 1..=4", self.n_resnet));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return bad("time_embed_dim must be even".into());
        }
        if !self.channel_width.is_multiple_of(4) {
            return bad("channel_width must be a multiple of 4".into());
        }
        Ok(())
    }

    /// Rows per window (`omega + 1`).
    pub fn seq_len(&self) -> usize {
        self.omega + 1
    }

    /// Elements per window.
    pub fn window_numel(&self) -> usize {
        self.seq_len() * self.dim
    }

    fn level_lens(&self) -> Vec<usize> {
        let mut lens = vec![self.seq_len()];
        for _ in 1..self.n_layer {
            let prev = *lens.last().unwrap();
            lens.push((prev - 1) / 2 + 1);
        }
        lens
    }
}

fn groups_for(channels: usize) -> usize {
    let target = (channels / 4).clamp(1, 32);
    (1..=target).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Dense,
    temb: Dense,
    norm2: Norm,
    conv2: Dense,
    skip: Option<Dense>,
}

#[derive(Debug, Clone)]
struct Layout {
    temb0: Dense,
    temb1: Dense,
    conv_in: Dense,
    enc: Vec<Vec<ResBlock>>,
    down: Vec<Dense>,
    mid: ResBlock,
    up: Vec<Dense>,
    dec: Vec<Vec<ResBlock>>,
    norm_out: Norm,
    conv_out: Dense,
    lens: Vec<usize>,
}

struct Builder<'a> {
    params: ParamStore,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn dense(&mut self, name: &str, c_out: usize, c_in: usize, kernel: usize, zero: bool) -> Dense {
        let fan_in = (c_in * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let n = c_out * c_in * kernel;
        let w = if zero {
            vec![0.0; n]
        } else {
            (0..n).map(|_| normal.sample(self.rng)).collect()
        };
        Dense {
            w: self.params.add(format!("{name}.weight"), &[c_out, c_in, kernel], w),
            b: self.params.add(format!("{name}.bias"), &[c_out], vec![0.0; c_out]),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.params.add(format!("{name}.gamma"), &[c], vec![1.0; c]),
            beta: self.params.add(format!("{name}.beta"), &[c], vec![0.0; c]),
            groups: groups_for(c),
        }
    }

    fn resblock(&mut self, name: &str, c_in: usize, c_out: usize, temb: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), c_in),
            conv1: self.dense(&format!("{name}.conv1"), c_out, c_in, 3, false),
            temb: self.dense(&format!("{name}.temb"), c_out, temb, 1, false),
            norm2: self.norm(&format!("{name}.norm2"), c_out),
            conv2: self.dense(&format!("{name}.conv2"), c_out, c_out, 3, false),
            skip: (c_in != c_out).then(|| self.dense(&format!("{name}.skip"), c_out, c_in, 1, false)),
        }
    }
}

/// The parameterised score model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetwork {
    config: ScoreNetConfig,
    schedule: SdeSchedule,
    params: ParamStore,
    freqs: Vec<f64>,
    layout: LayoutHandle,
}

// Layout carries only ids; equality is decided by config and parameters.
#[derive(Debug, Clone)]
struct LayoutHandle(Layout);

impl PartialEq for LayoutHandle {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// One recorded evaluation over a batch, reusable for backward and
/// forward-mode passes.
pub struct Pass<'n> {
    net: &'n ScoreNetwork,
    tape: Tape<'n>,
    input: NodeId,
    output: NodeId,
    /// `1 / std(l_b)` per batch element.
    inv_std: Vec<f64>,
    scores: Vec<f64>,
}

impl ScoreNetwork {
    /// Deterministic initialisation from `config.seed`.
    pub fn init(config: ScoreNetConfig, schedule: SdeSchedule) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, Stream::Init);
        let half = config.time_embed_dim / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); FOURIER_SCALE * z })
            .collect();
        let w = config.channel_width;
        let m = config.dim;
        let mut b = Builder {
            params: ParamStore::new(),
            rng: &mut rng,
        };
        let temb0 = b.dense("time.dense0", w, config.time_embed_dim, 1, false);
        let temb1 = b.dense("time.dense1", w, w, 1, false);
        let conv_in = b.dense("conv_in", w, 2 * m, 3, false);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for k in 0..config.n_layer {
            enc.push(
                (0..config.n_resnet)
                    .map(|r| b.resblock(&format!("enc.{k}.res.{r}"), w, w, w))
                    .collect(),
            );
            if k + 1 < config.n_layer {
                down.push(b.dense(&format!("enc.{k}.down"), w, w, 3, false));
            }
        }
        let mid = b.resblock("mid", w, w, w);
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for k in (0..config.n_layer).rev() {
            if k + 1 < config.n_layer {
                up.push(b.dense(&format!("dec.{k}.up"), w, w, 3, false));
            }
            dec.push(
                (0..config.n_resnet)
                    .map(|r| {
                        let c_in = if r == 0 { 2 * w } else { w };
                        b.resblock(&format!("dec.{k}.res.{r}"), c_in, w, w)
                    })
                    .collect(),
            );
        }
        let norm_out = b.norm("norm_out", w);
        let conv_out = b.dense("conv_out", m, w, 3, true);
        let params = b.params;
        Ok(Self {
            config,
            schedule,
            params,
            freqs,
            layout: LayoutHandle(Layout {
                temb0,
                temb1,
                conv_in,
                enc,
                down,
                mid,
                up,
                dec,
                norm_out,
                conv_out,
                lens: config.level_lens(),
            }),
        })
    }

    pub fn config(&self) -> &ScoreNetConfig {
        &self.config
    }

    pub fn schedule(&self) -> &SdeSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Gaussian-Fourier features `[sin(2π f_i l)…, cos(2π f_i l)…]`.
    pub fn time_embedding(&self, l: f64) -> Vec<f64> {
        fourier_features(l, &self.freqs)
    }

    /// Scale from predicted noise to score; `l` is floored at `t_eps`.
    fn inv_std(&self, l: f64) -> f64 {
        1.0 / self.schedule.moments(l.max(self.schedule.t_eps)).std
    }

    fn check_inputs(&self, x: &[f64], conds: &[Option<&[f64]>], ls: &[f64]) -> Result<()> {
        let n = self.config.window_numel();
        let nc = self.config.omega * self.config.dim;
        if ls.is_empty() || x.len() != ls.len() * n || conds.len() != ls.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} windows of {} elements", ls.len(), n),
                got: format!("{} elements, {} conditions", x.len(), conds.len()),
            });
        }
        if let Some(c) = conds.iter().flatten().find(|c| c.len() != nc) {
            return Err(Error::ShapeMismatch {
                expected: format!("condition of {nc} elements"),
                got: format!("{}", c.len()),
            });
        }
        if let Some(&l) = ls.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::TimeOutOfRange(l));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score network input".into()));
        }
        if conds.iter().flatten().any(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("score network condition".into()));
        }
        Ok(())
    }

    /// Records a batched evaluation. `x` holds `B` windows of `(ω+1) x m`
    /// row-major values; `conds[b]` is the `ω x m` condition of window `b`,
    /// or `None` for the all-zeros condition (never read).
    pub fn trace<'n>(&'n self, x: &[f64], conds: &[Option<&[f64]>], ls: &[f64]) -> Result<Pass<'n>> {
        self.check_inputs(x, conds, ls)?;
        let cfg = &self.config;
        let (bsz, len, m, omega) = (ls.len(), cfg.seq_len(), cfg.dim, cfg.omega);
        let lay = &self.layout.0;
        let mut tape = Tape::new(&self.params);

        let half = self.freqs.len();
        let mut feats = Act::zeros(2 * half, bsz, 1);
        for (b, &l) in ls.iter().enumerate() {
            for (i, v) in fourier_features(l, &self.freqs).into_iter().enumerate() {
                feats.data[i * bsz + b] = v;
            }
        }
        let feats = tape.input(feats);
        let t = tape.conv(feats, lay.temb0.w, lay.temb0.b, 1, 1, "time.dense0");
        let t = tape.silu(t, "time.act0");
        let t = tape.conv(t, lay.temb1.w, lay.temb1.b, 1, 1, "time.dense1");
        let temb = tape.silu(t, "time.act1");

        let mut xin = Act::zeros(2 * m, bsz, len);
        for b in 0..bsz {
            for i in 0..len {
                for j in 0..m {
                    let at = xin.idx(j, b, i);
                    xin.data[at] = x[(b * len + i) * m + j];
                }
            }
            if let Some(c) = conds[b] {
                for i in 0..omega {
                    for j in 0..m {
                        let at = xin.idx(m + j, b, i);
                        xin.data[at] = c[i * m + j];
                    }
                }
            }
        }
        let input = tape.input(xin);

        let mut h = tape.conv(input, lay.conv_in.w, lay.conv_in.b, 3, 1, "conv_in");
        let mut skips = Vec::with_capacity(cfg.n_layer);
        for k in 0..cfg.n_layer {
            for blk in &lay.enc[k] {
                h = resblock(&mut tape, blk, h, temb, "enc.res");
            }
            skips.push(h);
            if k + 1 < cfg.n_layer {
                h = tape.conv(h, lay.down[k].w, lay.down[k].b, 3, 2, "enc.down");
            }
        }
        h = resblock(&mut tape, &lay.mid, h, temb, "mid");
        for (step, k) in (0..cfg.n_layer).rev().enumerate() {
            if k + 1 < cfg.n_layer {
                let up = &lay.up[step - 1];
                h = tape.upsample(h, lay.lens[k], "dec.upsample");
                h = tape.conv(h, up.w, up.b, 3, 1, "dec.up");
            }
            h = tape.concat(h, skips[k], "dec.concat");
            for blk in &lay.dec[step] {
                h = resblock(&mut tape, blk, h, temb, "dec.res");
            }
        }
        let h = tape.group_norm(h, lay.norm_out.gamma, lay.norm_out.beta, lay.norm_out.groups, "norm_out");
        let h = tape.silu(h, "act_out");
        let output = tape.conv(h, lay.conv_out.w, lay.conv_out.b, 3, 1, "conv_out");

        let inv_std: Vec<f64> = ls.iter().map(|&l| self.inv_std(l)).collect();
        let eps = tape.value(output);
        let mut scores = vec![0.0; bsz * len * m];
        for b in 0..bsz {
            for i in 0..len {
                for j in 0..m {
                    scores[(b * len + i) * m + j] = -eps.data[eps.idx(j, b, i)] * inv_std[b];
                }
            }
        }
        Ok(Pass {
            net: self,
            tape,
            input,
            output,
            inv_std,
            scores,
        })
    }

    /// Score estimate for one window; `condition = None` is the zero condition.
    pub fn forward(&self, x_l: ArrayView2<f64>, condition: Option<ArrayView2<f64>>, l: f64) -> Result<Array2<f64>> {
        let (len, m) = (self.config.seq_len(), self.config.dim);
        if x_l.dim() != (len, m) {
            return Err(Error::ShapeMismatch {
                expected: format!("{len}x{m} window"),
                got: format!("{}x{}", x_l.nrows(), x_l.ncols()),
            });
        }
        if let Some(c) = &condition {
            if c.dim() != (self.config.omega, m) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{m} condition", self.config.omega),
                    got: format!("{}x{}", c.nrows(), c.ncols()),
                });
            }
        }
        let x: Vec<f64> = x_l.iter().copied().collect();
        let c: Option<Vec<f64>> = condition.map(|c| c.iter().copied().collect());
        let scores = self.forward_batch(&x, &[c.as_deref()], &[l])?;
        Ok(Array2::from_shape_vec((len, m), scores).expect("shape checked"))
    }

    /// Batched scores, flat `B x (ω+1) x m`.
    pub fn forward_batch(&self, x: &[f64], conds: &[Option<&[f64]>], ls: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x, conds, ls)?.scores)
    }

    /// Gradient of `<cotangent, S_θ(x, cond, l)>` with respect to every
    /// parameter.
    pub fn backward(&self, x: &[f64], conds: &[Option<&[f64]>], ls: &[f64], cotangent: &[f64]) -> Result<GradientSet> {
        let pass = self.trace(x, conds, ls)?;
        let mut grads = GradientSet::zeros_like(&self.params);
        pass.backward(cotangent, &mut grads)?;
        Ok(grads)
    }
}

impl Pass<'_> {
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn into_scores(self) -> Vec<f64> {
        self.scores
    }

    pub fn batch(&self) -> usize {
        self.inv_std.len()
    }

    /// Accumulates parameter gradients of `<cotangent, scores>` into `grads`.
    pub fn backward(&self, cotangent: &[f64], grads: &mut GradientSet) -> Result<()> {
        if cotangent.len() != self.scores.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} cotangent elements", self.scores.len()),
                got: format!("{}", cotangent.len()),
            });
        }
        let (len, m) = (self.net.config.seq_len(), self.net.config.dim);
        let bsz = self.batch();
        let mut seed = Act::zeros(m, bsz, len);
        for b in 0..bsz {
            for i in 0..len {
                for j in 0..m {
                    let at = seed.idx(j, b, i);
                    seed.data[at] = -cotangent[(b * len + i) * m + j] * self.inv_std[b];
                }
            }
        }
        match self.tape.backward(self.output, seed, grads) {
            Some(layer) => Err(Error::NonFinite(format!("gradient at layer {layer}"))),
            None => Ok(()),
        }
    }

    /// Directional derivatives of the scores with respect to the diffused
    /// input. `tangents` holds `k` directions per batch element, direction
    /// `j` of element `b` at flat block `j * B + b`; the result has the same
    /// layout.
    pub fn jvp(&self, tangents: &[f64], k: usize) -> Vec<f64> {
        let (len, m) = (self.net.config.seq_len(), self.net.config.dim);
        let bsz = self.batch();
        let kb = k * bsz;
        assert_eq!(tangents.len(), kb * len * m, "tangent layout");
        let mut tin = Act::zeros(2 * m, kb, len);
        for tb in 0..kb {
            for i in 0..len {
                for j in 0..m {
                    let at = tin.idx(j, tb, i);
                    tin.data[at] = tangents[(tb * len + i) * m + j];
                }
            }
        }
        let tout = self
            .tape
            .jvp(self.input, tin, self.output)
            .expect("output depends on input");
        let mut out = vec![0.0; kb * len * m];
        for tb in 0..kb {
            let s = -self.inv_std[tb % bsz];
            for i in 0..len {
                for j in 0..m {
                    out[(tb * len + i) * m + j] = s * tout.data[tout.idx(j, tb, i)];
                }
            }
        }
        out
    }
}

fn resblock(tape: &mut Tape<'_>, blk: &ResBlock, x: NodeId, temb: NodeId, label: &'static str) -> NodeId {
    let h = tape.group_norm(x, blk.norm1.gamma, blk.norm1.beta, blk.norm1.groups, label);
    let h = tape.silu(h, label);
    let h = tape.conv(h, blk.conv1.w, blk.conv1.b, 3, 1, label);
    let t = tape.conv(temb, blk.temb.w, blk.temb.b, 1, 1, label);
    let h = tape.add_broadcast(h, t, label);
    let h = tape.group_norm(h, blk.norm2.gamma, blk.norm2.beta, blk.norm2.groups, label);
    let h = tape.silu(h, label);
    let h = tape.conv(h, blk.conv2.w, blk.conv2.b, 3, 1, label);
    let skip = match &blk.skip {
        Some(d) => tape.conv(x, d.w, d.b, 1, 1, label),
        None => x,
    };
    tape.add(h, skip, label)
}

/// `[sin(2π f_i l)…, cos(2π f_i l)…]` for the given frequencies.
pub fn fourier_features(l: f64, freqs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * freqs.len());
    out.extend(freqs.iter().map(|f| (2.0 * PI * f * l).sin()));
    out.extend(freqs.iter().map(|f| (2.0 * PI * f * l).cos()));
    out
}
