//! Layer primitives shared by the networks: parameter contexts, linear and
//! convolution layers, group normalization (plain and z-conditioned), time
//! embeddings, the minibatch standard-deviation feature, and nearest
//! upsampling.
//!
//! Layers are free functions over a [`Ctx`], which lazily wraps entries of a
//! [`ParamSet`] as tape leaves. Parameter creation (`init_*`) and forward
//! functions are paired and must consume the same names; `Ctx::unused_params`
//! lets tests assert the pairing.

use std::cell::RefCell;

use lddgan_core::graph::{Tape, Var};
use lddgan_core::{ConvSpec, Element, ParamSet, RngStream, Tensor};

/// Lazily materialized parameter views for one forward pass.
pub struct Ctx<'a, E: Element> {
    tape: &'a Tape<E>,
    params: &'a ParamSet<E>,
    trainable: bool,
    vars: RefCell<Vec<Option<Var<E>>>>,
}

impl<'a, E: Element> Ctx<'a, E> {
    pub fn new(tape: &'a Tape<E>, params: &'a ParamSet<E>, trainable: bool) -> Self {
        Ctx {
            tape,
            params,
            trainable,
            vars: RefCell::new(vec![None; params.len()]),
        }
    }

    /// Context whose leaves are caller-provided variables (one per
    /// parameter, in set order). Used to differentiate a forward pass with
    /// respect to externally managed inputs, e.g. by the gradient checker.
    pub fn with_vars(tape: &'a Tape<E>, params: &'a ParamSet<E>, vars: Vec<Var<E>>) -> Self {
        assert_eq!(vars.len(), params.len(), "one var per parameter");
        Ctx {
            tape,
            params,
            trainable: true,
            vars: RefCell::new(vars.into_iter().map(Some).collect()),
        }
    }

    pub fn tape(&self) -> &Tape<E> {
        self.tape
    }

    pub fn var(&self, name: &str) -> Var<E> {
        let i = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        let mut vars = self.vars.borrow_mut();
        if vars[i].is_none() {
            let t = self.params.tensor_at(i).clone();
            vars[i] = Some(if self.trainable {
                self.tape.variable(t)
            } else {
                self.tape.constant(t)
            });
        }
        vars[i].clone().unwrap()
    }

    /// Every parameter as a leaf, in set order (materializing any missing).
    pub fn param_vars(&self) -> Vec<Var<E>> {
        for name in self.params.names().to_vec() {
            self.var(&name);
        }
        self.vars
            .borrow()
            .iter()
            .map(|v| v.clone().unwrap())
            .collect()
    }

    /// Names never touched by the forward pass so far.
    pub fn unused_params(&self) -> Vec<String> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(i, _)| self.params.names()[i].clone())
            .collect()
    }
}

/// He-style normal init: std = gain * sqrt(2 / fan_in). Gain 0 zero-fills.
fn init_weight<E: Element>(
    rng: &mut RngStream,
    shape: &[usize],
    fan_in: usize,
    gain: f64,
) -> Tensor<E> {
    if gain == 0.0 {
        return Tensor::zeros(shape);
    }
    let std = gain * (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| E::from_f64(std * rng.normal_f64()))
}

pub fn init_linear<E: Element>(
    ps: &mut ParamSet<E>,
    rng: &mut RngStream,
    name: &str,
    d_in: usize,
    d_out: usize,
    gain: f64,
) {
    ps.insert(
        format!("{name}.w"),
        init_weight(rng, &[d_in, d_out], d_in, gain),
    );
    ps.insert(format!("{name}.b"), Tensor::zeros(&[d_out]));
}

/// `x [N, d_in] -> [N, d_out]`.
pub fn linear<E: Element>(ctx: &Ctx<'_, E>, name: &str, x: &Var<E>) -> Var<E> {
    let w = ctx.var(&format!("{name}.w"));
    let b = ctx.var(&format!("{name}.b"));
    x.matmul(&w).add(&b)
}

pub fn init_conv2d<E: Element>(
    ps: &mut ParamSet<E>,
    rng: &mut RngStream,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    gain: f64,
) {
    let fan_in = c_in * kernel * kernel;
    ps.insert(
        format!("{name}.w"),
        init_weight(rng, &[c_out, c_in, kernel, kernel], fan_in, gain),
    );
    ps.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
}

/// `x [N, c_in, H, W] -> [N, c_out, OH, OW]` via patch unfolding.
pub fn conv2d<E: Element>(
    ctx: &Ctx<'_, E>,
    name: &str,
    x: &Var<E>,
    stride: usize,
    pad: usize,
) -> Var<E> {
    let w = ctx.var(&format!("{name}.w"));
    let b = ctx.var(&format!("{name}.b"));
    let ws = w.shape();
    let (c_out, c_in, kernel) = (ws[0], ws[1], ws[2]);
    let xs = x.shape();
    assert_eq!(xs[1], c_in, "conv2d '{name}' channel mismatch");
    let spec = ConvSpec {
        batch: xs[0],
        channels: c_in,
        height: xs[2],
        width: xs[3],
        kernel_h: kernel,
        kernel_w: kernel,
        stride,
        pad,
    };
    let (oh, ow) = (spec.out_height(), spec.out_width());
    let cols = x.im2col(spec);
    let wm = w.reshape(&[c_out, c_in * kernel * kernel]).t();
    let y = cols.matmul(&wm).add(&b);
    y.reshape(&[xs[0], oh, ow, c_out]).permute(&[0, 3, 1, 2])
}

/// Shape that aligns a per-channel vector against rank-2 `[N, C]` or
/// rank-4 `[N, C, H, W]` activations.
fn channel_shape(rank: usize, n: usize, c: usize) -> Vec<usize> {
    match rank {
        2 => vec![n, c],
        4 => vec![n, c, 1, 1],
        r => panic!("unsupported activation rank {r}"),
    }
}

/// Per-group standardization: zero mean, unit variance over each group's
/// channels (and any spatial extent). No affine part.
pub fn group_normalize<E: Element>(x: &Var<E>, groups: usize, eps: f64) -> Var<E> {
    let shape = x.shape();
    let n = shape[0];
    let c = shape[1];
    let g = groups.min(c);
    assert_eq!(c % g, 0, "channels {c} not divisible by groups {g}");
    let rest: usize = shape[2..].iter().product();
    let grouped = x.reshape(&[n, g, (c / g) * rest]);
    let mean = grouped.mean_axis_keep(2);
    let centered = grouped.sub(&mean);
    let var = centered.square().mean_axis_keep(2);
    let normalized = centered.div(&var.add_scalar(eps).sqrt());
    normalized.reshape(&shape)
}

pub fn init_adaptive_group_norm<E: Element>(
    ps: &mut ParamSet<E>,
    rng: &mut RngStream,
    name: &str,
    z_embed_dim: usize,
    channels: usize,
) {
    // Zero-initialized heads make the layer start as plain normalization.
    init_linear(ps, rng, &format!("{name}.scale"), z_embed_dim, channels, 0.0);
    init_linear(ps, rng, &format!("{name}.shift"), z_embed_dim, channels, 0.0);
}

/// Group normalization whose affine part is predicted from the mapped
/// latent code: `out = normalized * (1 + s(z)) + b(z)`.
pub fn adaptive_group_norm<E: Element>(
    ctx: &Ctx<'_, E>,
    name: &str,
    h: &Var<E>,
    z_embed: &Var<E>,
    groups: usize,
) -> Var<E> {
    let shape = h.shape();
    let (n, c) = (shape[0], shape[1]);
    let normalized = group_normalize(h, groups, 1e-5);
    let target = channel_shape(shape.len(), n, c);
    let s = linear(ctx, &format!("{name}.scale"), z_embed).reshape(&target);
    let b = linear(ctx, &format!("{name}.shift"), z_embed).reshape(&target);
    normalized.mul(&s.add_scalar(1.0)).add(&b)
}

pub fn init_norm_affine<E: Element>(ps: &mut ParamSet<E>, name: &str, channels: usize) {
    ps.insert(format!("{name}.w"), Tensor::ones(&[channels]));
    ps.insert(format!("{name}.b"), Tensor::zeros(&[channels]));
}

/// Group normalization with a learned per-channel affine part.
pub fn norm_affine<E: Element>(
    ctx: &Ctx<'_, E>,
    name: &str,
    x: &Var<E>,
    groups: usize,
) -> Var<E> {
    let shape = x.shape();
    let c = shape[1];
    let normalized = group_normalize(x, groups, 1e-5);
    let target = channel_shape(shape.len(), 1, c);
    let w = ctx.var(&format!("{name}.w")).reshape(&target);
    let b = ctx.var(&format!("{name}.b")).reshape(&target);
    normalized.mul(&w).add(&b)
}

/// Sinusoidal position features for integer timesteps, `[N, dim]`.
pub fn sinusoidal_embed<E: Element>(ts: &[usize], dim: usize) -> Tensor<E> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / (half.max(2) - 1) as f64).exp();
            data.push(E::from_f64((t as f64 * freq).sin()));
            data.push(E::from_f64((t as f64 * freq).cos()));
        }
    }
    Tensor::from_vec(&[ts.len(), dim], data).unwrap()
}

pub fn init_time_mlp<E: Element>(
    ps: &mut ParamSet<E>,
    rng: &mut RngStream,
    name: &str,
    dim: usize,
) {
    init_linear(ps, rng, &format!("{name}.fc0"), dim, dim, 1.0);
    init_linear(ps, rng, &format!("{name}.fc1"), dim, dim, 1.0);
}

/// Learned transform of the sinusoidal features shared by all blocks.
pub fn time_embed<E: Element>(ctx: &Ctx<'_, E>, name: &str, ts: &[usize], dim: usize) -> Var<E> {
    let base = ctx.tape().constant(sinusoidal_embed(ts, dim));
    let h = linear(ctx, &format!("{name}.fc0"), &base).swish();
    linear(ctx, &format!("{name}.fc1"), &h)
}

/// Append one channel holding the batch-wide feature standard deviation.
///
/// The deviation is shifted so a batch of identical samples contributes an
/// exactly-zero channel while staying differentiable there.
pub fn minibatch_std<E: Element>(x: &Var<E>) -> Var<E> {
    const EPS: f64 = 1e-6;
    let shape = x.shape();
    let n = shape[0];
    let mean = x.mean_axis_keep(0);
    let var = x.sub(&mean).square().mean_axis_keep(0);
    let std = var.add_scalar(EPS).sqrt().add_scalar(-EPS.sqrt());
    let avg = std.mean_all();
    let mut target = shape.clone();
    target[1] = 1;
    let ones = vec![1usize; shape.len()];
    let channel = avg.reshape(&ones).expand(&target);
    x.tape().concat(&[x, &channel], 1)
}

/// Nearest-neighbor 2x upsampling of `[N, C, H, W]`.
pub fn upsample_nearest_2x<E: Element>(x: &Var<E>) -> Var<E> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    x.reshape(&[n, c, h, 1, w, 1])
        .expand(&[n, c, h, 2, w, 2])
        .reshape(&[n, c, 2 * h, 2 * w])
}
