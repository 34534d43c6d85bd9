//! Parameterised building blocks. Each block has an `init_*` function that
//! registers its parameters under a name prefix and a forward function that
//! looks them up from bound [`ParamVars`].

use rand::Rng;

use super::conv::ConvSpec;
use super::graph::{Graph, Var};
use crate::params::{Init, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const GN_EPS: f64 = 1e-5;

/// Largest group count <= 8 dividing `c`.
pub fn groups_for(c: usize) -> usize {
    (1..=8).rev().find(|g| c % g == 0).unwrap_or(1)
}

/// Conv weights `[cout, cin, k...]` plus bias `[cout]`.
pub fn init_conv<R: Rng>(init: &mut Init<'_, R>, name: &str, cout: usize, cin: usize, kernel: &[usize], gain: f64) {
    let mut shape = vec![cout, cin];
    shape.extend_from_slice(kernel);
    let fan_in = cin * kernel.iter().product::<usize>();
    if gain == 0.0 {
        init.fill(format!("{name}.w"), &shape, 0.0);
    } else {
        init.normal(format!("{name}.w"), &shape, fan_in, gain);
    }
    init.fill(format!("{name}.b"), &[cout], 0.0);
}

pub fn conv<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, name: &str, x: Var, spec: ConvSpec) -> Var {
    let w = pv.get(&format!("{name}.w"));
    let b = pv.get(&format!("{name}.b"));
    g.conv(x, w, Some(b), spec)
}

pub fn init_norm<R: Rng>(init: &mut Init<'_, R>, name: &str, c: usize) {
    init.fill(format!("{name}.g"), &[c], 1.0);
    init.fill(format!("{name}.b"), &[c], 0.0);
}

pub fn norm<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, name: &str, x: Var) -> Var {
    let c = g.shape(x)[0];
    let gamma = pv.get(&format!("{name}.g"));
    let beta = pv.get(&format!("{name}.b"));
    g.group_norm(x, gamma, beta, groups_for(c), T::c(GN_EPS))
}

pub fn init_linear<R: Rng>(init: &mut Init<'_, R>, name: &str, out: usize, inp: usize, gain: f64) {
    if gain == 0.0 {
        init.fill(format!("{name}.w"), &[out, inp], 0.0);
    } else {
        init.normal(format!("{name}.w"), &[out, inp], inp, gain);
    }
    init.fill(format!("{name}.b"), &[out], 0.0);
}

/// `W x + b` for a vector `x` of any shape with `inp` elements; returns `[out]`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, name: &str, x: Var) -> Var {
    let w = pv.get(&format!("{name}.w"));
    let b = pv.get(&format!("{name}.b"));
    let n = g.value(x).numel();
    let col = g.reshape(x, &[n, 1]);
    let y = g.matmul(w, col, false, false);
    let y = g.add_chan(y, b);
    let out = g.shape(y)[0];
    g.reshape(y, &[out])
}

pub const SIN_MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal embedding of a (possibly fractional) timestep.
pub fn sinusoidal_embedding<T: Scalar>(t: f64, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut v = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(SIN_MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        v[i] = T::c((t * freq).sin());
        v[half + i] = T::c((t * freq).cos());
    }
    Tensor::from_vec(&[dim], v).unwrap()
}

/// Residual block with FiLM scale-shift conditioning from an embedding.
pub fn init_resblock<R: Rng>(init: &mut Init<'_, R>, name: &str, cin: usize, cout: usize, emb_dim: usize, kernel: &[usize]) {
    init_norm(init, &format!("{name}.norm1"), cin);
    init_conv(init, &format!("{name}.conv1"), cout, cin, kernel, 1.0);
    if emb_dim > 0 {
        init_linear(init, &format!("{name}.film"), 2 * cout, emb_dim, 1.0);
    }
    init_norm(init, &format!("{name}.norm2"), cout);
    init_conv(init, &format!("{name}.conv2"), cout, cout, kernel, 1.0);
    if cin != cout {
        let ones = vec![1; kernel.len()];
        init_conv(init, &format!("{name}.skip"), cout, cin, &ones, 1.0);
    }
}

pub fn resblock<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    name: &str,
    x: Var,
    emb: Option<Var>,
    spec: ConvSpec,
) -> Var {
    let cin = g.shape(x)[0];
    let h = norm(g, pv, &format!("{name}.norm1"), x);
    let h = g.silu(h);
    let h = conv(g, pv, &format!("{name}.conv1"), h, spec);
    let cout = g.shape(h)[0];
    let mut h = norm(g, pv, &format!("{name}.norm2"), h);
    if let Some(e) = emb {
        let ss = linear(g, pv, &format!("{name}.film"), e);
        let scale = g.narrow(ss, 0, cout);
        let scale = g.add_scalar(scale, T::one());
        let shift = g.narrow(ss, cout, cout);
        h = g.mul_chan(h, scale);
        h = g.add_chan(h, shift);
    }
    let h = g.silu(h);
    let h = conv(g, pv, &format!("{name}.conv2"), h, spec);
    let skip = if cin != cout {
        let pw = ConvSpec { kernel: [1, 1, 1], stride: [1, 1, 1], pad: [0, 0, 0] };
        conv(g, pv, &format!("{name}.skip"), x, pw)
    } else {
        x
    };
    g.add(h, skip)
}

/// Single-head spatial self-attention with a residual connection.
pub fn init_attention<R: Rng>(init: &mut Init<'_, R>, name: &str, c: usize) {
    init_norm(init, &format!("{name}.norm"), c);
    for p in ["q", "k", "v", "proj"] {
        init_conv(init, &format!("{name}.{p}"), c, c, &[1, 1], 1.0);
    }
}

pub fn attention<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, name: &str, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let c = shape[0];
    let n: usize = shape[1..].iter().product();
    let pw = ConvSpec { kernel: [1, 1, 1], stride: [1, 1, 1], pad: [0, 0, 0] };
    let h = norm(g, pv, &format!("{name}.norm"), x);
    let q = conv(g, pv, &format!("{name}.q"), h, pw);
    let k = conv(g, pv, &format!("{name}.k"), h, pw);
    let v = conv(g, pv, &format!("{name}.v"), h, pw);
    let q = g.reshape(q, &[c, n]);
    let k = g.reshape(k, &[c, n]);
    let v = g.reshape(v, &[c, n]);
    let scores = g.matmul(q, k, true, false);
    let scores = g.scale(scores, T::c(1.0 / (c as f64).sqrt()));
    let attn = g.softmax_rows(scores);
    let out = g.matmul(v, attn, false, true);
    let out = g.reshape(out, &shape);
    let out = conv(g, pv, &format!("{name}.proj"), out, pw);
    g.add(x, out)
}
