//! Convolutional and transformer building blocks.

use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Real;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv2d {
    w: usize,
    b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let fan_in = cin * k * k;
        Self {
            w: ps.add_uniform(&format!("{name}.w"), &[cout, cin, k, k], fan_in, rng),
            b: ps.add_uniform(&format!("{name}.b"), &[cout], fan_in, rng),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let (w, b) = (g.param(ps, self.w), g.param(ps, self.b));
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn weight_ids(&self) -> [usize; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        Self {
            w: ps.add_uniform(&format!("{name}.w"), &[din, dout], din, rng),
            b: ps.add_uniform(&format!("{name}.b"), &[dout], din, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let (w, b) = (g.param(ps, self.w), g.param(ps, self.b));
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

/// Largest of 8, 4, 2, 1 dividing `c`.
pub fn norm_groups(c: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1)
}

impl Norm {
    pub fn group<T: Real>(ps: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: ps.add_const(&format!("{name}.gamma"), &[c], 1.0),
            beta: ps.add_const(&format!("{name}.beta"), &[c], 0.0),
            groups: norm_groups(c),
        }
    }

    pub fn layer<T: Real>(ps: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: ps.add_const(&format!("{name}.gamma"), &[d], 1.0),
            beta: ps.add_const(&format!("{name}.beta"), &[d], 0.0),
            groups: 0,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let (ga, be) = (g.param(ps, self.gamma), g.param(ps, self.beta));
        if self.groups == 0 {
            g.layer_norm(x, ga, be, NORM_EPS)
        } else {
            g.group_norm(x, ga, be, self.groups, NORM_EPS)
        }
    }
}

/// Residual conv block with scale-and-shift conditioning from an embedding.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: Norm,
    conv1: Conv2d,
    emb: Linear,
    norm2: Norm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    cout: usize,
    dropout: f64,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: usize,
        dropout: f64,
    ) -> Self {
        Self {
            norm1: Norm::group(ps, &format!("{name}.norm1"), cin),
            conv1: Conv2d::new(ps, rng, &format!("{name}.conv1"), cin, cout, 3, 1),
            emb: Linear::new(ps, rng, &format!("{name}.emb"), emb_dim, 2 * cout),
            norm2: Norm::group(ps, &format!("{name}.norm2"), cout),
            conv2: Conv2d::new(ps, rng, &format!("{name}.conv2"), cout, cout, 3, 1),
            skip: (cin != cout)
                .then(|| Conv2d::new(ps, rng, &format!("{name}.skip"), cin, cout, 1, 1)),
            cout,
            dropout,
        }
    }

    /// `x: [N, Cin, H, W]`, `emb: [N, E]` (already passed through SiLU).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, emb: Var) -> Var {
        let n = g.shape(x)[0];
        let mut h = self.norm1.forward(g, ps, x);
        h = g.silu(h);
        h = self.conv1.forward(g, ps, h);
        let ss = self.emb.forward(g, ps, emb);
        let scale = g.narrow(ss, 1, 0, self.cout);
        let scale = g.reshape(scale, &[n, self.cout, 1, 1]);
        let scale = g.add_scalar(scale, 1.0);
        let shift = g.narrow(ss, 1, self.cout, self.cout);
        let shift = g.reshape(shift, &[n, self.cout, 1, 1]);
        h = self.norm2.forward(g, ps, h);
        h = g.mul(h, scale);
        h = g.add(h, shift);
        h = g.silu(h);
        h = g.dropout(h, self.dropout);
        h = self.conv2.forward(g, ps, h);
        let s = match &self.skip {
            Some(c) => c.forward(g, ps, x),
            None => x,
        };
        g.add(h, s)
    }
}

/// Pre-norm transformer block: `Y = X + SA(LN(X))`, `X' = Y + MLP(LN(Y))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: Norm,
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    dropout: f64,
}

impl TransformerBlock {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
        dropout: f64,
    ) -> Self {
        assert!(d % heads == 0, "{heads} heads do not divide {d}");
        Self {
            ln1: Norm::layer(ps, &format!("{name}.ln1"), d),
            qkv: Linear::new(ps, rng, &format!("{name}.qkv"), d, 3 * d),
            proj: Linear::new(ps, rng, &format!("{name}.proj"), d, d),
            ln2: Norm::layer(ps, &format!("{name}.ln2"), d),
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), d, 4 * d),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), 4 * d, d),
            heads,
            dropout,
        }
    }

    /// `x: [B, T, d]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let y = self.ln1.forward(g, ps, x);
        let qkv = self.qkv.forward(g, ps, y);
        let qkv = g.reshape(qkv, &[b, t, 3, h, dh]);
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]);
        let part = |g: &mut Graph<T>, i: usize| {
            let p = g.narrow(qkv, 0, i, 1);
            g.reshape(p, &[b * h, t, dh])
        };
        let (q, k, v) = (part(g, 0), part(g, 1), part(g, 2));
        let scores = g.bmm(q, k, false, true);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_last(scores);
        let attn = g.dropout(attn, self.dropout);
        let o = g.bmm(attn, v, false, false);
        let o = g.reshape(o, &[b, h, t, dh]);
        let o = g.permute(o, &[0, 2, 1, 3]);
        let o = g.reshape(o, &[b, t, d]);
        let o = self.proj.forward(g, ps, o);
        let o = g.dropout(o, self.dropout);
        let x = g.add(x, o);
        let y = self.ln2.forward(g, ps, x);
        let y = self.fc1.forward(g, ps, y);
        let y = g.gelu(y);
        let y = g.dropout(y, self.dropout);
        let y = self.fc2.forward(g, ps, y);
        let y = g.dropout(y, self.dropout);
        g.add(x, y)
    }
}
