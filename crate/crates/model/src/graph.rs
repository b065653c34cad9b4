//! Reverse-mode autodiff tape.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::ParamStore;
use crate::tensor::{gemm, strides, Real, Tensor};

type Backward<T> =
    Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
    needs_grad: bool,
    param: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    train: bool,
    grads_enabled: bool,
    rng: ChaCha8Rng,
    params: HashMap<usize, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T: Real> {
    nodes: Vec<Option<Tensor<T>>>,
    params: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: usize) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> HashMap<usize, Tensor<T>> {
        self.params
    }
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::inference()
    }
}

impl<T: Real> Graph<T> {
    /// Evaluation mode: dropout off, no gradient bookkeeping.
    pub fn inference() -> Self {
        Self::with_mode(false, false, 0)
    }

    /// Training mode with parameter gradients and dropout drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, true, seed)
    }

    pub fn with_mode(train: bool, grads: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            train,
            grads_enabled: grads,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: HashMap::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: Backward<T>) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: needs.then_some(backward),
            needs_grad: needs,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad: needs_grad && self.grads_enabled,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: usize) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            let pv: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].needs_grad)
                .collect();
            let out = bw(&g, &pv, &node.value, &needs);
            for ((&p, gp), need) in node.parents.iter().zip(out).zip(&needs) {
                let (Some(gp), true) = (gp, *need) else {
                    continue;
                };
                debug_assert_eq!(gp.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&gp),
                    slot => *slot = Some(gp),
                }
            }
            if node.parents.is_empty() {
                grads[i] = Some(g);
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| Some((n.param?, grads[i].clone()?)))
            .collect();
        Grads {
            nodes: grads,
            params,
        }
    }

    // ---- elementwise ----

    fn binary(&mut self, a: Var, b: Var, op: Bin) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = bcast_shape(ta.shape(), tb.shape());
        let sa = bcast_strides(ta.shape(), &out_shape);
        let sb = bcast_strides(tb.shape(), &out_shape);
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let f = |x: T, y: T| match op {
            Bin::Add => x + y,
            Bin::Sub => x - y,
            Bin::Mul => x * y,
        };
        if ta.shape() == tb.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(da).zip(db) {
                *o = f(x, y);
            }
        } else {
            for_each_bcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(da[i], db[j]));
        }
        let shape = out_shape.clone();
        self.push(
            Tensor::new(out_shape, out),
            &[a, b],
            Box::new(move |g, p, _, needs| {
                let gd = g.data();
                let (xa, xb) = (p[0], p[1]);
                let mut ga = needs[0].then(|| vec![T::zero(); xa.numel()]);
                let mut gb = needs[1].then(|| vec![T::zero(); xb.numel()]);
                let (va, vb) = (xa.data(), xb.data());
                for_each_bcast(&shape, &sa, &sb, |o, i, j| {
                    let go = gd[o];
                    if let Some(ga) = ga.as_mut() {
                        ga[i] += match op {
                            Bin::Mul => go * vb[j],
                            _ => go,
                        };
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[j] += match op {
                            Bin::Add => go,
                            Bin::Sub => -go,
                            Bin::Mul => go * va[i],
                        };
                    }
                });
                vec![
                    ga.map(|v| Tensor::new(xa.shape().to_vec(), v)),
                    gb.map(|v| Tensor::new(xb.shape().to_vec(), v)),
                ]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Bin::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Bin::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Bin::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var {
        let y = self.value(x).map(f);
        self.push(
            y,
            &[x],
            Box::new(move |g, p, y, _| {
                let d = p[0]
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), d))]
            }),
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, move |v| v + s, |_, _| T::one())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| x + x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        fn sig<T: Real>(v: T) -> T {
            T::one() / (T::one() + (-v).exp())
        }
        self.unary(
            x,
            |v| v * sig(v),
            |x, _| {
                let s = sig(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::of((2.0 / std::f64::consts::PI).sqrt());
        let k = T::of(0.044715);
        let half = T::of(0.5);
        self.unary(
            x,
            move |v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()),
            move |x, _| {
                let th = (c * (x + k * x * x * x)).tanh();
                half * (T::one() + th)
                    + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * x * x)
            },
        )
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let y = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x)
                .data()
                .iter()
                .zip(&mask)
                .map(|(&v, &m)| v * m)
                .collect(),
        );
        self.push(
            y,
            &[x],
            Box::new(move |g, _, _, _| {
                let d = g.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                vec![Some(Tensor::new(g.shape().to_vec(), d))]
            }),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(
            Tensor::scalar(s),
            &[x],
            Box::new(|g, p, _, _| vec![Some(Tensor::full(p[0].shape(), g.data()[0]))]),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    // ---- linear algebra ----

    /// `x [.., in] @ w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(ws.len(), 2, "linear weight must be 2-d");
        let (din, dout) = (ws[0], ws[1]);
        assert_eq!(
            *xs.last().expect("linear input has a feature dim"),
            din,
            "linear: {xs:?} x {ws:?}"
        );
        let rows = self.value(x).numel() / din;
        let mut y = vec![T::zero(); rows * dout];
        gemm(
            rows,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut y,
            false,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            assert_eq!(bd.len(), dout);
            for row in y.chunks_mut(dout) {
                for (v, &bb) in row.iter_mut().zip(bd) {
                    *v += bb;
                }
            }
        }
        let mut oshape = xs.clone();
        *oshape.last_mut().unwrap() = dout;
        let parents: Vec<Var> = std::iter::once(x)
            .chain(std::iter::once(w))
            .chain(b)
            .collect();
        self.push(
            Tensor::new(oshape, y),
            &parents,
            Box::new(move |g, p, _, needs| {
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); rows * din];
                    gemm(
                        rows,
                        dout,
                        din,
                        gd,
                        false,
                        p[1].data(),
                        true,
                        &mut gx,
                        false,
                    );
                    Tensor::new(p[0].shape().to_vec(), gx)
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![T::zero(); din * dout];
                    gemm(
                        din,
                        rows,
                        dout,
                        p[0].data(),
                        true,
                        gd,
                        false,
                        &mut gw,
                        false,
                    );
                    Tensor::new(vec![din, dout], gw)
                });
                let mut out = vec![gx, gw];
                if p.len() == 3 {
                    let mut gb = vec![T::zero(); dout];
                    for row in gd.chunks(dout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    out.push(Some(Tensor::new(vec![dout], gb)));
                }
                out
            }),
        )
    }

    /// Batched matmul of `[B, m, k]` by `[B, k, n]`; `ta`/`tb` mean the operand is stored transposed.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0],
            "bmm: {sa:?} x {sb:?}"
        );
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, kb, "bmm inner dims: {sa:?} x {sb:?}");
        let batch = sa[0];
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                ta,
                &bd[i * k * n..],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.push(
            Tensor::new(vec![batch, m, n], out),
            &[a, b],
            Box::new(move |g, p, _, needs| {
                let (ad, bd, gd) = (p[0].data(), p[1].data(), g.data());
                let mut ga = needs[0].then(|| vec![T::zero(); batch * m * k]);
                let mut gb = needs[1].then(|| vec![T::zero(); batch * k * n]);
                for i in 0..batch {
                    let (ai, bi, gi) = (&ad[i * m * k..], &bd[i * k * n..], &gd[i * m * n..]);
                    if let Some(ga) = ga.as_mut() {
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        if ta {
                            gemm(k, n, m, bi, tb, gi, true, dst, false);
                        } else {
                            gemm(m, n, k, gi, false, bi, !tb, dst, false);
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if tb {
                            gemm(n, m, k, gi, true, ai, ta, dst, false);
                        } else {
                            gemm(k, m, n, ai, !ta, gi, false, dst, false);
                        }
                    }
                }
                vec![
                    ga.map(|v| Tensor::new(p[0].shape().to_vec(), v)),
                    gb.map(|v| Tensor::new(p[1].shape().to_vec(), v)),
                ]
            }),
        )
    }

    /// 2-d convolution of `x [N, C, H, W]` with `w [O, C, K, K]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(
            xs.len() == 4 && ws.len() == 4 && xs[1] == ws[1] && ws[2] == ws[3],
            "conv2d: {xs:?} * {ws:?}"
        );
        let geo = ConvGeo {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            k: ws[2],
            stride,
            pad,
            ho: (xs[2] + 2 * pad - ws[2]) / stride + 1,
            wo: (xs[3] + 2 * pad - ws[2]) / stride + 1,
        };
        let (batch, o) = (xs[0], ws[0]);
        let (ckk, pix, inn) = (
            geo.c * geo.k * geo.k,
            geo.ho * geo.wo,
            geo.c * geo.h * geo.w,
        );
        let mut out = vec![T::zero(); batch * o * pix];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for n in 0..batch {
            let xn = &xd[n * inn..(n + 1) * inn];
            let cols = geo.im2col(xn);
            let cols = cols.as_deref().unwrap_or(xn);
            gemm(
                o,
                ckk,
                pix,
                wd,
                false,
                cols,
                false,
                &mut out[n * o * pix..(n + 1) * o * pix],
                false,
            );
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (i, plane) in out.chunks_mut(pix).enumerate() {
                let bb = bd[i % o];
                plane.iter_mut().for_each(|v| *v += bb);
            }
        }
        let parents: Vec<Var> = [x, w].into_iter().chain(b).collect();
        self.push(
            Tensor::new(vec![batch, o, geo.ho, geo.wo], out),
            &parents,
            Box::new(move |g, p, _, needs| {
                let (xd, wd, gd) = (p[0].data(), p[1].data(), g.data());
                let mut gx = needs[0].then(|| vec![T::zero(); batch * inn]);
                let mut gw = needs[1].then(|| vec![T::zero(); o * ckk]);
                let mut gcols = vec![T::zero(); if needs[0] { ckk * pix } else { 0 }];
                for n in 0..batch {
                    let gn = &gd[n * o * pix..(n + 1) * o * pix];
                    if let Some(gw) = gw.as_mut() {
                        let xn = &xd[n * inn..(n + 1) * inn];
                        let cols = geo.im2col(xn);
                        gemm(
                            o,
                            pix,
                            ckk,
                            gn,
                            false,
                            cols.as_deref().unwrap_or(xn),
                            true,
                            gw,
                            true,
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[n * inn..(n + 1) * inn];
                        if geo.is_pointwise() {
                            gemm(ckk, o, pix, wd, true, gn, false, dst, false);
                        } else {
                            gemm(ckk, o, pix, wd, true, gn, false, &mut gcols, false);
                            geo.col2im(&gcols, dst);
                        }
                    }
                }
                let mut res = vec![
                    gx.map(|v| Tensor::new(p[0].shape().to_vec(), v)),
                    gw.map(|v| Tensor::new(p[1].shape().to_vec(), v)),
                ];
                if p.len() == 3 {
                    let mut gb = vec![T::zero(); o];
                    for (i, plane) in gd.chunks(pix).enumerate() {
                        gb[i % o] += plane.iter().copied().sum::<T>();
                    }
                    res.push(Some(Tensor::new(vec![o], gb)));
                }
                res
            }),
        )
    }

    // ---- normalization ----

    fn affine_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        chunk: usize,
        chan: impl Fn(usize, usize) -> usize + Copy + 'static,
        eps: f64,
    ) -> Var {
        let eps = T::of(eps);
        let xt = self.value(x);
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut y = vec![T::zero(); xt.numel()];
        for (q, (xs, ys)) in xt.data().chunks(chunk).zip(y.chunks_mut(chunk)).enumerate() {
            let (mean, rstd) = moments(xs, eps);
            for (j, (&v, o)) in xs.iter().zip(ys.iter_mut()).enumerate() {
                let c = chan(q, j);
                *o = (v - mean) * rstd * gd[c] + bd[c];
            }
        }
        self.push(
            Tensor::new(xt.shape().to_vec(), y),
            &[x, gamma, beta],
            Box::new(move |g, p, _, _| {
                let (xd, gam) = (p[0].data(), p[1].data());
                let mut gx = vec![T::zero(); xd.len()];
                let mut ggam = vec![T::zero(); gam.len()];
                let mut gbet = vec![T::zero(); gam.len()];
                let m = T::of(chunk as f64);
                for (q, ((xs, gs), gxs)) in xd
                    .chunks(chunk)
                    .zip(g.data().chunks(chunk))
                    .zip(gx.chunks_mut(chunk))
                    .enumerate()
                {
                    let (mean, rstd) = moments(xs, eps);
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for (j, (&v, &go)) in xs.iter().zip(gs).enumerate() {
                        let c = chan(q, j);
                        let xh = (v - mean) * rstd;
                        ggam[c] += go * xh;
                        gbet[c] += go;
                        let dxh = go * gam[c];
                        s1 += dxh;
                        s2 += dxh * xh;
                    }
                    let (s1, s2) = (s1 / m, s2 / m);
                    for (j, ((&v, &go), o)) in xs.iter().zip(gs).zip(gxs.iter_mut()).enumerate() {
                        let xh = (v - mean) * rstd;
                        *o = rstd * (go * gam[chan(q, j)] - s1 - xh * s2);
                    }
                }
                vec![
                    Some(Tensor::new(p[0].shape().to_vec(), gx)),
                    Some(Tensor::new(p[1].shape().to_vec(), ggam)),
                    Some(Tensor::new(p[2].shape().to_vec(), gbet)),
                ]
            }),
        )
    }

    /// Group norm over `[N, C, ...]` with per-channel affine `[C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        let c = s[1];
        assert!(
            c % groups == 0,
            "{c} channels not divisible into {groups} groups"
        );
        let spatial: usize = s[2..].iter().product();
        let cpg = c / groups;
        let chunk = cpg * spatial;
        self.affine_norm(
            x,
            gamma,
            beta,
            chunk,
            move |q, j| (q % groups) * cpg + j / spatial,
            eps,
        )
    }

    /// Layer norm over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let d = *self.shape(x).last().expect("layer_norm on a scalar");
        self.affine_norm(x, gamma, beta, d, |_, j| j, eps)
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let d = *xt.shape().last().expect("softmax on a scalar");
        let mut y = xt.data().to_vec();
        for row in y.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        self.push(
            Tensor::new(xt.shape().to_vec(), y),
            &[x],
            Box::new(move |g, _, y, _| {
                let mut gx = vec![T::zero(); y.numel()];
                for ((ys, gs), o) in y
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(gx.chunks_mut(d))
                {
                    let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for ((&yy, &gg), oo) in ys.iter().zip(gs).zip(o.iter_mut()) {
                        *oo = yy * (gg - dot);
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), gx))]
            }),
        )
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self.value(x).reshaped(shape);
        self.push(
            y,
            &[x],
            Box::new(|g, p, _, _| vec![Some(g.reshaped(p[0].shape()))]),
        )
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let y = permute_tensor(self.value(x), perm);
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.push(
            y,
            &[x],
            Box::new(move |g, _, _, _| vec![Some(permute_tensor(g, &inv))]),
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty());
        let shapes: Vec<Vec<usize>> = xs.iter().map(|&v| self.shape(v).to_vec()).collect();
        let base = &shapes[0];
        for s in &shapes {
            assert!(
                s.len() == base.len()
                    && s.iter()
                        .zip(base)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b),
                "concat along {axis}: {shapes:?}"
            );
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = shapes.iter().map(|s| s[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut oshape = base.clone();
        oshape[axis] = shapes.iter().map(|s| s[axis]).sum();
        self.push(
            Tensor::new(oshape, out),
            xs,
            Box::new(move |g, p, _, needs| {
                let gd = g.data();
                let mut offs = 0;
                let mut res = Vec::with_capacity(p.len());
                for (i, &w) in widths.iter().enumerate() {
                    if needs[i] {
                        let mut part = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let s = o * total + offs;
                            part.extend_from_slice(&gd[s..s + w]);
                        }
                        res.push(Some(Tensor::new(p[i].shape().to_vec(), part)));
                    } else {
                        res.push(None);
                    }
                    offs += w;
                }
                res
            }),
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(
            start + len <= s[axis],
            "narrow {start}+{len} beyond {}",
            s[axis]
        );
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let (full, w, off) = (s[axis] * inner, len * inner, start * inner);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * w);
        for o in 0..outer {
            out.extend_from_slice(&xd[o * full + off..o * full + off + w]);
        }
        let mut oshape = s.clone();
        oshape[axis] = len;
        self.push(
            Tensor::new(oshape, out),
            &[x],
            Box::new(move |g, p, _, _| {
                let mut gx = vec![T::zero(); p[0].numel()];
                for (o, chunk) in g.data().chunks(w).enumerate() {
                    gx[o * full + off..o * full + off + w].copy_from_slice(chunk);
                }
                vec![Some(Tensor::new(p[0].shape().to_vec(), gx))]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (h, w) = (s[2], s[3]);
        let planes = s[0] * s[1];
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = xd[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(
            Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out),
            &[x],
            Box::new(move |g, p, _, _| {
                let gd = g.data();
                let mut gx = vec![T::zero(); planes * h * w];
                for pl in 0..planes {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            gx[(pl * h + y / 2) * w + xx / 2] += gd[(pl * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                vec![Some(Tensor::new(p[0].shape().to_vec(), gx))]
            }),
        )
    }
}

fn moments<T: Real>(xs: &[T], eps: T) -> (T, T) {
    let m = T::of(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / m;
    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
    (mean, T::one() / (var + eps).sqrt())
}

#[derive(Clone, Copy)]
struct ConvGeo {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeo {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Column matrix `[C K K, Ho Wo]`, or `None` when the input can be used as is.
    fn im2col<T: Real>(&self, x: &[T]) -> Option<Vec<T>> {
        if self.is_pointwise() {
            return None;
        }
        let pix = self.ho * self.wo;
        let mut cols = vec![T::zero(); self.c * self.k * self.k * pix];
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * pix;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                cols[row + oy * self.wo + ox] = x[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        Some(cols)
    }

    fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        x.iter_mut().for_each(|v| *v = T::zero());
        let pix = self.ho * self.wo;
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * pix;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                x[dst + ix as usize] += cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn bcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let r = a.len().max(b.len());
    (0..r)
        .map(|i| {
            let da = if i + a.len() >= r {
                a[i + a.len() - r]
            } else {
                1
            };
            let db = if i + b.len() >= r {
                b[i + b.len() - r]
            } else {
                1
            };
            assert!(
                da == db || da == 1 || db == 1,
                "cannot broadcast {a:?} with {b:?}"
            );
            da.max(db)
        })
        .collect()
}

fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                st[i - lead]
            }
        })
        .collect()
}

fn for_each_bcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let r = out.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[r - 1];
    let (ia, ib) = (sa[r - 1], sb[r - 1]);
    let outer: usize = out[..r - 1].iter().product();
    let mut idx = vec![0; r - 1];
    let (mut oa, mut ob, mut o) = (0, 0, 0);
    for _ in 0..outer {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn permute_tensor<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let s = x.shape();
    assert_eq!(perm.len(), s.len(), "permutation rank");
    let oshape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let ist = strides(s);
    let src: Vec<usize> = perm.iter().map(|&p| ist[p]).collect();
    let zero = vec![0; oshape.len()];
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for_each_bcast(&oshape, &src, &zero, |o, i, _| out[o] = xd[i]);
    Tensor::new(oshape, out)
}
