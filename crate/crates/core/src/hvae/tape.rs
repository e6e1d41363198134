//! Reverse-mode differentiation over per-sample `[C, H, W]` activations.
//!
//! A [`Tape`] records one sample's forward computation. Learned weights are
//! never copied onto the tape; ops refer to slices of the flat parameter
//! vector through [`ParamSlot`]s and the backward pass accumulates straight
//! into a flat gradient vector of the same layout.

use super::Real;

pub type Id = usize;

pub const SCALE_FLOOR: f64 = 1e-6;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn scalar() -> Self {
        Shape { c: 1, h: 1, w: 1 }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub offset: usize,
    pub len: usize,
}

impl ParamSlot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Same-padded, stride-1 grouped convolution. Weights are `[cout][cin/groups][k][k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamSlot,
    pub bias: ParamSlot,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub groups: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(ParamSlot),
    Conv(Id, Conv),
    Add(Id, Id),
    Mul(Id, Id),
    Swish(Id),
    PixelNorm(Id, ParamSlot),
    SpaceToDepth(Id),
    DepthToSpace(Id),
    Concat(Id, Id),
    Slice(Id, usize),
    ExpFloor(Id),
    StopGrad(Id),
    HalfSqErr(Id, Id),
    Kl { dmu: Id, sigma: Id, dsigma: Id },
}

struct Node<T> {
    value: Vec<T>,
    shape: Shape,
    op: Op,
    needs_grad: bool,
    // per-op cache (pixel norm: inverse rms per pixel)
    aux: Vec<T>,
}

pub struct Tape<'p, T: Real> {
    params: &'p [T],
    nodes: Vec<Node<T>>,
}

/// Node gradients from one backward pass.
pub struct NodeGrads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> NodeGrads<T> {
    pub fn get(&self, id: Id) -> Option<&[T]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p [T]) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn value(&self, id: Id) -> &[T] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: Id) -> Shape {
        self.nodes[id].shape
    }

    pub fn scalar(&self, id: Id) -> T {
        self.nodes[id].value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Shape, op: Op, needs_grad: bool) -> Id {
        debug_assert_eq!(value.len(), shape.len());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
            aux: Vec::new(),
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: Id) -> bool {
        self.nodes[id].needs_grad
    }

    /// A constant input (no gradient flows into it unless `trainable`).
    pub fn input(&mut self, value: Vec<T>, shape: Shape, trainable: bool) -> Id {
        assert_eq!(value.len(), shape.len());
        self.push(value, shape, Op::Const, trainable)
    }

    pub fn param(&mut self, slot: ParamSlot, shape: Shape) -> Id {
        assert_eq!(slot.len, shape.len());
        let value = self.params[slot.range()].to_vec();
        self.push(value, shape, Op::Param(slot), true)
    }

    pub fn conv(&mut self, x: Id, conv: Conv) -> Id {
        let s = self.shape(x);
        assert_eq!(s.c, conv.cin, "conv input channels");
        let out_shape = Shape::new(conv.cout, s.h, s.w);
        let mut out = vec![T::zero(); out_shape.len()];
        conv_forward(
            &self.nodes[x].value,
            s,
            &self.params[conv.weight.range()],
            &self.params[conv.bias.range()],
            &conv,
            &mut out,
        );
        self.push(out, out_shape, Op::Conv(x, conv), true)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let v = zip_map(&self.nodes[a].value, &self.nodes[b].value, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, self.shape(a), Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let v = zip_map(&self.nodes[a].value, &self.nodes[b].value, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, self.shape(a), Op::Mul(a, b), needs)
    }

    pub fn swish(&mut self, x: Id) -> Id {
        let v = self.nodes[x]
            .value
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let needs = self.needs(x);
        self.push(v, self.shape(x), Op::Swish(x), needs)
    }

    /// Per-pixel RMS normalisation across channels with a learned per-channel gain.
    pub fn pixel_norm(&mut self, x: Id, gain: ParamSlot) -> Id {
        let s = self.shape(x);
        assert_eq!(gain.len, s.c);
        let hw = s.plane();
        let xv = &self.nodes[x].value;
        let g = &self.params[gain.range()];
        let eps = T::of(NORM_EPS);
        let inv_c = T::of(1.0 / s.c as f64);
        let mut inv = vec![T::zero(); hw];
        for (p, r) in inv.iter_mut().enumerate() {
            let ms = (0..s.c).map(|c| xv[c * hw + p] * xv[c * hw + p]).sum::<T>() * inv_c;
            *r = T::one() / (ms + eps).sqrt();
        }
        let mut out = vec![T::zero(); s.len()];
        for c in 0..s.c {
            for p in 0..hw {
                out[c * hw + p] = g[c] * xv[c * hw + p] * inv[p];
            }
        }
        let id = self.push(out, s, Op::PixelNorm(x, gain), true);
        self.nodes[id].aux = inv;
        id
    }

    pub fn space_to_depth(&mut self, x: Id) -> Id {
        let s = self.shape(x);
        assert!(s.h % 2 == 0 && s.w % 2 == 0, "space_to_depth needs even sides");
        let o = Shape::new(s.c * 4, s.h / 2, s.w / 2);
        let mut out = vec![T::zero(); o.len()];
        let xv = &self.nodes[x].value;
        s2d_indices(s, |src, dst| out[dst] = xv[src]);
        let needs = self.needs(x);
        self.push(out, o, Op::SpaceToDepth(x), needs)
    }

    pub fn depth_to_space(&mut self, x: Id) -> Id {
        let s = self.shape(x);
        assert!(s.c % 4 == 0, "depth_to_space needs channels divisible by 4");
        let o = Shape::new(s.c / 4, s.h * 2, s.w * 2);
        let mut out = vec![T::zero(); o.len()];
        let xv = &self.nodes[x].value;
        // inverse of space_to_depth on the output shape
        s2d_indices(o, |dst, src| out[dst] = xv[src]);
        let needs = self.needs(x);
        self.push(out, o, Op::DepthToSpace(x), needs)
    }

    pub fn concat(&mut self, a: Id, b: Id) -> Id {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!((sa.h, sa.w), (sb.h, sb.w), "concat spatial dims");
        let mut v = self.nodes[a].value.clone();
        v.extend_from_slice(&self.nodes[b].value);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Shape::new(sa.c + sb.c, sa.h, sa.w), Op::Concat(a, b), needs)
    }

    /// Channels `[c0, c0 + count)` of `x`.
    pub fn slice(&mut self, x: Id, c0: usize, count: usize) -> Id {
        let s = self.shape(x);
        assert!(c0 + count <= s.c);
        let hw = s.plane();
        let v = self.nodes[x].value[c0 * hw..(c0 + count) * hw].to_vec();
        let needs = self.needs(x);
        self.push(v, Shape::new(count, s.h, s.w), Op::Slice(x, c0), needs)
    }

    /// `max(exp(x), 1e-6)`.
    pub fn exp_floor(&mut self, x: Id) -> Id {
        let floor = T::of(SCALE_FLOOR);
        let v = self.nodes[x].value.iter().map(|&v| v.exp().max(floor)).collect();
        let needs = self.needs(x);
        self.push(v, self.shape(x), Op::ExpFloor(x), needs)
    }

    /// Identity forward; blocks gradients in backward passes that honour stop-gradients.
    pub fn stop_grad(&mut self, x: Id) -> Id {
        let v = self.nodes[x].value.clone();
        let needs = self.needs(x);
        self.push(v, self.shape(x), Op::StopGrad(x), needs)
    }

    /// `1/2 * sum((a - b)^2)` as a scalar node.
    pub fn half_sq_err(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.shape(a), self.shape(b), "half_sq_err shapes");
        let s = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            * T::of(0.5);
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![s], Shape::scalar(), Op::HalfSqErr(a, b), needs)
    }

    /// Residual-Normal KL summed over all variables, as a scalar node.
    pub fn kl(&mut self, dmu: Id, sigma: Id, dsigma: Id) -> Id {
        let (m, s, d) = (
            &self.nodes[dmu].value,
            &self.nodes[sigma].value,
            &self.nodes[dsigma].value,
        );
        assert!(m.len() == s.len() && s.len() == d.len());
        let total = (0..m.len())
            .map(|i| kl_term(m[i], s[i], d[i]))
            .sum::<T>();
        let needs = self.needs(dmu) || self.needs(sigma) || self.needs(dsigma);
        self.push(vec![total], Shape::scalar(), Op::Kl { dmu, sigma, dsigma }, needs)
    }

    pub fn add_scalars(&mut self, ids: &[Id]) -> Id {
        assert!(!ids.is_empty());
        ids[1..].iter().fold(ids[0], |acc, &id| self.add(acc, id))
    }

    /// Back-propagates `sum(coef * node)` over `seeds` (scalar nodes).
    ///
    /// Parameter gradients are accumulated into `param_grad` only for slots
    /// accepted by `keep`. With `honor_stop` set, [`Tape::stop_grad`] nodes
    /// block the flow.
    pub fn backward(
        &self,
        seeds: &[(Id, T)],
        honor_stop: bool,
        keep: &dyn Fn(ParamSlot) -> bool,
        param_grad: &mut [T],
    ) -> NodeGrads<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut highest = 0;
        for &(id, coef) in seeds {
            assert_eq!(self.nodes[id].shape.len(), 1, "seed must be scalar");
            accumulate(&mut grads[id], &[coef]);
            highest = highest.max(id + 1);
        }
        for id in (0..highest).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Const) {
                grads[id] = Some(gout);
                continue;
            }
            match &node.op {
                Op::Const | Op::Param(_) => {}
                Op::Conv(x, conv) => {
                    let xs = self.shape(*x);
                    let want_x = self.needs(*x);
                    let want_w = keep(conv.weight);
                    if want_w {
                        let (gw, gb) = split_two(param_grad, conv.weight, conv.bias);
                        conv_backward_params(&self.nodes[*x].value, xs, &gout, conv, gw, gb);
                    }
                    if want_x {
                        let mut gx = vec![T::zero(); xs.len()];
                        conv_backward_input(&self.params[conv.weight.range()], xs, &gout, conv, &mut gx);
                        accumulate(&mut grads[*x], &gx);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[*a], &gout);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[*b], &gout);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let g = zip_map(&gout, &self.nodes[*b].value, |g, y| g * y);
                        accumulate(&mut grads[*a], &g);
                    }
                    if self.needs(*b) {
                        let g = zip_map(&gout, &self.nodes[*a].value, |g, x| g * x);
                        accumulate(&mut grads[*b], &g);
                    }
                }
                Op::Swish(x) => {
                    let g = zip_map(&gout, &self.nodes[*x].value, |g, x| {
                        let s = sigmoid(x);
                        g * s * (T::one() + x * (T::one() - s))
                    });
                    accumulate(&mut grads[*x], &g);
                }
                Op::PixelNorm(x, gain) => {
                    let s = self.shape(*x);
                    let hw = s.plane();
                    let xv = &self.nodes[*x].value;
                    let inv = &node.aux;
                    let g = &self.params[gain.range()];
                    if keep(*gain) {
                        let gg = &mut param_grad[gain.range()];
                        for c in 0..s.c {
                            let mut acc = T::zero();
                            for p in 0..hw {
                                acc += gout[c * hw + p] * xv[c * hw + p] * inv[p];
                            }
                            gg[c] += acc;
                        }
                    }
                    if self.needs(*x) {
                        let inv_c = T::of(1.0 / s.c as f64);
                        let mut gx = vec![T::zero(); s.len()];
                        for p in 0..hw {
                            let dot = (0..s.c)
                                .map(|c| g[c] * gout[c * hw + p] * xv[c * hw + p])
                                .sum::<T>();
                            let r = inv[p];
                            let k = dot * r * r * r * inv_c;
                            for c in 0..s.c {
                                gx[c * hw + p] = g[c] * gout[c * hw + p] * r - xv[c * hw + p] * k;
                            }
                        }
                        accumulate(&mut grads[*x], &gx);
                    }
                }
                Op::SpaceToDepth(x) => {
                    let s = self.shape(*x);
                    let mut gx = vec![T::zero(); s.len()];
                    s2d_indices(s, |src, dst| gx[src] = gout[dst]);
                    accumulate(&mut grads[*x], &gx);
                }
                Op::DepthToSpace(x) => {
                    let s = self.shape(*x);
                    let mut gx = vec![T::zero(); s.len()];
                    s2d_indices(node.shape, |dst, src| gx[src] = gout[dst]);
                    accumulate(&mut grads[*x], &gx);
                }
                Op::Concat(a, b) => {
                    let la = self.shape(*a).len();
                    if self.needs(*a) {
                        accumulate(&mut grads[*a], &gout[..la]);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[*b], &gout[la..]);
                    }
                }
                Op::Slice(x, c0) => {
                    let s = self.shape(*x);
                    let hw = s.plane();
                    let slot = grads[*x].get_or_insert_with(|| vec![T::zero(); s.len()]);
                    for (d, g) in slot[c0 * hw..c0 * hw + gout.len()].iter_mut().zip(&gout) {
                        *d += *g;
                    }
                }
                Op::ExpFloor(x) => {
                    let floor = T::of(SCALE_FLOOR);
                    let xv = &self.nodes[*x].value;
                    let g = (0..gout.len())
                        .map(|i| {
                            let e = xv[i].exp();
                            if e > floor {
                                gout[i] * e
                            } else {
                                T::zero()
                            }
                        })
                        .collect::<Vec<_>>();
                    accumulate(&mut grads[*x], &g);
                }
                Op::StopGrad(x) => {
                    if !honor_stop {
                        accumulate(&mut grads[*x], &gout);
                    }
                }
                Op::HalfSqErr(a, b) => {
                    let s = gout[0];
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.needs(*a) {
                        let g = zip_map(av, bv, |x, y| s * (x - y));
                        accumulate(&mut grads[*a], &g);
                    }
                    if self.needs(*b) {
                        let g = zip_map(av, bv, |x, y| s * (y - x));
                        accumulate(&mut grads[*b], &g);
                    }
                }
                Op::Kl { dmu, sigma, dsigma } => {
                    let s = gout[0];
                    let m = &self.nodes[*dmu].value;
                    let sg = &self.nodes[*sigma].value;
                    let d = &self.nodes[*dsigma].value;
                    if self.needs(*dmu) {
                        let g: Vec<T> = (0..m.len()).map(|i| s * m[i] / (sg[i] * sg[i])).collect();
                        accumulate(&mut grads[*dmu], &g);
                    }
                    if self.needs(*sigma) {
                        let g: Vec<T> = (0..m.len())
                            .map(|i| -s * m[i] * m[i] / (sg[i] * sg[i] * sg[i]))
                            .collect();
                        accumulate(&mut grads[*sigma], &g);
                    }
                    if self.needs(*dsigma) {
                        let g: Vec<T> = (0..m.len()).map(|i| s * (d[i] - T::one() / d[i])).collect();
                        accumulate(&mut grads[*dsigma], &g);
                    }
                }
            }
            if let Op::Param(slot) = &node.op {
                if keep(*slot) {
                    for (d, g) in param_grad[slot.range()].iter_mut().zip(&gout) {
                        *d += *g;
                    }
                }
            }
            if matches!(node.op, Op::Const) {
                grads[id] = Some(gout);
            }
        }
        NodeGrads { grads }
    }
}

/// One term of the residual-Normal KL: `(dmu^2 / sigma^2 + dsigma^2 - ln dsigma^2 - 1) / 2`.
pub fn kl_term<T: Real>(dmu: T, sigma: T, dsigma: T) -> T {
    let d2 = dsigma * dsigma;
    T::of(0.5) * (dmu * dmu / (sigma * sigma) + d2 - d2.ln() - T::one())
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => {
            for (a, &v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn split_two<T>(buf: &mut [T], a: ParamSlot, b: ParamSlot) -> (&mut [T], &mut [T]) {
    assert!(a.offset + a.len <= b.offset, "weight slot must precede bias slot");
    let (lo, hi) = buf.split_at_mut(b.offset);
    (&mut lo[a.range()], &mut hi[..b.len])
}

/// Calls `f(src, dst)` for every element, where `src` indexes a `[c, h, w]`
/// tensor and `dst` its space-to-depth image `[4c, h/2, w/2]`.
fn s2d_indices(s: Shape, mut f: impl FnMut(usize, usize)) {
    let (h2, w2) = (s.h / 2, s.w / 2);
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                let sub = (y % 2) * 2 + (x % 2);
                let dst = ((c * 4 + sub) * h2 + y / 2) * w2 + x / 2;
                f((c * s.h + y) * s.w + x, dst);
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    acc.iter().copied().sum::<T>() + tail
}

#[inline]
fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let c = a.chunks_exact(8);
    let tail = c.remainder().iter().copied().sum::<T>();
    for x in c {
        for i in 0..8 {
            acc[i] += x[i];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `d` (input = output + d).
fn valid(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo.min(hi), hi)
}

/// Zero-padded patches of the `icpg` planes in `x`: row `(icg * k + kh) * k + kw`
/// holds the input seen by that kernel tap at every output position.
fn im2col<T: Real>(x: &[T], s: Shape, icpg: usize, k: usize, col: &mut [T]) {
    let (hw, p) = (s.plane(), (k / 2) as isize);
    col.fill(T::zero());
    for icg in 0..icpg {
        let xin = &x[icg * hw..(icg + 1) * hw];
        for kh in 0..k {
            let dy = kh as isize - p;
            let (y0, y1) = valid(s.h, dy);
            for kw in 0..k {
                let dx = kw as isize - p;
                let (x0, x1) = valid(s.w, dx);
                let row = &mut col[((icg * k + kh) * k + kw) * hw..][..hw];
                for oy in y0..y1 {
                    let start = ((oy as isize + dy) as usize * s.w) as isize + x0 as isize + dx;
                    row[oy * s.w + x0..oy * s.w + x1].copy_from_slice(&xin[start as usize..start as usize + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input planes.
fn col2im_add<T: Real>(col: &[T], s: Shape, icpg: usize, k: usize, gx: &mut [T]) {
    let (hw, p) = (s.plane(), (k / 2) as isize);
    for icg in 0..icpg {
        let gin = &mut gx[icg * hw..(icg + 1) * hw];
        for kh in 0..k {
            let dy = kh as isize - p;
            let (y0, y1) = valid(s.h, dy);
            for kw in 0..k {
                let dx = kw as isize - p;
                let (x0, x1) = valid(s.w, dx);
                let row = &col[((icg * k + kh) * k + kw) * hw..][..hw];
                for oy in y0..y1 {
                    let start = (((oy as isize + dy) as usize * s.w) as isize + x0 as isize + dx) as usize;
                    for (g, &v) in gin[start..start + (x1 - x0)].iter_mut().zip(&row[oy * s.w + x0..oy * s.w + x1]) {
                        *g += v;
                    }
                }
            }
        }
    }
}

/// Input planes of group `g`, as patches when the kernel is wider than 1x1.
fn group_input<'a, T: Real>(x: &'a [T], s: Shape, conv: &Conv, g: usize, col: &'a mut Vec<T>) -> &'a [T] {
    let (hw, k) = (s.plane(), conv.k);
    let icpg = conv.cin / conv.groups;
    let xg = &x[g * icpg * hw..(g + 1) * icpg * hw];
    if k == 1 {
        return xg;
    }
    col.resize(icpg * k * k * hw, T::zero());
    im2col(xg, s, icpg, k, col);
    col
}

/// Small products (depthwise kernels, thin heads) run faster as plain loops.
fn use_gemm(ocpg: usize, taps: usize, hw: usize) -> bool {
    ocpg >= GEMM_MIN && taps >= GEMM_MIN && hw >= GEMM_MIN
}

const GEMM_MIN: usize = 8;

fn conv_forward<T: Real>(x: &[T], s: Shape, w: &[T], b: &[T], conv: &Conv, out: &mut [T]) {
    let hw = s.plane();
    let ocpg = conv.cout / conv.groups;
    let taps = conv.cin / conv.groups * conv.k * conv.k;
    let mut col = Vec::new();
    for g in 0..conv.groups {
        let xg = group_input(x, s, conv, g, &mut col);
        let og = &mut out[g * ocpg * hw..(g + 1) * ocpg * hw];
        for (o, plane) in og.chunks_exact_mut(hw).enumerate() {
            plane.fill(b[g * ocpg + o]);
        }
        let wg = &w[g * ocpg * taps..(g + 1) * ocpg * taps];
        if use_gemm(ocpg, taps, hw) {
            T::gemm((ocpg, taps, hw), (wg, taps as isize, 1), (xg, hw as isize, 1), T::one(), og);
            continue;
        }
        for (plane, wo) in og.chunks_exact_mut(hw).zip(wg.chunks_exact(taps)) {
            for (j, &wv) in wo.iter().enumerate() {
                axpy(wv, &xg[j * hw..(j + 1) * hw], plane);
            }
        }
    }
}

fn conv_backward_input<T: Real>(w: &[T], s: Shape, gout: &[T], conv: &Conv, gx: &mut [T]) {
    let (hw, k) = (s.plane(), conv.k);
    let icpg = conv.cin / conv.groups;
    let ocpg = conv.cout / conv.groups;
    let taps = icpg * k * k;
    let mut gcol = vec![T::zero(); if k == 1 { 0 } else { taps * hw }];
    for g in 0..conv.groups {
        let wg = &w[g * ocpg * taps..(g + 1) * ocpg * taps];
        let go = &gout[g * ocpg * hw..(g + 1) * ocpg * hw];
        let gxg = &mut gx[g * icpg * hw..(g + 1) * icpg * hw];
        let target: &mut [T] = if k == 1 {
            gxg
        } else {
            gcol.fill(T::zero());
            &mut gcol
        };
        if use_gemm(ocpg, taps, hw) {
            T::gemm((taps, ocpg, hw), (wg, 1, taps as isize), (go, hw as isize, 1), T::one(), target);
        } else {
            for (gplane, wo) in go.chunks_exact(hw).zip(wg.chunks_exact(taps)) {
                for (j, &wv) in wo.iter().enumerate() {
                    axpy(wv, gplane, &mut target[j * hw..(j + 1) * hw]);
                }
            }
        }
        if k > 1 {
            col2im_add(&gcol, s, icpg, k, &mut gx[g * icpg * hw..(g + 1) * icpg * hw]);
        }
    }
}

fn conv_backward_params<T: Real>(x: &[T], s: Shape, gout: &[T], conv: &Conv, gw: &mut [T], gb: &mut [T]) {
    let hw = s.plane();
    let ocpg = conv.cout / conv.groups;
    let taps = conv.cin / conv.groups * conv.k * conv.k;
    let mut col = Vec::new();
    for g in 0..conv.groups {
        let xg = group_input(x, s, conv, g, &mut col);
        let go = &gout[g * ocpg * hw..(g + 1) * ocpg * hw];
        for (o, plane) in go.chunks_exact(hw).enumerate() {
            gb[g * ocpg + o] += sum(plane);
        }
        let gwg = &mut gw[g * ocpg * taps..(g + 1) * ocpg * taps];
        if use_gemm(ocpg, taps, hw) {
            T::gemm((ocpg, hw, taps), (go, hw as isize, 1), (xg, 1, hw as isize), T::one(), gwg);
            continue;
        }
        for (gplane, gwo) in go.chunks_exact(hw).zip(gwg.chunks_exact_mut(taps)) {
            for (j, gwv) in gwo.iter_mut().enumerate() {
                *gwv += dot(gplane, &xg[j * hw..(j + 1) * hw]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of parameter and input gradients.
    fn fd_check(params: &[f64], x: &[f64], build: impl Fn(&mut Tape<f64>, &[f64]) -> Id) {
        let mut t = Tape::new(params);
        let out = build(&mut t, x);
        let mut g = vec![0.0; params.len()];
        let ng = t.backward(&[(out, 1.0)], true, &|_| true, &mut g);
        let gx = ng.get(0).expect("input gradient").to_vec();
        let h = 1e-6;
        let eval = |p: &[f64], x: &[f64]| {
            let mut t = Tape::new(p);
            let out = build(&mut t, x);
            t.scalar(out)
        };
        let close = |a: f64, fd: f64| (a - fd).abs() <= 1e-6 * (1.0 + fd.abs());
        for i in 0..params.len() {
            let mut pp = params.to_vec();
            pp[i] += h;
            let up = eval(&pp, x);
            pp[i] -= 2.0 * h;
            let dn = eval(&pp, x);
            let fd = (up - dn) / (2.0 * h);
            assert!(close(g[i], fd), "param {i}: {} vs {fd}", g[i]);
        }
        for i in 0..x.len() {
            let mut xx = x.to_vec();
            xx[i] += h;
            let up = eval(params, &xx);
            xx[i] -= 2.0 * h;
            let dn = eval(params, &xx);
            let fd = (up - dn) / (2.0 * h);
            assert!(close(gx[i], fd), "input {i}: {} vs {fd}", gx[i]);
        }
    }

    fn slots(lens: &[usize]) -> Vec<ParamSlot> {
        let mut off = 0;
        lens.iter()
            .map(|&len| {
                let s = ParamSlot { offset: off, len };
                off += len;
                s
            })
            .collect()
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_loop() {
        // small shapes take the loop path, wide ones the matrix-multiply path
        for (cin, cout, k, groups, h, w) in [(4, 6, 3, 2, 5, 6), (4, 6, 1, 1, 5, 6), (16, 20, 3, 2, 5, 6), (16, 24, 1, 1, 4, 3)] {
            let sh = Shape::new(cin, h, w);
            let icpg = cin / groups;
            let x = pseudo(sh.len(), 1);
            let sl = slots(&[cout * icpg * k * k, cout]);
            let params = pseudo(sl[0].len + sl[1].len, 2);
            let conv = Conv { weight: sl[0], bias: sl[1], cin, cout, k, groups };
            let mut t = Tape::new(&params);
            let xi = t.input(x.clone(), sh, false);
            let y = t.conv(xi, conv);
            let out = t.value(y);
            let p = (k / 2) as isize;
            for oc in 0..cout {
                let g = oc / (cout / groups);
                for oy in 0..h {
                    for ox in 0..w {
                        let mut acc = params[sl[1].offset + oc];
                        for icg in 0..icpg {
                            let ic = g * icpg + icg;
                            for kh in 0..k {
                                for kw in 0..k {
                                    let iy = oy as isize + kh as isize - p;
                                    let ix = ox as isize + kw as isize - p;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += params[((oc * icpg + icg) * k + kh) * k + kw]
                                        * x[(ic * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        assert!((out[(oc * h + oy) * w + ox] - acc).abs() < 1e-12, "{cin}->{cout} k{k}");
                    }
                }
            }
        }
    }

    #[test]
    fn wide_conv_gradients_match_finite_differences() {
        let sh = Shape::new(16, 4, 4);
        let x = pseudo(sh.len(), 5);
        let sl = slots(&[16 * 8 * 9, 16, 16 * 16, 16]);
        let params = pseudo(sl.iter().map(|s| s.len).sum(), 6);
        let c1 = Conv { weight: sl[0], bias: sl[1], cin: 16, cout: 16, k: 3, groups: 2 };
        let c2 = Conv { weight: sl[2], bias: sl[3], cin: 16, cout: 16, k: 1, groups: 1 };
        fd_check(&params, &x, |t: &mut Tape<f64>, x: &[f64]| {
            let xi = t.input(x.to_vec(), sh, true);
            let a = t.conv(xi, c1);
            let a = t.swish(a);
            let b = t.conv(a, c2);
            let tgt = t.input(vec![0.1; sh.len()], sh, false);
            t.half_sq_err(b, tgt)
        });
    }

    #[test]
    fn ops_gradients_match_finite_differences() {
        let sh = Shape::new(4, 4, 4);
        let x = pseudo(sh.len(), 3);
        let sl = slots(&[4 * 4 * 9, 4, 4, 8 * 4, 8, 4 * 9, 4]);
        let params = pseudo(sl.iter().map(|s| s.len).sum(), 4);
        let c1 = Conv { weight: sl[0], bias: sl[1], cin: 4, cout: 4, k: 3, groups: 1 };
        let c2 = Conv { weight: sl[3], bias: sl[4], cin: 4, cout: 8, k: 1, groups: 1 };
        let dw = Conv { weight: sl[5], bias: sl[6], cin: 4, cout: 4, k: 3, groups: 4 };
        let gain = sl[2];
        let build = |t: &mut Tape<f64>, x: &[f64]| {
            let xi = t.input(x.to_vec(), sh, true);
            let a = t.conv(xi, c1);
            let a = t.pixel_norm(a, gain);
            let a = t.swish(a);
            let a = t.conv(a, dw);
            let d = t.space_to_depth(a);
            let u = t.depth_to_space(d);
            let b = t.conv(u, c2);
            let mu = t.slice(b, 0, 4);
            let ls = t.slice(b, 4, 4);
            let sd = t.exp_floor(ls);
            let prod = t.mul(mu, sd);
            let sum = t.add(prod, xi);
            let cat = t.concat(sum, mu);
            let tgt = t.input(vec![0.3; cat_len(sh)], Shape::new(8, 4, 4), false);
            let r = t.half_sq_err(cat, tgt);
            let k = t.kl(mu, sd, sd);
            t.add_scalars(&[r, k])
        };
        fd_check(&params, &x, build);
    }

    fn cat_len(sh: Shape) -> usize {
        sh.len() * 2
    }

    #[test]
    fn stop_grad_blocks_only_when_honoured() {
        let sl = slots(&[1, 1]);
        let params = vec![2.0, 0.5];
        let conv = Conv { weight: sl[0], bias: sl[1], cin: 1, cout: 1, k: 1, groups: 1 };
        let mut t = Tape::new(&params);
        let x = t.input(vec![3.0], Shape::scalar(), false);
        let y = t.conv(x, conv);
        let s = t.stop_grad(y);
        let tgt = t.input(vec![0.0], Shape::scalar(), false);
        let l = t.half_sq_err(s, tgt);
        let mut g = vec![0.0; 2];
        t.backward(&[(l, 1.0)], true, &|_| true, &mut g);
        assert_eq!(g, vec![0.0, 0.0]);
        t.backward(&[(l, 1.0)], false, &|_| true, &mut g);
        // d/dw 0.5 (w x + b)^2 = (w x + b) x = 6.5 * 3
        assert_eq!(g, vec![19.5, 6.5]);
    }

    #[test]
    fn kl_term_zero_at_prior() {
        assert_eq!(kl_term(0.0, 1.7, 1.0), 0.0);
        assert!((kl_term(1.7f64, 1.7, 1.0) - 0.5).abs() < 1e-15);
    }
}
