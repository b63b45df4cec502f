use super::kernels::{col2im, im2col, matmul, upsample_taps, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, co: usize },
    /// `geom` describes the (large) output side viewed as a convolution input.
    ConvT2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, ci: usize },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2 { x: Var },
    InstanceNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Concat { a: Var, b: Var },
    Scale { x: Var, s: T },
    Mean { x: Var },
    L1Mean { a: Var, b: Var },
    CrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<u8> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

/// Append-only computation tape. Nodes that do not depend on a gradient-tracking
/// leaf never receive gradients, which is how parameter freezes and detaches work.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every gradient-tracking leaf.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<[usize; 4]>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(self.shapes[v.0], g.clone()).expect("grad shape"))
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.input(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn any_grad(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.shape(x);
        let [co, ci, kh, kw] = self.shape(w);
        if ci != c || kh != kw {
            return shape_err(format!("conv2d: input {:?} vs weight {:?}", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.value(b).numel() != co {
                return shape_err(format!("conv2d: bias of {} for {co} outputs", self.value(b).numel()));
            }
        }
        let geom = ConvGeom::new(c, h, wd, kh, stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv2d: kernel {kh} too large for {h}x{wd}")))?;
        let (k_rows, p) = (geom.rows(), geom.cols());
        let mut out = Tensor::zeros([n, co, geom.oh, geom.ow]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            let od = out.data_mut();
            let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k_rows * p] };
            for s in 0..n {
                let xb = &xv[s * c * h * wd..(s + 1) * c * h * wd];
                let ob = &mut od[s * co * p..(s + 1) * co * p];
                let src: &[T] = if geom.is_pointwise() {
                    xb
                } else {
                    im2col(xb, &geom, &mut cols);
                    &cols
                };
                matmul(false, false, co, k_rows, p, wv, src, T::zero(), ob);
                if let Some(bv) = bv {
                    for (o, row) in ob.chunks_mut(p).enumerate() {
                        row.iter_mut().for_each(|v| *v += bv[o]);
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let grad = self.any_grad(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, co }, grad))
    }

    /// Transposed convolution; weight layout `[in, out, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let [n, ci, hi, wi] = self.shape(x);
        let [wci, co, kh, kw] = self.shape(w);
        if wci != ci || kh != kw {
            return shape_err(format!("conv_transpose2d: input {:?} vs weight {:?}", self.shape(x), self.shape(w)));
        }
        if out_pad >= stride.max(1) && out_pad > 0 {
            return shape_err(format!("conv_transpose2d: output padding {out_pad} >= stride {stride}"));
        }
        let ho = ((hi - 1) * stride + kh + out_pad).checked_sub(2 * pad);
        let wo = ((wi - 1) * stride + kw + out_pad).checked_sub(2 * pad);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return shape_err("conv_transpose2d: padding exceeds output".into());
        };
        let geom = ConvGeom::new(co, ho, wo, kh, stride, pad)
            .filter(|g| g.oh == hi && g.ow == wi)
            .ok_or_else(|| Error::Shape("conv_transpose2d: inconsistent geometry".into()))?;
        let (k_rows, p) = (geom.rows(), geom.cols());
        let mut out = Tensor::zeros([n, co, ho, wo]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            let od = out.data_mut();
            let mut cols = vec![T::zero(); k_rows * p];
            for s in 0..n {
                let xb = &xv[s * ci * p..(s + 1) * ci * p];
                matmul(true, false, k_rows, ci, p, wv, xb, T::zero(), &mut cols);
                let ob = &mut od[s * co * ho * wo..(s + 1) * co * ho * wo];
                col2im(&cols, &geom, ob);
                if let Some(bv) = bv {
                    for (o, plane) in ob.chunks_mut(ho * wo).enumerate() {
                        plane.iter_mut().for_each(|v| *v += bv[o]);
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let grad = self.any_grad(&deps);
        Ok(self.push(out, Op::ConvT2d { x, w, b, geom, ci }, grad))
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first element in scan order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("max_pool2: odd spatial size {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out.data_mut()[o] = xv[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let grad = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, grad))
    }

    /// Fixed (non-learned) 2x bilinear upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let (ty, tx) = (upsample_taps::<T>(h), upsample_taps::<T>(w));
        let xv = self.value(x).data();
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        for (plane, dst) in out.data_mut().chunks_mut(4 * h * w).enumerate() {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    dst[oy * 2 * w + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                        + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                }
            }
        }
        let grad = self.any_grad(&[x]);
        self.push(out, Op::Upsample2 { x }, grad)
    }

    /// Per-sample, per-channel normalization with a learned affine (`gamma`, `beta` of shape `[1, C, 1, 1]`).
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err(format!("instance_norm: affine size mismatch for {c} channels"));
        }
        let hw = h * w;
        let eps = T::lit(1e-5);
        let count = T::from_usize(hw).unwrap();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor::zeros([n, c, h, w]);
        let mut xhat = vec![T::zero(); n * c * hw];
        let mut inv_std = vec![T::zero(); n * c];
        for plane in 0..n * c {
            let ch = plane % c;
            let src = &xv[plane * hw..(plane + 1) * hw];
            let mean = src.iter().copied().sum::<T>() / count;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let is = T::one() / (var + eps).sqrt();
            inv_std[plane] = is;
            let xh = &mut xhat[plane * hw..(plane + 1) * hw];
            let dst = &mut out.data_mut()[plane * hw..(plane + 1) * hw];
            for i in 0..hw {
                xh[i] = (src[i] - mean) * is;
                dst[i] = gv[ch] * xh[i] + bv[ch];
            }
        }
        let grad = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(out, Op::InstanceNorm { x, gamma, beta, xhat, inv_std }, grad))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|&a| f(a)).collect()).unwrap();
        let grad = self.any_grad(&[x]);
        self.push(out, op, grad)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(T::zero()), Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        self.unary(x, move |a| if a > T::zero() { a } else { a * s }, Op::LeakyRelu { x, slope: s })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |a| T::one() / (T::one() + (-a).exp()), Op::Sigmoid { x })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        self.unary(x, move |a| a * s, Op::Scale { x, s })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let out = Tensor::from_vec(av.shape(), av.data().iter().zip(bv.data()).map(|(&p, &q)| p + q).collect())?;
        let grad = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, grad))
    }

    /// Channel-wise concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.shape(a);
        let [nb, cb, hb, wb] = self.shape(b);
        if (n, h, w) != (nb, hb, wb) {
            return shape_err(format!("concat: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            data.extend_from_slice(&self.value(a).data()[s * ca * hw..(s + 1) * ca * hw]);
            data.extend_from_slice(&self.value(b).data()[s * cb * hw..(s + 1) * cb * hw]);
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data)?;
        let grad = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, grad))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap();
        let grad = self.any_grad(&[x]);
        self.push(Tensor::scalar(m), Op::Mean { x }, grad)
    }

    /// Mean absolute difference.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("l1: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let sum: f64 = av.iter().zip(bv).map(|(&p, &q)| (p - q).abs().to_f64().unwrap()).sum();
        let m = T::lit(sum / av.len() as f64);
        let grad = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(m), Op::L1Mean { a, b }, grad))
    }

    /// Mean over all spatial positions of the softmax cross-entropy between the
    /// channel logits and integer class labels (`labels.len() == N*H*W`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let [n, c, h, w] = self.shape(logits);
        let hw = h * w;
        if labels.len() != n * hw {
            return shape_err(format!("cross_entropy: {} labels for {n}x{h}x{w} logits", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return shape_err(format!("cross_entropy: label {bad} out of range for {c} classes"));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        for s in 0..n {
            let base = s * c * hw;
            for i in 0..hw {
                let at = |k: usize| base + k * hw + i;
                let mx = (0..c).map(|k| lv[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..c {
                    let e = (lv[at(k)] - mx).exp();
                    probs[at(k)] = e;
                    z += e;
                }
                for k in 0..c {
                    probs[at(k)] = probs[at(k)] / z;
                }
                let y = labels[s * hw + i] as usize;
                total += z.ln().to_f64().unwrap() + (mx - lv[at(y)]).to_f64().unwrap();
            }
        }
        let loss = T::lit(total / (n * hw) as f64);
        let grad = self.any_grad(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, probs, labels: labels.to_vec() }, grad))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(node, &gout, &mut grads);
        }
        Ok(Grads {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| if matches!(n.op, Op::Leaf) && n.grad { g } else { None })
                .collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn backprop_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, co } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let n = self.shape(*x)[0];
                let (k_rows, p, co) = (geom.rows(), geom.cols(), *co);
                let in_len = geom.c * geom.h * geom.w;
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let db = slot(grads, b, co);
                    for s in 0..n {
                        for (o, row) in gout[s * co * p..(s + 1) * co * p].chunks(p).enumerate() {
                            db[o] += row.iter().copied().sum::<T>();
                        }
                    }
                }
                let (need_w, need_x) = (self.needs(*w), self.needs(*x));
                let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { k_rows * p }];
                let mut dcols = vec![T::zero(); if geom.is_pointwise() || !need_x { 0 } else { k_rows * p }];
                for s in 0..n {
                    let gb = &gout[s * co * p..(s + 1) * co * p];
                    let xb = &xv[s * in_len..(s + 1) * in_len];
                    if need_w {
                        let src: &[T] = if geom.is_pointwise() {
                            xb
                        } else {
                            im2col(xb, geom, &mut cols);
                            &cols
                        };
                        let dw = slot(grads, *w, wv.len());
                        matmul(false, true, co, p, k_rows, gb, src, T::one(), dw);
                    }
                    if need_x {
                        let dx = slot(grads, *x, xv.len());
                        let dxb = &mut dx[s * in_len..(s + 1) * in_len];
                        if geom.is_pointwise() {
                            matmul(true, false, k_rows, co, p, wv, gb, T::one(), dxb);
                        } else {
                            matmul(true, false, k_rows, co, p, wv, gb, T::zero(), &mut dcols);
                            col2im(&dcols, geom, dxb);
                        }
                    }
                }
            }
            Op::ConvT2d { x, w, b, geom, ci } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let n = self.shape(*x)[0];
                let (k_rows, p, ci) = (geom.rows(), geom.cols(), *ci);
                let plane = geom.h * geom.w;
                let co = geom.c;
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let db = slot(grads, b, co);
                    for s in 0..n {
                        for (o, pl) in gout[s * co * plane..(s + 1) * co * plane].chunks(plane).enumerate() {
                            db[o] += pl.iter().copied().sum::<T>();
                        }
                    }
                }
                let (need_w, need_x) = (self.needs(*w), self.needs(*x));
                if !need_w && !need_x {
                    return;
                }
                let mut dcols = vec![T::zero(); k_rows * p];
                for s in 0..n {
                    im2col(&gout[s * co * plane..(s + 1) * co * plane], geom, &mut dcols);
                    if need_x {
                        let dx = slot(grads, *x, xv.len());
                        matmul(false, false, ci, k_rows, p, wv, &dcols, T::one(), &mut dx[s * ci * p..(s + 1) * ci * p]);
                    }
                    if need_w {
                        let dw = slot(grads, *w, wv.len());
                        matmul(false, true, ci, p, k_rows, &xv[s * ci * p..(s + 1) * ci * p], &dcols, T::one(), dw);
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.needs(*x) {
                    let dx = slot(grads, *x, self.value(*x).numel());
                    for (&g, &i) in gout.iter().zip(argmax) {
                        dx[i as usize] += g;
                    }
                }
            }
            Op::Upsample2 { x } => {
                if !self.needs(*x) {
                    return;
                }
                let [_, _, h, w] = self.shape(*x);
                let (ty, tx) = (upsample_taps::<T>(h), upsample_taps::<T>(w));
                let dx = slot(grads, *x, self.value(*x).numel());
                for (plane, go) in gout.chunks(4 * h * w).enumerate() {
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let g = go[oy * 2 * w + ox];
                            dst[y0 * w + x0] += wy0 * wx0 * g;
                            dst[y0 * w + x1] += wy0 * wx1 * g;
                            dst[y1 * w + x0] += wy1 * wx0 * g;
                            dst[y1 * w + x1] += wy1 * wx1 * g;
                        }
                    }
                }
            }
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
                let [_, c, h, w] = self.shape(*x);
                let hw = h * w;
                let count = T::from_usize(hw).unwrap();
                let gv = self.value(*gamma).data();
                let planes = inv_std.len();
                if self.needs(*beta) {
                    let db = slot(grads, *beta, c);
                    for plane in 0..planes {
                        db[plane % c] += gout[plane * hw..(plane + 1) * hw].iter().copied().sum::<T>();
                    }
                }
                if self.needs(*gamma) {
                    let dg = slot(grads, *gamma, c);
                    for plane in 0..planes {
                        let r = plane * hw..(plane + 1) * hw;
                        dg[plane % c] += gout[r.clone()].iter().zip(&xhat[r]).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
                if self.needs(*x) {
                    let dx = slot(grads, *x, planes * hw);
                    for plane in 0..planes {
                        let r = plane * hw..(plane + 1) * hw;
                        let g = gv[plane % c];
                        let (go, xh) = (&gout[r.clone()], &xhat[r.clone()]);
                        let sum_d = go.iter().copied().sum::<T>() * g;
                        let sum_dx = go.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * g;
                        let scale = inv_std[plane] / count;
                        for ((d, &a), &xh) in dx[r].iter_mut().zip(go).zip(xh) {
                            *d += scale * (count * a * g - sum_d - xh * sum_dx);
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let dx = slot(grads, *x, y.len());
                    for i in 0..y.len() {
                        if y[i] > T::zero() {
                            dx[i] += gout[i];
                        }
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    let dx = slot(grads, *x, xv.len());
                    for i in 0..xv.len() {
                        dx[i] += if xv[i] > T::zero() { gout[i] } else { gout[i] * *slope };
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let dx = slot(grads, *x, y.len());
                    for i in 0..y.len() {
                        dx[i] += gout[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(*v) {
                        let d = slot(grads, *v, gout.len());
                        d.iter_mut().zip(gout).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.shape(*a);
                let cb = self.shape(*b)[1];
                let hw = h * w;
                for s in 0..n {
                    let base = s * (ca + cb) * hw;
                    if self.needs(*a) {
                        let d = slot(grads, *a, n * ca * hw);
                        d[s * ca * hw..(s + 1) * ca * hw]
                            .iter_mut()
                            .zip(&gout[base..base + ca * hw])
                            .for_each(|(d, &g)| *d += g);
                    }
                    if self.needs(*b) {
                        let d = slot(grads, *b, n * cb * hw);
                        d[s * cb * hw..(s + 1) * cb * hw]
                            .iter_mut()
                            .zip(&gout[base + ca * hw..base + (ca + cb) * hw])
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Scale { x, s } => {
                if self.needs(*x) {
                    let d = slot(grads, *x, gout.len());
                    d.iter_mut().zip(gout).for_each(|(d, &g)| *d += g * *s);
                }
            }
            Op::Mean { x } => {
                if self.needs(*x) {
                    let n = self.value(*x).numel();
                    let g = gout[0] / T::from_usize(n).unwrap();
                    slot(grads, *x, n).iter_mut().for_each(|d| *d += g);
                }
            }
            Op::L1Mean { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let g = gout[0] / T::from_usize(av.len()).unwrap();
                let sign = |i: usize| {
                    let d = av[i] - bv[i];
                    if d > T::zero() {
                        g
                    } else if d < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                };
                if self.needs(*a) {
                    let d = slot(grads, *a, av.len());
                    (0..av.len()).for_each(|i| d[i] += sign(i));
                }
                if self.needs(*b) {
                    let d = slot(grads, *b, bv.len());
                    (0..bv.len()).for_each(|i| d[i] = d[i] - sign(i));
                }
            }
            Op::CrossEntropy { logits, probs, labels } => {
                if !self.needs(*logits) {
                    return;
                }
                let [_, c, h, w] = self.shape(*logits);
                let hw = h * w;
                let g = gout[0] / T::from_usize(labels.len()).unwrap();
                let d = slot(grads, *logits, probs.len());
                for (j, &y) in labels.iter().enumerate() {
                    let (s, i) = (j / hw, j % hw);
                    for k in 0..c {
                        let at = s * c * hw + k * hw + i;
                        let onehot = if k == y as usize { T::one() } else { T::zero() };
                        d[at] += g * (probs[at] - onehot);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_vec(shape, (0..shape.iter().product()).map(f).collect()).unwrap()
    }

    /// Central-difference check of d(loss)/d(leaf) for every element of every leaf.
    fn check(leaves: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|l| g.leaf(l.clone(), true)).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        let eval = |ls: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vs: Vec<Var> = ls.iter().map(|l| g.leaf(l.clone(), false)).collect();
            let l = build(&mut g, &vs);
            g.value(l).item()
        };
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[li]);
            for e in 0..leaf.numel() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[e] += eps;
                let mut minus = leaves.clone();
                minus[li].data_mut()[e] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data()[e];
                assert!(
                    (a - numeric).abs() <= 1e-6 + 1e-5 * numeric.abs(),
                    "leaf {li} elem {e}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    fn wave(i: usize) -> f64 {
        ((i as f64) * 0.731).sin() + 0.1 * ((i as f64) * 1.37).cos()
    }

    #[test]
    fn conv2d_gradients() {
        for &(k, s, p) in &[(3, 1, 1), (4, 2, 1), (1, 1, 0), (3, 2, 1)] {
            check(
                vec![t([2, 2, 6, 6], wave), t([3, 2, k, k], |i| wave(i + 7)), t([1, 3, 1, 1], |i| wave(i + 3))],
                |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), s, p).unwrap();
                    let y = g.sigmoid(y);
                    g.mean(y)
                },
            );
        }
    }

    #[test]
    fn conv_transpose_gradients_and_size() {
        check(
            vec![t([2, 3, 3, 4], wave), t([3, 2, 3, 3], |i| wave(i + 5)), t([1, 2, 1, 1], |i| wave(i + 1))],
            |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1).unwrap();
                assert_eq!(g.shape(y), [2, 2, 6, 8]);
                let y = g.sigmoid(y);
                g.mean(y)
            },
        );
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with the same weights.
        let x = t([1, 2, 8, 8], wave);
        let y = t([1, 3, 4, 4], |i| wave(i + 11));
        let w = t([3, 2, 3, 3], |i| wave(i + 2));
        let mut g = Graph::new();
        let (xv, yv) = (g.input(x.clone()), g.input(y.clone()));
        let wv = g.input(w);
        let cx = g.conv2d(xv, wv, None, 2, 1).unwrap();
        let ty = g.conv_transpose2d(yv, wv, None, 2, 1, 1).unwrap();
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pooling_upsample_norm_gradients() {
        check(vec![t([1, 2, 4, 6], wave), t([1, 2, 1, 1], |i| 1.0 + wave(i)), t([1, 2, 1, 1], wave)], |g, v| {
            let y = g.instance_norm(v[0], v[1], v[2]).unwrap();
            let y = g.leaky_relu(y, 0.2);
            let p = g.max_pool2(y).unwrap();
            let u = g.upsample2(p);
            let u = g.sigmoid(u);
            g.mean(u)
        });
    }

    #[test]
    fn concat_add_scale_l1_ce_gradients() {
        let labels: Vec<u8> = (0..2 * 3 * 2).map(|i| (i * 7 % 4) as u8).collect();
        check(vec![t([2, 2, 3, 2], wave), t([2, 2, 3, 2], |i| wave(i + 9)), t([2, 4, 3, 2], |i| wave(i + 4))], |g, v| {
            let c = g.concat(v[0], v[1]).unwrap();
            let s = g.add(c, v[2]).unwrap();
            let ce = g.cross_entropy(s, &labels).unwrap();
            let r = g.relu(v[1]);
            let l1 = g.l1_mean(v[0], r).unwrap();
            let l1 = g.scale(l1, 0.5);
            g.add(ce, l1).unwrap()
        });
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t([1, 1, 4, 4], wave), false);
        let w = g.leaf(t([2, 1, 3, 3], wave), true);
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let d = g.detach(y);
        let m = g.mean(d);
        let m2 = g.mean(y);
        let total = g.add(m, m2).unwrap();
        let grads = g.backward(total).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
        assert!(!g.requires_grad(d));
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros([1, 2, 5, 5]));
        let w = g.input(Tensor::zeros([3, 1, 3, 3]));
        assert!(g.conv2d(x, w, None, 1, 1).is_err());
        assert!(g.max_pool2(x).is_err());
        assert!(g.cross_entropy(x, &[0; 3]).is_err());
    }
}
