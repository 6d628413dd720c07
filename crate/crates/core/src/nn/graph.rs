//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operator appends a node holding its output value. `backward`
//! walks the tape in reverse and accumulates exact gradients for every node
//! that depends on a parameter or a variable.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::kernels::{self, ConvGeom, ConvShape};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Reshape(Var),
    Mul(Var, Var),
    Add(Var, Var),
    Concat(Var, Var),
    ChannelMeanMax { x: Var, argmax: Vec<usize> },
    Upsample(Var),
    SoftmaxChannels(Var),
    CrossEntropy { logits: Var, target: Vec<u8> },
    Scale(Var, f64),
    Dot(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    param_vars: HashMap<usize, Var>,
}

fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut out = [1; 4];
    let off = 4 - shape.len();
    out[off..].copy_from_slice(shape);
    out
}

fn strides4(shape: [usize; 4]) -> [usize; 4] {
    [shape[1] * shape[2] * shape[3], shape[2] * shape[3], shape[3], 1]
}

/// For each element of `a`, the linear index of the broadcast element of `b`.
fn broadcast_index(a: [usize; 4], b: [usize; 4]) -> impl Fn(usize) -> usize {
    let sa = strides4(a);
    let sb = strides4(b);
    let eff: [usize; 4] = std::array::from_fn(|d| if b[d] == 1 { 0 } else { sb[d] });
    move |i| {
        let mut rem = i;
        let mut j = 0;
        for d in 0..4 {
            let idx = rem / sa[d];
            rem -= idx * sa[d];
            j += idx * eff[d];
        }
        j
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input whose gradient is tracked (for gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Leaf bound to parameter `id` of `store`; repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        if geom.dilation == 0 || geom.stride == 0 {
            return Err(Error::shape("conv2d", "stride and dilation must be at least 1"));
        }
        let (n, cin, h, wd) = self.value(x).dims4("conv2d")?;
        let (cout, wcin, kh, kw) = self.value(w).dims4("conv2d weights")?;
        if wcin != cin {
            return Err(Error::shape("conv2d", format!("input channels {cin} != weight input channels {wcin}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv2d", format!("bias shape {:?} != [{cout}]", self.value(b).shape())));
            }
        }
        let ho = geom.out_size(h, kh).ok_or_else(|| Error::shape("conv2d", format!("height {h} too small for kernel")))?;
        let wo = geom.out_size(wd, kw).ok_or_else(|| Error::shape("conv2d", format!("width {wd} too small for kernel")))?;
        let s = ConvShape { cin, h, w: wd, kh, kw, ho, wo, geom };
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        let mut col = Vec::new();
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            let od = out.data_mut();
            for i in 0..n {
                kernels::conv_forward_sample(
                    &xv[i * cin * h * wd..(i + 1) * cin * h * wd],
                    wv,
                    bv,
                    cout,
                    &s,
                    &mut col,
                    &mut od[i * cout * ho * wo..(i + 1) * cout * ho * wo],
                );
            }
        }
        let ng = self.ng(&[x, w]) || b.is_some_and(|b| self.ng(&[b]));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(t, Op::Sigmoid(x), ng)
    }

    /// 2x2 max pooling with stride 2 (floor); ties keep the first maximum.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("max_pool2d")?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape("max_pool2d", format!("input {h}x{w} too small")));
        }
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let od = out.data_mut();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    od[(plane * ho + oy) * wo + ox] = xv[best];
                    argmax.push(best);
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::MaxPool2d { x, argmax }, ng))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let xv = self.value(x).data();
        let hw = h * w;
        let data = (0..n * c).map(|p| xv[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        let t = Tensor::new(vec![n, c, 1, 1], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::GlobalAvgPool(x), ng))
    }

    /// `x [N, in] -> x w^T + b`, with `w [out, in]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = match self.value(x).shape() {
            &[n, f] => (n, f),
            s => return Err(Error::shape("fully_connected", format!("expected [N, in], got {s:?}"))),
        };
        let (fout, win) = match self.value(w).shape() {
            &[o, i] => (o, i),
            s => return Err(Error::shape("fully_connected", format!("expected weights [out, in], got {s:?}"))),
        };
        if win != fin {
            return Err(Error::shape("fully_connected", format!("input features {fin} != weight input features {win}")));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut data = vec![0.0; n * fout];
        for i in 0..n {
            for o in 0..fout {
                let mut acc = bv.map_or(0.0, |b| b[o]);
                for k in 0..fin {
                    acc += xv[i * fin + k] * wv[o * fin + k];
                }
                data[i * fout + o] = acc;
            }
        }
        let t = Tensor::new(vec![n, fout], data)?;
        let ng = self.ng(&[x, w]) || b.is_some_and(|b| self.ng(&[b]));
        Ok(self.push(t, Op::Linear { x, w, b }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Element-wise product; `b` broadcasts over any axis where its extent is 1.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len() || sa.len() > 4 || sa.iter().zip(sb).any(|(&x, &y)| y != x && y != 1) {
            return Err(Error::shape("mul", format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let map = broadcast_index(pad4(sa), pad4(sb));
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = av.iter().enumerate().map(|(i, &v)| v * bv[map(i)]).collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4("concat")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat", format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let hw = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            data.extend_from_slice(&av[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&bv[i * cb * hw..(i + 1) * cb * hw]);
        }
        let t = Tensor::new(vec![n, ca + cb, h, w], data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Concat(a, b), ng))
    }

    /// Per-pixel mean and max over channels, stacked as `[N, 2, H, W]`.
    pub fn channel_mean_max(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("channel_mean_max")?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut data = vec![0.0; n * 2 * hw];
        let mut argmax = vec![0usize; n * hw];
        for i in 0..n {
            for p in 0..hw {
                let mut sum = 0.0;
                let mut best = 0;
                for ch in 0..c {
                    let v = xv[(i * c + ch) * hw + p];
                    sum += v;
                    if v > xv[(i * c + best) * hw + p] {
                        best = ch;
                    }
                }
                data[(i * 2) * hw + p] = sum / c as f64;
                data[(i * 2 + 1) * hw + p] = xv[(i * c + best) * hw + p];
                argmax[i * hw + p] = best;
            }
        }
        let t = Tensor::new(vec![n, 2, h, w], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::ChannelMeanMax { x, argmax }, ng))
    }

    /// Corner-aligned bilinear resize of every plane to `out_h x out_w`.
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("bilinear_upsample")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_upsample", "output size must be positive"));
        }
        let ty = kernels::bilinear_table(h, out_h);
        let tx = kernels::bilinear_table(w, out_w);
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        let od = out.data_mut();
        for p in 0..n * c {
            kernels::upsample_plane(&xv[p * h * w..(p + 1) * h * w], h, w, &ty, &tx, &mut od[p * out_h * out_w..(p + 1) * out_h * out_w]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Upsample(x), ng))
    }

    /// Softmax over the channel axis at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let t = softmax_channels(self.value(x))?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::SoftmaxChannels(x), ng))
    }

    /// Mean over pixels and batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: &[u8]) -> Result<Var> {
        let (n, c, h, w) = self.value(logits).dims4("pixel_cross_entropy")?;
        if target.len() != n * h * w {
            return Err(Error::shape("pixel_cross_entropy", format!("{} targets for {n}x{h}x{w} logits", target.len())));
        }
        if let Some(&t) = target.iter().find(|&&t| t as usize >= c) {
            return Err(Error::shape("pixel_cross_entropy", format!("target class {t} out of range for {c} channels")));
        }
        let lv = self.value(logits).data();
        let hw = h * w;
        let mut loss = 0.0;
        for i in 0..n {
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(lv[(i * c + ch) * hw + p]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    z += (lv[(i * c + ch) * hw + p] - m).exp();
                }
                let t = target[i * hw + p] as usize;
                loss += m + z.ln() - lv[(i * c + t) * hw + p];
            }
        }
        let value = Tensor::scalar(loss / (n * hw) as f64);
        let ng = self.ng(&[logits]);
        Ok(self.push(value, Op::CrossEntropy { logits, target: target.to_vec() }, ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(t, Op::Scale(x, factor), ng)
    }

    /// `sum(x * weights)` as a scalar.
    pub fn dot(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(Error::shape("dot", format!("{:?} vs {:?}", self.value(x).shape(), weights.shape())));
        }
        let s = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(x, weights), ng))
    }

    /// Hash of every piecewise-linear branch taken in the forward pass (ReLU
    /// signs and max selections). Two evaluations with equal signatures lie
    /// on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => node.value.data().iter().for_each(|v| (*v > 0.0).hash(&mut h)),
                Op::MaxPool2d { argmax, .. } | Op::ChannelMeanMax { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradient of `v` from the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::NoForwardPass);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads, &mut col, &mut dcol);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>], col: &mut Vec<f64>, dcol: &mut Vec<f64>) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let shape_of = |v: Var| self.nodes[v.0].value.shape().to_vec();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (n, cin, h, wd) = xt.dims4("conv2d").expect("checked in forward");
                let (cout, _, kh, kw) = wt.dims4("conv2d").expect("checked in forward");
                let (_, _, ho, wo) = out.dims4("conv2d").expect("checked in forward");
                let s = ConvShape { cin, h, w: wd, kh, kw, ho, wo, geom: *geom };
                let mut dw = Tensor::zeros(wt.shape());
                let mut db = b.map(|_| Tensor::zeros(&[cout]));
                let need_dx = self.nodes[x.0].needs_grad;
                let mut dx = need_dx.then(|| Tensor::zeros(xt.shape()));
                let (xin, oin) = (cin * h * wd, cout * ho * wo);
                for i in 0..n {
                    kernels::conv_backward_sample(
                        &xt.data()[i * xin..(i + 1) * xin],
                        wt.data(),
                        &g.data()[i * oin..(i + 1) * oin],
                        cout,
                        &s,
                        col,
                        dcol,
                        dw.data_mut(),
                        db.as_mut().map(|d| d.data_mut()),
                        dx.as_mut().map(|d| &mut d.data_mut()[i * xin..(i + 1) * xin]),
                    );
                }
                self.accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Relu(x) => {
                let data = g.data().iter().zip(out.data()).map(|(&gv, &o)| if o > 0.0 { gv } else { 0.0 }).collect();
                self.accumulate(grads, *x, Tensor::new(shape_of(*x), data).expect("shape"));
            }
            Op::Sigmoid(x) => {
                let data = g.data().iter().zip(out.data()).map(|(&gv, &s)| gv * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, Tensor::new(shape_of(*x), data).expect("shape"));
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = Tensor::zeros(&shape_of(*x));
                let d = dx.data_mut();
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += g.data()[o];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let shape = shape_of(*x);
                let hw = shape[2] * shape[3];
                let data = (0..shape.iter().product::<usize>()).map(|i| g.data()[i / hw] / hw as f64).collect();
                self.accumulate(grads, *x, Tensor::new(shape, data).expect("shape"));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                let mut dx = vec![0.0; n * fin];
                let mut dw = vec![0.0; fout * fin];
                let mut db = vec![0.0; fout];
                for i in 0..n {
                    for o in 0..fout {
                        let go = g.data()[i * fout + o];
                        db[o] += go;
                        for k in 0..fin {
                            dx[i * fin + k] += go * wv.data()[o * fin + k];
                            dw[o * fin + k] += go * xv.data()[i * fin + k];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, fin], dx).expect("shape"));
                self.accumulate(grads, *w, Tensor::new(vec![fout, fin], dw).expect("shape"));
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::new(vec![fout], db).expect("shape"));
                }
            }
            Op::Reshape(x) => {
                let t = g.clone().reshaped(&shape_of(*x)).expect("same size");
                self.accumulate(grads, *x, t);
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (shape_of(*a), shape_of(*b));
                let map = broadcast_index(pad4(&sa), pad4(&sb));
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].needs_grad {
                    let data = g.data().iter().enumerate().map(|(i, &gv)| gv * bv[map(i)]).collect();
                    self.accumulate(grads, *a, Tensor::new(sa.clone(), data).expect("shape"));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = Tensor::zeros(&sb);
                    let d = db.data_mut();
                    for (i, &gv) in g.data().iter().enumerate() {
                        d[map(i)] += gv * av[i];
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (shape_of(*a), shape_of(*b));
                let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut dbv = Vec::with_capacity(n * cb * hw);
                for i in 0..n {
                    let base = i * (ca + cb) * hw;
                    da.extend_from_slice(&g.data()[base..base + ca * hw]);
                    dbv.extend_from_slice(&g.data()[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(grads, *a, Tensor::new(sa, da).expect("shape"));
                self.accumulate(grads, *b, Tensor::new(sb, dbv).expect("shape"));
            }
            Op::ChannelMeanMax { x, argmax } => {
                let shape = shape_of(*x);
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut dx = Tensor::zeros(&shape);
                let d = dx.data_mut();
                for i in 0..n {
                    for p in 0..hw {
                        let gm = g.data()[(i * 2) * hw + p] / c as f64;
                        for ch in 0..c {
                            d[(i * c + ch) * hw + p] += gm;
                        }
                        d[(i * c + argmax[i * hw + p]) * hw + p] += g.data()[(i * 2 + 1) * hw + p];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample(x) => {
                let shape = shape_of(*x);
                let (h, w) = (shape[2], shape[3]);
                let (_, _, ho, wo) = out.dims4("upsample").expect("rank 4");
                let ty = kernels::bilinear_table(h, ho);
                let tx = kernels::bilinear_table(w, wo);
                let mut dx = Tensor::zeros(&shape);
                let planes = shape[0] * shape[1];
                let d = dx.data_mut();
                for p in 0..planes {
                    kernels::upsample_plane_backward(&g.data()[p * ho * wo..(p + 1) * ho * wo], w, &ty, &tx, &mut d[p * h * w..(p + 1) * h * w]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxChannels(x) => {
                let (n, c, h, w) = out.dims4("softmax").expect("rank 4");
                let hw = h * w;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let d = dx.data_mut();
                let (s, gd) = (out.data(), g.data());
                for i in 0..n {
                    for p in 0..hw {
                        let dotp: f64 = (0..c).map(|ch| gd[(i * c + ch) * hw + p] * s[(i * c + ch) * hw + p]).sum();
                        for ch in 0..c {
                            let k = (i * c + ch) * hw + p;
                            d[k] = s[k] * (gd[k] - dotp);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, target } => {
                let lt = self.value(*logits);
                let mut probs = softmax_channels(lt).expect("rank 4");
                let (n, c, h, w) = lt.dims4("ce").expect("rank 4");
                let hw = h * w;
                let scale = g.item() / (n * hw) as f64;
                let d = probs.data_mut();
                for i in 0..n {
                    for p in 0..hw {
                        let t = target[i * hw + p] as usize;
                        d[(i * c + t) * hw + p] -= 1.0;
                    }
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, probs);
            }
            Op::Scale(x, f) => {
                let data = g.data().iter().map(|v| v * f).collect();
                self.accumulate(grads, *x, Tensor::new(shape_of(*x), data).expect("shape"));
            }
            Op::Dot(x, weights) => {
                let gv = g.item();
                let data = weights.data().iter().map(|w| w * gv).collect();
                self.accumulate(grads, *x, Tensor::new(shape_of(*x), data).expect("shape"));
            }
        }
    }

    /// Adds parameter gradients from the last backward pass into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        if self.grads.is_empty() {
            return Err(Error::NoForwardPass);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                store.grad_mut(*id).add_assign(g);
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Channel softmax of an NCHW tensor.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("softmax_channels")?;
    let hw = h * w;
    let xv = x.data();
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for i in 0..n {
        for p in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(xv[(i * c + ch) * hw + p]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                let e = (xv[(i * c + ch) * hw + p] - m).exp();
                od[(i * c + ch) * hw + p] = e;
                z += e;
            }
            for ch in 0..c {
                od[(i * c + ch) * hw + p] /= z;
            }
        }
    }
    Ok(out)
}
