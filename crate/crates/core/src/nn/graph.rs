use std::collections::HashMap;

use super::kernels::{self, ConvDims, TConvDims};
use super::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct AttnCache {
    // per (batch, position) sequence, row-major [F, C] or [F, F]
    u: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    a: Vec<f32>,
    o: Vec<f32>,
}

enum Op {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize },
    TemporalConv { x: usize, w: usize, b: usize },
    Linear { x: usize, w: usize, b: usize },
    ChannelBias { x: usize, e: usize },
    Add(usize, usize),
    Scale(usize, f32),
    Silu(usize),
    LeakyRelu(usize, f32),
    AvgPool2(usize),
    Upsample2(usize),
    TemporalAttention {
        x: usize,
        wq: usize,
        wk: usize,
        wv: usize,
        wo: usize,
        bo: usize,
        pos: usize,
        cache: AttnCache,
    },
    Mse(usize, usize),
    MeanSquare(usize),
    SoftplusMean(usize, f32),
    WeightedSum(Vec<(usize, f32)>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A single forward pass. Build it, read values, optionally call
/// [`Graph::backward`] on a scalar.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
}

pub struct Grads {
    grads: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }
}

fn split_image(shape: &[usize]) -> (usize, usize, usize, usize) {
    let r = shape.len();
    assert!(r >= 3, "image op needs rank >= 3, got {shape:?}");
    let n = shape[..r - 3].iter().product();
    (n, shape[r - 3], shape[r - 2], shape[r - 1])
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// `out[r] = sum_c m[r, c] * v[c]`, m row-major `[rows, cols]`.
fn matvec(m: &[f32], v: &[f32], rows: usize, cols: usize, out: &mut [f32]) {
    for r in 0..rows {
        out[r] = m[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

/// `out[c] += sum_r m[r, c] * v[r]`.
fn matvec_t_acc(m: &[f32], v: &[f32], rows: usize, cols: usize, out: &mut [f32]) {
    for r in 0..rows {
        let vr = v[r];
        for (o, mv) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *o += mv * vr;
        }
    }
}

/// `m[r, c] += a[r] * b[c]`.
fn outer_acc(m: &mut [f32], a: &[f32], b: &[f32]) {
    let cols = b.len();
    for (r, ar) in a.iter().enumerate() {
        for (mv, bv) in m[r * cols..(r + 1) * cols].iter_mut().zip(b) {
            *mv += ar * bv;
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&n) = self.params.get(&id) {
            return Var(n);
        }
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.params.insert(id, v.0);
        v
    }

    /// Copies a value into a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.input(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Same-padded 2-D convolution over the last three dims `[C, H, W]`;
    /// all leading dims are treated as batch.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, ci, h, wd) = split_image(&xs);
        assert_eq!(ws.len(), 4, "conv weight must be [O, I, k, k]");
        assert_eq!(ws[1], ci, "conv input channels");
        assert_eq!(ws[2], ws[3]);
        assert!(ws[2] % 2 == 1, "odd kernel only");
        let d = ConvDims {
            n,
            ci,
            co: ws[0],
            h,
            w: wd,
            k: ws[2],
        };
        let out = kernels::conv2d_forward(
            &self.nodes[x.0].value.data,
            &self.nodes[w.0].value.data,
            &self.nodes[b.0].value.data,
            &d,
        );
        let mut os = xs.clone();
        let r = os.len();
        os[r - 3] = ws[0];
        self.push(Tensor::new(&os, out), Op::Conv2d { x: x.0, w: w.0, b: b.0 })
    }

    /// Convolution along the frame axis of a `[B, F, C, H, W]` tensor.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 5, "temporal conv input must be [B, F, C, H, W]");
        assert_eq!(ws.len(), 3, "temporal conv weight must be [O, I, k]");
        assert_eq!(ws[1], xs[2]);
        assert!(ws[2] % 2 == 1, "odd kernel only");
        let d = TConvDims {
            b: xs[0],
            f: xs[1],
            ci: xs[2],
            co: ws[0],
            hw: xs[3] * xs[4],
            k: ws[2],
        };
        let out = kernels::tconv_forward(
            &self.nodes[x.0].value.data,
            &self.nodes[w.0].value.data,
            &self.nodes[b.0].value.data,
            &d,
        );
        let os = [xs[0], xs[1], ws[0], xs[3], xs[4]];
        self.push(Tensor::new(&os, out), Op::TemporalConv { x: x.0, w: w.0, b: b.0 })
    }

    /// `x [N, I]`, `w [O, I]`, `b [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(ws[1], xs[1]);
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            matvec(wv, &xv[r * i..(r + 1) * i], o, i, &mut out[r * o..(r + 1) * o]);
            for (ov, bb) in out[r * o..(r + 1) * o].iter_mut().zip(bv) {
                *ov += bb;
            }
        }
        self.push(Tensor::new(&[n, o], out), Op::Linear { x: x.0, w: w.0, b: b.0 })
    }

    /// Adds a per-(batch, channel) bias `e [B, C]` to `x [B, F, C, H, W]`.
    pub fn channel_bias(&mut self, x: Var, e: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let es = self.shape(e).to_vec();
        assert_eq!(xs.len(), 5);
        assert_eq!(es, vec![xs[0], xs[2]]);
        let hw = xs[3] * xs[4];
        let mut out = self.nodes[x.0].value.data.clone();
        let ev = &self.nodes[e.0].value.data;
        for bi in 0..xs[0] {
            for f in 0..xs[1] {
                for c in 0..xs[2] {
                    let base = ((bi * xs[1] + f) * xs[2] + c) * hw;
                    let bias = ev[bi * xs[2] + c];
                    for v in &mut out[base..base + hw] {
                        *v += bias;
                    }
                }
            }
        }
        self.push(Tensor::new(&xs, out), Op::ChannelBias { x: x.0, e: e.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out: Vec<f32> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let s = self.shape(a).to_vec();
        self.push(Tensor::new(&s, out), Op::Add(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor::new(&t.shape, t.data.iter().map(|x| x * k).collect());
        self.push(out, Op::Scale(a.0, k))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor::new(&t.shape, t.data.iter().map(|&x| silu(x)).collect());
        self.push(out, Op::Silu(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor::new(
            &t.shape,
            t.data.iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect(),
        );
        self.push(out, Op::LeakyRelu(a.0, slope))
    }

    /// 2x2 mean pooling over the last two dims.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let xs = self.shape(a).to_vec();
        let (n, c, h, w) = split_image(&xs);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let x = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &x[p * h * w..];
            for y in 0..oh {
                for xx in 0..ow {
                    let s = src[2 * y * w + 2 * xx]
                        + src[2 * y * w + 2 * xx + 1]
                        + src[(2 * y + 1) * w + 2 * xx]
                        + src[(2 * y + 1) * w + 2 * xx + 1];
                    out[p * oh * ow + y * ow + xx] = 0.25 * s;
                }
            }
        }
        let mut os = xs;
        let r = os.len();
        os[r - 2] = oh;
        os[r - 1] = ow;
        self.push(Tensor::new(&os, out), Op::AvgPool2(a.0))
    }

    /// Nearest-neighbour 2x upsampling over the last two dims.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let xs = self.shape(a).to_vec();
        let (n, c, h, w) = split_image(&xs);
        let (oh, ow) = (h * 2, w * 2);
        let x = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[p * oh * ow + y * ow + xx] = x[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let mut os = xs;
        let r = os.len();
        os[r - 2] = oh;
        os[r - 1] = ow;
        self.push(Tensor::new(&os, out), Op::Upsample2(a.0))
    }

    /// Self-attention along the frame axis of `x [B, F, C, H, W]`,
    /// independently at every spatial position.
    ///
    /// Queries and keys see `x + pos[f]` (learned per-frame-index
    /// embedding, `pos [F_max, C]`); values see `x` alone. Returns the
    /// projected attention output only; callers add the residual.
    #[allow(clippy::too_many_arguments)]
    pub fn temporal_attention(
        &mut self,
        x: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
        bo: Var,
        pos: Var,
    ) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 5);
        let (b, f, c, hw) = (xs[0], xs[1], xs[2], xs[3] * xs[4]);
        let ps = self.shape(pos).to_vec();
        assert!(ps[0] >= f && ps[1] == c, "positional table too small for {f} frames");
        let scale = 1.0 / (c as f32).sqrt();
        let xv = &self.nodes[x.0].value.data;
        let (mq, mk, mv, mo) = (
            &self.nodes[wq.0].value.data,
            &self.nodes[wk.0].value.data,
            &self.nodes[wv.0].value.data,
            &self.nodes[wo.0].value.data,
        );
        let bov = &self.nodes[bo.0].value.data;
        let pv = &self.nodes[pos.0].value.data;
        let seqs = b * hw;
        let mut cache = AttnCache {
            u: vec![0.0; seqs * f * c],
            q: vec![0.0; seqs * f * c],
            k: vec![0.0; seqs * f * c],
            v: vec![0.0; seqs * f * c],
            a: vec![0.0; seqs * f * f],
            o: vec![0.0; seqs * f * c],
        };
        let mut out = vec![0.0; xv.len()];
        let mut xt = vec![0.0; c];
        let mut y = vec![0.0; c];
        for bi in 0..b {
            for p in 0..hw {
                let s = bi * hw + p;
                let base = s * f * c;
                for fi in 0..f {
                    for ch in 0..c {
                        xt[ch] = xv[((bi * f + fi) * c + ch) * hw + p];
                        cache.u[base + fi * c + ch] = xt[ch] + pv[fi * c + ch];
                    }
                    let u = &cache.u[base + fi * c..base + (fi + 1) * c];
                    matvec(mq, u, c, c, &mut cache.q[base + fi * c..base + (fi + 1) * c]);
                    matvec(mk, u, c, c, &mut cache.k[base + fi * c..base + (fi + 1) * c]);
                    matvec(mv, &xt, c, c, &mut cache.v[base + fi * c..base + (fi + 1) * c]);
                }
                let abase = s * f * f;
                for fi in 0..f {
                    let q = &cache.q[base + fi * c..base + (fi + 1) * c];
                    let row = &mut cache.a[abase + fi * f..abase + (fi + 1) * f];
                    for (gi, r) in row.iter_mut().enumerate() {
                        let k = &cache.k[base + gi * c..base + (gi + 1) * c];
                        *r = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                    }
                    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        z += *r;
                    }
                    for r in row.iter_mut() {
                        *r /= z;
                    }
                    let o = &mut cache.o[base + fi * c..base + (fi + 1) * c];
                    o.fill(0.0);
                    for gi in 0..f {
                        let a = cache.a[abase + fi * f + gi];
                        for (ov, vv) in o.iter_mut().zip(&cache.v[base + gi * c..base + (gi + 1) * c]) {
                            *ov += a * vv;
                        }
                    }
                    matvec(mo, o, c, c, &mut y);
                    for ch in 0..c {
                        out[((bi * f + fi) * c + ch) * hw + p] = y[ch] + bov[ch];
                    }
                }
            }
        }
        self.push(
            Tensor::new(&xs, out),
            Op::TemporalAttention {
                x: x.0,
                wq: wq.0,
                wk: wk.0,
                wv: wv.0,
                wo: wo.0,
                bo: bo.0,
                pos: pos.0,
                cache,
            },
        )
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shape mismatch");
        let n = self.value(a).numel() as f64;
        let s: f64 = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum();
        self.push(Tensor::scalar((s / n) as f32), Op::Mse(a.0, b.0))
    }

    pub fn mean_square(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s: f64 = t.data.iter().map(|&x| (x as f64) * (x as f64)).sum();
        let v = (s / t.numel() as f64) as f32;
        self.push(Tensor::scalar(v), Op::MeanSquare(a.0))
    }

    /// `mean(softplus(sign * a))`: with sign −1 this is the non-saturating
    /// "real" logit loss, with sign +1 the "fake" one.
    pub fn softplus_mean(&mut self, a: Var, sign: f32) -> Var {
        let t = &self.nodes[a.0].value;
        let s: f64 = t.data.iter().map(|&x| softplus(sign * x) as f64).sum();
        let v = (s / t.numel() as f64) as f32;
        self.push(Tensor::scalar(v), Op::SoftplusMean(a.0, sign))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let mut s = 0.0f32;
        for (v, w) in terms {
            assert_eq!(self.value(*v).numel(), 1, "weighted_sum takes scalars");
            s += w * self.value(*v).item();
        }
        let terms = terms.iter().map(|(v, w)| (v.0, *w)).collect();
        self.push(Tensor::scalar(s), Op::WeightedSum(terms))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut g: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(vec![1.0]);

        fn acc(g: &mut [Option<Vec<f32>>], i: usize, d: Vec<f32>) {
            match &mut g[i] {
                Some(e) => {
                    for (a, b) in e.iter_mut().zip(d) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(d),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dout) = g[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b } => {
                    let xs = &self.nodes[*x].value.shape;
                    let ws = &self.nodes[*w].value.shape;
                    let (n, ci, h, wd) = split_image(xs);
                    let d = ConvDims {
                        n,
                        ci,
                        co: ws[0],
                        h,
                        w: wd,
                        k: ws[2],
                    };
                    let (dx, dw, db) = kernels::conv2d_backward(
                        &self.nodes[*x].value.data,
                        &self.nodes[*w].value.data,
                        &dout,
                        &d,
                    );
                    acc(&mut g, *x, dx);
                    acc(&mut g, *w, dw);
                    acc(&mut g, *b, db);
                }
                Op::TemporalConv { x, w, b } => {
                    let xs = &self.nodes[*x].value.shape;
                    let ws = &self.nodes[*w].value.shape;
                    let d = TConvDims {
                        b: xs[0],
                        f: xs[1],
                        ci: xs[2],
                        co: ws[0],
                        hw: xs[3] * xs[4],
                        k: ws[2],
                    };
                    let (dx, dw, db) = kernels::tconv_backward(
                        &self.nodes[*x].value.data,
                        &self.nodes[*w].value.data,
                        &dout,
                        &d,
                    );
                    acc(&mut g, *x, dx);
                    acc(&mut g, *w, dw);
                    acc(&mut g, *b, db);
                }
                Op::Linear { x, w, b } => {
                    let xs = &self.nodes[*x].value.shape;
                    let (n, i) = (xs[0], xs[1]);
                    let o = self.nodes[*w].value.shape[0];
                    let xv = &self.nodes[*x].value.data;
                    let wv = &self.nodes[*w].value.data;
                    let mut dx = vec![0.0; n * i];
                    let mut dw = vec![0.0; o * i];
                    let mut db = vec![0.0; o];
                    for r in 0..n {
                        let gr = &dout[r * o..(r + 1) * o];
                        matvec_t_acc(wv, gr, o, i, &mut dx[r * i..(r + 1) * i]);
                        outer_acc(&mut dw, gr, &xv[r * i..(r + 1) * i]);
                        for (d, gg) in db.iter_mut().zip(gr) {
                            *d += gg;
                        }
                    }
                    acc(&mut g, *x, dx);
                    acc(&mut g, *w, dw);
                    acc(&mut g, *b, db);
                }
                Op::ChannelBias { x, e } => {
                    let xs = &self.nodes[*x].value.shape;
                    let hw = xs[3] * xs[4];
                    let mut de = vec![0.0; xs[0] * xs[2]];
                    for bi in 0..xs[0] {
                        for f in 0..xs[1] {
                            for c in 0..xs[2] {
                                let base = ((bi * xs[1] + f) * xs[2] + c) * hw;
                                de[bi * xs[2] + c] += dout[base..base + hw].iter().sum::<f32>();
                            }
                        }
                    }
                    acc(&mut g, *e, de);
                    acc(&mut g, *x, dout);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, dout.clone());
                    acc(&mut g, *a, dout);
                }
                Op::Scale(a, k) => {
                    acc(&mut g, *a, dout.iter().map(|d| d * k).collect());
                }
                Op::Silu(a) => {
                    let x = &self.nodes[*a].value.data;
                    let d = dout
                        .iter()
                        .zip(x)
                        .map(|(d, &x)| {
                            let s = sigmoid(x);
                            d * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    acc(&mut g, *a, d);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = &self.nodes[*a].value.data;
                    let d = dout
                        .iter()
                        .zip(x)
                        .map(|(d, &x)| if x > 0.0 { *d } else { d * slope })
                        .collect();
                    acc(&mut g, *a, d);
                }
                Op::AvgPool2(a) => {
                    let xs = &self.nodes[*a].value.shape;
                    let (n, c, h, w) = split_image(xs);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut d = vec![0.0; n * c * h * w];
                    for p in 0..n * c {
                        for y in 0..h {
                            for xx in 0..w {
                                d[p * h * w + y * w + xx] = 0.25 * dout[p * oh * ow + (y / 2) * ow + xx / 2];
                            }
                        }
                    }
                    acc(&mut g, *a, d);
                }
                Op::Upsample2(a) => {
                    let xs = &self.nodes[*a].value.shape;
                    let (n, c, h, w) = split_image(xs);
                    let (oh, ow) = (h * 2, w * 2);
                    let mut d = vec![0.0; n * c * h * w];
                    for p in 0..n * c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                d[p * h * w + (y / 2) * w + xx / 2] += dout[p * oh * ow + y * ow + xx];
                            }
                        }
                    }
                    acc(&mut g, *a, d);
                }
                Op::TemporalAttention {
                    x,
                    wq,
                    wk,
                    wv,
                    wo,
                    bo,
                    pos,
                    cache,
                } => {
                    let xs = &self.nodes[*x].value.shape;
                    let (b, f, c, hw) = (xs[0], xs[1], xs[2], xs[3] * xs[4]);
                    let scale = 1.0 / (c as f32).sqrt();
                    let xv = &self.nodes[*x].value.data;
                    let (mq, mk, mv, mo) = (
                        &self.nodes[*wq].value.data,
                        &self.nodes[*wk].value.data,
                        &self.nodes[*wv].value.data,
                        &self.nodes[*wo].value.data,
                    );
                    let pshape = &self.nodes[*pos].value.shape;
                    let mut dx = vec![0.0; xv.len()];
                    let mut dq_w = vec![0.0; c * c];
                    let mut dk_w = vec![0.0; c * c];
                    let mut dv_w = vec![0.0; c * c];
                    let mut do_w = vec![0.0; c * c];
                    let mut dbo = vec![0.0; c];
                    let mut dpos = vec![0.0; pshape[0] * pshape[1]];
                    let mut dy = vec![0.0; f * c];
                    let mut dov = vec![0.0; f * c];
                    let mut dvv = vec![0.0; f * c];
                    let mut dqv = vec![0.0; f * c];
                    let mut dkv = vec![0.0; f * c];
                    let mut da = vec![0.0; f];
                    let mut xt = vec![0.0; c];
                    for bi in 0..b {
                        for p in 0..hw {
                            let s = bi * hw + p;
                            let base = s * f * c;
                            let abase = s * f * f;
                            for fi in 0..f {
                                for ch in 0..c {
                                    dy[fi * c + ch] = dout[((bi * f + fi) * c + ch) * hw + p];
                                }
                            }
                            dvv.fill(0.0);
                            dqv.fill(0.0);
                            dkv.fill(0.0);
                            for fi in 0..f {
                                let dyf = &dy[fi * c..(fi + 1) * c];
                                for (d, v) in dbo.iter_mut().zip(dyf) {
                                    *d += v;
                                }
                                outer_acc(&mut do_w, dyf, &cache.o[base + fi * c..base + (fi + 1) * c]);
                                let dof = &mut dov[fi * c..(fi + 1) * c];
                                dof.fill(0.0);
                                matvec_t_acc(mo, dyf, c, c, dof);
                                let arow = &cache.a[abase + fi * f..abase + (fi + 1) * f];
                                for gi in 0..f {
                                    let vg = &cache.v[base + gi * c..base + (gi + 1) * c];
                                    da[gi] = dof.iter().zip(vg).map(|(a, b)| a * b).sum();
                                    for (dv, d) in dvv[gi * c..(gi + 1) * c].iter_mut().zip(dof.iter()) {
                                        *dv += arow[gi] * d;
                                    }
                                }
                                let dot: f32 = arow.iter().zip(&da).map(|(a, d)| a * d).sum();
                                for gi in 0..f {
                                    let ds = arow[gi] * (da[gi] - dot) * scale;
                                    let kg = &cache.k[base + gi * c..base + (gi + 1) * c];
                                    let qf = &cache.q[base + fi * c..base + (fi + 1) * c];
                                    for ch in 0..c {
                                        dqv[fi * c + ch] += ds * kg[ch];
                                        dkv[gi * c + ch] += ds * qf[ch];
                                    }
                                }
                            }
                            for fi in 0..f {
                                for ch in 0..c {
                                    xt[ch] = xv[((bi * f + fi) * c + ch) * hw + p];
                                }
                                let u = &cache.u[base + fi * c..base + (fi + 1) * c];
                                let dqf = &dqv[fi * c..(fi + 1) * c];
                                let dkf = &dkv[fi * c..(fi + 1) * c];
                                let dvf = &dvv[fi * c..(fi + 1) * c];
                                outer_acc(&mut dq_w, dqf, u);
                                outer_acc(&mut dk_w, dkf, u);
                                outer_acc(&mut dv_w, dvf, &xt);
                                let mut du = vec![0.0; c];
                                matvec_t_acc(mq, dqf, c, c, &mut du);
                                matvec_t_acc(mk, dkf, c, c, &mut du);
                                let mut dxt = du.clone();
                                matvec_t_acc(mv, dvf, c, c, &mut dxt);
                                for ch in 0..c {
                                    dpos[fi * c + ch] += du[ch];
                                    dx[((bi * f + fi) * c + ch) * hw + p] += dxt[ch];
                                }
                            }
                        }
                    }
                    acc(&mut g, *x, dx);
                    acc(&mut g, *wq, dq_w);
                    acc(&mut g, *wk, dk_w);
                    acc(&mut g, *wv, dv_w);
                    acc(&mut g, *wo, do_w);
                    acc(&mut g, *bo, dbo);
                    acc(&mut g, *pos, dpos);
                }
                Op::Mse(a, b) => {
                    let av = &self.nodes[*a].value.data;
                    let bv = &self.nodes[*b].value.data;
                    let k = 2.0 * dout[0] / av.len() as f32;
                    let da: Vec<f32> = av.iter().zip(bv).map(|(x, y)| k * (x - y)).collect();
                    let db: Vec<f32> = da.iter().map(|v| -v).collect();
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::MeanSquare(a) => {
                    let av = &self.nodes[*a].value.data;
                    let k = 2.0 * dout[0] / av.len() as f32;
                    acc(&mut g, *a, av.iter().map(|x| k * x).collect());
                }
                Op::SoftplusMean(a, sign) => {
                    let av = &self.nodes[*a].value.data;
                    let k = dout[0] / av.len() as f32;
                    acc(
                        &mut g,
                        *a,
                        av.iter().map(|&x| k * sign * sigmoid(sign * x)).collect(),
                    );
                }
                Op::WeightedSum(terms) => {
                    for (v, w) in terms {
                        acc(&mut g, *v, vec![dout[0] * w]);
                    }
                }
            }
        }
        Grads { grads: g }
    }

    /// Gradients of every parameter leaf that took part in this graph.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|(id, &n)| {
                grads.grads[n]
                    .as_ref()
                    .map(|d| (*id, Tensor::new(&self.nodes[n].value.shape, d.clone())))
            })
            .collect();
        out.sort_by_key(|(id, _)| id.0);
        out
    }
}
