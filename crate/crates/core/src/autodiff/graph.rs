//! Recording graph and reverse-mode accumulation.

use super::conv::{self, ConvGeom};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{SsimParams, SsimTerms, Window};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm running statistics, owned by the model and updated in train
/// mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    AvgPool2 { x: Var },
    Upsample2 { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Concat { xs: Vec<Var> },
    Dense { x: Var, w: Var, b: Var },
    GlobalAvg { x: Var },
    GlobalMax { x: Var, argmax: Vec<usize> },
    ChannelMean { x: Var },
    ChannelMax { x: Var, argmax: Vec<usize> },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    SsimLoss {
        pred: Var,
        target: Var,
        d_pred: Option<Vec<f64>>,
        d_target: Option<Vec<f64>>,
    },
    Sum { x: Var },
    Mean { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward pass: nodes are appended in evaluation order, which is
/// a topological order, and `backward` walks them in reverse once.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    pattern: u64,
    kink_margin: f64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn fold_hash(h: u64, v: u64) -> u64 {
    (h.rotate_left(5) ^ v).wrapping_mul(0x51_7C_C1_B7_27_22_0A_95)
}

fn pad4(shape: &[usize]) -> Result<[usize; 4]> {
    if shape.len() > 4 {
        return Err(Error::shape(format!("rank {} > 4", shape.len())));
    }
    let mut out = [1; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    Ok(out)
}

fn strides4(s: [usize; 4], out: [usize; 4]) -> [usize; 4] {
    let mut st = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        st[d] = if s[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= s[d];
    }
    st
}

/// Calls `f(out_index, a_index, b_index)` for a numpy-style broadcast of
/// equal-rank shapes.
fn for_each_bcast(a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("broadcast rank mismatch {a:?} vs {b:?}")));
    }
    let mut out = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        if x != y && x != 1 && y != 1 {
            return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
        }
        out.push(x.max(y));
    }
    let (a4, b4, o4) = (pad4(a)?, pad4(b)?, pad4(&out)?);
    let (sa, sb) = (strides4(a4, o4), strides4(b4, o4));
    let mut o = 0;
    for i0 in 0..o4[0] {
        for i1 in 0..o4[1] {
            for i2 in 0..o4[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..o4[3] {
                    f(o, ba + i3 * sa[3], bb + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            pattern: 0,
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Fingerprint of every ReLU sign and max-pool argmax recorded so far.
    /// Two evaluations with equal fingerprints lie in the same smooth piece.
    pub fn activation_pattern(&self) -> u64 {
        self.pattern
    }

    /// Smallest distance of any ReLU input from zero or of any max-pool
    /// winner from the runner-up.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by autodiff op");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims4(&self, v: Var) -> Result<[usize; 4]> {
        self.value(v).dims4()
    }

    /// Same-padded, stride-1 2D convolution with an odd square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.conv2d_impl(x, w, Some(b))
    }

    /// [`Graph::conv2d`] without a bias term.
    pub fn conv2d_no_bias(&mut self, x: Var, w: Var) -> Result<Var> {
        self.conv2d_impl(x, w, None)
    }

    fn conv2d_impl(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, cin, h, wd] = self.dims4(x)?;
        let [cout, wcin, kh, kw] = self.dims4(w)?;
        if wcin != cin || kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d: input {:?} with weight {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        let zero_bias;
        let bias = match b {
            Some(b) => {
                if self.shape(b) != [cout] {
                    return Err(Error::shape(format!("conv2d: bias {:?}, expected [{cout}]", self.shape(b))));
                }
                &self.value(b).data
            }
            None => {
                zero_bias = vec![T::zero(); cout];
                &zero_bias
            }
        };
        let geom = ConvGeom { n, cin, cout, h, w: wd, k: kh };
        let out = conv::forward(&geom, &self.value(x).data, &self.value(w).data, bias);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor { shape: vec![n, cout, h, wd], data: out }, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn avg_pool_2x2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("avg_pool_2x2: odd spatial dims {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = &self.value(x).data;
        let quarter = T::from_f64(0.25);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let o = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    o[y * ow + xx] = (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]) * quarter;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![n, c, oh, ow], data: out }, Op::AvgPool2 { x }, rg))
    }

    pub fn upsample_nearest_2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x)?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = &self.value(x).data;
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let o = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    o[y * ow + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![n, c, oh, ow], data: out }, Op::Upsample2 { x }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut pattern = self.pattern;
        let mut margin = self.kink_margin;
        let mut bits = 0u64;
        for (i, v) in t.data.iter().enumerate() {
            let on = *v > T::zero();
            bits = (bits << 1) | on as u64;
            if i % 64 == 63 {
                pattern = fold_hash(pattern, bits);
                bits = 0;
            }
            margin = margin.min(v.as_f64().abs());
        }
        pattern = fold_hash(pattern, bits);
        let out = t.map(|v| if v > T::zero() { v } else { T::zero() });
        self.pattern = pattern;
        self.kink_margin = margin;
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    /// Elementwise sum with broadcasting over size-1 dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ta.len().max(tb.len()));
        let shape = for_each_bcast(&ta.shape, &tb.shape, |_, ia, ib| out.push(ta.data[ia] + tb.data[ib]))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data: out }, Op::Add { a, b }, rg))
    }

    /// Elementwise product with broadcasting over size-1 dimensions.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ta.len().max(tb.len()));
        let shape = for_each_bcast(&ta.shape, &tb.shape, |_, ia, ib| out.push(ta.data[ia] * tb.data[ib]))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data: out }, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, c }, rg)
    }

    /// Concatenates NCHW tensors along C.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let [n, _, h, w] = self.dims4(first)?;
        let mut total_c = 0;
        for &v in xs {
            let [vn, vc, vh, vw] = self.dims4(v)?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(format!(
                    "concat: {:?} vs {:?}",
                    self.shape(v),
                    self.shape(first)
                )));
            }
            total_c += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for s in 0..n {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape[1];
                out.extend_from_slice(&t.data[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor { shape: vec![n, total_c, h, w], data: out },
            Op::Concat { xs: xs.to_vec() },
            rg,
        ))
    }

    /// Fully connected layer on `[N, Cin]` or `[N, Cin, 1, 1]`; the output
    /// keeps the input's rank.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, cin) = match xs[..] {
            [n, c] | [n, c, 1, 1] => (n, c),
            _ => return Err(Error::shape(format!("dense: input {xs:?}"))),
        };
        let (cout, wcin) = match self.shape(w) {
            [o, i] => (*o, *i),
            s => return Err(Error::shape(format!("dense: weight {s:?}"))),
        };
        if wcin != cin || self.shape(b) != [cout] {
            return Err(Error::shape(format!(
                "dense: input {xs:?}, weight {:?}, bias {:?}",
                self.shape(w),
                self.shape(b)
            )));
        }
        let mut out = Vec::with_capacity(n * cout);
        for _ in 0..n {
            out.extend_from_slice(&self.value(b).data);
        }
        T::gemm(
            n,
            cin,
            cout,
            &self.value(x).data,
            cin as isize,
            1,
            &self.value(w).data,
            1,
            cin as isize,
            T::one(),
            &mut out,
            cout as isize,
            1,
        );
        let shape = if xs.len() == 4 { vec![n, cout, 1, 1] } else { vec![n, cout] };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor { shape, data: out }, Op::Dense { x, w, b }, rg))
    }

    /// Spatial mean per channel: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x)?;
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let t = self.value(x);
        let out = (0..n * c)
            .map(|p| t.data[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![n, c, 1, 1], data: out }, Op::GlobalAvg { x }, rg))
    }

    fn track_max(&mut self, idx: &[usize]) {
        let mut p = self.pattern;
        for &i in idx {
            p = fold_hash(p, i as u64);
        }
        self.pattern = p;
    }

    /// Spatial max per channel: `[N,C,H,W] -> [N,C,1,1]`. Ties go to the
    /// lowest linear index.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x)?;
        let hw = h * w;
        let t = self.value(x);
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        let mut margin = self.kink_margin;
        for p in 0..n * c {
            let (best, gap) = arg_max(t.data[p * hw..(p + 1) * hw].iter().copied());
            margin = margin.min(gap);
            argmax.push(p * hw + best);
            out.push(t.data[p * hw + best]);
        }
        self.kink_margin = margin;
        self.track_max(&argmax);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![n, c, 1, 1], data: out }, Op::GlobalMax { x, argmax }, rg))
    }

    /// Mean over channels: `[N,C,H,W] -> [N,1,H,W]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x)?;
        let hw = h * w;
        let inv = T::from_f64(1.0 / c as f64);
        let t = self.value(x);
        let mut out = vec![T::zero(); n * hw];
        for s in 0..n {
            for ch in 0..c {
                let src = &t.data[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for (o, v) in out[s * hw..(s + 1) * hw].iter_mut().zip(src) {
                    *o += *v;
                }
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![n, 1, h, w], data: out }, Op::ChannelMean { x }, rg))
    }

    /// Max over channels: `[N,C,H,W] -> [N,1,H,W]`, ties to the lowest
    /// channel.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x)?;
        let hw = h * w;
        let t = self.value(x);
        let mut out = Vec::with_capacity(n * hw);
        let mut argmax = Vec::with_capacity(n * hw);
        let mut margin = self.kink_margin;
        for s in 0..n {
            for p in 0..hw {
                let (best, gap) = arg_max((0..c).map(|ch| t.data[(s * c + ch) * hw + p]));
                margin = margin.min(gap);
                let idx = (s * c + best) * hw + p;
                argmax.push(idx);
                out.push(t.data[idx]);
            }
        }
        self.kink_margin = margin;
        self.track_max(&argmax);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![n, 1, h, w], data: out }, Op::ChannelMax { x, argmax }, rg))
    }

    /// Per-channel batch normalization. Train mode normalizes with batch
    /// statistics and updates `state`; eval mode uses `state`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.running_mean.len() != c {
            return Err(Error::shape(format!("batch_norm: {c} channels vs gamma {:?}", self.shape(gamma))));
        }
        let hw = h * w;
        let m = n * hw;
        let train = mode == Mode::Train;
        if train && m < 2 {
            return Err(Error::config("batch_norm", format!("train mode needs N*H*W >= 2, got {m}")));
        }
        let t = &self.value(x).data;
        let eps = T::from_f64(BN_EPS);
        let mut inv_std = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); t.len()];
        let mut out = vec![T::zero(); t.len()];
        let g = &self.value(gamma).data;
        let bt = &self.value(beta).data;
        for ch in 0..c {
            let (mean, var) = if train {
                let mut s = 0.0;
                for sn in 0..n {
                    s += t[(sn * c + ch) * hw..(sn * c + ch + 1) * hw].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = s / m as f64;
                let mut sq = 0.0;
                for sn in 0..n {
                    sq += t[(sn * c + ch) * hw..(sn * c + ch + 1) * hw]
                        .iter()
                        .map(|v| (v.as_f64() - mean).powi(2))
                        .sum::<f64>();
                }
                let var = sq / m as f64;
                let mom = BN_MOMENTUM;
                let unbiased = sq / (m - 1) as f64;
                state.running_mean[ch] = T::from_f64(mom * state.running_mean[ch].as_f64() + (1.0 - mom) * mean);
                state.running_var[ch] = T::from_f64(mom * state.running_var[ch].as_f64() + (1.0 - mom) * unbiased);
                (T::from_f64(mean), T::from_f64(var))
            } else {
                (state.running_mean[ch], state.running_var[ch])
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for sn in 0..n {
                let base = (sn * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (t[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor { shape: vec![n, c, h, w], data: out },
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
            rg,
        ))
    }

    /// `1 - mean SSIM` over all `(n, c)` planes of two NCHW tensors.
    pub fn ssim_loss(&mut self, pred: Var, target: Var, p: &SsimParams) -> Result<Var> {
        let [n, c, h, w] = self.dims4(pred)?;
        if self.shape(target) != self.shape(pred) {
            return Err(Error::shape(format!(
                "ssim_loss: pred {:?} vs target {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        p.validate()?;
        if h < p.window || w < p.window {
            return Err(Error::shape(format!("ssim_loss: {h}x{w} smaller than window {}", p.window)));
        }
        let (c1, c2) = (p.c1(), p.c2());
        let win = Window::new(p, w, h);
        let hw = h * w;
        let planes = n * c;
        let (need_p, need_t) = (self.rg(pred), self.rg(target));
        let mut d_pred = need_p.then(|| vec![0.0; planes * hw]);
        let mut d_target = need_t.then(|| vec![0.0; planes * hw]);
        let mut total = 0.0;
        let scale = 1.0 / (planes * hw) as f64;
        for pl in 0..planes {
            let a: Vec<f64> = self.value(pred).data[pl * hw..(pl + 1) * hw].iter().map(|v| v.as_f64()).collect();
            let b: Vec<f64> = self.value(target).data[pl * hw..(pl + 1) * hw].iter().map(|v| v.as_f64()).collect();
            let terms = SsimTerms::compute(&win, &a, &b);
            let map = terms.map(c1, c2);
            total += map.iter().sum::<f64>();
            if !(need_p || need_t) {
                continue;
            }
            // Partial derivatives of each pixel's SSIM w.r.t. its local moments.
            let mut d_mu_a = vec![0.0; hw];
            let mut d_mu_b = vec![0.0; hw];
            let mut d_aa = vec![0.0; hw];
            let mut d_bb = vec![0.0; hw];
            let mut d_ab = vec![0.0; hw];
            for i in 0..hw {
                let (ma, mb) = (terms.mu_a[i], terms.mu_b[i]);
                let a1 = 2.0 * ma * mb + c1;
                let a2 = 2.0 * (terms.e_ab[i] - ma * mb) + c2;
                let b1 = ma * ma + mb * mb + c1;
                let b2 = (terms.e_aa[i] - ma * ma) + (terms.e_bb[i] - mb * mb) + c2;
                let d = b1 * b2;
                let s = map[i];
                d_mu_a[i] = (2.0 * mb * (a2 - a1) - s * 2.0 * ma * (b2 - b1)) / d;
                d_mu_b[i] = (2.0 * ma * (a2 - a1) - s * 2.0 * mb * (b2 - b1)) / d;
                d_aa[i] = -s / b2;
                d_bb[i] = -s / b2;
                d_ab[i] = 2.0 * a1 / d;
            }
            let t_ab = win.filter_adjoint(&d_ab);
            // d(loss) = -scale * d(sum of SSIM map)
            if let Some(dp) = d_pred.as_mut() {
                let t_mu = win.filter_adjoint(&d_mu_a);
                let t_aa = win.filter_adjoint(&d_aa);
                for i in 0..hw {
                    dp[pl * hw + i] = -scale * (t_mu[i] + 2.0 * a[i] * t_aa[i] + b[i] * t_ab[i]);
                }
            }
            if let Some(dt) = d_target.as_mut() {
                let t_mu = win.filter_adjoint(&d_mu_b);
                let t_bb = win.filter_adjoint(&d_bb);
                for i in 0..hw {
                    dt[pl * hw + i] = -scale * (t_mu[i] + 2.0 * b[i] * t_bb[i] + a[i] * t_ab[i]);
                }
            }
        }
        let loss = 1.0 - total * scale;
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::SsimLoss { pred, target, d_pred, d_target },
            need_p || need_t,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data.iter().copied().sum::<T>() / T::from_f64(t.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Reverse-mode accumulation from the scalar `loss`. May be called once
    /// per recorded graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this graph; record a new one".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        self.backward_done = true;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        fn acc<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
            if !nodes[v.0].requires_grad {
                return;
            }
            let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(g);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, geom } => {
                    let cg = conv::backward(geom, &nodes[x.0].value.data, &nodes[w.0].value.data, &g, nodes[x.0].requires_grad);
                    if let Some(dx) = cg.dx {
                        acc(nodes, &mut grads, *x, |t| add_into(t, &dx));
                    }
                    acc(nodes, &mut grads, *w, |t| add_into(t, &cg.dw));
                    if let Some(b) = b {
                        acc(nodes, &mut grads, *b, |t| add_into(t, &cg.db));
                    }
                }
                Op::AvgPool2 { x } => {
                    let [_, _, h, w] = nodes[x.0].value.dims4().unwrap();
                    let (oh, ow) = (h / 2, w / 2);
                    let q = T::from_f64(0.25);
                    acc(nodes, &mut grads, *x, |t| {
                        for p in 0..t.len() / (h * w) {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let gv = g[p * oh * ow + y * ow + xx] * q;
                                    let i = p * h * w + 2 * y * w + 2 * xx;
                                    t[i] += gv;
                                    t[i + 1] += gv;
                                    t[i + w] += gv;
                                    t[i + w + 1] += gv;
                                }
                            }
                        }
                    });
                }
                Op::Upsample2 { x } => {
                    let [_, _, h, w] = nodes[x.0].value.dims4().unwrap();
                    let (oh, ow) = (2 * h, 2 * w);
                    acc(nodes, &mut grads, *x, |t| {
                        for p in 0..t.len() / (h * w) {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    t[p * h * w + (y / 2) * w + xx / 2] += g[p * oh * ow + y * ow + xx];
                                }
                            }
                        }
                    });
                }
                Op::Relu { x } => {
                    let xv = &nodes[x.0].value.data;
                    acc(nodes, &mut grads, *x, |t| {
                        for ((ti, gi), xi) in t.iter_mut().zip(&g).zip(xv) {
                            if *xi > T::zero() {
                                *ti += *gi;
                            }
                        }
                    });
                }
                Op::Sigmoid { x } => {
                    acc(nodes, &mut grads, *x, |t| {
                        for ((ti, gi), y) in t.iter_mut().zip(&g).zip(&out.data) {
                            *ti += *gi * *y * (T::one() - *y);
                        }
                    });
                }
                Op::Add { a, b } => {
                    let (sa, sb) = (nodes[a.0].value.shape.clone(), nodes[b.0].value.shape.clone());
                    acc(nodes, &mut grads, *a, |t| {
                        let _ = for_each_bcast(&sa, &sb, |o, ia, _| t[ia] += g[o]);
                    });
                    acc(nodes, &mut grads, *b, |t| {
                        let _ = for_each_bcast(&sa, &sb, |o, _, ib| t[ib] += g[o]);
                    });
                }
                Op::Mul { a, b } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(nodes, &mut grads, *a, |t| {
                        let _ = for_each_bcast(&ta.shape, &tb.shape, |o, ia, ib| t[ia] += g[o] * tb.data[ib]);
                    });
                    acc(nodes, &mut grads, *b, |t| {
                        let _ = for_each_bcast(&ta.shape, &tb.shape, |o, ia, ib| t[ib] += g[o] * ta.data[ia]);
                    });
                }
                Op::Scale { x, c } => {
                    acc(nodes, &mut grads, *x, |t| {
                        for (ti, gi) in t.iter_mut().zip(&g) {
                            *ti += *gi * *c;
                        }
                    });
                }
                Op::Concat { xs } => {
                    let [n, _, h, w] = out.dims4().unwrap();
                    let total_c = out.shape[1];
                    let hw = h * w;
                    let mut off = 0;
                    for v in xs {
                        let c = nodes[v.0].value.shape[1];
                        acc(nodes, &mut grads, *v, |t| {
                            for s in 0..n {
                                let src = &g[(s * total_c + off) * hw..(s * total_c + off + c) * hw];
                                add_into(&mut t[s * c * hw..(s + 1) * c * hw], src);
                            }
                        });
                        off += c;
                    }
                }
                Op::Dense { x, w, b } => {
                    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (cout, cin) = (wv.shape[0], wv.shape[1]);
                    let n = xv.shape[0];
                    acc(nodes, &mut grads, *x, |t| {
                        T::gemm(n, cout, cin, &g, cout as isize, 1, &wv.data, cin as isize, 1, T::one(), t, cin as isize, 1);
                    });
                    acc(nodes, &mut grads, *w, |t| {
                        T::gemm(cout, n, cin, &g, 1, cout as isize, &xv.data, cin as isize, 1, T::one(), t, cin as isize, 1);
                    });
                    acc(nodes, &mut grads, *b, |t| {
                        for s in 0..n {
                            add_into(t, &g[s * cout..(s + 1) * cout]);
                        }
                    });
                }
                Op::GlobalAvg { x } => {
                    let [_, _, h, w] = nodes[x.0].value.dims4().unwrap();
                    let hw = h * w;
                    let inv = T::from_f64(1.0 / hw as f64);
                    acc(nodes, &mut grads, *x, |t| {
                        for (p, gv) in g.iter().enumerate() {
                            for ti in &mut t[p * hw..(p + 1) * hw] {
                                *ti += *gv * inv;
                            }
                        }
                    });
                }
                Op::GlobalMax { x, argmax } | Op::ChannelMax { x, argmax } => {
                    acc(nodes, &mut grads, *x, |t| {
                        for (gv, &idx) in g.iter().zip(argmax) {
                            t[idx] += *gv;
                        }
                    });
                }
                Op::ChannelMean { x } => {
                    let [n, c, h, w] = nodes[x.0].value.dims4().unwrap();
                    let hw = h * w;
                    let inv = T::from_f64(1.0 / c as f64);
                    acc(nodes, &mut grads, *x, |t| {
                        for s in 0..n {
                            for ch in 0..c {
                                for p in 0..hw {
                                    t[(s * c + ch) * hw + p] += g[s * hw + p] * inv;
                                }
                            }
                        }
                    });
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let [n, c, h, w] = nodes[x.0].value.dims4().unwrap();
                    let hw = h * w;
                    let m = (n * hw) as f64;
                    let gam = &nodes[gamma.0].value.data;
                    let mut sum_g = vec![0.0f64; c];
                    let mut sum_gx = vec![0.0f64; c];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for i in base..base + hw {
                                sum_g[ch] += g[i].as_f64();
                                sum_gx[ch] += g[i].as_f64() * xhat[i].as_f64();
                            }
                        }
                    }
                    acc(nodes, &mut grads, *gamma, |t| {
                        for ch in 0..c {
                            t[ch] += T::from_f64(sum_gx[ch]);
                        }
                    });
                    acc(nodes, &mut grads, *beta, |t| {
                        for ch in 0..c {
                            t[ch] += T::from_f64(sum_g[ch]);
                        }
                    });
                    let train = *train;
                    acc(nodes, &mut grads, *x, |t| {
                        for s in 0..n {
                            for ch in 0..c {
                                let base = (s * c + ch) * hw;
                                let k = gam[ch] * inv_std[ch];
                                if train {
                                    let kk = k.as_f64() / m;
                                    for i in base..base + hw {
                                        let v = m * g[i].as_f64() - sum_g[ch] - xhat[i].as_f64() * sum_gx[ch];
                                        t[i] += T::from_f64(kk * v);
                                    }
                                } else {
                                    for i in base..base + hw {
                                        t[i] += g[i] * k;
                                    }
                                }
                            }
                        }
                    });
                }
                Op::SsimLoss { pred, target, d_pred, d_target } => {
                    let up = g[0].as_f64();
                    if let Some(dp) = d_pred {
                        acc(nodes, &mut grads, *pred, |t| {
                            for (ti, d) in t.iter_mut().zip(dp) {
                                *ti += T::from_f64(up * d);
                            }
                        });
                    }
                    if let Some(dt) = d_target {
                        acc(nodes, &mut grads, *target, |t| {
                            for (ti, d) in t.iter_mut().zip(dt) {
                                *ti += T::from_f64(up * d);
                            }
                        });
                    }
                }
                Op::Sum { x } => {
                    acc(nodes, &mut grads, *x, |t| {
                        for ti in t.iter_mut() {
                            *ti += g[0];
                        }
                    });
                }
                Op::Mean { x } => {
                    let inv = g[0] / T::from_f64(nodes[x.0].value.len() as f64);
                    acc(nodes, &mut grads, *x, |t| {
                        for ti in t.iter_mut() {
                            *ti += inv;
                        }
                    });
                }
            }
            // Keep gradients of leaves for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Index of the maximum (first on ties) and the gap to the runner-up among
/// values that differ from the maximum.
fn arg_max<T: Real>(values: impl Iterator<Item = T>) -> (usize, f64) {
    let mut best = 0;
    let mut best_v = T::neg_infinity();
    let mut vals = Vec::new();
    for (i, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
        vals.push(v);
    }
    let gap = vals
        .iter()
        .filter(|&&v| v != best_v)
        .map(|&v| (best_v - v).as_f64())
        .fold(f64::INFINITY, f64::min);
    (best, gap)
}
