//! Transformer building blocks with hand-written backward passes.
//!
//! Every layer keeps the parameters in a plain struct; a gradient buffer is
//! simply another instance of the same struct (see [`ParamSet::zeros_like`]).
//! Forward passes return a cache that the matching backward pass consumes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{gemm, Mat, Real};

/// Named traversal over every trainable tensor of a component.
pub trait ParamSet<F: Real>: Clone {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat<F>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat<F>)>);

    fn tensors(&self) -> Vec<(String, &Mat<F>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<F>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill_zero();
        }
        z
    }

    fn fill_zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill_zero();
        }
    }

    fn add_assign(&mut self, other: &Self) {
        let src = other.tensors();
        for ((_, dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.add_assign(s);
        }
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Normal samples truncated at two standard deviations.
pub fn trunc_normal<F: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat<F> {
    let mut data = Vec::with_capacity(rows * cols);
    while data.len() < rows * cols {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(F::lit(z * std));
        }
    }
    Mat::from_vec(rows, cols, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    /// input × output
    pub w: Mat<F>,
    /// 1 × output
    pub b: Mat<F>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            w: trunc_normal(rng, input, output, 1.0 / (input as f64).sqrt()),
            b: Mat::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            w: Mat::zeros(input, output),
            b: Mat::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows
    }

    pub fn output_dim(&self) -> usize {
        self.w.cols
    }

    pub fn forward(&self, x: &Mat<F>) -> Mat<F> {
        let mut y = x.matmul(&self.w);
        for r in 0..y.rows {
            for (v, &b) in y.row_mut(r).iter_mut().zip(&self.b.data) {
                *v += b;
            }
        }
        y
    }

    pub fn forward_vec(&self, x: &[F]) -> Vec<F> {
        let xm = Mat::from_vec(1, x.len(), x.to_vec());
        self.forward(&xm).data
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Mat<F>, dy: &Mat<F>, grad: &mut Linear<F>) -> Mat<F> {
        grad.w.add_t_matmul(x, dy);
        for r in 0..dy.rows {
            for (g, &d) in grad.b.data.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        dy.matmul_t(&self.w)
    }
}

impl<F: Real> ParamSet<F> for Linear<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat<F>)>) {
        out.push((join(prefix, "w"), &self.w));
        out.push((join(prefix, "b"), &self.b));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat<F>)>) {
        out.push((join(prefix, "w"), &mut self.w));
        out.push((join(prefix, "b"), &mut self.b));
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Mat<F>,
    pub beta: Mat<F>,
}

pub struct LnCache<F> {
    xhat: Mat<F>,
    rstd: Vec<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Mat::from_vec(1, dim, vec![F::one(); dim]),
            beta: Mat::zeros(1, dim),
        }
    }

    pub fn forward(&self, x: &Mat<F>) -> (Mat<F>, LnCache<F>) {
        let d = x.cols;
        let inv_d = F::lit(1.0 / d as f64);
        let eps = F::lit(LN_EPS);
        let mut xhat = Mat::zeros(x.rows, d);
        let mut y = Mat::zeros(x.rows, d);
        let mut rstd = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
            let xh = xhat.row(r).to_vec();
            for (((o, h), &g), &b) in y
                .row_mut(r)
                .iter_mut()
                .zip(xh)
                .zip(&self.gamma.data)
                .zip(&self.beta.data)
            {
                *o = h * g + b;
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LnCache<F>, dy: &Mat<F>, grad: &mut LayerNorm<F>) -> Mat<F> {
        let d = dy.cols;
        let inv_d = F::lit(1.0 / d as f64);
        let mut dx = Mat::zeros(dy.rows, d);
        let mut dxhat = vec![F::zero(); d];
        for r in 0..dy.rows {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            for j in 0..d {
                grad.gamma.data[j] += dyr[j] * xh[j];
                grad.beta.data[j] += dyr[j];
                dxhat[j] = dyr[j] * self.gamma.data[j];
            }
            let mean_d = dxhat.iter().copied().sum::<F>() * inv_d;
            let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
            let rs = cache.rstd[r];
            for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }
}

impl<F: Real> ParamSet<F> for LayerNorm<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat<F>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat<F>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

// tanh approximation of GELU
fn gelu<F: Real>(x: F) -> F {
    let c = F::lit(0.797_884_560_802_865_4);
    let k = F::lit(0.044_715);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::lit(0.797_884_560_802_865_4);
    let k = F::lit(0.044_715);
    let half = F::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (F::one() + F::lit(3.0) * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

pub struct FfCache<F> {
    x: Mat<F>,
    pre: Mat<F>,
    act: Mat<F>,
}

impl<F: Real> FeedForward<F> {
    pub fn new<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Mat<F>) -> (Mat<F>, FfCache<F>) {
        let pre = self.fc1.forward(x);
        let mut act = pre.clone();
        for v in &mut act.data {
            *v = gelu(*v);
        }
        let y = self.fc2.forward(&act);
        (
            y,
            FfCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &FfCache<F>, dy: &Mat<F>, grad: &mut FeedForward<F>) -> Mat<F> {
        let mut dact = self.fc2.backward(&cache.act, dy, &mut grad.fc2);
        for (d, &p) in dact.data.iter_mut().zip(&cache.pre.data) {
            *d *= gelu_grad(p);
        }
        self.fc1.backward(&cache.x, &dact, &mut grad.fc1)
    }
}

impl<F: Real> ParamSet<F> for FeedForward<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat<F>)>) {
        self.fc1.visit(&join(prefix, "fc1"), out);
        self.fc2.visit(&join(prefix, "fc2"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat<F>)>) {
        self.fc1.visit_mut(&join(prefix, "fc1"), out);
        self.fc2.visit_mut(&join(prefix, "fc2"), out);
    }
}

/// Multi-head scaled dot-product attention. Queries come from `xq`, keys and
/// values from `xkv`; self-attention passes the same matrix twice.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<F> {
    pub n_head: usize,
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub o: Linear<F>,
}

pub struct AttnCache<F> {
    xq: Mat<F>,
    xkv: Mat<F>,
    q: Mat<F>,
    k: Mat<F>,
    v: Mat<F>,
    probs: Vec<Mat<F>>,
    ctx: Mat<F>,
}

impl<F: Real> Attention<F> {
    pub fn new<R: Rng>(dim: usize, n_head: usize, rng: &mut R) -> Self {
        assert!(n_head > 0 && dim % n_head == 0, "d_model must divide by n_head");
        Attention {
            n_head,
            q: Linear::new(dim, dim, rng),
            k: Linear::new(dim, dim, rng),
            v: Linear::new(dim, dim, rng),
            o: Linear::new(dim, dim, rng),
        }
    }

    pub fn forward(
        &self,
        xq: &Mat<F>,
        xkv: &Mat<F>,
        key_mask: Option<&[bool]>,
    ) -> (Mat<F>, AttnCache<F>) {
        let d = self.q.output_dim();
        let dh = d / self.n_head;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let q = self.q.forward(xq);
        let k = self.k.forward(xkv);
        let v = self.v.forward(xkv);
        let (tq, tk) = (xq.rows, xkv.rows);
        let mut ctx = Mat::zeros(tq, d);
        let mut probs = Vec::with_capacity(self.n_head);
        for h in 0..self.n_head {
            let mut s = Mat::zeros(tq, tk);
            gemm(
                scale,
                q.cols_view(h * dh, dh),
                k.cols_view(h * dh, dh).t(),
                F::zero(),
                s.view_mut(),
            );
            softmax_rows(&mut s, key_mask);
            gemm(
                F::one(),
                s.view(),
                v.cols_view(h * dh, dh),
                F::zero(),
                ctx.cols_view_mut(h * dh, dh),
            );
            probs.push(s);
        }
        let y = self.o.forward(&ctx);
        (
            y,
            AttnCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    /// Returns `(dL/dxq, dL/dxkv)`.
    pub fn backward(
        &self,
        cache: &AttnCache<F>,
        dy: &Mat<F>,
        grad: &mut Attention<F>,
    ) -> (Mat<F>, Mat<F>) {
        let d = self.q.output_dim();
        let dh = d / self.n_head;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let dctx = self.o.backward(&cache.ctx, dy, &mut grad.o);
        let (tq, tk) = (cache.q.rows, cache.k.rows);
        let mut dq = Mat::zeros(tq, d);
        let mut dk = Mat::zeros(tk, d);
        let mut dv = Mat::zeros(tk, d);
        for (h, p) in cache.probs.iter().enumerate() {
            let mut dp = Mat::zeros(tq, tk);
            gemm(
                F::one(),
                dctx.cols_view(h * dh, dh),
                cache.v.cols_view(h * dh, dh).t(),
                F::zero(),
                dp.view_mut(),
            );
            gemm(
                F::one(),
                p.view().t(),
                dctx.cols_view(h * dh, dh),
                F::zero(),
                dv.cols_view_mut(h * dh, dh),
            );
            // softmax backward: ds = p * (dp - rowsum(dp * p))
            for r in 0..tq {
                let pr = p.row(r);
                let dpr = dp.row_mut(r);
                let inner = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum::<F>();
                for (g, &pv) in dpr.iter_mut().zip(pr) {
                    *g = pv * (*g - inner);
                }
            }
            gemm(
                scale,
                dp.view(),
                cache.k.cols_view(h * dh, dh),
                F::zero(),
                dq.cols_view_mut(h * dh, dh),
            );
            gemm(
                scale,
                dp.view().t(),
                cache.q.cols_view(h * dh, dh),
                F::zero(),
                dk.cols_view_mut(h * dh, dh),
            );
        }
        let dxq = self.q.backward(&cache.xq, &dq, &mut grad.q);
        let mut dxkv = self.k.backward(&cache.xkv, &dk, &mut grad.k);
        dxkv.add_assign(&self.v.backward(&cache.xkv, &dv, &mut grad.v));
        (dxq, dxkv)
    }
}

impl<F: Real> ParamSet<F> for Attention<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat<F>)>) {
        self.q.visit(&join(prefix, "q"), out);
        self.k.visit(&join(prefix, "k"), out);
        self.v.visit(&join(prefix, "v"), out);
        self.o.visit(&join(prefix, "o"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat<F>)>) {
        self.q.visit_mut(&join(prefix, "q"), out);
        self.k.visit_mut(&join(prefix, "k"), out);
        self.v.visit_mut(&join(prefix, "v"), out);
        self.o.visit_mut(&join(prefix, "o"), out);
    }
}

/// Row-wise softmax; masked-out columns get probability exactly zero.
fn softmax_rows<F: Real>(s: &mut Mat<F>, mask: Option<&[bool]>) {
    for r in 0..s.rows {
        let row = s.row_mut(r);
        let mut max = F::neg_infinity();
        for (c, &v) in row.iter().enumerate() {
            if mask.is_none_or(|m| m[c]) && v > max {
                max = v;
            }
        }
        let mut sum = F::zero();
        for (c, v) in row.iter_mut().enumerate() {
            if mask.is_none_or(|m| m[c]) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = F::zero();
            }
        }
        let inv = F::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + ff(ln2(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<F> {
    pub ln1: LayerNorm<F>,
    pub attn: Attention<F>,
    pub ln2: LayerNorm<F>,
    pub ff: FeedForward<F>,
}

pub struct BlockCache<F> {
    ln1: LnCache<F>,
    attn: AttnCache<F>,
    ln2: LnCache<F>,
    ff: FfCache<F>,
}

impl<F: Real> Block<F> {
    pub fn new<R: Rng>(dim: usize, n_head: usize, rng: &mut R) -> Self {
        Block {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(dim, n_head, rng),
            ln2: LayerNorm::new(dim),
            ff: FeedForward::new(dim, 4 * dim, rng),
        }
    }

    pub fn forward(&self, x: &Mat<F>, mask: Option<&[bool]>) -> (Mat<F>, BlockCache<F>) {
        let (h1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&h1, &h1, mask);
        let mut x1 = x.clone();
        x1.add_assign(&a);
        let (h2, ln2) = self.ln2.forward(&x1);
        let (f, ff) = self.ff.forward(&h2);
        x1.add_assign(&f);
        (x1, BlockCache { ln1, attn, ln2, ff })
    }

    pub fn backward(&self, cache: &BlockCache<F>, dy: &Mat<F>, grad: &mut Block<F>) -> Mat<F> {
        let dh2 = self.ff.backward(&cache.ff, dy, &mut grad.ff);
        let mut dx1 = dy.clone();
        dx1.add_assign(&self.ln2.backward(&cache.ln2, &dh2, &mut grad.ln2));
        let (dq, dkv) = self.attn.backward(&cache.attn, &dx1, &mut grad.attn);
        let mut dh1 = dq;
        dh1.add_assign(&dkv);
        let mut dx = dx1;
        dx.add_assign(&self.ln1.backward(&cache.ln1, &dh1, &mut grad.ln1));
        dx
    }
}

impl<F: Real> ParamSet<F> for Block<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat<F>)>) {
        self.ln1.visit(&join(prefix, "ln1"), out);
        self.attn.visit(&join(prefix, "attn"), out);
        self.ln2.visit(&join(prefix, "ln2"), out);
        self.ff.visit(&join(prefix, "ff"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat<F>)>) {
        self.ln1.visit_mut(&join(prefix, "ln1"), out);
        self.attn.visit_mut(&join(prefix, "attn"), out);
        self.ln2.visit_mut(&join(prefix, "ln2"), out);
        self.ff.visit_mut(&join(prefix, "ff"), out);
    }
}

/// Stack of blocks followed by a final layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk<F> {
    pub blocks: Vec<Block<F>>,
    pub ln_f: LayerNorm<F>,
}

pub struct TrunkCache<F> {
    blocks: Vec<BlockCache<F>>,
    ln_f: LnCache<F>,
}

impl<F: Real> Trunk<F> {
    pub fn new<R: Rng>(dim: usize, n_layer: usize, n_head: usize, rng: &mut R) -> Self {
        Trunk {
            blocks: (0..n_layer).map(|_| Block::new(dim, n_head, rng)).collect(),
            ln_f: LayerNorm::new(dim),
        }
    }

    pub fn forward(&self, x: &Mat<F>, mask: Option<&[bool]>) -> (Mat<F>, TrunkCache<F>) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, c) = b.forward(&h, mask);
            caches.push(c);
            h = next;
        }
        let (y, ln_f) = self.ln_f.forward(&h);
        (
            y,
            TrunkCache {
                blocks: caches,
                ln_f,
            },
        )
    }

    pub fn backward(&self, cache: &TrunkCache<F>, dy: &Mat<F>, grad: &mut Trunk<F>) -> Mat<F> {
        let mut d = self.ln_f.backward(&cache.ln_f, dy, &mut grad.ln_f);
        for ((b, c), g) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            d = b.backward(c, &d, g);
        }
        d
    }
}

impl<F: Real> ParamSet<F> for Trunk<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat<F>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat<F>)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), out);
    }
}

/// Mean over the rows flagged in `mask` (all rows when `None`).
pub fn masked_mean<F: Real>(h: &Mat<F>, mask: Option<&[bool]>) -> (Vec<F>, usize) {
    let mut out = vec![F::zero(); h.cols];
    let mut n = 0usize;
    for r in 0..h.rows {
        if mask.is_none_or(|m| m[r]) {
            n += 1;
            for (o, &v) in out.iter_mut().zip(h.row(r)) {
                *o += v;
            }
        }
    }
    let inv = F::lit(1.0 / n.max(1) as f64);
    for o in &mut out {
        *o *= inv;
    }
    (out, n)
}

/// Gradient of [`masked_mean`] spread back over the rows.
pub fn masked_mean_backward<F: Real>(
    d_mean: &[F],
    rows: usize,
    mask: Option<&[bool]>,
    n: usize,
) -> Mat<F> {
    let inv = F::lit(1.0 / n.max(1) as f64);
    let mut dh = Mat::zeros(rows, d_mean.len());
    for r in 0..rows {
        if mask.is_none_or(|m| m[r]) {
            for (o, &g) in dh.row_mut(r).iter_mut().zip(d_mean) {
                *o = g * inv;
            }
        }
    }
    dh
}

/// L2 normalization; returns the unit vector and the pre-normalization norm.
pub fn l2_normalize<F: Real>(z: &[F]) -> (Vec<F>, F) {
    let norm = crate::tensor::l2_norm(z);
    (z.iter().map(|&v| v / norm).collect(), norm)
}

/// Backward through `e = z / |z|`.
pub fn l2_normalize_backward<F: Real>(e: &[F], norm: F, de: &[F]) -> Vec<F> {
    let proj = crate::tensor::dot(e, de);
    e.iter()
        .zip(de)
        .map(|(&ev, &dv)| (dv - ev * proj) / norm)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
        trunc_normal(rng, r, c, 1.0)
    }

    /// Scalar probe: sum of outputs weighted by a fixed random matrix.
    fn probe(y: &Mat<f64>, w: &Mat<f64>) -> f64 {
        y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
    }

    fn check_input_grad(f: impl Fn(&Mat<f64>) -> f64, x: &Mat<f64>, analytic: &Mat<f64>) {
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic.data[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-5, "entry {i}: analytic {a} numeric {num}");
        }
    }

    #[test]
    fn block_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block: Block<f64> = Block::new(8, 2, &mut rng);
        let x = rand_mat(&mut rng, 4, 8);
        let w = rand_mat(&mut rng, 4, 8);
        let mask = [true, true, false, true];
        let (y, cache) = block.forward(&x, Some(&mask));
        let mut grad = block.zeros_like();
        let dx = block.backward(&cache, &w, &mut grad);
        let _ = y;
        check_input_grad(|xx| probe(&block.forward(xx, Some(&mask)).0, &w), &x, &dx);
    }

    #[test]
    fn cross_attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let attn: Attention<f64> = Attention::new(4, 2, &mut rng);
        let xq = rand_mat(&mut rng, 3, 4);
        let xkv = rand_mat(&mut rng, 5, 4);
        let w = rand_mat(&mut rng, 3, 4);
        let (_, cache) = attn.forward(&xq, &xkv, None);
        let mut grad = attn.zeros_like();
        let (dq, dkv) = attn.backward(&cache, &w, &mut grad);
        check_input_grad(|x| probe(&attn.forward(x, &xkv, None).0, &w), &xq, &dq);
        check_input_grad(|x| probe(&attn.forward(&xq, x, None).0, &w), &xkv, &dkv);
    }

    #[test]
    fn masked_keys_receive_zero_probability() {
        let mut s = Mat::from_vec(1, 3, vec![5.0f64, 1.0, 2.0]);
        softmax_rows(&mut s, Some(&[false, true, true]));
        assert_eq!(s.get(0, 0), 0.0);
        assert!((s.data.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
