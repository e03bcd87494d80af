//! Reverse-mode differentiation over a fixed operation set.
//!
//! Values are recorded on a [`Tape`] in execution order; [`Tape::backward`]
//! walks the tape in reverse and accumulates gradients for every node.

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Variance floor inside attentive statistics pooling.
pub const ASP_VAR_FLOOR: f64 = 1e-9;
/// Lower clamp of the angular-prototypical scale.
pub const PROTO_OMEGA_MIN: f64 = 1e-6;
const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, F> {
    Train,
    Eval { mean: &'a [F], var: &'a [F] },
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Unbiased estimate, used for the running variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    sh: usize,
    sw: usize,
    ho: usize,
    wo: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvDims {
    fn in_len(&self) -> usize {
        self.h * self.w * self.cin
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo * self.cout
    }

    /// Input coordinate for output `o` and kernel tap `k`, or `None` when it
    /// falls in the padding.
    #[inline]
    fn src(o: usize, stride: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = o * stride + k;
        if p < pad || p - pad >= extent {
            None
        } else {
            Some(p - pad)
        }
    }
}

enum Op<F> {
    Leaf,
    Conv2d { x: Var, k: Var, dims: ConvDims },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, inv_std: Vec<f64>, train: bool },
    Relu(Var),
    Tanh(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Reshape(Var),
    SwapFreqTime(Var),
    AttentiveStats { h: Var, e: Var, alpha: Vec<f64>, mu: Vec<f64>, sigma: Vec<f64>, active: Vec<bool> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    AngularProto { emb: Var, omega: Var, bias: Var, speakers: usize, per_speaker: usize },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
    exec: Exec,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every tape node.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self { nodes: Vec::new(), exec }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        debug_assert!(value.is_finite(), "non-finite value recorded on tape");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Same-padded 2-D convolution of `x: [B, H, W, Cin]` with
    /// `k: [kh, kw, Cin, Cout]`; output `[B, ceil(H/sh), ceil(W/sw), Cout]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: (usize, usize)) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(k));
        if xs.len() != 4 || ks.len() != 4 || xs[3] != ks[2] {
            return Err(Error::shape("conv2d", format!("input {xs:?}, kernel {ks:?}")));
        }
        let (sh, sw) = stride;
        if !(1..=2).contains(&sh) || !(1..=2).contains(&sw) {
            return Err(Error::shape("conv2d", format!("unsupported stride {stride:?}")));
        }
        let (b, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
        let (ho, wo) = (h.div_ceil(sh), w.div_ceil(sw));
        let pad_h = ((ho - 1) * sh + kh).saturating_sub(h);
        let pad_w = ((wo - 1) * sw + kw).saturating_sub(w);
        let dims = ConvDims { h, w, cin, kh, kw, cout, sh, sw, ho, wo, pad_top: pad_h / 2, pad_left: pad_w / 2 };

        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let mut out = vec![F::zero(); b * dims.out_len()];
        self.exec.for_each_chunk_mut(&mut out, dims.out_len(), |bi, o| {
            conv_forward_sample(&xv[bi * dims.in_len()..(bi + 1) * dims.in_len()], kv, &dims, o)
        });
        let value = Tensor::new([b, ho, wo, cout], out)?;
        Ok(self.push(value, Op::Conv2d { x, k, dims }))
    }

    /// Batch normalization over every axis but the last (channel) axis.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, F>) -> Result<(Var, Option<BnStats>)> {
        let xs = self.shape(x);
        let c = *xs.last().ok_or_else(|| Error::shape("batch_norm", "scalar input"))?;
        if self.value(gamma).len() != c || self.value(beta).len() != c || xs.len() < 2 {
            return Err(Error::shape(
                "batch_norm",
                format!("input {xs:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xv = self.value(x).data();
        let n = xv.len() / c;
        let (mean, var, stats, train) = match mode {
            BnMode::Train => {
                let mut sum = vec![0f64; c];
                for (i, v) in xv.iter().enumerate() {
                    sum[i % c] += v.f64();
                }
                let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
                let mut sq = vec![0f64; c];
                for (i, v) in xv.iter().enumerate() {
                    let d = v.f64() - mean[i % c];
                    sq[i % c] += d * d;
                }
                let var: Vec<f64> = sq.iter().map(|s| s / n as f64).collect();
                let unbiased = sq.iter().map(|s| if n > 1 { s / (n - 1) as f64 } else { 0.0 }).collect();
                let stats = BnStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats), true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (mean.iter().map(|m| m.f64()).collect(), var.iter().map(|v| v.f64()).collect(), None, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (i, v) in xv.iter().enumerate() {
            let ch = i % c;
            let xh = (v.f64() - mean[ch]) * inv_std[ch];
            xhat.push(F::of(xh));
            out.push(F::of(g[ch].f64() * xh + bta[ch].f64()));
        }
        let value = Tensor::new(xs.to_vec(), out)?;
        let var_out = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train });
        Ok((var_out, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out =
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.max(F::zero())).collect()).expect("same shape");
        self.push(out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.tanh()).collect()).expect("same shape");
        self.push(out, Op::Tanh(x))
    }

    /// `x: [R, in] · w: [in, out] (+ b: [out])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        let (rows, n_in, n_out) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.value(b).len() != n_out {
                return Err(Error::shape("linear", format!("bias {:?} for {n_out} outputs", self.shape(b))));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![F::zero(); rows * n_out];
        self.exec.for_each_chunk_mut(&mut out, n_out, |r, o| {
            if let Some(bv) = bv {
                o.copy_from_slice(bv);
            }
            for (i, &xi) in xv[r * n_in..(r + 1) * n_in].iter().enumerate() {
                for (oo, &wio) in o.iter_mut().zip(&wv[i * n_out..(i + 1) * n_out]) {
                    *oo += xi * wio;
                }
            }
        });
        let value = Tensor::new([rows, n_out], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().zip(bv.data()).map(|(&p, &q)| p + q).collect())?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// `[B, F, T, C] -> [B, T, F, C]`: moves the time axis ahead of frequency
    /// so that each time step can be flattened into one feature vector.
    pub fn swap_freq_time(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("swap_freq_time", format!("{s:?}")));
        }
        let out = swap12(self.value(x).data(), &s);
        let value = Tensor::new([s[0], s[2], s[1], s[3]], out)?;
        Ok(self.push(value, Op::SwapFreqTime(x)))
    }

    /// Attention-weighted mean and standard deviation over time.
    ///
    /// `h: [B, T, D]` hidden sequence, `e: [B, T]` attention logits; returns
    /// `[B, 2D]` holding `μ ⊕ σ` with `α = softmax(e)` over time,
    /// `μ = Σ α h` and `σ = sqrt(max(Σ α h² − μ², 1e-9))`.
    pub fn attentive_stats(&mut self, h: Var, e: Var) -> Result<Var> {
        let (hs, es) = (self.shape(h).to_vec(), self.shape(e).to_vec());
        if hs.len() != 3 || es != [hs[0], hs[1]] {
            return Err(Error::shape("attentive_stats", format!("hidden {hs:?}, logits {es:?}")));
        }
        let (b, t, d) = (hs[0], hs[1], hs[2]);
        if t < 2 {
            return Err(Error::shape("attentive_stats", format!("need at least 2 time steps, got {t}")));
        }
        let hv = self.value(h).data();
        let ev = self.value(e).data();
        let mut alpha = vec![0f64; b * t];
        let mut mu = vec![0f64; b * d];
        let mut sigma = vec![0f64; b * d];
        let mut active = vec![false; b * d];
        let mut out = vec![F::zero(); b * 2 * d];
        for bi in 0..b {
            let logits = &ev[bi * t..(bi + 1) * t];
            let a = &mut alpha[bi * t..(bi + 1) * t];
            softmax_into(logits.iter().map(|x| x.f64()), a);
            let mut s2 = vec![0f64; d];
            let m = &mut mu[bi * d..(bi + 1) * d];
            for (ti, &at) in a.iter().enumerate() {
                for (di, hv) in hv[(bi * t + ti) * d..(bi * t + ti + 1) * d].iter().enumerate() {
                    let x = hv.f64();
                    m[di] += at * x;
                    s2[di] += at * x * x;
                }
            }
            for di in 0..d {
                let var = s2[di] - m[di] * m[di];
                let idx = bi * d + di;
                active[idx] = var > ASP_VAR_FLOOR;
                sigma[idx] = var.max(ASP_VAR_FLOOR).sqrt();
                out[bi * 2 * d + di] = F::of(m[di]);
                out[bi * 2 * d + d + di] = F::of(sigma[idx]);
            }
        }
        let value = Tensor::new([b, 2 * d], out)?;
        Ok(self.push(value, Op::AttentiveStats { h, e, alpha, mu, sigma, active }))
    }

    /// Mean cross-entropy of `softmax(logits)` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", format!("logits {s:?}, {} labels", labels.len())));
        }
        let (rows, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0f64; rows * classes];
        let mut loss = 0f64;
        for (r, &y) in labels.iter().enumerate() {
            let row = &lv[r * classes..(r + 1) * classes];
            let lse = log_sum_exp(row.iter().map(|x| x.f64()));
            loss += lse - row[y].f64();
            softmax_into(row.iter().map(|x| x.f64()), &mut probs[r * classes..(r + 1) * classes]);
        }
        let value = Tensor::scalar(F::of(loss / rows as f64));
        Ok(self.push(value, Op::SoftmaxCe { logits, labels: labels.to_vec(), probs }))
    }

    /// Angular prototypical loss on `emb: [speakers · per_speaker, D]`,
    /// ordered speaker-major. Each speaker's last embedding is the query; the
    /// centroid of its remaining embeddings is the prototype. Similarities
    /// are `ω · cos(query, prototype) + b` with `ω` clamped to at least 1e-6.
    pub fn angular_prototypical(
        &mut self,
        emb: Var,
        omega: Var,
        bias: Var,
        speakers: usize,
        per_speaker: usize,
    ) -> Result<Var> {
        let s = self.shape(emb).to_vec();
        if s.len() != 2 || s[0] != speakers * per_speaker || per_speaker < 2 || speakers < 1 {
            return Err(Error::shape(
                "angular_prototypical",
                format!("embeddings {s:?} for {speakers} speakers x {per_speaker}"),
            ));
        }
        if self.value(omega).len() != 1 || self.value(bias).len() != 1 {
            return Err(Error::shape("angular_prototypical", "omega and bias must be scalars"));
        }
        let terms = ProtoTerms::compute(
            self.value(emb).data(),
            self.value(omega).item().f64(),
            self.value(bias).item().f64(),
            speakers,
            per_speaker,
            s[1],
        )?;
        let value = Tensor::scalar(F::of(terms.loss));
        Ok(self.push(value, Op::AngularProto { emb, omega, bias, speakers, per_speaker }))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), F::one()));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Conv2d { x, k, dims } => {
                    let (dx, dk) = self.conv_backward(*x, *k, dims, dy.data())?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *k, dk);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let c = inv_std.len();
                    let n = xhat.len() / c;
                    let g = self.value(*gamma).data();
                    let mut dgamma = vec![0f64; c];
                    let mut dbeta = vec![0f64; c];
                    for (idx, (d, xh)) in dy.data().iter().zip(xhat).enumerate() {
                        dbeta[idx % c] += d.f64();
                        dgamma[idx % c] += d.f64() * xh.f64();
                    }
                    let dx: Vec<F> = dy
                        .data()
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(idx, (d, xh))| {
                            let ch = idx % c;
                            let scale = g[ch].f64() * inv_std[ch];
                            if *train {
                                let nf = n as f64;
                                F::of(scale / nf * (nf * d.f64() - dbeta[ch] - xh.f64() * dgamma[ch]))
                            } else {
                                F::of(scale * d.f64())
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                    accumulate(&mut grads, *gamma, vec_tensor(self.shape(*gamma), &dgamma)?);
                    accumulate(&mut grads, *beta, vec_tensor(self.shape(*beta), &dbeta)?);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let dx =
                        dy.data().iter().zip(xv).map(|(&d, &a)| if a > F::zero() { d } else { F::zero() }).collect();
                    accumulate(&mut grads, *x, Tensor::new(dy.shape().to_vec(), dx)?);
                }
                Op::Tanh(x) => {
                    let yv = node.value.data();
                    let dx = dy.data().iter().zip(yv).map(|(&d, &y)| d * (F::one() - y * y)).collect();
                    accumulate(&mut grads, *x, Tensor::new(dy.shape().to_vec(), dx)?);
                }
                Op::Linear { x, w, b } => {
                    let (xs, ws) = (self.shape(*x), self.shape(*w));
                    let (rows, n_in, n_out) = (xs[0], xs[1], ws[1]);
                    let (xv, wv, dyv) = (self.value(*x).data(), self.value(*w).data(), dy.data());
                    let mut dx = vec![F::zero(); rows * n_in];
                    self.exec.for_each_chunk_mut(&mut dx, n_in, |r, dxr| {
                        let dyr = &dyv[r * n_out..(r + 1) * n_out];
                        for (i, di) in dxr.iter_mut().enumerate() {
                            *di = wv[i * n_out..(i + 1) * n_out].iter().zip(dyr).map(|(&a, &b)| a * b).sum();
                        }
                    });
                    let mut dw = vec![F::zero(); n_in * n_out];
                    let mut db = vec![F::zero(); n_out];
                    for r in 0..rows {
                        let dyr = &dyv[r * n_out..(r + 1) * n_out];
                        for (i, &xi) in xv[r * n_in..(r + 1) * n_in].iter().enumerate() {
                            for (dwo, &d) in dw[i * n_out..(i + 1) * n_out].iter_mut().zip(dyr) {
                                *dwo += xi * d;
                            }
                        }
                        for (dbo, &d) in db.iter_mut().zip(dyr) {
                            *dbo += d;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new([rows, n_in], dx)?);
                    accumulate(&mut grads, *w, Tensor::new([n_in, n_out], dw)?);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, Tensor::new(self.shape(*b).to_vec(), db)?);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Reshape(x) => {
                    let shape = self.shape(*x).to_vec();
                    accumulate(&mut grads, *x, dy.reshaped(shape)?);
                }
                Op::SwapFreqTime(x) => {
                    let s = dy.shape().to_vec();
                    let back = swap12(dy.data(), &s);
                    accumulate(&mut grads, *x, Tensor::new(self.shape(*x).to_vec(), back)?);
                }
                Op::AttentiveStats { h, e, alpha, mu, sigma, active } => {
                    let hs = self.shape(*h);
                    let (b, t, d) = (hs[0], hs[1], hs[2]);
                    let hv = self.value(*h).data();
                    let dyv = dy.data();
                    let mut dh = vec![F::zero(); b * t * d];
                    let mut de = vec![F::zero(); b * t];
                    for bi in 0..b {
                        // total gradients w.r.t. the first and second weighted moments
                        let mut g1 = vec![0f64; d];
                        let mut g2 = vec![0f64; d];
                        for di in 0..d {
                            let idx = bi * d + di;
                            let gvar =
                                if active[idx] { dyv[bi * 2 * d + d + di].f64() / (2.0 * sigma[idx]) } else { 0.0 };
                            g2[di] = gvar;
                            g1[di] = dyv[bi * 2 * d + di].f64() - 2.0 * mu[idx] * gvar;
                        }
                        let a = &alpha[bi * t..(bi + 1) * t];
                        let mut dalpha = vec![0f64; t];
                        for ti in 0..t {
                            let row = (bi * t + ti) * d;
                            let mut acc = 0.0;
                            for di in 0..d {
                                let x = hv[row + di].f64();
                                dh[row + di] = F::of(a[ti] * (g1[di] + 2.0 * x * g2[di]));
                                acc += g1[di] * x + g2[di] * x * x;
                            }
                            dalpha[ti] = acc;
                        }
                        let dot: f64 = a.iter().zip(&dalpha).map(|(p, q)| p * q).sum();
                        for ti in 0..t {
                            de[bi * t + ti] = F::of(a[ti] * (dalpha[ti] - dot));
                        }
                    }
                    accumulate(&mut grads, *h, Tensor::new([b, t, d], dh)?);
                    accumulate(&mut grads, *e, Tensor::new([b, t], de)?);
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let g = dy.item().f64();
                    let rows = labels.len();
                    let classes = probs.len() / rows;
                    let mut dl: Vec<F> = probs.iter().map(|&p| F::of(g * p / rows as f64)).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        let i = r * classes + y;
                        dl[i] = F::of(g * (probs[i] - 1.0) / rows as f64);
                    }
                    accumulate(&mut grads, *logits, Tensor::new([rows, classes], dl)?);
                }
                Op::AngularProto { emb, omega, bias, speakers, per_speaker } => {
                    let d = self.shape(*emb)[1];
                    let terms = ProtoTerms::compute(
                        self.value(*emb).data(),
                        self.value(*omega).item().f64(),
                        self.value(*bias).item().f64(),
                        *speakers,
                        *per_speaker,
                        d,
                    )?;
                    let (demb, domega, dbias) = terms.backward(self.value(*emb).data(), dy.item().f64());
                    accumulate(
                        &mut grads,
                        *emb,
                        Tensor::new(self.shape(*emb).to_vec(), demb.into_iter().map(F::of).collect())?,
                    );
                    accumulate(&mut grads, *omega, Tensor::full(self.shape(*omega).to_vec(), F::of(domega)));
                    accumulate(&mut grads, *bias, Tensor::full(self.shape(*bias).to_vec(), F::of(dbias)));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn conv_backward(&self, x: Var, k: Var, dims: &ConvDims, dy: &[F]) -> Result<(Tensor<F>, Tensor<F>)> {
        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let b = self.shape(x)[0];
        let per_sample = self.exec.map(b, |bi| {
            let xs = &xv[bi * dims.in_len()..(bi + 1) * dims.in_len()];
            let dys = &dy[bi * dims.out_len()..(bi + 1) * dims.out_len()];
            let mut dx = vec![F::zero(); dims.in_len()];
            let mut dk = vec![F::zero(); kv.len()];
            conv_backward_sample(xs, kv, dys, dims, &mut dx, &mut dk);
            (dx, dk)
        });
        let mut dx = Vec::with_capacity(b * dims.in_len());
        let mut dk = vec![F::zero(); kv.len()];
        for (dxs, dks) in per_sample {
            dx.extend_from_slice(&dxs);
            for (a, v) in dk.iter_mut().zip(dks) {
                *a += v;
            }
        }
        Ok((Tensor::new(self.shape(x).to_vec(), dx)?, Tensor::new(self.shape(k).to_vec(), dk)?))
    }
}

fn vec_tensor<F: Real>(shape: &[usize], v: &[f64]) -> Result<Tensor<F>> {
    Tensor::new(shape.to_vec(), v.iter().map(|&x| F::of(x)).collect())
}

fn swap12<F: Real>(data: &[F], s: &[usize]) -> Vec<F> {
    let (b, p, q, c) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(data.len());
    for bi in 0..b {
        for j in 0..q {
            for i in 0..p {
                let base = ((bi * p + i) * q + j) * c;
                out.extend_from_slice(&data[base..base + c]);
            }
        }
    }
    out
}

fn conv_forward_sample<F: Real>(x: &[F], k: &[F], d: &ConvDims, out: &mut [F]) {
    for oy in 0..d.ho {
        for ox in 0..d.wo {
            let o = &mut out[(oy * d.wo + ox) * d.cout..(oy * d.wo + ox + 1) * d.cout];
            for ky in 0..d.kh {
                let Some(iy) = ConvDims::src(oy, d.sh, ky, d.pad_top, d.h) else { continue };
                for kx in 0..d.kw {
                    let Some(ix) = ConvDims::src(ox, d.sw, kx, d.pad_left, d.w) else { continue };
                    let xin = &x[(iy * d.w + ix) * d.cin..(iy * d.w + ix + 1) * d.cin];
                    let taps = &k[(ky * d.kw + kx) * d.cin * d.cout..(ky * d.kw + kx + 1) * d.cin * d.cout];
                    for (ci, &xv) in xin.iter().enumerate() {
                        for (oo, &kv) in o.iter_mut().zip(&taps[ci * d.cout..(ci + 1) * d.cout]) {
                            *oo += xv * kv;
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_sample<F: Real>(x: &[F], k: &[F], dy: &[F], d: &ConvDims, dx: &mut [F], dk: &mut [F]) {
    for oy in 0..d.ho {
        for ox in 0..d.wo {
            let g = &dy[(oy * d.wo + ox) * d.cout..(oy * d.wo + ox + 1) * d.cout];
            for ky in 0..d.kh {
                let Some(iy) = ConvDims::src(oy, d.sh, ky, d.pad_top, d.h) else { continue };
                for kx in 0..d.kw {
                    let Some(ix) = ConvDims::src(ox, d.sw, kx, d.pad_left, d.w) else { continue };
                    let base_in = (iy * d.w + ix) * d.cin;
                    let base_k = (ky * d.kw + kx) * d.cin * d.cout;
                    for ci in 0..d.cin {
                        let taps = &k[base_k + ci * d.cout..base_k + (ci + 1) * d.cout];
                        let mut acc = F::zero();
                        for (&kv, &gv) in taps.iter().zip(g) {
                            acc += kv * gv;
                        }
                        dx[base_in + ci] += acc;
                        let xv = x[base_in + ci];
                        for (dkv, &gv) in dk[base_k + ci * d.cout..base_k + (ci + 1) * d.cout].iter_mut().zip(g) {
                            *dkv += xv * gv;
                        }
                    }
                }
            }
        }
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_into(xs: impl Iterator<Item = f64> + Clone, out: &mut [f64]) {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, x) in out.iter_mut().zip(xs) {
        *o = (x - m).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Forward quantities of the angular prototypical loss, kept in f64.
struct ProtoTerms {
    speakers: usize,
    per_speaker: usize,
    dim: usize,
    centroids: Vec<f64>,
    q_norm: Vec<f64>,
    c_norm: Vec<f64>,
    cos: Vec<f64>,
    probs: Vec<f64>,
    omega: f64,
    omega_clamped: bool,
    loss: f64,
}

impl ProtoTerms {
    fn compute<F: Real>(emb: &[F], omega: f64, bias: f64, n: usize, m: usize, d: usize) -> Result<Self> {
        let row = |spk: usize, j: usize| &emb[(spk * m + j) * d..(spk * m + j + 1) * d];
        let mut centroids = vec![0f64; n * d];
        for k in 0..n {
            let c = &mut centroids[k * d..(k + 1) * d];
            for j in 0..m - 1 {
                for (cv, x) in c.iter_mut().zip(row(k, j)) {
                    *cv += x.f64();
                }
            }
            c.iter_mut().for_each(|v| *v /= (m - 1) as f64);
        }
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let q_norm: Vec<f64> = (0..n).map(|i| norm(&mut row(i, m - 1).iter().map(|x| x.f64()))).collect();
        let c_norm: Vec<f64> = (0..n).map(|k| norm(&mut centroids[k * d..(k + 1) * d].iter().copied())).collect();
        if q_norm.iter().chain(&c_norm).any(|&v| v < NORM_EPS) {
            return Err(Error::DegenerateEmbedding);
        }
        let omega_clamped = omega < PROTO_OMEGA_MIN;
        let omega = omega.max(PROTO_OMEGA_MIN);
        let mut cos = vec![0f64; n * n];
        let mut probs = vec![0f64; n * n];
        let mut loss = 0.0;
        for i in 0..n {
            let q = row(i, m - 1);
            for k in 0..n {
                let c = &centroids[k * d..(k + 1) * d];
                let dot: f64 = q.iter().zip(c).map(|(a, b)| a.f64() * b).sum();
                cos[i * n + k] = dot / (q_norm[i] * c_norm[k]);
            }
            let logits = cos[i * n..(i + 1) * n].iter().map(|&c| omega * c + bias);
            loss += log_sum_exp(logits.clone()) - (omega * cos[i * n + i] + bias);
            softmax_into(logits, &mut probs[i * n..(i + 1) * n]);
        }
        Ok(Self {
            speakers: n,
            per_speaker: m,
            dim: d,
            centroids,
            q_norm,
            c_norm,
            cos,
            probs,
            omega,
            omega_clamped,
            loss: loss / n as f64,
        })
    }

    fn backward<F: Real>(&self, emb: &[F], g: f64) -> (Vec<f64>, f64, f64) {
        let (n, m, d) = (self.speakers, self.per_speaker, self.dim);
        let mut demb = vec![0f64; emb.len()];
        let mut dcent = vec![0f64; n * d];
        let (mut domega, mut dbias) = (0.0, 0.0);
        for i in 0..n {
            let qi = (i * m + m - 1) * d;
            for k in 0..n {
                let ds = g * (self.probs[i * n + k] - if i == k { 1.0 } else { 0.0 }) / n as f64;
                let cos = self.cos[i * n + k];
                domega += ds * cos;
                dbias += ds;
                let dcos = self.omega * ds;
                let (qn, cn) = (self.q_norm[i], self.c_norm[k]);
                for di in 0..d {
                    let q = emb[qi + di].f64();
                    let c = self.centroids[k * d + di];
                    demb[qi + di] += dcos * (c / (qn * cn) - cos * q / (qn * qn));
                    dcent[k * d + di] += dcos * (q / (qn * cn) - cos * c / (cn * cn));
                }
            }
        }
        for k in 0..n {
            for j in 0..m - 1 {
                for di in 0..d {
                    demb[(k * m + j) * d + di] += dcent[k * d + di] / (m - 1) as f64;
                }
            }
        }
        if self.omega_clamped {
            domega = 0.0;
        }
        (demb, domega, dbias)
    }
}
