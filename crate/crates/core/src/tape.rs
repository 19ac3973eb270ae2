//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation in execution order, so node indices are
//! already a topological order and the backward sweep is a single reverse pass.
//! Build one tape per minibatch and drop it after [`Tape::gradients`].

use std::borrow::Cow;

use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::special::{digamma, trigamma, EULER_GAMMA};
use crate::tensor::{gemm, DenseMatrix};

/// Probabilities entering logs are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// `op(a) · op(b)`, flags mark transposed storage.
    MatMul {
        a: Var,
        b: Var,
        a_t: bool,
        b_t: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Each row of an `n × f` matrix times a `1 × f` row.
    MulRow {
        x: Var,
        row: Var,
    },
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sum(Var),
    SumSquares(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: DenseMatrix,
    },
    Im2Row {
        input: Var,
        geom: ConvGeometry,
    },
    PatchesToChannels {
        input: Var,
        pixels: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Kumaraswamy {
        c: Var,
        d: Var,
        u: Vec<f64>,
    },
    CumProd(Var),
    RelaxedBernoulli {
        pi: Var,
        tau: f64,
    },
    KlBernoulli {
        q: Var,
        p: Var,
    },
    KlKumaraswamyBeta {
        c: Var,
        d: Var,
        alpha: f64,
    },
}

struct Node<'a> {
    value: Cow<'a, DenseMatrix>,
    op: Op,
    requires_grad: bool,
}

/// Records operations on [`DenseMatrix`] values for one forward/backward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf borrowed from the caller.
    pub fn param(&mut self, value: &'a DenseMatrix) -> Var {
        self.leaf(Cow::Borrowed(value), true)
    }

    pub fn param_owned(&mut self, value: DenseMatrix) -> Var {
        self.leaf(Cow::Owned(value), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: &'a DenseMatrix) -> Var {
        self.leaf(Cow::Borrowed(value), false)
    }

    pub fn constant_owned(&mut self, value: DenseMatrix) -> Var {
        self.leaf(Cow::Owned(value), false)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    fn leaf(&mut self, value: Cow<'a, DenseMatrix>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: DenseMatrix, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = if a_t { (av.cols(), av.rows()) } else { av.shape() };
        let (k2, n) = if b_t { (bv.cols(), bv.rows()) } else { bv.shape() };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims {k} vs {k2} ({}x{} by {}x{})",
                av.rows(),
                av.cols(),
                bv.rows(),
                bv.cols()
            )));
        }
        let mut out = DenseMatrix::zeros(m, n);
        gemm(
            m,
            k,
            n,
            1.0,
            (av.as_slice(), a_t),
            (bv.as_slice(), b_t),
            0.0,
            out.as_mut_slice(),
        );
        Ok(self.push(out, Op::MatMul { a, b, a_t, b_t }, &[a, b]))
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ`, the layout of a dense layer applied to row-major batches.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<DenseMatrix> {
        let (av, bv) = (self.value(a), self.value(b));
        av.check_same_shape(bv, what)?;
        let data = av
            .as_slice()
            .iter()
            .zip(bv.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect();
        DenseMatrix::new(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Scales every row of `x` elementwise by the row vector `row`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::shape(format!(
                "mul_row: {}x{} by {}x{}",
                xv.rows(),
                xv.cols(),
                rv.rows(),
                rv.cols()
            )));
        }
        let mut out = xv.clone();
        let r = rv.as_slice();
        for chunk in out.as_mut_slice().chunks_exact_mut(r.len().max(1)) {
            chunk.iter_mut().zip(r).for_each(|(v, s)| *v *= s);
        }
        Ok(self.push(out, Op::MulRow { x, row }, &[x, row]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(DenseMatrix::filled(1, 1, s), Op::Sum(a), &[a])
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().map(|x| x * x).sum();
        self.push(DenseMatrix::filled(1, 1, s), Op::SumSquares(a), &[a])
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != labels.len() || lv.rows() == 0 {
            return Err(Error::contract(format!(
                "{} logit rows for {} labels",
                lv.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= lv.cols()) {
            return Err(Error::contract(format!("label {bad} outside {} classes", lv.cols())));
        }
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= labels.len() as f64;
        let op = Op::SoftmaxCe {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(DenseMatrix::filled(1, 1, loss), op, &[logits]))
    }

    /// Unrolls each image row of `input` into `(B·P) × K` patch rows.
    pub fn im2row(&mut self, input: Var, geom: ConvGeometry) -> Result<Var> {
        let iv = self.value(input);
        if iv.cols() != geom.input_len() {
            return Err(Error::shape(format!(
                "conv input has {} features, geometry expects {}",
                iv.cols(),
                geom.input_len()
            )));
        }
        let out = conv::im2row_batch(iv, &geom);
        Ok(self.push(out, Op::Im2Row { input, geom }, &[input]))
    }

    /// Regroups `(B·P) × J` patch outputs into `B × (J·P)` channel-major rows.
    pub fn patches_to_channels(&mut self, input: Var, pixels: usize) -> Result<Var> {
        let iv = self.value(input);
        if pixels == 0 || iv.rows() % pixels != 0 {
            return Err(Error::shape(format!(
                "{} rows not a multiple of {pixels} pixels",
                iv.rows()
            )));
        }
        let out = conv::patches_to_channels(iv, iv.rows() / pixels, pixels);
        Ok(self.push(out, Op::PatchesToChannels { input, pixels }, &[input]))
    }

    pub fn max_pool(&mut self, input: Var, chw: (usize, usize, usize), size: usize) -> Result<Var> {
        let iv = self.value(input);
        if iv.cols() != chw.0 * chw.1 * chw.2 || size == 0 {
            return Err(Error::shape(format!("max_pool over {} features as {chw:?}", iv.cols())));
        }
        let (out, argmax) = conv::max_pool(iv, chw, size);
        Ok(self.push(out, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Reparameterized Kumaraswamy draw `(1 - (1-u)^(1/d))^(1/c)` with fixed noise `u`.
    pub fn kumaraswamy(&mut self, c: Var, d: Var, u: &[f64]) -> Result<Var> {
        let (cv, dv) = (self.value(c), self.value(d));
        cv.check_same_shape(dv, "kumaraswamy")?;
        if u.len() != cv.len() {
            return Err(Error::shape(format!("{} noise draws for {} sticks", u.len(), cv.len())));
        }
        let data = cv
            .as_slice()
            .iter()
            .zip(dv.as_slice())
            .zip(u)
            .map(|((&c, &d), &u)| kumaraswamy_sample(c, d, u))
            .collect();
        let out = DenseMatrix::new(cv.rows(), cv.cols(), data)?;
        Ok(self.push(out, Op::Kumaraswamy { c, d, u: u.to_vec() }, &[c, d]))
    }

    /// Running product along the entries of a vector.
    pub fn cumprod(&mut self, v: Var) -> Var {
        let vv = self.value(v);
        let mut acc = 1.0;
        let data = vv
            .as_slice()
            .iter()
            .map(|x| {
                acc *= x;
                acc
            })
            .collect();
        let out = DenseMatrix::new(vv.rows(), vv.cols(), data).expect("same length");
        self.push(out, Op::CumProd(v), &[v])
    }

    /// Relaxed Bernoulli sample `sigmoid((logit π + logit u) / τ)`; π is clamped.
    pub fn relaxed_bernoulli(&mut self, pi: Var, u: &[f64], tau: f64) -> Result<Var> {
        let pv = self.value(pi);
        if u.len() != pv.len() {
            return Err(Error::shape(format!(
                "{} noise draws for {} probabilities",
                u.len(),
                pv.len()
            )));
        }
        if tau <= 0.0 {
            return Err(Error::contract("temperature must be positive"));
        }
        let data = pv
            .as_slice()
            .iter()
            .zip(u)
            .map(|(&p, &u)| relaxed_bernoulli_sample(p, u, tau))
            .collect();
        let out = DenseMatrix::new(pv.rows(), pv.cols(), data)?;
        Ok(self.push(out, Op::RelaxedBernoulli { pi, tau }, &[pi]))
    }

    /// `Σ KL(Bernoulli(q_k) ‖ Bernoulli(p_k))` with clamped probabilities.
    pub fn kl_bernoulli(&mut self, q: Var, p: Var) -> Result<Var> {
        let (qv, pv) = (self.value(q), self.value(p));
        qv.check_same_shape(pv, "kl_bernoulli")?;
        let kl = qv
            .as_slice()
            .iter()
            .zip(pv.as_slice())
            .map(|(&q, &p)| kl_bernoulli_term(q, p))
            .sum();
        Ok(self.push(DenseMatrix::filled(1, 1, kl), Op::KlBernoulli { q, p }, &[q, p]))
    }

    /// `Σ KL(Kumaraswamy(c_k, d_k) ‖ Beta(α, 1))` in closed form.
    pub fn kl_kumaraswamy_beta(&mut self, c: Var, d: Var, alpha: f64) -> Result<Var> {
        let (cv, dv) = (self.value(c), self.value(d));
        cv.check_same_shape(dv, "kl_kumaraswamy_beta")?;
        if alpha <= 0.0 || cv.as_slice().iter().chain(dv.as_slice()).any(|&x| x <= 0.0) {
            return Err(Error::contract("Kumaraswamy/Beta parameters must be positive"));
        }
        let kl = cv
            .as_slice()
            .iter()
            .zip(dv.as_slice())
            .map(|(&c, &d)| kl_kumaraswamy_beta_term(c, d, alpha))
            .sum();
        let op = Op::KlKumaraswamyBeta { c, d, alpha };
        Ok(self.push(DenseMatrix::filled(1, 1, kl), op, &[c, d]))
    }

    /// `∂loss/∂param` for each requested node; unreachable params get zeros.
    pub fn gradients(&self, loss: Var, params: &[Var]) -> Result<Vec<DenseMatrix>> {
        if self.value(loss).scalar().is_none() {
            let (r, c) = self.value(loss).shape();
            return Err(Error::contract(format!("loss must be 1x1, got {r}x{c}")));
        }
        let mut grads: Vec<Option<DenseMatrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(DenseMatrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        Ok(params
            .iter()
            .map(|p| {
                grads.get_mut(p.0).and_then(Option::take).unwrap_or_else(|| {
                    let (r, c) = self.value(*p).shape();
                    DenseMatrix::zeros(r, c)
                })
            })
            .collect())
    }

    fn backward_node(&self, idx: usize, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) {
        let node = &self.nodes[idx];
        let out = &*node.value;
        let gs = g.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, a_t, b_t } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = out.shape();
                let k = if *a_t { av.rows() } else { av.cols() };
                if self.wants(*a) {
                    // dA = G · op(B)ᵀ, stored in A's layout.
                    let mut da = DenseMatrix::zeros(av.rows(), av.cols());
                    if *a_t {
                        gemm(k, n, m, 1.0, (bv.as_slice(), *b_t), (gs, true), 0.0, da.as_mut_slice());
                    } else {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            (gs, false),
                            (bv.as_slice(), !*b_t),
                            0.0,
                            da.as_mut_slice(),
                        );
                    }
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = DenseMatrix::zeros(bv.rows(), bv.cols());
                    if *b_t {
                        gemm(n, m, k, 1.0, (gs, true), (av.as_slice(), *a_t), 0.0, db.as_mut_slice());
                    } else {
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            (av.as_slice(), !*a_t),
                            (gs, false),
                            0.0,
                            db.as_mut_slice(),
                        );
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.send(grads, *a, || zip(g, bv, |g, y| g * y));
                self.send(grads, *b, || zip(g, av, |g, x| g * x));
            }
            Op::MulRow { x, row } => {
                let (xv, rv) = (self.value(*x), self.value(*row));
                let f = rv.cols();
                self.send(grads, *x, || {
                    let mut dx = g.clone();
                    for chunk in dx.as_mut_slice().chunks_exact_mut(f.max(1)) {
                        chunk.iter_mut().zip(rv.as_slice()).for_each(|(v, s)| *v *= s);
                    }
                    dx
                });
                self.send(grads, *row, || {
                    let mut dr = vec![0.0; f];
                    for (gc, xc) in gs.chunks_exact(f.max(1)).zip(xv.as_slice().chunks_exact(f.max(1))) {
                        for ((acc, gv), xv) in dr.iter_mut().zip(gc).zip(xc) {
                            *acc += gv * xv;
                        }
                    }
                    DenseMatrix::row_vector(dr)
                });
            }
            Op::Scale(a, factor) => self.send(grads, *a, || g.map(|x| x * factor)),
            Op::Relu(a) => {
                let av = self.value(*a);
                self.send(grads, *a, || zip(g, av, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Sigmoid(a) => self.send(grads, *a, || zip(g, out, |g, s| g * s * (1.0 - s))),
            Op::Softplus(a) => {
                let av = self.value(*a);
                self.send(grads, *a, || zip(g, av, |g, x| g * sigmoid(x)));
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.send(grads, *a, || DenseMatrix::filled(r, c, gs[0]));
            }
            Op::SumSquares(a) => {
                let av = self.value(*a);
                self.send(grads, *a, || av.map(|x| 2.0 * x * gs[0]));
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                self.send(grads, *logits, || {
                    let scale = gs[0] / labels.len() as f64;
                    let mut d = probs.clone();
                    let cols = d.cols();
                    let data = d.as_mut_slice();
                    for (i, &y) in labels.iter().enumerate() {
                        data[i * cols + y] -= 1.0;
                    }
                    data.iter_mut().for_each(|v| *v *= scale);
                    d
                });
            }
            Op::Im2Row { input, geom } => {
                let batch = self.value(*input).rows();
                self.send(grads, *input, || conv::row2im_batch(g, geom, batch));
            }
            Op::PatchesToChannels { input, pixels } => {
                let channels = self.value(*input).cols();
                self.send(grads, *input, || conv::channels_to_patches(g, channels, *pixels));
            }
            Op::MaxPool { input, argmax } => {
                let (r, c) = self.value(*input).shape();
                self.send(grads, *input, || {
                    let mut d = DenseMatrix::zeros(r, c);
                    let out_cols = out.cols();
                    let data = d.as_mut_slice();
                    for (o, (&src, &gv)) in argmax.iter().zip(gs).enumerate() {
                        data[(o / out_cols) * c + src] += gv;
                    }
                    d
                });
            }
            Op::Kumaraswamy { c, d, u } => {
                let (cv, dv) = (self.value(*c), self.value(*d));
                let parts: Vec<(f64, f64)> = cv
                    .as_slice()
                    .iter()
                    .zip(dv.as_slice())
                    .zip(u)
                    .zip(out.as_slice())
                    .map(|(((&c, &d), &u), &v)| kumaraswamy_partials(c, d, u, v))
                    .collect();
                self.send(grads, *c, || {
                    from_iter_like(cv, parts.iter().zip(gs).map(|((dc, _), g)| g * dc))
                });
                self.send(grads, *d, || {
                    from_iter_like(dv, parts.iter().zip(gs).map(|((_, dd), g)| g * dd))
                });
            }
            Op::CumProd(v) => {
                let vv = self.value(*v);
                self.send(grads, *v, || {
                    let x = vv.as_slice();
                    let n = x.len();
                    // dπ_k/dv_j = Π_{i≤k, i≠j} v_i for j ≤ k; avoids dividing by v_j.
                    let mut prefix = vec![1.0; n + 1];
                    for i in 0..n {
                        prefix[i + 1] = prefix[i] * x[i];
                    }
                    let mut dv = vec![0.0; n];
                    for (j, slot) in dv.iter_mut().enumerate() {
                        let mut partial = prefix[j];
                        let mut acc = 0.0;
                        for k in j..n {
                            if k > j {
                                partial *= x[k];
                            }
                            acc += gs[k] * partial;
                        }
                        *slot = acc;
                    }
                    from_iter_like(vv, dv.into_iter())
                });
            }
            Op::RelaxedBernoulli { pi, tau } => {
                let pv = self.value(*pi);
                self.send(grads, *pi, || {
                    let data = pv.as_slice().iter().zip(out.as_slice()).zip(gs).map(|((&p, &b), &g)| {
                        if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                            return 0.0;
                        }
                        g * b * (1.0 - b) / (tau * p * (1.0 - p))
                    });
                    from_iter_like(pv, data)
                });
            }
            Op::KlBernoulli { q, p } => {
                let (qv, pv) = (self.value(*q), self.value(*p));
                let scale = gs[0];
                self.send(grads, *q, || {
                    let data = qv.as_slice().iter().zip(pv.as_slice()).map(|(&q, &p)| {
                        if !(PROB_EPS..=1.0 - PROB_EPS).contains(&q) {
                            return 0.0;
                        }
                        let p = clamp_prob(p);
                        scale * ((q / p).ln() - ((1.0 - q) / (1.0 - p)).ln())
                    });
                    from_iter_like(qv, data)
                });
                self.send(grads, *p, || {
                    let data = qv.as_slice().iter().zip(pv.as_slice()).map(|(&q, &p)| {
                        if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                            return 0.0;
                        }
                        let q = clamp_prob(q);
                        scale * (-q / p + (1.0 - q) / (1.0 - p))
                    });
                    from_iter_like(pv, data)
                });
            }
            Op::KlKumaraswamyBeta { c, d, alpha } => {
                let (cv, dv) = (self.value(*c), self.value(*d));
                let scale = gs[0];
                self.send(grads, *c, || {
                    let data = cv.as_slice().iter().zip(dv.as_slice()).map(|(&c, &d)| {
                        let inner = -EULER_GAMMA - digamma(d) - 1.0 / d;
                        scale * (alpha / (c * c) * inner + 1.0 / c)
                    });
                    from_iter_like(cv, data)
                });
                self.send(grads, *d, || {
                    let data = cv.as_slice().iter().zip(dv.as_slice()).map(|(&c, &d)| {
                        let lead = (c - alpha) / c;
                        scale * (lead * (-trigamma(d) + 1.0 / (d * d)) + 1.0 / d - 1.0 / (d * d))
                    });
                    from_iter_like(dv, data)
                });
            }
        }
    }

    #[inline]
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn send(&self, grads: &mut [Option<DenseMatrix>], target: Var, make: impl FnOnce() -> DenseMatrix) {
        if self.wants(target) {
            accumulate(grads, target, make());
        }
    }
}

fn accumulate(grads: &mut [Option<DenseMatrix>], target: Var, contribution: DenseMatrix) {
    match &mut grads[target.0] {
        Some(existing) => existing
            .as_mut_slice()
            .iter_mut()
            .zip(contribution.as_slice())
            .for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contribution),
    }
}

fn zip(a: &DenseMatrix, b: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
    from_iter_like(a, a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)))
}

fn from_iter_like(shape: &DenseMatrix, values: impl Iterator<Item = f64>) -> DenseMatrix {
    DenseMatrix::new(shape.rows(), shape.cols(), values.collect()).expect("shape preserved")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive inputs.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub fn softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    let cols = out.cols().max(1);
    for row in out.as_mut_slice().chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

pub(crate) fn kumaraswamy_sample(c: f64, d: f64, u: f64) -> f64 {
    // 1 - (1-u)^(1/d) computed as -expm1(ln(1-u)/d) to keep precision near 0.
    let inner = -((-u).ln_1p() / d).exp_m1();
    inner.powf(1.0 / c)
}

/// `(∂v/∂c, ∂v/∂d)` for `v = (1 - (1-u)^(1/d))^(1/c)`.
fn kumaraswamy_partials(c: f64, d: f64, u: f64, v: f64) -> (f64, f64) {
    let log1mu = (-u).ln_1p();
    let w = (log1mu / d).exp(); // (1-u)^(1/d)
    let inner = 1.0 - w;
    if inner <= 0.0 || v <= 0.0 {
        return (0.0, 0.0);
    }
    let dv_dc = -v * inner.ln() / (c * c);
    // ∂inner/∂d = w · ln(1-u) / d²
    let dv_dd = v / (c * inner) * w * log1mu / (d * d);
    (dv_dc, dv_dd)
}

pub(crate) fn relaxed_bernoulli_sample(p: f64, u: f64, tau: f64) -> f64 {
    let p = clamp_prob(p);
    let logit = p.ln() - (-p).ln_1p() + u.ln() - (-u).ln_1p();
    sigmoid(logit / tau)
}

pub(crate) fn kl_bernoulli_term(q: f64, p: f64) -> f64 {
    let (q, p) = (clamp_prob(q), clamp_prob(p));
    q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln()
}

pub(crate) fn kl_kumaraswamy_beta_term(c: f64, d: f64, alpha: f64) -> f64 {
    (c - alpha) / c * (-EULER_GAMMA - digamma(d) - 1.0 / d) + (c * d).ln() - alpha.ln() - (d - 1.0) / d
}
