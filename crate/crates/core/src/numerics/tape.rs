//! Execution contexts: the recording tape and the plain evaluator.
//!
//! Model code is written once, generically over [`Context`], and runs in two
//! modes:
//!
//! - [`Tape`] records every operation and supports reverse-mode [`Tape::backward`].
//!   Cloud-side training uses this.
//! - [`Eval`] computes values only and never allocates differentiation state.
//!   Serving and the whole device path run on `Eval`.
//!
//! The backprop-free contract is enforced, not just documented: while a
//! [`NoTapeGuard`] is alive on a thread, any tape allocation on that thread
//! panics, and [`tape_allocations`] exposes a per-thread counter so tests can
//! assert that an evaluation path allocated nothing.

use std::cell::Cell;

use super::kernels::{self, AdainCache};
use super::tensor::Tensor;
use super::{shape_err, NumericsError, Result};

pub type NodeId = usize;

/// Uniform interface over recorded and unrecorded execution.
///
/// Handles are context-specific indices; values live inside the context and
/// are read back through [`Context::value`].
pub trait Context {
    type Handle: Copy + std::fmt::Debug;

    /// Insert a value that never needs a gradient.
    fn constant(&mut self, t: Tensor) -> Self::Handle;
    /// Insert a parameter leaf. On a tape, `trainable` marks it as a gradient
    /// target; on the evaluator the flag is meaningless.
    fn param(&mut self, t: &Tensor, trainable: bool) -> Self::Handle;
    fn value(&self, h: Self::Handle) -> &Tensor;

    /// y[n,m] = x[n,k] . w[m,k]^T + b[m]
    fn linear(&mut self, x: Self::Handle, w: Self::Handle, b: Self::Handle)
        -> Result<Self::Handle>;
    /// Row-wise layer normalization (population statistics) with affine terms.
    fn layernorm(
        &mut self,
        x: Self::Handle,
        gamma: Self::Handle,
        beta: Self::Handle,
        eps: f64,
    ) -> Result<Self::Handle>;
    fn add(&mut self, a: Self::Handle, b: Self::Handle) -> Result<Self::Handle>;
    fn sub(&mut self, a: Self::Handle, b: Self::Handle) -> Result<Self::Handle>;
    fn mul(&mut self, a: Self::Handle, b: Self::Handle) -> Result<Self::Handle>;
    fn scale(&mut self, x: Self::Handle, c: f64) -> Self::Handle;
    fn tanh(&mut self, x: Self::Handle) -> Self::Handle;
    fn clamp(&mut self, x: Self::Handle, lo: f64, hi: f64) -> Self::Handle;
    /// x[n,d] + v[d] broadcast over rows.
    fn add_row_broadcast(&mut self, x: Self::Handle, v: Self::Handle) -> Result<Self::Handle>;
    /// [x[n,da] | v repeated per row] -> [n, da+db]
    fn concat_rows_broadcast(&mut self, x: Self::Handle, v: Self::Handle)
        -> Result<Self::Handle>;
    /// Vertical concatenation of 2-D blocks with equal column counts.
    fn concat_rows(&mut self, parts: &[Self::Handle]) -> Result<Self::Handle>;
    /// Contiguous range of the flattened input, as a 1-D tensor.
    fn slice_flat(&mut self, x: Self::Handle, start: usize, len: usize) -> Result<Self::Handle>;
    fn reshape(&mut self, x: Self::Handle, shape: &[usize]) -> Result<Self::Handle>;
    /// Mean of the table rows selected by `ids` (duplicates count twice).
    fn embed_mean(&mut self, table: Self::Handle, ids: &[usize]) -> Result<Self::Handle>;
    /// Mean of the selected rows of a 2-D tensor.
    fn mean_rows_subset(&mut self, x: Self::Handle, rows: &[usize]) -> Result<Self::Handle>;
    /// The whole 2-D block repeated `reps` times: [r,d] -> [reps*r, d].
    fn tile_rows(&mut self, x: Self::Handle, reps: usize) -> Result<Self::Handle>;
    /// Each row repeated `reps` times consecutively: [r,d] -> [r*reps, d].
    fn repeat_rows(&mut self, x: Self::Handle, reps: usize) -> Result<Self::Handle>;
    /// Horizontal concatenation of 2-D blocks with equal row counts.
    fn concat_cols(&mut self, a: Self::Handle, b: Self::Handle) -> Result<Self::Handle>;
    /// The selected rows of a 2-D tensor, in the given order (duplicates allowed).
    fn gather_rows(&mut self, x: Self::Handle, rows: &[usize]) -> Result<Self::Handle>;
    /// Mean over consecutive groups of `group` rows: [g*m, d] -> [m, d].
    fn mean_rows_groups(&mut self, x: Self::Handle, group: usize) -> Result<Self::Handle>;
    /// One bag mean per id list: row b of the output is the mean of the table
    /// rows selected by `lists[b]` (duplicates count twice).
    fn embed_mean_rows(&mut self, table: Self::Handle, lists: &[Vec<usize>])
        -> Result<Self::Handle>;
    /// Row-wise adaptive renormalization: row i of the content standardized,
    /// then scaled/shifted to the statistics of row i of the style. Errors when
    /// any content row's standard deviation is effectively zero.
    fn adain_rows(&mut self, style: Self::Handle, content: Self::Handle) -> Result<Self::Handle>;
    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    fn softmax_cross_entropy(
        &mut self,
        logits: Self::Handle,
        targets: &[usize],
    ) -> Result<Self::Handle>;
    /// Mean squared difference over all elements.
    fn mse(&mut self, a: Self::Handle, b: Self::Handle) -> Result<Self::Handle>;
    /// Adaptive renormalization: content standardized, then scaled/shifted to
    /// the style vector's population statistics. Errors when the content
    /// standard deviation is effectively zero.
    fn adain(&mut self, style: Self::Handle, content: Self::Handle) -> Result<Self::Handle>;
    /// Reparameterized draw mu + exp(logvar/2) * eps with externally supplied
    /// standard-normal noise, so the draw stays differentiable in mu/logvar.
    fn gaussian_sample(
        &mut self,
        mu: Self::Handle,
        logvar: Self::Handle,
        eps: &Tensor,
    ) -> Result<Self::Handle>;
    /// KL(N(mu, diag sigma^2) || N(0, I)) summed over elements,
    /// with sigma^2 = exp(logvar).
    fn kl_std_normal(&mut self, mu: Self::Handle, logvar: Self::Handle) -> Result<Self::Handle>;
}

// ── device-path guard ────────────────────────────────────────────────────────

thread_local! {
    static FORBID_TAPES: Cell<u32> = const { Cell::new(0) };
    static TAPE_ALLOCS: Cell<u64> = const { Cell::new(0) };
}

/// While alive, tape allocation on this thread panics. Install one on every
/// thread that must stay backprop-free (device inference, serving handlers).
pub struct NoTapeGuard(());

impl NoTapeGuard {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        FORBID_TAPES.with(|f| f.set(f.get() + 1));
        NoTapeGuard(())
    }
}

impl Drop for NoTapeGuard {
    fn drop(&mut self) {
        FORBID_TAPES.with(|f| f.set(f.get() - 1));
    }
}

/// Number of tape node allocations made by the current thread so far.
pub fn tape_allocations() -> u64 {
    TAPE_ALLOCS.with(|a| a.get())
}

fn note_tape_alloc() {
    FORBID_TAPES.with(|f| {
        if f.get() > 0 {
            panic!(
                "tape allocation on a gradient-free path: this thread holds a \
                 NoTapeGuard, so recording differentiation state here is a bug"
            );
        }
    });
    TAPE_ALLOCS.with(|a| a.set(a.get() + 1));
}

// ── shared forward computations ──────────────────────────────────────────────

fn check_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, k) = x.dims2("linear")?;
    let (m, kw) = w.dims2("linear")?;
    let bm = b.dims1("linear")?;
    if kw != k || bm != m {
        return shape_err(
            "linear",
            format!("x {:?} . w {:?}^T + b {:?} is inconsistent", x.shape(), w.shape(), b.shape()),
        );
    }
    Ok((n, k, m))
}

fn fwd_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k, m) = check_linear(x, w, b)?;
    Ok(Tensor::from_raw(vec![n, m], kernels::linear(x.data(), n, k, w.data(), m, b.data())))
}

fn check_layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize)> {
    let (n, d) = x.dims2("layernorm")?;
    if d < 2 {
        return Err(NumericsError::DegenerateNorm { dim: d });
    }
    if gamma.dims1("layernorm")? != d || beta.dims1("layernorm")? != d {
        return shape_err(
            "layernorm",
            format!(
                "affine terms {:?}/{:?} do not match row width {}",
                gamma.shape(),
                beta.shape(),
                d
            ),
        );
    }
    Ok((n, d))
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("operands {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn fwd_elementwise(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    check_same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_raw(a.shape().to_vec(), data))
}

fn check_row_broadcast(op: &'static str, x: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, d) = x.dims2(op)?;
    let dv = v.dims1(op)?;
    Ok((n, d, dv))
}

pub(crate) fn fwd_adain(style: &Tensor, content: &Tensor) -> Result<(Tensor, AdainCache)> {
    let d = content.dims1("adain")?;
    if style.dims1("adain")? != d {
        return shape_err(
            "adain",
            format!("style {:?} vs content {:?}", style.shape(), content.shape()),
        );
    }
    if d < 2 {
        return Err(NumericsError::DegenerateNorm { dim: d });
    }
    let (_, sigma_c) = kernels::mean_std(content.data());
    if sigma_c < kernels::ADAIN_MIN_STD {
        return Err(NumericsError::DegenerateStats {
            sigma: sigma_c,
            min: kernels::ADAIN_MIN_STD,
        });
    }
    let (y, cache) = kernels::adain(style.data(), content.data());
    Ok((Tensor::from_raw(vec![d], y), cache))
}

fn fwd_tile_rows(x: &Tensor, reps: usize) -> Result<Tensor> {
    let (r, d) = x.dims2("tile_rows")?;
    if reps == 0 {
        return shape_err("tile_rows", "zero repetitions");
    }
    let mut y = Vec::with_capacity(reps * r * d);
    for _ in 0..reps {
        y.extend_from_slice(x.data());
    }
    Ok(Tensor::from_raw(vec![reps * r, d], y))
}

fn fwd_repeat_rows(x: &Tensor, reps: usize) -> Result<Tensor> {
    let (r, d) = x.dims2("repeat_rows")?;
    if reps == 0 {
        return shape_err("repeat_rows", "zero repetitions");
    }
    let mut y = Vec::with_capacity(r * reps * d);
    for i in 0..r {
        let row = &x.data()[i * d..(i + 1) * d];
        for _ in 0..reps {
            y.extend_from_slice(row);
        }
    }
    Ok(Tensor::from_raw(vec![r * reps, d], y))
}

fn fwd_concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, da) = a.dims2("concat_cols")?;
    let (nb, db) = b.dims2("concat_cols")?;
    if nb != n {
        return shape_err("concat_cols", format!("row counts differ: {n} vs {nb}"));
    }
    let mut y = Vec::with_capacity(n * (da + db));
    for i in 0..n {
        y.extend_from_slice(&a.data()[i * da..(i + 1) * da]);
        y.extend_from_slice(&b.data()[i * db..(i + 1) * db]);
    }
    Ok(Tensor::from_raw(vec![n, da + db], y))
}

fn fwd_gather_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let (n, d) = x.dims2("gather_rows")?;
    if rows.is_empty() {
        return shape_err("gather_rows", "empty row list");
    }
    if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
        return Err(NumericsError::IndexOutOfRange { op: "gather_rows", index: bad, bound: n });
    }
    let mut y = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        y.extend_from_slice(&x.data()[r * d..(r + 1) * d]);
    }
    Ok(Tensor::from_raw(vec![rows.len(), d], y))
}

fn fwd_mean_rows_groups(x: &Tensor, group: usize) -> Result<Tensor> {
    let (n, d) = x.dims2("mean_rows_groups")?;
    if group == 0 || n % group != 0 {
        return shape_err(
            "mean_rows_groups",
            format!("{n} rows do not split into groups of {group}"),
        );
    }
    // Summation per group matches mean_rows_subset over the same rows bit for
    // bit: ascending row order, then one multiply by 1/group.
    let ids: Vec<usize> = (0..group).collect();
    let mut y = Vec::with_capacity((n / group) * d);
    for g in 0..n / group {
        y.extend_from_slice(&kernels::row_mean(&x.data()[g * group * d..(g + 1) * group * d], d, &ids));
    }
    Ok(Tensor::from_raw(vec![n / group, d], y))
}

fn fwd_embed_mean_rows(table: &Tensor, lists: &[Vec<usize>]) -> Result<Tensor> {
    let (rows, d) = table.dims2("embed_mean_rows")?;
    if lists.is_empty() {
        return shape_err("embed_mean_rows", "no id lists");
    }
    let mut y = Vec::with_capacity(lists.len() * d);
    for ids in lists {
        if ids.is_empty() {
            return shape_err("embed_mean_rows", "empty id list");
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::IndexOutOfRange {
                op: "embed_mean_rows",
                index: bad,
                bound: rows,
            });
        }
        y.extend_from_slice(&kernels::row_mean(table.data(), d, ids));
    }
    Ok(Tensor::from_raw(vec![lists.len(), d], y))
}

fn fwd_adain_rows(style: &Tensor, content: &Tensor) -> Result<(Tensor, Vec<AdainCache>)> {
    let (n, d) = content.dims2("adain_rows")?;
    if style.dims2("adain_rows")? != (n, d) {
        return shape_err(
            "adain_rows",
            format!("style {:?} vs content {:?}", style.shape(), content.shape()),
        );
    }
    if d < 2 {
        return Err(NumericsError::DegenerateNorm { dim: d });
    }
    let mut y = Vec::with_capacity(n * d);
    let mut caches = Vec::with_capacity(n);
    for i in 0..n {
        let c_row = &content.data()[i * d..(i + 1) * d];
        let (_, sigma_c) = kernels::mean_std(c_row);
        if sigma_c < kernels::ADAIN_MIN_STD {
            return Err(NumericsError::DegenerateStats {
                sigma: sigma_c,
                min: kernels::ADAIN_MIN_STD,
            });
        }
        let (row, cache) = kernels::adain(&style.data()[i * d..(i + 1) * d], c_row);
        y.extend_from_slice(&row);
        caches.push(cache);
    }
    Ok((Tensor::from_raw(vec![n, d], y), caches))
}

fn fwd_gaussian_sample(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    check_same_shape("gaussian_sample", mu, logvar)?;
    if eps.numel() != mu.numel() {
        return shape_err(
            "gaussian_sample",
            format!("noise has {} elements, expected {}", eps.numel(), mu.numel()),
        );
    }
    let data = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect();
    Ok(Tensor::from_raw(mu.shape().to_vec(), data))
}

fn fwd_kl(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    check_same_shape("kl_std_normal", mu, logvar)?;
    let kl = mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum();
    Ok(Tensor::scalar(kl))
}

// ── the recording tape ───────────────────────────────────────────────────────

enum Op {
    Leaf,
    Linear { x: NodeId, w: NodeId, b: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Tanh { x: NodeId },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    AddRowBroadcast { x: NodeId, v: NodeId },
    ConcatRowsBroadcast { x: NodeId, v: NodeId },
    ConcatRows { parts: Vec<(NodeId, usize)> },
    SliceFlat { x: NodeId, start: usize },
    Reshape { x: NodeId },
    EmbedMean { table: NodeId, ids: Vec<usize> },
    MeanRowsSubset { x: NodeId, rows: Vec<usize> },
    TileRows { x: NodeId, reps: usize },
    RepeatRows { x: NodeId, reps: usize },
    ConcatCols { a: NodeId, b: NodeId },
    GatherRows { x: NodeId, rows: Vec<usize> },
    MeanRowsGroups { x: NodeId, group: usize },
    EmbedMeanRows { table: NodeId, lists: Vec<Vec<usize>> },
    AdainRows { style: NodeId, content: NodeId, caches: Vec<AdainCache> },
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    Mse { a: NodeId, b: NodeId },
    Adain { style: NodeId, content: NodeId, cache: AdainCache },
    GaussianSample { mu: NodeId, logvar: NodeId },
    KlStdNormal { mu: NodeId, logvar: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only operation record over an arena of values. Parents always have
/// smaller ids than children, so one reverse sweep visits consumers before
/// producers.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        note_tape_alloc();
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        note_tape_alloc();
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Reverse-mode sweep from a scalar loss. Returns one gradient slot per
    /// node; slots that the loss does not depend on stay empty. Deterministic:
    /// a fixed reverse iteration order and plain f64 accumulation.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.val(loss).numel() != 1 {
            return Err(NumericsError::NonScalarLoss { shape: self.val(loss).shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let Some(gout) = grads[id].take() else { continue };
            self.backprop_one(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }

        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| g.map(|v| Tensor::from_raw(self.val(id).shape().to_vec(), v)))
            .collect();
        Ok(Gradients { by_node: tensors })
    }

    fn backprop_one(&self, id: NodeId, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc<'a>(
            grads: &'a mut [Option<Vec<f64>>],
            id: NodeId,
            numel: usize,
        ) -> &'a mut Vec<f64> {
            grads[id].get_or_insert_with(|| vec![0.0; numel])
        }

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, k) = self.val(*x).dims2("linear").expect("recorded shape");
                let m = self.val(*b).numel();
                let (xd, wd) = (self.val(*x).data().to_vec(), self.val(*w).data().to_vec());
                kernels::matmul_nn_acc(gout, n, m, &wd, k, acc(grads, *x, n * k));
                kernels::matmul_tn_acc(gout, n, m, &xd, k, acc(grads, *w, m * k));
                kernels::col_sum_acc(gout, n, m, acc(grads, *b, m));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.val(*gamma).numel();
                let n = inv_std.len();
                let gamma_d = self.val(*gamma).data().to_vec();
                {
                    let gg = acc(grads, *gamma, d);
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += gout[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                kernels::col_sum_acc(gout, n, d, acc(grads, *beta, d));
                let gx = acc(grads, *x, n * d);
                let inv_d = 1.0 / d as f64;
                for i in 0..n {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let gh = gout[i * d + j] * gamma_d[j];
                        m1 += gh;
                        m2 += gh * xhat[i * d + j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        let gh = gout[i * d + j] * gamma_d[j];
                        gx[i * d + j] += inv_std[i] * (gh - m1 - xhat[i * d + j] * m2);
                    }
                }
            }
            Op::Add { a, b } => {
                kernels::axpy(acc(grads, *a, gout.len()), 1.0, gout);
                kernels::axpy(acc(grads, *b, gout.len()), 1.0, gout);
            }
            Op::Sub { a, b } => {
                kernels::axpy(acc(grads, *a, gout.len()), 1.0, gout);
                kernels::axpy(acc(grads, *b, gout.len()), -1.0, gout);
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.val(*a).data().to_vec(), self.val(*b).data().to_vec());
                let ga = acc(grads, *a, gout.len());
                for j in 0..gout.len() {
                    ga[j] += gout[j] * bd[j];
                }
                let gb = acc(grads, *b, gout.len());
                for j in 0..gout.len() {
                    gb[j] += gout[j] * ad[j];
                }
            }
            Op::Scale { x, c } => {
                kernels::axpy(acc(grads, *x, gout.len()), *c, gout);
            }
            Op::Tanh { x } => {
                let y = self.val(id).data().to_vec();
                let gx = acc(grads, *x, gout.len());
                for j in 0..gout.len() {
                    gx[j] += gout[j] * (1.0 - y[j] * y[j]);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.val(*x).data().to_vec();
                let gx = acc(grads, *x, gout.len());
                for j in 0..gout.len() {
                    if xv[j] >= *lo && xv[j] <= *hi {
                        gx[j] += gout[j];
                    }
                }
            }
            Op::AddRowBroadcast { x, v } => {
                let (n, d) = self.val(*x).dims2("add_row_broadcast").expect("recorded shape");
                kernels::axpy(acc(grads, *x, n * d), 1.0, gout);
                kernels::col_sum_acc(gout, n, d, acc(grads, *v, d));
            }
            Op::ConcatRowsBroadcast { x, v } => {
                let (n, da) = self.val(*x).dims2("concat_rows_broadcast").expect("recorded shape");
                let db = self.val(*v).numel();
                let w = da + db;
                {
                    let gx = acc(grads, *x, n * da);
                    for i in 0..n {
                        kernels::axpy(
                            &mut gx[i * da..(i + 1) * da],
                            1.0,
                            &gout[i * w..i * w + da],
                        );
                    }
                }
                let gv = acc(grads, *v, db);
                for i in 0..n {
                    kernels::axpy(gv, 1.0, &gout[i * w + da..(i + 1) * w]);
                }
            }
            Op::ConcatRows { parts } => {
                let d = *self.val(id).shape().last().expect("2-D concat output");
                let mut row = 0;
                for (part, rows) in parts {
                    let gp = acc(grads, *part, rows * d);
                    kernels::axpy(gp, 1.0, &gout[row * d..(row + rows) * d]);
                    row += rows;
                }
            }
            Op::SliceFlat { x, start } => {
                let gx = acc(grads, *x, self.val(*x).numel());
                kernels::axpy(&mut gx[*start..*start + gout.len()], 1.0, gout);
            }
            Op::Reshape { x } => {
                kernels::axpy(acc(grads, *x, gout.len()), 1.0, gout);
            }
            Op::EmbedMean { table, ids } => {
                let (rows, d) = self.val(*table).dims2("embed_mean").expect("recorded shape");
                let inv = 1.0 / ids.len() as f64;
                let gt = acc(grads, *table, rows * d);
                for &r in ids {
                    kernels::axpy(&mut gt[r * d..(r + 1) * d], inv, gout);
                }
            }
            Op::MeanRowsSubset { x, rows } => {
                let (n, d) = self.val(*x).dims2("mean_rows_subset").expect("recorded shape");
                let inv = 1.0 / rows.len() as f64;
                let gx = acc(grads, *x, n * d);
                for &r in rows {
                    kernels::axpy(&mut gx[r * d..(r + 1) * d], inv, gout);
                }
            }
            Op::TileRows { x, reps } => {
                let n = self.val(*x).numel();
                let gx = acc(grads, *x, n);
                for t in 0..*reps {
                    kernels::axpy(gx, 1.0, &gout[t * n..(t + 1) * n]);
                }
            }
            Op::RepeatRows { x, reps } => {
                let (r, d) = self.val(*x).dims2("repeat_rows").expect("recorded shape");
                let gx = acc(grads, *x, r * d);
                for i in 0..r {
                    for k in 0..*reps {
                        kernels::axpy(
                            &mut gx[i * d..(i + 1) * d],
                            1.0,
                            &gout[(i * reps + k) * d..(i * reps + k + 1) * d],
                        );
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let (n, da) = self.val(*a).dims2("concat_cols").expect("recorded shape");
                let db = self.val(*b).dims2("concat_cols").expect("recorded shape").1;
                let w = da + db;
                {
                    let ga = acc(grads, *a, n * da);
                    for i in 0..n {
                        kernels::axpy(&mut ga[i * da..(i + 1) * da], 1.0, &gout[i * w..i * w + da]);
                    }
                }
                let gb = acc(grads, *b, n * db);
                for i in 0..n {
                    kernels::axpy(&mut gb[i * db..(i + 1) * db], 1.0, &gout[i * w + da..(i + 1) * w]);
                }
            }
            Op::GatherRows { x, rows } => {
                let (n, d) = self.val(*x).dims2("gather_rows").expect("recorded shape");
                let gx = acc(grads, *x, n * d);
                for (oi, &r) in rows.iter().enumerate() {
                    kernels::axpy(&mut gx[r * d..(r + 1) * d], 1.0, &gout[oi * d..(oi + 1) * d]);
                }
            }
            Op::MeanRowsGroups { x, group } => {
                let (n, d) = self.val(*x).dims2("mean_rows_groups").expect("recorded shape");
                let inv = 1.0 / *group as f64;
                let gx = acc(grads, *x, n * d);
                for g in 0..n / group {
                    for k in 0..*group {
                        kernels::axpy(
                            &mut gx[(g * group + k) * d..(g * group + k + 1) * d],
                            inv,
                            &gout[g * d..(g + 1) * d],
                        );
                    }
                }
            }
            Op::EmbedMeanRows { table, lists } => {
                let (rows, d) = self.val(*table).dims2("embed_mean_rows").expect("recorded shape");
                let gt = acc(grads, *table, rows * d);
                for (i, ids) in lists.iter().enumerate() {
                    let inv = 1.0 / ids.len() as f64;
                    for &r in ids {
                        kernels::axpy(&mut gt[r * d..(r + 1) * d], inv, &gout[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::AdainRows { style, content, caches } => {
                let d = self.val(*style).dims2("adain_rows").expect("recorded shape").1;
                let inv_d = 1.0 / d as f64;
                {
                    let gs = acc(grads, *style, caches.len() * d);
                    for (i, cache) in caches.iter().enumerate() {
                        let go = &gout[i * d..(i + 1) * d];
                        let g_dot_chat = kernels::dot(go, &cache.c_hat);
                        let g_sum: f64 = go.iter().sum();
                        for j in 0..d {
                            gs[i * d + j] += (cache.s_hat[j] * g_dot_chat + g_sum) * inv_d;
                        }
                    }
                }
                let gc = acc(grads, *content, caches.len() * d);
                for (i, cache) in caches.iter().enumerate() {
                    let go = &gout[i * d..(i + 1) * d];
                    let g_dot_chat = kernels::dot(go, &cache.c_hat);
                    let g_sum: f64 = go.iter().sum();
                    let ratio = cache.sigma_s / cache.sigma_c;
                    let gmean = g_sum * inv_d;
                    let gc_proj = g_dot_chat * inv_d;
                    for j in 0..d {
                        gc[i * d + j] += ratio * (go[j] - gmean - cache.c_hat[j] * gc_proj);
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let (n, c) = self.val(*logits).dims2("softmax_cross_entropy").expect("shape");
                let gs = gout[0] / n as f64;
                let gl = acc(grads, *logits, n * c);
                for i in 0..n {
                    for j in 0..c {
                        let ind = if targets[i] == j { 1.0 } else { 0.0 };
                        gl[i * c + j] += gs * (probs[i * c + j] - ind);
                    }
                }
            }
            Op::Mse { a, b } => {
                let (ad, bd) = (self.val(*a).data().to_vec(), self.val(*b).data().to_vec());
                let scale = gout[0] * 2.0 / ad.len() as f64;
                {
                    let ga = acc(grads, *a, ad.len());
                    for j in 0..ad.len() {
                        ga[j] += scale * (ad[j] - bd[j]);
                    }
                }
                let gb = acc(grads, *b, bd.len());
                for j in 0..bd.len() {
                    gb[j] -= scale * (ad[j] - bd[j]);
                }
            }
            Op::Adain { style, content, cache } => {
                let d = cache.c_hat.len();
                let inv_d = 1.0 / d as f64;
                let g_dot_chat = kernels::dot(gout, &cache.c_hat);
                let g_sum: f64 = gout.iter().sum();
                {
                    let gs = acc(grads, *style, d);
                    for j in 0..d {
                        gs[j] += (cache.s_hat[j] * g_dot_chat + g_sum) * inv_d;
                    }
                }
                let ratio = cache.sigma_s / cache.sigma_c;
                let gmean = g_sum * inv_d;
                let gc_proj = g_dot_chat * inv_d;
                let gc = acc(grads, *content, d);
                for j in 0..d {
                    gc[j] += ratio * (gout[j] - gmean - cache.c_hat[j] * gc_proj);
                }
            }
            Op::GaussianSample { mu, logvar } => {
                let (muv, yv) = (self.val(*mu).data().to_vec(), self.val(id).data().to_vec());
                kernels::axpy(acc(grads, *mu, gout.len()), 1.0, gout);
                let glv = acc(grads, *logvar, gout.len());
                for j in 0..gout.len() {
                    // d/dlogvar [exp(logvar/2) * eps] = (y - mu) / 2
                    glv[j] += gout[j] * 0.5 * (yv[j] - muv[j]);
                }
            }
            Op::KlStdNormal { mu, logvar } => {
                let gs = gout[0];
                let muv = self.val(*mu).data().to_vec();
                let lvv = self.val(*logvar).data().to_vec();
                {
                    let gm = acc(grads, *mu, muv.len());
                    for j in 0..muv.len() {
                        gm[j] += gs * muv[j];
                    }
                }
                let gl = acc(grads, *logvar, lvv.len());
                for j in 0..lvv.len() {
                    gl[j] += gs * 0.5 * (lvv[j].exp() - 1.0);
                }
            }
        }
    }
}

/// Per-node gradients from one backward sweep.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }
}

impl Context for Tape {
    type Handle = NodeId;

    fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    fn param(&mut self, t: &Tensor, _trainable: bool) -> NodeId {
        self.push(t.clone(), Op::Leaf)
    }

    fn value(&self, h: NodeId) -> &Tensor {
        self.val(h)
    }

    fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = fwd_linear(self.val(x), self.val(w), self.val(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (n, d) = check_layernorm(self.val(x), self.val(gamma), self.val(beta))?;
        let (y, xhat, inv_std) = kernels::layernorm(
            self.val(x).data(),
            n,
            d,
            self.val(gamma).data(),
            self.val(beta).data(),
            eps,
        );
        Ok(self.push(
            Tensor::from_raw(vec![n, d], y),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
        ))
    }

    fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = fwd_elementwise("add", self.val(a), self.val(b), |x, y| x + y)?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = fwd_elementwise("sub", self.val(a), self.val(b), |x, y| x - y)?;
        Ok(self.push(y, Op::Sub { a, b }))
    }

    fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = fwd_elementwise("mul", self.val(a), self.val(b), |x, y| x * y)?;
        Ok(self.push(y, Op::Mul { a, b }))
    }

    fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let y = Tensor::from_raw(
            self.val(x).shape().to_vec(),
            self.val(x).data().iter().map(|&v| c * v).collect(),
        );
        self.push(y, Op::Scale { x, c })
    }

    fn tanh(&mut self, x: NodeId) -> NodeId {
        let y = Tensor::from_raw(
            self.val(x).shape().to_vec(),
            self.val(x).data().iter().map(|&v| v.tanh()).collect(),
        );
        self.push(y, Op::Tanh { x })
    }

    fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let y = Tensor::from_raw(
            self.val(x).shape().to_vec(),
            self.val(x).data().iter().map(|&v| v.clamp(lo, hi)).collect(),
        );
        self.push(y, Op::Clamp { x, lo, hi })
    }

    fn add_row_broadcast(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, d, dv) = check_row_broadcast("add_row_broadcast", self.val(x), self.val(v))?;
        if d != dv {
            return shape_err("add_row_broadcast", format!("rows of width {d} + vector of {dv}"));
        }
        let mut y = self.val(x).data().to_vec();
        let vd = self.val(v).data();
        for i in 0..n {
            for j in 0..d {
                y[i * d + j] += vd[j];
            }
        }
        Ok(self.push(Tensor::from_raw(vec![n, d], y), Op::AddRowBroadcast { x, v }))
    }

    fn concat_rows_broadcast(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, da, db) = check_row_broadcast("concat_rows_broadcast", self.val(x), self.val(v))?;
        let xd = self.val(x).data();
        let vd = self.val(v).data();
        let mut y = vec![0.0; n * (da + db)];
        for i in 0..n {
            y[i * (da + db)..i * (da + db) + da].copy_from_slice(&xd[i * da..(i + 1) * da]);
            y[i * (da + db) + da..(i + 1) * (da + db)].copy_from_slice(vd);
        }
        Ok(self.push(Tensor::from_raw(vec![n, da + db], y), Op::ConcatRowsBroadcast { x, v }))
    }

    fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return shape_err("concat_rows", "no parts");
        }
        let d = self.val(parts[0]).dims2("concat_rows")?.1;
        let mut total = 0;
        let mut meta = Vec::with_capacity(parts.len());
        for &p in parts {
            let (np, dp) = self.val(p).dims2("concat_rows")?;
            if dp != d {
                return shape_err("concat_rows", format!("column widths differ: {dp} vs {d}"));
            }
            meta.push((p, np));
            total += np;
        }
        let mut y = Vec::with_capacity(total * d);
        for &p in parts {
            y.extend_from_slice(self.val(p).data());
        }
        Ok(self.push(Tensor::from_raw(vec![total, d], y), Op::ConcatRows { parts: meta }))
    }

    fn slice_flat(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let numel = self.val(x).numel();
        if len == 0 || start + len > numel {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_flat",
                index: start + len,
                bound: numel,
            });
        }
        let y = self.val(x).data()[start..start + len].to_vec();
        Ok(self.push(Tensor::from_raw(vec![len], y), Op::SliceFlat { x, start }))
    }

    fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.val(x).numel() {
            return shape_err(
                "reshape",
                format!("cannot view {} elements as {:?}", self.val(x).numel(), shape),
            );
        }
        let y = Tensor::from_raw(shape.to_vec(), self.val(x).data().to_vec());
        Ok(self.push(y, Op::Reshape { x }))
    }

    fn embed_mean(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, d) = self.val(table).dims2("embed_mean")?;
        if ids.is_empty() {
            return shape_err("embed_mean", "empty id list");
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::IndexOutOfRange { op: "embed_mean", index: bad, bound: rows });
        }
        let y = kernels::row_mean(self.val(table).data(), d, ids);
        Ok(self.push(Tensor::from_raw(vec![d], y), Op::EmbedMean { table, ids: ids.to_vec() }))
    }

    fn mean_rows_subset(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (n, d) = self.val(x).dims2("mean_rows_subset")?;
        if rows.is_empty() {
            return shape_err("mean_rows_subset", "empty row list");
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
            return Err(NumericsError::IndexOutOfRange {
                op: "mean_rows_subset",
                index: bad,
                bound: n,
            });
        }
        let y = kernels::row_mean(self.val(x).data(), d, rows);
        Ok(self.push(Tensor::from_raw(vec![d], y), Op::MeanRowsSubset { x, rows: rows.to_vec() }))
    }

    fn tile_rows(&mut self, x: NodeId, reps: usize) -> Result<NodeId> {
        let y = fwd_tile_rows(self.val(x), reps)?;
        Ok(self.push(y, Op::TileRows { x, reps }))
    }

    fn repeat_rows(&mut self, x: NodeId, reps: usize) -> Result<NodeId> {
        let y = fwd_repeat_rows(self.val(x), reps)?;
        Ok(self.push(y, Op::RepeatRows { x, reps }))
    }

    fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = fwd_concat_cols(self.val(a), self.val(b))?;
        Ok(self.push(y, Op::ConcatCols { a, b }))
    }

    fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let y = fwd_gather_rows(self.val(x), rows)?;
        Ok(self.push(y, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    fn mean_rows_groups(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let y = fwd_mean_rows_groups(self.val(x), group)?;
        Ok(self.push(y, Op::MeanRowsGroups { x, group }))
    }

    fn embed_mean_rows(&mut self, table: NodeId, lists: &[Vec<usize>]) -> Result<NodeId> {
        let y = fwd_embed_mean_rows(self.val(table), lists)?;
        Ok(self.push(y, Op::EmbedMeanRows { table, lists: lists.to_vec() }))
    }

    fn adain_rows(&mut self, style: NodeId, content: NodeId) -> Result<NodeId> {
        let (y, caches) = fwd_adain_rows(self.val(style), self.val(content))?;
        Ok(self.push(y, Op::AdainRows { style, content, caches }))
    }

    fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (n, c) = self.val(logits).dims2("softmax_cross_entropy")?;
        if targets.len() != n {
            return shape_err(
                "softmax_cross_entropy",
                format!("{} targets for {} rows", targets.len(), n),
            );
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(NumericsError::IndexOutOfRange {
                op: "softmax_cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let (loss, probs) = kernels::softmax_cross_entropy(self.val(logits).data(), n, c, targets);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs },
        ))
    }

    fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same_shape("mse", self.val(a), self.val(b))?;
        let n = self.val(a).numel();
        let sum: f64 = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(sum / n as f64), Op::Mse { a, b }))
    }

    fn adain(&mut self, style: NodeId, content: NodeId) -> Result<NodeId> {
        let (y, cache) = fwd_adain(self.val(style), self.val(content))?;
        Ok(self.push(y, Op::Adain { style, content, cache }))
    }

    fn gaussian_sample(&mut self, mu: NodeId, logvar: NodeId, eps: &Tensor) -> Result<NodeId> {
        let y = fwd_gaussian_sample(self.val(mu), self.val(logvar), eps)?;
        Ok(self.push(y, Op::GaussianSample { mu, logvar }))
    }

    fn kl_std_normal(&mut self, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
        let y = fwd_kl(self.val(mu), self.val(logvar))?;
        Ok(self.push(y, Op::KlStdNormal { mu, logvar }))
    }
}

// ── the plain evaluator ──────────────────────────────────────────────────────

/// Value-only context: identical forward semantics, no differentiation state.
pub struct Eval {
    values: Vec<Tensor>,
}

impl Eval {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        Eval { values: Vec::new() }
    }

    fn push(&mut self, t: Tensor) -> usize {
        self.values.push(t);
        self.values.len() - 1
    }
}

impl Context for Eval {
    type Handle = usize;

    fn constant(&mut self, t: Tensor) -> usize {
        self.push(t)
    }

    fn param(&mut self, t: &Tensor, _trainable: bool) -> usize {
        self.push(t.clone())
    }

    fn value(&self, h: usize) -> &Tensor {
        &self.values[h]
    }

    fn linear(&mut self, x: usize, w: usize, b: usize) -> Result<usize> {
        let y = fwd_linear(&self.values[x], &self.values[w], &self.values[b])?;
        Ok(self.push(y))
    }

    fn layernorm(&mut self, x: usize, gamma: usize, beta: usize, eps: f64) -> Result<usize> {
        let (n, d) = check_layernorm(&self.values[x], &self.values[gamma], &self.values[beta])?;
        let (y, _, _) = kernels::layernorm(
            self.values[x].data(),
            n,
            d,
            self.values[gamma].data(),
            self.values[beta].data(),
            eps,
        );
        Ok(self.push(Tensor::from_raw(vec![n, d], y)))
    }

    fn add(&mut self, a: usize, b: usize) -> Result<usize> {
        let y = fwd_elementwise("add", &self.values[a], &self.values[b], |x, y| x + y)?;
        Ok(self.push(y))
    }

    fn sub(&mut self, a: usize, b: usize) -> Result<usize> {
        let y = fwd_elementwise("sub", &self.values[a], &self.values[b], |x, y| x - y)?;
        Ok(self.push(y))
    }

    fn mul(&mut self, a: usize, b: usize) -> Result<usize> {
        let y = fwd_elementwise("mul", &self.values[a], &self.values[b], |x, y| x * y)?;
        Ok(self.push(y))
    }

    fn scale(&mut self, x: usize, c: f64) -> usize {
        let y = Tensor::from_raw(
            self.values[x].shape().to_vec(),
            self.values[x].data().iter().map(|&v| c * v).collect(),
        );
        self.push(y)
    }

    fn tanh(&mut self, x: usize) -> usize {
        let y = Tensor::from_raw(
            self.values[x].shape().to_vec(),
            self.values[x].data().iter().map(|&v| v.tanh()).collect(),
        );
        self.push(y)
    }

    fn clamp(&mut self, x: usize, lo: f64, hi: f64) -> usize {
        let y = Tensor::from_raw(
            self.values[x].shape().to_vec(),
            self.values[x].data().iter().map(|&v| v.clamp(lo, hi)).collect(),
        );
        self.push(y)
    }

    fn add_row_broadcast(&mut self, x: usize, v: usize) -> Result<usize> {
        let (n, d, dv) = check_row_broadcast("add_row_broadcast", &self.values[x], &self.values[v])?;
        if d != dv {
            return shape_err("add_row_broadcast", format!("rows of width {d} + vector of {dv}"));
        }
        let mut y = self.values[x].data().to_vec();
        for i in 0..n {
            for j in 0..d {
                y[i * d + j] += self.values[v].data()[j];
            }
        }
        Ok(self.push(Tensor::from_raw(vec![n, d], y)))
    }

    fn concat_rows_broadcast(&mut self, x: usize, v: usize) -> Result<usize> {
        let (n, da, db) =
            check_row_broadcast("concat_rows_broadcast", &self.values[x], &self.values[v])?;
        let mut y = vec![0.0; n * (da + db)];
        for i in 0..n {
            y[i * (da + db)..i * (da + db) + da]
                .copy_from_slice(&self.values[x].data()[i * da..(i + 1) * da]);
            y[i * (da + db) + da..(i + 1) * (da + db)].copy_from_slice(self.values[v].data());
        }
        Ok(self.push(Tensor::from_raw(vec![n, da + db], y)))
    }

    fn concat_rows(&mut self, parts: &[usize]) -> Result<usize> {
        if parts.is_empty() {
            return shape_err("concat_rows", "no parts");
        }
        let d = self.values[parts[0]].dims2("concat_rows")?.1;
        let mut total = 0;
        for &p in parts {
            let (np, dp) = self.values[p].dims2("concat_rows")?;
            if dp != d {
                return shape_err("concat_rows", format!("column widths differ: {dp} vs {d}"));
            }
            total += np;
        }
        let mut y = Vec::with_capacity(total * d);
        for &p in parts {
            y.extend_from_slice(self.values[p].data());
        }
        Ok(self.push(Tensor::from_raw(vec![total, d], y)))
    }

    fn slice_flat(&mut self, x: usize, start: usize, len: usize) -> Result<usize> {
        let numel = self.values[x].numel();
        if len == 0 || start + len > numel {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_flat",
                index: start + len,
                bound: numel,
            });
        }
        let y = self.values[x].data()[start..start + len].to_vec();
        Ok(self.push(Tensor::from_raw(vec![len], y)))
    }

    fn reshape(&mut self, x: usize, shape: &[usize]) -> Result<usize> {
        let numel: usize = shape.iter().product();
        if numel != self.values[x].numel() {
            return shape_err(
                "reshape",
                format!("cannot view {} elements as {:?}", self.values[x].numel(), shape),
            );
        }
        let y = Tensor::from_raw(shape.to_vec(), self.values[x].data().to_vec());
        Ok(self.push(y))
    }

    fn embed_mean(&mut self, table: usize, ids: &[usize]) -> Result<usize> {
        let (rows, d) = self.values[table].dims2("embed_mean")?;
        if ids.is_empty() {
            return shape_err("embed_mean", "empty id list");
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::IndexOutOfRange { op: "embed_mean", index: bad, bound: rows });
        }
        let y = kernels::row_mean(self.values[table].data(), d, ids);
        Ok(self.push(Tensor::from_raw(vec![d], y)))
    }

    fn mean_rows_subset(&mut self, x: usize, rows: &[usize]) -> Result<usize> {
        let (n, d) = self.values[x].dims2("mean_rows_subset")?;
        if rows.is_empty() {
            return shape_err("mean_rows_subset", "empty row list");
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
            return Err(NumericsError::IndexOutOfRange {
                op: "mean_rows_subset",
                index: bad,
                bound: n,
            });
        }
        let y = kernels::row_mean(self.values[x].data(), d, rows);
        Ok(self.push(Tensor::from_raw(vec![d], y)))
    }

    fn tile_rows(&mut self, x: usize, reps: usize) -> Result<usize> {
        let y = fwd_tile_rows(&self.values[x], reps)?;
        Ok(self.push(y))
    }

    fn repeat_rows(&mut self, x: usize, reps: usize) -> Result<usize> {
        let y = fwd_repeat_rows(&self.values[x], reps)?;
        Ok(self.push(y))
    }

    fn concat_cols(&mut self, a: usize, b: usize) -> Result<usize> {
        let y = fwd_concat_cols(&self.values[a], &self.values[b])?;
        Ok(self.push(y))
    }

    fn gather_rows(&mut self, x: usize, rows: &[usize]) -> Result<usize> {
        let y = fwd_gather_rows(&self.values[x], rows)?;
        Ok(self.push(y))
    }

    fn mean_rows_groups(&mut self, x: usize, group: usize) -> Result<usize> {
        let y = fwd_mean_rows_groups(&self.values[x], group)?;
        Ok(self.push(y))
    }

    fn embed_mean_rows(&mut self, table: usize, lists: &[Vec<usize>]) -> Result<usize> {
        let y = fwd_embed_mean_rows(&self.values[table], lists)?;
        Ok(self.push(y))
    }

    fn adain_rows(&mut self, style: usize, content: usize) -> Result<usize> {
        let (y, _) = fwd_adain_rows(&self.values[style], &self.values[content])?;
        Ok(self.push(y))
    }

    fn softmax_cross_entropy(&mut self, logits: usize, targets: &[usize]) -> Result<usize> {
        let (n, c) = self.values[logits].dims2("softmax_cross_entropy")?;
        if targets.len() != n {
            return shape_err(
                "softmax_cross_entropy",
                format!("{} targets for {} rows", targets.len(), n),
            );
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(NumericsError::IndexOutOfRange {
                op: "softmax_cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let (loss, _) = kernels::softmax_cross_entropy(self.values[logits].data(), n, c, targets);
        Ok(self.push(Tensor::scalar(loss)))
    }

    fn mse(&mut self, a: usize, b: usize) -> Result<usize> {
        check_same_shape("mse", &self.values[a], &self.values[b])?;
        let n = self.values[a].numel();
        let sum: f64 = self.values[a]
            .data()
            .iter()
            .zip(self.values[b].data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(sum / n as f64)))
    }

    fn adain(&mut self, style: usize, content: usize) -> Result<usize> {
        let (y, _) = fwd_adain(&self.values[style], &self.values[content])?;
        Ok(self.push(y))
    }

    fn gaussian_sample(&mut self, mu: usize, logvar: usize, eps: &Tensor) -> Result<usize> {
        let y = fwd_gaussian_sample(&self.values[mu], &self.values[logvar], eps)?;
        Ok(self.push(y))
    }

    fn kl_std_normal(&mut self, mu: usize, logvar: usize) -> Result<usize> {
        let y = fwd_kl(&self.values[mu], &self.values[logvar])?;
        Ok(self.push(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_matches_hand_computation() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let w = tape.constant(t(&[1, 2], &[2.0, 3.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn linear_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        let w = tape.constant(t(&[1, 2], &[2.0, 3.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        assert!(tape.linear(x, w, b).is_err());
    }

    #[test]
    fn layernorm_standardizes_a_row() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 2.0]));
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.layernorm(x, g, b, 1e-12).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-6 && (out[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layernorm_width_one_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1], &[5.0]));
        let g = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        assert!(matches!(
            tape.layernorm(x, g, b, 1e-5),
            Err(NumericsError::DegenerateNorm { dim: 1 })
        ));
    }

    #[test]
    fn mse_gradient_is_two_x_over_n() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[1], &[2.0]), true);
        let zero = tape.constant(t(&[1], &[0.0]));
        let loss = tape.mse(x, zero).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(NumericsError::NonScalarLoss { .. })));
    }

    #[test]
    fn adain_identity_when_style_equals_content() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.3, -1.2, 2.5]));
        let y = tape.adain(x, x).unwrap();
        for (a, b) in tape.value(y).data().iter().zip([0.3, -1.2, 2.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adain_transfers_style_statistics() {
        // content standardized, then mapped onto the style's mean 20 / std 10:
        // the output reproduces the style stats exactly on this symmetric case.
        let mut tape = Tape::new();
        let s = tape.constant(t(&[3], &[10.0, 20.0, 30.0]));
        let c = tape.constant(t(&[3], &[0.0, 1.0, 2.0]));
        let y = tape.adain(s, c).unwrap();
        for (a, b) in tape.value(y).data().iter().zip([10.0, 20.0, 30.0]) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn adain_rejects_constant_content() {
        let mut tape = Tape::new();
        let s = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let c = tape.constant(t(&[3], &[5.0, 5.0, 5.0]));
        assert!(matches!(tape.adain(s, c), Err(NumericsError::DegenerateStats { .. })));
    }

    #[test]
    fn kl_closed_form_values() {
        // mu=0, logvar=0 -> 0; mu=1, sigma=1 -> 0.5; mu=0, sigma=2 -> (3 - ln 4)/2
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1], &[0.0]));
        let kl0 = tape.kl_std_normal(z, z).unwrap();
        assert!(tape.value(kl0).item().unwrap().abs() < 1e-15);

        let one = tape.constant(t(&[1], &[1.0]));
        let kl1 = tape.kl_std_normal(one, z).unwrap();
        assert!((tape.value(kl1).item().unwrap() - 0.5).abs() < 1e-12);

        let lv = tape.constant(t(&[1], &[4.0f64.ln()]));
        let kl2 = tape.kl_std_normal(z, lv).unwrap();
        let expect = 0.5 * (4.0 - 1.0 - 4.0f64.ln());
        assert!((tape.value(kl2).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_of_uniform_logits_is_log_c() {
        let mut tape = Tape::new();
        let logits = tape.constant(t(&[2, 4], &[0.0; 8]));
        let loss = tape.softmax_cross_entropy(logits, &[1, 3]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tile_and_repeat_rows_lay_out_copies() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let tiled = tape.tile_rows(x, 2).unwrap();
        assert_eq!(tape.value(tiled).shape(), &[4, 2]);
        assert_eq!(tape.value(tiled).data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let rep = tape.repeat_rows(x, 2).unwrap();
        assert_eq!(tape.value(rep).shape(), &[4, 2]);
        assert_eq!(tape.value(rep).data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn concat_cols_interleaves_and_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(&t(&[2, 1], &[1.0, 2.0]), true);
        let b = tape.param(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]), true);
        let y = tape.concat_cols(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let zero = tape.constant(t(&[2, 3], &[0.0; 6]));
        let loss = tape.mse(y, zero).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d/dy mean(y^2) = 2y/6; each input column gets exactly its own slice.
        let ga = grads.get(a).unwrap().data();
        let gb = grads.get(b).unwrap().data();
        assert!((ga[0] - 2.0 / 6.0).abs() < 1e-12 && (ga[1] - 4.0 / 6.0).abs() < 1e-12);
        assert!((gb[0] - 6.0 / 6.0).abs() < 1e-12 && (gb[3] - 12.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn gather_rows_backward_accumulates_duplicates() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let g = tape.gather_rows(x, &[1, 0, 1]).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let zero = tape.constant(t(&[3, 2], &[0.0; 6]));
        let loss = tape.mse(g, zero).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap().data();
        // Row 1 was gathered twice, so it receives both contributions.
        assert!((gx[2] - 2.0 * (2.0 / 6.0) * 3.0).abs() < 1e-12);
        assert!((gx[0] - (2.0 / 6.0) * 1.0).abs() < 1e-12);
    }

    #[test]
    fn grouped_and_bagged_means_match_their_single_row_ops() {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4, 2], &[0.3, -1.2, 2.9, 0.07, -0.8, 1.6, 0.5, -0.33]));
        let grouped = tape.mean_rows_groups(x, 2).unwrap();
        assert_eq!(tape.value(grouped).shape(), &[2, 2]);
        let m0 = tape.mean_rows_subset(x, &[0, 1]).unwrap();
        let m1 = tape.mean_rows_subset(x, &[2, 3]).unwrap();
        assert_eq!(bits(&tape.value(grouped).data()[..2]), bits(tape.value(m0).data()));
        assert_eq!(bits(&tape.value(grouped).data()[2..]), bits(tape.value(m1).data()));

        let lists = vec![vec![0, 2], vec![3, 3, 1]];
        let bags = tape.embed_mean_rows(x, &lists).unwrap();
        assert_eq!(tape.value(bags).shape(), &[2, 2]);
        let b0 = tape.embed_mean(x, &lists[0]).unwrap();
        let b1 = tape.embed_mean(x, &lists[1]).unwrap();
        assert_eq!(bits(&tape.value(bags).data()[..2]), bits(tape.value(b0).data()));
        assert_eq!(bits(&tape.value(bags).data()[2..]), bits(tape.value(b1).data()));
    }

    #[test]
    fn adain_rows_matches_per_row_adain() {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let mut tape = Tape::new();
        let s = tape.constant(t(&[2, 3], &[0.4, -1.0, 2.2, 0.9, 0.1, -0.5]));
        let c = tape.constant(t(&[2, 3], &[1.5, 0.2, -0.7, -0.3, 0.6, 1.1]));
        let rows = tape.adain_rows(s, c).unwrap();
        assert_eq!(tape.value(rows).shape(), &[2, 3]);
        for i in 0..2 {
            let si = tape.slice_flat(s, i * 3, 3).unwrap();
            let ci = tape.slice_flat(c, i * 3, 3).unwrap();
            let yi = tape.adain(si, ci).unwrap();
            let row = tape.value(rows).data()[i * 3..(i + 1) * 3].to_vec();
            assert_eq!(bits(&row), bits(tape.value(yi).data()), "row {i}");
        }
    }

    #[test]
    fn adain_rows_rejects_a_constant_content_row() {
        let mut tape = Tape::new();
        let s = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.constant(t(&[2, 2], &[1.0, 2.0, 5.0, 5.0]));
        assert!(matches!(
            tape.adain_rows(s, c),
            Err(NumericsError::DegenerateStats { .. })
        ));
    }

    #[test]
    fn replaying_a_graph_gives_bitwise_identical_grads() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.param(&t(&[2, 3], &[0.1, -0.4, 0.7, 1.1, -0.2, 0.05]), true);
            let w = tape.param(&t(&[2, 3], &[0.3, 0.1, -0.6, 0.9, 0.4, -0.15]), true);
            let b = tape.param(&t(&[2], &[0.01, -0.02]), true);
            let y = tape.linear(x, w, b).unwrap();
            let h = tape.tanh(y);
            let loss = tape.softmax_cross_entropy(h, &[0, 1]).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                grads.get(w).unwrap().data().to_vec(),
                grads.get(x).unwrap().data().to_vec(),
                grads.get(b).unwrap().data().to_vec(),
            )
        };
        let (w1, x1, b1) = run();
        let (w2, x2, b2) = run();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&w1), bits(&w2));
        assert_eq!(bits(&x1), bits(&x2));
        assert_eq!(bits(&b1), bits(&b2));
    }

    #[test]
    fn eval_matches_tape_forward_bitwise() {
        let x = t(&[2, 3], &[0.1, -0.4, 0.7, 1.1, -0.2, 0.05]);
        let w = t(&[4, 3], &[0.3, 0.1, -0.6, 0.9, 0.4, -0.15, 0.2, -0.3, 0.5, 0.0, 0.25, -0.4]);
        let b = t(&[4], &[0.01, -0.02, 0.03, 0.0]);
        let g = t(&[4], &[1.0, 1.1, 0.9, 1.0]);
        let z = t(&[4], &[0.0, 0.1, -0.1, 0.0]);

        let mut tape = Tape::new();
        let (tx, tw, tb) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let (tg, tz) = (tape.constant(g.clone()), tape.constant(z.clone()));
        let ty = tape.linear(tx, tw, tb).unwrap();
        let th = tape.tanh(ty);
        let tn = tape.layernorm(th, tg, tz, 1e-5).unwrap();

        let mut ev = Eval::new();
        let (ex, ew, eb) = (ev.constant(x), ev.constant(w), ev.constant(b));
        let (eg, ez) = (ev.constant(g), ev.constant(z));
        let ey = ev.linear(ex, ew, eb).unwrap();
        let eh = ev.tanh(ey);
        let en = ev.layernorm(eh, eg, ez, 1e-5).unwrap();

        let a: Vec<u64> = tape.value(tn).data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = ev.value(en).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn guard_counts_and_forbids_tape_allocations() {
        let before = tape_allocations();
        {
            let mut ev = Eval::new();
            let h = ev.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
            let _ = ev.tanh(h);
        }
        assert_eq!(tape_allocations(), before, "evaluator must not touch the tape counter");

        let result = std::panic::catch_unwind(|| {
            let _guard = NoTapeGuard::new();
            let _tape = Tape::new();
        });
        assert!(result.is_err(), "tape creation under a NoTapeGuard must panic");
        // The guard from the panicked closure has been dropped; tapes work again.
        let _tape = Tape::new();
    }
}
