use std::sync::Arc;

use super::linalg::{self, matmul, transpose};
use super::lstm;
use super::Tensor;

/// Op kinds recorded on the tape.
///
/// Matrix-shaped ops treat rows as time steps (or bag rows) and columns as
/// features.
#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Param(String),
    Constant,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddConst(f64),
    Square,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Sum,
    Mean,
    /// `n x H -> 1 x H`
    MeanRows,
    MatMul,
    Transpose,
    /// `x [n, I]`, `w [I, O]`, `b [O]`
    Affine,
    /// `x [T, Cin]`, `w [Cout, K, Cin]`, `b [Cout]`; "same" zero padding.
    Conv1d {
        stride: usize,
    },
    MaxPoolTime {
        window: usize,
        stride: usize,
    },
    Reverse,
    ConcatCols,
    ConcatRows,
    SliceCols {
        start: usize,
        len: usize,
    },
    SliceRows {
        start: usize,
        len: usize,
    },
    Softmax,
    LogSoftmax,
    /// Subtract the mean along `axis` (0: over rows, 1: over columns).
    Center {
        axis: usize,
    },
    /// `x [T, I]`, `wx [I, 4H]`, `wh [H, 4H]`, `b [4H]`
    Lstm,
    Trace,
    Inverse,
    LogDet,
    /// `A + (1e-6 tr(A)/H + 1e-12) I`
    RegularizeCov,
    /// Mean over rows of the `p`-fold outer power, flattened to `1 x H^p`.
    TensorPowerMean {
        p: usize,
    },
    /// Products of the selected coordinates; `index` holds `T * p` entries.
    SampledMonomials {
        p: usize,
        index: Arc<Vec<usize>>,
    },
    PairwiseSqDist,
    /// Median Euclidean distance over the strict upper triangle of a squared
    /// distance matrix, floored at 1e-8.
    MedianPairDist,
    /// `exp(-D / sigma^2)` with `sigma` a scalar node.
    Rbf,
    /// Biased MMD^2 from a pooled kernel matrix whose first `ns` rows are source.
    BlockMmd {
        ns: usize,
    },
    /// Negative log-likelihood of `labels` under per-frame log-probabilities.
    Ctc {
        labels: Arc<Vec<usize>>,
        blank: usize,
    },
}

#[derive(Debug, Clone, Default)]
pub(crate) enum Cache {
    #[default]
    None,
    Indices(Vec<usize>),
    Weighted(Vec<(usize, f64)>),
    Tensors(Vec<Tensor>),
}

pub(crate) const COV_EPS_REL: f64 = 1e-6;
pub(crate) const COV_EPS_ABS: f64 = 1e-12;
pub(crate) const SIGMA_FLOOR: f64 = 1e-8;

pub(crate) enum EvalError {
    Shape(String),
    Numerical(String),
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T, EvalError> {
    Err(EvalError::Shape(msg.into()))
}

fn require_2d(t: &Tensor, what: &str) -> Result<(), EvalError> {
    if t.shape().len() != 2 {
        return shape_err(format!("{what} must be 2-D, got {:?}", t.shape()));
    }
    Ok(())
}

fn require_same(a: &Tensor, b: &Tensor) -> Result<(), EvalError> {
    if a.shape() != b.shape() {
        return shape_err(format!(
            "operands {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn require_scalar(t: &Tensor, what: &str) -> Result<(), EvalError> {
    if !t.is_scalar() {
        return shape_err(format!("{what} must be scalar, got {:?}", t.shape()));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn ipow(h: usize, p: usize) -> usize {
    (0..p).fold(1usize, |acc, _| acc.saturating_mul(h))
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddConst(_) => "add_const",
            Op::Square => "square",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MeanRows => "mean_rows",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Affine => "affine",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPoolTime { .. } => "max_pool_time",
            Op::Reverse => "reverse",
            Op::ConcatCols => "concat_cols",
            Op::ConcatRows => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Center { .. } => "center",
            Op::Lstm => "lstm",
            Op::Trace => "trace",
            Op::Inverse => "inverse",
            Op::LogDet => "logdet",
            Op::RegularizeCov => "regularize_cov",
            Op::TensorPowerMean { .. } => "tensor_power_mean",
            Op::SampledMonomials { .. } => "sampled_monomials",
            Op::PairwiseSqDist => "pairwise_sq_dist",
            Op::MedianPairDist => "median_pair_dist",
            Op::Rbf => "rbf",
            Op::BlockMmd { .. } => "block_mmd",
            Op::Ctc { .. } => "ctc",
        }
    }

    pub(crate) fn arity(&self) -> usize {
        match self {
            Op::Input | Op::Param(_) | Op::Constant => 0,
            Op::Add
            | Op::Sub
            | Op::Mul
            | Op::MatMul
            | Op::ConcatCols
            | Op::ConcatRows
            | Op::PairwiseSqDist
            | Op::Rbf => 2,
            Op::Affine | Op::Conv1d { .. } => 3,
            Op::Lstm => 4,
            _ => 1,
        }
    }

    pub(crate) fn eval(&self, x: &[&Tensor]) -> Result<(Tensor, Cache), EvalError> {
        let plain = |t: Tensor| Ok((t, Cache::None));
        match self {
            Op::Input | Op::Param(_) | Op::Constant => unreachable!("leaf nodes are not evaluated"),
            Op::Add => {
                require_same(x[0], x[1])?;
                plain(zip_map(x[0], x[1], |a, b| a + b))
            }
            Op::Sub => {
                require_same(x[0], x[1])?;
                plain(zip_map(x[0], x[1], |a, b| a - b))
            }
            Op::Mul => {
                require_same(x[0], x[1])?;
                plain(zip_map(x[0], x[1], |a, b| a * b))
            }
            Op::Scale(k) => plain(x[0].map(|v| v * k)),
            Op::AddConst(k) => plain(x[0].map(|v| v + k)),
            Op::Square => plain(x[0].map(|v| v * v)),
            Op::Exp => plain(x[0].map(f64::exp)),
            Op::Log => {
                if x[0].data().iter().any(|&v| v <= 0.0) {
                    return Err(EvalError::Numerical("log of non-positive value".into()));
                }
                plain(x[0].map(f64::ln))
            }
            Op::Tanh => plain(x[0].map(f64::tanh)),
            Op::Sigmoid => plain(x[0].map(sigmoid)),
            Op::Relu => plain(x[0].map(|v| v.max(0.0))),
            Op::Sum => plain(Tensor::scalar(x[0].data().iter().sum())),
            Op::Mean => plain(Tensor::scalar(
                x[0].data().iter().sum::<f64>() / x[0].len() as f64,
            )),
            Op::MeanRows => {
                require_2d(x[0], "input")?;
                let (n, h) = (x[0].rows(), x[0].cols());
                let mut out = vec![0.0; h];
                for i in 0..n {
                    for (o, v) in out.iter_mut().zip(x[0].row(i)) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= n as f64);
                plain(Tensor::matrix(1, h, out))
            }
            Op::MatMul => {
                require_2d(x[0], "lhs")?;
                require_2d(x[1], "rhs")?;
                let (n, k) = (x[0].rows(), x[0].cols());
                let (k2, m) = (x[1].rows(), x[1].cols());
                if k != k2 {
                    return shape_err(format!("inner dims {k} vs {k2}"));
                }
                plain(Tensor::matrix(
                    n,
                    m,
                    matmul(x[0].data(), x[1].data(), n, k, m),
                ))
            }
            Op::Transpose => {
                require_2d(x[0], "input")?;
                let (r, c) = (x[0].rows(), x[0].cols());
                plain(Tensor::matrix(c, r, transpose(x[0].data(), r, c)))
            }
            Op::Affine => {
                let (inp, w, b) = (x[0], x[1], x[2]);
                require_2d(inp, "input")?;
                require_2d(w, "weight")?;
                let (n, i) = (inp.rows(), inp.cols());
                let o = w.cols();
                if w.rows() != i || b.shape() != [o] {
                    return shape_err(format!(
                        "input {:?}, weight {:?}, bias {:?}",
                        inp.shape(),
                        w.shape(),
                        b.shape()
                    ));
                }
                let mut out = matmul(inp.data(), w.data(), n, i, o);
                for row in out.chunks_mut(o) {
                    for (v, bv) in row.iter_mut().zip(b.data()) {
                        *v += bv;
                    }
                }
                plain(Tensor::matrix(n, o, out))
            }
            Op::Conv1d { stride } => {
                conv1d_forward(x[0], x[1], x[2], *stride).map(|t| (t, Cache::None))
            }
            Op::MaxPoolTime { window, stride } => {
                require_2d(x[0], "input")?;
                let (t_len, c) = (x[0].rows(), x[0].cols());
                if *window == 0 || *stride == 0 || *window > t_len {
                    return shape_err(format!(
                        "window {window}/stride {stride} over length {t_len}"
                    ));
                }
                let out_len = (t_len - window) / stride + 1;
                let mut out = vec![0.0; out_len * c];
                let mut arg = vec![0usize; out_len * c];
                for o in 0..out_len {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for t in o * stride..o * stride + window {
                            let v = x[0].get2(t, ch);
                            if v > best {
                                best = v;
                                bi = t;
                            }
                        }
                        out[o * c + ch] = best;
                        arg[o * c + ch] = bi * c + ch;
                    }
                }
                Ok((Tensor::matrix(out_len, c, out), Cache::Indices(arg)))
            }
            Op::Reverse => {
                require_2d(x[0], "input")?;
                let (r, c) = (x[0].rows(), x[0].cols());
                let mut out = Vec::with_capacity(r * c);
                for t in (0..r).rev() {
                    out.extend_from_slice(x[0].row(t));
                }
                plain(Tensor::matrix(r, c, out))
            }
            Op::ConcatCols => {
                require_2d(x[0], "lhs")?;
                require_2d(x[1], "rhs")?;
                if x[0].rows() != x[1].rows() {
                    return shape_err(format!("row counts {} vs {}", x[0].rows(), x[1].rows()));
                }
                let (p, q) = (x[0].cols(), x[1].cols());
                let mut out = Vec::with_capacity(x[0].rows() * (p + q));
                for t in 0..x[0].rows() {
                    out.extend_from_slice(x[0].row(t));
                    out.extend_from_slice(x[1].row(t));
                }
                plain(Tensor::matrix(x[0].rows(), p + q, out))
            }
            Op::ConcatRows => {
                require_2d(x[0], "lhs")?;
                require_2d(x[1], "rhs")?;
                if x[0].cols() != x[1].cols() {
                    return shape_err(format!("column counts {} vs {}", x[0].cols(), x[1].cols()));
                }
                let mut out = x[0].data().to_vec();
                out.extend_from_slice(x[1].data());
                plain(Tensor::matrix(x[0].rows() + x[1].rows(), x[0].cols(), out))
            }
            Op::SliceCols { start, len } => {
                require_2d(x[0], "input")?;
                if *len == 0 || start + len > x[0].cols() {
                    return shape_err(format!(
                        "columns {start}..{} of {}",
                        start + len,
                        x[0].cols()
                    ));
                }
                let mut out = Vec::with_capacity(x[0].rows() * len);
                for t in 0..x[0].rows() {
                    out.extend_from_slice(&x[0].row(t)[*start..start + len]);
                }
                plain(Tensor::matrix(x[0].rows(), *len, out))
            }
            Op::SliceRows { start, len } => {
                require_2d(x[0], "input")?;
                if *len == 0 || start + len > x[0].rows() {
                    return shape_err(format!("rows {start}..{} of {}", start + len, x[0].rows()));
                }
                let c = x[0].cols();
                plain(Tensor::matrix(
                    *len,
                    c,
                    x[0].data()[start * c..(start + len) * c].to_vec(),
                ))
            }
            Op::Softmax => plain(softmax_rows(x[0])),
            Op::LogSoftmax => plain(log_softmax_rows(x[0])),
            Op::Center { axis } => {
                require_2d(x[0], "input")?;
                plain(center(x[0], *axis)?)
            }
            Op::Lstm => {
                let (inp, wx, wh, b) = (x[0], x[1], x[2], x[3]);
                require_2d(inp, "input")?;
                require_2d(wx, "wx")?;
                require_2d(wh, "wh")?;
                let h4 = wx.cols();
                let h = h4 / 4;
                if h4 % 4 != 0
                    || wx.rows() != inp.cols()
                    || wh.shape() != [h, h4]
                    || b.shape() != [h4]
                {
                    return shape_err(format!(
                        "input {:?}, wx {:?}, wh {:?}, b {:?}",
                        inp.shape(),
                        wx.shape(),
                        wh.shape(),
                        b.shape()
                    ));
                }
                let f = lstm::forward(inp, wx, wh, b);
                Ok((f.hidden, Cache::Tensors(vec![f.gates, f.cells])))
            }
            Op::Trace => {
                require_square(x[0])?;
                let n = x[0].rows();
                plain(Tensor::scalar((0..n).map(|i| x[0].get2(i, i)).sum()))
            }
            Op::Inverse => {
                require_square(x[0])?;
                let inv = linalg::inverse(x[0])
                    .ok_or_else(|| EvalError::Numerical("singular matrix".into()))?;
                plain(inv)
            }
            Op::LogDet => {
                require_square(x[0])?;
                let (ld, inv) = linalg::logdet_and_inverse(x[0]).ok_or_else(|| {
                    EvalError::Numerical("non-finite or non-positive determinant".into())
                })?;
                Ok((Tensor::scalar(ld), Cache::Tensors(vec![inv])))
            }
            Op::RegularizeCov => {
                require_square(x[0])?;
                let n = x[0].rows();
                let tr: f64 = (0..n).map(|i| x[0].get2(i, i)).sum();
                let eps = COV_EPS_REL * tr / n as f64 + COV_EPS_ABS;
                let mut out = x[0].clone();
                for i in 0..n {
                    out.data_mut()[i * n + i] += eps;
                }
                plain(out)
            }
            Op::TensorPowerMean { p } => {
                require_2d(x[0], "input")?;
                tensor_power_mean(x[0], *p).map(|t| (t, Cache::None))
            }
            Op::SampledMonomials { p, index } => {
                require_2d(x[0], "input")?;
                let (n, h) = (x[0].rows(), x[0].cols());
                if *p == 0 || index.is_empty() || index.len() % p != 0 {
                    return shape_err(format!("{} indices for order {p}", index.len()));
                }
                if let Some(bad) = index.iter().find(|&&i| i >= h) {
                    return shape_err(format!("monomial index {bad} out of range for width {h}"));
                }
                let t = index.len() / p;
                let mut out = vec![0.0; n * t];
                for i in 0..n {
                    let row = x[0].row(i);
                    for (k, tuple) in index.chunks(*p).enumerate() {
                        out[i * t + k] = tuple.iter().map(|&j| row[j]).product();
                    }
                }
                plain(Tensor::matrix(n, t, out))
            }
            Op::PairwiseSqDist => {
                require_2d(x[0], "lhs")?;
                require_2d(x[1], "rhs")?;
                if x[0].cols() != x[1].cols() {
                    return shape_err(format!("feature widths {} vs {}", x[0].cols(), x[1].cols()));
                }
                let (n, m) = (x[0].rows(), x[1].rows());
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    let a = x[0].row(i);
                    for j in 0..m {
                        let b = x[1].row(j);
                        out[i * m + j] = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
                    }
                }
                plain(Tensor::matrix(n, m, out))
            }
            Op::MedianPairDist => {
                require_square(x[0])?;
                let n = x[0].rows();
                if n < 2 {
                    return shape_err("median distance needs at least two points");
                }
                let mut entries: Vec<(f64, usize)> = Vec::with_capacity(n * (n - 1) / 2);
                for i in 0..n {
                    for j in i + 1..n {
                        entries.push((x[0].get2(i, j).max(0.0).sqrt(), i * n + j));
                    }
                }
                entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let m = entries.len();
                let picks: Vec<(usize, f64)> = if m % 2 == 1 {
                    vec![(m / 2, 1.0)]
                } else {
                    vec![(m / 2 - 1, 0.5), (m / 2, 0.5)]
                };
                let median: f64 = picks.iter().map(|&(k, w)| w * entries[k].0).sum();
                if median < SIGMA_FLOOR {
                    return Ok((Tensor::scalar(SIGMA_FLOOR), Cache::Weighted(Vec::new())));
                }
                let weighted = picks
                    .iter()
                    .filter(|&&(k, _)| entries[k].0 > 0.0)
                    .map(|&(k, w)| (entries[k].1, w / (2.0 * entries[k].0)))
                    .collect();
                Ok((Tensor::scalar(median), Cache::Weighted(weighted)))
            }
            Op::Rbf => {
                require_scalar(x[1], "bandwidth")?;
                let s2 = x[1].item() * x[1].item();
                if s2.is_nan() || s2 <= 0.0 {
                    return Err(EvalError::Numerical("non-positive bandwidth".into()));
                }
                plain(x[0].map(|d| (-d / s2).exp()))
            }
            Op::BlockMmd { ns } => {
                require_square(x[0])?;
                let n = x[0].rows();
                if *ns == 0 || *ns >= n {
                    return shape_err(format!("source block {ns} of pooled size {n}"));
                }
                let nt = n - ns;
                let (mut ss, mut tt, mut st) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let v = x[0].get2(i, j);
                        match (i < *ns, j < *ns) {
                            (true, true) => ss += v,
                            (false, false) => tt += v,
                            (true, false) => st += v,
                            (false, true) => {}
                        }
                    }
                }
                let (nsf, ntf) = (*ns as f64, nt as f64);
                plain(Tensor::scalar(
                    ss / (nsf * nsf) + tt / (ntf * ntf) - 2.0 * st / (nsf * ntf),
                ))
            }
            Op::Ctc { labels, blank } => {
                require_2d(x[0], "log-probabilities")?;
                let (nll, grad) = crate::ctc::forward_backward(x[0], labels, *blank)
                    .map_err(|e| EvalError::Numerical(e.to_string()))?;
                Ok((Tensor::scalar(nll), Cache::Tensors(vec![grad])))
            }
        }
    }

    /// Gradients for each input given the output gradient `g`. Entries for
    /// inputs with `need[i] == false` may be `None`.
    pub(crate) fn backward(
        &self,
        x: &[&Tensor],
        out: &Tensor,
        cache: &Cache,
        g: &Tensor,
        need: &[bool],
    ) -> Vec<Option<Tensor>> {
        match self {
            Op::Input | Op::Param(_) | Op::Constant => Vec::new(),
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul => vec![
                need[0].then(|| zip_map(g, x[1], |a, b| a * b)),
                need[1].then(|| zip_map(g, x[0], |a, b| a * b)),
            ],
            Op::Scale(k) => vec![Some(g.map(|v| v * k))],
            Op::AddConst(_) => vec![Some(g.clone())],
            Op::Square => vec![Some(zip_map(g, x[0], |a, b| 2.0 * a * b))],
            Op::Exp => vec![Some(zip_map(g, out, |a, b| a * b))],
            Op::Log => vec![Some(zip_map(g, x[0], |a, b| a / b))],
            Op::Tanh => vec![Some(zip_map(g, out, |a, y| a * (1.0 - y * y)))],
            Op::Sigmoid => vec![Some(zip_map(g, out, |a, y| a * y * (1.0 - y)))],
            Op::Relu => vec![Some(zip_map(g, x[0], |a, v| if v > 0.0 { a } else { 0.0 }))],
            Op::Sum => vec![Some(Tensor::filled(x[0].shape(), g.item()))],
            Op::Mean => vec![Some(Tensor::filled(
                x[0].shape(),
                g.item() / x[0].len() as f64,
            ))],
            Op::MeanRows => {
                let n = x[0].rows();
                let mut d = Vec::with_capacity(x[0].len());
                for _ in 0..n {
                    d.extend(g.data().iter().map(|v| v / n as f64));
                }
                vec![Some(Tensor::new(x[0].shape().to_vec(), d).expect("shape"))]
            }
            Op::MatMul => {
                let (n, k, m) = (x[0].rows(), x[0].cols(), x[1].cols());
                let ga = need[0].then(|| {
                    let bt = transpose(x[1].data(), k, m);
                    Tensor::matrix(n, k, matmul(g.data(), &bt, n, m, k))
                });
                let gb = need[1].then(|| {
                    let at = transpose(x[0].data(), n, k);
                    Tensor::matrix(k, m, matmul(&at, g.data(), k, n, m))
                });
                vec![ga, gb]
            }
            Op::Transpose => {
                let (r, c) = (x[0].rows(), x[0].cols());
                vec![Some(Tensor::matrix(r, c, transpose(g.data(), c, r)))]
            }
            Op::Affine => {
                let (inp, w) = (x[0], x[1]);
                let (n, i, o) = (inp.rows(), inp.cols(), w.cols());
                let gx = need[0].then(|| {
                    let wt = transpose(w.data(), i, o);
                    Tensor::matrix(n, i, matmul(g.data(), &wt, n, o, i))
                });
                let gw = need[1].then(|| {
                    let xt = transpose(inp.data(), n, i);
                    Tensor::matrix(i, o, matmul(&xt, g.data(), i, n, o))
                });
                let gb = need[2].then(|| {
                    let mut b = vec![0.0; o];
                    for row in g.data().chunks(o) {
                        for (bv, gv) in b.iter_mut().zip(row) {
                            *bv += gv;
                        }
                    }
                    Tensor::vector(b)
                });
                vec![gx, gw, gb]
            }
            Op::Conv1d { stride } => conv1d_backward(x[0], x[1], g, *stride, need),
            Op::MaxPoolTime { .. } => {
                let Cache::Indices(arg) = cache else {
                    unreachable!()
                };
                let mut d = Tensor::zeros(x[0].shape());
                for (gv, &idx) in g.data().iter().zip(arg) {
                    d.data_mut()[idx] += gv;
                }
                vec![Some(d)]
            }
            Op::Reverse => {
                let (r, c) = (g.rows(), g.cols());
                let mut d = Vec::with_capacity(r * c);
                for t in (0..r).rev() {
                    d.extend_from_slice(g.row(t));
                }
                vec![Some(Tensor::matrix(r, c, d))]
            }
            Op::ConcatCols => {
                let (p, q) = (x[0].cols(), x[1].cols());
                let r = g.rows();
                let mut a = Vec::with_capacity(r * p);
                let mut b = Vec::with_capacity(r * q);
                for t in 0..r {
                    let row = g.row(t);
                    a.extend_from_slice(&row[..p]);
                    b.extend_from_slice(&row[p..]);
                }
                vec![Some(Tensor::matrix(r, p, a)), Some(Tensor::matrix(r, q, b))]
            }
            Op::ConcatRows => {
                let split = x[0].len();
                vec![
                    Some(
                        Tensor::new(x[0].shape().to_vec(), g.data()[..split].to_vec())
                            .expect("shape"),
                    ),
                    Some(
                        Tensor::new(x[1].shape().to_vec(), g.data()[split..].to_vec())
                            .expect("shape"),
                    ),
                ]
            }
            Op::SliceCols { start, len } => {
                let mut d = Tensor::zeros(x[0].shape());
                let c = x[0].cols();
                for t in 0..x[0].rows() {
                    d.data_mut()[t * c + start..t * c + start + len].copy_from_slice(g.row(t));
                }
                vec![Some(d)]
            }
            Op::SliceRows { start, len } => {
                let mut d = Tensor::zeros(x[0].shape());
                let c = x[0].cols();
                d.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                vec![Some(d)]
            }
            Op::Softmax => {
                let c = out.cols();
                let mut d = vec![0.0; out.len()];
                for ((drow, yrow), grow) in d
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, gv)| y * gv).sum();
                    for ((dv, y), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = y * (gv - dot);
                    }
                }
                vec![Some(Tensor::new(out.shape().to_vec(), d).expect("shape"))]
            }
            Op::LogSoftmax => {
                let c = out.cols();
                let mut d = vec![0.0; out.len()];
                for ((drow, lrow), grow) in d
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let gs: f64 = grow.iter().sum();
                    for ((dv, l), gv) in drow.iter_mut().zip(lrow).zip(grow) {
                        *dv = gv - l.exp() * gs;
                    }
                }
                vec![Some(Tensor::new(out.shape().to_vec(), d).expect("shape"))]
            }
            Op::Center { axis } => vec![Some(center(g, *axis).ok().expect("2-D"))],
            Op::Lstm => {
                let Cache::Tensors(c) = cache else {
                    unreachable!()
                };
                let grads = lstm::backward(x[0], x[1], x[2], out, &c[0], &c[1], g, need[0]);
                vec![grads.x, Some(grads.wx), Some(grads.wh), Some(grads.b)]
            }
            Op::Trace => {
                let n = x[0].rows();
                let mut d = Tensor::zeros(x[0].shape());
                for i in 0..n {
                    d.data_mut()[i * n + i] = g.item();
                }
                vec![Some(d)]
            }
            Op::Inverse => {
                // dA = -A^{-T} G A^{-T}
                let n = out.rows();
                let inv_t = transpose(out.data(), n, n);
                let tmp = matmul(&inv_t, g.data(), n, n, n);
                let d = matmul(&tmp, &inv_t, n, n, n);
                vec![Some(Tensor::matrix(
                    n,
                    n,
                    d.into_iter().map(|v| -v).collect(),
                ))]
            }
            Op::LogDet => {
                let Cache::Tensors(c) = cache else {
                    unreachable!()
                };
                let n = c[0].rows();
                let inv_t = transpose(c[0].data(), n, n);
                vec![Some(Tensor::matrix(
                    n,
                    n,
                    inv_t.into_iter().map(|v| v * g.item()).collect(),
                ))]
            }
            Op::RegularizeCov => {
                let n = g.rows();
                let tr: f64 = (0..n).map(|i| g.get2(i, i)).sum();
                let mut d = g.clone();
                for i in 0..n {
                    d.data_mut()[i * n + i] += COV_EPS_REL * tr / n as f64;
                }
                vec![Some(d)]
            }
            Op::TensorPowerMean { p } => vec![Some(tensor_power_mean_backward(x[0], g, *p))],
            Op::SampledMonomials { p, index } => {
                let (n, h) = (x[0].rows(), x[0].cols());
                let mut d = vec![0.0; n * h];
                for i in 0..n {
                    let row = x[0].row(i);
                    for (k, tuple) in index.chunks(*p).enumerate() {
                        let gv = g.get2(i, k);
                        if gv == 0.0 {
                            continue;
                        }
                        for (pos, &j) in tuple.iter().enumerate() {
                            let others: f64 = tuple
                                .iter()
                                .enumerate()
                                .filter(|&(q, _)| q != pos)
                                .map(|(_, &jj)| row[jj])
                                .product();
                            d[i * h + j] += gv * others;
                        }
                    }
                }
                vec![Some(Tensor::matrix(n, h, d))]
            }
            Op::PairwiseSqDist => {
                let (n, m, w) = (x[0].rows(), x[1].rows(), x[0].cols());
                let mut ga = vec![0.0; n * w];
                let mut gb = vec![0.0; m * w];
                for i in 0..n {
                    let a = x[0].row(i);
                    for j in 0..m {
                        let gv = g.get2(i, j);
                        if gv == 0.0 {
                            continue;
                        }
                        let b = x[1].row(j);
                        for k in 0..w {
                            let diff = 2.0 * gv * (a[k] - b[k]);
                            ga[i * w + k] += diff;
                            gb[j * w + k] -= diff;
                        }
                    }
                }
                vec![
                    Some(Tensor::matrix(n, w, ga)),
                    Some(Tensor::matrix(m, w, gb)),
                ]
            }
            Op::MedianPairDist => {
                let Cache::Weighted(w) = cache else {
                    unreachable!()
                };
                let mut d = Tensor::zeros(x[0].shape());
                for &(idx, coef) in w {
                    d.data_mut()[idx] += g.item() * coef;
                }
                vec![Some(d)]
            }
            Op::Rbf => {
                let s = x[1].item();
                let s2 = s * s;
                let mut gs = 0.0;
                let mut gd = Vec::with_capacity(out.len());
                for ((gv, k), dist) in g.data().iter().zip(out.data()).zip(x[0].data()) {
                    gd.push(-gv * k / s2);
                    gs += gv * k * 2.0 * dist / (s2 * s);
                }
                vec![
                    Some(Tensor::new(x[0].shape().to_vec(), gd).expect("shape")),
                    Some(Tensor::scalar(gs)),
                ]
            }
            Op::BlockMmd { ns } => {
                let n = x[0].rows();
                let nt = n - ns;
                let (nsf, ntf) = (*ns as f64, nt as f64);
                let gv = g.item();
                let mut d = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        d[i * n + j] = match (i < *ns, j < *ns) {
                            (true, true) => gv / (nsf * nsf),
                            (false, false) => gv / (ntf * ntf),
                            (true, false) => -2.0 * gv / (nsf * ntf),
                            (false, true) => 0.0,
                        };
                    }
                }
                vec![Some(Tensor::matrix(n, n, d))]
            }
            Op::Ctc { .. } => {
                let Cache::Tensors(c) = cache else {
                    unreachable!()
                };
                vec![Some(c[0].map(|v| v * g.item()))]
            }
        }
    }
}

fn require_square(t: &Tensor) -> Result<(), EvalError> {
    if t.shape().len() != 2 || t.rows() != t.cols() {
        return shape_err(format!("expected a square matrix, got {:?}", t.shape()));
    }
    Ok(())
}

fn center(x: &Tensor, axis: usize) -> Result<Tensor, EvalError> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = x.data().to_vec();
    match axis {
        0 => {
            for j in 0..c {
                let m = (0..r).map(|i| out[i * c + j]).sum::<f64>() / r as f64;
                for i in 0..r {
                    out[i * c + j] -= m;
                }
            }
        }
        1 => {
            for row in out.chunks_mut(c) {
                let m = row.iter().sum::<f64>() / c as f64;
                row.iter_mut().for_each(|v| *v -= m);
            }
        }
        _ => return shape_err(format!("centering axis {axis} not in {{0, 1}}")),
    }
    Ok(Tensor::matrix(r, c, out))
}

fn conv1d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor, EvalError> {
    require_2d(x, "input")?;
    if w.shape().len() != 3 {
        return shape_err(format!(
            "weight must be [out, kernel, in], got {:?}",
            w.shape()
        ));
    }
    let (t_len, cin) = (x.rows(), x.cols());
    let (cout, k, win) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if win != cin || b.shape() != [cout] || stride == 0 {
        return shape_err(format!(
            "input {:?}, weight {:?}, bias {:?}, stride {stride}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    let pad = (k - 1) / 2;
    let out_len = t_len.div_ceil(stride);
    let mut out = vec![0.0; out_len * cout];
    for t in 0..out_len {
        let orow = &mut out[t * cout..(t + 1) * cout];
        orow.copy_from_slice(b.data());
        for tap in 0..k {
            let src = (t * stride + tap) as isize - pad as isize;
            if src < 0 || src as usize >= t_len {
                continue;
            }
            let xrow = x.row(src as usize);
            for (o, ov) in orow.iter_mut().enumerate() {
                let wrow = &w.data()[(o * k + tap) * cin..(o * k + tap + 1) * cin];
                *ov += wrow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    Ok(Tensor::matrix(out_len, cout, out))
}

fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    need: &[bool],
) -> Vec<Option<Tensor>> {
    let (t_len, cin) = (x.rows(), x.cols());
    let (cout, k) = (w.shape()[0], w.shape()[1]);
    let pad = (k - 1) / 2;
    let out_len = g.rows();
    let mut gx = need[0].then(|| vec![0.0; t_len * cin]);
    let mut gw = vec![0.0; cout * k * cin];
    let mut gb = vec![0.0; cout];
    for t in 0..out_len {
        let grow = g.row(t);
        for (bv, gv) in gb.iter_mut().zip(grow) {
            *bv += gv;
        }
        for tap in 0..k {
            let src = (t * stride + tap) as isize - pad as isize;
            if src < 0 || src as usize >= t_len {
                continue;
            }
            let s = src as usize;
            let xrow = x.row(s);
            for (o, &gv) in grow.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                let base = (o * k + tap) * cin;
                for (wv, xv) in gw[base..base + cin].iter_mut().zip(xrow) {
                    *wv += gv * xv;
                }
                if let Some(gx) = gx.as_mut() {
                    let wrow = &w.data()[base..base + cin];
                    for (xv, wv) in gx[s * cin..(s + 1) * cin].iter_mut().zip(wrow) {
                        *xv += gv * wv;
                    }
                }
            }
        }
    }
    vec![
        gx.map(|d| Tensor::matrix(t_len, cin, d)),
        Some(Tensor::new(w.shape().to_vec(), gw).expect("shape")),
        Some(Tensor::vector(gb)),
    ]
}

/// Guard on the materialized tensor-power size.
pub(crate) const TENSOR_POWER_LIMIT: usize = 10_000_000;

fn tensor_power_mean(x: &Tensor, p: usize) -> Result<Tensor, EvalError> {
    let (n, h) = (x.rows(), x.cols());
    let size = ipow(h, p);
    if !(1..=3).contains(&p) {
        return shape_err(format!("tensor power order {p} not in 1..=3"));
    }
    if size > TENSOR_POWER_LIMIT {
        return shape_err(format!(
            "H^p = {h}^{p} exceeds {TENSOR_POWER_LIMIT}; use the sampled variant"
        ));
    }
    let mut out = vec![0.0; size];
    for i in 0..n {
        let r = x.row(i);
        match p {
            1 => out.iter_mut().zip(r).for_each(|(o, v)| *o += v),
            2 => {
                for a in 0..h {
                    let ra = r[a];
                    let dst = &mut out[a * h..(a + 1) * h];
                    for (o, v) in dst.iter_mut().zip(r) {
                        *o += ra * v;
                    }
                }
            }
            _ => {
                for a in 0..h {
                    for b in 0..h {
                        let rab = r[a] * r[b];
                        let dst = &mut out[(a * h + b) * h..(a * h + b + 1) * h];
                        for (o, v) in dst.iter_mut().zip(r) {
                            *o += rab * v;
                        }
                    }
                }
            }
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    Ok(Tensor::matrix(1, size, out))
}

fn tensor_power_mean_backward(x: &Tensor, g: &Tensor, p: usize) -> Tensor {
    let (n, h) = (x.rows(), x.cols());
    let gd = g.data();
    let nf = n as f64;
    let mut d = vec![0.0; n * h];
    match p {
        1 => {
            for i in 0..n {
                for a in 0..h {
                    d[i * h + a] = gd[a] / nf;
                }
            }
        }
        2 => {
            // d/dx_a = sum_b (G[a,b] + G[b,a]) x_b
            let mut s = vec![0.0; h * h];
            for a in 0..h {
                for b in 0..h {
                    s[a * h + b] = gd[a * h + b] + gd[b * h + a];
                }
            }
            for i in 0..n {
                let r = x.row(i);
                for a in 0..h {
                    let srow = &s[a * h..(a + 1) * h];
                    d[i * h + a] = srow.iter().zip(r).map(|(sv, v)| sv * v).sum::<f64>() / nf;
                }
            }
        }
        _ => {
            let idx = |a: usize, b: usize, c: usize| (a * h + b) * h + c;
            let mut s = vec![0.0; h * h * h];
            for a in 0..h {
                for b in 0..h {
                    for c in 0..h {
                        s[idx(a, b, c)] = gd[idx(a, b, c)] + gd[idx(b, a, c)] + gd[idx(b, c, a)];
                    }
                }
            }
            for i in 0..n {
                let r = x.row(i);
                for a in 0..h {
                    let mut acc = 0.0;
                    for b in 0..h {
                        let srow = &s[idx(a, b, 0)..idx(a, b, 0) + h];
                        acc += r[b] * srow.iter().zip(r).map(|(sv, v)| sv * v).sum::<f64>();
                    }
                    d[i * h + a] = acc / nf;
                }
            }
        }
    }
    Tensor::matrix(n, h, d)
}
