//! Independent oracles shared by the integration test targets.
#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqda::engine::{Graph, NodeId, Tensor};

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor for elementwise relative gradient error.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Builder of a graph output from input nodes.
pub type Build<'a> = dyn Fn(&mut Graph, &[NodeId]) -> NodeId + 'a;

fn objective(
    build: &Build,
    inputs: &[Tensor],
    weights: Option<&Tensor>,
    as_params: bool,
) -> (Graph, NodeId, Tensor) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if as_params {
                g.param(&format!("x{i}"), t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    let out = build(&mut g, &ids);
    let shape = g.value(out).shape().to_vec();
    let w = match weights {
        Some(w) => w.clone(),
        None => {
            let mut r = rng(0x5eed);
            rand_tensor(&mut r, &shape, -1.0, 1.0)
        }
    };
    let wn = g.constant(w.clone());
    let prod = g.mul(out, wn).unwrap();
    let obj = g.sum(prod).unwrap();
    (g, obj, w)
}

/// Largest elementwise relative error between the tape gradient of
/// `sum(w * build(inputs))` and central differences.
pub fn fd_check(build: &Build, inputs: &[Tensor]) -> f64 {
    let (g, obj, w) = objective(build, inputs, None, true);
    let grads = g.param_grads(obj).unwrap();
    let eval = |xs: &[Tensor]| {
        let (g, obj, _) = objective(build, xs, Some(&w), false);
        g.value(obj).item()
    };
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let an = &grads[&format!("x{i}")];
        for j in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + FD_STEP;
            let fp = eval(&xs);
            xs[i].data_mut()[j] = x.data()[j] - FD_STEP;
            let fm = eval(&xs);
            let num = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(an.data()[j], num));
        }
    }
    worst
}

/// Central-difference gradient of a scalar function of one flat vector.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let mut p = x.to_vec();
            p[j] += FD_STEP;
            let fp = f(&p);
            p[j] -= 2.0 * FD_STEP;
            let fm = f(&p);
            (fp - fm) / (2.0 * FD_STEP)
        })
        .collect()
}

fn spd(r: &mut ChaCha8Rng, n: usize) -> Tensor {
    let a = rand_tensor(r, &[n, n], -1.0, 1.0);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..n).map(|k| a.get2(i, k) * a.get2(j, k)).sum();
            out[i * n + j] = dot + if i == j { n as f64 } else { 0.0 };
        }
    }
    Tensor::matrix(n, n, out)
}

/// Random instance generator for one op kind.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub build: Box<Build<'static>>,
}

fn case(
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: Box<Build<'static>>,
) -> OpCase {
    OpCase {
        name,
        inputs,
        build,
    }
}

fn m34(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![rand_tensor(r, &[3, 4], -2.0, 2.0)]
}

fn two_m34(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![
        rand_tensor(r, &[3, 4], -2.0, 2.0),
        rand_tensor(r, &[3, 4], -2.0, 2.0),
    ]
}

/// One case per op kind on the tape (leaf kinds excluded).
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", two_m34, Box::new(|g, x| g.add(x[0], x[1]).unwrap())),
        case("sub", two_m34, Box::new(|g, x| g.sub(x[0], x[1]).unwrap())),
        case("mul", two_m34, Box::new(|g, x| g.mul(x[0], x[1]).unwrap())),
        case("scale", m34, Box::new(|g, x| g.scale(x[0], -1.7).unwrap())),
        case(
            "add_const",
            m34,
            Box::new(|g, x| g.add_const(x[0], 0.3).unwrap()),
        ),
        case("square", m34, Box::new(|g, x| g.square(x[0]).unwrap())),
        case("exp", m34, Box::new(|g, x| g.exp(x[0]).unwrap())),
        case(
            "log",
            |r| vec![rand_tensor(r, &[3, 4], 0.2, 3.0)],
            Box::new(|g, x| g.log(x[0]).unwrap()),
        ),
        case("tanh", m34, Box::new(|g, x| g.tanh(x[0]).unwrap())),
        case("sigmoid", m34, Box::new(|g, x| g.sigmoid(x[0]).unwrap())),
        case("relu", m34, Box::new(|g, x| g.relu(x[0]).unwrap())),
        case("sum", m34, Box::new(|g, x| g.sum(x[0]).unwrap())),
        case("mean", m34, Box::new(|g, x| g.mean(x[0]).unwrap())),
        case(
            "mean_rows",
            m34,
            Box::new(|g, x| g.mean_rows(x[0]).unwrap()),
        ),
        case(
            "matmul",
            |r| {
                vec![
                    rand_tensor(r, &[3, 4], -1.0, 1.0),
                    rand_tensor(r, &[4, 2], -1.0, 1.0),
                ]
            },
            Box::new(|g, x| g.matmul(x[0], x[1]).unwrap()),
        ),
        case(
            "transpose",
            m34,
            Box::new(|g, x| g.transpose(x[0]).unwrap()),
        ),
        case(
            "affine",
            |r| {
                vec![
                    rand_tensor(r, &[3, 4], -1.0, 1.0),
                    rand_tensor(r, &[4, 5], -1.0, 1.0),
                    rand_tensor(r, &[5], -1.0, 1.0),
                ]
            },
            Box::new(|g, x| g.affine(x[0], x[1], x[2]).unwrap()),
        ),
        case(
            "conv1d",
            |r| {
                vec![
                    rand_tensor(r, &[7, 3], -1.0, 1.0),
                    rand_tensor(r, &[2, 3, 3], -1.0, 1.0),
                    rand_tensor(r, &[2], -1.0, 1.0),
                ]
            },
            Box::new(|g, x| g.conv1d(x[0], x[1], x[2], 1).unwrap()),
        ),
        case(
            "conv1d_stride2",
            |r| {
                vec![
                    rand_tensor(r, &[8, 2], -1.0, 1.0),
                    rand_tensor(r, &[3, 5, 2], -1.0, 1.0),
                    rand_tensor(r, &[3], -1.0, 1.0),
                ]
            },
            Box::new(|g, x| g.conv1d(x[0], x[1], x[2], 2).unwrap()),
        ),
        case(
            "max_pool_time",
            |r| vec![rand_tensor(r, &[9, 3], -2.0, 2.0)],
            Box::new(|g, x| g.max_pool_time(x[0], 3, 2).unwrap()),
        ),
        case("reverse", m34, Box::new(|g, x| g.reverse(x[0]).unwrap())),
        case(
            "concat_cols",
            |r| {
                vec![
                    rand_tensor(r, &[3, 2], -1.0, 1.0),
                    rand_tensor(r, &[3, 4], -1.0, 1.0),
                ]
            },
            Box::new(|g, x| g.concat_cols(x[0], x[1]).unwrap()),
        ),
        case(
            "concat_rows",
            |r| {
                vec![
                    rand_tensor(r, &[2, 3], -1.0, 1.0),
                    rand_tensor(r, &[4, 3], -1.0, 1.0),
                ]
            },
            Box::new(|g, x| g.concat_rows(x[0], x[1]).unwrap()),
        ),
        case(
            "slice_cols",
            m34,
            Box::new(|g, x| g.slice_cols(x[0], 1, 2).unwrap()),
        ),
        case(
            "slice_rows",
            m34,
            Box::new(|g, x| g.slice_rows(x[0], 1, 2).unwrap()),
        ),
        case("softmax", m34, Box::new(|g, x| g.softmax(x[0]).unwrap())),
        case(
            "log_softmax",
            m34,
            Box::new(|g, x| g.log_softmax(x[0]).unwrap()),
        ),
        case(
            "center_rows",
            m34,
            Box::new(|g, x| g.center(x[0], 0).unwrap()),
        ),
        case(
            "center_cols",
            m34,
            Box::new(|g, x| g.center(x[0], 1).unwrap()),
        ),
        case(
            "lstm",
            |r| {
                vec![
                    rand_tensor(r, &[4, 3], -1.0, 1.0),
                    rand_tensor(r, &[3, 8], -0.7, 0.7),
                    rand_tensor(r, &[2, 8], -0.7, 0.7),
                    rand_tensor(r, &[8], -0.5, 0.5),
                ]
            },
            Box::new(|g, x| g.lstm(x[0], x[1], x[2], x[3]).unwrap()),
        ),
        case(
            "trace",
            |r| vec![spd(r, 3)],
            Box::new(|g, x| g.trace(x[0]).unwrap()),
        ),
        case(
            "inverse",
            |r| vec![spd(r, 3)],
            Box::new(|g, x| g.inverse(x[0]).unwrap()),
        ),
        case(
            "logdet",
            |r| vec![spd(r, 3)],
            Box::new(|g, x| g.logdet(x[0]).unwrap()),
        ),
        case(
            "regularize_cov",
            |r| vec![spd(r, 3)],
            Box::new(|g, x| g.regularize_cov(x[0]).unwrap()),
        ),
        case(
            "tensor_power_mean_p1",
            |r| vec![rand_tensor(r, &[4, 3], -1.0, 1.0)],
            Box::new(|g, x| g.tensor_power_mean(x[0], 1).unwrap()),
        ),
        case(
            "tensor_power_mean_p2",
            |r| vec![rand_tensor(r, &[4, 3], -1.0, 1.0)],
            Box::new(|g, x| g.tensor_power_mean(x[0], 2).unwrap()),
        ),
        case(
            "tensor_power_mean_p3",
            |r| vec![rand_tensor(r, &[4, 3], -1.0, 1.0)],
            Box::new(|g, x| g.tensor_power_mean(x[0], 3).unwrap()),
        ),
        case(
            "sampled_monomials",
            |r| vec![rand_tensor(r, &[4, 3], -1.0, 1.0)],
            Box::new(|g, x| {
                g.sampled_monomials(x[0], 3, Arc::new(vec![0, 1, 2, 2, 2, 0, 1, 1, 0]))
                    .unwrap()
            }),
        ),
        case(
            "pairwise_sq_dist",
            |r| {
                vec![
                    rand_tensor(r, &[3, 2], -1.0, 1.0),
                    rand_tensor(r, &[4, 2], -1.0, 1.0),
                ]
            },
            Box::new(|g, x| g.pairwise_sq_dist(x[0], x[1]).unwrap()),
        ),
        case(
            "median_pair_dist",
            |r| vec![rand_tensor(r, &[5, 2], -1.0, 1.0)],
            Box::new(|g, x| {
                let d = g.pairwise_sq_dist(x[0], x[0]).unwrap();
                g.median_pair_dist(d).unwrap()
            }),
        ),
        case(
            "rbf",
            |r| {
                vec![
                    rand_tensor(r, &[3, 3], 0.0, 2.0),
                    rand_tensor(r, &[1], 0.5, 1.5),
                ]
            },
            Box::new(|g, x| g.rbf(x[0], x[1]).unwrap()),
        ),
        case(
            "block_mmd",
            |r| vec![rand_tensor(r, &[5, 5], 0.0, 1.0)],
            Box::new(|g, x| g.block_mmd(x[0], 2).unwrap()),
        ),
        case(
            "ctc",
            |r| vec![rand_tensor(r, &[5, 3], -2.0, 2.0)],
            Box::new(|g, x| {
                let lp = g.log_softmax(x[0]).unwrap();
                g.ctc(lp, Arc::new(vec![0, 1, 1]), 2).unwrap()
            }),
        ),
    ]
}

/// Reference collapse: merge repeats, drop blanks.
fn collapse_ref(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for (i, &k) in path.iter().enumerate() {
        if k != blank && (i == 0 || path[i - 1] != k) {
            out.push(k);
        }
    }
    out
}

/// Probability of `labels` by summing over all frame paths.
pub fn ctc_brute_force(log_probs: &Tensor, labels: &[usize], blank: usize) -> f64 {
    let (t, c) = (log_probs.rows(), log_probs.cols());
    let total = c.pow(t as u32);
    let mut sum = 0.0;
    for code in 0..total {
        let mut path = Vec::with_capacity(t);
        let mut rem = code;
        for _ in 0..t {
            path.push(rem % c);
            rem /= c;
        }
        if collapse_ref(&path, blank) == labels {
            sum += (0..t)
                .map(|f| log_probs.get2(f, path[f]))
                .sum::<f64>()
                .exp();
        }
    }
    sum
}

/// Memoized recursive Levenshtein distance.
pub fn ed_recursive(a: &[char], b: &[char]) -> usize {
    fn go(
        a: &[char],
        b: &[char],
        i: usize,
        j: usize,
        memo: &mut HashMap<(usize, usize), usize>,
    ) -> usize {
        if i == 0 {
            return j;
        }
        if j == 0 {
            return i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let cost = usize::from(a[i - 1] != b[j - 1]);
        let v = (go(a, b, i - 1, j, memo) + 1)
            .min(go(a, b, i, j - 1, memo) + 1)
            .min(go(a, b, i - 1, j - 1, memo) + cost);
        memo.insert((i, j), v);
        v
    }
    go(a, b, a.len(), b.len(), &mut HashMap::new())
}

/// Explicit `p`-fold tensor construction of HoMM.
pub fn homm_oracle(src: &Tensor, tgt: &Tensor, p: u32) -> f64 {
    let h = src.cols();
    let entries = h.pow(p);
    let moment = |x: &Tensor, idx: &[usize]| -> f64 {
        (0..x.rows())
            .map(|i| idx.iter().map(|&k| x.get2(i, k)).product::<f64>())
            .sum::<f64>()
            / x.rows() as f64
    };
    let mut sum = 0.0;
    for code in 0..entries {
        let mut idx = Vec::new();
        let mut rem = code;
        for _ in 0..p {
            idx.push(rem % h);
            rem /= h;
        }
        let d = moment(src, &idx) - moment(tgt, &idx);
        sum += d * d;
    }
    sum / entries as f64
}

/// Biased MMD^2 with an RBF kernel by explicit double loops.
pub fn kmmd_oracle(src: &Tensor, tgt: &Tensor, sigma: Option<f64>) -> f64 {
    let rows = |t: &Tensor| (0..t.rows()).map(|i| t.row(i).to_vec()).collect::<Vec<_>>();
    let (s, t) = (rows(src), rows(tgt));
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let sigma = sigma.unwrap_or_else(|| {
        let pooled: Vec<&Vec<f64>> = s.iter().chain(t.iter()).collect();
        let mut ds = Vec::new();
        for i in 0..pooled.len() {
            for j in i + 1..pooled.len() {
                ds.push(d2(pooled[i], pooled[j]).sqrt());
            }
        }
        ds.sort_by(f64::total_cmp);
        let m = ds.len();
        let med = if m % 2 == 1 {
            ds[m / 2]
        } else {
            0.5 * (ds[m / 2 - 1] + ds[m / 2])
        };
        med.max(1e-8)
    });
    let k = |a: &[f64], b: &[f64]| (-d2(a, b) / (sigma * sigma)).exp();
    let mean_k = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        let mut acc = 0.0;
        for a in x {
            for b in y {
                acc += k(a, b);
            }
        }
        acc / (x.len() * y.len()) as f64
    };
    mean_k(&s, &s) + mean_k(&t, &t) - 2.0 * mean_k(&s, &t)
}

pub fn covariance(x: &Tensor) -> DMatrix<f64> {
    let (n, h) = (x.rows(), x.cols());
    let mean: Vec<f64> = (0..h)
        .map(|j| (0..n).map(|i| x.get2(i, j)).sum::<f64>() / n as f64)
        .collect();
    DMatrix::from_fn(h, h, |a, b| {
        (0..n)
            .map(|i| (x.get2(i, a) - mean[a]) * (x.get2(i, b) - mean[b]))
            .sum::<f64>()
            / n as f64
    })
}

pub fn regularized(c: &DMatrix<f64>) -> DMatrix<f64> {
    let h = c.nrows();
    let eps = 1e-6 * c.trace() / h as f64 + 1e-12;
    c + DMatrix::identity(h, h) * eps
}

fn eig_logdet(c: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(c.clone())
        .eigenvalues
        .iter()
        .map(|l| l.ln())
        .sum()
}

/// Jeffreys divergence via generalized eigenvalues of `(Cs, Ct)`.
pub fn jeff_oracle(src: &Tensor, tgt: &Tensor) -> f64 {
    let cs = regularized(&covariance(src));
    let ct = regularized(&covariance(tgt));
    let et = SymmetricEigen::new(ct.clone());
    let inv_sqrt = &et.eigenvectors
        * DMatrix::from_diagonal(&et.eigenvalues.map(|l| 1.0 / l.sqrt()))
        * et.eigenvectors.transpose();
    let m = &inv_sqrt * &cs * &inv_sqrt;
    let m = (&m + m.transpose()) * 0.5;
    let lambdas = SymmetricEigen::new(m).eigenvalues;
    lambdas.iter().map(|l| l + 1.0 / l).sum::<f64>() - 2.0 * cs.nrows() as f64
}

/// Stein divergence via eigenvalue log-determinants.
pub fn stein_oracle(src: &Tensor, tgt: &Tensor) -> f64 {
    let cs = covariance(src);
    let ct = covariance(tgt);
    let mid = (&cs + &ct) * 0.5;
    eig_logdet(&regularized(&mid))
        - 0.5 * eig_logdet(&regularized(&cs))
        - 0.5 * eig_logdet(&regularized(&ct))
}

/// Random word over the first `k` letters.
pub fn random_word(r: &mut ChaCha8Rng, k: u8, min: usize, max: usize) -> String {
    let len = r.gen_range(min..=max);
    (0..len)
        .map(|_| (b'a' + r.gen_range(0..k)) as char)
        .collect()
}

/// Worst central-difference error of each gradient family, shared by the
/// gradient suite and the acceptance run.
pub mod grad {
    use super::*;
    use seqda::ctc::{ctc_loss, ctc_loss_and_grad, LabelSeq};
    use seqda::dml::{
        dml_distance, dml_distance_and_grads, DmlKind, DmlLossSpec, EmbeddingBag, Variant,
    };
    use seqda::model::{init_params, ModelConfig, Params};
    use seqda::trainer::{pair_objective, PairTerm, PairingMode, PreparedSample};

    pub fn op(case: &OpCase, instances: u64) -> f64 {
        (0..instances)
            .map(|k| {
                let mut r = rng(k * 7919 + case.name.len() as u64);
                let inputs = (case.inputs)(&mut r);
                fd_check(&*case.build, &inputs)
            })
            .fold(0.0, f64::max)
    }

    fn log_softmax_rows(z: &[f64], c: usize) -> Tensor {
        let mut out = z.to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Tensor::matrix(z.len() / c, c, out)
    }

    /// Gradient with respect to the log-probability matrix itself.
    pub fn ctc(instances: u64) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..instances {
            let mut r = rng(100 + k);
            let t = 6;
            let lp = log_softmax_rows(rand_tensor(&mut r, &[t, 4], -2.0, 2.0).data(), 4);
            let label = LabelSeq::new(vec![0, 2, 2]).unwrap();
            let (_, grad) = ctc_loss_and_grad(&lp, &label, 3).unwrap();
            let num = fd_grad(
                |v| ctc_loss(&Tensor::matrix(t, 4, v.to_vec()), &label, 3).unwrap(),
                lp.data(),
            );
            for (a, n) in grad.data().iter().zip(&num) {
                worst = worst.max(rel_err(*a, *n));
            }
        }
        worst
    }

    /// Every kind with the full and grouped variants, plus sampling where it applies.
    pub fn dml_specs() -> Vec<DmlLossSpec> {
        let mut specs = Vec::new();
        for kind in DmlKind::TABLE {
            let base = DmlLossSpec::new(kind).with_seed(3);
            specs.push(base.with_variant(Variant::Full));
            specs.push(base.with_variant(Variant::Group(2)));
            if matches!(kind, DmlKind::Homm { .. } | DmlKind::KHomm { .. }) {
                specs.push(base.with_variant(Variant::Sampled(40)));
            }
        }
        specs
    }

    pub fn dml(spec: &DmlLossSpec, instances: u64) -> f64 {
        let bag = |t: &Tensor| EmbeddingBag::new(t.clone()).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..instances {
            let mut r = rng(500 + k);
            let a = rand_tensor(&mut r, &[5, 4], -1.0, 1.0);
            let b = rand_tensor(&mut r, &[6, 4], -1.0, 1.0);
            let (_, ga, gb) = dml_distance_and_grads(spec, &bag(&a), &bag(&b)).unwrap();
            let na = fd_grad(
                |v| dml_distance(spec, &bag(&Tensor::matrix(5, 4, v.to_vec())), &bag(&b)).unwrap(),
                a.data(),
            );
            let nb = fd_grad(
                |v| dml_distance(spec, &bag(&a), &bag(&Tensor::matrix(6, 4, v.to_vec()))).unwrap(),
                b.data(),
            );
            for (an, num) in ga.data().iter().zip(&na).chain(gb.data().iter().zip(&nb)) {
                worst = worst.max(rel_err(*an, *num));
            }
        }
        worst
    }

    fn micro_config() -> ModelConfig {
        ModelConfig {
            input_len: 8,
            channels: 13,
            conv_filters: 3,
            kernel_size: 3,
            pooled_len: 4,
            lstm1_hidden: 2,
            lstm2_hidden: 3,
            num_classes: 4,
            dropout: 0.2,
            seed: 11,
        }
    }

    fn micro_sample(
        r: &mut ChaCha8Rng,
        id: &str,
        label: Vec<usize>,
        steps: usize,
    ) -> PreparedSample {
        let mut x = rand_tensor(r, &[8, 13], -1.0, 1.0);
        x.data_mut()[steps * 13..].iter_mut().for_each(|v| *v = 0.0);
        PreparedSample {
            id: id.into(),
            x,
            steps,
            text: String::new(),
            label: LabelSeq::new(label).unwrap(),
        }
    }

    /// Full adaptation objective (both CTC heads plus the pair term, dropout
    /// on) over every parameter of both networks.
    pub fn adaptation(mode: PairingMode, kind: DmlKind) -> f64 {
        let cfg = micro_config();
        let main = init_params(&cfg).unwrap();
        let aux = init_params(&ModelConfig {
            seed: 12,
            ..cfg.clone()
        })
        .unwrap();
        let mut r = rng(77);
        let s = [
            micro_sample(&mut r, "a", vec![0, 1], 8),
            micro_sample(&mut r, "p", vec![0, 1], 7),
            micro_sample(&mut r, "n", vec![2, 1], 6),
        ];
        let spec = match kind {
            DmlKind::Homm { .. } | DmlKind::KHomm { .. } => DmlLossSpec::new(kind)
                .with_variant(Variant::Sampled(30))
                .with_seed(5),
            _ => DmlLossSpec::new(kind),
        };
        let term = PairTerm {
            alpha: 0.05,
            lambda: 0.7,
            batch: 2,
            mode,
            fusion_point: 3,
        };
        let value = |m: &Params, a: &Params| {
            let (g, nodes) =
                pair_objective(m, a, &cfg, &spec, &term, &s[0], &s[1], &s[2], Some(9)).unwrap();
            g.value(nodes.total).item()
        };
        let (g, nodes) = pair_objective(
            &main,
            &aux,
            &cfg,
            &spec,
            &term,
            &s[0],
            &s[1],
            &s[2],
            Some(9),
        )
        .unwrap();
        let grads = g.param_grads(nodes.total).unwrap();
        let mut worst: f64 = 0.0;
        for (prefix, base) in [("main", &main), ("aux", &aux)] {
            for name in base.names().map(str::to_string).collect::<Vec<_>>() {
                let an = &grads[&format!("{prefix}.{name}")];
                for j in 0..base.get(&name).unwrap().len() {
                    let eval = |delta: f64| {
                        let mut p = base.clone();
                        p.get_mut(&name).unwrap().data_mut()[j] += delta;
                        if prefix == "main" {
                            value(&p, &aux)
                        } else {
                            value(&main, &p)
                        }
                    };
                    let num = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
                    worst = worst.max(rel_err(an.data()[j], num));
                }
            }
        }
        worst
    }
}
