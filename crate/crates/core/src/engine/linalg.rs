use nalgebra::DMatrix;

use super::Tensor;

pub(crate) fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub(crate) fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::matrix(r, c, data)
}

pub(crate) fn inverse(t: &Tensor) -> Option<Tensor> {
    let inv = to_dmatrix(t).try_inverse()?;
    let out = from_dmatrix(&inv);
    out.is_finite().then_some(out)
}

/// `log det A` and `A^{-1}`; Cholesky for exactly symmetric input (it reads
/// one triangle only), LU otherwise. Returns `None` when the determinant is
/// not strictly positive.
pub(crate) fn logdet_and_inverse(t: &Tensor) -> Option<(f64, Tensor)> {
    let m = to_dmatrix(t);
    let symmetric = m == m.transpose();
    if let Some(chol) = symmetric.then(|| m.clone().cholesky()).flatten() {
        let logdet = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let inv = from_dmatrix(&chol.inverse());
        return (logdet.is_finite() && inv.is_finite()).then_some((logdet, inv));
    }
    let lu = m.lu();
    let det = lu.determinant();
    if det.is_nan() || det <= 0.0 || !det.is_finite() {
        return None;
    }
    let inv = from_dmatrix(&lu.try_inverse()?);
    Some((det.ln(), inv))
}

pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
