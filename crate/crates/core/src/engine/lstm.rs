//! Unidirectional LSTM over a whole sequence, gate order `[input, forget, cell, output]`.

use super::Tensor;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) struct LstmForward {
    pub hidden: Tensor,
    /// Activated gates, `T x 4H`.
    pub gates: Tensor,
    /// Cell states, `T x H`.
    pub cells: Tensor,
}

pub(crate) fn forward(x: &Tensor, wx: &Tensor, wh: &Tensor, b: &Tensor) -> LstmForward {
    let t_len = x.rows();
    let in_dim = x.cols();
    let h4 = wx.cols();
    let h = h4 / 4;
    let mut hs = vec![0.0; t_len * h];
    let mut cs = vec![0.0; t_len * h];
    let mut gates = vec![0.0; t_len * h4];
    let mut z = vec![0.0; h4];
    for t in 0..t_len {
        z.copy_from_slice(b.data());
        let xt = x.row(t);
        for (p, &xv) in xt.iter().enumerate().take(in_dim) {
            if xv == 0.0 {
                continue;
            }
            let wrow = &wx.data()[p * h4..(p + 1) * h4];
            for (zv, wv) in z.iter_mut().zip(wrow) {
                *zv += xv * wv;
            }
        }
        if t > 0 {
            let (prev, _) = hs.split_at(t * h);
            let hprev = &prev[(t - 1) * h..];
            for (p, &hv) in hprev.iter().enumerate() {
                let wrow = &wh.data()[p * h4..(p + 1) * h4];
                for (zv, wv) in z.iter_mut().zip(wrow) {
                    *zv += hv * wv;
                }
            }
        }
        let g = &mut gates[t * h4..(t + 1) * h4];
        for j in 0..h {
            g[j] = sigmoid(z[j]);
            g[h + j] = sigmoid(z[h + j]);
            g[2 * h + j] = z[2 * h + j].tanh();
            g[3 * h + j] = sigmoid(z[3 * h + j]);
        }
        for j in 0..h {
            let c_prev = if t > 0 { cs[(t - 1) * h + j] } else { 0.0 };
            let c = g[h + j] * c_prev + g[j] * g[2 * h + j];
            cs[t * h + j] = c;
            hs[t * h + j] = g[3 * h + j] * c.tanh();
        }
    }
    LstmForward {
        hidden: Tensor::matrix(t_len, h, hs),
        gates: Tensor::matrix(t_len, h4, gates),
        cells: Tensor::matrix(t_len, h, cs),
    }
}

pub(crate) struct LstmGrads {
    pub x: Option<Tensor>,
    pub wx: Tensor,
    pub wh: Tensor,
    pub b: Tensor,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    x: &Tensor,
    wx: &Tensor,
    wh: &Tensor,
    hidden: &Tensor,
    gates: &Tensor,
    cells: &Tensor,
    gout: &Tensor,
    need_x: bool,
) -> LstmGrads {
    let t_len = x.rows();
    let in_dim = x.cols();
    let h4 = wx.cols();
    let h = h4 / 4;
    let mut gx = need_x.then(|| vec![0.0; t_len * in_dim]);
    let mut gwx = vec![0.0; in_dim * h4];
    let mut gwh = vec![0.0; h * h4];
    let mut gb = vec![0.0; h4];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dz = vec![0.0; h4];
    for t in (0..t_len).rev() {
        let g = gates.row(t);
        for j in 0..h {
            let dh = gout.get2(t, j) + dh_next[j];
            let c = cells.get2(t, j);
            let tc = c.tanh();
            let (i_g, f_g, c_g, o_g) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
            let d_o = dh * tc;
            let dc = dh * o_g * (1.0 - tc * tc) + dc_next[j];
            let c_prev = if t > 0 { cells.get2(t - 1, j) } else { 0.0 };
            dz[j] = dc * c_g * i_g * (1.0 - i_g);
            dz[h + j] = dc * c_prev * f_g * (1.0 - f_g);
            dz[2 * h + j] = dc * i_g * (1.0 - c_g * c_g);
            dz[3 * h + j] = d_o * o_g * (1.0 - o_g);
            dc_next[j] = dc * f_g;
        }
        for (gbv, dv) in gb.iter_mut().zip(&dz) {
            *gbv += dv;
        }
        let xt = x.row(t);
        for (p, &xv) in xt.iter().enumerate() {
            let row = &mut gwx[p * h4..(p + 1) * h4];
            for (r, dv) in row.iter_mut().zip(&dz) {
                *r += xv * dv;
            }
        }
        if let Some(gx) = gx.as_mut() {
            let gxt = &mut gx[t * in_dim..(t + 1) * in_dim];
            for (p, gv) in gxt.iter_mut().enumerate() {
                let wrow = &wx.data()[p * h4..(p + 1) * h4];
                *gv = wrow.iter().zip(&dz).map(|(w, d)| w * d).sum();
            }
        }
        for (p, dhn) in dh_next.iter_mut().enumerate() {
            let wrow = &wh.data()[p * h4..(p + 1) * h4];
            *dhn = wrow.iter().zip(&dz).map(|(w, d)| w * d).sum();
        }
        if t > 0 {
            let hprev = hidden.row(t - 1);
            for (p, &hv) in hprev.iter().enumerate() {
                let row = &mut gwh[p * h4..(p + 1) * h4];
                for (r, dv) in row.iter_mut().zip(&dz) {
                    *r += hv * dv;
                }
            }
        }
    }
    LstmGrads {
        x: gx.map(|d| Tensor::matrix(t_len, in_dim, d)),
        wx: Tensor::matrix(in_dim, h4, gwx),
        wh: Tensor::matrix(h, h4, gwh),
        b: Tensor::vector(gb),
    }
}
