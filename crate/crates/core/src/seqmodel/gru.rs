//! Single GRU cell with explicit backpropagation.
//!
//! ```text
//! z  = sigmoid(Wz x + Uz h + bz)
//! r  = sigmoid(Wr x + Ur h + br)
//! n  = tanh(Wn x + Un (r * h) + bn)
//! h' = (1 - z) * n + z * h
//! ```

use super::params::GruWeights;

/// Values from one forward step needed to backpropagate through it.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub n: Vec<f64>,
    pub rh: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn step(cell: &GruWeights, x: &[f64], h: &[f64]) -> (Vec<f64>, StepCache) {
    let hd = h.len();
    let d = x.len();
    let wi = cell.w_input.data();
    let wh = cell.w_hidden.data();
    let b = cell.bias.data();
    let mut z = vec![0.0; hd];
    let mut r = vec![0.0; hd];
    for k in 0..hd {
        let gz = k;
        let gr = hd + k;
        z[k] = sigmoid(
            dot(&wi[gz * d..(gz + 1) * d], x) + dot(&wh[gz * hd..(gz + 1) * hd], h) + b[gz],
        );
        r[k] = sigmoid(
            dot(&wi[gr * d..(gr + 1) * d], x) + dot(&wh[gr * hd..(gr + 1) * hd], h) + b[gr],
        );
    }
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let mut n = vec![0.0; hd];
    let mut h_new = vec![0.0; hd];
    for k in 0..hd {
        let g = 2 * hd + k;
        n[k] = (dot(&wi[g * d..(g + 1) * d], x) + dot(&wh[g * hd..(g + 1) * hd], &rh) + b[g]).tanh();
        h_new[k] = (1.0 - z[k]) * n[k] + z[k] * h[k];
    }
    let cache = StepCache {
        h_prev: h.to_vec(),
        z,
        r,
        n,
        rh,
    };
    (h_new, cache)
}

/// Backpropagates `dh_new` through one step, accumulating weight gradients
/// into `grad` and the input gradient into `dx`. Returns the gradient with
/// respect to the previous hidden state.
pub(crate) fn step_backward(
    cell: &GruWeights,
    grad: &mut GruWeights,
    x: &[f64],
    cache: &StepCache,
    dh_new: &[f64],
    dx: &mut [f64],
) -> Vec<f64> {
    let hd = dh_new.len();
    let d = x.len();
    let wi = cell.w_input.data();
    let wh = cell.w_hidden.data();
    let StepCache {
        h_prev,
        z,
        r,
        n,
        rh,
    } = cache;

    let mut dh_prev = vec![0.0; hd];
    // pre-activation gradients, stacked like the weights
    let mut dpre = vec![0.0; 3 * hd];
    for k in 0..hd {
        let dn = dh_new[k] * (1.0 - z[k]);
        let dz = dh_new[k] * (h_prev[k] - n[k]);
        dh_prev[k] = dh_new[k] * z[k];
        dpre[2 * hd + k] = dn * (1.0 - n[k] * n[k]);
        dpre[k] = dz * z[k] * (1.0 - z[k]);
    }
    // through Un (r * h)
    let mut drh = vec![0.0; hd];
    for k in 0..hd {
        let g = 2 * hd + k;
        axpy(dpre[g], &wh[g * hd..(g + 1) * hd], &mut drh);
    }
    for k in 0..hd {
        let dr = drh[k] * h_prev[k];
        dh_prev[k] += drh[k] * r[k];
        dpre[hd + k] = dr * r[k] * (1.0 - r[k]);
    }

    let gwi = grad.w_input.data_mut();
    for g in 0..3 * hd {
        axpy(dpre[g], x, &mut gwi[g * d..(g + 1) * d]);
        axpy(dpre[g], &wi[g * d..(g + 1) * d], dx);
    }
    let gwh = grad.w_hidden.data_mut();
    for g in 0..2 * hd {
        axpy(dpre[g], h_prev, &mut gwh[g * hd..(g + 1) * hd]);
        axpy(dpre[g], &wh[g * hd..(g + 1) * hd], &mut dh_prev);
    }
    for g in 2 * hd..3 * hd {
        axpy(dpre[g], rh, &mut gwh[g * hd..(g + 1) * hd]);
    }
    for (gb, dp) in grad.bias.data_mut().iter_mut().zip(&dpre) {
        *gb += dp;
    }
    dh_prev
}
