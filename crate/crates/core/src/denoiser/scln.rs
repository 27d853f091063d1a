//! Speaker-conditioned layer normalization.
//!
//! `out = (1 + spk·W_scale) ⊙ LN(h) + spk·W_shift`, where `LN` normalizes each
//! row to zero mean and unit variance with `LN_EPS` inside the square root.

use ndarray::{Array1, Array2, ArrayView2, Axis};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct SclnForward {
    pub out: Array2<f64>,
    pub normed: Array2<f64>,
    pub inv_std: Array1<f64>,
    /// `1 + spk·W_scale`
    pub gain: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct SclnGrads {
    pub d_h: Array2<f64>,
    pub d_speaker: Array2<f64>,
    pub d_scale_w: Array2<f64>,
    pub d_shift_w: Array2<f64>,
}

/// Row-wise layer norm; returns the normalized rows and `1/sqrt(var + eps)`.
pub fn layer_norm(h: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let width = h.ncols() as f64;
    let mut normed = h.to_owned();
    let mut inv_std = Array1::zeros(h.nrows());
    for (mut row, inv) in normed.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / width;
        row.mapv_inplace(|x| x - mean);
        let var = row.iter().map(|x| x * x).sum::<f64>() / width;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|x| x * *inv);
    }
    (normed, inv_std)
}

pub fn layer_norm_backward(d_normed: ArrayView2<f64>, normed: ArrayView2<f64>, inv_std: &Array1<f64>) -> Array2<f64> {
    let width = d_normed.ncols() as f64;
    let mut d_h = d_normed.to_owned();
    for ((mut row, n), &inv) in d_h.rows_mut().into_iter().zip(normed.rows()).zip(inv_std.iter()) {
        let mean_g = row.sum() / width;
        let mean_gn = row.iter().zip(n.iter()).map(|(g, x)| g * x).sum::<f64>() / width;
        for (g, x) in row.iter_mut().zip(n.iter()) {
            *g = inv * (*g - mean_g - x * mean_gn);
        }
    }
    d_h
}

pub fn forward(h: ArrayView2<f64>, speaker: ArrayView2<f64>, scale_w: ArrayView2<f64>, shift_w: ArrayView2<f64>) -> SclnForward {
    let (normed, inv_std) = layer_norm(h);
    let gain = speaker.dot(&scale_w) + 1.0;
    let out = &gain * &normed + speaker.dot(&shift_w);
    SclnForward { out, normed, inv_std, gain }
}

pub fn backward(
    d_out: ArrayView2<f64>,
    fwd: &SclnForward,
    speaker: ArrayView2<f64>,
    scale_w: ArrayView2<f64>,
    shift_w: ArrayView2<f64>,
) -> SclnGrads {
    let d_normed = &d_out * &fwd.gain;
    let d_gain = &d_out * &fwd.normed;
    let d_h = layer_norm_backward(d_normed.view(), fwd.normed.view(), &fwd.inv_std);
    let d_speaker = d_gain.dot(&scale_w.t()) + d_out.dot(&shift_w.t());
    SclnGrads {
        d_h,
        d_speaker,
        d_scale_w: speaker.t().dot(&d_gain),
        d_shift_w: speaker.t().dot(&d_out),
    }
}

/// Single-vector form.
pub fn scln_forward(h: &[f64], speaker: &[f64], scale_w: ArrayView2<f64>, shift_w: ArrayView2<f64>) -> Vec<f64> {
    let h = ArrayView2::from_shape((1, h.len()), h).expect("row view");
    let s = ArrayView2::from_shape((1, speaker.len()), speaker).expect("row view");
    forward(h, s, scale_w, shift_w).out.index_axis(Axis(0), 0).to_vec()
}
