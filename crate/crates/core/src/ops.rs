//! Pure tensor kernels shared by the recording tape and the no-grad
//! forward path. Both paths call the same functions, so their outputs are
//! bit-identical by construction.

use crate::scalar::Scalar;
use crate::tensor::{axis_split, Tensor, TensorError, TensorResult};

pub fn relu<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| if v > E::zero() { v } else { E::zero() })
}

/// Numerically stable logistic function.
pub fn sigmoid_val<E: Scalar>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

pub fn sigmoid<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    x.map(sigmoid_val)
}

fn check_dense_shapes<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
) -> TensorResult<(usize, usize, usize)> {
    if x.rank() != 2 || w.rank() != 2 {
        return Err(TensorError::InvalidArgument {
            context: "dense",
            message: format!(
                "expected rank-2 input and weight, got {:?} and {:?}",
                x.shape(),
                w.shape()
            ),
        });
    }
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let (dout, win) = (w.shape()[0], w.shape()[1]);
    if din != win {
        return Err(TensorError::DimMismatch {
            context: "dense input width",
            axis: 1,
            left: din,
            right: win,
        });
    }
    if b.shape() != [dout] {
        return Err(TensorError::DimMismatch {
            context: "dense bias",
            axis: 0,
            left: b.numel(),
            right: dout,
        });
    }
    Ok((n, din, dout))
}

/// out = x · wᵀ + b for x `[N,Din]`, w `[Dout,Din]`, b `[Dout]`.
pub fn dense_forward<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
) -> TensorResult<Tensor<E>> {
    let (n, din, dout) = check_dense_shapes(x, w, b)?;
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![E::zero(); n * dout];
    for ni in 0..n {
        let x_row = &xd[ni * din..(ni + 1) * din];
        let o_row = &mut out[ni * dout..(ni + 1) * dout];
        for o in 0..dout {
            let w_row = &wd[o * din..(o + 1) * din];
            let mut acc = bd[o];
            for i in 0..din {
                acc = acc + x_row[i] * w_row[i];
            }
            o_row[o] = acc;
        }
    }
    Tensor::from_vec(&[n, dout], out)
}

pub fn dense_backward<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    grad_out: &Tensor<E>,
    need_input: bool,
    need_params: bool,
) -> (Option<Tensor<E>>, Option<Tensor<E>>, Option<Tensor<E>>) {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let xd = x.data();
    let wd = w.data();
    let go = grad_out.data();

    let gx = need_input.then(|| {
        let mut gx = vec![E::zero(); n * din];
        for ni in 0..n {
            let g_row = &go[ni * dout..(ni + 1) * dout];
            let gx_row = &mut gx[ni * din..(ni + 1) * din];
            for o in 0..dout {
                let g = g_row[o];
                let w_row = &wd[o * din..(o + 1) * din];
                for i in 0..din {
                    gx_row[i] = gx_row[i] + g * w_row[i];
                }
            }
        }
        Tensor::from_vec(&[n, din], gx).expect("dense input grad shape")
    });
    let (gw, gb) = if need_params {
        let mut gw = vec![E::zero(); dout * din];
        let mut gb = vec![E::zero(); dout];
        for ni in 0..n {
            let g_row = &go[ni * dout..(ni + 1) * dout];
            let x_row = &xd[ni * din..(ni + 1) * din];
            for o in 0..dout {
                let g = g_row[o];
                gb[o] = gb[o] + g;
                let gw_row = &mut gw[o * din..(o + 1) * din];
                for i in 0..din {
                    gw_row[i] = gw_row[i] + g * x_row[i];
                }
            }
        }
        (
            Some(Tensor::from_vec(&[dout, din], gw).expect("dense weight grad shape")),
            Some(Tensor::from_vec(&[dout], gb).expect("dense bias grad shape")),
        )
    } else {
        (None, None)
    };
    (gx, gw, gb)
}

/// Spatial mean per channel: `[N,C,H,W]` -> `[N,C]`.
pub fn global_avg_pool<E: Scalar>(x: &Tensor<E>) -> TensorResult<Tensor<E>> {
    if x.rank() != 4 {
        return Err(TensorError::InvalidArgument {
            context: "global_avg_pool",
            message: format!("expected rank-4 input, got {:?}", x.shape()),
        });
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let inv = E::from_f64(1.0 / plane as f64);
    let xd = x.data();
    let mut out = vec![E::zero(); n * c];
    for (i, slot) in out.iter_mut().enumerate() {
        let p = &xd[i * plane..(i + 1) * plane];
        *slot = p.iter().fold(E::zero(), |a, &v| a + v) * inv;
    }
    Tensor::from_vec(&[n, c], out)
}

pub fn softmax_axis<E: Scalar>(x: &Tensor<E>, axis: usize) -> TensorResult<Tensor<E>> {
    lanewise(x, axis, |lane, out| {
        let max = lane.iter().fold(lane[0], |a, &v| a.max(v));
        let mut sum = E::zero();
        for (o, &v) in out.iter_mut().zip(lane.iter()) {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        }
        let inv = E::one() / sum;
        for o in out.iter_mut() {
            *o = *o * inv;
        }
    })
}

pub fn log_softmax_axis<E: Scalar>(x: &Tensor<E>, axis: usize) -> TensorResult<Tensor<E>> {
    lanewise(x, axis, |lane, out| {
        let max = lane.iter().fold(lane[0], |a, &v| a.max(v));
        let mut sum = E::zero();
        for &v in lane.iter() {
            sum = sum + (v - max).exp();
        }
        let log_z = max + sum.ln();
        for (o, &v) in out.iter_mut().zip(lane.iter()) {
            *o = v - log_z;
        }
    })
}

/// Apply `f` to every lane along `axis`; lanes are gathered and scattered
/// so `f` always sees a contiguous slice.
fn lanewise<E: Scalar>(
    x: &Tensor<E>,
    axis: usize,
    f: impl Fn(&[E], &mut [E]),
) -> TensorResult<Tensor<E>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![E::zero(); xd.len()];
    let mut lane = vec![E::zero(); len];
    let mut lane_out = vec![E::zero(); len];
    for oi in 0..outer {
        for ii in 0..inner {
            let base = oi * len * inner + ii;
            for j in 0..len {
                lane[j] = xd[base + j * inner];
            }
            f(&lane, &mut lane_out);
            for j in 0..len {
                out[base + j * inner] = lane_out[j];
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Index of the largest value; ties break to the lowest index.
pub fn argmax<E: Scalar>(xs: &[E]) -> usize {
    debug_assert!(!xs.is_empty());
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Indices of the two largest values; ties break to the lowest index.
pub fn top2<E: Scalar>(xs: &[E]) -> [usize; 2] {
    debug_assert!(xs.len() >= 2);
    let first = argmax(xs);
    let mut second = usize::MAX;
    for (i, &v) in xs.iter().enumerate() {
        if i == first {
            continue;
        }
        if second == usize::MAX || v > xs[second] {
            second = i;
        }
    }
    [first, second]
}
