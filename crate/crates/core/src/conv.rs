//! Direct 2-D convolution kernels (forward and backward).
//!
//! Inputs are NCHW, kernels are [out, in, kh, kw]. Padding is zero-padding,
//! dilation spaces the kernel taps. The backward pass scatters through the
//! same index map as the forward pass (transposed convolution), so the two
//! agree exactly in 64-bit mode.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, TensorResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dGeometry {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> TensorResult<Self> {
        if stride == 0 || dilation == 0 {
            return Err(TensorError::InvalidArgument {
                context: "conv2d",
                message: format!("stride and dilation must be positive, got {stride}/{dilation}"),
            });
        }
        Ok(Self {
            stride,
            padding,
            dilation,
        })
    }

    /// Output extent along one axis, or an error when the padded input
    /// admits no kernel placement.
    pub fn out_dim(&self, input: usize, kernel: usize) -> TensorResult<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(TensorError::EmptyConvOutput {
                context: "conv2d",
                input,
                span,
            });
        }
        Ok((padded - span) / self.stride + 1)
    }
}

fn check_conv_shapes<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
) -> TensorResult<()> {
    if input.rank() != 4 || kernel.rank() != 4 {
        return Err(TensorError::InvalidArgument {
            context: "conv2d",
            message: format!(
                "expected rank-4 input and kernel, got {:?} and {:?}",
                input.shape(),
                kernel.shape()
            ),
        });
    }
    if input.shape()[1] != kernel.shape()[1] {
        return Err(TensorError::DimMismatch {
            context: "conv2d input channels",
            axis: 1,
            left: input.shape()[1],
            right: kernel.shape()[1],
        });
    }
    if bias.shape() != [kernel.shape()[0]] {
        return Err(TensorError::DimMismatch {
            context: "conv2d bias",
            axis: 0,
            left: bias.numel(),
            right: kernel.shape()[0],
        });
    }
    Ok(())
}

pub fn conv2d_forward<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
    geo: Conv2dGeometry,
) -> TensorResult<Tensor<E>> {
    check_conv_shapes(input, kernel, bias)?;
    let (n, c, h, w) = dims4(input);
    let (co, _, kh, kw) = dims4(kernel);
    let ho = geo.out_dim(h, kh)?;
    let wo = geo.out_dim(w, kw)?;

    let x = input.data();
    let k = kernel.data();
    let b = bias.data();
    let mut out = vec![E::zero(); n * co * ho * wo];

    for ni in 0..n {
        for oc in 0..co {
            let out_plane = &mut out[(ni * co + oc) * ho * wo..(ni * co + oc + 1) * ho * wo];
            out_plane.fill(b[oc]);
            for ic in 0..c {
                let x_plane = &x[(ni * c + ic) * h * w..(ni * c + ic + 1) * h * w];
                let k_plane = &k[(oc * c + ic) * kh * kw..(oc * c + ic + 1) * kh * kw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let tap = k_plane[ky * kw + kx];
                        for oy in 0..ho {
                            let iy = (oy * geo.stride + ky * geo.dilation) as isize
                                - geo.padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * w..(iy as usize + 1) * w];
                            let o_row = &mut out_plane[oy * wo..(oy + 1) * wo];
                            for ox in 0..wo {
                                let ix = (ox * geo.stride + kx * geo.dilation) as isize
                                    - geo.padding as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                o_row[ox] = o_row[ox] + tap * x_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, co, ho, wo], out)
}

/// Gradients of the convolution w.r.t. input, kernel, and bias.
pub fn conv2d_backward<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    grad_out: &Tensor<E>,
    geo: Conv2dGeometry,
    need_input: bool,
    need_params: bool,
) -> (Option<Tensor<E>>, Option<Tensor<E>>, Option<Tensor<E>>) {
    let (n, c, h, w) = dims4(input);
    let (co, _, kh, kw) = dims4(kernel);
    let (_, _, ho, wo) = dims4(grad_out);

    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();

    let mut gi = if need_input {
        Some(vec![E::zero(); n * c * h * w])
    } else {
        None
    };
    let mut gk = if need_params {
        Some(vec![E::zero(); co * c * kh * kw])
    } else {
        None
    };
    let mut gb = if need_params {
        Some(vec![E::zero(); co])
    } else {
        None
    };

    for ni in 0..n {
        for oc in 0..co {
            let go_plane = &go[(ni * co + oc) * ho * wo..(ni * co + oc + 1) * ho * wo];
            if let Some(gb) = gb.as_mut() {
                gb[oc] = gb[oc] + go_plane.iter().fold(E::zero(), |a, &g| a + g);
            }
            for ic in 0..c {
                let x_plane = &x[(ni * c + ic) * h * w..(ni * c + ic + 1) * h * w];
                let k_plane = &k[(oc * c + ic) * kh * kw..(oc * c + ic + 1) * kh * kw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let tap = k_plane[ky * kw + kx];
                        let mut tap_grad = E::zero();
                        for oy in 0..ho {
                            let iy = (oy * geo.stride + ky * geo.dilation) as isize
                                - geo.padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            let row = iy as usize * w;
                            let go_row = &go_plane[oy * wo..(oy + 1) * wo];
                            for ox in 0..wo {
                                let ix = (ox * geo.stride + kx * geo.dilation) as isize
                                    - geo.padding as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                let g = go_row[ox];
                                if let Some(gi) = gi.as_mut() {
                                    let idx = (ni * c + ic) * h * w + row + ix as usize;
                                    gi[idx] = gi[idx] + tap * g;
                                }
                                tap_grad = tap_grad + g * x_plane[row + ix as usize];
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            let idx = (oc * c + ic) * kh * kw + ky * kw + kx;
                            gk[idx] = gk[idx] + tap_grad;
                        }
                    }
                }
            }
        }
    }

    (
        gi.map(|v| Tensor::from_vec(&[n, c, h, w], v).expect("input grad shape")),
        gk.map(|v| Tensor::from_vec(&[co, c, kh, kw], v).expect("kernel grad shape")),
        gb.map(|v| Tensor::from_vec(&[co], v).expect("bias grad shape")),
    )
}

fn dims4<E: Scalar>(t: &Tensor<E>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}
