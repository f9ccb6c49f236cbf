//! Bottleneck attention module.
//!
//! From an activation F of shape `[N,C,H,W]` the module computes a
//! per-position attention map M(F) = sigmoid(Mc(F) + Ms(F)) in (0,1) and
//! the refined activation F + F⊙M(F). The channel branch Mc pools
//! spatially and runs a two-layer bottleneck MLP; the spatial branch Ms
//! reduces channels 1×1, applies two dilated 3×3 convolutions, and
//! projects to a single channel. The two are combined by broadcasting.
//! There is no batch normalization.

use rand::Rng;

use crate::conv::Conv2dGeometry;
use crate::init::orthogonal;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError, TensorResult};

#[derive(Debug, Clone, PartialEq)]
pub struct BamParams<E: Scalar = f32> {
    pub channels: usize,
    pub reduction_ratio: usize,
    pub dilation: usize,
    /// Channel branch: dense C -> C/r, relu, dense C/r -> C.
    pub ch_w1: Tensor<E>,
    pub ch_b1: Tensor<E>,
    pub ch_w2: Tensor<E>,
    pub ch_b2: Tensor<E>,
    /// Spatial branch: 1x1 conv C -> C/r, two dilated 3x3 convs, 1x1 conv -> 1.
    pub sp_reduce_w: Tensor<E>,
    pub sp_reduce_b: Tensor<E>,
    pub sp_conv1_w: Tensor<E>,
    pub sp_conv1_b: Tensor<E>,
    pub sp_conv2_w: Tensor<E>,
    pub sp_conv2_b: Tensor<E>,
    pub sp_out_w: Tensor<E>,
    pub sp_out_b: Tensor<E>,
}

fn check_geometry(channels: usize, r: usize, dilation: usize) -> TensorResult<usize> {
    if r == 0 || dilation == 0 || channels == 0 {
        return Err(TensorError::InvalidArgument {
            context: "bam",
            message: format!(
                "channels {channels}, reduction {r}, dilation {dilation} must be positive"
            ),
        });
    }
    if channels % r != 0 {
        return Err(TensorError::InvalidArgument {
            context: "bam",
            message: format!("channels {channels} not divisible by reduction ratio {r}"),
        });
    }
    Ok(channels / r)
}

impl<E: Scalar> BamParams<E> {
    pub fn zeros(channels: usize, reduction_ratio: usize, dilation: usize) -> TensorResult<Self> {
        let cr = check_geometry(channels, reduction_ratio, dilation)?;
        let c = channels;
        Ok(Self {
            channels: c,
            reduction_ratio,
            dilation,
            ch_w1: Tensor::zeros(&[cr, c]),
            ch_b1: Tensor::zeros(&[cr]),
            ch_w2: Tensor::zeros(&[c, cr]),
            ch_b2: Tensor::zeros(&[c]),
            sp_reduce_w: Tensor::zeros(&[cr, c, 1, 1]),
            sp_reduce_b: Tensor::zeros(&[cr]),
            sp_conv1_w: Tensor::zeros(&[cr, cr, 3, 3]),
            sp_conv1_b: Tensor::zeros(&[cr]),
            sp_conv2_w: Tensor::zeros(&[cr, cr, 3, 3]),
            sp_conv2_b: Tensor::zeros(&[cr]),
            sp_out_w: Tensor::zeros(&[1, cr, 1, 1]),
            sp_out_b: Tensor::zeros(&[1]),
        })
    }

    /// Initialization that starts the attention map as a sharp, sparse
    /// saliency detector instead of a flat 0.5 plateau.
    ///
    /// The spatial branch begins as an exact threshold on the local
    /// channel-mean activation: the 1x1 reduction averages channels,
    /// the two 3x3 convolutions start as identities, and the output
    /// projection applies a high gain with a negative bias. Positions
    /// whose mean activation clears the threshold open towards 1 while
    /// the background stays pinned near 0. The channel branch starts
    /// with a small-gain output layer so it barely perturbs that
    /// structure. Starting at the sigmoid's flat 0.5 plateau instead
    /// leaves attention maps near-uniform for the whole of a short
    /// training run: the gradient through the sigmoid is too weak for
    /// a small network to ever polarize them, and a uniform map makes
    /// masking a no-op. The residual form F + F⊙M keeps the module
    /// well-behaved even where the map saturates.
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        reduction_ratio: usize,
        dilation: usize,
        rng: &mut R,
    ) -> TensorResult<Self> {
        let mut p = Self::zeros(channels, reduction_ratio, dilation)?;
        let cr = channels / reduction_ratio;
        let sqrt2 = std::f64::consts::SQRT_2;
        let gain = 12.0;
        let threshold = 3.0;

        p.ch_w1 = orthogonal(p.ch_w1.shape(), sqrt2, rng);
        p.ch_w2 = orthogonal(p.ch_w2.shape(), 0.1, rng);

        p.sp_reduce_w = Tensor::full(&[cr, channels, 1, 1], E::from_f64(1.0 / channels as f64));
        for w in [&mut p.sp_conv1_w, &mut p.sp_conv2_w] {
            for j in 0..cr {
                // center tap of the j -> j kernel
                w.data_mut()[j * (cr * 9) + j * 9 + 4] = E::from_f64(1.0);
            }
        }
        p.sp_out_w = Tensor::full(&[1, cr, 1, 1], E::from_f64(gain / cr as f64));
        p.sp_out_b = Tensor::full(&[1], E::from_f64(-threshold));
        Ok(p)
    }

    /// Closed-form parameter total for a module on `channels` channels.
    pub fn param_count(channels: usize, reduction_ratio: usize) -> usize {
        let c = channels;
        let cr = c / reduction_ratio;
        let channel = (c + 1) * cr + (cr + 1) * c;
        let spatial = (c + 1) * cr + 2 * ((9 * cr + 1) * cr) + (cr + 1);
        channel + spatial
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    pub fn visit(&self, f: &mut impl FnMut(&'static str, &Tensor<E>)) {
        f("channel_fc1.weight", &self.ch_w1);
        f("channel_fc1.bias", &self.ch_b1);
        f("channel_fc2.weight", &self.ch_w2);
        f("channel_fc2.bias", &self.ch_b2);
        f("spatial_reduce.weight", &self.sp_reduce_w);
        f("spatial_reduce.bias", &self.sp_reduce_b);
        f("spatial_conv1.weight", &self.sp_conv1_w);
        f("spatial_conv1.bias", &self.sp_conv1_b);
        f("spatial_conv2.weight", &self.sp_conv2_w);
        f("spatial_conv2.bias", &self.sp_conv2_b);
        f("spatial_out.weight", &self.sp_out_w);
        f("spatial_out.bias", &self.sp_out_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&'static str, &mut Tensor<E>)) {
        f("channel_fc1.weight", &mut self.ch_w1);
        f("channel_fc1.bias", &mut self.ch_b1);
        f("channel_fc2.weight", &mut self.ch_w2);
        f("channel_fc2.bias", &mut self.ch_b2);
        f("spatial_reduce.weight", &mut self.sp_reduce_w);
        f("spatial_reduce.bias", &mut self.sp_reduce_b);
        f("spatial_conv1.weight", &mut self.sp_conv1_w);
        f("spatial_conv1.bias", &mut self.sp_conv1_b);
        f("spatial_conv2.weight", &mut self.sp_conv2_w);
        f("spatial_conv2.bias", &mut self.sp_conv2_b);
        f("spatial_out.weight", &mut self.sp_out_w);
        f("spatial_out.bias", &mut self.sp_out_b);
    }

    /// Mutable references to all parameters, in visit order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<E>> {
        vec![
            &mut self.ch_w1,
            &mut self.ch_b1,
            &mut self.ch_w2,
            &mut self.ch_b2,
            &mut self.sp_reduce_w,
            &mut self.sp_reduce_b,
            &mut self.sp_conv1_w,
            &mut self.sp_conv1_b,
            &mut self.sp_conv2_w,
            &mut self.sp_conv2_b,
            &mut self.sp_out_w,
            &mut self.sp_out_b,
        ]
    }
}

/// Tape handles for one module's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BamVars {
    pub dilation: usize,
    pub ch_w1: Var,
    pub ch_b1: Var,
    pub ch_w2: Var,
    pub ch_b2: Var,
    pub sp_reduce_w: Var,
    pub sp_reduce_b: Var,
    pub sp_conv1_w: Var,
    pub sp_conv1_b: Var,
    pub sp_conv2_w: Var,
    pub sp_conv2_b: Var,
    pub sp_out_w: Var,
    pub sp_out_b: Var,
}

pub fn bind<E: Scalar>(tape: &Tape<E>, p: &BamParams<E>, trainable: bool) -> BamVars {
    let leaf = |t: &Tensor<E>| tape.leaf(t.clone(), trainable);
    BamVars {
        dilation: p.dilation,
        ch_w1: leaf(&p.ch_w1),
        ch_b1: leaf(&p.ch_b1),
        ch_w2: leaf(&p.ch_w2),
        ch_b2: leaf(&p.ch_b2),
        sp_reduce_w: leaf(&p.sp_reduce_w),
        sp_reduce_b: leaf(&p.sp_reduce_b),
        sp_conv1_w: leaf(&p.sp_conv1_w),
        sp_conv1_b: leaf(&p.sp_conv1_b),
        sp_conv2_w: leaf(&p.sp_conv2_w),
        sp_conv2_b: leaf(&p.sp_conv2_b),
        sp_out_w: leaf(&p.sp_out_w),
        sp_out_b: leaf(&p.sp_out_b),
    }
}

/// Attention map M(F) = sigmoid(Mc + Ms), every entry strictly in (0,1).
pub fn attention<E: Scalar>(tape: &Tape<E>, f: Var, v: &BamVars) -> TensorResult<Var> {
    let shape = tape.shape(f);
    if shape.len() != 4 {
        return Err(TensorError::InvalidArgument {
            context: "bam",
            message: format!("expected rank-4 activation, got {shape:?}"),
        });
    }
    let (n, c) = (shape[0], shape[1]);

    // channel branch, broadcast over the spatial axes
    let pooled = tape.global_avg_pool(f)?;
    let h1 = tape.dense(pooled, v.ch_w1, v.ch_b1)?;
    let h1 = tape.relu(h1);
    let mc = tape.dense(h1, v.ch_w2, v.ch_b2)?;
    let mc = tape.reshape(mc, &[n, c, 1, 1])?;

    // spatial branch, broadcast over channels
    let point = Conv2dGeometry::new(1, 0, 1)?;
    let dilated = Conv2dGeometry::new(1, v.dilation, v.dilation)?;
    let s = tape.conv2d(f, v.sp_reduce_w, v.sp_reduce_b, point)?;
    let s = tape.relu(s);
    let s = tape.conv2d(s, v.sp_conv1_w, v.sp_conv1_b, dilated)?;
    let s = tape.relu(s);
    let s = tape.conv2d(s, v.sp_conv2_w, v.sp_conv2_b, dilated)?;
    let s = tape.relu(s);
    let ms = tape.conv2d(s, v.sp_out_w, v.sp_out_b, point)?;

    let combined = tape.add(mc, ms)?;
    Ok(tape.sigmoid(combined))
}

/// Residual refinement F + F⊙M(F). Returns (output, attention map).
pub fn forward<E: Scalar>(tape: &Tape<E>, f: Var, v: &BamVars) -> TensorResult<(Var, Var)> {
    let m = attention(tape, f, v)?;
    let masked = tape.mul(f, m)?;
    let out = tape.add(f, masked)?;
    Ok((out, m))
}

/// Fraction of attention entries below `low` or above `high`.
pub fn attention_polarization<E: Scalar>(m: &Tensor<E>, low: f64, high: f64) -> TensorResult<f64> {
    if low >= high {
        return Err(TensorError::InvalidArgument {
            context: "attention_polarization",
            message: format!("low {low} must be below high {high}"),
        });
    }
    if m.numel() == 0 {
        return Err(TensorError::InvalidArgument {
            context: "attention_polarization",
            message: "empty attention map".to_string(),
        });
    }
    let polarized = m
        .data()
        .iter()
        .filter(|&&v| {
            let v = v.to_f64();
            v < low || v > high
        })
        .count();
    Ok(polarized as f64 / m.numel() as f64)
}
