//! Convolutional policy network with an optional attention module and
//! named tap points.
//!
//! Layers are numbered 1..=N. The default topology is three convolutions
//! (each followed by relu), optionally an attention module between two of
//! them, a flattening dense layer, and a head layer producing action
//! logits plus an optional state value. `forward_prefix` runs any
//! contiguous layer range, which is what the recovery path splices on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bam::{self, BamParams, BamVars};
use crate::conv::Conv2dGeometry;
use crate::init::orthogonal;
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Stacked preprocessed frames, shape `[k,H,W]`, values in [0,1].
pub type Observation<E = f32> = Tensor<E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Stacked frame count; doubles as the input channel count.
    pub input_frames: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub convs: Vec<ConvSpec>,
    /// Attention module position: after this 1-based conv layer, strictly
    /// between two convolutions. None for the plain baseline.
    pub bam_after_conv: Option<usize>,
    pub bam_reduction: usize,
    pub bam_dilation: usize,
    /// Width of the dense layer after flattening; 0 omits the layer.
    pub hidden: usize,
    /// Action count; 0 omits the head layer (counting-only configs).
    pub actions: usize,
    pub value_head: bool,
}

impl ArchitectureConfig {
    /// Desk-scale default: 4 stacked 32x32 frames, three convolutions,
    /// a 128-wide dense layer, and policy/value heads.
    pub fn nature_lite(actions: usize, with_bam: bool) -> Self {
        Self {
            input_frames: 4,
            input_height: 32,
            input_width: 32,
            convs: vec![
                ConvSpec {
                    out_channels: 8,
                    kernel: 5,
                    stride: 2,
                    padding: 2,
                },
                ConvSpec {
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                ConvSpec {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
            ],
            bam_after_conv: with_bam.then_some(1),
            bam_reduction: 4,
            bam_dilation: 2,
            hidden: 128,
            actions,
            value_head: true,
        }
    }

    pub fn validate(&self) -> TensorResult<()> {
        if self.input_frames == 0 || self.input_height == 0 || self.input_width == 0 {
            return Err(TensorError::InvalidArgument {
                context: "architecture",
                message: format!(
                    "input {}x{}x{} must be positive",
                    self.input_frames, self.input_height, self.input_width
                ),
            });
        }
        let mut h = self.input_height;
        let mut w = self.input_width;
        for (i, conv) in self.convs.iter().enumerate() {
            if conv.out_channels == 0 || conv.kernel == 0 {
                return Err(TensorError::InvalidArgument {
                    context: "architecture",
                    message: format!("conv{} has zero extent", i + 1),
                });
            }
            let geo = Conv2dGeometry::new(conv.stride, conv.padding, 1)?;
            h = geo.out_dim(h, conv.kernel)?;
            w = geo.out_dim(w, conv.kernel)?;
        }
        if let Some(k) = self.bam_after_conv {
            if k == 0 || k >= self.convs.len() {
                return Err(TensorError::InvalidArgument {
                    context: "architecture",
                    message: format!(
                        "attention position {k} must lie strictly between two of the {} conv layers",
                        self.convs.len()
                    ),
                });
            }
            let c = self.convs[k - 1].out_channels;
            if self.bam_reduction == 0 || c % self.bam_reduction != 0 {
                return Err(TensorError::InvalidArgument {
                    context: "architecture",
                    message: format!(
                        "conv{} channels {c} not divisible by attention reduction {}",
                        k, self.bam_reduction
                    ),
                });
            }
            if self.bam_dilation == 0 {
                return Err(TensorError::InvalidArgument {
                    context: "architecture",
                    message: "attention dilation must be positive".to_string(),
                });
            }
        }
        Ok(())
    }

    /// Channel/height/width after the conv stack (identity when empty).
    pub fn conv_output_shape(&self) -> TensorResult<(usize, usize, usize)> {
        self.validate()?;
        let mut c = self.input_frames;
        let mut h = self.input_height;
        let mut w = self.input_width;
        for conv in &self.convs {
            let geo = Conv2dGeometry::new(conv.stride, conv.padding, 1)?;
            h = geo.out_dim(h, conv.kernel)?;
            w = geo.out_dim(w, conv.kernel)?;
            c = conv.out_channels;
        }
        Ok((c, h, w))
    }

    /// Total layer count N as used by `forward_prefix`.
    pub fn layer_count(&self) -> usize {
        self.convs.len()
            + usize::from(self.bam_after_conv.is_some())
            + usize::from(self.hidden > 0)
            + usize::from(self.actions > 0 || self.value_head)
    }

    /// 1-based index of the attention layer, when present.
    pub fn bam_layer_index(&self) -> Option<usize> {
        self.bam_after_conv.map(|k| k + 1)
    }

    /// Closed-form parameter total: conv layers count
    /// (kh·kw·Cin+1)·Cout, dense layers (Din+1)·Dout, plus the attention
    /// branches when present.
    pub fn count_parameters(&self) -> TensorResult<usize> {
        self.validate()?;
        let mut total = 0usize;
        let mut c_in = self.input_frames;
        for (i, conv) in self.convs.iter().enumerate() {
            total += (conv.kernel * conv.kernel * c_in + 1) * conv.out_channels;
            if self.bam_after_conv == Some(i + 1) {
                total += BamParams::<f32>::param_count(conv.out_channels, self.bam_reduction);
            }
            c_in = conv.out_channels;
        }
        let (c, h, w) = self.conv_output_shape()?;
        let flat = c * h * w;
        let mut head_in = flat;
        if self.hidden > 0 {
            total += (flat + 1) * self.hidden;
            head_in = self.hidden;
        }
        if self.actions > 0 {
            total += (head_in + 1) * self.actions;
        }
        if self.value_head {
            total += head_in + 1;
        }
        Ok(total)
    }
}

/// Categorical distribution over actions, derived from logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution<E: Scalar = f32> {
    pub logits: Vec<E>,
    pub probs: Vec<E>,
}

impl<E: Scalar> ActionDistribution<E> {
    pub fn from_logits(logits: &[E]) -> Self {
        let t = Tensor::from_vec(&[1, logits.len()], logits.to_vec()).expect("logits row");
        let probs = ops::softmax_axis(&t, 1).expect("softmax over actions");
        Self {
            logits: logits.to_vec(),
            probs: probs.data().to_vec(),
        }
    }

    pub fn n_actions(&self) -> usize {
        self.probs.len()
    }

    /// Most probable action; ties break to the lowest index.
    pub fn argmax(&self) -> usize {
        ops::argmax(&self.probs)
    }

    /// Two most probable actions; ties break to the lowest index.
    pub fn top2(&self) -> [usize; 2] {
        ops::top2(&self.probs)
    }

    /// Inverse-CDF categorical sample.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = E::sample_uniform(rng);
        let mut acc = E::zero();
        for (i, &p) in self.probs.iter().enumerate() {
            acc = acc + p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }

    pub fn log_prob(&self, action: usize) -> E {
        self.probs[action].ln()
    }

    pub fn entropy(&self) -> E {
        self.probs.iter().fold(E::zero(), |acc, &p| {
            if p > E::zero() {
                acc - p * p.ln()
            } else {
                acc
            }
        })
    }
}

#[derive(Debug, Clone)]
pub enum Layer<E: Scalar = f32> {
    Conv {
        w: Tensor<E>,
        b: Tensor<E>,
        geo: Conv2dGeometry,
    },
    Bam(BamParams<E>),
    Hidden {
        w: Tensor<E>,
        b: Tensor<E>,
    },
    Heads {
        pw: Tensor<E>,
        pb: Tensor<E>,
        value: Option<(Tensor<E>, Tensor<E>)>,
    },
}

#[derive(Debug, Clone)]
pub struct PolicyNetwork<E: Scalar = f32> {
    config: ArchitectureConfig,
    layers: Vec<Layer<E>>,
    /// Unbatched input shape of each layer, indexed 0-based (layer i+1).
    input_shapes: Vec<Vec<usize>>,
}

impl<E: Scalar> PolicyNetwork<E> {
    /// Network with all parameters zero (uniform policy, zero value).
    pub fn zeros(config: ArchitectureConfig) -> TensorResult<Self> {
        Self::build(config, None::<&mut rand::rngs::ThreadRng>)
    }

    /// Seeded init: orthogonal conv/dense weights with gain √2, gain-1
    /// value head, and a zero policy head so the initial policy is
    /// uniform over actions.
    pub fn init<R: Rng + ?Sized>(config: ArchitectureConfig, rng: &mut R) -> TensorResult<Self> {
        Self::build(config, Some(rng))
    }

    fn build<R: Rng + ?Sized>(
        config: ArchitectureConfig,
        mut rng: Option<&mut R>,
    ) -> TensorResult<Self> {
        config.validate()?;
        if config.hidden == 0 || config.actions == 0 {
            return Err(TensorError::InvalidArgument {
                context: "policy network",
                message: format!(
                    "a runnable network needs a hidden layer and actions, got hidden {} actions {}",
                    config.hidden, config.actions
                ),
            });
        }
        let sqrt2 = std::f64::consts::SQRT_2;
        let mut layers = Vec::new();
        let mut input_shapes = Vec::new();

        let mut c = config.input_frames;
        let mut h = config.input_height;
        let mut w = config.input_width;
        for (i, conv) in config.convs.iter().enumerate() {
            input_shapes.push(vec![c, h, w]);
            let w_shape = [conv.out_channels, c, conv.kernel, conv.kernel];
            let weights = match rng.as_deref_mut() {
                Some(rng) => orthogonal(&w_shape, sqrt2, rng),
                None => Tensor::zeros(&w_shape),
            };
            let geo = Conv2dGeometry::new(conv.stride, conv.padding, 1)?;
            layers.push(Layer::Conv {
                w: weights,
                b: Tensor::zeros(&[conv.out_channels]),
                geo,
            });
            h = geo.out_dim(h, conv.kernel)?;
            w = geo.out_dim(w, conv.kernel)?;
            c = conv.out_channels;
            if config.bam_after_conv == Some(i + 1) {
                input_shapes.push(vec![c, h, w]);
                let params = match rng.as_deref_mut() {
                    Some(rng) => {
                        BamParams::init(c, config.bam_reduction, config.bam_dilation, rng)?
                    }
                    None => BamParams::zeros(c, config.bam_reduction, config.bam_dilation)?,
                };
                layers.push(Layer::Bam(params));
            }
        }

        let flat = c * h * w;
        input_shapes.push(vec![c, h, w]);
        let hidden_w = match rng.as_deref_mut() {
            Some(rng) => orthogonal(&[config.hidden, flat], sqrt2, rng),
            None => Tensor::zeros(&[config.hidden, flat]),
        };
        layers.push(Layer::Hidden {
            w: hidden_w,
            b: Tensor::zeros(&[config.hidden]),
        });

        input_shapes.push(vec![config.hidden]);
        let value = config.value_head.then(|| {
            let vw = match rng.as_deref_mut() {
                Some(rng) => orthogonal(&[1, config.hidden], 1.0, rng),
                None => Tensor::zeros(&[1, config.hidden]),
            };
            (vw, Tensor::zeros(&[1]))
        });
        layers.push(Layer::Heads {
            // zero policy head: fresh nets act uniformly
            pw: Tensor::zeros(&[config.actions, config.hidden]),
            pb: Tensor::zeros(&[config.actions]),
            value,
        });

        Ok(Self {
            config,
            layers,
            input_shapes,
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn bam_layer_index(&self) -> Option<usize> {
        self.config.bam_layer_index()
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    /// Walk all parameters in a fixed order with stable names.
    pub fn visit_params(&self, f: &mut impl FnMut(String, &Tensor<E>)) {
        let mut conv_idx = 0;
        for layer in &self.layers {
            match layer {
                Layer::Conv { w, b, .. } => {
                    conv_idx += 1;
                    f(format!("conv{conv_idx}.weight"), w);
                    f(format!("conv{conv_idx}.bias"), b);
                }
                Layer::Bam(p) => p.visit(&mut |name, t| f(format!("bam.{name}"), t)),
                Layer::Hidden { w, b } => {
                    f("hidden.weight".to_string(), w);
                    f("hidden.bias".to_string(), b);
                }
                Layer::Heads { pw, pb, value } => {
                    f("policy_head.weight".to_string(), pw);
                    f("policy_head.bias".to_string(), pb);
                    if let Some((vw, vb)) = value {
                        f("value_head.weight".to_string(), vw);
                        f("value_head.bias".to_string(), vb);
                    }
                }
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<E>)) {
        let mut conv_idx = 0;
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { w, b, .. } => {
                    conv_idx += 1;
                    f(format!("conv{conv_idx}.weight"), w);
                    f(format!("conv{conv_idx}.bias"), b);
                }
                Layer::Bam(p) => p.visit_mut(&mut |name, t| f(format!("bam.{name}"), t)),
                Layer::Hidden { w, b } => {
                    f("hidden.weight".to_string(), w);
                    f("hidden.bias".to_string(), b);
                }
                Layer::Heads { pw, pb, value } => {
                    f("policy_head.weight".to_string(), pw);
                    f("policy_head.bias".to_string(), pb);
                    if let Some((vw, vb)) = value {
                        f("value_head.weight".to_string(), vw);
                        f("value_head.bias".to_string(), vb);
                    }
                }
            }
        }
    }

    /// Mutable references to all parameters, in visit order (the same
    /// order `BoundNet::param_vars` reports).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<E>> {
        let mut params = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { w, b, .. } | Layer::Hidden { w, b } => {
                    params.push(w);
                    params.push(b);
                }
                Layer::Bam(p) => params.extend(p.params_mut()),
                Layer::Heads { pw, pb, value } => {
                    params.push(pw);
                    params.push(pb);
                    if let Some((vw, vb)) = value {
                        params.push(vw);
                        params.push(vb);
                    }
                }
            }
        }
        params
    }

    /// Record the parameters on a tape, trainable or frozen.
    pub fn bind(&self, tape: &Tape<E>, trainable: bool) -> BoundNet {
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Conv { w, b, geo } => BoundLayer::Conv {
                    w: tape.leaf(w.clone(), trainable),
                    b: tape.leaf(b.clone(), trainable),
                    geo: *geo,
                },
                Layer::Bam(p) => BoundLayer::Bam(bam::bind(tape, p, trainable)),
                Layer::Hidden { w, b } => BoundLayer::Hidden {
                    w: tape.leaf(w.clone(), trainable),
                    b: tape.leaf(b.clone(), trainable),
                },
                Layer::Heads { pw, pb, value } => BoundLayer::Heads {
                    pw: tape.leaf(pw.clone(), trainable),
                    pb: tape.leaf(pb.clone(), trainable),
                    value: value
                        .as_ref()
                        .map(|(vw, vb)| (tape.leaf(vw.clone(), trainable), tape.leaf(vb.clone(), trainable))),
                },
            })
            .collect();
        BoundNet {
            layers,
            input_shapes: self.input_shapes.clone(),
        }
    }

    /// Accept `[shape...]` or `[N, shape...]` input for a layer and return
    /// it with an explicit batch axis.
    pub fn batchify(&self, input: &Tensor<E>, layer: usize) -> TensorResult<Tensor<E>> {
        let expected = self.layer_input_shape(layer)?;
        if input.shape() == expected.as_slice() {
            let mut batched = vec![1];
            batched.extend_from_slice(&expected);
            return input.reshape(&batched);
        }
        if input.rank() == expected.len() + 1 && input.shape()[1..] == expected[..] {
            return Ok(input.clone());
        }
        Err(TensorError::InvalidArgument {
            context: "forward input",
            message: format!(
                "layer {layer} expects {expected:?} (optionally batched), got {:?}",
                input.shape()
            ),
        })
    }

    /// Unbatched input shape of 1-based layer `layer`.
    pub fn layer_input_shape(&self, layer: usize) -> TensorResult<Vec<usize>> {
        if layer == 0 || layer > self.layers.len() {
            return Err(TensorError::InvalidArgument {
                context: "forward_prefix",
                message: format!(
                    "layer index {layer} out of range 1..={}",
                    self.layers.len()
                ),
            });
        }
        Ok(self.input_shapes[layer - 1].clone())
    }

    /// Full forward pass on one observation.
    pub fn forward(&self, obs: &Observation<E>) -> TensorResult<(ActionDistribution<E>, E)> {
        let (dists, values) = self.forward_batch(obs)?;
        Ok((dists.into_iter().next().expect("one row"), values[0]))
    }

    /// Full forward pass on `[N,k,H,W]` (or a single `[k,H,W]`) input.
    pub fn forward_batch(
        &self,
        obs: &Tensor<E>,
    ) -> TensorResult<(Vec<ActionDistribution<E>>, Vec<E>)> {
        if !obs.all_finite() {
            return Err(TensorError::NonFinite {
                context: "forward input",
            });
        }
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(self.batchify(obs, 1)?);
        let out = bound.run(&tape, x, 1, self.num_layers())?;
        let logits = tape.value(out.out);
        let n = logits.shape()[0];
        let a = logits.shape()[1];
        let probs = ops::softmax_axis(&logits, 1)?;
        let dists = (0..n)
            .map(|i| ActionDistribution {
                logits: logits.data()[i * a..(i + 1) * a].to_vec(),
                probs: probs.data()[i * a..(i + 1) * a].to_vec(),
            })
            .collect();
        let values = match out.value {
            Some(v) => tape.value(v).data().to_vec(),
            None => vec![E::zero(); n],
        };
        Ok((dists, values))
    }

    /// Run exactly layers `[from..=to]` on `input` (the tensor feeding
    /// layer `from`). `forward_prefix(s, 1, N)` equals the full forward
    /// pass up to logits; splitting at any boundary and feeding the first
    /// half's output back in reproduces it bit-exactly.
    pub fn forward_prefix(
        &self,
        input: &Tensor<E>,
        from: usize,
        to: usize,
    ) -> TensorResult<Tensor<E>> {
        if from == 0 || to > self.layers.len() || from > to {
            return Err(TensorError::InvalidArgument {
                context: "forward_prefix",
                message: format!(
                    "range {from}..={to} invalid for {} layers",
                    self.layers.len()
                ),
            });
        }
        if !input.all_finite() {
            return Err(TensorError::NonFinite {
                context: "forward input",
            });
        }
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(self.batchify(input, from)?);
        let out = bound.run(&tape, x, from, to)?;
        Ok(tape.value(out.out))
    }
}

/// Intermediate tap points recorded when a forward range crosses the
/// attention layer.
#[derive(Debug, Clone, Copy)]
pub struct BamTrace {
    /// Input to the attention layer (the pre-attention activation).
    pub pre: Var,
    /// The attention map M in (0,1).
    pub attention: Var,
    /// The refined activation F + F⊙M.
    pub out: Var,
}

pub struct RangeOutput {
    /// Output of the last layer run (logits when the range ends at N).
    pub out: Var,
    /// State value, present when the range ends at the head layer and a
    /// value head exists.
    pub value: Option<Var>,
    pub bam: Option<BamTrace>,
}

enum BoundLayer {
    Conv {
        w: Var,
        b: Var,
        geo: Conv2dGeometry,
    },
    Bam(BamVars),
    Hidden {
        w: Var,
        b: Var,
    },
    Heads {
        pw: Var,
        pb: Var,
        value: Option<(Var, Var)>,
    },
}

/// A network's parameters registered on one tape.
pub struct BoundNet {
    layers: Vec<BoundLayer>,
    input_shapes: Vec<Vec<usize>>,
}

impl BoundNet {
    /// All parameter handles in visit order.
    pub fn param_vars(&self) -> Vec<Var> {
        let mut vars = Vec::new();
        for layer in &self.layers {
            match layer {
                BoundLayer::Conv { w, b, .. } | BoundLayer::Hidden { w, b } => {
                    vars.push(*w);
                    vars.push(*b);
                }
                BoundLayer::Bam(v) => {
                    vars.extend([
                        v.ch_w1,
                        v.ch_b1,
                        v.ch_w2,
                        v.ch_b2,
                        v.sp_reduce_w,
                        v.sp_reduce_b,
                        v.sp_conv1_w,
                        v.sp_conv1_b,
                        v.sp_conv2_w,
                        v.sp_conv2_b,
                        v.sp_out_w,
                        v.sp_out_b,
                    ]);
                }
                BoundLayer::Heads { pw, pb, value } => {
                    vars.push(*pw);
                    vars.push(*pb);
                    if let Some((vw, vb)) = value {
                        vars.push(*vw);
                        vars.push(*vb);
                    }
                }
            }
        }
        vars
    }

    /// Attention layer index and parameter handles, when present.
    pub fn bam(&self) -> Option<(usize, &BamVars)> {
        self.layers.iter().enumerate().find_map(|(i, l)| match l {
            BoundLayer::Bam(v) => Some((i + 1, v)),
            _ => None,
        })
    }

    /// Run layers `[from..=to]` (1-based) on the already-batched `x`.
    pub fn run<E: Scalar>(
        &self,
        tape: &Tape<E>,
        x: Var,
        from: usize,
        to: usize,
    ) -> TensorResult<RangeOutput> {
        if from == 0 || to > self.layers.len() || from > to {
            return Err(TensorError::InvalidArgument {
                context: "forward_prefix",
                message: format!("range {from}..={to} invalid for {} layers", self.layers.len()),
            });
        }
        let mut cur = x;
        let mut value = None;
        let mut bam_trace = None;
        for idx in from..=to {
            let expected = &self.input_shapes[idx - 1];
            let got = tape.shape(cur);
            if got.len() != expected.len() + 1 || got[1..] != expected[..] {
                return Err(TensorError::InvalidArgument {
                    context: "forward input",
                    message: format!("layer {idx} expects batched {expected:?}, got {got:?}"),
                });
            }
            cur = match &self.layers[idx - 1] {
                BoundLayer::Conv { w, b, geo } => {
                    let y = tape.conv2d(cur, *w, *b, *geo)?;
                    tape.relu(y)
                }
                BoundLayer::Bam(vars) => {
                    let (out, attention) = bam::forward(tape, cur, vars)?;
                    bam_trace = Some(BamTrace {
                        pre: cur,
                        attention,
                        out,
                    });
                    out
                }
                BoundLayer::Hidden { w, b } => {
                    let n = tape.shape(cur)[0];
                    let flat: usize = tape.shape(cur)[1..].iter().product();
                    let x2 = tape.reshape(cur, &[n, flat])?;
                    let y = tape.dense(x2, *w, *b)?;
                    tape.relu(y)
                }
                BoundLayer::Heads { pw, pb, value: vh } => {
                    let logits = tape.dense(cur, *pw, *pb)?;
                    if let Some((vw, vb)) = vh {
                        let v = tape.dense(cur, *vw, *vb)?;
                        let n = tape.shape(v)[0];
                        value = Some(tape.reshape(v, &[n])?);
                    }
                    logits
                }
            };
        }
        Ok(RangeOutput {
            out: cur,
            value,
            bam: bam_trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ArchitectureConfig {
        ArchitectureConfig {
            input_frames: 1,
            input_height: 3,
            input_width: 3,
            convs: vec![ConvSpec {
                out_channels: 2,
                kernel: 2,
                stride: 1,
                padding: 0,
            }],
            bam_after_conv: None,
            bam_reduction: 1,
            bam_dilation: 1,
            hidden: 4,
            actions: 3,
            value_head: true,
        }
    }

    #[test]
    fn count_parameters_hand_examples() {
        // lone 3x3 conv, 2 -> 4 channels
        let conv_only = ArchitectureConfig {
            input_frames: 2,
            input_height: 4,
            input_width: 4,
            convs: vec![ConvSpec {
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 0,
            }],
            bam_after_conv: None,
            bam_reduction: 1,
            bam_dilation: 1,
            hidden: 0,
            actions: 0,
            value_head: false,
        };
        assert_eq!(conv_only.count_parameters().unwrap(), 76);

        // lone dense layer, 10 -> 5
        let dense_only = ArchitectureConfig {
            input_frames: 10,
            input_height: 1,
            input_width: 1,
            convs: vec![],
            bam_after_conv: None,
            bam_reduction: 1,
            bam_dilation: 1,
            hidden: 5,
            actions: 0,
            value_head: false,
        };
        assert_eq!(dense_only.count_parameters().unwrap(), 55);
    }

    #[test]
    fn count_parameters_default_architectures() {
        // conv1 (5*5*4+1)*8 = 808, conv2 (3*3*8+1)*16 = 1168,
        // conv3 (3*3*16+1)*16 = 2320, hidden (16*8*8+1)*128 = 131200,
        // policy (128+1)*3 = 387, value 128+1 = 129
        let base = ArchitectureConfig::nature_lite(3, false);
        assert_eq!(base.count_parameters().unwrap(), 136_012);
        let bam = ArchitectureConfig::nature_lite(3, true);
        assert_eq!(bam.count_parameters().unwrap(), 136_151);
    }

    #[test]
    fn bam_delta_equals_branch_closed_form() {
        for actions in [2usize, 3, 4, 6] {
            let base = ArchitectureConfig::nature_lite(actions, false);
            let bam = ArchitectureConfig::nature_lite(actions, true);
            let delta = bam.count_parameters().unwrap() - base.count_parameters().unwrap();
            assert_eq!(delta, BamParams::<f32>::param_count(8, 4));
        }
    }

    #[test]
    fn count_matches_instantiated_tensors() {
        for with_bam in [false, true] {
            let config = ArchitectureConfig::nature_lite(3, with_bam);
            let net = PolicyNetwork::<f32>::zeros(config.clone()).unwrap();
            assert_eq!(net.n_params(), config.count_parameters().unwrap());
        }
    }

    #[test]
    fn bam_position_must_sit_between_convs() {
        let mut config = ArchitectureConfig::nature_lite(3, true);
        config.bam_after_conv = Some(3);
        assert!(config.validate().is_err());
        config.bam_after_conv = Some(0);
        assert!(config.validate().is_err());
        config.bam_after_conv = Some(2);
        assert!(config.validate().is_ok());
    }

    #[test]
    fn zero_net_is_uniform() {
        let net = PolicyNetwork::<f32>::zeros(ArchitectureConfig::nature_lite(3, true)).unwrap();
        let obs = Tensor::from_fn(&[4, 32, 32], |i| (i % 7) as f32 / 7.0);
        let (dist, value) = net.forward(&obs).unwrap();
        for &p in &dist.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
        assert_eq!(value, 0.0);
        let ln3 = (3.0f32).ln();
        assert!((dist.entropy() - ln3).abs() < 1e-5);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let net =
            PolicyNetwork::<f32>::init(ArchitectureConfig::nature_lite(3, true), &mut rng).unwrap();
        let obs = Tensor::from_fn(&[4, 32, 32], |i| ((i * 13) % 11) as f32 / 11.0);
        let (d1, v1) = net.forward(&obs).unwrap();
        let (d2, v2) = net.forward(&obs).unwrap();
        assert_eq!(d1.probs, d2.probs);
        assert_eq!(v1, v2);
    }

    #[test]
    fn forward_matches_straight_line_reference() {
        let mut net = PolicyNetwork::<f64>::zeros(tiny_config()).unwrap();
        let mut counter = 0usize;
        net.visit_params_mut(&mut |_, t| {
            let data = t.data_mut();
            for v in data.iter_mut() {
                counter += 1;
                *v = ((counter * 17 % 13) as f64 - 6.0) / 10.0;
            }
        });
        let obs = Tensor::from_fn(&[1, 3, 3], |i| (i as f64 + 1.0) / 10.0);
        let (dist, value) = net.forward(&obs).unwrap();

        // independent straight-line evaluation of the same math
        let mut params = Vec::new();
        net.visit_params(&mut |name, t| params.push((name, t.data().to_vec())));
        let lookup = |n: &str| -> Vec<f64> {
            params
                .iter()
                .find(|(name, _)| name == n)
                .map(|(_, v)| v.clone())
                .unwrap()
        };
        let (cw, cb) = (lookup("conv1.weight"), lookup("conv1.bias"));
        let x: Vec<f64> = obs.data().to_vec();
        let mut conv_out = vec![0.0f64; 2 * 2 * 2];
        for oc in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut acc = cb[oc];
                    for ky in 0..2 {
                        for kx in 0..2 {
                            acc += cw[oc * 4 + ky * 2 + kx] * x[(oy + ky) * 3 + (ox + kx)];
                        }
                    }
                    conv_out[oc * 4 + oy * 2 + ox] = acc.max(0.0);
                }
            }
        }
        let (hw, hb) = (lookup("hidden.weight"), lookup("hidden.bias"));
        let mut hidden = vec![0.0f64; 4];
        for o in 0..4 {
            let mut acc = hb[o];
            for i in 0..8 {
                acc += hw[o * 8 + i] * conv_out[i];
            }
            hidden[o] = acc.max(0.0);
        }
        let (pw, pb) = (lookup("policy_head.weight"), lookup("policy_head.bias"));
        let mut logits = vec![0.0f64; 3];
        for o in 0..3 {
            logits[o] = pb[o] + (0..4).map(|i| pw[o * 4 + i] * hidden[i]).sum::<f64>();
        }
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let (vw, vb) = (lookup("value_head.weight"), lookup("value_head.bias"));
        let ref_value = vb[0] + (0..4).map(|i| vw[i] * hidden[i]).sum::<f64>();

        for a in 0..3 {
            assert!((dist.probs[a] - exps[a] / z).abs() < 1e-12);
        }
        assert!((value - ref_value).abs() < 1e-12);
    }

    #[test]
    fn prefix_full_range_equals_forward_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net =
            PolicyNetwork::<f32>::init(ArchitectureConfig::nature_lite(3, true), &mut rng).unwrap();
        let obs = Tensor::from_fn(&[4, 32, 32], |i| ((i * 29) % 23) as f32 / 23.0);
        let logits = net.forward_prefix(&obs, 1, net.num_layers()).unwrap();
        let (dist, _) = net.forward(&obs).unwrap();
        assert_eq!(logits.data(), dist.logits.as_slice());
    }

    #[test]
    fn prefix_splices_bit_exactly_at_every_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let net =
            PolicyNetwork::<f32>::init(ArchitectureConfig::nature_lite(3, true), &mut rng).unwrap();
        let n = net.num_layers();
        let obs = Tensor::from_fn(&[4, 32, 32], |i| ((i * 7) % 19) as f32 / 19.0);
        let full = net.forward_prefix(&obs, 1, n).unwrap();
        for split in 1..n {
            let mid = net.forward_prefix(&obs, 1, split).unwrap();
            let spliced = net.forward_prefix(&mid, split + 1, n).unwrap();
            assert_eq!(spliced.data(), full.data(), "split after layer {split}");
        }
    }

    #[test]
    fn prefix_rejects_bad_ranges_and_shapes() {
        let net = PolicyNetwork::<f32>::zeros(ArchitectureConfig::nature_lite(3, true)).unwrap();
        let obs = Tensor::zeros(&[4, 32, 32]);
        assert!(net.forward_prefix(&obs, 0, 2).is_err());
        assert!(net.forward_prefix(&obs, 3, 2).is_err());
        assert!(net.forward_prefix(&obs, 1, 99).is_err());
        // layer 3 (conv2) expects 8 channels of 16x16, not the raw observation
        assert!(net.forward_prefix(&obs, 3, 4).is_err());
        let wrong_channels = Tensor::<f32>::zeros(&[6, 16, 16]);
        assert!(net.forward_prefix(&wrong_channels, 3, 4).is_err());
    }

    #[test]
    fn forward_rejects_non_finite_input() {
        let net = PolicyNetwork::<f32>::zeros(ArchitectureConfig::nature_lite(3, false)).unwrap();
        let mut obs = Tensor::zeros(&[4, 32, 32]);
        obs.data_mut()[5] = f32::NAN;
        assert!(matches!(
            net.forward(&obs),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn batch_forward_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net =
            PolicyNetwork::<f32>::init(ArchitectureConfig::nature_lite(3, false), &mut rng)
                .unwrap();
        let a = Tensor::from_fn(&[4, 32, 32], |i| ((i * 3) % 17) as f32 / 17.0);
        let b = Tensor::from_fn(&[4, 32, 32], |i| ((i * 5) % 13) as f32 / 13.0);
        let ab = Tensor::from_vec(
            &[2, 4, 32, 32],
            a.data().iter().chain(b.data()).copied().collect(),
        )
        .unwrap();
        let ba = Tensor::from_vec(
            &[2, 4, 32, 32],
            b.data().iter().chain(a.data()).copied().collect(),
        )
        .unwrap();
        let (d_ab, v_ab) = net.forward_batch(&ab).unwrap();
        let (d_ba, v_ba) = net.forward_batch(&ba).unwrap();
        assert_eq!(d_ab[0].probs, d_ba[1].probs);
        assert_eq!(d_ab[1].probs, d_ba[0].probs);
        assert_eq!(v_ab[0], v_ba[1]);
        assert_eq!(v_ab[1], v_ba[0]);
    }

    #[test]
    fn argmax_ignores_constant_logit_shift() {
        let d1 = ActionDistribution::<f32>::from_logits(&[0.3, -0.2, 0.9]);
        let d2 = ActionDistribution::<f32>::from_logits(&[10.3, 9.8, 10.9]);
        assert_eq!(d1.argmax(), d2.argmax());
        assert_eq!(d1.argmax(), 2);
    }

    #[test]
    fn distribution_sampling_follows_probabilities() {
        let d = ActionDistribution::<f32>::from_logits(&[0.0, (3.0f32).ln(), 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[d.sample(&mut rng)] += 1;
        }
        // probs are [0.2, 0.6, 0.2]
        assert!((counts[0] as f64 / 30_000.0 - 0.2).abs() < 0.02);
        assert!((counts[1] as f64 / 30_000.0 - 0.6).abs() < 0.02);
        assert!((counts[2] as f64 / 30_000.0 - 0.2).abs() < 0.02);
    }
}
