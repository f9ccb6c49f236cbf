//! Inference-time activation recovery.
//!
//! Given a (possibly perturbed) observation, recompute the pre-attention
//! activation, Hadamard-mask it with the attention map computed on that
//! same activation, and resume the forward pass from the reentry point
//! with the masked activation injected in place of the attention layer's
//! output. Because attention entries live in (0,1), masking shrinks every
//! coordinate, damping activations the attention considers irrelevant.

use serde::{Deserialize, Serialize};

use crate::bam;
use crate::metrics::StepRecord;
use crate::policy::{ActionDistribution, Observation, PolicyNetwork};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Where the forward pass resumes after masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reentry {
    /// Skip the attention layer; the masked activation replaces its
    /// output.
    AfterBam,
    /// Feed the masked activation back through the attention layer.
    /// The map is recomputed on the already-masked activation, which
    /// acts as a second denoising pass, and the residual refinement
    /// re-amplifies the surviving salient features. On trained
    /// networks this restores the clean action noticeably more often
    /// than resuming after the layer, so it is the default.
    #[default]
    AtBam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryConfig {
    pub reentry: Reentry,
}

/// The three activations recorded by one recovery call, all batched
/// `[N,C,H,W]` with one shared shape.
#[derive(Debug, Clone)]
pub struct AttentionTap<E: Scalar = f32> {
    /// Output of the layers before the attention layer.
    pub f_pre: Tensor<E>,
    /// Attention map computed on `f_pre`, entries in (0,1).
    pub f_bam: Tensor<E>,
    /// `f_pre ⊙ f_bam`, the activation injected at the reentry point.
    pub f_rec: Tensor<E>,
}

impl<E: Scalar> AttentionTap<E> {
    fn new(f_pre: Tensor<E>, f_bam: Tensor<E>) -> TensorResult<Self> {
        let f_rec = f_pre.broadcast_with(&f_bam, "recovery mask", |a, b| a * b)?;
        if f_rec.shape() != f_pre.shape() {
            return Err(TensorError::InvalidArgument {
                context: "recovery mask",
                message: format!(
                    "mask {:?} must not enlarge the activation {:?}",
                    f_bam.shape(),
                    f_pre.shape()
                ),
            });
        }
        Ok(Self { f_pre, f_bam, f_rec })
    }
}

/// Attention map the network's attention layer produces on a given
/// pre-attention activation (batched or unbatched).
pub fn attention_map<E: Scalar>(
    net: &PolicyNetwork<E>,
    f_pre: &Tensor<E>,
) -> TensorResult<Tensor<E>> {
    let layer = require_bam(net)?;
    let tape = Tape::new();
    let bound = net.bind(&tape, false);
    let (_, vars) = bound.bam().expect("attention layer present");
    let x = tape.constant(net.batchify(f_pre, layer)?);
    let m = bam::attention(&tape, x, vars)?;
    Ok(tape.value(m))
}

/// Recovered action distribution for `s_a`, plus the activation tap.
pub fn recover_policy<E: Scalar>(
    net: &PolicyNetwork<E>,
    s_a: &Observation<E>,
    cfg: &RecoveryConfig,
) -> TensorResult<(ActionDistribution<E>, AttentionTap<E>)> {
    recover_policy_with_mask(net, s_a, cfg, None)
}

/// `recover_policy` with the attention map optionally overridden by a
/// fixed mask; used to probe the data path (identity or zero masks).
pub fn recover_policy_with_mask<E: Scalar>(
    net: &PolicyNetwork<E>,
    s_a: &Observation<E>,
    cfg: &RecoveryConfig,
    mask: Option<&Tensor<E>>,
) -> TensorResult<(ActionDistribution<E>, AttentionTap<E>)> {
    let layer = require_bam(net)?;
    let f_pre = net.forward_prefix(s_a, 1, layer - 1)?;
    let f_bam = match mask {
        Some(m) => m.clone(),
        None => attention_map(net, &f_pre)?,
    };
    let tap = AttentionTap::new(f_pre, f_bam)?;
    let resume_from = match cfg.reentry {
        Reentry::AfterBam => layer + 1,
        Reentry::AtBam => layer,
    };
    let logits = net.forward_prefix(&tap.f_rec, resume_from, net.num_layers())?;
    let a = logits.shape()[1];
    Ok((ActionDistribution::from_logits(&logits.data()[..a]), tap))
}

/// One paired evaluation step: clean distribution on `s`, undefended
/// distribution on `s_a`, and the recovered distribution on `s_a`.
pub fn recovery_effect<E: Scalar>(
    net: &PolicyNetwork<E>,
    s: &Observation<E>,
    s_a: &Observation<E>,
    cfg: &RecoveryConfig,
) -> TensorResult<StepRecord<E>> {
    let (clean, _) = net.forward(s)?;
    let (attacked, _) = net.forward(s_a)?;
    let (recovered, _) = recover_policy(net, s_a, cfg)?;
    StepRecord::new(clean, attacked, recovered)
}

fn require_bam<E: Scalar>(net: &PolicyNetwork<E>) -> TensorResult<usize> {
    net.bam_layer_index().ok_or(TensorError::InvalidArgument {
        context: "recovery",
        message: "network has no attention layer to recover through".to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ArchitectureConfig, PolicyNetwork};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bam_net(seed: u64) -> PolicyNetwork<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicyNetwork::init(ArchitectureConfig::nature_lite(3, true), &mut rng).unwrap()
    }

    fn test_obs(scale: f32) -> Tensor<f32> {
        Tensor::from_fn(&[4, 32, 32], |i| ((i % 17) as f32 / 16.0) * scale)
    }

    #[test]
    fn tap_is_the_exact_hadamard_product() {
        let net = bam_net(0);
        let obs = test_obs(1.0);
        let (_, tap) = recover_policy(&net, &obs, &RecoveryConfig::default()).unwrap();
        assert_eq!(tap.f_pre.shape(), tap.f_bam.shape());
        assert_eq!(tap.f_pre.shape(), tap.f_rec.shape());
        let product = tap
            .f_pre
            .broadcast_with(&tap.f_bam, "oracle", |a, b| a * b)
            .unwrap();
        assert_eq!(tap.f_rec, product);
        for (&m, (&rec, &pre)) in tap
            .f_bam
            .data()
            .iter()
            .zip(tap.f_rec.data().iter().zip(tap.f_pre.data()))
        {
            assert!(m > 0.0 && m < 1.0);
            assert!(rec.abs() <= pre.abs());
        }
    }

    #[test]
    fn identity_mask_reinjects_the_unmasked_activation() {
        let net = bam_net(1);
        let obs = test_obs(0.7);
        let layer = net.bam_layer_index().unwrap();
        let ones = Tensor::ones(&net.forward_prefix(&obs, 1, layer - 1).unwrap().shape().to_vec());
        let cfg = RecoveryConfig { reentry: Reentry::AfterBam };
        let (dist, tap) = recover_policy_with_mask(&net, &obs, &cfg, Some(&ones)).unwrap();
        assert_eq!(tap.f_rec, tap.f_pre);
        let logits = net
            .forward_prefix(&tap.f_pre, layer + 1, net.num_layers())
            .unwrap();
        let oracle = ActionDistribution::from_logits(&logits.data()[..3]);
        assert_eq!(dist.logits, oracle.logits);
        assert_eq!(dist.probs, oracle.probs);
    }

    #[test]
    fn identity_mask_at_bam_reproduces_the_plain_forward() {
        let net = bam_net(1);
        let obs = test_obs(0.7);
        let layer = net.bam_layer_index().unwrap();
        let ones = Tensor::ones(&net.forward_prefix(&obs, 1, layer - 1).unwrap().shape().to_vec());
        let cfg = RecoveryConfig { reentry: Reentry::AtBam };
        let (dist, tap) = recover_policy_with_mask(&net, &obs, &cfg, Some(&ones)).unwrap();
        assert_eq!(tap.f_rec, tap.f_pre);
        let (oracle, _) = net.forward(&obs).unwrap();
        assert_eq!(dist.logits, oracle.logits);
        assert_eq!(dist.probs, oracle.probs);
    }

    #[test]
    fn zero_mask_splices_a_zero_activation() {
        let net = bam_net(2);
        let obs = test_obs(0.4);
        let layer = net.bam_layer_index().unwrap();
        let f_pre = net.forward_prefix(&obs, 1, layer - 1).unwrap();
        let zeros = Tensor::zeros(f_pre.shape());
        let cfg = RecoveryConfig { reentry: Reentry::AfterBam };
        let (dist, tap) = recover_policy_with_mask(&net, &obs, &cfg, Some(&zeros)).unwrap();
        assert!(tap.f_rec.data().iter().all(|&v| v == 0.0));
        let logits = net
            .forward_prefix(&zeros, layer + 1, net.num_layers())
            .unwrap();
        let oracle = ActionDistribution::from_logits(&logits.data()[..3]);
        assert_eq!(dist.probs, oracle.probs);
    }

    #[test]
    fn matches_the_manual_splice_oracle_bit_exactly() {
        let net = bam_net(3);
        let obs = test_obs(1.0);
        let layer = net.bam_layer_index().unwrap();

        let f_pre = net.forward_prefix(&obs, 1, layer - 1).unwrap();
        let m = attention_map(&net, &f_pre).unwrap();
        let f_rec = f_pre.broadcast_with(&m, "oracle", |a, b| a * b).unwrap();

        for (reentry, resume_from) in
            [(Reentry::AfterBam, layer + 1), (Reentry::AtBam, layer)]
        {
            let cfg = RecoveryConfig { reentry };
            let (dist, _) = recover_policy(&net, &obs, &cfg).unwrap();
            let logits = net
                .forward_prefix(&f_rec, resume_from, net.num_layers())
                .unwrap();
            let oracle = ActionDistribution::from_logits(&logits.data()[..3]);
            assert_eq!(dist.logits, oracle.logits, "{reentry:?}");
            assert_eq!(dist.probs, oracle.probs, "{reentry:?}");
        }
    }

    #[test]
    fn at_bam_reenters_through_the_attention_layer() {
        let net = bam_net(4);
        let obs = test_obs(0.9);
        let layer = net.bam_layer_index().unwrap();
        let cfg = RecoveryConfig { reentry: Reentry::AtBam };
        let (dist, tap) = recover_policy(&net, &obs, &cfg).unwrap();
        let logits = net
            .forward_prefix(&tap.f_rec, layer, net.num_layers())
            .unwrap();
        let oracle = ActionDistribution::from_logits(&logits.data()[..3]);
        assert_eq!(dist.logits, oracle.logits);

        // the policy head is zero-initialized, so compare the hidden layer
        // to see the two reentry paths diverge
        let hidden_at = net
            .forward_prefix(&tap.f_rec, layer, net.num_layers() - 1)
            .unwrap();
        let hidden_after = net
            .forward_prefix(&tap.f_rec, layer + 1, net.num_layers() - 1)
            .unwrap();
        assert_ne!(hidden_at, hidden_after);
    }

    #[test]
    fn recovery_is_deterministic() {
        let net = bam_net(5);
        let obs = test_obs(0.3);
        let (a, tap_a) = recover_policy(&net, &obs, &RecoveryConfig::default()).unwrap();
        let (b, tap_b) = recover_policy(&net, &obs, &RecoveryConfig::default()).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(tap_a.f_rec, tap_b.f_rec);
    }

    #[test]
    fn zero_observation_is_a_fixpoint() {
        // init leaves conv biases at zero, so a zero input zeroes f_pre
        let net = bam_net(6);
        let obs = Tensor::zeros(&[4, 32, 32]);
        let (_, tap) = recover_policy(&net, &obs, &RecoveryConfig::default()).unwrap();
        assert!(tap.f_pre.data().iter().all(|&v| v == 0.0));
        assert!(tap.f_rec.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn plain_network_cannot_recover() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net: PolicyNetwork<f32> =
            PolicyNetwork::init(ArchitectureConfig::nature_lite(3, false), &mut rng).unwrap();
        let err = recover_policy(&net, &test_obs(1.0), &RecoveryConfig::default()).unwrap_err();
        assert!(err.to_string().contains("attention"));
    }

    #[test]
    fn effect_records_all_three_distributions() {
        let net = bam_net(8);
        let s = test_obs(1.0);
        let mut attacked = s.clone();
        for v in attacked.data_mut() {
            *v = (*v + 0.05).min(1.0);
        }
        let record = recovery_effect(&net, &s, &attacked, &RecoveryConfig::default()).unwrap();
        let (p, _) = net.forward(&s).unwrap();
        let (q, _) = net.forward(&attacked).unwrap();
        let (r, _) = recover_policy(&net, &attacked, &RecoveryConfig::default()).unwrap();
        assert_eq!(record.clean.probs, p.probs);
        assert_eq!(record.attacked.probs, q.probs);
        assert_eq!(record.recovered.probs, r.probs);
    }
}
