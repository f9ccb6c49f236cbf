//! Shared fixtures for the benchmark targets.

use bamrl_core::env::{greedy_action, CatchEnv, EnvConfig};
use bamrl_core::policy::{ArchitectureConfig, PolicyNetwork};
use bamrl_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Desk-scale network with or without the attention layer.
pub fn nature_net(with_bam: bool) -> PolicyNetwork<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    PolicyNetwork::init(ArchitectureConfig::nature_lite(3, with_bam), &mut rng)
        .expect("valid architecture")
}

/// A mid-episode observation from the real environment, so activations
/// look like what the hot paths see in production.
pub fn sample_obs() -> Tensor<f32> {
    let mut env = CatchEnv::new(EnvConfig::default(), 7).expect("valid env config");
    for _ in 0..20 {
        let action = greedy_action(env.raw());
        env.step(action).expect("mid-episode step");
    }
    env.observation().clone()
}
