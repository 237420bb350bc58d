//! Fixtures shared by the benchmarks.

use riot_core::data::{make_windows, Window};
use riot_core::nets::{ModelConfig, ModelKind, NetConfig, Network};
use riot_core::sensors::{gen_trajectory, simulate_imu, TrajectoryKind};
use riot_core::{seeded_rng, ImuSequence, NoiseSpec, WorldConstants};

/// A noisy walking-like recording at 100 Hz.
pub fn sequence(seconds: f64, seed: u64) -> ImuSequence {
    let mut r = seeded_rng(seed);
    let poses = gen_trajectory(&TrajectoryKind::default(), seconds, 100.0, &mut r)
        .expect("valid trajectory");
    simulate_imu(
        &poses,
        &NoiseSpec::default(),
        &WorldConstants::default(),
        &mut r,
    )
    .expect("valid simulation")
}

/// Network of the given kind with `d_model` 16, 2 heads and window `t`.
pub fn small_network(kind: ModelKind, t: usize) -> Network {
    let m = ModelConfig {
        d_model: 16,
        heads: 2,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let cfg = NetConfig {
        model: kind,
        window: t,
        position: m.clone(),
        attitude: m,
        gru_hidden: 32,
        gru_layers: 2,
        ..NetConfig::default()
    };
    Network::new(&cfg, &mut seeded_rng(1)).expect("valid config")
}

/// The first window of a fresh recording.
pub fn window(t: usize) -> Window {
    make_windows(&sequence(t as f64 / 100.0 + 0.1, 3), t, t)
        .expect("long enough")
        .remove(0)
}
