use fcce_core::data::PhantomConfig;
use fcce_core::harness::{prepare, train_split};
use fcce_core::loss::{LossConfig, MembershipSource};
use fcce_core::RunConfig;

fn toy(seed: u64) -> RunConfig {
    RunConfig {
        epochs: 10,
        depth: 2,
        base_channels: 4,
        learning_rate: 3e-3,
        seed,
        phantom: PhantomConfig { size: 16, count: 8, seed: seed + 100, ..PhantomConfig::default() },
        loss: LossConfig::fcce(MembershipSource::Prediction, 0.5),
        ..RunConfig::default()
    }
}

#[test]
fn early_stopping_never_beats_the_full_run() {
    for seed in 0..3 {
        let full_cfg = RunConfig { early_stopping_patience: 0, ..toy(seed) };
        let split = prepare(&full_cfg).unwrap();
        let full = train_split(&full_cfg, &split, None).unwrap();
        assert_eq!(full.history.len(), 10);
        for patience in 1..=3 {
            let early = train_split(&RunConfig { early_stopping_patience: patience, ..toy(seed) }, &split, None).unwrap();
            let n = early.history.len();
            assert_eq!(early.history[..], full.history[..n], "seed {seed}, patience {patience}");
            assert!(early.best().dc_val <= full.best().dc_val);
            if early.stopped_early {
                assert_eq!(n - 1 - early.best_index, patience);
            }
        }
    }
}

#[test]
fn overfit_loss_decreases_when_smoothed() {
    let cfg = RunConfig {
        epochs: 200,
        learning_rate: 1e-2,
        early_stopping_patience: 0,
        depth: 2,
        base_channels: 8,
        split_fraction: 1.0,
        phantom: PhantomConfig { count: 2, ..PhantomConfig::default() },
        ..RunConfig::default()
    };
    let out = train_split(&cfg, &prepare(&cfg).unwrap(), None).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|r| r.loss).collect();
    let smoothed: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    let rises: Vec<(usize, f64)> =
        smoothed.windows(2).enumerate().filter(|(_, w)| w[1] > w[0]).map(|(k, w)| (k + 10, w[1] - w[0])).collect();
    assert!(rises.is_empty(), "smoothed loss rose at (epoch, amount) {rises:?}");
    assert!(out.last().dc >= 0.99);
}
