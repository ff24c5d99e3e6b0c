use alignsched::data::{generate_synthetic, split, SyntheticSpec};
use alignsched::encoder::init_params;
use alignsched::eval::Direction;
use alignsched::trainer::{evaluate, train, TrainConfig};
use alignsched::Strategy;

#[test]
fn fixed_training_beats_untrained_floor() {
    let ds = generate_synthetic(&SyntheticSpec {
        pairs: 500,
        latent_dim: 16,
        d_img: 64,
        d_txt: 64,
        noise_scale: 0.5,
        seed: 21,
    })
    .unwrap();
    let (tr, va, _) = split(&ds, 0.75, 0.125, 21).unwrap();
    let config = TrainConfig {
        strategy: Strategy::Fixed,
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train(&tr, &va, &config).unwrap();
    assert_eq!(out.record.epochs.len(), 30);
    assert!(out.record.epochs.iter().all(|e| e.w_i == 0.5 && e.w_t == 0.5));

    let floor = init_params(config.embed_dim, 64, 64, config.seed).unwrap();
    let before = evaluate(&floor, &va, &[5]).unwrap();
    let after = evaluate(&out.final_params, &va, &[5]).unwrap();
    for dir in [Direction::I2T, Direction::T2I] {
        let gain = after.get(dir, 5).unwrap() - before.get(dir, 5).unwrap();
        assert!(gain >= 20.0, "{dir}: gain {gain}");
    }

    let first = &out.record.epochs[0];
    let last = out.record.epochs.last().unwrap();
    assert!(last.mean_total < first.mean_total);
}

#[test]
fn strategies_share_batch_sequences() {
    let ds = generate_synthetic(&SyntheticSpec {
        pairs: 120,
        latent_dim: 4,
        d_img: 12,
        d_txt: 10,
        noise_scale: 0.8,
        seed: 2,
    })
    .unwrap();
    let (tr, va, _) = split(&ds, 0.75, 0.125, 2).unwrap();
    let runs: Vec<_> = Strategy::ALL
        .iter()
        .map(|&strategy| {
            let c = TrainConfig {
                strategy,
                epochs: 4,
                embed_dim: 8,
                batch_size: 16,
                seed: 9,
                ..TrainConfig::default()
            };
            train(&tr, &va, &c).unwrap().record
        })
        .collect();
    for r in &runs[1..] {
        for (a, b) in r.epochs.iter().zip(&runs[0].epochs) {
            assert_eq!(a.first_batch, b.first_batch);
            assert_eq!(a.batch_fingerprint, b.batch_fingerprint);
        }
    }
}
