use fanet_core::trainer::{desk_datasets, train, DeskConfig, TrainConfig};

fn block_means(losses: &[f64], block: usize) -> Vec<f64> {
    losses
        .chunks(block)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

#[test]
fn loss_trends_down_over_the_first_two_hundred_steps() {
    let mut cfg = DeskConfig::default();
    cfg.train.steps = 200;
    let (train_set, _) = desk_datasets::<f32>(&cfg).unwrap();
    let result = train(&cfg.train, &train_set).unwrap();
    let means = block_means(&result.losses(), 50);
    assert_eq!(means.len(), 4);
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "block means {means:?}");
    }
}

#[test]
fn same_seed_same_weights() {
    let mut cfg = DeskConfig {
        pairs: 8,
        holdout: 2,
        size: 32,
        ..DeskConfig::default()
    };
    cfg.train = TrainConfig {
        steps: 6,
        batch_size: 2,
        crop: 32,
        ..TrainConfig::default()
    };
    let (set, _) = desk_datasets::<f32>(&cfg).unwrap();
    let a = train(&cfg.train, &set).unwrap();
    let b = train(&cfg.train, &set).unwrap();
    assert_eq!(a.losses(), b.losses());
    assert_eq!(a.weights, b.weights);
}

#[test]
fn frozen_run_leaves_weights_untouched() {
    let mut cfg = DeskConfig {
        pairs: 8,
        holdout: 2,
        size: 32,
        ..DeskConfig::default()
    };
    cfg.train = TrainConfig {
        steps: 3,
        batch_size: 2,
        crop: 32,
        lr_max: 0.0,
        base_lr: 0.0,
        ..TrainConfig::default()
    };
    let (set, _) = desk_datasets::<f32>(&cfg).unwrap();
    let trained = train(&cfg.train, &set).unwrap();
    let zero = train(
        &TrainConfig {
            steps: 0,
            ..cfg.train.clone()
        },
        &set,
    )
    .unwrap();
    assert_eq!(trained.weights, zero.weights);
}
