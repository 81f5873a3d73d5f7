use dynamo::data::{gen_synthetic, GenSpec, Placement};
use dynamo::eval::identity_baseline;
use dynamo::model::{encode_model, ModelParams, NetworkConfig};
use dynamo::trainer::{pretrain, train_joint, TrainConfig, TrainMode};
use dynamo::{evaluate, Dataset, LossConfig};

fn tiny_data(seed: u64, clips: usize) -> Dataset {
    let spec = GenSpec {
        num_clips: clips,
        frames: 4,
        height: 16,
        width: 16,
        speeds: vec![1],
        size_min: 2,
        size_max: 3,
        placement: Placement::Symmetric,
        seed,
        ..GenSpec::default()
    };
    gen_synthetic(&spec).unwrap()
}

fn tiny_net(seed: u64) -> ModelParams<f32> {
    ModelParams::init(&NetworkConfig {
        frames: 4,
        height: 16,
        width: 16,
        filter_size: 3,
        dmr_dim: 16,
        ar_dim: 8,
        trunk_channels: vec![2, 4],
        num_classes: 4,
        seed,
    })
    .unwrap()
}

fn joint_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { lr: 0.05, epochs, batch_size: 8, loss: LossConfig { delta: 1.0, ..LossConfig::default() }, seed: 2, ..TrainConfig::default() }
}

#[test]
fn thread_count_does_not_change_the_model() {
    let data = tiny_data(1, 24);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| encode_model(&train_joint(tiny_net(0), &data, &joint_cfg(2)).unwrap().params))
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(1));
}

#[test]
fn alpha_only_changes_the_loss_weighting() {
    let data = tiny_data(2, 16);
    let a = train_joint(tiny_net(0), &data, &joint_cfg(1)).unwrap();
    let mut cfg = joint_cfg(1);
    cfg.loss.alpha = 0.0;
    let b = train_joint(tiny_net(0), &data, &cfg).unwrap();
    assert_eq!(a.first_batch_loss_cls.unwrap().to_bits(), b.first_batch_loss_cls.unwrap().to_bits());
    assert_ne!(encode_model(&a.params), encode_model(&b.params));
}

#[test]
fn pretraining_beats_the_identity_filter() {
    let data = tiny_data(3, 96);
    let cfg = TrainConfig {
        lr: 0.2,
        epochs: 8,
        batch_size: 8,
        mode: TrainMode::Pretrain,
        loss: LossConfig { delta: 1.0, ..LossConfig::default() },
        seed: 1,
        ..TrainConfig::default()
    };
    let run = pretrain(tiny_net(1), &data, &cfg).unwrap();
    let first = run.trace.first().unwrap().loss_fp;
    let last = run.trace.last().unwrap().loss_fp;
    assert!(last < first, "{first} -> {last}");
    let model = evaluate(&run.params, &data).unwrap().mean_ssim;
    let base = identity_baseline(&data).unwrap().mean_ssim;
    assert!(model > base, "{model} vs identity {base}");
}

#[test]
fn trace_has_one_record_per_epoch() {
    let data = tiny_data(4, 8);
    let run = train_joint(tiny_net(2), &data, &joint_cfg(3)).unwrap();
    assert_eq!(run.trace.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(run.trace.iter().all(|r| r.loss_cls.is_some() && r.train_acc.is_some()));
}
