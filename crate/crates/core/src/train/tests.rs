use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::arch::ParamGroup;
use crate::data::{load_dataset, DatasetSpec};

fn tiny_config(per_class: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.batch_size = 10;
    if let DatasetSpec::SyntheticPatterns(p) = &mut cfg.data {
        p.samples_per_class = per_class;
    }
    cfg
}

fn snapshot(store: &ParamStore<f64>, group: ParamGroup) -> Vec<(String, Vec<u64>)> {
    store
        .ids(group)
        .into_iter()
        .map(|id| {
            let p = store.get(id);
            (
                p.name.clone(),
                p.value.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

fn batches(cfg: &RunConfig, data: &Dataset<f64>) -> (Batch<f64>, Batch<f64>) {
    let steps = cfg.space.t_max;
    let w = data
        .batch(&(0..10).collect::<Vec<_>>(), steps, cfg.train.encoding)
        .unwrap();
    let a = data
        .batch(&(10..20).collect::<Vec<_>>(), steps, cfg.train.encoding)
        .unwrap();
    (w, a)
}

fn trainer(cfg: &RunConfig, seed: u64) -> Trainer<f64> {
    let net = Network::supernet(
        &cfg.backbone().unwrap(),
        &cfg.space,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap();
    Trainer::new(net, cfg.optim, cfg.loss_config(), 0.0, ArchTrain::All)
}

#[test]
fn step_one_leaves_arch_and_step_two_leaves_weights() {
    let mut cfg = tiny_config(10);
    cfg.loss.lambda1 = 1e-5;
    cfg.loss.lambda2 = 1e-7;
    let data = load_dataset::<f64>(&cfg.data).unwrap();
    let (wb, ab) = batches(&cfg, &data);
    let mut t = trainer(&cfg, 1);

    let arch0 = snapshot(&t.net.params, ParamGroup::Arch);
    let w0 = snapshot(&t.net.params, ParamGroup::Weights);
    t.weight_step(&wb, cfg.optim.weight_lr, false).unwrap();
    assert_eq!(snapshot(&t.net.params, ParamGroup::Arch), arch0);
    let w1 = snapshot(&t.net.params, ParamGroup::Weights);
    assert_ne!(w1, w0);

    // a full joint step: the weights it ends with are exactly those of its
    // own first step
    let mut a = t.clone();
    let mut b = t.clone();
    a.joint_step(&wb, &ab, cfg.optim.weight_lr).unwrap();
    b.weight_step(&wb, cfg.optim.weight_lr, false).unwrap();
    assert_eq!(
        snapshot(&a.net.params, ParamGroup::Weights),
        snapshot(&b.net.params, ParamGroup::Weights)
    );
    assert_ne!(
        snapshot(&a.net.params, ParamGroup::Arch),
        snapshot(&b.net.params, ParamGroup::Arch)
    );
}

#[test]
fn psi_moves_only_in_the_second_step() {
    let cfg = tiny_config(10);
    let data = load_dataset::<f64>(&cfg.data).unwrap();
    let (wb, ab) = batches(&cfg, &data);
    let mut t = trainer(&cfg, 2);
    let psi = t.net.params.find("psi").unwrap();
    let before = t.net.params.value(psi).clone();
    t.weight_step(&wb, cfg.optim.weight_lr, false).unwrap();
    assert_eq!(t.net.params.value(psi), &before);
    t.joint_step(&wb, &ab, cfg.optim.weight_lr).unwrap();
    assert_ne!(t.net.params.value(psi), &before);
}

#[test]
fn empty_batch_is_an_error() {
    let cfg = tiny_config(10);
    let data = load_dataset::<f64>(&cfg.data).unwrap();
    let (wb, _) = batches(&cfg, &data);
    let empty = Batch {
        steps: Vec::new(),
        labels: Vec::new(),
    };
    let mut t = trainer(&cfg, 3);
    assert!(t.joint_step(&wb, &empty, 0.01).is_err());
    assert!(t.joint_step(&empty, &wb, 0.01).is_err());
}

#[test]
fn frozen_arch_training_reduces_ce() {
    let cfg = tiny_config(20);
    let data = load_dataset::<f64>(&cfg.data).unwrap();
    let mut t = trainer(&cfg, 4);
    t.arch_train = ArchTrain::Nothing;
    let all = data
        .batch(
            &(0..data.len()).collect::<Vec<_>>(),
            cfg.space.t_max,
            cfg.train.encoding,
        )
        .unwrap();
    let start = t.measure(&all).unwrap().ce;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut iters = 0;
    while iters < 20 {
        for b in epoch_batches(&mut idx, 10, &mut rng) {
            let batch = data.batch(&b, cfg.space.t_max, cfg.train.encoding).unwrap();
            t.weight_step(&batch, cfg.optim.weight_lr, false).unwrap();
            iters += 1;
        }
    }
    let end = t.measure(&all).unwrap().ce;
    assert!(end < start, "ce {start} -> {end}");
}

#[test]
fn pinned_supernet_trains_like_the_fixed_network() {
    let cfg = tiny_config(10);
    let data = load_dataset::<f64>(&cfg.data).unwrap();
    let profile = cfg.backbone().unwrap();
    let mut sup =
        Network::<f64>::supernet(&profile, &cfg.space, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut decoded = decode_architecture(&sup).unwrap();
    decoded.arch.timesteps = cfg.space.t_max;
    decoded.arch.cells[1].edges[0].op = crate::arch::OpKind::Conv3x3;
    decoded.arch.cells[0].bits = 2;
    let mut single = Network::decoded(
        &profile,
        &cfg.space,
        &decoded.arch,
        None,
        &mut ChaCha8Rng::seed_from_u64(6),
    )
    .unwrap();
    single.params.copy_matching(&sup.params);
    sup.pin_to(&decoded.arch).unwrap();

    let loss = LossConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        pruning_rate: cfg.space.pruning_rate,
    };
    let mut a = Trainer::new(sup, cfg.optim, loss, 0.0, ArchTrain::Nothing);
    let mut b = Trainer::new(single, cfg.optim, loss, 0.0, ArchTrain::Nothing);
    for k in 0..3 {
        let idx: Vec<usize> = (k * 10..k * 10 + 10).collect();
        let batch = data
            .batch(&idx, cfg.space.t_max, cfg.train.encoding)
            .unwrap();
        let ma = a.weight_step(&batch, 0.05, false).unwrap();
        let mb = b.weight_step(&batch, 0.05, false).unwrap();
        assert_eq!(ma.ce.to_bits(), mb.ce.to_bits(), "step {k}");
    }
}

#[test]
fn aux_weight_zero_leaves_plain_ce() {
    let cfg = tiny_config(10);
    let data = load_dataset::<f64>(&cfg.data).unwrap();
    let (wb, _) = batches(&cfg, &data);
    let sup = Network::<f64>::supernet(
        &cfg.backbone().unwrap(),
        &cfg.space,
        &mut ChaCha8Rng::seed_from_u64(7),
    )
    .unwrap();
    let decoded = decode_architecture(&sup).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut t = retrain_trainer(&cfg, &decoded, Some(&sup.params), false, &mut rng).unwrap();
    assert!(t.net.aux.is_some());
    let steps = t.net.steps();
    let batch = data
        .batch(&(0..10).collect::<Vec<_>>(), steps, cfg.train.encoding)
        .unwrap();
    let _ = wb;
    let with_aux = t.measure(&batch).unwrap();
    t.aux_weight = 0.0;
    let plain = t.measure(&batch).unwrap();
    assert_eq!(plain.loss, plain.ce);
    assert!(with_aux.ce > plain.ce);
}

#[test]
fn retrain_inherits_weights_by_name() {
    let cfg = tiny_config(10);
    let sup = Network::<f64>::supernet(
        &cfg.backbone().unwrap(),
        &cfg.space,
        &mut ChaCha8Rng::seed_from_u64(8),
    )
    .unwrap();
    let decoded = decode_architecture(&sup).unwrap();
    let t = retrain_trainer(
        &cfg,
        &decoded,
        Some(&sup.params),
        false,
        &mut ChaCha8Rng::seed_from_u64(9),
    )
    .unwrap();
    let name = "stem.conv.weight";
    assert_eq!(
        t.net.params.by_name(name).unwrap(),
        sup.params.by_name(name).unwrap()
    );
    assert_eq!(t.arch_train, ArchTrain::Suffixes(vec![".scores".into()]));
    assert_eq!(t.loss.lambda1, 0.0);
}

#[test]
fn stage_t_prefers_the_shortest_run() {
    assert_eq!(pick_timesteps(&[0.8, 0.8, 0.8, 0.8]), Some(1));
    assert_eq!(pick_timesteps(&[0.5, 0.9, 0.908, 0.91]), Some(3));
    assert_eq!(pick_timesteps(&[0.5, 0.6, 0.7, 0.9]), Some(4));
    assert_eq!(pick_timesteps(&[]), None);
}

#[test]
fn search_is_deterministic() {
    let mut cfg = tiny_config(10);
    cfg.train.epochs = 1;
    let data = load_dataset::<f64>(&cfg.data).unwrap();
    let run = || {
        let r = search(&cfg, &data, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        (
            r.metrics
                .iter()
                .map(|m| m.step.loss.to_bits())
                .collect::<Vec<_>>(),
            snapshot(&r.trainer.net.params, ParamGroup::Arch),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn metrics_csv_has_the_documented_header() {
    let rows = [IterMetrics {
        iter: 1,
        step: StepMetrics::default(),
    }];
    let csv = metrics_csv(&rows, "h");
    assert!(csv.starts_with("# config h\niter,loss,ce,mem_bits,bit_synops,S,b_w_mean\n1,"));
    assert_eq!(csv.lines().nth(2).unwrap().split(',').count(), 7);
}
