use dcac_core::backbone::BackboneConfig;
use dcac_core::data::{
    generate_synthetic_domains, read_dataset, write_dataset, AugmentConfig, BatchSampler, SamplerConfig, SyntheticDomainSpec,
};
use dcac_core::eval::{linear_probe_accuracy, predict};
use dcac_core::model::{Model, ModelConfig, Variant};
use dcac_core::trainer::{load_checkpoint, save_checkpoint, train, CheckpointMeta, TrainConfig, TrainOutput, Trainer};

fn tiny_model(variant: Variant, k: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            num_blocks: 3,
            base_channels: 4,
            ..Default::default()
        },
        num_domains: k,
        num_classes: 2,
        variant,
    }
}

fn tiny_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        steps_per_epoch: 3,
        batch_size: 2,
        patch: vec![32, 32],
        seed,
        ..Default::default()
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticDomainSpec::new(11, vec![24, 20]);
    let domains = generate_synthetic_domains(&spec, 3, 4).unwrap();
    let manifest = write_dataset(dir.path(), &domains, 2).unwrap();
    assert_eq!(manifest.num_domains, 3);
    let (back_manifest, back) = read_dataset(dir.path()).unwrap();
    assert_eq!(back_manifest, manifest);
    assert_eq!(back.len(), domains.len());
    for (a, b) in domains.iter().zip(&back) {
        assert_eq!(a.domain_id, b.domain_id);
        for (ca, cb) in a.cases.iter().zip(&b.cases) {
            assert_eq!(ca.id, cb.id);
            assert_eq!(ca.image, cb.image);
            assert_eq!(ca.label, cb.label);
        }
    }
}

#[test]
fn volumes_round_trip_too() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticDomainSpec::new(2, vec![8, 12, 12]);
    let domains = generate_synthetic_domains(&spec, 3, 2).unwrap();
    write_dataset(dir.path(), &domains, 2).unwrap();
    let (m, back) = read_dataset(dir.path()).unwrap();
    assert_eq!(m.spatial_rank, 3);
    assert_eq!(back[2].cases[1].image, domains[2].cases[1].image);
}

fn skew(x: &[f32]) -> [f64; 3] {
    let n = x.len() as f64;
    let m = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let v = x.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
    let s = v.sqrt();
    let k = x.iter().map(|&v| ((v as f64 - m) / s).powi(3)).sum::<f64>() / n;
    [m, s, k]
}

#[test]
fn synthetic_domains_are_linearly_separable() {
    let spec = SyntheticDomainSpec::new(5, vec![48, 48]);
    let domains = generate_synthetic_domains(&spec, 4, 30).unwrap();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for d in &domains {
        for c in &d.cases {
            feats.push(skew(c.image.data()).to_vec());
            labels.push(d.domain_id);
        }
    }
    let acc = linear_probe_accuracy(&feats, &labels, 5, 0).unwrap();
    assert!(acc > 0.8, "probe accuracy {acc}");
}

#[test]
fn training_is_deterministic_per_seed() {
    let spec = SyntheticDomainSpec::new(1, vec![32, 32]);
    let domains = generate_synthetic_domains(&spec, 3, 3).unwrap();
    let run = |seed| {
        let mut m = Model::new(tiny_model(Variant::Dcac, 3), seed).unwrap();
        let out = train(&mut m, &domains, &tiny_train(1, seed), None).unwrap();
        (out.log, m.store().get(m.store().ids().next().unwrap()).clone())
    };
    let (log_a, w_a) = run(4);
    let (log_b, w_b) = run(4);
    assert_eq!(log_a, log_b);
    assert_eq!(w_a, w_b);
    let (log_c, _) = run(5);
    assert_ne!(log_a, log_c);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticDomainSpec::new(1, vec![32, 32]);
    let domains = generate_synthetic_domains(&spec, 3, 3).unwrap();
    let mut m = Model::new(tiny_model(Variant::Dcac, 2), 0).unwrap();
    let out = TrainOutput { dir: dir.path().to_path_buf() };
    train(&mut m, &domains[..2], &tiny_train(2, 0), Some(&out)).unwrap();
    let ckpt = load_checkpoint(&out.checkpoint_path()).unwrap();
    assert_eq!(ckpt.meta.epoch, 2);
    let restored = ckpt.into_model().unwrap();
    let image = &domains[2].cases[0].image;
    let a = predict(&m, image).unwrap();
    let b = predict(&restored, image).unwrap();
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.code, b.code);

    let path = dir.path().join("plain.ckpt");
    save_checkpoint(&path, &m, None, &CheckpointMeta::model_only(m.config())).unwrap();
    let again = load_checkpoint(&path).unwrap();
    assert!(again.velocity.is_none());
    assert_eq!(predict(&again.into_model().unwrap(), image).unwrap().mask, a.mask);
}

#[test]
fn training_never_sees_the_held_out_domain() {
    let spec = SyntheticDomainSpec::new(3, vec![32, 32]);
    let domains = generate_synthetic_domains(&spec, 4, 2).unwrap();
    let sources: Vec<_> = domains.iter().filter(|d| d.domain_id != 2).cloned().collect();
    let mut m = Model::new(tiny_model(Variant::DeepAll, 3), 0).unwrap();
    let out = train(&mut m, &sources, &tiny_train(2, 0), None).unwrap();
    assert!(!out.seen_domains.contains(&2));
    assert!(out.log.iter().all(|r| r.l_cls.is_none()));
}

#[test]
fn classification_loss_decreases() {
    let spec = SyntheticDomainSpec::new(8, vec![32, 32]);
    let domains = generate_synthetic_domains(&spec, 3, 4).unwrap();
    let normalized = domains.iter().map(|d| d.normalized()).collect();
    let cfg = SamplerConfig {
        patch: vec![32, 32],
        batch_size: 6,
        divisor: 4,
        strict: false,
        augment: AugmentConfig::none(),
    };
    let batch = BatchSampler::new(normalized, cfg, 0).unwrap().next_batch().unwrap();
    let mut m = Model::new(tiny_model(Variant::Dcac, 3), 0).unwrap();
    let tcfg = TrainConfig {
        momentum: 0.9,
        grad_clip: Some(1.0),
        ..tiny_train(1, 0)
    };
    let mut t = Trainer::new(&mut m, &tcfg).unwrap();
    let cls: Vec<f64> = (0..60)
        .map(|s| t.step(&batch, 0.01, 0, s).unwrap().l_cls.unwrap())
        .collect();
    let head: f64 = cls[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = cls[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "first {head}, last {tail}");
}
