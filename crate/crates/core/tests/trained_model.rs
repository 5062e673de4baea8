//! Properties of a DCAC model trained briefly on synthetic sources.

use std::sync::OnceLock;

use dcac_core::backbone::BackboneConfig;
use dcac_core::data::synth::generate_domain;
use dcac_core::data::{generate_synthetic_domains, DomainDataset, DomainTransform, SyntheticDomainSpec};
use dcac_core::eval::{domain_confusion, domain_ranking_table, export_features, linear_probe_accuracy, mean_diagonal};
use dcac_core::model::{Model, ModelConfig, Variant};
use dcac_core::trainer::{train, TrainConfig};

const VAL: usize = 8;

struct Fixture {
    model: Model,
    sources: Vec<DomainDataset>,
    val: Vec<DomainDataset>,
    blend: DomainDataset,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = SyntheticDomainSpec::new(21, vec![64, 64]);
        let all = generate_synthetic_domains(&spec, 4, 30).unwrap();
        let (sources, val): (Vec<_>, Vec<_>) = all.iter().map(|d| d.split(VAL)).unzip();
        let mix = DomainTransform::lerp(&spec.transform(0), &spec.transform(1), 0.5);
        let blend = generate_domain(&spec, 9, &mix, 24).unwrap();
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                num_blocks: 4,
                base_channels: 8,
                ..Default::default()
            },
            num_domains: 4,
            num_classes: 2,
            variant: Variant::Dcac,
        };
        let mut model = Model::new(cfg, 0).unwrap();
        let tcfg = TrainConfig {
            epochs: 10,
            momentum: 0.9,
            steps_per_epoch: 50,
            batch_size: 4,
            patch: vec![64, 64],
            grad_clip: Some(1.0),
            ..Default::default()
        };
        train(&mut model, &sources, &tcfg, None).unwrap();
        Fixture { model, sources, val, blend }
    })
}

#[test]
fn domain_confusion_is_diagonal() {
    let f = fixture();
    let m = domain_confusion(&f.model, &f.val).unwrap();
    for (i, row) in m.iter().enumerate() {
        assert!(row[i] >= 0.9, "row {i}: {row:?}");
    }
    assert!(mean_diagonal(&m) >= 0.9);
}

#[test]
fn interpolated_target_ranks_its_parents_first() {
    let f = fixture();
    let t = domain_ranking_table(&f.model, &f.blend).unwrap();
    for rank in 0..2 {
        let parents = t[0][rank] + t[1][rank];
        assert!(parents > 50.0, "rank {rank}: {t:?}");
    }
}

#[test]
fn dynamic_response_is_less_domain_separable() {
    let f = fixture();
    let records = export_features(&f.model, &f.sources).unwrap();
    assert_eq!(records.len(), f.sources.iter().map(|d| d.len()).sum::<usize>());
    let labels: Vec<usize> = records.iter().map(|r| r.domain_id).collect();
    let as_f64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let pre: Vec<Vec<f64>> = records.iter().map(|r| as_f64(&r.pre)).collect();
    let post: Vec<Vec<f64>> = records.iter().map(|r| as_f64(&r.post)).collect();
    assert!(pre.iter().chain(&post).flatten().all(|v| v.is_finite()));
    let a = linear_probe_accuracy(&pre, &labels, 5, 0).unwrap();
    let b = linear_probe_accuracy(&post, &labels, 5, 0).unwrap();
    assert!(a - b >= 0.05, "pre {a:.3} post {b:.3}");
}
