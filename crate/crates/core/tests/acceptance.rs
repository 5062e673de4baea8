//! End-to-end acceptance checks. Run with `cargo test --test acceptance`.
//! Prints one PASS/FAIL line per criterion and exits non-zero on any failure.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use dcac_core::autograd::Graph;
use dcac_core::backbone::BackboneConfig;
use dcac_core::cac::{apply_cac_head_tensor, cac_layout_for};
use dcac_core::dac::{apply_dac_head_tensor, FilterLayout, ResidualSign};
use dcac_core::data::{generate_synthetic_domains, AugmentConfig, BatchSampler, SamplerConfig, SyntheticDomainSpec};
use dcac_core::eval::{asd, dsc, mean_diagonal, predict, run_lodo, LodoConfig};
use dcac_core::losses::{classification_loss_node, segmentation_loss_at_scale, segmentation_loss_grad};
use dcac_core::model::{ForwardOptions, Model, ModelConfig, Variant};
use dcac_core::trainer::{poly_lr, TrainConfig, Trainer};
use dcac_core::Tensor;

type Check = std::result::Result<String, String>;

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        num_blocks: 3,
        base_channels: 4,
        channel_cap: 16,
        ..Default::default()
    }
}

fn model_cfg(variant: Variant, k: usize, c: usize) -> ModelConfig {
    ModelConfig {
        backbone: small_backbone(),
        num_domains: k,
        num_classes: c,
        variant,
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v: f32 = StandardNormal.sample(rng);
            v * scale
        })
        .collect()
}

fn parameter_counts() -> Check {
    for (k, c) in [(2, 2), (3, 2), (5, 2), (3, 3)] {
        let m = Model::new(model_cfg(Variant::Dcac, k, c), 0).map_err(|e| e.to_string())?;
        let counts = m.dynamic_param_counts();
        let kc = k * c;
        let dac = kc * kc + kc;
        let cac = 2 * (kc * kc + kc) + (kc * c + c);
        if counts.dac != dac || counts.cac != cac {
            return Err(format!("(K,C)=({k},{c}): got {counts:?}, want dac {dac} cac {cac}"));
        }
    }
    Ok("4 configurations exact".into())
}

/// Per-voxel oracle for `y = W x + b` with `W` row-major `cout x cin`.
fn affine(w: &[f32], b: &[f32], x: &[f64], cin: usize, cout: usize) -> Vec<f64> {
    (0..cout)
        .map(|o| b[o] as f64 + (0..cin).map(|i| w[o * cin + i] as f64 * x[i]).sum::<f64>())
        .collect()
}

fn head_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let slope = 0.01f32;
    for trial in 0..20 {
        let side = if trial % 2 == 0 { 4 } else { 3 };
        let (k, c) = (rng.random_range(2..4), rng.random_range(2..4));
        let kc = k * c;
        let vol = side * side;
        let batch = 2;
        let x = randn(&mut rng, batch * kc * vol, 1.0);
        let xt = Tensor::from_vec(&[batch, kc, side, side], x.clone()).unwrap();

        let dlayout = FilterLayout::dac(k, c);
        let dfilt = randn(&mut rng, batch * dlayout.len(), 1.0 / (kc as f32).sqrt());
        let dt = Tensor::from_vec(&[batch, dlayout.len()], dfilt.clone()).unwrap();
        let got = apply_dac_head_tensor(&xt, &dt, &dlayout, ResidualSign::Minus).map_err(|e| e.to_string())?;

        let clayout = cac_layout_for(k, c);
        let cfilt = randn(&mut rng, batch * clayout.len(), 1.0 / (kc as f32).sqrt());
        let ct = Tensor::from_vec(&[batch, clayout.len()], cfilt.clone()).unwrap();
        let probs = apply_cac_head_tensor(&xt, &ct, &clayout, slope).map_err(|e| e.to_string())?;

        for b in 0..batch {
            let df = &dfilt[b * dlayout.len()..(b + 1) * dlayout.len()];
            let cf = &cfilt[b * clayout.len()..(b + 1) * clayout.len()];
            for v in 0..vol {
                let xv: Vec<f64> = (0..kc).map(|i| x[(b * kc + i) * vol + v] as f64).collect();
                let dyn_resp = affine(&df[..kc * kc], &df[kc * kc..], &xv, kc, kc);
                for o in 0..kc {
                    let want = xv[o] - dyn_resp[o];
                    let have = got.data()[(b * kc + o) * vol + v] as f64;
                    worst = worst.max((want - have).abs());
                }
                // three dynamic layers, LeakyReLU between them, softmax on top
                let lrelu = |v: Vec<f64>| v.into_iter().map(|t| if t > 0.0 { t } else { slope as f64 * t }).collect::<Vec<_>>();
                let mut off = 0;
                let mut layer = |h: &[f64], cin: usize, cout: usize| {
                    let w = &cf[off..off + cin * cout];
                    let bias = &cf[off + cin * cout..off + cin * cout + cout];
                    off += cin * cout + cout;
                    affine(w, bias, h, cin, cout)
                };
                let h1 = lrelu(layer(&xv, kc, kc));
                let h2 = lrelu(layer(&h1, kc, kc));
                let logits = layer(&h2, kc, c);
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for o in 0..c {
                    let want = (logits[o] - m).exp() / z;
                    let have = probs.data()[(b * c + o) * vol + v] as f64;
                    worst = worst.max((want - have).abs());
                }
            }
        }
    }
    if worst <= 1e-6 {
        Ok(format!("max deviation {worst:.2e}"))
    } else {
        Err(format!("max deviation {worst:.2e} > 1e-6"))
    }
}

fn encoder_grad_stats(variant: Variant) -> std::result::Result<(f64, f64), String> {
    let model = Model::new(model_cfg(variant, 3, 2), 5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[3, 1, 16, 16], randn(&mut rng, 3 * 256, 1.0)).unwrap());
    let out = model.forward(&mut g, x, &ForwardOptions::default()).map_err(|e| e.to_string())?;
    let code = out.domain_code.ok_or("no domain code")?;
    let (loss, _) = classification_loss_node(&mut g, code, &[0, 1, 2], 1e-7).map_err(|e| e.to_string())?;
    let grads = g.backward(loss);
    let store = model.store();
    let sq = |ids: Vec<_>| -> f64 {
        ids.into_iter()
            .filter_map(|id| grads.param(id))
            .flat_map(|t: &Tensor| t.data().to_vec())
            .map(|v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let enc = sq(store.ids_with_prefix("enc.").collect());
    let fc = sq(model.domain_predictor().unwrap().fc_params().to_vec());
    Ok((enc, fc))
}

fn gradient_truncation() -> Check {
    let (enc, fc) = encoder_grad_stats(Variant::Dcac)?;
    if enc != 0.0 || fc == 0.0 {
        return Err(format!("DCAC: encoder grad norm {enc:e}, FC grad norm {fc:e}"));
    }
    let (enc_ng, _) = encoder_grad_stats(Variant::DcacNg)?;
    if enc_ng == 0.0 {
        return Err("DCAC-NG: encoder gradients are zero".into());
    }
    Ok(format!("DCAC encoder 0, FC {fc:.3e}; DCAC-NG encoder {enc_ng:.3e}"))
}

fn residual_sign() -> Check {
    let mut worst: f32 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..5 {
        let cfg = model_cfg(Variant::Dcac, 3, 2);
        let minus = Model::new(cfg.clone(), seed).map_err(|e| e.to_string())?;
        let mut store = minus.store().clone();
        for id in store.ids_with_prefix("domain_controller").collect::<Vec<_>>() {
            store.get_mut(id).scale(-1.0);
        }
        let plus = Model::from_params(
            ModelConfig {
                variant: Variant::DcacPlus,
                ..cfg
            },
            &store,
        )
        .map_err(|e| e.to_string())?;
        let x = Tensor::from_vec(&[2, 1, 16, 16], randn(&mut rng, 512, 1.0)).unwrap();
        let run = |m: &Model| {
            let mut g = Graph::inference();
            let xv = g.constant(x.clone());
            let out = m.forward(&mut g, xv, &ForwardOptions::default()).unwrap();
            out.probs.iter().map(|&p| g.value(p).clone()).collect::<Vec<_>>()
        };
        for (a, b) in run(&minus).iter().zip(run(&plus).iter()) {
            worst = worst.max(a.max_abs_diff(b));
        }
    }
    if worst <= 1e-6 {
        Ok(format!("max deviation {worst:.2e}"))
    } else {
        Err(format!("max deviation {worst:.2e} > 1e-6"))
    }
}

fn loss_gradient() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (eps, clip, h) = (1e-5, 1e-7, 1e-4);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let p: Vec<f64> = (0..64).map(|_| rng.random_range(0.05..0.95)).collect();
        let y: Vec<f64> = (0..64).map(|_| f64::from(rng.random_bool(0.4))).collect();
        let grad = segmentation_loss_grad(&p, &y, eps, clip).map_err(|e| e.to_string())?;
        for i in 0..p.len() {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi[i] += h;
            lo[i] -= h;
            let f = |q: &[f64]| segmentation_loss_at_scale(q, &y, eps, clip).unwrap().total();
            let fd = (f(&hi) - f(&lo)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    if worst <= 1e-3 {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e} > 1e-3"))
    }
}

fn schedule() -> Check {
    let a = poly_lr(0, 0.01, 200).map_err(|e| e.to_string())?;
    let b = poly_lr(200, 0.01, 200).map_err(|e| e.to_string())?;
    let m = poly_lr(100, 0.01, 200).map_err(|e| e.to_string())?;
    if a == 0.01 && b == 0.0 && (m - 0.0053589).abs() <= 1e-7 {
        Ok(format!("lr(0)={a} lr(T)={b} lr(T/2)={m:.7}"))
    } else {
        Err(format!("lr(0)={a} lr(T)={b} lr(T/2)={m}"))
    }
}

/// Foreground pixels with a background 4-neighbour or on the image edge.
fn brute_boundary(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            let open = edge
                || !mask[(y - 1) * w + x]
                || !mask[(y + 1) * w + x]
                || !mask[y * w + x - 1]
                || !mask[y * w + x + 1];
            if open {
                out.push((y, x));
            }
        }
    }
    out
}

fn brute_asd(a: &[bool], b: &[bool], h: usize, w: usize) -> Option<f64> {
    let ba = brute_boundary(a, h, w);
    let bb = brute_boundary(b, h, w);
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let dir = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        from.iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(v, u)| ((y as f64 - v as f64).powi(2) + (x as f64 - u as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    Some(0.5 * (dir(&ba, &bb) + dir(&bb, &ba)))
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let (pa, pb) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let a: Vec<u8> = (0..h * w).map(|_| u8::from(rng.random_bool(pa))).collect();
        let b: Vec<u8> = (0..h * w).map(|_| u8::from(rng.random_bool(pb))).collect();
        let na = a.iter().filter(|&&v| v == 1).count();
        let nb = b.iter().filter(|&&v| v == 1).count();
        let both = a.iter().zip(&b).filter(|(x, y)| **x == 1 && **y == 1).count();
        let want = if na + nb == 0 { 100.0 } else { 200.0 * both as f64 / (na + nb) as f64 };
        let got = dsc(&a, &b, 1).map_err(|e| e.to_string())?;
        if got != want {
            return Err(format!("DSC {got} vs {want} on {h}x{w}"));
        }
        let am: Vec<bool> = a.iter().map(|&v| v == 1).collect();
        let bm: Vec<bool> = b.iter().map(|&v| v == 1).collect();
        let oracle = brute_asd(&am, &bm, h, w);
        let got = asd(&a, &b, &[h, w], 1).map_err(|e| e.to_string())?;
        match (got, oracle) {
            (None, None) => {}
            (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
            _ => return Err(format!("ASD definedness differs on {h}x{w}: {got:?} vs {oracle:?}")),
        }
    }
    if worst <= 1e-9 {
        Ok(format!("1000 pairs, DSC exact, max ASD deviation {worst:.1e}"))
    } else {
        Err(format!("max ASD deviation {worst:e}"))
    }
}

fn simplex() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let variants = [Variant::Dcac, Variant::DCac, Variant::NoDac, Variant::NoCac, Variant::DeepAll];
    let models: Vec<Model> = variants
        .iter()
        .enumerate()
        .map(|(i, &v)| Model::new(model_cfg(v, 3, 3), i as u64).unwrap())
        .collect();
    let mut worst: f64 = 0.0;
    for pass in 0..100 {
        let m = &models[pass % models.len()];
        let scale = rng.random_range(0.1..5.0);
        let x = Tensor::from_vec(&[2, 1, 8, 8], randn(&mut rng, 128, scale)).unwrap();
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let out = m.forward(&mut g, xv, &ForwardOptions::default()).map_err(|e| e.to_string())?;
        if let Some(code) = out.domain_code {
            for row in g.value(code).data().chunks(3) {
                worst = worst.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
            }
        }
        for &p in &out.probs {
            let t = g.value(p);
            let (b, c, vol) = (t.batch(), t.channels(), t.spatial_len());
            for s in 0..b {
                for v in 0..vol {
                    let sum: f64 = (0..c).map(|k| t.data()[(s * c + k) * vol + v] as f64).sum();
                    worst = worst.max((sum - 1.0).abs());
                }
            }
        }
    }
    if worst <= 1e-6 {
        Ok(format!("100 passes, max |sum - 1| {worst:.2e}"))
    } else {
        Err(format!("max |sum - 1| {worst:.2e}"))
    }
}

/// Training recipe used for the desk-scale runs.
fn desk_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr0: 0.01,
        epochs,
        momentum: 0.9,
        steps_per_epoch: 50,
        batch_size: 4,
        patch: vec![64, 64],
        seed,
        grad_clip: Some(1.0),
        ..Default::default()
    }
}

fn desk_model(variant: Variant, k: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            num_blocks: 4,
            base_channels: 8,
            ..Default::default()
        },
        num_domains: k,
        num_classes: 2,
        variant,
    }
}

fn single_batch_overfit() -> Check {
    let spec = SyntheticDomainSpec::new(3, vec![64, 64]);
    let domains = generate_synthetic_domains(&spec, 3, 4).map_err(|e| e.to_string())?;
    let normalized = domains.iter().map(|d| d.normalized()).collect();
    let cfg = SamplerConfig {
        patch: vec![64, 64],
        batch_size: 4,
        divisor: 8,
        strict: false,
        augment: AugmentConfig::none(),
    };
    let batch = BatchSampler::new(normalized, cfg, 0)
        .and_then(|mut s| s.next_batch())
        .map_err(|e| e.to_string())?;
    let mut model = Model::new(desk_model(Variant::Dcac, 3), 0).map_err(|e| e.to_string())?;
    let tcfg = desk_train(1, 0);
    let mut trainer = Trainer::new(&mut model, &tcfg).map_err(|e| e.to_string())?;
    let mut last = f64::NAN;
    for step in 0..500 {
        last = trainer.step(&batch, tcfg.lr0, 0, step).map_err(|e| e.to_string())?.total;
    }
    if last < 0.05 {
        Ok(format!("total loss after 500 steps {last:.4}"))
    } else {
        Err(format!("total loss after 500 steps {last:.4}"))
    }
}

fn coarse_heads_idle() -> Check {
    let model = Model::new(desk_model(Variant::Dcac, 3), 0).map_err(|e| e.to_string())?;
    let image = Tensor::from_vec(&[1, 40, 40], randn(&mut ChaCha8Rng::seed_from_u64(1), 1600, 1.0)).unwrap();
    model.reset_head_calls();
    predict(&model, &image).map_err(|e| e.to_string())?;
    let at_test = model.head_calls();
    model.reset_head_calls();
    let mut g = Graph::inference();
    let x = g.constant(Tensor::zeros(&[1, 1, 32, 32]));
    model.forward(&mut g, x, &ForwardOptions::default()).map_err(|e| e.to_string())?;
    let at_train = model.head_calls();
    if at_test[0] == 1 && at_test[1..].iter().all(|&n| n == 0) && at_train.iter().all(|&n| n == 1) {
        Ok(format!("predict {at_test:?}, training forward {at_train:?}"))
    } else {
        Err(format!("predict {at_test:?}, training forward {at_train:?}"))
    }
}

struct LodoEvidence {
    trend: Check,
    shuffle: Check,
}

fn desk_lodo() -> LodoEvidence {
    const SEEDS: [u64; 3] = [0, 1, 2];
    const EPOCHS: usize = 16;
    let spec = SyntheticDomainSpec::new(7, vec![96, 96]);
    let domains = match generate_synthetic_domains(&spec, 4, 40) {
        Ok(d) => d,
        Err(e) => {
            return LodoEvidence {
                trend: Err(e.to_string()),
                shuffle: Err(e.to_string()),
            }
        }
    };
    let mut lines = Vec::new();
    let mut trend_ok = true;
    let mut shuffle_pairs = Vec::new();
    for seed in SEEDS {
        let mut means = Vec::new();
        for variant in [Variant::Dcac, Variant::DeepAll] {
            let cfg = LodoConfig {
                model: desk_model(variant, 3),
                train: desk_train(EPOCHS, seed),
                val_cases: 8,
                shuffled_eval: variant == Variant::Dcac,
                output: None,
            };
            let out = match run_lodo(&domains, &cfg) {
                Ok(o) => o,
                Err(e) => {
                    let msg = format!("seed {seed} {variant}: {e}");
                    return LodoEvidence {
                        trend: Err(msg.clone()),
                        shuffle: Err(msg),
                    };
                }
            };
            means.push(out.report.mean_dsc());
            let per: Vec<String> = out
                .runs
                .iter()
                .map(|r| {
                    let d = r.cases.iter().map(|c| c.dsc[0]).sum::<f64>() / r.cases.len().max(1) as f64;
                    let diag = r.confusion.as_ref().map_or(String::new(), |m| format!("/{:.2}", mean_diagonal(m)));
                    format!("{d:.1}{diag}")
                })
                .collect();
            eprintln!("  seed {seed} {variant}: mean {:.2} [{}]", out.report.mean_dsc(), per.join(" "));
            if variant == Variant::Dcac {
                let diag: Vec<f64> = out.runs.iter().filter_map(|r| r.confusion.as_ref()).map(|m| mean_diagonal(m)).collect();
                let min_diag = diag.iter().cloned().fold(f64::INFINITY, f64::min);
                if min_diag < 0.9 {
                    trend_ok = false;
                }
                lines.push(format!("seed {seed} diag min {min_diag:.3}"));
                if let Some(sh) = &out.shuffled {
                    shuffle_pairs.push((out.report.mean_dsc(), sh.mean_dsc()));
                }
            }
        }
        if means[0] < means[1] {
            trend_ok = false;
        }
        lines.push(format!("seed {seed} DCAC {:.2} DeepAll {:.2}", means[0], means[1]));
    }
    let trend = if trend_ok { Ok(lines.join("; ")) } else { Err(lines.join("; ")) };
    let shuffle = if shuffle_pairs.is_empty() {
        Err("no shuffled evaluation".into())
    } else {
        let n = shuffle_pairs.len() as f64;
        let normal = shuffle_pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let shuffled = shuffle_pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let msg = format!("DCAC {normal:.3} vs DC(p)AC {shuffled:.3}");
        if shuffled < normal {
            Ok(msg)
        } else {
            Err(msg)
        }
    };
    LodoEvidence { trend, shuffle }
}

fn main() {
    let quick = std::env::args().any(|a| a == "--quick");
    let mut results: Vec<(usize, &str, Check, f64)> = Vec::new();
    fn timed(f: &dyn Fn() -> Check) -> (Check, f64) {
        let t = Instant::now();
        let r = f();
        (r, t.elapsed().as_secs_f64())
    }
    let run = |id: usize, name: &'static str, f: &dyn Fn() -> Check| {
        let (r, secs) = timed(f);
        (id, name, r, secs)
    };
    results.push(run(1, "parameter-count exactness", &parameter_counts));
    results.push(run(2, "dynamic-head oracle equivalence", &head_oracles));
    results.push(run(3, "gradient truncation", &gradient_truncation));
    results.push(run(4, "residual-sign equivalence", &residual_sign));
    results.push(run(5, "loss gradient check", &loss_gradient));
    results.push(run(6, "schedule exactness", &schedule));
    results.push(run(7, "metric oracles", &metric_oracles));
    results.push(run(8, "softmax simplex invariants", &simplex));
    results.push(run(9, "single-batch overfit", &single_batch_overfit));
    if !quick {
        let t = Instant::now();
        let lodo = desk_lodo();
        let secs = t.elapsed().as_secs_f64();
        results.push((10, "desk-scale LODO trend", lodo.trend, secs));
        results.push((11, "DC(p)AC degradation", lodo.shuffle, 0.0));
    }
    results.push(run(12, "test-time coarse heads idle", &coarse_heads_idle));
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, r, secs) in &results {
        match r {
            Ok(msg) => println!("PASS [{id:>2}] {name}: {msg} ({secs:.1}s)"),
            Err(msg) => {
                failed += 1;
                println!("FAIL [{id:>2}] {name}: {msg} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
