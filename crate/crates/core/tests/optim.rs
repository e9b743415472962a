mod common;

use std::path::Path;

use nimbus_core::data::{synth_generate, Dataset, Manifest, Split, SynthConfig};
use nimbus_core::model::{ModelConfig, SmaAtUNet};
use nimbus_core::nn::{GradStore, ParamStore};
use nimbus_core::optim::{
    fit, train_epoch, train_regional, AdamW, AdamWConfig, EarlyStopping, TrainConfig,
};
use nimbus_core::{Error, Tensor};

fn store(values: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.register("w", Tensor::vector(values.to_vec())).unwrap();
    s.register("b", Tensor::vector(vec![0.5])).unwrap();
    s
}

fn grads(s: &ParamStore<f64>, w: &[f64], b: f64) -> GradStore<f64> {
    let mut g = s.zeros_like();
    g.accumulate(s.id_of("w").unwrap(), w);
    g.accumulate(s.id_of("b").unwrap(), &[b]);
    g
}

fn cfg(lr: f64, wd: f64) -> AdamWConfig {
    AdamWConfig {
        lr,
        weight_decay: wd,
        ..AdamWConfig::default()
    }
}

#[test]
fn zero_gradient_without_decay_is_a_fixed_point() {
    let mut s = store(&[1.0, -2.0, 3.5]);
    let before = s.values().to_vec();
    let mut opt = AdamW::new(cfg(1e-2, 0.0), &s).unwrap();
    for _ in 0..5 {
        let g = s.zeros_like();
        opt.step(&mut s, &g).unwrap();
    }
    assert_eq!(s.values(), before.as_slice());
}

#[test]
fn pure_decay_scales_by_one_minus_lr_wd() {
    let (lr, wd) = (1e-2, 0.1);
    let init = [1.0, -2.0, 3.5];
    let mut s = store(&init);
    let mut opt = AdamW::new(cfg(lr, wd), &s).unwrap();
    let g = s.zeros_like();
    opt.step(&mut s, &g).unwrap();
    for (p, p0) in s.values()[0].data().iter().zip(init) {
        assert!((p - p0 * (1.0 - lr * wd)).abs() <= 1e-12);
    }
    assert!((s.values()[1].data()[0] - 0.5 * (1.0 - lr * wd)).abs() <= 1e-12);
}

#[test]
fn first_step_moves_each_weight_by_about_lr() {
    let lr = 1e-3;
    let mut s = store(&[1.0, -2.0, 3.5]);
    let mut opt = AdamW::new(cfg(lr, 0.0), &s).unwrap();
    let g = grads(&s, &[0.3, -7.0, 1e-3], 42.0);
    opt.step(&mut s, &g).unwrap();
    let moved: Vec<f64> = s.values()[0].data().iter().zip([1.0, -2.0, 3.5]).map(|(p, p0)| p0 - p).collect();
    // m_hat = g and v_hat = g², so the step is lr·g/(|g|+eps)
    for (d, gi) in moved.iter().zip([0.3f64, -7.0, 1e-3]) {
        let want = lr * gi / (gi.abs() + 1e-8);
        assert!((d - want).abs() <= 1e-12, "{d} vs {want}");
        assert!((d.abs() - lr).abs() <= 1e-7);
    }
}

/// Adam on one scalar, written from the update recurrences.
fn scalar_adam(p0: f64, gs: &[f64], c: &AdamWConfig) -> f64 {
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    for (t, &g) in gs.iter().enumerate() {
        let t = (t + 1) as i32;
        m = c.beta1 * m + (1.0 - c.beta1) * g;
        v = c.beta2 * v + (1.0 - c.beta2) * g * g;
        let mh = m / (1.0 - c.beta1.powi(t));
        let vh = v / (1.0 - c.beta2.powi(t));
        p = p * (1.0 - c.lr * c.weight_decay) - c.lr * mh / (vh.sqrt() + c.eps);
    }
    p
}

#[test]
fn matches_scalar_oracle_over_many_steps() {
    for wd in [0.0, 0.05] {
        let c = cfg(3e-3, wd);
        let seq: Vec<[f64; 3]> = (0..25)
            .map(|t| {
                let t = t as f64;
                [(t * 0.7).sin(), -0.5 + 0.1 * t, (t * 1.3).cos() * 1e-2]
            })
            .collect();
        let init = [1.0, -2.0, 3.5];
        let mut s = store(&init);
        let mut opt = AdamW::new(c.clone(), &s).unwrap();
        for g in &seq {
            let gs = grads(&s, g, 0.0);
            opt.step(&mut s, &gs).unwrap();
        }
        for i in 0..3 {
            let oracle = scalar_adam(init[i], &seq.iter().map(|g| g[i]).collect::<Vec<_>>(), &c);
            assert!((s.values()[0].data()[i] - oracle).abs() <= 1e-12);
        }
    }
}

#[test]
fn weight_decay_is_decoupled_from_the_gradient_moments() {
    let (lr, wd) = (1e-2, 0.2);
    let init = [1.0, -2.0, 3.5];
    let mut with = store(&init);
    let mut without = store(&init);
    let mut a = AdamW::new(cfg(lr, wd), &with).unwrap();
    let mut b = AdamW::new(cfg(lr, 0.0), &without).unwrap();
    let g = grads(&with, &[0.3, -0.1, 2.0], 1.0);
    a.step(&mut with, &g).unwrap();
    b.step(&mut without, &g).unwrap();
    assert_eq!(a.m, b.m);
    assert_eq!(a.v, b.v);
    for i in 0..3 {
        let diff = with.values()[0].data()[i] - without.values()[0].data()[i];
        assert!((diff + lr * wd * init[i]).abs() <= 1e-12);
    }
}

#[test]
fn non_finite_gradient_is_rejected_before_any_update() {
    let mut s = store(&[1.0, 2.0, 3.0]);
    let before = s.values().to_vec();
    let mut opt = AdamW::new(cfg(1e-2, 0.1), &s).unwrap();
    let g = grads(&s, &[0.1, f64::NAN, 0.2], 0.0);
    match opt.step(&mut s, &g) {
        Err(Error::PoisonedGradient(name)) => assert_eq!(name, "w"),
        other => panic!("expected poisoned gradient, got {other:?}"),
    }
    assert_eq!(s.values(), before.as_slice());
    assert_eq!(opt.step_count, 0);
    let g = grads(&s, &[0.1, 0.2, 0.3], f64::INFINITY);
    assert!(matches!(opt.step(&mut s, &g), Err(Error::PoisonedGradient(n)) if n == "b"));
}

#[test]
fn invalid_optimizer_settings_are_config_errors() {
    let s = store(&[1.0]);
    for bad in [
        AdamWConfig { lr: -1.0, ..AdamWConfig::default() },
        AdamWConfig { beta1: 1.0, ..AdamWConfig::default() },
        AdamWConfig { eps: 0.0, ..AdamWConfig::default() },
    ] {
        assert!(matches!(AdamW::new(bad, &s), Err(Error::Config(_))));
    }
}

#[test]
fn early_stopping_rules() {
    let mut es = EarlyStopping::new(3, 0.1);
    assert!(es.observe(1, 1.0).improved);
    // not better by more than min_delta
    let d = es.observe(2, 0.95);
    assert!(!d.improved && !d.stop);
    let d = es.observe(3, 0.9);
    assert!(!d.improved && !d.stop);
    let d = es.observe(4, 0.89);
    assert!(d.improved);
    assert_eq!(es.best_epoch, Some(4));
    assert!(!es.observe(5, 5.0).stop);
    assert!(!es.observe(6, 5.0).stop);
    assert!(es.observe(7, 5.0).stop);

    let mut es = EarlyStopping::new(1, 0.0);
    es.observe(1, 1.0);
    let d = es.observe(2, 1.0);
    assert!(!d.improved && d.stop);
    let mut es = EarlyStopping::new(3, 0.0);
    assert!(!es.observe(1, f64::NAN).improved);
    assert_eq!(es.best_epoch, None);
}

// --- small synthetic training fixtures ---

fn tiny_synth(dir: &Path, regions: &[&str]) -> Manifest {
    let sc = SynthConfig {
        n_train: 16,
        n_val: 4,
        n_test: 4,
        // 32 keeps the bottleneck at 2x2 so a one-sample batch still has batch statistics
        grid: 32,
        t_in: 2,
        t_out: 2,
        blob_scale: [2.0, 4.0],
        seed: 5,
        regions: regions.iter().map(|r| r.to_string()).collect(),
        ..SynthConfig::default()
    };
    synth_generate(&sc, dir).unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        in_channels: 18,
        out_channels: 2,
        stage_widths: [8, 16, 32, 64, 128],
        depth_multiplier: 1,
        cbam_reduction: 4,
        ..ModelConfig::default()
    }
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_epochs: epochs,
        patience: epochs,
        seed: 9,
        optimizer: AdamWConfig {
            lr: 5e-3,
            ..AdamWConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_synth(dir.path(), &["R1"]);
    let (train, _) = Dataset::<f64>::load(&m, Split::Train, false).unwrap();
    let mut model = SmaAtUNet::<f64>::build(tiny_model(), 1).unwrap();
    let before = model.params().values().to_vec();
    let mut c = tiny_train(1);
    c.optimizer.lr = 0.0;
    let mut opt = AdamW::new(c.optimizer.clone(), model.params()).unwrap();
    let stats = train_epoch(&mut model, &train, &c, &mut opt, 1).unwrap();
    assert_eq!(model.params().values(), before.as_slice());
    assert_eq!((stats.batches, stats.samples), (4, 16));
    assert!(stats.train_loss.is_finite());
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_synth(dir.path(), &["R1"]);
    let (train, _) = Dataset::<f32>::load(&m, Split::Train, false).unwrap();
    let (val, _) = Dataset::<f32>::load(&m, Split::Val, false).unwrap();
    let c = tiny_train(3);
    let run = || fit(SmaAtUNet::<f32>::build(tiny_model(), 2).unwrap(), &train, &val, &c, |_| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.model.params().values(), b.model.params().values());
    let strip = |h: &[nimbus_core::optim::EpochRecord]| h.iter().map(|r| (r.epoch, r.train_loss, r.val_loss)).collect::<Vec<_>>();
    assert_eq!(strip(&a.history), strip(&b.history));

    assert_eq!(a.history.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(a.history[2].train_loss < a.history[0].train_loss, "{:?}", a.history);
    // fit returns the argmin of the validation curve
    let argmin = a.history.iter().min_by(|x, y| x.val_loss.total_cmp(&y.val_loss)).unwrap();
    assert_eq!(a.best_epoch, argmin.epoch);
    assert_eq!(a.best_val_loss, argmin.val_loss);
}

#[test]
fn regional_training_writes_one_checkpoint_per_region() {
    let data = tempfile::tempdir().unwrap();
    let m = tiny_synth(data.path(), &["R1", "R2"]);
    let jobs = vec![("R1".to_string(), 2019), ("R2".to_string(), 2019), ("R9".to_string(), 2019)];
    let c = tiny_train(1);
    let run = |out: &Path, parallel: bool| train_regional(&m, &jobs, &tiny_model(), &c, out, &serde_json::Value::Null, parallel);

    let out_a = tempfile::tempdir().unwrap();
    let rep = run(out_a.path(), false);
    assert_eq!((rep.succeeded(), rep.failed()), (2, 1));
    assert!(rep.jobs[2].error.as_deref().unwrap().contains("R9"));
    assert_ne!(rep.jobs[0].seed, rep.jobs[1].seed);
    for r in ["R1", "R2"] {
        assert!(out_a.path().join(format!("model_{r}_2019.smck")).is_file());
        assert!(out_a.path().join(format!("model_{r}_2019.history.jsonl")).is_file());
    }
    assert!(!out_a.path().join("model_R9_2019.smck").exists());

    let out_b = tempfile::tempdir().unwrap();
    run(out_b.path(), true);
    for r in ["R1", "R2"] {
        let name = format!("model_{r}_2019.smck");
        assert_eq!(
            std::fs::read(out_a.path().join(&name)).unwrap(),
            std::fs::read(out_b.path().join(&name)).unwrap()
        );
    }
}
