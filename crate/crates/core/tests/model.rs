mod common;

use common::randn;
use nimbus_core::model::{decode, encode, load_checkpoint, save_checkpoint, ModelConfig, Preset, SmaAtUNet};
use nimbus_core::nn::Mode;
use nimbus_core::{Error, Tensor};

fn toy() -> ModelConfig {
    ModelConfig {
        in_channels: 4,
        out_channels: 2,
        stage_widths: [8, 16, 32, 64, 128],
        depth_multiplier: 1,
        cbam_reduction: 4,
        ..ModelConfig::default()
    }
}

/// Parameter count written out from the layer recipe, block by block.
fn closed_form(cfg: &ModelConfig) -> usize {
    let k = cfg.depth_multiplier;
    let r = cfg.cbam_reduction;
    let s = cfg.spatial_kernel;
    let dsc = |ci: usize, co: usize| 9 * k * ci + k * ci * co + co;
    let double = |ci: usize, co: usize| dsc(ci, co) + dsc(co, co) + 2 * 2 * co;
    let cbam = |c: usize| 2 * c * (c / r) + 2 * s * s + 1;
    let w = cfg.stage_widths;
    let enc = [w[0], w[1], w[2], w[3], w[4] / 2];
    let mut total = 0;
    let mut prev = cfg.in_channels;
    for &c in &enc {
        total += double(prev, c) + cbam(c);
        prev = c;
    }
    for i in (0..4).rev() {
        total += double(enc[i] + prev, enc[i]);
        prev = enc[i];
    }
    total + prev * cfg.out_channels + cfg.out_channels
}

#[test]
fn toy_parameter_count_matches_closed_form() {
    let cfg = toy();
    let m = SmaAtUNet::<f64>::build(cfg.clone(), 0).unwrap();
    assert_eq!(m.count_params(), closed_form(&cfg));
    let d = ModelConfig::default();
    assert_eq!(SmaAtUNet::<f32>::build(d.clone(), 0).unwrap().count_params(), closed_form(&d));
}

#[test]
fn default_and_baseline_budgets() {
    let d = ModelConfig::default();
    let ours = SmaAtUNet::<f32>::build(d.clone(), 0).unwrap().count_params();
    let base = SmaAtUNet::<f32>::build(d.baseline_reference(), 0).unwrap().count_params();
    assert!((3_500_000..=4_700_000).contains(&ours), "{ours}");
    assert!((19_000_000..=25_000_000).contains(&base), "{base}");
    assert!(ours as f64 / base as f64 <= 0.25);
}

#[test]
fn default_geometry_keeps_crop_and_emits_sixteen_frames() {
    let m = SmaAtUNet::<f32>::build(ModelConfig::default(), 3).unwrap();
    let x = randn([2, 36, 126, 126], 4).cast::<f32>();
    let y = m.infer(&x).unwrap();
    assert_eq!(y.dims(), [2, 16, 126, 126]);
    assert!(y.all_finite());
}

#[test]
fn aligned_input_needs_no_padding() {
    let mut m = SmaAtUNet::<f64>::build(toy(), 5).unwrap();
    for hw in [16, 32, 48, 64] {
        let x = randn([2, 4, hw, hw], hw as u64);
        assert_eq!(m.forward(&x, Mode::Train).unwrap().dims(), [2, 2, hw, hw]);
    }
    let x = randn([1, 4, 20, 37], 6);
    assert_eq!(m.infer(&x).unwrap().dims(), [1, 2, 20, 37]);
}

#[test]
fn rejects_bad_inputs() {
    let mut m = SmaAtUNet::<f64>::build(toy(), 5).unwrap();
    assert!(matches!(m.infer(&randn([1, 3, 32, 32], 1)), Err(Error::Shape(_))));
    assert!(matches!(m.infer(&randn([1, 4, 15, 32], 1)), Err(Error::Shape(_))));
    assert!(matches!(m.backward(&randn([1, 2, 32, 32], 1)), Err(Error::State(_))));
}

#[test]
fn eval_mode_is_pure_and_deterministic() {
    let mut m = SmaAtUNet::<f64>::build(toy(), 7).unwrap();
    let x = randn([2, 4, 32, 32], 8);
    m.forward(&x, Mode::Train).unwrap();
    let before: Vec<_> = m.batch_norms().map(|b| b.state.clone()).collect();
    let params = m.params().values().to_vec();
    let a = m.forward(&x, Mode::Eval).unwrap();
    let b = m.infer(&x).unwrap();
    assert_eq!(a, b);
    let after: Vec<_> = m.batch_norms().map(|b| b.state.clone()).collect();
    assert_eq!(before, after);
    assert_eq!(params, m.params().values());

    // each sample's prediction is independent of its batch mates in eval mode
    let single = m.infer(&x.sample_tensor(1)).unwrap();
    assert_eq!(single.data(), b.sample(1));
}

#[test]
fn train_forward_updates_running_statistics() {
    let mut m = SmaAtUNet::<f64>::build(toy(), 7).unwrap();
    let before: Vec<_> = m.batch_norms().map(|b| b.state.running_mean.clone()).collect();
    m.forward(&randn([2, 4, 32, 32], 9), Mode::Train).unwrap();
    let after: Vec<_> = m.batch_norms().map(|b| b.state.running_mean.clone()).collect();
    assert_ne!(before, after);
}

#[test]
fn attention_gates_lie_strictly_inside_unit_interval() {
    let mut m = SmaAtUNet::<f64>::build(toy(), 10).unwrap();
    let x = randn([2, 4, 32, 32], 11);
    // settle the running statistics so eval-mode activations are normalized
    for _ in 0..60 {
        m.forward(&x, Mode::Train).unwrap();
    }
    let mut stages = Vec::new();
    m.infer_probed(&x, &mut |stage, gates| {
        assert!(gates.iter().all(|&g| g > 0.0 && g < 1.0), "stage {stage}");
        stages.push((stage, gates.len()));
    })
    .unwrap();
    let enc = toy().encoder_channels();
    let want: Vec<_> = (0..5).map(|i| (i, 2 * enc[i])).collect();
    assert_eq!(stages, want);
}

#[test]
fn same_seed_builds_identical_models() {
    let a = SmaAtUNet::<f64>::build(toy(), 12).unwrap();
    let b = SmaAtUNet::<f64>::build(toy(), 12).unwrap();
    let c = SmaAtUNet::<f64>::build(toy(), 13).unwrap();
    assert_eq!(a.params().values(), b.params().values());
    assert_ne!(a.params().values(), c.params().values());
}

fn trained_toy() -> SmaAtUNet<f32> {
    let mut m = SmaAtUNet::<f32>::build(toy(), 14).unwrap();
    m.forward(&randn([2, 4, 32, 32], 15).cast(), Mode::Train).unwrap();
    m.clear_cache();
    m
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let m = trained_toy();
    let echo = serde_json::json!({"train": {"seed": 3}});
    let bytes = encode(&m, &echo).unwrap();
    let ck = decode::<f32>(&bytes).unwrap();
    assert_eq!(ck.echo, echo);
    assert_eq!(ck.model.config(), m.config());
    assert_eq!(ck.model.params().values(), m.params().values());
    let states = |m: &SmaAtUNet<f32>| m.batch_norms().map(|b| b.state.clone()).collect::<Vec<_>>();
    assert_eq!(states(&ck.model), states(&m));
    assert_eq!(encode(&ck.model, &echo).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.smck");
    save_checkpoint(&m, &path, &echo).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let x = randn([1, 4, 32, 32], 16).cast::<f32>();
    let loaded = load_checkpoint::<f32>(&path).unwrap().model;
    assert_eq!(loaded.infer(&x).unwrap(), m.infer(&x).unwrap());
    // no temp files left behind
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn corrupted_checkpoints_are_format_errors() {
    let bytes = encode(&trained_toy(), &serde_json::Value::Null).unwrap();
    let is_format = |b: &[u8]| matches!(decode::<f32>(b), Err(Error::Format { .. }));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(is_format(&bad));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(is_format(&bad));
    let mut bad = bytes.clone();
    bad[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(is_format(&bad));
    let mut bad = bytes.clone();
    bad[12] = b'#';
    assert!(is_format(&bad));
    assert!(is_format(&bytes[..bytes.len() - 1]));
    assert!(is_format(&bytes[..7]));
    let mut long = bytes.clone();
    long.push(0);
    assert!(is_format(&long));
    assert!(is_format(&[]));

    // every truncation point fails cleanly
    for cut in (0..bytes.len()).step_by(97) {
        assert!(decode::<f32>(&bytes[..cut]).is_err());
    }
}

#[test]
fn eleven_to_one_checkpoint_reports_its_channels() {
    let cfg = ModelConfig::for_preset(Preset::ElevenToOne).with_widths_of(&toy());
    let m = SmaAtUNet::<f32>::build(cfg, 17).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lit.smck");
    save_checkpoint(&m, &path, &serde_json::Value::Null).unwrap();
    let back = load_checkpoint::<f32>(&path).unwrap().model;
    assert_eq!((back.config().in_channels, back.config().out_channels), (11, 1));
    assert_eq!(back.config().preset, Preset::ElevenToOne);
    let y = back.infer(&Tensor::full([1, 11, 16, 16], 0.5)).unwrap();
    assert_eq!(y.dims(), [1, 1, 16, 16]);
}
