//! Central finite-difference checks in f64 for every differentiable piece.
//! Layers must agree to 1e-4 relative error, the whole model to 1e-3.

mod common;

use common::*;
use nimbus_core::model::{ModelConfig, SmaAtUNet};
use nimbus_core::nn::{
    loss, BatchNorm, Cbam, ChannelAttention, DoubleConv, DsConv, Initializer, LossKind, Mode, ParamStore,
    SpatialAttention,
};
use nimbus_core::optim::{batch_loss, TrainConfig};
use nimbus_core::tensor::{
    bilinear_resize, bilinear_resize_backward, conv2d, conv2d_backward, max_pool2, max_pool2_backward, relu,
    relu_backward, sigmoid, sigmoid_backward, ConvSpec,
};
use nimbus_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAYER_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;
// Smaller step for the whole network: it has far more relu and pooling kinks.
const MODEL_EPS: f64 = 1e-6;

fn conv_case(dims: [usize; 4], c_out: usize, spec: ConvSpec, seed: u64) {
    let x = randn(dims, seed);
    let wdims = [c_out, dims[1] / spec.groups, spec.kernel_h, spec.kernel_w];
    let w = randn(wdims, seed + 1);
    let b: Vec<f64> = randn([1, c_out, 1, 1], seed + 2).into_data();
    let y = conv2d(&x, &w, Some(&b), &spec).unwrap();
    let probe = randn(y.dims(), seed + 3);
    let g = conv2d_backward(&x, &w, &spec, &probe).unwrap();

    let picks = spread(x.len(), 60);
    let e = check_input(&x, &g.grad_input, &picks, |xp| {
        weighted_sum(&conv2d(xp, &w, Some(&b), &spec).unwrap(), &probe)
    });
    assert!(e <= LAYER_TOL, "conv input grad rel err {e} for {dims:?} {spec:?}");

    let picks = spread(w.len(), 60);
    let e = check_input(&w, &g.grad_weight, &picks, |wp| {
        weighted_sum(&conv2d(&x, wp, Some(&b), &spec).unwrap(), &probe)
    });
    assert!(e <= LAYER_TOL, "conv weight grad rel err {e}");

    let bt = Tensor::vector(b.clone());
    let gb = Tensor::vector(g.grad_bias.clone());
    let e = check_input(&bt, &gb, &(0..c_out).collect::<Vec<_>>(), |bp| {
        weighted_sum(&conv2d(&x, &w, Some(bp.data()), &spec).unwrap(), &probe)
    });
    assert!(e <= LAYER_TOL, "conv bias grad rel err {e}");
}

#[test]
fn conv2d_standard_padded() {
    conv_case([2, 3, 7, 6], 4, ConvSpec::square(3, 1), 10);
}

#[test]
fn conv2d_depthwise_with_multiplier() {
    conv_case([2, 3, 6, 6], 6, ConvSpec::depthwise(3, 3, 1), 20);
}

#[test]
fn conv2d_strided_unpadded_rectangular() {
    let spec = ConvSpec {
        kernel_h: 3,
        kernel_w: 2,
        stride: 2,
        padding: 0,
        groups: 1,
    };
    conv_case([1, 2, 9, 8], 3, spec, 30);
}

#[test]
fn conv2d_pointwise_and_seven_by_seven() {
    conv_case([2, 5, 4, 5], 7, ConvSpec::pointwise(), 40);
    conv_case([1, 2, 8, 8], 1, ConvSpec::square(7, 3), 50);
}

#[test]
fn elementwise_activations() {
    let x = randn([2, 3, 4, 4], 60);
    let probe = randn(x.dims(), 61);
    let g = relu_backward(&x, &probe).unwrap();
    let e = check_input(&x, &g, &spread(x.len(), 96), |xp| weighted_sum(&relu(xp), &probe));
    assert!(e <= LAYER_TOL, "relu rel err {e}");
    let y = sigmoid(&x);
    let g = sigmoid_backward(&y, &probe).unwrap();
    let e = check_input(&x, &g, &spread(x.len(), 96), |xp| weighted_sum(&sigmoid(xp), &probe));
    assert!(e <= LAYER_TOL, "sigmoid rel err {e}");
}

#[test]
fn max_pool_gradient() {
    let x = randn([2, 3, 6, 8], 70);
    let (y, idx) = max_pool2(&x).unwrap();
    let probe = randn(y.dims(), 71);
    let g = max_pool2_backward(&idx, &probe).unwrap();
    let e = check_input(&x, &g, &(0..x.len()).collect::<Vec<_>>(), |xp| {
        weighted_sum(&max_pool2(xp).unwrap().0, &probe)
    });
    assert!(e <= LAYER_TOL, "max pool rel err {e}");
}

#[test]
fn bilinear_resize_gradient() {
    for (h, w, oh, ow) in [(4, 5, 8, 10), (6, 6, 4, 9), (3, 3, 7, 2)] {
        let x = randn([2, 2, h, w], 80 + h as u64);
        let y = bilinear_resize(&x, oh, ow).unwrap();
        let probe = randn(y.dims(), 90);
        let g = bilinear_resize_backward(x.dims(), &probe).unwrap();
        let e = check_input(&x, &g, &(0..x.len()).collect::<Vec<_>>(), |xp| {
            weighted_sum(&bilinear_resize(xp, oh, ow).unwrap(), &probe)
        });
        assert!(e <= LAYER_TOL, "resize {h}x{w}->{oh}x{ow} rel err {e}");
    }
}

#[test]
fn losses() {
    let x = randn([2, 3, 4, 4], 100);
    let target = randn(x.dims(), 101).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    for kind in [LossKind::BceLogits, LossKind::Mse] {
        let (_, g) = loss(&x, &target, kind).unwrap();
        let e = check_input(&x, &g, &(0..x.len()).collect::<Vec<_>>(), |xp| loss(xp, &target, kind).unwrap().0);
        assert!(e <= LAYER_TOL, "{kind:?} rel err {e}");
    }
}

#[test]
fn training_loss_through_resize() {
    let logits = randn([2, 3, 4, 4], 110);
    let rates = randn([2, 3, 8, 8], 111).map(|v| v.abs());
    for kind in [LossKind::BceLogits, LossKind::Mse] {
        let cfg = TrainConfig {
            loss: kind,
            ..TrainConfig::default()
        };
        let (_, g) = batch_loss(&logits, &rates, &cfg).unwrap();
        let e = check_input(&logits, &g, &(0..logits.len()).collect::<Vec<_>>(), |xp| {
            batch_loss(xp, &rates, &cfg).unwrap().0
        });
        assert!(e <= LAYER_TOL, "{kind:?} resized loss rel err {e}");
    }
}

#[test]
fn dsconv_gradients() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Initializer::new(3);
    let layer = DsConv::new(&mut store, &mut init, "ds", 3, 5, 2).unwrap();
    // non-zero bias so the bias path is exercised
    let bid = store.id_of("ds.pointwise.bias").unwrap();
    *store.get_mut(bid) = randn([1, 5, 1, 1], 4);
    let x = randn([2, 3, 5, 6], 5);
    let (y, cache) = layer.forward(&store, &x).unwrap();
    let probe = randn(y.dims(), 6);
    let mut grads = store.zeros_like();
    let gx = layer.backward(&store, &cache, &probe, &mut grads).unwrap();
    let e = check_input(&x, &gx, &spread(x.len(), 80), |xp| weighted_sum(&layer.infer(&store, xp).unwrap(), &probe));
    assert!(e <= LAYER_TOL, "dsconv input rel err {e}");
    let picks = all_param_picks(&store);
    let analytic = grads.blocks().to_vec();
    let e = check_params(&mut store, &analytic, &picks, |s| weighted_sum(&layer.infer(s, &x).unwrap(), &probe));
    assert!(e <= LAYER_TOL, "dsconv params rel err {e}");
}

#[test]
fn batchnorm_train_mode_gradients() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 3).unwrap();
    *store.get_mut(bn.gamma) = randn([1, 3, 1, 1], 7);
    *store.get_mut(bn.beta) = randn([1, 3, 1, 1], 8);
    let x = randn([3, 3, 3, 4], 9);
    let (y, cache) = bn.clone().forward(&store, &x).unwrap();
    let probe = randn(y.dims(), 10);
    let mut grads = store.zeros_like();
    let gx = bn.backward(&store, &cache, &probe, &mut grads).unwrap();
    let run = |s: &ParamStore<f64>, xp: &Tensor<f64>| weighted_sum(&bn.clone().forward(s, xp).unwrap().0, &probe);
    let e = check_input(&x, &gx, &(0..x.len()).collect::<Vec<_>>(), |xp| run(&store, xp));
    assert!(e <= LAYER_TOL, "bn input rel err {e}");
    let analytic = grads.blocks().to_vec();
    let picks = all_param_picks(&store);
    let e = check_params(&mut store, &analytic, &picks, |s| run(s, &x));
    assert!(e <= LAYER_TOL, "bn params rel err {e}");
}

fn attention_case<F, B>(store: &mut ParamStore<f64>, x: &Tensor<f64>, forward: F, backward: B, what: &str)
where
    F: Fn(&ParamStore<f64>, &Tensor<f64>) -> Tensor<f64>,
    B: Fn(&ParamStore<f64>, &Tensor<f64>, &mut nimbus_core::nn::GradStore<f64>) -> Tensor<f64>,
{
    let y = forward(store, x);
    let probe = randn(y.dims(), 200);
    let mut grads = store.zeros_like();
    let gx = backward(store, &probe, &mut grads);
    let e = check_input(x, &gx, &(0..x.len()).collect::<Vec<_>>(), |xp| weighted_sum(&forward(store, xp), &probe));
    assert!(e <= LAYER_TOL, "{what} input rel err {e}");
    let analytic = grads.blocks().to_vec();
    let picks = all_param_picks(store);
    let e = check_params(store, &analytic, &picks, |s| weighted_sum(&forward(s, x), &probe));
    assert!(e <= LAYER_TOL, "{what} params rel err {e}");
}

#[test]
fn channel_attention_gradients() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Initializer::new(11);
    let ca = ChannelAttention::new(&mut store, &mut init, "ca", 8, 2).unwrap();
    let x = randn([2, 8, 3, 3], 12);
    let ca2 = ca.clone();
    attention_case(
        &mut store,
        &x,
        |s, xp| ca.infer(s, xp).unwrap(),
        |s, g, grads| {
            let (_, cache) = ca2.forward(s, &x).unwrap();
            ca2.backward(s, &cache, g, grads).unwrap()
        },
        "channel attention",
    );
}

#[test]
fn spatial_attention_gradients() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Initializer::new(13);
    let sa = SpatialAttention::new(&mut store, &mut init, "sa", 7).unwrap();
    let bid = store.id_of("sa.conv.bias").unwrap();
    *store.get_mut(bid) = Tensor::vector(vec![0.3]);
    let x = randn([2, 3, 5, 4], 14);
    let sa2 = sa.clone();
    attention_case(
        &mut store,
        &x,
        |s, xp| sa.infer(s, xp).unwrap(),
        |s, g, grads| {
            let (_, cache) = sa2.forward(s, &x).unwrap();
            sa2.backward(s, &cache, g, grads).unwrap()
        },
        "spatial attention",
    );
}

#[test]
fn cbam_gradients() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Initializer::new(15);
    let cbam = Cbam::new(&mut store, &mut init, "cbam", 4, 2, 3).unwrap();
    let x = randn([2, 4, 4, 5], 16);
    let c2 = cbam.clone();
    attention_case(
        &mut store,
        &x,
        |s, xp| cbam.infer(s, xp).unwrap(),
        |s, g, grads| {
            let (_, cache) = c2.forward(s, &x).unwrap();
            c2.backward(s, &cache, g, grads).unwrap()
        },
        "cbam",
    );
}

#[test]
fn double_conv_gradients() {
    for separable in [true, false] {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(17);
        let mut block = if separable {
            DoubleConv::separable(&mut store, &mut init, "b", 3, 4, 2).unwrap()
        } else {
            DoubleConv::standard(&mut store, &mut init, "b", 3, 4).unwrap()
        };
        for name in ["b.bn1.beta", "b.bn2.beta"] {
            let id = store.id_of(name).unwrap();
            *store.get_mut(id) = randn([1, 4, 1, 1], 18).map(|v| 0.5 * v);
        }
        let x = randn([2, 3, 5, 5], 19);
        let (y, cache) = block.forward(&store, &x).unwrap();
        let probe = randn(y.dims(), 20);
        let mut grads = store.zeros_like();
        let gx = block.backward(&store, &cache, &probe, &mut grads).unwrap();
        let run = |s: &ParamStore<f64>, xp: &Tensor<f64>| weighted_sum(&block.clone().forward(s, xp).unwrap().0, &probe);
        let e = check_input(&x, &gx, &spread(x.len(), 80), |xp| run(&store, xp));
        assert!(e <= LAYER_TOL, "double conv (separable={separable}) input rel err {e}");
        let analytic = grads.blocks().to_vec();
        let picks = all_param_picks(&store);
        let e = check_params(&mut store, &analytic, &picks, |s| run(s, &x));
        assert!(e <= LAYER_TOL, "double conv (separable={separable}) params rel err {e}");
    }
}

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        in_channels: 4,
        out_channels: 2,
        stage_widths: [8, 16, 32, 64, 128],
        depth_multiplier: 1,
        cbam_reduction: 4,
        ..ModelConfig::default()
    }
}

#[test]
fn whole_model_matches_finite_differences() {
    let mut model = SmaAtUNet::<f64>::build(toy_config(), 21).unwrap();
    // non-trivial affine BN and head bias
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for (name, t) in model.params().names().to_vec().iter().zip(0..) {
        if name.ends_with(".beta") || name.ends_with(".bias") {
            let v = &mut model.params_mut().values_mut()[t];
            v.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.3..0.3));
        }
    }
    // 36x36 exercises reflect padding to 48
    let x = randn([2, 4, 36, 36], 23);
    let y = model.forward(&x, Mode::Train).unwrap();
    let probe = randn(y.dims(), 24);
    let grads = model.backward(&probe).unwrap();
    let analytic = grads.blocks().to_vec();

    // A conv bias feeding batch norm is cancelled by the mean subtraction,
    // so its exact gradient is zero and differencing only measures roundoff.
    let names = model.params().names().to_vec();
    let cancelled = |b: usize| names[b].contains(".dsc") && names[b].ends_with("pointwise.bias");
    let mut checkable = Vec::new();
    for b in 0..model.params().len() {
        if cancelled(b) {
            let g = analytic[b].data().iter().fold(0f64, |m, v| m.max(v.abs()));
            assert!(g < 1e-9, "{} gradient {g} should vanish", names[b]);
        } else {
            checkable.push(b);
        }
    }
    let blocks = checkable.len();
    let pick = |rng: &mut ChaCha8Rng, b: usize| {
        (b, rng.random_range(0..model.params().values()[b].len()))
    };
    let mut picks: Vec<(usize, usize)> = checkable.iter().map(|&b| pick(&mut rng, b)).collect();
    while picks.len() < blocks + 150 {
        let b = checkable[rng.random_range(0..blocks)];
        picks.push(pick(&mut rng, b));
    }

    // A pick whose one-sided differences disagree straddles a relu or
    // max-pool kink; the difference quotient is no reference there.
    let mut worst = (0f64, String::new());
    let (mut checked, mut kinked) = (0usize, 0usize);
    let mut next = 0usize;
    while checked < 200 {
        let (b, i) = if next < picks.len() {
            picks[next]
        } else {
            let b = checkable[rng.random_range(0..blocks)];
            (b, rng.random_range(0..model.params().values()[b].len()))
        };
        next += 1;
        let orig = model.params().values()[b].data()[i];
        let mut eval = |v: f64| {
            model.params_mut().values_mut()[b].data_mut()[i] = v;
            weighted_sum(&model.forward(&x, Mode::Train).unwrap(), &probe)
        };
        let (fp, f0, fm) = (eval(orig + MODEL_EPS), eval(orig), eval(orig - MODEL_EPS));
        model.params_mut().values_mut()[b].data_mut()[i] = orig;
        let (fwd, bwd) = ((fp - f0) / MODEL_EPS, (f0 - fm) / MODEL_EPS);
        if rel_err(fwd, bwd) > MODEL_TOL {
            kinked += 1;
            continue;
        }
        checked += 1;
        let e = rel_err(analytic[b].data()[i], (fp - fm) / (2.0 * MODEL_EPS));
        if e > worst.0 {
            worst = (e, format!("{}[{i}]", model.params().names()[b]));
        }
    }
    assert!(kinked * 10 <= checked, "{kinked} of {} picks hit kinks", checked + kinked);
    eprintln!("checked {checked}, skipped {kinked} kinked picks");
    assert!(worst.0 <= MODEL_TOL, "whole-model worst rel err {} at {}", worst.0, worst.1);
}

#[test]
fn duplicated_batch_keeps_mean_loss_and_halves_output_gradient() {
    let mut model = SmaAtUNet::<f64>::build(toy_config(), 31).unwrap();
    let x = randn([2, 4, 16, 16], 32);
    let rates = randn([2, 2, 32, 32], 33).map(|v| v.abs());
    let cfg = TrainConfig::default();

    let y1 = model.forward(&x, Mode::Train).unwrap();
    let (l1, g1) = batch_loss(&y1, &rates, &cfg).unwrap();
    let p1 = model.backward(&g1).unwrap();

    let x2 = Tensor::stack(&[&x, &x]).unwrap();
    let r2 = Tensor::stack(&[&rates, &rates]).unwrap();
    let y2 = model.forward(&x2, Mode::Train).unwrap();
    let (l2, g2) = batch_loss(&y2, &r2, &cfg).unwrap();
    let p2 = model.backward(&g2).unwrap();

    assert!((l1 - l2).abs() <= 1e-12 * l1.abs());
    for (a, b) in g1.data().iter().zip(&g2.data()[..g1.len()]) {
        assert!((0.5 * a - b).abs() <= 1e-15 + 1e-12 * a.abs());
    }
    for (a, b) in p1.blocks().iter().zip(p2.blocks()) {
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()), "param grads differ: {u} vs {v}");
        }
    }
}
