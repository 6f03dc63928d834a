//! Finite-difference checks of sampled network weights against autograd,
//! through the same loss compositions the training phases use.

use candle_core::{DType, Device, Tensor, Var};
use fuseg_core::losses::{loss_fusion, loss_seg, FusionLossConfig};
use fuseg_core::model::{Model, ModelConfig};
use fuseg_core::nn::gradcheck;
use fuseg_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-3;
const RTOL: f64 = 1e-2;
const ATOL: f64 = 1e-7;
const SIDE: usize = 16;
const LAMBDA: (f64, f64) = (0.5, 0.5);

fn small_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.seg.widths = [8, 8, 16, 16];
    cfg.seg.depths = [1, 1, 1, 1];
    cfg.seg.heads = [1, 1, 2, 2];
    cfg.seg.decoder_width = 8;
    cfg.fusion.base_channels = 4;
    cfg.fusion.growth = 4;
    cfg.fusion.layers = 2;
    cfg.fusion.decoder_width = 4;
    cfg.fusion.tap_channels = 4;
    cfg.fusion.hia.channels = 4;
    cfg.fusion.hia.heads = 2;
    // non-zero output layers so every HIA weight reaches the loss
    cfg.fusion.hia.zero_init_output = false;
    cfg
}

struct Fixture {
    model: Model,
    x: Tensor,
    y: Tensor,
    labels: Vec<u16>,
}

fn fixture(seed: u64) -> Fixture {
    let cfg = small_config();
    let model = Model::new(&cfg, seed, DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = SIDE * SIDE;
    let mut img = || -> Tensor {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        Tensor::from_vec(v, (1, 1, SIDE, SIDE), &Device::Cpu).unwrap()
    };
    let (x, y) = (img(), img());
    let labels = (0..n)
        .map(|_| rng.random_range(0..cfg.seg.num_classes as u16))
        .collect();
    Fixture { model, x, y, labels }
}

fn samples(var: &Var) -> Vec<usize> {
    let n = var.elem_count();
    vec![0, n / 3, n / 2, n - 1]
}

fn assert_agrees(name: &str, var: &Var, loss: impl Fn() -> Result<Tensor>) {
    for s in gradcheck::check(var, &samples(var), EPS, loss).unwrap() {
        assert!(s.agrees(RTOL, ATOL), "{name}: {s:?}");
    }
}

/// Fusion-phase objective: seg frozen, `λ1·L_f + λ2·L_s` on the fused image.
fn fusion_phase_loss(f: &Fixture) -> Result<Tensor> {
    let u = f.model.fuse(&f.x, &f.y)?.fused;
    let l_f = loss_fusion(&u, &f.x, &f.y, &FusionLossConfig::default())?.total;
    let l_s = loss_seg(&f.model.segment(&u)?, &f.labels, 255)?;
    Ok(((l_f * LAMBDA.0)? + (l_s * LAMBDA.1)?)?)
}

/// Segmentation-phase objective: fusion frozen, cross-entropy on `u`.
fn seg_phase_loss(f: &Fixture) -> Result<Tensor> {
    let u = f.model.fuse(&f.x, &f.y)?.fused;
    loss_seg(&f.model.segment(&u)?, &f.labels, 255)
}

#[test]
fn fusion_loss_reaches_drdb_and_hia_weights() {
    let f = fixture(3);
    f.model.seg_params.set_frozen(true);
    let drdb = f.model.fusion.drdb_ir().dense_weight(1).unwrap().var().clone();
    assert_agrees("drdb_ir.dense1", &drdb, || fusion_phase_loss(&f));
    for name in [
        "hia0.embed_ir.modality.weight",
        "hia0.embed_seg.semantic.weight",
        "hia1.vis.q.weight",
        "hia0.mlp_ir.fc1.weight",
        "hia1.mlp_vis.fc2.weight",
    ] {
        let var = f
            .model
            .fusion_params
            .get(name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        assert_agrees(name, &var, || fusion_phase_loss(&f));
    }
}

/// A stem weight shifts every pixel, so a step of 1e-3 crosses activation
/// and |·| kinks; the finite difference must converge as the step shrinks.
#[test]
fn stem_gradient_converges_under_small_steps() {
    let f = fixture(3);
    f.model.seg_params.set_frozen(true);
    let stem = f.model.fusion.drdb_vis().stem_weight().var().clone();
    for s in gradcheck::check(&stem, &samples(&stem), 1e-5, || fusion_phase_loss(&f)).unwrap() {
        assert!(s.agrees(1e-6, 1e-10), "{s:?}");
    }
}

#[test]
fn cross_entropy_reaches_seg_encoder_and_decoder() {
    let f = fixture(4);
    f.model.fusion_params.set_frozen(true);
    assert_agrees("encoder probe", f.model.seg.encoder_probe().var(), || {
        seg_phase_loss(&f)
    });
    assert_agrees("decoder probe", f.model.seg.decoder_probe().var(), || {
        seg_phase_loss(&f)
    });
    let deep = f
        .model
        .seg_params
        .named_vars()
        .into_iter()
        .find(|(n, _)| n.starts_with("encoder.stage2") && n.ends_with("weight") && !n.contains("norm"))
        .expect("a stage-2 encoder weight");
    assert_agrees(&deep.0, &deep.1, || seg_phase_loss(&f));
}

#[test]
fn frozen_sets_receive_no_gradient() {
    let f = fixture(5);
    f.model.seg_params.set_frozen(true);
    let grads = fusion_phase_loss(&f).unwrap().backward().unwrap();
    assert!(f
        .model
        .seg_params
        .vars()
        .iter()
        .all(|v| grads.get(v.as_tensor()).is_none()));
    assert!(f
        .model
        .fusion_params
        .vars()
        .iter()
        .any(|v| grads.get(v.as_tensor()).is_some()));
}
