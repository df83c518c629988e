use rand::Rng;

use super::*;
use crate::rng::stream;
use crate::tensor::{finite_difference_check, Tensor};

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = stream(seed, &[]);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn random_probs(b: usize, n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let logits = random(&[b, n, h, w], seed, -2.0, 2.0);
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let p = tape.softmax_channels(l).unwrap();
    tape.value(p).clone()
}

fn sft_cfg(classes: usize) -> SftConfig {
    SftConfig {
        classes,
        branch_width: 6,
        head_kernel: 3,
    }
}

fn force_heads(layer: &mut SftLayer, gamma: f64, beta: f64) {
    let heads = layer.heads.clone();
    for (conv, bias) in [(heads.gamma, gamma), (heads.beta, beta)] {
        layer.params.get_mut(conv.weight_index()).data_mut().fill(0.0);
        layer.params.get_mut(conv.bias_index()).data_mut().fill(bias);
    }
}

fn sft_run(layer: &SftLayer, features: &Tensor, condition: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let p = layer.params.bind(&mut tape, false);
    let f = tape.constant(features.clone());
    let c = tape.constant(condition.clone());
    let out = layer.forward(&mut tape, &p, f, c).unwrap();
    tape.value(out).clone()
}

#[test]
fn sft_forced_identity_is_exact() {
    let mut layer = SftLayer::new(4, 5, 6, 3, 1);
    force_heads(&mut layer, 1.0, 0.0);
    let f = random(&[2, 5, 6, 6], 2, -3.0, 3.0);
    let c = random_probs(2, 4, 6, 6, 3);
    assert_eq!(sft_run(&layer, &f, &c), f);
}

#[test]
fn sft_zero_gamma_ignores_features() {
    let mut layer = SftLayer::new(4, 5, 6, 3, 1);
    force_heads(&mut layer, 0.0, 0.25);
    let c = random_probs(1, 4, 6, 6, 3);
    let a = sft_run(&layer, &random(&[1, 5, 6, 6], 4, -1.0, 1.0), &c);
    let b = sft_run(&layer, &random(&[1, 5, 6, 6], 5, -9.0, 9.0), &c);
    assert_eq!(a, b);
    assert!(a.data().iter().all(|&v| v == 0.25));
}

#[test]
fn sft_matches_elementwise_oracle() {
    let layer = SftLayer::new(3, 4, 6, 3, 7);
    let f = random(&[2, 4, 5, 5], 8, -1.0, 1.0);
    let c = random_probs(2, 3, 5, 5, 9);
    let mut tape = Tape::new();
    let p = layer.params.bind(&mut tape, false);
    let cv = tape.constant(c.clone());
    let (g, b) = layer.modulation(&mut tape, &p, cv).unwrap();
    let (g, b) = (tape.value(g).clone(), tape.value(b).clone());
    let out = sft_run(&layer, &f, &c);
    for i in 0..f.len() {
        let want = g.data()[i] * f.data()[i] + b.data()[i];
        assert!((out.data()[i] - want).abs() < 1e-12);
    }
    // near-identity at initialisation
    assert!(g.data().iter().all(|v| (v - 1.0).abs() < 0.5));
}

#[test]
fn sft_rejects_misaligned_inputs() {
    let layer = SftLayer::new(3, 4, 6, 1, 7);
    let mut tape = Tape::new();
    let p = layer.params.bind(&mut tape, false);
    let f = tape.constant(Tensor::zeros(&[1, 4, 5, 5]));
    let c = tape.constant(Tensor::zeros(&[1, 3, 4, 5]));
    assert!(matches!(layer.forward(&mut tape, &p, f, c), Err(crate::Error::Config(_))));
}

#[test]
fn sft_gradients_match_finite_differences() {
    let layer = SftLayer::new(3, 2, 4, 3, 11);
    let f = random(&[1, 2, 5, 5], 12, -1.0, 1.0);
    let c = random_probs(1, 3, 5, 5, 13);
    let wts = random(&[1, 2, 5, 5], 14, -1.0, 1.0);
    let objective = |tape: &mut Tape, out: Var| -> crate::Result<Var> {
        let w = tape.constant(wts.clone());
        let m = tape.mul(out, w)?;
        tape.sum(m)
    };
    let err = finite_difference_check(
        |tape, x| {
            let p = layer.params.bind(tape, false);
            let cv = tape.constant(c.clone());
            let out = layer.forward(tape, &p, x, cv)?;
            objective(tape, out)
        },
        &f,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "features {err}");
    let err = finite_difference_check(
        |tape, x| {
            let p = layer.params.bind(tape, false);
            let fv = tape.constant(f.clone());
            let out = layer.forward(tape, &p, fv, x)?;
            objective(tape, out)
        },
        &c,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "condition {err}");
    let gi = layer.heads.gamma.weight_index();
    let err = finite_difference_check(
        |tape, x| {
            let p = layer.params.bind(tape, false).with(gi, x);
            let fv = tape.constant(f.clone());
            let cv = tape.constant(c.clone());
            let out = layer.forward(tape, &p, fv, cv)?;
            objective(tape, out)
        },
        layer.params.get(gi),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "gamma weights {err}");
}

#[test]
fn segmentation_shapes_and_probabilities() {
    let net = SegNetTiny::new(SegConfig::new(5), 3).unwrap();
    let x = random(&[2, 3, 16, 12], 1, 0.0, 1.0);
    let (logits, probs) = net.infer(&x).unwrap();
    assert_eq!(logits.shape(), &[2, 5, 16, 12]);
    assert!(logits.is_finite());
    for b in 0..2 {
        for px in 0..16 * 12 {
            let s: f64 = (0..5).map(|c| probs.data()[(b * 5 + c) * 192 + px]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
    assert!(matches!(
        net.infer(&Tensor::zeros(&[1, 3, 10, 12])),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn zero_body_residual_denoiser_is_identity() {
    let mut den = DenoiserTiny::new(DenoiserConfig::plain(1, 8), 4).unwrap();
    for (name, t) in den.params.names().to_vec().into_iter().zip(den.params.tensors_mut()) {
        if name.starts_with("den.body") {
            t.data_mut().fill(0.0);
        }
    }
    let x = random(&[2, 3, 64, 64], 5, 0.0, 1.0);
    let y = den.infer(&[&x], None).unwrap();
    assert_eq!(y, x);
}

#[test]
fn denoiser_structure() {
    let plain = DenoiserTiny::new(DenoiserConfig::plain(1, 8), 4).unwrap();
    let cond = DenoiserTiny::new(DenoiserConfig::conditioned(1, 8, sft_cfg(4)), 4).unwrap();
    assert_eq!(plain.sft_sites(), 0);
    assert_eq!(cond.sft_sites(), BODY_DILATIONS.len() + 1);
    assert!(cond.params.scalar_count() > plain.params.scalar_count());
    assert!(cond.params.names().iter().all(|n| !n.starts_with("den.sft.head")));

    let x = random(&[2, 3, 12, 12], 5, 0.0, 1.0);
    let c = random_probs(2, 4, 12, 12, 6);
    assert_eq!(cond.infer(&[&x], Some(&c)).unwrap().shape(), x.shape());
    assert!(cond.infer(&[&x], None).is_err());
    assert!(plain.infer(&[&x], Some(&c)).is_err());
    assert!(matches!(
        cond.infer(&[&x], Some(&random_probs(2, 4, 10, 12, 6))),
        Err(crate::Error::Config(_))
    ));

    let two = DenoiserTiny::new(DenoiserConfig::conditioned(2, 8, sft_cfg(4)), 4).unwrap();
    let y = random(&[2, 3, 12, 12], 7, 0.0, 1.0);
    assert_eq!(two.infer(&[&x, &y], Some(&c)).unwrap().shape(), x.shape());
    assert!(two.infer(&[&x, &random(&[2, 3, 8, 12], 7, 0.0, 1.0)], Some(&c)).is_err());
}

#[test]
fn fresh_denoiser_is_near_identity() {
    let den = DenoiserTiny::new(DenoiserConfig::conditioned(1, 16, sft_cfg(4)), 9).unwrap();
    let x = random(&[1, 3, 32, 32], 10, 0.0, 1.0);
    let c = random_probs(1, 4, 32, 32, 11);
    let y = den.infer(&[&x], Some(&c)).unwrap();
    let mad = y.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
    assert!(mad < 0.05, "{mad}");
}

#[test]
fn image_condition_has_identical_parameter_count() {
    // the image-conditioned control reuses the conditioned architecture with
    // the image replicated to N channels
    for n in [2, 3, 4, 7] {
        let sd = DenoiserTiny::new(DenoiserConfig::conditioned(1, 8, sft_cfg(n)), 1).unwrap();
        let img = DenoiserTiny::new(DenoiserConfig::conditioned(1, 8, sft_cfg(n)), 2).unwrap();
        assert_eq!(sd.params.scalar_count(), img.params.scalar_count());
    }
}

fn small_sdb(seed: u64) -> Sdb {
    let seg = SegConfig {
        classes: 3,
        widths: [4, 4, 4],
    };
    let den = DenoiserConfig::conditioned(1, 4, sft_cfg(3));
    Sdb::new(seg, den, seed).unwrap()
}

#[test]
fn block_probabilities_equal_standalone_segmentation() {
    let sdb = small_sdb(3);
    let x = random(&[2, 3, 8, 8], 4, 0.0, 1.0);
    let mut tape = Tape::new();
    let b = sdb.bind(&mut tape, false, false);
    let xv = tape.constant(x.clone());
    let (probs, denoised) = sdb.forward(&mut tape, &b, xv, None).unwrap();
    assert_eq!(tape.value(probs), &sdb.seg.infer(&x).unwrap().1);
    let direct = sdb.den.infer(&[&x], Some(tape.value(probs))).unwrap();
    assert_eq!(tape.value(denoised), &direct);
}

#[test]
fn block_mismatched_condition_is_rejected() {
    let den = DenoiserConfig::conditioned(1, 4, sft_cfg(4));
    assert!(Sdb::new(SegConfig::new(3), den, 0).is_err());
    assert!(Sdb::new(SegConfig::new(3), DenoiserConfig::plain(1, 4), 0).is_err());
}

#[test]
fn block_gradients_reach_segmentation_parameters() {
    let sdb = small_sdb(5);
    let x = random(&[1, 3, 8, 8], 6, 0.0, 1.0);
    let wts = random(&[1, 3, 8, 8], 7, -1.0, 1.0);
    let enc = sdb.seg.params.names().iter().position(|n| n == "seg.enc1.weight").unwrap();
    let f = |tape: &mut Tape, v: Var| -> crate::Result<Var> {
        let mut b = sdb.bind(tape, false, false);
        b.seg = b.seg.with(enc, v);
        let xv = tape.constant(x.clone());
        let (_, d) = sdb.forward(tape, &b, xv, None)?;
        let w = tape.constant(wts.clone());
        let m = tape.mul(d, w)?;
        tape.sum(m)
    };
    let err = finite_difference_check(f, sdb.seg.params.get(enc), 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");

    let mut tape = Tape::new();
    let v = tape.leaf(sdb.seg.params.get(enc).clone(), true);
    let out = f(&mut tape, v).unwrap();
    tape.backward(out).unwrap();
    let g = tape.take_grad(v).unwrap();
    assert!(g.data().iter().any(|&v| v != 0.0));
}

#[test]
fn forwards_are_deterministic() {
    let a = small_sdb(8);
    let b = small_sdb(8);
    assert_eq!(a.seg.params, b.seg.params);
    assert_eq!(a.den.params.digest(), b.den.params.digest());
    assert_ne!(a.den.params.digest(), small_sdb(9).den.params.digest());
    let x = random(&[1, 3, 8, 8], 1, 0.0, 1.0);
    assert_eq!(a.seg.infer(&x).unwrap(), b.seg.infer(&x).unwrap());
}

#[test]
fn layout_diff_names_the_offending_tensors() {
    let a = SegNetTiny::new(SegConfig::new(3), 0).unwrap();
    let b = SegNetTiny::new(SegConfig::new(4), 0).unwrap();
    let diff = a.params.layout_diff(&b.params).unwrap();
    assert!(diff.contains("seg.classifier.weight"), "{diff}");
    assert!(!diff.contains("seg.enc1"), "{diff}");
    let mut c = a.params.clone();
    assert!(matches!(c.load_from(&b.params), Err(crate::Error::CheckpointMismatch(_))));
    assert!(a.params.layout_diff(&a.params).is_none());
}
