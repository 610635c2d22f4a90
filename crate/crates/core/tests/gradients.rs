mod common;

use common::*;
use pathlm::encoder::{Head, ModelWeights};

fn check(seed: u64, obj: Objective, dropout: Option<u64>, stencil: Stencil, tol: f64) {
    let w = gradcheck_model(seed);
    let step = match stencil {
        Stencil::Central => 1e-4,
        Stencil::SevenPoint => 4e-3,
    };
    // Below ~1e-5 the f64 rounding floor of the difference quotient
    // (about 1e-11 absolute) dominates any stencil.
    let floor = match stencil {
        Stencil::Central => 1e-6,
        Stencil::SevenPoint => 1e-5,
    };
    let (err, at) = max_relative_error(&w, &gradcheck_batch(), obj, dropout, stencil, step, floor);
    println!("{obj:?} dropout={dropout:?} {stencil:?}: max relative error {err:e}");
    assert!(err < tol, "{obj:?}: max relative error {err} at {at}");
}

#[test]
fn mlm_gradients_match_central_differences() {
    check(11, Objective::Mlm, None, Stencil::Central, 1e-3);
}

#[test]
fn cls_gradients_match_central_differences() {
    check(12, Objective::Cls, None, Stencil::Central, 1e-3);
}

#[test]
fn f64_gradients_match_seven_point_differences_tightly() {
    check(11, Objective::Mlm, None, Stencil::SevenPoint, 1e-6);
    check(12, Objective::Cls, None, Stencil::SevenPoint, 1e-6);
}

#[test]
fn gradients_through_realized_dropout_masks() {
    for obj in [Objective::Mlm, Objective::Cls] {
        check(13, obj, Some(99), Stencil::Central, 1e-3);
        check(13, obj, Some(99), Stencil::SevenPoint, 1e-6);
    }
}

#[test]
fn gradients_scale_linearly_with_the_loss() {
    let w = gradcheck_model(14);
    let batch = gradcheck_batch();
    let (logits, trace) = w.forward(&batch, &Head::Cls, None).unwrap();
    let loss = pathlm::encoder::cls_loss(&logits, &CLS_TARGETS).unwrap();
    let g1 = w.backward(&trace, &loss.dlogits).unwrap();
    let mut scaled = loss.dlogits.clone();
    scaled.scale(3.5);
    let g2 = w.backward(&trace, &scaled).unwrap();
    for ((name, a), (_, b)) in g1.named_tensors().into_iter().zip(g2.named_tensors()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x * 3.5 - y).abs() <= 1e-6 * (1.0 + y.abs()), "{name}");
        }
    }
}

#[test]
fn perfect_logits_give_near_zero_head_bias_gradient() {
    let w = gradcheck_model(15);
    let batch = gradcheck_batch();
    let (logits, trace) = w.forward(&batch, &Head::Cls, None).unwrap();
    // Targets equal to the model's own confident decisions at huge scale.
    let mut sharp = w.clone();
    let cls = sharp.cls.as_mut().unwrap();
    cls.weight.scale(1e4);
    cls.bias.scale(1e4);
    let (sharp_logits, sharp_trace) = sharp.forward(&batch, &Head::Cls, None).unwrap();
    let targets: Vec<f64> = sharp_logits
        .data
        .iter()
        .map(|&z| if z > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let loss = pathlm::encoder::cls_loss(&sharp_logits, &targets).unwrap();
    let g = sharp.backward(&sharp_trace, &loss.dlogits).unwrap();
    assert!(g.cls.unwrap().bias.data.iter().all(|x| x.abs() < 1e-6));
    let _ = (logits, trace);
}

#[test]
fn backward_rejects_mismatched_trace() {
    let w = gradcheck_model(16);
    let (logits, trace) = w.forward(&gradcheck_batch(), &Head::Cls, None).unwrap();
    let other = ModelWeights::<f64>::init(
        pathlm::encoder::EncoderConfig {
            hidden_dim: 8,
            ..gradcheck_config()
        },
        0,
    )
    .unwrap();
    assert!(other.backward(&trace, &logits).is_err());
    let wrong = pathlm::tensor::Tensor::<f64>::zeros(&[2, 30]);
    assert!(w.backward(&trace, &wrong).is_err());
}
