//! Finite-difference validation of every differentiable primitive and of the
//! composite model losses built from them.

use rand::Rng;
use sprout_core::model::{build_model, Architecture, ModelSpec};
use sprout_core::rng::{stream_rng, Stream};
use sprout_core::tape::{finite_diff_check, Tape};
use sprout_core::tensor::Tensor;
use sprout_core::vicinity::gce_loss;

fn randt(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = stream_rng(seed, Stream::Eval, 0);
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Check d(scalar loss)/dx against central differences; `f` receives a tape
/// and the recorded leaf and must return a scalar.
fn check<F>(f: F, x: &Tensor)
where
    F: Fn(&mut Tape, &Tensor) -> sprout_core::Result<Tensor>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x);
    let loss = f(&mut tape, &leaf).unwrap();
    let id = leaf.node().unwrap();
    let grads = tape.backward(&loss, &[id]).unwrap();
    let analytic = grads.get_or_zeros(id, x.shape()).into_data();

    let err = finite_diff_check(
        |xp| {
            let mut t = Tape::new();
            let l = t.leaf(xp);
            f(&mut t, &l)?.scalar_value()
        },
        x,
        &analytic,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "finite-difference mismatch: {err}");
}

#[test]
fn add_sub_mul_scale() {
    let x = randt(&[3, 4], 1, -1.0, 1.0);
    let other = randt(&[3, 4], 2, -1.0, 1.0);
    check(|t, l| { let o = t.add(l, &other)?; Ok(t.sum(&o)) }, &x);
    check(|t, l| { let o = t.sub(&other, l)?; Ok(t.sum(&o)) }, &x);
    check(
        |t, l| {
            let o = t.mul(l, &other)?;
            let o = t.mul(&o, l)?; // quadratic term exercises both slots
            Ok(t.sum(&o))
        },
        &x,
    );
    check(|t, l| { let o = t.scale(l, -2.5); Ok(t.mean(&o)) }, &x);
}

#[test]
fn row_and_channel_bias_broadcasts() {
    let m = randt(&[4, 3], 3, -1.0, 1.0);
    let bias = randt(&[3], 4, -1.0, 1.0);
    check(|t, l| { let o = t.add(l, &bias)?; let o = t.mul(&o, &o)?; Ok(t.sum(&o)) }, &m);
    check(|t, l| { let o = t.add(&m, l)?; let o = t.mul(&o, &o)?; Ok(t.sum(&o)) }, &bias);

    let nchw = randt(&[2, 3, 2, 2], 5, -1.0, 1.0);
    let cbias = randt(&[3], 6, -1.0, 1.0);
    check(|t, l| { let o = t.add(l, &cbias)?; let o = t.mul(&o, &o)?; Ok(t.sum(&o)) }, &nchw);
    check(|t, l| { let o = t.add(&nchw, l)?; let o = t.mul(&o, &o)?; Ok(t.sum(&o)) }, &cbias);
}

#[test]
fn matmul_both_arguments() {
    let a = randt(&[3, 4], 7, -1.0, 1.0);
    let b = randt(&[4, 2], 8, -1.0, 1.0);
    check(|t, l| { let o = t.matmul(l, &b)?; let o = t.mul(&o, &o)?; Ok(t.sum(&o)) }, &a);
    check(|t, l| { let o = t.matmul(&a, l)?; let o = t.mul(&o, &o)?; Ok(t.sum(&o)) }, &b);
}

#[test]
fn conv2d_input_and_weight() {
    let x = randt(&[2, 2, 5, 5], 9, -1.0, 1.0);
    let w = randt(&[3, 2, 3, 3], 10, -0.5, 0.5);
    check(|t, l| { let o = t.conv2d(l, &w)?; let o = t.mul(&o, &o)?; Ok(t.sum(&o)) }, &x);
    check(|t, l| { let o = t.conv2d(&x, l)?; let o = t.mul(&o, &o)?; Ok(t.sum(&o)) }, &w);
}

#[test]
fn pointwise_nonlinearities() {
    // offsets keep coordinates away from the relu/clip kinks
    let x = randt(&[3, 5], 11, 0.3, 1.7);
    check(|t, l| { let o = t.relu(l); Ok(t.sum(&o)) }, &x);
    check(|t, l| { let o = t.log(l)?; Ok(t.sum(&o)) }, &x);
    check(|t, l| { let o = t.exp(l); Ok(t.sum(&o)) }, &x);
    check(|t, l| { let o = t.clip(l, 0.5, 1.5); let o = t.mul(&o, &o)?; Ok(t.sum(&o)) }, &x);
    // mixed-sign input exercises relu's kink exclusion
    let x = randt(&[4, 4], 12, -1.0, 1.0);
    check(|t, l| { let o = t.relu(l); let o = t.mul(&o, &o)?; Ok(t.sum(&o)) }, &x);
}

#[test]
fn softmax_families() {
    let x = randt(&[3, 6], 13, -2.0, 2.0);
    let weights = randt(&[3, 6], 14, -1.0, 1.0);
    check(|t, l| { let o = t.softmax(l)?; let o = t.mul(&o, &weights)?; Ok(t.sum(&o)) }, &x);
    check(|t, l| { let o = t.log_softmax(l)?; let o = t.mul(&o, &weights)?; Ok(t.sum(&o)) }, &x);
}

#[test]
fn reductions_gather_pool_reshape() {
    let x = randt(&[2, 3, 4], 15, -1.0, 1.0);
    check(|t, l| Ok(t.sum(l)), &x);
    check(|t, l| Ok(t.mean(l)), &x);
    check(
        |t, l| {
            let o = t.reshape(l, vec![6, 4])?;
            let o = t.mul(&o, &o)?;
            Ok(t.sum(&o))
        },
        &x,
    );

    let m = randt(&[4, 3], 16, -1.0, 1.0);
    check(
        |t, l| {
            let picked = t.gather(l, &[2, 0, 1, 2])?;
            let o = t.mul(&picked, &picked)?;
            Ok(t.sum(&o))
        },
        &m,
    );

    let nchw = randt(&[2, 3, 4, 4], 17, -1.0, 1.0);
    check(
        |t, l| {
            let pooled = t.global_avg_pool(l)?;
            let o = t.mul(&pooled, &pooled)?;
            Ok(t.sum(&o))
        },
        &nchw,
    );
}

#[test]
fn margin_loss_gradient() {
    // margins comfortably away from zero so no coordinate sits on the kink
    let logits = Tensor::new(
        vec![3, 4],
        vec![
            2.0, -1.0, 0.5, 0.0, // correct by a margin
            -1.0, 3.0, 1.0, 0.0, // wrong: clamped, zero grad
            0.9, 0.1, -0.5, -2.0, // correct, small margin
        ],
    )
    .unwrap();
    check(|t, l| t.cw_margin(l, &[0, 0, 0]), &logits);
}

#[test]
fn model_losses_wrt_input() {
    for (arch, shape) in [
        (Architecture::Mlp, vec![1, 4, 4]),
        (Architecture::Cnn, vec![2, 5, 5]),
    ] {
        let spec = ModelSpec {
            architecture: arch,
            width_factor: 1,
            input_shape: shape.clone(),
            num_classes: 3,
        };
        let model = build_model(&spec, 21).unwrap();
        let mut xshape = vec![2];
        xshape.extend(shape);
        let x = randt(&xshape, 22, 0.05, 0.95);
        let labels = Tensor::new(vec![2, 3], vec![0.8, 0.1, 0.1, 0.0, 0.3, 0.7]).unwrap();
        check(
            |t, l| {
                let (logits, _) = model.forward_on(t, l, false)?;
                gce_loss(t, &logits, &labels)
            },
            &x,
        );
    }
}

#[test]
fn model_loss_wrt_every_parameter() {
    let spec = ModelSpec {
        architecture: Architecture::Cnn,
        width_factor: 1,
        input_shape: vec![1, 5, 5],
        num_classes: 3,
    };
    let model = build_model(&spec, 23).unwrap();
    let x = randt(&[2, 1, 5, 5], 24, 0.05, 0.95);
    let labels = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();

    let mut tape = Tape::new();
    let (logits, ids) = model.forward_on(&mut tape, &x, true).unwrap();
    let loss = gce_loss(&mut tape, &logits, &labels).unwrap();
    let grads = tape.backward(&loss, &ids).unwrap();

    for (id, (name, param)) in ids.iter().zip(&model.params) {
        let analytic = grads.get_or_zeros(*id, param.shape()).into_data();
        let err = finite_diff_check(
            |p| {
                let mut perturbed = model.clone();
                let slot = perturbed.params.iter_mut().find(|(n, _)| n == name).unwrap();
                slot.1 = p.clone();
                let mut t = Tape::new();
                let (lg, _) = perturbed.forward_on(&mut t, &x, false)?;
                gce_loss(&mut t, &lg, &labels)?.scalar_value()
            },
            param,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{name}: finite-difference mismatch {err}");
    }
}

#[test]
fn gradient_of_non_influencing_leaf_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(&randt(&[2, 2], 25, -1.0, 1.0));
    let unused = tape.leaf(&randt(&[3], 26, -1.0, 1.0));
    let s = tape.sum(&x);
    let grads = tape.backward(&s, &[unused.node().unwrap()]).unwrap();
    let g = grads.get_or_zeros(unused.node().unwrap(), &[3]);
    assert!(g.data().iter().all(|&v| v == 0.0));
}
