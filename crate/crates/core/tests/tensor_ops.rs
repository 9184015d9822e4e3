mod common;

use common::{naive_conv2d, params_with, random_tensor, rng};
use tofa::tensor::{
    cosine_warmup_lr, sgd_step, BnMode, ConvSpec, Graph, OptimizerState, ParamSet, Tensor,
};
use tofa::Error;

#[test]
fn conv_scalar_multiply() {
    let params = params_with(vec![("w", Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap())]);
    let w = params.view(params.id("w").unwrap());
    let mut g = Graph::new(&params);
    let x = g.input(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
    let y = g.conv2d(x, w, None, ConvSpec::new(1, 0, 1)).unwrap();
    assert_eq!(g.value(y), &[6.0]);
}

#[test]
fn depthwise_ones_counts_kernel_support() {
    let params = params_with(vec![("w", Tensor::full(&[4, 1, 3, 3], 1.0))]);
    let w = params.view(params.id("w").unwrap());
    let mut g = Graph::new(&params);
    let x = g.input(Tensor::full(&[1, 4, 8, 8], 1.0));
    let y = g.conv2d(x, w, None, ConvSpec::depthwise(3, 1, 4)).unwrap();
    let v = g.value(y);
    for c in 0..4 {
        let plane = &v[c * 64..(c + 1) * 64];
        assert_eq!(plane[0], 4.0);
        assert_eq!(plane[7], 4.0);
        assert_eq!(plane[63], 4.0);
        assert_eq!(plane[8 + 1], 9.0);
        assert_eq!(plane[3 * 8 + 4], 9.0);
        assert_eq!(plane[1], 6.0);
    }
}

#[test]
fn conv_matches_direct_loop_oracle() {
    let mut r = rng(11);
    let cases = [
        // (n, cin, h, w, cout, k, stride, groups)
        (2, 3, 8, 8, 5, 3, 1, 1),
        (2, 3, 8, 8, 4, 1, 1, 1),
        (2, 6, 7, 9, 6, 5, 2, 6),
        (1, 4, 8, 8, 6, 3, 2, 2),
        (3, 8, 5, 5, 8, 3, 1, 8),
        (2, 2, 6, 6, 3, 5, 2, 1),
    ];
    for (i, &(n, cin, h, w, cout, k, stride, groups)) in cases.iter().enumerate() {
        let x = random_tensor(&[n, cin, h, w], &mut r);
        let wt = random_tensor(&[cout, cin / groups, k, k], &mut r);
        let b = random_tensor(&[cout], &mut r);
        let params = params_with(vec![("w", wt.clone()), ("b", b.clone())]);
        let mut g = Graph::new(&params);
        let xv = g.input(x.clone());
        let spec = ConvSpec::new(stride, k / 2, groups);
        let y = g
            .conv2d(
                xv,
                params.view(params.id("w").unwrap()),
                Some(params.view(params.id("b").unwrap())),
                spec,
            )
            .unwrap();
        let (expect, shape) = naive_conv2d(
            x.data(),
            [n, cin, h, w],
            wt.data(),
            cout,
            k,
            Some(b.data()),
            stride,
            k / 2,
            groups,
        );
        assert_eq!(g.shape(y), shape);
        let max = g
            .value(y)
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max < 1e-5, "case {i}: max diff {max}");
    }
}

#[test]
fn sliced_view_matches_copied_weights() {
    // A 3x3 window cropped from a 5x5 depthwise kernel and the first 3 of 6
    // output rows of a dense conv must equal convolving with copies.
    let mut r = rng(5);
    let full_dw = random_tensor(&[6, 1, 5, 5], &mut r);
    let full_pw = random_tensor(&[6, 6, 1, 1], &mut r);
    let params = params_with(vec![("dw", full_dw.clone()), ("pw", full_pw.clone())]);
    let x = random_tensor(&[2, 4, 6, 6], &mut r);
    let mut g = Graph::new(&params);
    let xv = g.input(x.clone());
    let dwv = params.view(params.id("dw").unwrap()).sliced(4, 1, 3);
    let y = g.conv2d(xv, dwv, None, ConvSpec::depthwise(3, 1, 4)).unwrap();
    let pwv = params.view(params.id("pw").unwrap()).sliced(3, 4, 1);
    let z = g.conv2d(y, pwv, None, ConvSpec::new(1, 0, 1)).unwrap();

    let mut crop = Vec::new();
    for c in 0..4 {
        for ky in 1..4 {
            for kx in 1..4 {
                crop.push(full_dw.data()[c * 25 + ky * 5 + kx]);
            }
        }
    }
    let (y_ref, _) = naive_conv2d(x.data(), [2, 4, 6, 6], &crop, 4, 3, None, 1, 1, 4);
    let mut pw = Vec::new();
    for o in 0..3 {
        pw.extend_from_slice(&full_pw.data()[o * 6..o * 6 + 4]);
    }
    let (z_ref, _) = naive_conv2d(&y_ref, [2, 4, 6, 6], &pw, 3, 1, None, 1, 0, 1);
    let max = g
        .value(z)
        .iter()
        .zip(&z_ref)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max < 1e-5, "{max}");
}

#[test]
fn conv_rejects_bad_groups_and_shapes() {
    let params = params_with(vec![("w", Tensor::full(&[4, 1, 3, 3], 1.0))]);
    let w = params.view(params.id("w").unwrap());
    let mut g = Graph::new(&params);
    let x = g.input(Tensor::full(&[1, 3, 8, 8], 1.0));
    assert!(matches!(
        g.conv2d(x, w, None, ConvSpec::new(1, 1, 2)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        g.conv2d(x, w, None, ConvSpec::new(1, 1, 1)),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn batchnorm_train_normalizes() {
    let mut r = rng(3);
    let params = params_with(vec![
        ("bn.gamma", Tensor::full(&[3], 1.0)),
        ("bn.beta", Tensor::zeros(&[3])),
    ]);
    let mut x = random_tensor(&[4, 3, 5, 5], &mut r);
    x.data_mut().iter_mut().for_each(|v| *v = *v * 3.0 + 2.0);
    let mut g = Graph::new(&params);
    let xv = g.input(x);
    let y = g
        .batch_norm(
            xv,
            params.view(params.id("bn.gamma").unwrap()),
            params.view(params.id("bn.beta").unwrap()),
            BnMode::Train,
            1e-5,
            Some(0),
        )
        .unwrap();
    let v = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| v[(b * 3 + c) * 25..(b * 3 + c + 1) * 25].iter().map(|x| *x as f64))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-4, "{mean}");
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }
    assert_eq!(g.bn_records().len(), 1);
    assert_eq!(g.bn_records()[0].count, 100);
}

#[test]
fn batchnorm_eval_identity() {
    let mut r = rng(4);
    let params = params_with(vec![
        ("bn.gamma", Tensor::full(&[2], 1.0)),
        ("bn.beta", Tensor::zeros(&[2])),
    ]);
    let x = random_tensor(&[1, 2, 3, 3], &mut r);
    let mut g = Graph::new(&params);
    let xv = g.input(x.clone());
    let mean = [0.0, 0.0];
    let var = [1.0, 1.0];
    let y = g
        .batch_norm(
            xv,
            params.view(params.id("bn.gamma").unwrap()),
            params.view(params.id("bn.beta").unwrap()),
            BnMode::Eval {
                mean: &mean,
                var: &var,
            },
            1e-5,
            None,
        )
        .unwrap();
    for (a, b) in g.value(y).iter().zip(x.data()) {
        assert!((a - b).abs() <= b.abs() * 1e-5 + 1e-7);
    }
}

#[test]
fn batchnorm_rejects_single_sample_batch() {
    let params = params_with(vec![
        ("bn.gamma", Tensor::full(&[2], 1.0)),
        ("bn.beta", Tensor::zeros(&[2])),
    ]);
    let mut g = Graph::new(&params);
    let x = g.input(Tensor::full(&[1, 2, 4, 4], 1.0));
    let res = g.batch_norm(
        x,
        params.view(params.id("bn.gamma").unwrap()),
        params.view(params.id("bn.beta").unwrap()),
        BnMode::Train,
        1e-5,
        None,
    );
    assert!(matches!(res, Err(Error::DegenerateStats(_))));
}

#[test]
fn soft_cross_entropy_closed_forms() {
    let params = ParamSet::new();
    let mut g = Graph::new(&params);
    let logits = g.input(Tensor::full(&[1, 10], 0.7));
    let mut t = vec![0.0f32; 10];
    t[3] = 0.6;
    t[8] = 0.4;
    let l = g.soft_cross_entropy(logits, &t).unwrap();
    assert!((g.value(l)[0] - 10f32.ln()).abs() < 1e-6);

    let logits = g.input(Tensor::new(vec![1, 3], vec![10.0, 0.0, 0.0]).unwrap());
    let l = g.soft_cross_entropy(logits, &[1.0, 0.0, 0.0]).unwrap();
    let expect = (1.0 + 2.0 * (-10.0f64).exp()).ln();
    assert!((g.value(l)[0] as f64 - expect).abs() < 1e-8, "{} vs {expect}", g.value(l)[0]);
    assert!((expect - 9.08e-5).abs() < 1e-6);

    let bad = g.soft_cross_entropy(logits, &[0.5, 0.0, 0.0]);
    assert!(matches!(bad, Err(Error::Contract(_))));
}

#[test]
fn backward_relu_mask_and_product() {
    let params = ParamSet::new();
    let mut g = Graph::new(&params);
    let x = g.leaf(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
    let y = g.relu(x);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.var(x).unwrap(), &[1.0, 0.0]);

    let mut g = Graph::new(&params);
    let a = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let b = g.leaf(Tensor::new(vec![3], vec![-4.0, 5.0, 0.5]).unwrap());
    let p = g.mul(a, b).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.var(a).unwrap(), &[-4.0, 5.0, 0.5]);
    assert_eq!(grads.var(b).unwrap(), &[1.0, 2.0, 3.0]);
}

#[test]
fn backward_accumulates_fan_out() {
    let params = ParamSet::new();
    let mut g = Graph::new(&params);
    let x = g.leaf(Tensor::new(vec![4], vec![0.3, -2.0, 5.0, 1.0]).unwrap());
    let y = g.add(x, x).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.var(x).unwrap(), &[2.0; 4]);
}

#[test]
fn backward_needs_scalar() {
    let params = ParamSet::new();
    let mut g = Graph::new(&params);
    let x = g.leaf(Tensor::full(&[3], 1.0));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn gradient_checks_on_random_shapes() {
    for (name, chk) in common::primitive_gradient_checks(99) {
        assert!(chk.rel_err < 1e-3, "{name}: {chk:?}");
    }
}

#[test]
fn dropout_is_identity_in_eval_and_scaled_in_train() {
    let params = ParamSet::new();
    let mut r = rng(1);
    let mut g = Graph::new(&params);
    let x = g.leaf(Tensor::full(&[4, 1000], 1.0));
    assert_eq!(g.dropout(x, 0.3, false, &mut r), x);
    let y = g.dropout(x, 0.3, true, &mut r);
    let v = g.value(y);
    let kept = v.iter().filter(|v| **v > 0.0).count() as f32 / v.len() as f32;
    assert!((kept - 0.7).abs() < 0.03, "{kept}");
    assert!(v.iter().all(|x| *x == 0.0 || (*x - 1.0 / 0.7).abs() < 1e-6));

    let z = g.drop_connect(x, 0.5, true, &mut r);
    for row in g.value(z).chunks(1000) {
        assert!(row.iter().all(|v| *v == row[0]));
    }
}

#[test]
fn sgd_examples() {
    let mut params = params_with(vec![("w", Tensor::scalar(1.0))]);
    let id = params.id("w").unwrap();
    let mut opt = OptimizerState::new(&params, 0.1, 0.0, 0.0);
    let grads = grads_for(&params, 0.5);
    sgd_step(&mut opt, &mut params, &grads, 0.1).unwrap();
    assert!((params.get(id).data()[0] - 0.95).abs() < 1e-7);

    let before = params.clone();
    let mut opt = OptimizerState::new(&params, 0.1, 0.9, 1e-5);
    let gr = grads_for(&params, 0.3);
    sgd_step(&mut opt, &mut params, &gr, 0.0).unwrap();
    assert_eq!(before.get(id).data()[0].to_bits(), params.get(id).data()[0].to_bits());

    // two momentum steps versus the unrolled recurrence
    let mut params = params_with(vec![("w", Tensor::scalar(2.0))]);
    let mut opt = OptimizerState::new(&params, 0.1, 0.9, 0.0);
    let (g1, g2, lr) = (0.5f32, -0.25f32, 0.1f32);
    let gr = grads_for(&params, g1);
    sgd_step(&mut opt, &mut params, &gr, lr).unwrap();
    let gr = grads_for(&params, g2);
    sgd_step(&mut opt, &mut params, &gr, lr).unwrap();
    let v1 = g1;
    let p1 = 2.0 - lr * v1;
    let v2 = 0.9 * v1 + g2;
    let p2 = p1 - lr * v2;
    assert_eq!(params.get(id).data()[0], p2);
}

#[test]
fn sgd_skips_decay_for_bias_and_rejects_nan() {
    let mut params = params_with(vec![
        ("layer.weight", Tensor::scalar(1.0)),
        ("layer.bias", Tensor::scalar(1.0)),
        ("bn.beta", Tensor::scalar(1.0)),
    ]);
    let mut opt = OptimizerState::new(&params, 0.1, 0.0, 0.5);
    assert!(opt.decay_exempt.contains("layer.bias"));
    assert!(opt.decay_exempt.contains("bn.beta"));
    let mut g = Graph::new(&params);
    let mut terms = Vec::new();
    for id in params.ids() {
        let x = g.input(Tensor::full(&[1, 1], 0.0));
        terms.push(g.linear(x, params.view(id).sliced(1, 1, 1), None).unwrap());
    }
    let s0 = g.add(terms[0], terms[1]).unwrap();
    let s = g.add(s0, terms[2]).unwrap();
    let l = g.sum(s);
    let grads = g.backward(l).unwrap();
    drop(g);
    sgd_step(&mut opt, &mut params, &grads, 1.0).unwrap();
    assert_eq!(params.get(params.id("layer.weight").unwrap()).data()[0], 0.5);
    assert_eq!(params.get(params.id("layer.bias").unwrap()).data()[0], 1.0);
    assert_eq!(params.get(params.id("bn.beta").unwrap()).data()[0], 1.0);

    let nan = grads_for(&params, f32::NAN);
    assert!(matches!(
        sgd_step(&mut opt, &mut params, &nan, 0.1),
        Err(Error::NonFinite(_))
    ));
}

/// Gradients where the first parameter has derivative `value`.
fn grads_for(params: &ParamSet, value: f32) -> tofa::tensor::Gradients {
    let id = params.ids().next().unwrap();
    let mut grads = tofa::tensor::Gradients::empty(params.len());
    grads.set_param(id, vec![value; params.get(id).numel()]);
    grads
}

#[test]
fn cosine_schedule_examples() {
    let (total, warm, base) = (100, 10, 0.01f32);
    assert_eq!(cosine_warmup_lr(warm, total, warm, base), base);
    assert!((cosine_warmup_lr(0, total, warm, base) - base / 10.0).abs() < 1e-9);
    // post-warmup range spans 10..=99, midpoint 54.5; use an even span
    let (total, warm) = (111, 10);
    let mid = warm + (total - warm - 1) / 2;
    assert!((cosine_warmup_lr(mid, total, warm, base) - 0.5 * base).abs() < 1e-6 * base);
    assert!(cosine_warmup_lr(total - 1, total, warm, base) < 1e-4 * base);
    let mut prev = f32::INFINITY;
    for i in warm..total {
        let lr = cosine_warmup_lr(i, total, warm, base);
        assert!(lr <= prev, "not monotone at {i}");
        prev = lr;
    }
    for i in 1..warm {
        assert!(cosine_warmup_lr(i, total, warm, base) > cosine_warmup_lr(i - 1, total, warm, base));
    }
    assert_eq!(cosine_warmup_lr(10_000, total, warm, base), cosine_warmup_lr(total - 1, total, warm, base));
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut r = rng(7);
        let params = params_with(vec![
            ("conv.weight", random_tensor(&[4, 3, 3, 3], &mut r)),
            ("bn.gamma", Tensor::full(&[4], 1.0)),
            ("bn.beta", Tensor::zeros(&[4])),
        ]);
        let x = random_tensor(&[3, 3, 6, 6], &mut r);
        let mut g = Graph::new(&params);
        let xv = g.input(x);
        let p = &params;
        let c = g
            .conv2d(xv, p.view(p.id("conv.weight").unwrap()), None, ConvSpec::same(3, 1))
            .unwrap();
        let b = g
            .batch_norm(
                c,
                p.view(p.id("bn.gamma").unwrap()),
                p.view(p.id("bn.beta").unwrap()),
                BnMode::Train,
                1e-5,
                None,
            )
            .unwrap();
        let h = g.hard_swish(b);
        let d = g.dropout(h, 0.2, true, &mut r);
        let l = g.mean(d);
        let grads = g.backward(l).unwrap();
        (
            g.value(l)[0].to_bits(),
            grads.param(p.id("conv.weight").unwrap()).unwrap().to_vec(),
        )
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(
        ga.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        gb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
