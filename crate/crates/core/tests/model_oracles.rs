//! Independent f64 reference implementations checked against the model code.

use std::collections::BTreeSet;

use mergelab_core::model::{backward, forward, forward_traced, representation};
use mergelab_core::{Activation, ModelSpec, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain nested-loop forward pass in f64, returning every layer's output.
fn oracle_layers(widths: &[usize], act: Activation, params: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
    let mut outs = vec![x.to_vec()];
    let mut off = 0;
    let depth = widths.len() - 1;
    for l in 1..=depth {
        let (n_in, n_out) = (widths[l - 1], widths[l]);
        let w = &params[off..off + n_in * n_out];
        let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        let prev = &outs[l - 1];
        let mut z: Vec<f64> = (0..n_out)
            .map(|j| b[j] + (0..n_in).map(|k| w[j * n_in + k] * prev[k]).sum::<f64>())
            .collect();
        if l < depth {
            for v in &mut z {
                *v = match act {
                    Activation::Relu => v.max(0.0),
                    Activation::Tanh => v.tanh(),
                };
            }
        }
        outs.push(z);
    }
    outs
}

fn oracle_loss(widths: &[usize], act: Activation, params: &[f64], x: &[f64], y: usize) -> f64 {
    let logits = oracle_layers(widths, act, params, x).pop().unwrap();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

fn random_net(rng: &mut ChaCha8Rng, act: Activation, max_width: usize) -> (ModelSpec, ParamVector) {
    let depth = rng.random_range(1..=3);
    let mut widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=max_width)).collect();
    // at least two classes so the loss is not identically zero
    *widths.last_mut().unwrap() = rng.random_range(2..=max_width);
    let spec = ModelSpec::new(widths, act).unwrap();
    let values = (0..spec.param_count()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let params = ParamVector::new(values, spec.param_index()).unwrap();
    (spec, params)
}

/// Random tanh net with weights at initializer scale and small nonzero biases.
fn init_scale_net(rng: &mut ChaCha8Rng, max_width: usize) -> (ModelSpec, ParamVector) {
    let depth = rng.random_range(1..=3);
    let mut widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=max_width)).collect();
    *widths.last_mut().unwrap() = rng.random_range(2..=max_width);
    let spec = ModelSpec::new(widths, Activation::Tanh).unwrap();
    let mut values = Vec::with_capacity(spec.param_count());
    for layer in 1..=spec.depth() {
        let (fan_in, fan_out) = (spec.width(layer - 1), spec.width(layer));
        let bound = 1.0 / (fan_in as f32).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
        values.extend((0..fan_out).map(|_| rng.random_range(-0.1f32..0.1)));
    }
    let params = ParamVector::new(values, spec.param_index()).unwrap();
    (spec, params)
}

#[test]
fn backward_matches_central_differences_on_100_nets() {
    const EPS: f64 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (spec, params) = init_scale_net(&mut rng, 8);
        let x: Vec<f32> = (0..spec.input_dim()).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let y = rng.random_range(0..spec.num_classes());
        let grad = backward(&spec, &params, &x, y).unwrap();

        let widths = spec.layer_widths();
        let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut theta: Vec<f64> = params.values().iter().map(|&v| v as f64).collect();
        for i in 0..theta.len() {
            let orig = theta[i];
            theta[i] = orig + EPS;
            let up = oracle_loss(widths, Activation::Tanh, &theta, &x64, y);
            theta[i] = orig - EPS;
            let down = oracle_loss(widths, Activation::Tanh, &theta, &x64, y);
            theta[i] = orig;
            let fd = (up - down) / (2.0 * EPS);
            let g = grad.values()[i] as f64;
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn forward_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for act in [Activation::Relu, Activation::Tanh] {
        for _ in 0..50 {
            let (spec, params) = random_net(&mut rng, act, 12);
            let x: Vec<f32> = (0..spec.input_dim()).map(|_| rng.random_range(-3.0f32..3.0)).collect();
            let theta: Vec<f64> = params.values().iter().map(|&v| v as f64).collect();
            let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let expected = oracle_layers(spec.layer_widths(), act, &theta, &x64);
            for layer in 1..=spec.depth() {
                let got = representation(&spec, &params, &x, layer).unwrap();
                for (a, b) in got.values.iter().zip(&expected[layer]) {
                    assert!((*a as f64 - b).abs() <= 1e-5 * (1.0 + b.abs()), "layer {layer}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn traced_layers_agree_with_truncated_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (spec, params) = random_net(&mut rng, Activation::Relu, 8);
        let x: Vec<f32> = (0..spec.input_dim()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let layers: BTreeSet<usize> = (1..=spec.depth()).collect();
        let trace = forward_traced(&spec, &params, &x, &layers).unwrap();
        for &l in &layers {
            let direct = representation(&spec, &params, &x, l).unwrap();
            assert_eq!(trace.layer(l).unwrap().values, direct.values);
        }
        let logits = forward(&spec, &params, &x).unwrap();
        assert_eq!(trace.layer(spec.depth()).unwrap().values, logits.values);
    }
}

/// Reorders the hidden units of `layer` by `perm` in both adjacent weight matrices.
fn permute_hidden(spec: &ModelSpec, params: &ParamVector, layer: usize, perm: &[usize]) -> ParamVector {
    let mut out = params.values().to_vec();
    let w_in = params.index().get(&ModelSpec::weight_name(layer)).unwrap().clone();
    let b_in = params.index().get(&ModelSpec::bias_name(layer)).unwrap().clone();
    let w_out = params.index().get(&ModelSpec::weight_name(layer + 1)).unwrap().clone();
    let (fan_in, width, next) = (spec.width(layer - 1), spec.width(layer), spec.width(layer + 1));
    let src = params.values();
    for (new, &old) in perm.iter().enumerate() {
        for k in 0..fan_in {
            out[w_in.offset + new * fan_in + k] = src[w_in.offset + old * fan_in + k];
        }
        out[b_in.offset + new] = src[b_in.offset + old];
        for j in 0..next {
            out[w_out.offset + j * width + new] = src[w_out.offset + j * width + old];
        }
    }
    ParamVector::new(out, params.index().clone()).unwrap()
}

#[test]
fn permuting_hidden_units_leaves_logits_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = ModelSpec::new(vec![6, 9, 7, 3], Activation::Relu).unwrap();
    let values = (0..spec.param_count()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let params = ParamVector::new(values, spec.param_index()).unwrap();
    for layer in 1..spec.depth() {
        let mut perm: Vec<usize> = (0..spec.width(layer)).collect();
        perm.reverse();
        perm.swap(0, 2);
        let permuted = permute_hidden(&spec, &params, layer, &perm);
        for _ in 0..20 {
            let x: Vec<f32> = (0..6).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            let a = forward(&spec, &params, &x).unwrap();
            let b = forward(&spec, &permuted, &x).unwrap();
            for (p, q) in a.values.iter().zip(&b.values) {
                assert!((p - q).abs() <= 1e-6, "layer {layer}: {p} vs {q}");
            }
        }
    }
}
