//! Central finite differences against the analytic backward pass, per op.

use std::sync::Arc;

use msm_tensor::{Graph, Tensor, Var};

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let x = (i as f64 + 1.0) * 0.618_033_988_7 + seed as f64 * 0.414_213_562;
            (x.fract() - 0.5) * 2.0
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Builds `loss = mean(f(params) * probe)` so every output element matters.
fn check(shapes: &[&[usize]], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let inputs: Vec<Tensor<f64>> = shapes.iter().enumerate().map(|(i, s)| tensor(s, i as u64 + 1)).collect();
    let eval = |inputs: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        let probe = g.input(tensor(g.shape(out), 99));
        let prod = g.mul(out, probe);
        let loss = g.mean(prod);
        let grads = g.backward(loss);
        let gs = vars.iter().map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(*v)))).collect();
        (g.value(loss).data()[0], gs)
    };
    let (_, analytic) = eval(&inputs);
    let eps = 1e-6;
    for (pi, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.clone();
            plus[pi].data_mut()[j] += eps;
            let mut minus = inputs.clone();
            minus[pi].data_mut()[j] -= eps;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
            let a = analytic[pi].data()[j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-7);
            assert!(err < 1e-5, "input {pi} elem {j}: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn conv2d_with_bias_padding_and_stride() {
    check(&[&[2, 2, 6, 5], &[3, 2, 3, 3], &[3]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1));
    check(&[&[1, 2, 6, 6], &[2, 2, 4, 4]], |g, v| g.conv2d(v[0], v[1], None, 2, 1));
    check(&[&[2, 3, 4, 4], &[2, 3, 1, 1], &[2]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0));
}

#[test]
fn pooling_upsampling_concat() {
    check(&[&[2, 2, 4, 6]], |g, v| g.max_pool2(v[0]));
    check(&[&[2, 2, 5, 6]], |g, v| g.avg_pool2(v[0]));
    check(&[&[1, 2, 3, 2]], |g, v| g.upsample2(v[0]));
    check(&[&[2, 1, 3, 3], &[2, 2, 3, 3]], |g, v| g.concat_channels(v[0], v[1]));
}

#[test]
fn elementwise_and_broadcast() {
    check(&[&[3, 4], &[3, 4]], |g, v| {
        let a = g.add(v[0], v[1]);
        let s = g.sub(a, v[1]);
        let m = g.mul(s, v[1]);
        g.scale(m, 1.7)
    });
    check(&[&[2, 3, 4], &[3, 4]], |g, v| g.add_broadcast(v[0], v[1]));
    check(&[&[2, 3, 4], &[4]], |g, v| g.mul_broadcast(v[0], v[1]));
    check(&[&[2, 3, 2, 2], &[2, 3]], |g, v| g.add_channel_bias(v[0], v[1]));
}

#[test]
fn activations() {
    check(&[&[20]], |g, v| g.relu(v[0]));
    check(&[&[20]], |g, v| g.leaky_relu(v[0], 0.1));
    check(&[&[20]], |g, v| g.gelu(v[0]));
    check(&[&[20]], |g, v| g.silu(v[0]));
    check(&[&[20]], |g, v| g.square(v[0]));
    check(&[&[20]], |g, v| g.abs(v[0]));
}

#[test]
fn matmul_all_transpose_combinations() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
        let sb: &[usize] = if tb { &[2, 5, 4] } else { &[2, 4, 5] };
        check(&[sa, sb], |g, v| g.matmul(v[0], v[1], ta, tb));
    }
}

#[test]
fn softmax_layernorm_gather_reshape_mean() {
    check(&[&[3, 5]], |g, v| g.softmax(v[0]));
    check(&[&[3, 6]], |g, v| g.layer_norm(v[0], 1e-5));
    let index = Arc::new(vec![5u32, 0, 3, 3, 1, 2, 4, 5]);
    check(&[&[2, 3]], |g, v| g.gather(v[0], index.clone(), &[2, 4]));
    check(&[&[2, 3]], |g, v| g.reshape(v[0], &[3, 2]));
    check(&[&[2, 3]], |g, v| {
        let m = g.mean(v[0]);
        g.square(m)
    });
}

#[test]
fn inputs_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input(tensor(&[1, 1, 4, 4], 1));
    let w = g.param(tensor(&[1, 1, 3, 3], 2));
    let y = g.conv2d(x, w, None, 1, 1);
    let l = g.mean(y);
    let grads = g.backward(l);
    assert!(grads.get(x).is_none());
    assert!(grads.get(w).is_some());
}

#[test]
fn fused_attention_matches_finite_differences_and_unfused_ops() {
    let mask = std::sync::Arc::new(Tensor::from_vec(&[2, 3, 3], (0..18).map(|i| if i % 4 == 1 { -100.0 } else { 0.0 }).collect()));
    check(&[&[4, 3, 2], &[4, 3, 2], &[4, 3, 2], &[2, 3, 3]], |g, v| g.attention(v[0], v[1], v[2], v[3], None, 0.7));
    let m = mask.clone();
    check(&[&[4, 3, 2], &[4, 3, 2], &[4, 3, 2], &[1, 3, 3]], move |g, v| g.attention(v[0], v[1], v[2], v[3], Some(m.clone()), 0.7));

    let mut g = Graph::<f64>::new();
    let q = g.input(tensor(&[4, 3, 2], 1));
    let k = g.input(tensor(&[4, 3, 2], 2));
    let v = g.input(tensor(&[4, 3, 2], 3));
    let b = g.input(tensor(&[2, 3, 3], 4));
    let fused = g.attention(q, k, v, b, Some(mask.clone()), 0.7);
    let s = g.matmul(q, k, false, true);
    let s = g.scale(s, 0.7);
    let s = g.reshape(s, &[2, 2, 3, 3]);
    let s = g.add_broadcast(s, b);
    let mk = g.input((*mask).clone());
    let s = g.add_broadcast(s, mk);
    let s = g.reshape(s, &[4, 3, 3]);
    let p = g.softmax(s);
    let plain = g.matmul(p, v, false, false);
    for (a, b) in g.value(fused).data().iter().zip(g.value(plain).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}
