use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::conv_naive;
use super::*;
use crate::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Check d(loss)/d(leaf) against central differences for every leaf entry.
fn check<F>(leaves: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss);
    let eval = |ls: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ls.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };
    let h = 1e-6;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(vars[li]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for j in 0..leaf.numel() {
            let mut plus = leaves.clone();
            plus[li].data_mut()[j] += h;
            let mut minus = leaves.clone();
            minus[li].data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[j];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-5, "leaf {} index {}: analytic {} vs fd {}", li, j, a, fd);
        }
    }
}

/// Random weighting so the loss exercises every output element.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let p = g.mul(y, w);
    g.sum(p)
}

#[test]
fn conv_forward_matches_naive_2d_and_3d() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (shape, wshape, spec) in [
        (vec![3, 7, 6], vec![4, 3, 3, 3], ConvSpec::same2d(3)),
        (vec![3, 8, 8], vec![2, 3, 3, 3], ConvSpec::down2d()),
        (vec![2, 5, 6, 4], vec![3, 2, 3, 3, 3], ConvSpec::down3d()),
        (vec![2, 4, 4], vec![5, 2, 1, 1], ConvSpec::same2d(1)),
    ] {
        let x = rand_tensor(&mut rng, &shape);
        let w = rand_tensor(&mut rng, &wshape);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv(xv, wv, None, spec);
        let dims = if shape.len() == 3 { [1, shape[1], shape[2]] } else { [shape[1], shape[2], shape[3]] };
        let (expect, _) = conv_naive(x.data(), shape[0], dims, w.data(), wshape[0], &spec);
        for (a, b) in g.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let leaves = vec![rand_tensor(&mut rng, &[2, 6, 6]), rand_tensor(&mut rng, &[3, 2, 3, 3]), rand_tensor(&mut rng, &[3])];
    check(leaves, |g, v| {
        let y = g.conv(v[0], v[1], Some(v[2]), ConvSpec::down2d());
        weighted_sum(g, y, 7)
    });
    let leaves = vec![rand_tensor(&mut rng, &[2, 4, 4, 4]), rand_tensor(&mut rng, &[2, 2, 3, 3, 3])];
    check(leaves, |g, v| {
        let y = g.conv(v[0], v[1], None, ConvSpec::same3d(3));
        weighted_sum(g, y, 8)
    });
    let leaves = vec![rand_tensor(&mut rng, &[3, 4, 4]), rand_tensor(&mut rng, &[2, 3, 1, 1])];
    check(leaves, |g, v| {
        let y = g.conv(v[0], v[1], None, ConvSpec::same2d(1));
        weighted_sum(g, y, 9)
    });
}

#[test]
fn group_norm_and_channel_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let leaves = vec![rand_tensor(&mut rng, &[4, 3, 3]), rand_tensor(&mut rng, &[4]), rand_tensor(&mut rng, &[4])];
    check(leaves, |g, v| {
        let y = g.group_norm(v[0], v[1], v[2], 2, 1e-5);
        let y = g.mul_chan(y, v[1]);
        let y = g.add_chan(y, v[2]);
        let y = g.silu(y);
        weighted_sum(g, y, 10)
    });
}

#[test]
fn matmul_softmax_gradients_all_transpositions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa = if ta { [4, 3] } else { [3, 4] };
        let sb = if tb { [5, 4] } else { [4, 5] };
        let leaves = vec![rand_tensor(&mut rng, &sa), rand_tensor(&mut rng, &sb)];
        check(leaves, move |g, v| {
            let c = g.matmul(v[0], v[1], ta, tb);
            let s = g.softmax_rows(c);
            weighted_sum(g, s, 11)
        });
    }
}

#[test]
fn elementwise_and_structural_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let leaves = vec![rand_tensor(&mut rng, &[2, 4, 4]), rand_tensor(&mut rng, &[2, 4, 4])];
    check(leaves, |g, v| {
        let a = g.tanh(v[0]);
        let b = g.sigmoid(v[1]);
        let c = g.mul(a, b);
        let d = g.exp(c);
        let e = g.add_scalar(d, 0.5);
        let f = g.ln(e);
        let s = g.square(v[0]);
        let s = g.add_scalar(s, 0.1);
        let s = g.sqrt(s);
        let s = g.div(a, s);
        let cat = g.concat(&[f, s]);
        let n = g.narrow(cat, 1, 2);
        let u = g.upsample(n, [1, 2, 2]);
        let r = g.reshape(u, &[2, 64]);
        let m = g.mean_spatial(r);
        let ab = g.abs(v[1]);
        let mean = g.mean(ab);
        let ex = g.expand(mean, &[2]);
        let z = g.sub(m, ex);
        let z = g.scale(z, 3.0);
        weighted_sum(g, z, 12)
    });
}

#[test]
fn idwt_gradient_is_analysis() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let leaves = vec![rand_tensor(&mut rng, &[4, 3, 2])];
    check(leaves, |g, v| {
        let y = g.idwt2(v[0]);
        weighted_sum(g, y, 13)
    });
}

#[test]
fn upsample_3d_and_clamp_relu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let leaves = vec![rand_tensor(&mut rng, &[2, 2, 2, 3])];
    check(leaves, |g, v| {
        let u = g.upsample(v[0], [2, 2, 2]);
        let c = g.clamp(u, -0.7, 0.7);
        let r = g.relu(u);
        let s = g.add(c, r);
        weighted_sum(g, s, 14)
    });
}

#[test]
fn inference_graph_records_no_gradients() {
    let mut g = Graph::<f64>::inference();
    let x = g.leaf(Tensor::scalar(2.0), true);
    let y = g.square(x);
    let grads = g.backward(y);
    assert!(grads.get(x).is_none());
    let _ = ChaCha8Rng::seed_from_u64(0).random::<u8>();
}
