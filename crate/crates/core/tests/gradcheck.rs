//! Autodiff vs central finite differences (h = 1e-5) on every differentiable op.

use cxrlab::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Relative error with an absolute floor so near-zero gradients compare sanely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-3))
}

/// Runs `f` on leaves built from `inputs`, backprops, then compares every
/// input gradient with central differences. Returns the worst relative error.
fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let g = Graph::standalone();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
        let out = f(&g, &vars);
        g.value(out).item()
    };
    let g = Graph::standalone();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap();
        for idx in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(fd, analytic.data()[idx]));
        }
    }
    worst
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn project(g: &Graph, x: Var, seed: u64) -> Var {
    let shape = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&shape, &mut rng)).unwrap();
    let p = g.mul(x, w).unwrap();
    g.sum(p).unwrap()
}

fn trials<F: FnMut(&mut ChaCha8Rng) -> f64>(name: &str, mut f: F) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ name.len() as u64);
    let worst = (0..20).map(|_| f(&mut rng)).fold(0.0, f64::max);
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn matmul_gradient() {
    trials("matmul", |rng| {
        let a = random(&[3, 4], rng);
        let b = random(&[4, 2], rng);
        check(&[a, b], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            project(g, y, 1)
        })
    });
}

#[test]
fn matmul_sum_gradient_is_column_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let g = Graph::standalone();
    let va = g.leaf(a, true).unwrap();
    let vb = g.leaf(b.clone(), true).unwrap();
    let y = g.matmul(va, vb).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    let ga = grads.get(va).unwrap();
    for i in 0..2 {
        for p in 0..3 {
            let row_sum: f64 = b.row(p).iter().sum();
            assert!((ga.data()[i * 3 + p] - row_sum).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_nt_and_transpose_gradient() {
    trials("matmul_nt", |rng| {
        let a = random(&[3, 4], rng);
        let b = random(&[5, 4], rng);
        check(&[a, b], |g, v| {
            let y = g.matmul_nt(v[0], v[1]).unwrap();
            let t = g.transpose(y).unwrap();
            project(g, t, 2)
        })
    });
}

#[test]
fn elementwise_gradients() {
    trials("elementwise", |rng| {
        let a = random(&[2, 3], rng);
        let b = random(&[2, 3], rng);
        let bias = random(&[3], rng);
        check(&[a, b, bias], |g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            let d = g.sub(s, v[1]).unwrap();
            let m = g.mul(d, v[1]).unwrap();
            let k = g.scale(m, -1.7).unwrap();
            let e = g.gelu(k).unwrap();
            let r = g.relu(e).unwrap();
            let ab = g.add_bias(r, v[2]).unwrap();
            let t = g.add(ab, e).unwrap();
            project(g, t, 3)
        })
    });
}

#[test]
fn softmax_gradient_every_axis() {
    for axis in 0..3 {
        trials("softmax", |rng| {
            let a = random(&[2, 3, 4], rng);
            check(&[a], |g, v| {
                let y = g.softmax(v[0], axis).unwrap();
                project(g, y, 4)
            })
        });
    }
}

#[test]
fn causal_softmax_gradient() {
    trials("causal_softmax", |rng| {
        let a = random(&[4, 6], rng);
        check(&[a], |g, v| {
            let y = g.causal_softmax(v[0], 1).unwrap();
            project(g, y, 5)
        })
    });
}

#[test]
fn layer_norm_gradient() {
    trials("layer_norm", |rng| {
        let x = random(&[3, 5], rng);
        let gain = random(&[5], rng);
        let bias = random(&[5], rng);
        check(&[x, gain, bias], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            project(g, y, 6)
        })
    });
}

#[test]
fn cross_entropy_gradient() {
    trials("cross_entropy", |rng| {
        let x = random(&[4, 5], rng);
        check(&[x], |g, v| g.cross_entropy(v[0], &[1, 0, 4, 2], Some(0)).unwrap())
    });
}

#[test]
fn bce_gradient() {
    trials("bce", |rng| {
        let x = random(&[1, 6], rng);
        check(&[x], |g, v| {
            g.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap()
        })
    });
}

#[test]
fn conv2d_gradient_dense_strided_and_depthwise() {
    trials("conv_dense", |rng| {
        let x = random(&[2, 5, 5], rng);
        let k = random(&[3, 2, 3, 3], rng);
        check(&[x, k], |g, v| {
            let y = g.conv2d(v[0], v[1], (2, 2), (1, 1), 1).unwrap();
            project(g, y, 7)
        })
    });
    trials("conv_depthwise", |rng| {
        let x = random(&[3, 4, 4], rng);
        let k = random(&[3, 1, 3, 3], rng);
        check(&[x, k], |g, v| {
            let y = g.conv2d(v[0], v[1], (1, 1), (1, 1), 3).unwrap();
            project(g, y, 8)
        })
    });
}

#[test]
fn gather_slice_concat_gradients() {
    trials("structural", |rng| {
        let table = random(&[5, 3], rng);
        let x = random(&[4, 3], rng);
        check(&[table, x], |g, v| {
            let e = g.embedding(v[0], &[4, 0, 4, 2]).unwrap();
            let left = g.slice_cols(e, 0, 2).unwrap();
            let right = g.slice_cols(v[1], 1, 3).unwrap();
            let c = g.concat_cols(&[left, right]).unwrap();
            let top = g.slice_rows(c, 1, 3).unwrap();
            let rows = g.concat_rows(&[top, c]).unwrap();
            let r = g.reshape(rows, &[3, 8]).unwrap();
            let m = g.mean_rows(r).unwrap();
            let s = project(g, m, 9);
            let mean = g.mean(rows).unwrap();
            g.add(s, mean).unwrap()
        })
    });
}
