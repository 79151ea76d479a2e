//! Every primitive's gradient against central finite differences at f64.
//!
//! Each case builds a scalar loss through one op (plus benign glue), runs
//! the tape backward, and checks a spread of coordinates against the
//! forward-only oracle over random shapes and seeds.

use std::sync::Arc;

use adkernel::fdcheck;
use adkernel::{Activation, ComboTerm, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const RTOL: f64 = 1e-6;
const ATOL: f64 = 1e-9;

/// Run one gradcheck: `build` maps the parameter leaf to a scalar loss.
fn check<F>(name: &str, seed: u64, shape: &[usize], lo: f64, hi: f64, build: F)
where
    F: Fn(&mut Graph<f64>, Var) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let params: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();

    let eval = |p: &[f64]| -> f64 {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(p.to_vec(), shape).unwrap(), true);
        let loss = build(&mut g, x);
        g.scalar_value(loss)
    };

    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(params.clone(), shape).unwrap(), true);
    let loss = build(&mut g, x);
    let mut grads = g.backward(loss).unwrap();
    let analytic = grads.take(x).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);

    let coords = fdcheck::spread_coords(n, 8);
    let mut f = eval;
    for &i in &coords {
        let fd = fdcheck::central_diff(&mut f, &params, i, H);
        assert!(
            fdcheck::close(analytic[i], fd, RTOL, ATOL),
            "{name} seed {seed} coord {i}: analytic {:.12e} vs fd {fd:.12e}",
            analytic[i]
        );
    }
}

fn weighted_loss(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    // Mix components with fixed pseudo-random weights so every output
    // coordinate influences the scalar loss differently.
    let n = g.value(y).numel();
    let shape = g.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let w = Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), &shape).unwrap();
    let m = g.mul_const(y, &w).unwrap();
    g.sum_all(m)
}

#[test]
fn test_unary_ops_match_finite_differences() {
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let rows = rng.random_range(1..5usize);
        let cols = rng.random_range(1..7usize);
        let shape = [rows, cols];
        // Smooth region away from relu/smooth-l1 kinks and log/sqrt poles.
        check("relu", seed, &shape, 0.2, 2.0, |g, x| {
            let y = g.relu(x);
            weighted_loss(g, y, seed)
        });
        check("relu_neg", seed, &shape, -2.0, -0.2, |g, x| {
            let y = g.relu(x);
            weighted_loss(g, y, seed)
        });
        check("sine", seed, &shape, -2.0, 2.0, |g, x| {
            let y = g.sine(x);
            weighted_loss(g, y, seed)
        });
        check("sigmoid", seed, &shape, -3.0, 3.0, |g, x| {
            let y = g.sigmoid(x);
            weighted_loss(g, y, seed)
        });
        check("softplus", seed, &shape, -3.0, 3.0, |g, x| {
            let y = g.softplus(x);
            weighted_loss(g, y, seed)
        });
        check("exp", seed, &shape, -2.0, 1.5, |g, x| {
            let y = g.exp(x);
            weighted_loss(g, y, seed)
        });
        check("log", seed, &shape, 0.4, 3.0, |g, x| {
            let y = g.log(x);
            weighted_loss(g, y, seed)
        });
        check("sqrt", seed, &shape, 0.4, 3.0, |g, x| {
            let y = g.sqrt(x);
            weighted_loss(g, y, seed)
        });
        check("recip", seed, &shape, 0.5, 2.0, |g, x| {
            let y = g.recip(x);
            weighted_loss(g, y, seed)
        });
        check("square", seed, &shape, -2.0, 2.0, |g, x| {
            let y = g.square(x);
            weighted_loss(g, y, seed)
        });
        check("affine", seed, &shape, -2.0, 2.0, |g, x| {
            let y = g.affine(x, -1.7, 0.3);
            weighted_loss(g, y, seed)
        });
        check("smooth_l1", seed, &shape, -2.0, 2.0, |g, x| {
            let t = Tensor::full(&shape, 0.1);
            let y = g.smooth_l1(x, &t).unwrap();
            weighted_loss(g, y, seed)
        });
    }
}

#[test]
fn test_matmul_ops_match_finite_differences() {
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let m = rng.random_range(1..5usize);
        let k = rng.random_range(1..6usize);
        let n = rng.random_range(1..5usize);
        let other = Tensor::from_vec((0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect(), &[k, n]).unwrap();
        check("matmul_lhs", seed, &[m, k], -1.0, 1.0, |g, x| {
            let b = g.constant(other.clone());
            let y = g.matmul(x, b).unwrap();
            weighted_loss(g, y, seed)
        });
        let lhs = Tensor::from_vec((0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect(), &[m, k]).unwrap();
        check("matmul_rhs", seed, &[k, n], -1.0, 1.0, |g, x| {
            let a = g.constant(lhs.clone());
            let y = g.matmul(a, x).unwrap();
            weighted_loss(g, y, seed)
        });
        check("matmul_nt_rhs", seed, &[n, k], -1.0, 1.0, |g, x| {
            let a = g.constant(lhs.clone());
            let y = g.matmul_nt(a, x).unwrap();
            weighted_loss(g, y, seed)
        });
    }
}

#[test]
fn test_broadcast_and_scalar_ops_match_finite_differences() {
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1300 + seed);
        let m = rng.random_range(2..5usize);
        let n = rng.random_range(2..6usize);
        let mat = Tensor::from_vec((0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect(), &[m, n]).unwrap();
        check("add_row_bias", seed, &[1, n], -1.0, 1.0, |g, x| {
            let a = g.constant(mat.clone());
            let y = g.add_row(a, x).unwrap();
            weighted_loss(g, y, seed)
        });
        check("mul_row_scale", seed, &[1, n], 0.3, 1.5, |g, x| {
            let a = g.constant(mat.clone());
            let y = g.mul_row(a, x).unwrap();
            weighted_loss(g, y, seed)
        });
        check("mul_col", seed, &[m, 1], 0.3, 1.5, |g, x| {
            let a = g.constant(mat.clone());
            let y = g.mul_col(a, x).unwrap();
            weighted_loss(g, y, seed)
        });
        check("add_col", seed, &[m, 1], -1.0, 1.0, |g, x| {
            let a = g.constant(mat.clone());
            let y = g.add_col(a, x).unwrap();
            weighted_loss(g, y, seed)
        });
        check("mul_scalar", seed, &[1, 1], 0.5, 2.0, |g, x| {
            let a = g.constant(mat.clone());
            let y = g.mul_scalar(a, x).unwrap();
            weighted_loss(g, y, seed)
        });
        check("add_scalar", seed, &[1, 1], -1.0, 1.0, |g, x| {
            let a = g.constant(mat.clone());
            let y = g.add_scalar(a, x).unwrap();
            weighted_loss(g, y, seed)
        });
        check("mul_elem", seed, &[m, n], -1.0, 1.0, |g, x| {
            let a = g.constant(mat.clone());
            let y = g.mul(a, x).unwrap();
            weighted_loss(g, y, seed)
        });
        check("sub_elem", seed, &[m, n], -1.0, 1.0, |g, x| {
            let a = g.constant(mat.clone());
            let y = g.sub(a, x).unwrap();
            weighted_loss(g, y, seed)
        });
    }
}

#[test]
fn test_reduction_and_structure_ops_match_finite_differences() {
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3100 + seed);
        let m = rng.random_range(2..5usize) * 2;
        let n = rng.random_range(2..6usize);
        check("sum_axis0", seed, &[m, n], -1.0, 1.0, |g, x| {
            let y = g.sum_axis0(x).unwrap();
            weighted_loss(g, y, seed)
        });
        check("mean_axis0", seed, &[m, n], -1.0, 1.0, |g, x| {
            let y = g.mean_axis0(x).unwrap();
            weighted_loss(g, y, seed)
        });
        check("sum_axis1", seed, &[m, n], -1.0, 1.0, |g, x| {
            let y = g.sum_axis1(x).unwrap();
            weighted_loss(g, y, seed)
        });
        check("mean_all", seed, &[m, n], -1.0, 1.0, |g, x| {
            let y = g.mean_all(x);
            let z = g.square(y);
            g.sum_all(z)
        });
        check("sum_group_rows", seed, &[m, n], -1.0, 1.0, |g, x| {
            let y = g.sum_group_rows(x, 2).unwrap();
            weighted_loss(g, y, seed)
        });
        check("cumsum_exclusive", seed, &[m, n], -1.0, 1.0, |g, x| {
            let y = g.cumsum_exclusive(x).unwrap();
            weighted_loss(g, y, seed)
        });
        check("slice_concat", seed, &[m, n], -1.0, 1.0, |g, x| {
            let left = g.slice_cols(x, 0, 1).unwrap();
            let rest = g.slice_cols(x, 1, n - 1).unwrap();
            let both = g.concat_cols(&[rest, left]).unwrap();
            let top = g.slice_rows(both, 0, m / 2).unwrap();
            let bottom = g.slice_rows(both, m / 2, m - m / 2).unwrap();
            let rows = g.concat_rows(&[bottom, top]).unwrap();
            weighted_loss(g, rows, seed)
        });
        check("reshape", seed, &[m, n], -1.0, 1.0, |g, x| {
            let y = g.reshape(x, &[m * n, 1]).unwrap();
            let z = g.square(y);
            weighted_loss(g, z, seed)
        });
    }
}

#[test]
fn test_gather_scatter_ops_match_finite_differences() {
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4700 + seed);
        let rows = rng.random_range(3..7usize);
        let n = rng.random_range(1..5usize);
        let picks = rng.random_range(2..8usize);
        let idx: Arc<Vec<u32>> =
            Arc::new((0..picks).map(|_| rng.random_range(0..rows as u32)).collect());
        let idx2 = Arc::clone(&idx);
        check("gather_rows", seed, &[rows, n], -1.0, 1.0, move |g, x| {
            let y = g.gather_rows(x, Arc::clone(&idx2)).unwrap();
            weighted_loss(g, y, seed)
        });
        let idx3 = Arc::clone(&idx);
        let out_rows = rows;
        check("scatter_add_rows", seed, &[picks, n], -1.0, 1.0, move |g, x| {
            let y = g.scatter_add_rows(x, Arc::clone(&idx3), out_rows).unwrap();
            weighted_loss(g, y, seed)
        });
        let k = 4usize;
        let p = 3usize;
        let widx: Arc<Vec<u32>> =
            Arc::new((0..p * k).map(|_| rng.random_range(0..rows as u32)).collect());
        let w: Arc<Vec<f64>> = Arc::new((0..p * k).map(|_| rng.random_range(0.0..1.0)).collect());
        check("weighted_gather_rows", seed, &[rows, n], -1.0, 1.0, move |g, x| {
            let y = g.weighted_gather_rows(x, Arc::clone(&widx), Arc::clone(&w), k).unwrap();
            weighted_loss(g, y, seed)
        });
    }
}

#[test]
fn test_linear_combo_matches_finite_differences() {
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5900 + seed);
        let m = rng.random_range(2..5usize);
        let inw = rng.random_range(2..5usize);
        let h = rng.random_range(2..5usize);
        let x1 = Tensor::from_vec((0..m * inw).map(|_| rng.random_range(-1.0..1.0)).collect(), &[m, inw]).unwrap();
        let xsrc_rows = 3usize;
        let x2 =
            Tensor::from_vec((0..xsrc_rows * inw).map(|_| rng.random_range(-1.0..1.0)).collect(), &[xsrc_rows, inw])
                .unwrap();
        let gidx: Arc<Vec<u32>> = Arc::new((0..m).map(|_| rng.random_range(0..xsrc_rows as u32)).collect());
        let w2 = Tensor::from_vec((0..h * inw).map(|_| rng.random_range(-1.0..1.0)).collect(), &[h, inw]).unwrap();
        let bias = Tensor::from_vec((0..h).map(|_| rng.random_range(-0.5..0.5)).collect(), &[1, h]).unwrap();

        for act in [Activation::None, Activation::Relu, Activation::Sine] {
            // d/dW1 with a gathered second term in the sum
            let (x1c, x2c, w2c, bc, gi) = (x1.clone(), x2.clone(), w2.clone(), bias.clone(), Arc::clone(&gidx));
            check("linear_combo_w", seed, &[h, inw], -1.0, 1.0, move |g, wvar| {
                let xv = g.constant(x1c.clone());
                let x2v = g.constant(x2c.clone());
                let w2v = g.constant(w2c.clone());
                let bv = g.constant(bc.clone());
                let y = g
                    .linear_combo(
                        &[
                            ComboTerm { x: xv, gather: None, weight: wvar },
                            ComboTerm { x: x2v, gather: Some(Arc::clone(&gi)), weight: w2v },
                        ],
                        Some(bv),
                        act,
                    )
                    .unwrap();
                weighted_loss(g, y, seed)
            });
            // d/dx through the gathered term
            let (x1c, w1c, w2c, bc, gi) = (x1.clone(), w2.clone(), w2.clone(), bias.clone(), Arc::clone(&gidx));
            check("linear_combo_x_gathered", seed, &[xsrc_rows, inw], -1.0, 1.0, move |g, xvar| {
                let x1v = g.constant(x1c.clone());
                let w1v = g.constant(w1c.clone());
                let w2v = g.constant(w2c.clone());
                let bv = g.constant(bc.clone());
                let y = g
                    .linear_combo(
                        &[
                            ComboTerm { x: x1v, gather: None, weight: w1v },
                            ComboTerm { x: xvar, gather: Some(Arc::clone(&gi)), weight: w2v },
                        ],
                        Some(bv),
                        act,
                    )
                    .unwrap();
                weighted_loss(g, y, seed)
            });
            // d/dbias
            let (x1c, w1c) = (x1.clone(), w2.clone());
            check("linear_combo_bias", seed, &[1, h], -0.5, 0.5, move |g, bvar| {
                let x1v = g.constant(x1c.clone());
                let w1v = g.constant(w1c.clone());
                let y = g.linear(x1v, w1v, Some(bvar), act).unwrap();
                weighted_loss(g, y, seed)
            });
        }
    }
}

#[test]
fn test_dag_with_shared_subexpressions_accumulates() {
    // f(x) = sum(relu(xW^T) * sigmoid(xW^T)) reuses xW^T on two paths.
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(8500 + seed);
        let (m, k, h) = (3usize, 4usize, 3usize);
        let w = Tensor::from_vec((0..h * k).map(|_| rng.random_range(-1.0..1.0)).collect(), &[h, k]).unwrap();
        let wc = w.clone();
        check("shared_dag", seed, &[m, k], 0.3, 1.2, move |g, x| {
            let wv = g.constant(wc.clone());
            let pre = g.matmul_nt(x, wv).unwrap();
            let a = g.relu(pre);
            let b = g.sigmoid(pre);
            let y = g.mul(a, b).unwrap();
            g.sum_all(y)
        });
        let _ = w;
    }
}

#[test]
fn test_batchnorm_train_matches_finite_differences() {
    use adkernel::nn::BatchNorm;
    for seed in 0..4u64 {
        let (m, n) = (5usize, 3usize);
        check("batchnorm_x", seed, &[m, n], -1.0, 1.0, |g, x| {
            let mut bn = BatchNorm::<f64>::new(n);
            let gamma = g.leaf(bn.gamma.clone(), false);
            let beta = g.leaf(bn.beta.clone(), false);
            let y = bn.forward_train(g, x, gamma, beta).unwrap();
            weighted_loss(g, y, seed)
        });
    }
}
