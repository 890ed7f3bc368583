//! Central-difference checks for every differentiable tape operation.

use std::rc::Rc;

use handmesh::autodiff::{concat_cols, concat_rows, euler_xyz, sum_all, Tape, Tensor, Var};
use handmesh::sparse::CsrMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build<'a> = dyn for<'t> Fn(&[Var<'t>]) -> handmesh::Result<Var<'t>> + 'a;

fn eval(inputs: &[Tensor], f: &Build<'_>) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
    f(&vars).unwrap().item()
}

fn check(inputs: &[Tensor], f: &Build<'_>, tol: f64) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let out = f(&vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let g = grads.wrt(vars[k]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus, f) - eval(&minus, f)) / (2.0 * h);
            let an = g.data()[i];
            assert!(
                (fd - an).abs() <= tol * (1.0 + fd.abs()),
                "input {k} element {i}: analytic {an} vs numeric {fd}"
            );
        }
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Weighted sum with fixed random weights so every output element matters.
fn probe<'t>(v: Var<'t>, seed: u64) -> handmesh::Result<Var<'t>> {
    let shape = v.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_t(&mut rng, &shape, -1.0, 1.0);
    let w = v.tape().constant(w)?;
    v.mul(w)?.reduce_sum()
}

#[test]
fn elementwise_binary() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_t(&mut rng, &[3, 4], -2.0, 2.0);
    let b = rand_t(&mut rng, &[3, 4], 0.5, 2.0);
    let ins = [a, b];
    check(&ins, &|v| probe(v[0].add(v[1])?, 1), 1e-6);
    check(&ins, &|v| probe(v[0].sub(v[1])?, 2), 1e-6);
    check(&ins, &|v| probe(v[0].mul(v[1])?, 3), 1e-6);
    check(&ins, &|v| probe(v[0].div(v[1])?, 4), 1e-6);
    check(&ins, &|v| probe(sum_all(&[v[0], v[1], v[0]])?, 5), 1e-6);
}

#[test]
fn elementwise_unary() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_t(&mut rng, &[2, 5], 0.2, 2.0);
    let s = rand_t(&mut rng, &[1], -1.0, 1.0);
    let ins = [a.clone()];
    check(&ins, &|v| probe(v[0].scale(-1.5)?, 1), 1e-6);
    check(&ins, &|v| probe(v[0].neg()?.add_scalar(3.0)?, 2), 1e-6);
    check(&ins, &|v| probe(v[0].square()?, 3), 1e-6);
    check(&ins, &|v| probe(v[0].sqrt()?, 4), 1e-6);
    check(&ins, &|v| probe(v[0].exp()?, 5), 1e-6);
    let mixed = rand_t(&mut rng, &[2, 5], -2.0, 2.0);
    check(&[mixed.clone()], &|v| probe(v[0].abs()?, 6), 1e-5);
    check(&[mixed.clone()], &|v| probe(v[0].leaky_relu(0.01)?, 7), 1e-5);
    check(&[mixed, s], &|v| probe(v[0].mul_scalar(v[1])?, 8), 1e-6);
}

#[test]
fn leaky_relu_slope_at_zero_is_alpha() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
    let y = x.leaky_relu(0.2).unwrap().reduce_sum().unwrap();
    let g = tape.backward(y).unwrap().wrt(x);
    assert_eq!(g.data(), &[0.2, 0.2, 1.0]);
}

#[test]
fn matrix_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_t(&mut rng, &[4, 2], -1.0, 1.0);
    let r = rand_t(&mut rng, &[2], -1.0, 1.0);
    check(&[a.clone(), b.clone()], &|v| probe(v[0].matmul(v[1])?, 1), 1e-6);
    check(&[a.clone(), b.clone(), r], &|v| probe(v[0].matmul(v[1])?.add_row(v[2])?, 2), 1e-6);
    check(&[a.clone()], &|v| probe(v[0].transpose()?, 3), 1e-6);
    check(&[a.clone()], &|v| probe(v[0].reshape(vec![6, 2])?, 4), 1e-6);
    check(&[a.clone()], &|v| probe(v[0].select_cols(&[3, 0, 3])?, 5), 1e-6);
    check(&[a.clone()], &|v| probe(v[0].mean_rows()?, 6), 1e-6);
    check(&[a.clone()], &|v| probe(v[0].row_norms()?, 7), 1e-6);
    check(&[a.clone()], &|v| probe(v[0].softmax_rows()?, 8), 1e-6);
    check(&[a.clone()], &|v| v[0].l2_norm(), 1e-6);
    check(&[a.clone()], &|v| v[0].l1_norm(), 1e-5);
    let c = rand_t(&mut rng, &[2, 4], -1.0, 1.0);
    check(&[a.clone(), c], &|v| probe(concat_rows(&[v[0], v[1]])?, 9), 1e-6);
    let d = rand_t(&mut rng, &[3, 1], -1.0, 1.0);
    check(&[a, d], &|v| probe(concat_cols(&[v[1], v[0], v[1]])?, 10), 1e-6);
}

#[test]
fn sparse_and_gather() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = Rc::new(
        CsrMatrix::from_triplets(3, 4, vec![(0, 1, 0.5), (2, 3, -1.0), (2, 0, 2.0), (1, 1, 1.5)])
            .unwrap(),
    );
    let x = rand_t(&mut rng, &[4, 3], -1.0, 1.0);
    check(&[x.clone()], &|v| probe(v[0].sparse_matmul(m.clone())?, 1), 1e-6);
    let idx = Rc::new(vec![2, -1, 0, 2, 3, -1]);
    check(&[x], &|v| probe(v[0].gather_rows(idx.clone())?, 2), 1e-6);
}

#[test]
fn euler_rotations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let e = rand_t(&mut rng, &[4, 3], -3.0, 3.0);
    check(&[e.clone()], &|v| probe(v[0].euler_to_rotmat()?, 1), 1e-6);
    // Compare with an independent composition of elementary rotations.
    for row in e.data().chunks_exact(3) {
        let r = euler_xyz(row[0], row[1], row[2]);
        let (ca, sa) = (row[0].cos(), row[0].sin());
        let (cb, sb) = (row[1].cos(), row[1].sin());
        let (cc, sc) = (row[2].cos(), row[2].sin());
        let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
        let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
            let mut o = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
                }
            }
            o
        };
        let expect = mul(mul(rx, ry), rz);
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[i * 3 + j] - expect[i][j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gradient_accumulates_over_reuse_and_ignores_constants() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
    let c = tape.constant(Tensor::scalar(2.0)).unwrap();
    let y = x.mul(x).unwrap().add(x.mul(c).unwrap()).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).item(), 8.0);
    assert!(g.get(c).is_none());
}

#[test]
fn backward_rejects_non_scalar_root() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(vec![2, 2])).unwrap();
    assert!(tape.backward(x).is_err());
}

#[test]
fn finite_checks_catch_nan() {
    let tape = Tape::with_finite_checks();
    let x = tape.leaf(Tensor::scalar(-1.0)).unwrap();
    assert!(x.sqrt().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matmul_chain_gradients(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_t(&mut rng, &[m, k], -1.0, 1.0);
        let b = rand_t(&mut rng, &[k, n], -1.0, 1.0);
        check(&[a, b], &|v| v[0].matmul(v[1])?.leaky_relu(0.1)?.softmax_rows()?.row_norms()?.reduce_sum(), 1e-5);
    }
}
