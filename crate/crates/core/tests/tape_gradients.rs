//! Central-difference checks of every differentiable tape operation.

use hmoe::numkernel::{finite_diff_check, Activation, Evaluation, GradCheckOptions, Param, Tape, Tensor, Var};
use hmoe::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| n.sample(&mut rng)).collect()).unwrap()
}

/// Checks `build`, which maps the leaves to a node; the objective is the sum
/// of that node weighted by a fixed random tensor, so every output element
/// carries a distinct adjoint.
fn check<F>(shapes: &[(usize, usize)], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut params: Vec<Param<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| Param::new(format!("p{i}"), random(r, c, 10 + i as u64)))
        .collect();
    let f = |ps: &[Param<f64>], _: bool| -> Result<Evaluation<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let out = build(&mut tape, &vars)?;
        let shape = tape.value(out).shape().to_vec();
        let w = random(shape[0], shape.get(1).copied().unwrap_or(1), 99);
        let w = tape.constant(Tensor::new(shape, w.data().to_vec())?);
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod)?;
        let g = tape.backward(loss)?;
        Ok(Evaluation {
            loss: tape.scalar(loss),
            grads: vars.iter().zip(ps).map(|(&v, p)| g.get_or_zeros(v, &p.value)).collect(),
            fingerprint: vec![],
        })
    };
    let report = finite_diff_check(&mut params, f, GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "failures: {:?}", report.failures);
    report.max_rel_error
}

#[test]
fn matmul_gradient() {
    check(&[(3, 4), (4, 2)], |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn broadcast_add_and_mul_gradients() {
    check(&[(3, 4), (1, 4)], |t, v| t.add(v[0], v[1]));
    check(&[(3, 4), (3, 1)], |t, v| t.mul(v[0], v[1]));
    check(&[(3, 4), (1, 1)], |t, v| t.mul(v[0], v[1]));
    check(&[(3, 4), (3, 4)], |t, v| t.sub(v[0], v[1]));
}

#[test]
fn affine_softmax_logsumexp_gradients() {
    check(&[(2, 5)], |t, v| t.affine(v[0], -1.5, 0.25));
    check(&[(3, 5)], |t, v| t.softmax(v[0]));
    check(&[(3, 5)], |t, v| t.logsumexp(v[0]));
}

#[test]
fn index_operation_gradients() {
    check(&[(3, 4)], |t, v| t.pick(v[0], vec![(0, 1), (2, 3), (0, 1)], &[3, 1]));
    check(&[(3, 1)], |t, v| t.scatter_elems(v[0], vec![(1, 0), (1, 0), (0, 2)], &[2, 3]));
    check(&[(4, 3)], |t, v| t.gather_rows(v[0], vec![3, 0, 3]));
    check(&[(3, 2)], |t, v| t.scatter_rows(v[0], vec![1, 4, 1], 5));
}

#[test]
fn reduction_and_activation_gradients() {
    check(&[(3, 4)], |t, v| t.activation(v[0], Activation::Gelu));
    check(&[(3, 4)], |t, v| t.sum(v[0]));
    check(&[(3, 4)], |t, v| t.mean(v[0]));
}

#[test]
fn standardize_gradient() {
    check(&[(4, 6)], |t, v| t.standardize(v[0], 1e-5));
}

#[test]
fn segmented_attention_gradient() {
    // two segments, 3 queries and 4 keys each
    check(&[(6, 5), (8, 5), (8, 3)], |t, v| t.attention(v[0], v[1], v[2], 2));
}

#[test]
fn composite_graph_with_reuse() {
    check(&[(3, 4), (4, 4)], |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let s = t.softmax(h)?;
        let z = t.standardize(h, 1e-5)?;
        let m = t.mul(s, z)?;
        t.add(m, v[0])
    });
}
