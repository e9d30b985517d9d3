//! Every op's adjoint is checked against central finite differences.

use std::rc::Rc;

use hdgl_autodiff::gradcheck::{max_relative_error, numerical_gradient};
use hdgl_autodiff::{Matrix, Tape, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Check d(sum of weighted output)/d(inputs) for `build` against finite
/// differences. Inputs are flattened in order into one parameter vector.
fn check<F>(inputs: &[Matrix], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let shapes: Vec<(usize, usize)> = inputs.iter().map(|m| m.dim()).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|m| m.iter().cloned()).collect();

    // Weight the output so the scalarization is not symmetric in the entries.
    let run = |point: &[f64]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let mut vars = Vec::new();
        let mut at = 0;
        for &(r, c) in &shapes {
            let m = Array2::from_shape_vec((r, c), point[at..at + r * c].to_vec()).unwrap();
            vars.push(tape.constant(m));
            at += r * c;
        }
        let out = build(&mut tape, &vars);
        let (r, c) = tape.value(out).dim();
        let weights =
            tape.constant(Array2::from_shape_fn((r, c), |(i, j)| 0.3 + (i * c + j) as f64 * 0.17));
        let weighted = tape.mul(out, weights);
        let loss = tape.sum_all(weighted);
        (tape, vars, loss)
    };

    let (tape, vars, loss) = run(&flat);
    let grads = tape.backward(loss);
    let analytic: Vec<f64> = vars
        .iter()
        .zip(&shapes)
        .flat_map(|(&v, &(r, c))| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros((r, c)))
                .into_iter()
                .collect::<Vec<_>>()
        })
        .collect();

    let numeric = numerical_gradient(
        |point| {
            let (tape, _, loss) = run(point);
            tape.scalar(loss)
        },
        &flat,
        STEP,
    );

    let err = max_relative_error(&analytic, &numeric, 1e-6);
    assert!(err < TOL, "gradient mismatch: max relative error {err}");
}

#[test]
fn arithmetic_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_matrix(&mut rng, 3, 4);
    let b = random_matrix(&mut rng, 3, 4);
    check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check(&[a.clone()], |t, v| t.scale(v[0], -1.7));
    check(&[a], |t, v| t.add_scalar(v[0], 0.9));
}

#[test]
fn matmul_and_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = random_matrix(&mut rng, 3, 5);
    let b = random_matrix(&mut rng, 5, 2);
    check(&[a.clone(), b], |t, v| t.matmul(v[0], v[1]));
    check(&[a], |t, v| t.transpose(v[0]));
}

#[test]
fn broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random_matrix(&mut rng, 4, 3);
    let row = random_matrix(&mut rng, 1, 3);
    let col = random_matrix(&mut rng, 4, 1);
    check(&[a.clone(), row.clone()], |t, v| t.add_row(v[0], v[1]));
    check(&[a.clone(), row], |t, v| t.mul_row(v[0], v[1]));
    check(&[a.clone(), col.clone()], |t, v| t.mul_col(v[0], v[1]));
    check(&[a, col], |t, v| t.sub_col(v[0], v[1]));
}

#[test]
fn activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = random_matrix(&mut rng, 3, 3);
    check(&[a.clone()], |t, v| t.sigmoid(v[0]));
    check(&[a.clone()], |t, v| t.tanh(v[0]));
    // Keep entries away from the ReLU kink where the derivative jumps.
    let shifted = a.mapv(|x| if x.abs() < 0.05 { x + 0.2 } else { x });
    check(&[shifted], |t, v| t.relu(v[0]));
    let positive = random_matrix(&mut rng, 3, 3).mapv(|x| x.abs() + 0.5);
    check(&[positive.clone()], |t, v| t.sqrt(v[0]));
    check(&[positive], |t, v| t.recip(v[0]));
}

#[test]
fn softmax_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a = random_matrix(&mut rng, 4, 5);
    check(&[a.clone()], |t, v| t.softmax_rows(v[0]));
    check(&[a], |t, v| t.log_softmax_rows(v[0]));
}

#[test]
fn reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let a = random_matrix(&mut rng, 4, 3);
    check(&[a.clone()], |t, v| t.sum_all(v[0]));
    check(&[a.clone()], |t, v| t.sum_rows(v[0]));
    check(&[a], |t, v| t.mean_cols(v[0]));
}

#[test]
fn gather_and_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = random_matrix(&mut rng, 5, 3);
    let b = random_matrix(&mut rng, 2, 3);
    let c = random_matrix(&mut rng, 5, 2);
    // Repeated index exercises scatter-add in the backward pass.
    check(&[a.clone()], |t, v| t.gather_rows(v[0], vec![4, 1, 1, 0]));
    check(&[a.clone(), b.clone()], |t, v| t.concat_rows(&[v[0], v[1]]));
    check(&[a.clone(), c], |t, v| t.concat_cols(v[0], v[1]));
    check(&[a, b.clone(), b], |t, v| t.row_from_each(&[v[0], v[1], v[2]], 1));
}

#[test]
fn block_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let blocks = Rc::new(vec![
        random_matrix(&mut rng, 3, 3),
        random_matrix(&mut rng, 2, 2),
        random_matrix(&mut rng, 4, 4),
    ]);
    let x = random_matrix(&mut rng, 9, 2);
    let blocks_for_build = Rc::clone(&blocks);
    check(&[x.clone()], move |t, v| {
        t.block_matmul(Rc::clone(&blocks_for_build), v[0])
    });
    check(&[x], |t, v| t.segment_mean(v[0], vec![3, 2, 4]));
}

#[test]
fn composite_expression() {
    // A small MLP-like composite: exercises grad accumulation through shared nodes.
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = random_matrix(&mut rng, 2, 3);
    let w = random_matrix(&mut rng, 3, 3);
    check(&[x, w], |t, v| {
        let h = t.matmul(v[0], v[1]);
        let h = t.tanh(h);
        let g = t.matmul(h, v[1]); // reuse of v[1] forces accumulation
        let s = t.softmax_rows(g);
        t.mul(s, h)
    });
}

#[test]
fn block_matmul_matches_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let b0 = random_matrix(&mut rng, 3, 3);
    let b1 = random_matrix(&mut rng, 2, 2);
    let x = random_matrix(&mut rng, 5, 4);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.block_matmul(Rc::new(vec![b0.clone(), b1.clone()]), xv);

    let mut dense = Matrix::zeros((5, 5));
    dense.slice_mut(ndarray::s![..3, ..3]).assign(&b0);
    dense.slice_mut(ndarray::s![3.., 3..]).assign(&b1);
    let expect = dense.dot(&x);
    let diff = (tape.value(y) - &expect).mapv(f64::abs).sum();
    assert!(diff < 1e-12, "block matmul differs from dense: {diff}");
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = random_matrix(&mut rng, 6, 7);
    let mut tape = Tape::new();
    let v = tape.constant(a);
    let s = tape.softmax_rows(v);
    for row in tape.value(s).rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn untouched_leaf_has_no_gradient() {
    let mut tape = Tape::new();
    let a = tape.constant(Matrix::from_elem((2, 2), 1.0));
    let b = tape.constant(Matrix::from_elem((2, 2), 2.0));
    let loss = tape.sum_all(a);
    let grads = tape.backward(loss);
    assert!(grads.get(b).is_none());
    assert_eq!(grads.get(a).unwrap(), &Matrix::from_elem((2, 2), 1.0));
}
