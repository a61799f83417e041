//! Every tape primitive against central finite differences, on ten random
//! shapes and values each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrl::autodiff::{ParamStore, Tape, Var};
use rrl::gradcheck::{finite_difference_check, DEFAULT_EPS};
use rrl::{Result, Tensor64};

const TRIALS: u64 = 10;
const TOL: f64 = 1e-6;

#[derive(Clone, Copy)]
enum Values {
    Any,
    /// Magnitude in [0.2, 2], random sign; keeps away from kinks and poles.
    AwayFromZero,
    Positive,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], values: Values) -> Tensor64 {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| match values {
            Values::Any => rng.random_range(-1.5..1.5),
            Values::AwayFromZero => {
                let m: f64 = rng.random_range(0.2..2.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            }
            Values::Positive => rng.random_range(0.3..2.0),
        })
        .collect();
    Tensor64::new(shape.to_vec(), data).unwrap()
}

/// `sum(op(inputs) * R)` with a fixed random `R`, so every output element
/// contributes a distinct weight to the gradient.
fn check_primitive<F>(name: &str, shapes: impl Fn(&mut ChaCha8Rng) -> Vec<(Vec<usize>, Values)>, op: F)
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let mut store = ParamStore::new();
        for (i, (shape, values)) in shapes(&mut rng).into_iter().enumerate() {
            store.add(format!("x{i}"), random_tensor(&mut rng, &shape, values), true).unwrap();
        }
        let report = finite_difference_check(&store, DEFAULT_EPS, |tape: &Tape<f64>, vars| {
            let out = op(vars)?;
            let mut r_rng = ChaCha8Rng::seed_from_u64(77 + trial);
            let r = random_tensor(&mut r_rng, &out.shape(), Values::AwayFromZero);
            out.mul(tape.constant(r))?.sum().reshape(&[])
        })
        .unwrap();
        assert!(report.max_rel_err <= TOL, "{name} trial {trial}: {report:?}");
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5))
}

fn one(values: Values) -> impl Fn(&mut ChaCha8Rng) -> Vec<(Vec<usize>, Values)> {
    move |rng| {
        let (r, c) = dims(rng);
        vec![(vec![r, c], values)]
    }
}

fn two_same(values: Values) -> impl Fn(&mut ChaCha8Rng) -> Vec<(Vec<usize>, Values)> {
    move |rng| {
        let (r, c) = dims(rng);
        vec![(vec![r, c], Values::Any), (vec![r, c], values)]
    }
}

#[test]
fn matmul() {
    check_primitive(
        "matmul",
        |rng| {
            let (n, k) = dims(rng);
            let m = rng.random_range(1..5);
            vec![(vec![n, k], Values::Any), (vec![k, m], Values::Any)]
        },
        |x| x[0].matmul(x[1]),
    );
}

#[test]
fn elementwise_binary() {
    check_primitive("add", two_same(Values::Any), |x| x[0].add(x[1]));
    check_primitive("sub", two_same(Values::Any), |x| x[0].sub(x[1]));
    check_primitive("mul", two_same(Values::Any), |x| x[0].mul(x[1]));
    check_primitive("div", two_same(Values::AwayFromZero), |x| x[0].div(x[1]));
}

#[test]
fn broadcast_binary() {
    let row_bcast = |rng: &mut ChaCha8Rng| {
        let (r, c) = dims(rng);
        vec![(vec![r, c], Values::Any), (vec![c], Values::AwayFromZero)]
    };
    let scalar_bcast = |rng: &mut ChaCha8Rng| {
        let (r, c) = dims(rng);
        vec![(vec![r, c], Values::Any), (vec![], Values::AwayFromZero)]
    };
    check_primitive("add row", row_bcast, |x| x[0].add(x[1]));
    check_primitive("mul row", row_bcast, |x| x[0].mul(x[1]));
    check_primitive("div row", row_bcast, |x| x[0].div(x[1]));
    check_primitive("sub scalar", scalar_bcast, |x| x[0].sub(x[1]));
    check_primitive("mul scalar", scalar_bcast, |x| x[0].mul(x[1]));
}

#[test]
fn elementwise_unary() {
    check_primitive("neg", one(Values::Any), |x| Ok(x[0].neg()));
    check_primitive("scale", one(Values::Any), |x| Ok(x[0].scale(-1.7)));
    check_primitive("add_scalar", one(Values::Any), |x| Ok(x[0].add_scalar(0.4)));
    check_primitive("tanh", one(Values::Any), |x| Ok(x[0].tanh()));
    check_primitive("sigmoid", one(Values::Any), |x| Ok(x[0].sigmoid()));
    check_primitive("exp", one(Values::Any), |x| Ok(x[0].exp()));
    check_primitive("log", one(Values::Positive), |x| x[0].log());
    check_primitive("square", one(Values::Any), |x| Ok(x[0].square()));
    check_primitive("relu", one(Values::AwayFromZero), |x| Ok(x[0].relu()));
}

#[test]
fn reductions() {
    check_primitive("softmax", one(Values::Any), |x| Ok(x[0].softmax()));
    check_primitive("log_sum_exp", one(Values::Any), |x| Ok(x[0].log_sum_exp()));
    check_primitive("sum", one(Values::Any), |x| x[0].sum().reshape(&[1]));
    check_primitive("mean", one(Values::Any), |x| x[0].mean().reshape(&[1]));
    check_primitive("sum_last", one(Values::Any), |x| Ok(x[0].sum_last()));
    check_primitive("max_last", one(Values::AwayFromZero), |x| Ok(x[0].max_last().0));
    check_primitive("l2_normalize", one(Values::AwayFromZero), |x| x[0].l2_normalize());
    check_primitive("dot", two_same(Values::Any), |x| x[0].dot(x[1])?.reshape(&[1]));
}

#[test]
fn structural() {
    let concat_shapes = |rng: &mut ChaCha8Rng| {
        let (r, c) = dims(rng);
        vec![(vec![r, c], Values::Any), (vec![r, rng.random_range(1..4)], Values::Any)]
    };
    check_primitive("concat", concat_shapes, |x| Var::concat(&[x[0], x[1]]));
    let stack_shapes = |rng: &mut ChaCha8Rng| {
        let c = rng.random_range(1..5);
        vec![(vec![c], Values::Any), (vec![rng.random_range(1..4), c], Values::Any)]
    };
    check_primitive("stack", stack_shapes, |x| Var::stack(&[x[0], x[1]]));
    check_primitive("transpose", one(Values::Any), |x| x[0].transpose());
    check_primitive("reshape", one(Values::Any), |x| {
        let n: usize = x[0].shape().iter().product();
        x[0].reshape(&[n])
    });
    check_primitive("slice_last", one(Values::Any), |x| {
        let c = x[0].shape()[1];
        x[0].slice_last(c / 2, c)
    });
    check_primitive("slice_rows", one(Values::Any), |x| {
        let r = x[0].shape()[0];
        x[0].slice_rows(0, r.div_ceil(2))
    });
    check_primitive("row", one(Values::Any), |x| x[0].row(x[0].shape()[0] - 1));
    check_primitive("take", one(Values::Any), |x| {
        let n: usize = x[0].shape().iter().product();
        let idx: Vec<usize> = (0..n).rev().chain(0..n).step_by(2).collect();
        let len = idx.len();
        x[0].take(&idx, &[len])
    });
    check_primitive("gather_rows", one(Values::Any), |x| {
        let r = x[0].shape()[0];
        x[0].gather_rows(&[r - 1, 0, r - 1])
    });
}
