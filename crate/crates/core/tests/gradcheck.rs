use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabsynth::grad::{gradient_check, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SHAPES: [(usize, usize); 10] = [(1, 1), (1, 5), (5, 1), (2, 3), (3, 2), (4, 4), (3, 7), (6, 2), (2, 9), (5, 5)];

fn rand_t(rng: &mut ChaCha8Rng, shape: (usize, usize), lo: f64, hi: f64) -> Tensor {
    Array2::from_shape_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Tensor {
    Array2::from_shape_fn(shape, |_| {
        let m = rng.random_range(0.2..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Projects onto a random weighting so the root depends on every entry.
fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_t(&mut rng, t.shape(x), -1.0, 1.0);
    let w = t.constant(w);
    let p = t.mul(x, w).unwrap();
    t.sum(p)
}

fn unary(name: &str, lo: f64, hi: f64, op: impl Fn(&mut Tape, Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (i, &shape) in SHAPES.iter().enumerate() {
        let x = rand_t(&mut rng, shape, lo, hi);
        let err = gradient_check(&[x], H, |t, v| {
            let y = op(t, v[0]);
            Ok(weighted_sum(t, y, i as u64))
        })
        .unwrap();
        assert!(err < TOL, "{name} on {shape:?}: rel err {err}");
    }
}

#[test]
fn unary_primitives() {
    unary("exp", -2.0, 2.0, |t, x| t.exp(x));
    unary("log", 0.1, 3.0, |t, x| t.log(x).unwrap());
    unary("sqrt", 0.1, 3.0, |t, x| t.sqrt(x).unwrap());
    unary("sigmoid", -4.0, 4.0, |t, x| t.sigmoid(x));
    unary("softplus", -4.0, 4.0, |t, x| t.softplus(x));
    unary("scale", -2.0, 2.0, |t, x| t.scale(x, -1.7));
    unary("add_scalar", -2.0, 2.0, |t, x| t.add_scalar(x, 0.3));
    unary("transpose", -2.0, 2.0, |t, x| t.transpose(x));
    unary("sum_rows", -2.0, 2.0, |t, x| t.sum_rows(x));
    unary("sum_cols", -2.0, 2.0, |t, x| t.sum_cols(x));
    unary("sum", -2.0, 2.0, |t, x| t.sum(x));
    unary("mean", -2.0, 2.0, |t, x| t.mean(x));
}

#[test]
fn kinked_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (i, &shape) in SHAPES.iter().enumerate() {
        let x = away_from_zero(&mut rng, shape);
        for (name, f) in [
            (
                "abs",
                Box::new(|t: &mut Tape, x: Var| t.abs(x)) as Box<dyn Fn(&mut Tape, Var) -> Var>,
            ),
            ("relu", Box::new(|t: &mut Tape, x: Var| t.relu(x))),
        ] {
            let err = gradient_check(std::slice::from_ref(&x), H, |t, v| {
                let y = f(t, v[0]);
                Ok(weighted_sum(t, y, i as u64))
            })
            .unwrap();
            assert!(err < TOL, "{name} on {shape:?}: rel err {err}");
        }
    }
}

#[test]
fn binary_primitives_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (i, &(r, c)) in SHAPES.iter().enumerate() {
        for rhs in [(r, c), (1, c), (r, 1), (1, 1)] {
            let a = rand_t(&mut rng, (r, c), -2.0, 2.0);
            let b = rand_t(&mut rng, rhs, 0.5, 2.0);
            for name in ["add", "sub", "mul", "div"] {
                let err = gradient_check(&[a.clone(), b.clone()], H, |t, v| {
                    let y = match name {
                        "add" => t.add(v[0], v[1])?,
                        "sub" => t.sub(v[0], v[1])?,
                        "mul" => t.mul(v[0], v[1])?,
                        _ => t.div(v[0], v[1])?,
                    };
                    Ok(weighted_sum(t, y, i as u64))
                })
                .unwrap();
                assert!(err < TOL, "{name} {:?} with {rhs:?}: rel err {err}", (r, c));
            }
        }
        // maximum: keep the operands apart so no entry sits on the tie
        let a = rand_t(&mut rng, (r, c), -2.0, 2.0);
        let b = a.mapv(|x| if x > 0.0 { x - 0.5 } else { x + 0.5 });
        let err = gradient_check(&[a, b], H, |t, v| {
            let y = t.maximum(v[0], v[1])?;
            Ok(weighted_sum(t, y, i as u64))
        })
        .unwrap();
        assert!(err < TOL, "maximum: {err}");
    }
}

#[test]
fn matmul_and_structure() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for (i, &(r, c)) in SHAPES.iter().enumerate() {
        let k = 1 + i % 4;
        let a = rand_t(&mut rng, (r, k), -1.0, 1.0);
        let b = rand_t(&mut rng, (k, c), -1.0, 1.0);
        let err = gradient_check(&[a, b], H, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            Ok(weighted_sum(t, y, i as u64))
        })
        .unwrap();
        assert!(err < TOL, "matmul: {err}");

        let a = rand_t(&mut rng, (r, c), -1.0, 1.0);
        let b = rand_t(&mut rng, (r, k), -1.0, 1.0);
        let err = gradient_check(&[a.clone(), b.clone()], H, |t, v| {
            let y = t.concat(&[v[0], v[1], v[0]])?;
            Ok(weighted_sum(t, y, i as u64))
        })
        .unwrap();
        assert!(err < TOL, "concat: {err}");

        let err = gradient_check(&[a.clone(), b.clone()], H, |t, v| {
            let y = t.row_kron(v[0], v[1])?;
            Ok(weighted_sum(t, y, i as u64))
        })
        .unwrap();
        assert!(err < TOL, "row_kron: {err}");

        let m = rand_t(&mut rng, (r, 1 + i % 3), -1.0, 1.0);
        let err = gradient_check(&[a.clone(), b.clone(), m], H, |t, v| {
            let y = t.kron_mean(&[v[0], v[1], v[2]])?;
            Ok(weighted_sum(t, y, i as u64))
        })
        .unwrap();
        assert!(err < TOL, "kron_mean: {err}");

        let err = gradient_check(std::slice::from_ref(&a), H, |t, v| {
            let y = t.slice_cols(v[0], c / 2, c)?;
            Ok(weighted_sum(t, y, i as u64))
        })
        .unwrap();
        assert!(err < TOL, "slice_cols: {err}");

        let err = gradient_check(&[a], H, |t, v| {
            let y = t.slice_rows(v[0], 0, r.div_ceil(2))?;
            Ok(weighted_sum(t, y, i as u64))
        })
        .unwrap();
        assert!(err < TOL, "slice_rows: {err}");
    }
}

#[test]
fn block_softmax_then_pick() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for trial in 0..10 {
        let x = rand_t(&mut rng, (1, 5), -2.0, 2.0);
        let pick = trial % 5;
        let err = gradient_check(&[x], H, |t, v| {
            let s = t.softmax_blocks(v[0], &[0, 5])?;
            t.slice_cols(s, pick, pick + 1)
        })
        .unwrap();
        assert!(err < TOL, "softmax pick: {err}");
    }
    for (i, &(r, _)) in SHAPES.iter().enumerate() {
        let x = rand_t(&mut rng, (r, 7), -2.0, 2.0);
        let err = gradient_check(&[x], H, |t, v| {
            let s = t.softmax_blocks(v[0], &[0, 2, 5, 7])?;
            Ok(weighted_sum(t, s, i as u64))
        })
        .unwrap();
        assert!(err < TOL, "softmax_blocks: {err}");
    }
}

#[test]
fn kron_mean_matches_row_kron_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut t = Tape::new();
    let a = t.constant(rand_t(&mut rng, (6, 2), -1.0, 1.0));
    let b = t.constant(rand_t(&mut rng, (6, 3), -1.0, 1.0));
    let c = t.constant(rand_t(&mut rng, (6, 2), -1.0, 1.0));
    let ab = t.row_kron(a, b).unwrap();
    let abc = t.row_kron(ab, c).unwrap();
    let sr = t.sum_rows(abc);
    let expect = t.scale(sr, 1.0 / 6.0);
    let got = t.kron_mean(&[a, b, c]).unwrap();
    for (x, y) in t.value(expect).iter().zip(t.value(got).iter()) {
        assert!((x - y).abs() < 1e-14);
    }
}
