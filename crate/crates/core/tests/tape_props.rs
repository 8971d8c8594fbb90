use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use silab::gradcheck::{numeric_grad, rel_error};
use silab::tape::{Tape, Var};
use silab::{Result, Tensor};

const SEEDS: u64 = 100;
const H: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero so relu kinks are never straddled by the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Checks the tape gradient of `build(x)` against central differences.
fn check(x: &[f64], build: impl Fn(&mut Tape, Var) -> Result<Var>, shape: &[usize]) -> f64 {
    let eval = |v: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::new(shape.to_vec(), v.to_vec())?);
        let root = build(&mut tape, leaf)?;
        Ok(tape.value(root).item())
    };
    let mut tape = Tape::new();
    let leaf = tape.leaf(Tensor::new(shape.to_vec(), x.to_vec()).unwrap());
    let root = build(&mut tape, leaf).unwrap();
    tape.backward(root).unwrap();
    let analytic = tape.grad(leaf).unwrap().to_vec();
    let numeric = numeric_grad(eval, x, H).unwrap();
    rel_error(&analytic, &numeric, 1e-12)
}

/// Contracts a tensor with fixed pseudo-random weights so every output entry matters.
fn contract(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let n = tape.value(v).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let w = tape.constant(Tensor::new(shape, uniform(&mut rng, n, -1.0, 1.0))?);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn for_seeds(mut f: impl FnMut(u64, &mut ChaCha8Rng) -> f64, name: &str) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = f(seed, &mut rng);
        assert!(err <= TOL, "{name}: seed {seed} rel err {err:e}");
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    for_seeds(
        |seed, rng| {
            let b = Tensor::new(vec![3, 3], uniform(rng, 9, -1.0, 1.0)).unwrap();
            let a = uniform(rng, 9, -1.0, 1.0);
            let bl = b.clone();
            let left = check(
                &a,
                move |t, x| {
                    let c = t.constant(bl.clone());
                    let p = t.matmul(x, c)?;
                    contract(t, p, seed)
                },
                &[3, 3],
            );
            let right = check(
                &a,
                move |t, x| {
                    let c = t.constant(b.clone());
                    let p = t.matmul(c, x)?;
                    contract(t, p, seed)
                },
                &[3, 3],
            );
            left.max(right)
        },
        "matmul",
    );
}

#[test]
fn matmul_bt_gradients_match_finite_differences() {
    for_seeds(
        |seed, rng| {
            let b = Tensor::new(vec![4, 3], uniform(rng, 12, -1.0, 1.0)).unwrap();
            let a = uniform(rng, 6, -1.0, 1.0);
            let b2 = b.clone();
            let e1 = check(
                &a,
                move |t, x| {
                    let c = t.constant(b.clone());
                    let p = t.matmul_bt(x, c)?;
                    contract(t, p, seed)
                },
                &[2, 3],
            );
            let w = uniform(rng, 12, -1.0, 1.0);
            let e2 = check(
                &w,
                move |t, x| {
                    let c = t.constant(Tensor::new(vec![2, 3], b2.data()[..6].to_vec())?);
                    let p = t.matmul_bt(c, x)?;
                    contract(t, p, seed)
                },
                &[4, 3],
            );
            e1.max(e2)
        },
        "matmul_bt",
    );
}

#[test]
fn relu_gradients_match_finite_differences() {
    for_seeds(
        |seed, rng| {
            let a = away_from_zero(rng, 12);
            check(
                &a,
                move |t, x| {
                    let r = t.relu(x);
                    contract(t, r, seed)
                },
                &[3, 4],
            )
        },
        "relu",
    );
}

#[test]
fn row_normalize_gradients_match_finite_differences() {
    for_seeds(
        |seed, rng| {
            let a = uniform(rng, 12, 0.1, 2.0);
            check(
                &a,
                move |t, x| {
                    let r = t.row_normalize_sum(x)?;
                    contract(t, r, seed)
                },
                &[3, 4],
            )
        },
        "row_normalize_sum",
    );
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    for_seeds(
        |seed, rng| {
            let a = uniform(rng, 15, -2.0, 2.0);
            let gain = uniform(rng, 5, 0.5, 1.5);
            let bias = uniform(rng, 5, -0.5, 0.5);
            let plain = check(
                &a,
                move |t, x| {
                    let r = t.layer_norm(x, None)?;
                    contract(t, r, seed)
                },
                &[3, 5],
            );
            let g2 = gain.clone();
            let affine_in = check(
                &a,
                move |t, x| {
                    let g = t.constant(Tensor::vector(g2.clone()));
                    let b = t.constant(Tensor::vector(bias.clone()));
                    let r = t.layer_norm(x, Some((g, b)))?;
                    contract(t, r, seed)
                },
                &[3, 5],
            );
            let a2 = a.clone();
            let wrt_gain = check(
                &gain,
                move |t, g| {
                    let x = t.constant(Tensor::new(vec![3, 5], a2.clone())?);
                    let b = t.constant(Tensor::zeros(&[5]));
                    let r = t.layer_norm(x, Some((g, b)))?;
                    contract(t, r, seed)
                },
                &[5],
            );
            plain.max(affine_in).max(wrt_gain)
        },
        "layer_norm",
    );
}

#[test]
fn softmax_and_cross_entropy_gradients_match_finite_differences() {
    for_seeds(
        |seed, rng| {
            let a = uniform(rng, 12, -3.0, 3.0);
            let s = check(
                &a,
                move |t, x| {
                    let r = t.softmax_rows(x);
                    contract(t, r, seed)
                },
                &[3, 4],
            );
            let targets = vec![Some(rng.gen_range(0..4)), None, Some(rng.gen_range(0..4))];
            let ce = check(&a, move |t, x| t.cross_entropy(x, &targets), &[3, 4]);
            s.max(ce)
        },
        "softmax/cross_entropy",
    );
}

#[test]
fn elementwise_and_broadcast_gradients_match_finite_differences() {
    for_seeds(
        |seed, rng| {
            let a = uniform(rng, 8, 0.5, 2.0);
            let other = uniform(rng, 8, 0.5, 2.0);
            let row = uniform(rng, 4, -1.0, 1.0);
            let o2 = other.clone();
            let quotients = check(
                &a,
                move |t, x| {
                    let c = t.constant(Tensor::new(vec![2, 4], o2.clone())?);
                    let d1 = t.div(x, c)?;
                    let d2 = t.div(c, x)?;
                    let s = t.sub(d1, d2)?;
                    let s = t.scale(s, 0.7);
                    contract(t, s, seed)
                },
                &[2, 4],
            );
            let a2 = a.clone();
            let broadcast = check(
                &row,
                move |t, r| {
                    let x = t.constant(Tensor::new(vec![2, 4], a2.clone())?);
                    let m = t.mul_row(x, r)?;
                    let m = t.add_row(m, r)?;
                    let q = t.sum_squares(m);
                    let s = contract(t, m, seed)?;
                    t.add(q, s)
                },
                &[4],
            );
            quotients.max(broadcast)
        },
        "elementwise",
    );
}

#[test]
fn embedding_lookup_gradients_match_finite_differences() {
    for_seeds(
        |seed, rng| {
            let table = uniform(rng, 15, -1.0, 1.0);
            let ids: Vec<usize> = (0..6).map(|_| rng.gen_range(0..5)).collect();
            check(
                &table,
                move |t, e| {
                    let g = t.gather_rows(e, &ids)?;
                    contract(t, g, seed)
                },
                &[5, 3],
            )
        },
        "gather_rows",
    );
}

#[test]
fn row_slicing_gradients_match_finite_differences() {
    for_seeds(
        |seed, rng| {
            let a = uniform(rng, 12, -1.0, 1.0);
            check(
                &a,
                move |t, x| {
                    let top = t.slice_rows(x, 0, 2)?;
                    let mid = t.slice_rows(x, 1, 2)?;
                    let s = t.concat_rows(&[mid, top, x])?;
                    let s = t.relu(s);
                    let q = t.sum_squares(s);
                    let c = contract(t, s, seed)?;
                    t.add(q, c)
                },
                &[4, 3],
            )
        },
        "slice/concat rows",
    );
}

/// Attention-shaped composite: relu scores, row normalization, value mixing, layer norm.
#[test]
fn composite_graph_matches_finite_differences() {
    for_seeds(
        |seed, rng| {
            let z = uniform(rng, 12, -1.0, 1.0);
            let wq = uniform(rng, 16, -1.0, 1.0);
            let wk = uniform(rng, 16, -1.0, 1.0);
            check(
                &z,
                move |t, x| {
                    let q = t.constant(Tensor::new(vec![4, 4], wq.clone())?);
                    let k = t.constant(Tensor::new(vec![4, 4], wk.clone())?);
                    let n = t.layer_norm(x, None)?;
                    let qs = t.matmul(n, q)?;
                    let ks = t.matmul(n, k)?;
                    let s = t.matmul_bt(qs, ks)?;
                    // shift keeps every score positive so no relu kink is crossed
                    let shift = t.constant(Tensor::filled(&[3, 3], 50.0));
                    let s = t.add(s, shift)?;
                    let s = t.relu(s);
                    let p = t.row_normalize_sum(s)?;
                    let o = t.matmul(p, x)?;
                    let r = t.add(o, x)?;
                    contract(t, r, seed)
                },
                &[3, 4],
            )
        },
        "composite",
    );
}

fn scaled_rel_err(a: &[f64], b: &[f64]) -> f64 {
    rel_error(a, b, 1e-300)
}

#[test]
fn relu_is_one_homogeneous_and_normalizers_are_zero_homogeneous() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Tensor::new(vec![3, 4], uniform(&mut rng, 12, -1.0, 2.0)).unwrap();
    let pos = Tensor::new(vec![3, 4], uniform(&mut rng, 12, 0.0, 2.0)).unwrap();
    for c in [1e-3, 1.0, 1e3, 0.01, 100.0] {
        let mut t = Tape::new();
        let x = t.constant(a.clone());
        let xc = t.constant(a.scale(c));
        let r = t.relu(x);
        let rc = t.relu(xc);
        let expect = t.value(r).scale(c);
        assert!(scaled_rel_err(t.value(rc).data(), expect.data()) <= 1e-12);

        let ln = t.layer_norm(x, None).unwrap();
        let lnc = t.layer_norm(xc, None).unwrap();
        assert!(scaled_rel_err(t.value(lnc).data(), t.value(ln).data()) <= 1e-12, "c={c}");

        let p = t.constant(pos.clone());
        let pc = t.constant(pos.scale(c));
        let n = t.row_normalize_sum(p).unwrap();
        let nc = t.row_normalize_sum(pc).unwrap();
        assert!(scaled_rel_err(t.value(nc).data(), t.value(n).data()) <= 1e-12, "c={c}");
    }
}
