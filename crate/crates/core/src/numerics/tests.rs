use rand::Rng as _;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use super::*;
use crate::Error;

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn eval1(t: Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var, Error>) -> Tensor {
    let mut tape = Tape::no_grad();
    let x = tape.constant(t);
    let y = f(&mut tape, x).unwrap();
    tape.value(y).clone()
}

#[test]
fn matmul_small_cases() {
    let mut tape = Tape::new();
    let i = tape.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let b = tape.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(mat(&[&[1.0, 2.0]]));
    let b = tape.constant(mat(&[&[3.0], &[4.0]]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[11.0]);

    let bad = tape.matmul(a, a);
    assert!(matches!(bad, Err(Error::Dimension(_))));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = rng_for(11, 0);
    for &(n, k, m) in &[(5, 4, 3), (16, 16, 16), (1, 7, 9), (13, 2, 11)] {
        let a = randn(&[n, k], &mut rng);
        let b = randn(&[k, m], &mut rng);
        let mut tape = Tape::no_grad();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(av, bv).unwrap();
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.at(&[i, t]) * b.at(&[t, j]);
                }
                assert!((tape.value(c).at(&[i, j]) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_examples() {
    let y = eval1(Tensor::new(vec![3], vec![0.0; 3]).unwrap(), |t, x| {
        t.softmax(x, 0)
    });
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let y = eval1(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap(), |t, x| {
        t.softmax(x, 0)
    });
    assert!(y.all_finite());
    assert_eq!(y.data()[0], 1.0);
    assert!((y.data()[1] - (-1000.0f64).exp()).abs() < 1e-300);

    let y = eval1(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), |t, x| {
        t.softmax(x, 0)
    });
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in y.data().iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.softmax(x, 1), Err(Error::Dimension(_))));
}

#[test]
fn softmax_slices_sum_to_one_on_every_axis() {
    let mut rng = rng_for(3, 0);
    let x = Tensor::from_fn(&[3, 4, 5], |_| 30.0 * rng.sample::<f64, _>(StandardNormal));
    for axis in 0..3 {
        let y = eval1(x.clone(), |t, v| t.softmax(v, axis));
        let shape = [3, 4, 5];
        let mut sums = std::collections::HashMap::new();
        for a in 0..3 {
            for b in 0..4 {
                for c in 0..5 {
                    let idx = [a, b, c];
                    let mut key = idx.to_vec();
                    key.remove(axis);
                    *sums.entry(key).or_insert(0.0) += y.at(&idx);
                }
            }
        }
        assert_eq!(sums.len(), shape.iter().product::<usize>() / shape[axis]);
        for s in sums.values() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

fn ln(x: Tensor) -> Tensor {
    let c = x.last_dim();
    eval1(x, |t, v| {
        let g = t.constant(Tensor::filled(&[c], 1.0));
        let b = t.constant(Tensor::zeros(&[c]));
        t.layer_norm(v, g, b)
    })
}

#[test]
fn layer_norm_examples() {
    let y = ln(Tensor::new(vec![1, 3], vec![5.0; 3]).unwrap());
    assert_eq!(y.data(), &[0.0; 3]);

    let y = ln(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
    let s = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
    assert!((y.data()[0] + s).abs() < 1e-12 && (y.data()[1] - s).abs() < 1e-12);

    let mut rng = rng_for(5, 0);
    let x = Tensor::from_fn(&[20, 7], |_| 1e3 * rng.random::<f64>() - 400.0);
    let y = ln(x);
    for i in 0..20 {
        let mean: f64 = y.row(i).iter().sum::<f64>() / 7.0;
        assert!(mean.abs() < 1e-10);
    }
}

#[test]
fn gelu_matches_statrs_cdf() {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let xs = vec![-40.0, -3.0, -1.0, 0.0, 0.5, 1.0, 2.5, 40.0];
    let y = eval1(Tensor::new(vec![xs.len()], xs.clone()).unwrap(), |t, v| {
        Ok(t.gelu(v))
    });
    for (x, g) in xs.iter().zip(y.data()) {
        assert!((g - x * normal.cdf(*x)).abs() < 1e-9, "x={x}");
    }
    assert_eq!(y.data()[3], 0.0);
    assert!((y.data()[5] - 0.841_344_746).abs() < 1e-9);
    assert!((y.data()[7] - 40.0).abs() < 1e-12);
    assert!(y.data()[0].abs() < 1e-12);
}

#[test]
fn dropout_modes() {
    let mut rng = rng_for(1, 0);
    let mut tape = Tape::no_grad();
    let x = tape.constant(Tensor::filled(&[4], 2.0));
    assert_eq!(tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap(), x);
    assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());

    let ones = tape.constant(Tensor::filled(&[1_000_000], 1.0));
    let y = tape.dropout(ones, 0.5, Mode::Train, &mut rng).unwrap();
    let d = tape.value(y).data();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    assert!(d.iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    // a second pass accumulates
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());

    let xv = vec![1.0, 2.0, 3.0];
    let yv = vec![-4.0, 0.5, 7.0];
    let x = tape.param(Tensor::new(vec![3], xv.clone()).unwrap());
    let y = tape.param(Tensor::new(vec![3], yv.clone()).unwrap());
    let p = tape.mul(x, y).unwrap();
    let dot = tape.sum(p);
    tape.backward(dot).unwrap();
    assert_eq!(tape.grad(x).unwrap(), yv.as_slice());
    assert_eq!(tape.grad(y).unwrap(), xv.as_slice());

    assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
}

#[test]
fn grad_check_examples() {
    let theta = vec![Tensor::scalar(3.0)];
    let err = grad_check(&theta, 1e-5, |t, v| t.mul(v[0], v[0])).unwrap();
    assert!(err < 1e-10, "{err}");

    let nan = grad_check(&theta, 1e-5, |t, v| {
        let y = t.scale(v[0], f64::NAN);
        Ok(y)
    });
    assert!(matches!(nan, Err(Error::Numeric(_))));
    assert!(grad_check(&theta, 0.0, |_, v| Ok(v[0])).is_err());
}

// Cross-entropy of softmax(x W + b) against fixed one-hot targets.
#[test]
fn grad_check_linear_softmax_ce() {
    let mut rng = rng_for(9, 0);
    let x = randn(&[6, 3], &mut rng);
    let targets = [0usize, 1, 1, 0, 1, 0];
    let onehot = Tensor::from_fn(&[6, 2], |i| (targets[i / 2] == i % 2) as u8 as f64);
    let params = vec![randn(&[3, 2], &mut rng), randn(&[2], &mut rng)];
    let err = grad_check(&params, 1e-5, |t, p| {
        let xv = t.constant(x.clone());
        let z = t.matmul(xv, p[0])?;
        let z = t.add_row(z, p[1])?;
        let s = t.softmax(z, 1)?;
        let l = t.ln(s)?;
        let y = t.constant(onehot.clone());
        let picked = t.mul(l, y)?;
        let total = t.sum(picked);
        Ok(t.scale(total, -1.0 / 6.0))
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

/// Weighted sum with a fixed random probe so every output entry matters.
fn probe(t: &mut Tape, y: Var, seed: u64) -> Result<Var, Error> {
    let mut rng = rng_for(seed, 99);
    let w = randn(t.value(y).shape(), &mut rng);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn check(params: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var, Error>) {
    let err = grad_check(&params, 1e-5, |t, v| {
        let y = f(t, v)?;
        probe(t, y, 1)
    })
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn primitive_gradients() {
    let mut rng = rng_for(21, 0);
    let mut r = |s: &[usize]| randn(s, &mut rng);

    check(vec![r(&[2, 3, 4]), r(&[4, 5])], |t, p| t.matmul(p[0], p[1]));
    check(vec![r(&[3, 4]), r(&[3, 4])], |t, p| t.add(p[0], p[1]));
    check(vec![r(&[3, 4]), r(&[4])], |t, p| t.add_row(p[0], p[1]));
    check(vec![r(&[3, 4]), r(&[3, 4])], |t, p| t.mul(p[0], p[1]));
    check(vec![r(&[5])], |t, p| Ok(t.scale(p[0], -2.5)));
    check(vec![r(&[2, 6])], |t, p| t.reshape(p[0], &[3, 4]));
    for axis in 0..3 {
        check(vec![r(&[2, 3, 4])], move |t, p| t.softmax(p[0], axis));
    }
    check(vec![r(&[3, 5]), r(&[5]), r(&[5])], |t, p| {
        t.layer_norm(p[0], p[1], p[2])
    });
    check(vec![r(&[4, 4])], |t, p| Ok(t.gelu(p[0])));
    check(vec![Tensor::from_fn(&[6], |i| 0.5 + i as f64)], |t, p| t.ln(p[0]));

    // Dropout and attention draw masks from a fixed stream on every evaluation
    // so finite differences see the same mask as the analytic pass.
    check(vec![r(&[4, 5])], |t, p| {
        let mut g = rng_for(4, 4);
        t.dropout(p[0], 0.3, Mode::Train, &mut g)
    });
    for (rows, group, heads, drop) in [(6, 3, 2, 0.0), (4, 4, 1, 0.0), (6, 2, 2, 0.25)] {
        check(vec![r(&[rows, 4]), r(&[rows, 4]), r(&[rows, 4])], move |t, p| {
            let mut g = rng_for(5, 5);
            t.attention(p[0], p[1], p[2], group, heads, drop, Mode::Train, &mut g)
        });
    }
    let widths = [1usize, 3, 2];
    check(vec![r(&[4, 6]), r(&[6, 3]), r(&[3, 3])], move |t, p| {
        t.grouped_linear_in(p[0], p[1], p[2], &widths)
    });
    check(vec![r(&[4, 3, 5]), r(&[5, 6]), r(&[6])], move |t, p| {
        t.grouped_linear_out(p[0], p[1], p[2], &widths)
    });
    check(vec![r(&[4, 3, 2]), r(&[3, 2]), r(&[2, 2])], |t, p| {
        t.group_embeddings(p[0], p[1], p[2], &[0, 1, 0])
    });
}

#[test]
fn attention_single_key_passes_values_through() {
    let mut rng = rng_for(2, 0);
    let q = randn(&[3, 4], &mut rng);
    let v = randn(&[3, 4], &mut rng);
    let mut tape = Tape::no_grad();
    let (qv, vv) = (tape.constant(q.clone()), tape.constant(v.clone()));
    let y = tape
        .attention(qv, qv, vv, 1, 2, 0.0, Mode::Eval, &mut rng)
        .unwrap();
    assert_eq!(tape.value(y), &v);
}

#[test]
fn attention_matches_straight_line_oracle() {
    let mut rng = rng_for(8, 0);
    let (rows, h, heads, group) = (6, 6, 3, 3);
    let q = randn(&[rows, h], &mut rng);
    let k = randn(&[rows, h], &mut rng);
    let v = randn(&[rows, h], &mut rng);
    let mut tape = Tape::no_grad();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let y = tape
        .attention(qv, kv, vv, group, heads, 0.0, Mode::Eval, &mut rng)
        .unwrap();
    let hk = h / heads;
    for g in 0..rows / group {
        for j in 0..heads {
            for a in 0..group {
                let ra = g * group + a;
                let logits: Vec<f64> = (0..group)
                    .map(|b| {
                        let rb = g * group + b;
                        (0..hk)
                            .map(|c| q.at(&[ra, j * hk + c]) * k.at(&[rb, j * hk + c]))
                            .sum::<f64>()
                            / (hk as f64).sqrt()
                    })
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for c in 0..hk {
                    let want: f64 = (0..group)
                        .map(|b| logits[b].exp() / z * v.at(&[g * group + b, j * hk + c]))
                        .sum();
                    assert!((tape.value(y).at(&[ra, j * hk + c]) - want).abs() < 1e-12);
                }
            }
        }
    }
}
