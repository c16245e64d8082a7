use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum of `out` with fixed random weights, so every output element matters.
fn weighted_loss(g: &mut Graph, out: NodeId, seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.shape(out).to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

#[test]
fn identity_affine_is_identity() {
    let mut store = ParamStore::new();
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    store.insert("w", Tensor::new(vec![3, 3], eye).unwrap());
    store.insert("b", Tensor::zeros(&[3]));
    let mut g = Graph::new();
    let v = g.input("v", Tensor::vector(vec![0.5, -1.25, 3.0])).unwrap();
    let w = g.param(&store, "w").unwrap();
    let b = g.param(&store, "b").unwrap();
    let y = g.affine(v, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -1.25, 3.0]);
}

#[test]
fn relu_definition() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn conv_of_ones_sums_window() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::full(&[1, 3, 3], 1.0)).unwrap();
    let w = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 2]);
    assert_eq!(g.value(y).data(), &[4.0; 4]);
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(stride, padding) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
        let x = rand_tensor(&mut rng, &[2, 7, 6]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let mut g = Graph::new();
        let (xi, wi, bi) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xi, wi, bi, stride, padding).unwrap();
        let (oh, ow) = ((7 + 2 * padding - 3) / stride + 1, (6 + 2 * padding - 3) / stride + 1);
        assert_eq!(g.shape(y), &[3, oh, ow]);
        for o in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= 7 || ix >= 6 {
                                    continue;
                                }
                                acc += w.data()[((o * 2 + c) * 3 + ky) * 3 + kx]
                                    * x.data()[(c * 7 + iy as usize) * 6 + ix as usize];
                            }
                        }
                    }
                    let got = g.value(y).data()[(o * oh + oy) * ow + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn gradient_of_squared_norm() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::vector(vec![1.0, -2.0]));
    let mut g = Graph::new();
    let w = g.param(&store, "w").unwrap();
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss, &store).unwrap();
    assert_eq!(grads.get("w").unwrap().data(), &[2.0, -4.0]);
}

#[test]
fn unreached_parameter_gets_zero_gradient() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::vector(vec![1.0, 2.0]));
    store.insert("p", Tensor::vector(vec![3.0, 4.0, 5.0]));
    let mut g = Graph::new();
    let w = g.param(&store, "w").unwrap();
    let _p = g.param(&store, "p").unwrap();
    let loss = g.sum(w);
    let grads = g.backward(loss, &store).unwrap();
    assert_eq!(grads.get("p").unwrap().data(), &[0.0; 3]);
    assert_eq!(grads.get("w").unwrap().data(), &[1.0; 2]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let store = ParamStore::new();
    let mut g = Graph::new();
    let x = g.input("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(x, &store), Err(Error::NotScalar(_))));
}

#[test]
fn shape_errors_name_the_node() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
    let y = g.input("y", Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
    match g.add(x, y) {
        Err(Error::Shape { node, .. }) => assert!(node.starts_with("add#"), "{node}"),
        other => panic!("expected shape error, got {other:?}"),
    }
    let w = g.constant(Tensor::zeros(&[3, 2]));
    let b = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.affine(x, w, b), Err(Error::Shape { .. })));
}

#[test]
fn non_finite_input_rejected() {
    let mut g = Graph::new();
    let err = g.input("x", Tensor::vector(vec![1.0, f64::NAN])).unwrap_err();
    assert!(matches!(err, Error::NonFinite(ref what) if what.contains('x')));
}

#[test]
fn evaluation_is_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    store.insert_uniform("w", &[4, 1, 3, 3], 9, &mut rng);
    store.insert_uniform("b", &[4], 9, &mut rng);
    let x = rand_tensor(&mut rng, &[1, 8, 8]);
    let run = || {
        let mut g = Graph::new();
        let xi = g.input("x", x.clone()).unwrap();
        let w = g.param(&store, "w").unwrap();
        let b = g.param(&store, "b").unwrap();
        let c = g.conv2d(xi, w, b, 1, 1).unwrap();
        let s = g.softmax(c, 0).unwrap();
        g.value(s).data().to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn softmax_and_sigmoid_ranges() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let x = Tensor::new(vec![3, 5, 2], (0..30).map(|_| rng.random_range(-30.0..30.0)).collect()).unwrap();
        let mut g = Graph::new();
        let xi = g.input("x", x).unwrap();
        let axis = trial % 3;
        let s = g.softmax(xi, axis).unwrap();
        let shape = g.shape(s).to_vec();
        let v = g.value(s).data();
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let total: f64 = (0..shape[axis]).map(|k| v[(o * shape[axis] + k) * inner + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        let sg = g.sigmoid(xi);
        assert!(g.value(sg).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn top_r_mean_matches_sort() {
    let mut g = Graph::new();
    let x = g
        .input(
            "x",
            Tensor::new(vec![1, 4, 4], (1..=16).map(|k| k as f64 / 16.0).collect()).unwrap(),
        )
        .unwrap();
    let y = g.top_r_mean(x, 0.25).unwrap();
    assert!((g.value(y).data()[0] - 0.90625).abs() < 1e-15);
    assert_eq!(top_count(0.3, 10), 3);
    assert_eq!(top_count(1.0, 64), 64);
    assert_eq!(top_count(1e-6, 64), 1);
}

type OpBuilder = fn(&mut Graph, &ParamStore) -> Result<NodeId>;

fn op_cases() -> Vec<(&'static str, Vec<(&'static str, Vec<usize>)>, OpBuilder)> {
    vec![
        (
            "affine",
            vec![("x", vec![3, 4]), ("w", vec![4, 5]), ("b", vec![5])],
            |g, s| {
                let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
                g.affine(x, w, b)
            },
        ),
        ("matmul", vec![("a", vec![2, 3]), ("b", vec![3, 4])], |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            g.matmul(a, b)
        }),
        (
            "conv2d",
            vec![("x", vec![2, 5, 6]), ("w", vec![3, 2, 3, 3]), ("b", vec![3])],
            |g, s| {
                let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
                g.conv2d(x, w, b, 1, 1)
            },
        ),
        (
            "conv2d_strided",
            vec![("x", vec![1, 7, 7]), ("w", vec![2, 1, 3, 3]), ("b", vec![2])],
            |g, s| {
                let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
                g.conv2d(x, w, b, 2, 1)
            },
        ),
        ("relu", vec![("x", vec![12])], |g, s| {
            let x = g.param(s, "x")?;
            Ok(g.relu(x))
        }),
        ("sigmoid", vec![("x", vec![12])], |g, s| {
            let x = g.param(s, "x")?;
            Ok(g.sigmoid(x))
        }),
        ("tanh", vec![("x", vec![12])], |g, s| {
            let x = g.param(s, "x")?;
            Ok(g.tanh(x))
        }),
        ("abs", vec![("x", vec![12])], |g, s| {
            let x = g.param(s, "x")?;
            Ok(g.abs(x))
        }),
        ("softmax", vec![("x", vec![3, 4])], |g, s| {
            let x = g.param(s, "x")?;
            g.softmax(x, 1)
        }),
        ("max_pool2d", vec![("x", vec![2, 4, 6])], |g, s| {
            let x = g.param(s, "x")?;
            g.max_pool2d(x, 2, 2)
        }),
        ("global_max_pool", vec![("x", vec![3, 4, 4])], |g, s| {
            let x = g.param(s, "x")?;
            g.global_max_pool(x)
        }),
        ("top_r_mean", vec![("x", vec![2, 5, 5])], |g, s| {
            let x = g.param(s, "x")?;
            g.top_r_mean(x, 0.3)
        }),
        ("mul_add", vec![("a", vec![6]), ("b", vec![6])], |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            let m = g.mul(a, b)?;
            g.add(m, a)
        }),
        ("concat", vec![("a", vec![2, 3]), ("b", vec![2, 2])], |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            g.concat(&[a, b], 1)
        }),
        ("mean", vec![("x", vec![3, 4, 2])], |g, s| {
            let x = g.param(s, "x")?;
            g.mean(x, 1)
        }),
        ("reshape_scale", vec![("x", vec![2, 6])], |g, s| {
            let x = g.param(s, "x")?;
            let r = g.reshape(x, vec![3, 4])?;
            Ok(g.scale_shift(r, -1.5, 0.25))
        }),
        ("ln_clamped", vec![("x", vec![8])], |g, s| {
            let x = g.param(s, "x")?;
            let p = g.sigmoid(x);
            Ok(g.ln_clamped(p, 1e-12))
        }),
        ("bce", vec![("x", vec![6])], |g, s| {
            let x = g.param(s, "x")?;
            let p = g.sigmoid(x);
            g.bce(p, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0], 1e-12)
        }),
    ]
}

#[test]
fn every_op_matches_finite_differences() {
    for (name, inputs, build) in op_cases() {
        for trial in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial * 101 + name.len() as u64);
            let mut store = ParamStore::new();
            for (pname, shape) in &inputs {
                store.insert(*pname, rand_tensor(&mut rng, shape));
            }
            let report = check_gradients(&store, 1e-5, None, |s| {
                let mut g = Graph::new();
                let out = build(&mut g, s)?;
                let loss = weighted_loss(&mut g, out, trial);
                Ok((g, loss))
            })
            .unwrap();
            assert!(report.max_relative_error < 1e-4, "{name} trial {trial}: {report:?}");
        }
    }
}

#[test]
fn three_layer_network_gradients() {
    for trial in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let mut store = ParamStore::new();
        store.insert_uniform("l1.w", &[5, 8], 5, &mut rng);
        store.insert_uniform("l1.b", &[8], 5, &mut rng);
        store.insert_uniform("l2.w", &[8, 6], 8, &mut rng);
        store.insert_uniform("l2.b", &[6], 8, &mut rng);
        store.insert_uniform("l3.w", &[6, 1], 6, &mut rng);
        store.insert_uniform("l3.b", &[1], 6, &mut rng);
        let x = rand_tensor(&mut rng, &[4, 5]);
        let report = check_gradients(&store, 1e-5, None, |s| {
            let mut g = Graph::new();
            let xi = g.input("x", x.clone())?;
            let (w1, b1) = (g.param(s, "l1.w")?, g.param(s, "l1.b")?);
            let h1 = g.affine(xi, w1, b1)?;
            let h1 = g.tanh(h1);
            let (w2, b2) = (g.param(s, "l2.w")?, g.param(s, "l2.b")?);
            let h2 = g.affine(h1, w2, b2)?;
            let h2 = g.sigmoid(h2);
            let (w3, b3) = (g.param(s, "l3.w")?, g.param(s, "l3.b")?);
            let out = g.affine(h2, w3, b3)?;
            let loss = g.sum(out);
            Ok((g, loss))
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}

#[test]
fn uniform_init_respects_fan_in_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    store.insert_uniform("w", &[16, 25], 25, &mut rng);
    let t = store.get("w").unwrap();
    assert!(t.data().iter().all(|v| v.abs() <= 0.2));
    assert!(t.requires_grad());
}

#[test]
fn node_labels_identify_ops() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::vector(vec![1.0]));
    let mut g = Graph::new();
    let w = g.param(&store, "w").unwrap();
    let r = g.relu(w);
    assert_eq!(g.node_label(w), "param(w)#0");
    assert_eq!(g.node_label(r), "relu#1");
}

#[test]
fn signature_tracks_relu_branches() {
    let sig = |v: f64| {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![v, 1.0]));
        let mut g = Graph::new();
        let x = g.param(&store, "w").unwrap();
        let _ = g.relu(x);
        g.branch_signature()
    };
    assert_eq!(sig(0.5), sig(0.7));
    assert_ne!(sig(0.5), sig(-0.5));
}
