//! Operation examples and central-difference gradient checks for the tape.

use geossl::graph::{Graph, Var};
use geossl::tensor::{Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Central-difference check of `build` (which must produce a scalar) with
/// respect to every input. Returns the worst relative error.
fn gradcheck(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var, step: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| g.leaf(x.clone().with_grad()))
        .collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_or_zero(v)).collect();

    let eval = |perturbed: &[Tensor]| {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = perturbed.iter().map(|x| g.leaf(x.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-6));
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn matmul_examples() {
    let mut g = Graph::no_grad();
    let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let id = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let z = g.leaf(Tensor::zeros(&[2, 3]));
    let r = g.matmul(a, id).unwrap();
    assert_eq!(g.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);
    let r = g.matmul(a, b).unwrap();
    assert_eq!(g.value(r).data(), &[19.0, 22.0, 43.0, 50.0]);
    let r = g.matmul(a, z).unwrap();
    assert_eq!(g.shape(r), &[2, 3]);
    assert!(g.value(r).data().iter().all(|&v| v == 0.0));
    let bad = g.leaf(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.matmul(a, bad), Err(TensorError::Shape(_))));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::no_grad();
    let x = g.leaf(t(&[2], &[0.0, 0.0]));
    let s = g.softmax_temp(x, 1.0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    let x = g.leaf(t(&[2], &[2f64.ln(), 0.0]));
    let s = g.softmax_temp(x, 1.0).unwrap();
    assert!((g.value(s).data()[0] - 2.0 / 3.0).abs() < 1e-9);
    assert!((g.value(s).data()[1] - 1.0 / 3.0).abs() < 1e-9);
    let x = g.leaf(t(&[2], &[1.0, 0.0]));
    let s = g.softmax_temp(x, 0.01).unwrap();
    assert!(g.value(s).data()[0] >= 1.0 - 1e-4);
    assert!(matches!(g.softmax_temp(x, 0.0), Err(TensorError::Param(_))));
    assert!(matches!(
        g.softmax_temp(x, -1.0),
        Err(TensorError::Param(_))
    ));
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::no_grad();
    let one = g.leaf(Tensor::full(&[2], 1.0));
    let zero = g.leaf(Tensor::zeros(&[2]));
    let c = g.leaf(t(&[2], &[3.0, 3.0]));
    let y = g.layer_norm(c, one, zero, 1e-6).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    let x = g.leaf(t(&[2], &[1.0, -1.0]));
    let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
    assert!((g.value(y).data()[0] - 1.0).abs() < 1e-9);
    assert!((g.value(y).data()[1] + 1.0).abs() < 1e-9);
    let gz = g.leaf(Tensor::zeros(&[2]));
    let b = g.leaf(t(&[2], &[0.3, -0.7]));
    let y = g.layer_norm(x, gz, b, 1e-6).unwrap();
    assert_eq!(g.value(y).data(), &[0.3, -0.7]);
    let wide = g.leaf(Tensor::full(&[3], 1.0));
    assert!(matches!(
        g.layer_norm(x, wide, zero, 1e-6),
        Err(TensorError::Shape(_))
    ));
}

#[test]
fn gelu_examples() {
    let mut g = Graph::no_grad();
    let x = g.leaf(t(&[3], &[0.0, 10.0, 1.0]));
    let y = g.gelu(x);
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-6);
    // Φ(1) from a high-precision table value.
    assert!((v[2] - 0.841_344_746).abs() < 1e-3);
    assert!((v[2] - 0.841_344_746).abs() < 1e-8);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::no_grad();
    let p = g.leaf(t(&[2], &[1.0, 0.0]));
    let l = g.cross_entropy(&t(&[2], &[1.0, 0.0]), p).unwrap();
    assert!(g.value(l).item().abs() < 1e-6);
    let half = g.leaf(t(&[2], &[0.5, 0.5]));
    let l = g.cross_entropy(&t(&[2], &[1.0, 0.0]), half).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
    let l = g.cross_entropy(&t(&[2], &[0.5, 0.5]), half).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
    let off = g.leaf(t(&[2], &[0.5, 0.6]));
    assert!(matches!(
        g.cross_entropy(&t(&[2], &[1.0, 0.0]), off),
        Err(TensorError::Validation(_))
    ));
    assert!(matches!(
        g.cross_entropy(&t(&[2], &[0.7, 0.0]), half),
        Err(TensorError::Validation(_))
    ));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0).with_grad());
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0).with_grad());
    let unused = g.leaf(Tensor::from_vec(vec![1.0, 2.0]).with_grad());
    let c = g.constant(Tensor::scalar(5.0));
    let y = g.add(c, c).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad_or_zero(x), vec![0.0]);
    assert_eq!(g.grad_or_zero(unused), vec![0.0, 0.0]);

    let mut g = Graph::new();
    let v = g.leaf(Tensor::from_vec(vec![1.0, 2.0]).with_grad());
    assert!(matches!(g.backward(v), Err(TensorError::Usage(_))));
    let mut ng = Graph::no_grad();
    let s = ng.leaf(Tensor::scalar(1.0));
    assert!(matches!(ng.backward(s), Err(TensorError::Usage(_))));
}

#[test]
fn composite_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&[3, 4], &mut rng);
    let w = rand_tensor(&[4, 5], &mut rng);
    let gamma = rand_tensor(&[5], &mut rng);
    let beta = rand_tensor(&[5], &mut rng);
    let target = {
        let raw: Vec<f64> = (0..15).map(|_| rng.random_range(0.1..1.0)).collect();
        let mut out = Vec::new();
        for row in raw.chunks(5) {
            let s: f64 = row.iter().sum();
            out.extend(row.iter().map(|v| v / s));
        }
        Tensor::new(vec![3, 5], out).unwrap()
    };
    let worst = gradcheck(
        &[x, w, gamma, beta],
        |g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.layer_norm(h, v[2], v[3], 1e-5).unwrap();
            let p = g.softmax_temp(h, 0.7).unwrap();
            g.cross_entropy(&target, p).unwrap()
        },
        1e-4,
    );
    assert!(worst < 1e-3, "worst relative error {worst}");
    assert!(
        worst < 1e-5,
        "double-precision bound, worst relative error {worst}"
    );
}

#[test]
fn kernel_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let step = 1e-5;
    let weights = rand_tensor(&[6, 3], &mut rng);
    let readout = |g: &mut Graph, y: Var, w: &Tensor| {
        let w = g.constant(w.clone());
        let r = g.mul(y, w).unwrap();
        g.sum(r)
    };

    let x = rand_tensor(&[6, 3], &mut rng);
    let w2 = weights.clone();
    assert!(
        gradcheck(
            std::slice::from_ref(&x),
            |g, v| {
                let y = g.gelu(v[0]);
                readout(g, y, &w2)
            },
            step
        ) < 1e-5
    );
    let w2 = weights.clone();
    assert!(
        gradcheck(
            std::slice::from_ref(&x),
            |g, v| {
                let y = g.softmax_temp(v[0], 0.3).unwrap();
                readout(g, y, &w2)
            },
            step
        ) < 1e-5
    );
    let b = rand_tensor(&[3], &mut rng);
    let w2 = weights.clone();
    assert!(
        gradcheck(
            &[x.clone(), b.clone()],
            |g, v| {
                let y = g.add_row(v[0], v[1]).unwrap();
                readout(g, y, &w2)
            },
            step
        ) < 1e-5
    );
    let lw = rand_tensor(&[3, 3], &mut rng);
    let w2 = weights.clone();
    assert!(
        gradcheck(
            &[x.clone(), lw, b.clone()],
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
                readout(g, y, &w2)
            },
            step
        ) < 1e-5
    );
    let w2 = weights.clone();
    assert!(
        gradcheck(
            std::slice::from_ref(&x),
            |g, v| {
                let y = g.gather_rows(v[0], &[5, 0, 5, 2, 1, 3]).unwrap();
                readout(g, y, &w2)
            },
            step
        ) < 1e-5
    );
    let other = rand_tensor(&[6, 3], &mut rng);
    let w2 = weights.clone();
    assert!(
        gradcheck(
            &[x.clone(), other.clone()],
            |g, v| {
                let y = g.mul(v[0], v[1]).unwrap();
                let y = g.sub(y, v[1]).unwrap();
                readout(g, y, &w2)
            },
            step
        ) < 1e-5
    );

    // attention over 2 sequences of 3 tokens, width 4, 2 heads
    let qkv = rand_tensor(&[6, 12], &mut rng);
    let aw = rand_tensor(&[6, 4], &mut rng);
    assert!(
        gradcheck(
            &[qkv],
            |g, v| {
                let y = g.attention(v[0], 2, 3, 2).unwrap();
                readout(g, y, &aw)
            },
            step
        ) < 1e-5
    );

    // token assembly with masking
    let patches = rand_tensor(&[4, 3], &mut rng);
    let cls = rand_tensor(&[3], &mut rng);
    let mtok = rand_tensor(&[3], &mut rng);
    let pos = rand_tensor(&[3, 3], &mut rng);
    let ew = weights.clone();
    assert!(
        gradcheck(
            &[patches, cls, mtok, pos],
            |g, v| {
                let y = g
                    .embed_tokens(v[0], v[1], v[2], v[3], 2, &[false, true, false, false])
                    .unwrap();
                readout(g, y, &ew)
            },
            step
        ) < 1e-5
    );

    let w2 = weights.clone();
    assert!(
        gradcheck(
            std::slice::from_ref(&x),
            |g, v| {
                let y = g.normalize_rows(v[0], 1e-12).unwrap();
                readout(g, y, &w2)
            },
            step
        ) < 1e-5
    );
    let wt = rand_tensor(&[3, 6], &mut rng);
    assert!(
        gradcheck(
            std::slice::from_ref(&x),
            |g, v| {
                let y = g.transpose(v[0]).unwrap();
                readout(g, y, &wt)
            },
            step
        ) < 1e-5
    );

    let logits = rand_tensor(&[2, 4], &mut rng);
    let target = Tensor::new(vec![2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.7, 0.1, 0.1, 0.1]).unwrap();
    assert!(
        gradcheck(
            &[logits],
            |g, v| g.soft_cross_entropy(&target, v[0], 0.2).unwrap(),
            step
        ) < 1e-5
    );
}

#[test]
fn soft_cross_entropy_agrees_with_composed_form() {
    let mut g = Graph::no_grad();
    let l = g.leaf(t(&[2, 3], &[0.3, -0.2, 1.5, 0.0, 0.1, -2.0]));
    let target = t(&[2, 3], &[0.2, 0.5, 0.3, 1.0, 0.0, 0.0]);
    let fused = g.soft_cross_entropy(&target, l, 0.1).unwrap();
    let p = g.softmax_temp(l, 0.1).unwrap();
    let composed = g.cross_entropy(&target, p).unwrap();
    assert!((g.value(fused).item() - g.value(composed).item()).abs() < 1e-9);
}

#[test]
fn normalize_and_transpose_examples() {
    let mut g = Graph::no_grad();
    let x = g.leaf(t(&[2, 2], &[3.0, 4.0, 0.0, -2.0]));
    let y = g.normalize_rows(x, 1e-30).unwrap();
    assert_eq!(g.value(y).data(), &[0.6, 0.8, 0.0, -1.0]);
    let m = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let mt = g.transpose(m).unwrap();
    assert_eq!(g.value(mt).shape(), &[3, 2]);
    assert_eq!(g.value(mt).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    let z = g.leaf(Tensor::zeros(&[1, 3]));
    let nz = g.normalize_rows(z, 1e-12).unwrap();
    assert_eq!(g.value(nz).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_twice_is_bitwise_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut g = Graph::new();
    let qkv = g.leaf(rand_tensor(&[8, 12], &mut rng).with_grad());
    let a = g.attention(qkv, 2, 4, 2).unwrap();
    let s = g.softmax_temp(a, 0.5).unwrap();
    let y = g.mul(s, a).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    let first = g.grad(qkv).unwrap().to_vec();
    g.backward(l).unwrap();
    let second = g.grad(qkv).unwrap();
    assert!(first
        .iter()
        .zip(second)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 1..24), tau in 0.01f64..5.0) {
        let mut g = Graph::no_grad();
        let n = vals.len();
        let x = g.leaf(Tensor::new(vec![n], vals).unwrap());
        let s = g.softmax_temp(x, tau).unwrap();
        let p = g.value(s).data();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        // entries may underflow to zero at small temperatures, never below
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn gibbs_inequality(a in prop::collection::vec(0.01f64..1.0, 2..10), b in prop::collection::vec(0.01f64..1.0, 2..10)) {
        let k = a.len().min(b.len());
        let norm = |v: &[f64]| { let s: f64 = v[..k].iter().sum(); v[..k].iter().map(|x| x / s).collect::<Vec<_>>() };
        let (p, q) = (norm(&a), norm(&b));
        let entropy = geossl::kernels::entropy(&p);
        let mut g = Graph::no_grad();
        let pv = g.leaf(Tensor::from_vec(p.clone()));
        let qv = g.leaf(Tensor::from_vec(q));
        let self_ce = g.cross_entropy(&Tensor::from_vec(p.clone()), pv).unwrap();
        let ce = g.cross_entropy(&Tensor::from_vec(p), qv).unwrap();
        prop_assert!((g.value(self_ce).item() - entropy).abs() < 1e-9);
        prop_assert!(g.value(ce).item() >= entropy - 1e-6);
    }

    #[test]
    fn layer_norm_gradient_random(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[2, 5], &mut rng);
        let gamma = rand_tensor(&[5], &mut rng);
        let beta = rand_tensor(&[5], &mut rng);
        let w = rand_tensor(&[2, 5], &mut rng);
        let worst = gradcheck(&[x, gamma, beta], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let c = g.constant(w.clone());
            let r = g.mul(y, c).unwrap();
            g.sum(r)
        }, 1e-5);
        prop_assert!(worst < 1e-5, "worst {}", worst);
    }
}
