//! Network evaluation and reverse mode against independent references:
//! a from-scratch layer-by-layer evaluation and central differences.

use primdiff::nn::{Activation, ApproximatorSpec, ApproximatorWeights};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
        }
        Activation::Tanh => x.tanh(),
        Activation::Identity => x,
    }
}

/// Reads the flat parameter vector as `[W_0 (out x in, row-major), b_0, W_1, ...]`.
fn reference_forward(spec: &ApproximatorSpec, params: &[f64], input: &[f64]) -> Vec<f64> {
    let mut dims = vec![spec.input_dim];
    dims.extend(&spec.hidden_dims);
    dims.push(spec.output_dim);
    let mut x = input.to_vec();
    let mut off = 0;
    for l in 0..dims.len() - 1 {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let w = &params[off..off + n_in * n_out];
        let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        let mut y = vec![0.0; n_out];
        for r in 0..n_out {
            let mut s = b[r];
            for c in 0..n_in {
                s += w[r * n_in + c] * x[c];
            }
            y[r] = if l + 2 < dims.len() {
                act(spec.activation, s)
            } else {
                s
            };
        }
        x = y;
    }
    x
}

fn shapes() -> Vec<ApproximatorSpec> {
    vec![
        ApproximatorSpec::new(5, vec![7, 6], 1, Activation::Gelu, 0),
        ApproximatorSpec::new(4, vec![9], 3, Activation::Tanh, 0),
        ApproximatorSpec::new(6, vec![8, 8, 5], 2, Activation::Gelu, 0),
        ApproximatorSpec::new(3, vec![4], 4, Activation::Identity, 0),
    ]
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

#[test]
fn forward_matches_layerwise_reference() {
    for spec in shapes() {
        for seed in 0..5 {
            let s = ApproximatorSpec {
                init_seed: seed,
                ..spec.clone()
            };
            let w = ApproximatorWeights::init(&s).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let x = normals(&mut rng, s.input_dim);
            let got = w.predict(&x).unwrap();
            let want = reference_forward(&s, w.params(), &x);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }
}

fn close(bp: f64, fd: f64, scale: f64) -> bool {
    (bp - fd).abs() <= 1e-4 * fd.abs().max(1e-3 * scale)
}

/// Every parameter and input coordinate of a scalar-output network against
/// central differences with `h = 1e-5`, ten seeds per shape.
#[test]
fn gradients_match_central_differences() {
    let h = 1e-5;
    for spec in shapes() {
        for seed in 0..10 {
            let s = ApproximatorSpec {
                init_seed: seed,
                ..spec.clone()
            };
            let mut w = ApproximatorWeights::init(&s).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let x = normals(&mut rng, s.input_dim);
            let c = normals(&mut rng, s.output_dim);
            let loss = |w: &ApproximatorWeights, x: &[f64]| -> f64 {
                w.predict(x)
                    .unwrap()
                    .iter()
                    .zip(&c)
                    .map(|(o, k)| o * k)
                    .sum()
            };
            let (_, tape) = w.forward(&x).unwrap();
            let (pg, ig) = w.backward(&tape, &c).unwrap();
            let pscale = pg.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            for i in 0..w.num_params() {
                let orig = w.params()[i];
                w.params_mut()[i] = orig + h;
                let up = loss(&w, &x);
                w.params_mut()[i] = orig - h;
                let down = loss(&w, &x);
                w.params_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!(
                    close(pg[i], fd, pscale),
                    "{s:?} param {i}: {} vs {fd}",
                    pg[i]
                );
            }
            let iscale = ig.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            for j in 0..x.len() {
                let mut xp = x.clone();
                xp[j] += h;
                let mut xm = x.clone();
                xm[j] -= h;
                let fd = (loss(&w, &xp) - loss(&w, &xm)) / (2.0 * h);
                assert!(
                    close(ig[j], fd, iscale),
                    "{s:?} input {j}: {} vs {fd}",
                    ig[j]
                );
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The EMA result lies on the segment between the two weight vectors.
    #[test]
    fn ema_is_a_convex_combination(seed in any::<u64>(), mu in 0.0f64..=1.0) {
        let spec = ApproximatorSpec::new(3, vec![4], 2, Activation::Gelu, seed);
        let a = ApproximatorWeights::init(&spec).unwrap();
        let other = ApproximatorWeights::init(&ApproximatorSpec {
            init_seed: seed.wrapping_add(1),
            ..spec.clone()
        })
        .unwrap();
        let b = ApproximatorWeights::from_params(spec.clone(), other.params().to_vec()).unwrap();
        let mut m = a.clone();
        m.ema_toward(&b, mu).unwrap();
        for ((x, y), z) in a.params().iter().zip(b.params()).zip(m.params()) {
            let (lo, hi) = (x.min(*y), x.max(*y));
            prop_assert!(*z >= lo - 1e-15 && *z <= hi + 1e-15);
            prop_assert!((z - (mu * x + (1.0 - mu) * y)).abs() <= 1e-15 * (1.0 + x.abs() + y.abs()));
        }
    }

    #[test]
    fn backward_is_linear_in_the_upstream_gradient(seed in any::<u64>(), k in -4.0f64..4.0) {
        let spec = ApproximatorSpec::new(4, vec![5], 3, Activation::Tanh, seed);
        let w = ApproximatorWeights::init(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normals(&mut rng, 4);
        let g = normals(&mut rng, 3);
        let (_, tape) = w.forward(&x).unwrap();
        let (p1, i1) = w.backward(&tape, &g).unwrap();
        let gk: Vec<f64> = g.iter().map(|v| k * v).collect();
        let (pk, ik) = w.backward(&tape, &gk).unwrap();
        for (a, b) in p1.iter().chain(&i1).zip(pk.iter().chain(&ik)) {
            prop_assert!((k * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
