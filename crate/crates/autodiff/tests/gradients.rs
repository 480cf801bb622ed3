//! Analytic gradients against central finite differences, plus graph-level
//! properties of the reverse sweep.

use augsearch_autodiff::numeric::{central_difference, relative_error};
use augsearch_autodiff::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f32 = 1e-3;
const TOL: f64 = 1e-2;

fn random(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Projects an output onto fixed random weights so that every output
/// element contributes to the checked scalar.
fn projection(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random(shape, -1.0, 1.0, &mut rng)
}

fn project(y: &Tensor, r: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

/// Checks d(sum(r * f(inputs)))/d(inputs[k]) for every k.
fn gradcheck(inputs: &[Tensor], f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) -> Vec<f64> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = f(&tape, &vars);
    let r = projection(&y.shape(), 99);
    let loss = y.mul_const(r.clone()).unwrap().sum();
    loss.backward().unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();

    (0..inputs.len())
        .map(|k| {
            let numeric = central_difference(
                |probe| {
                    let tape = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, t)| tape.constant(if i == k { probe.clone() } else { t.clone() }))
                        .collect();
                    project(&f(&tape, &vars).value(), &r)
                },
                &inputs[k],
                H,
            );
            relative_error(&analytic[k], &numeric)
        })
        .collect()
}

fn assert_all_pass(name: &str, errs: &[f64]) {
    for (k, e) in errs.iter().enumerate() {
        assert!(*e < TOL, "{name}: input {k} relative error {e}");
    }
}

#[test]
fn unary_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // Keep away from kinks (0 for abs/relu) and the log/sqrt domain edge.
    let x = Tensor::from_fn(&[3, 5], |_| {
        let v: f32 = rng.gen_range(0.2..2.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let pos = x.map(f32::abs);
    let cases: Vec<(&str, Tensor, fn(Var) -> Var)> = vec![
        ("neg", x.clone(), |v| v.neg()),
        ("exp", x.clone(), |v| v.exp()),
        ("log", pos.clone(), |v| v.ln()),
        ("abs", x.clone(), |v| v.abs()),
        ("sigmoid", x.clone(), |v| v.sigmoid()),
        ("relu", x.clone(), |v| v.relu()),
        ("sin", x.clone(), |v| v.sin()),
        ("cos", x.clone(), |v| v.cos()),
        ("sqrt", pos.clone(), |v| v.sqrt()),
        ("square", x.clone(), |v| v.square()),
        ("powf", pos.clone(), |v| v.powf(1.7)),
        ("affine", x.clone(), |v| v.affine(-2.5, 0.3)),
    ];
    for (name, input, op) in cases {
        let errs = gradcheck(&[input], |_, v| op(v[0]));
        assert_all_pass(name, &errs);
    }
}

#[test]
fn clamp01_inside_and_outside() {
    let x = Tensor::new(vec![4], vec![-0.5, 0.25, 0.75, 1.5]).unwrap();
    let tape = Tape::new();
    let v = tape.param(x);
    v.clamp01().sum().backward().unwrap();
    assert_eq!(tape.grad(v).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn binary_primitives_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3, 4], -2.0, 2.0, &mut rng);
    let b = random(&[3, 1], 0.5, 2.0, &mut rng);
    let apos = a.map(|v| v.abs() + 0.5);
    for (name, lhs) in [("add", &a), ("sub", &a), ("mul", &a), ("div", &a)] {
        let errs = gradcheck(&[lhs.clone(), b.clone()], |_, v| match name {
            "add" => v[0].add(v[1]).unwrap(),
            "sub" => v[0].sub(v[1]).unwrap(),
            "mul" => v[0].mul(v[1]).unwrap(),
            _ => v[0].div(v[1]).unwrap(),
        });
        assert_all_pass(name, &errs);
    }
    let errs = gradcheck(&[apos, b.clone()], |_, v| v[0].pow(v[1]).unwrap());
    assert_all_pass("pow", &errs);
}

#[test]
fn min_max_away_from_ties() {
    let a = Tensor::new(vec![4], vec![0.1, 0.9, -1.0, 2.0]).unwrap();
    let b = Tensor::new(vec![4], vec![0.5, 0.2, -0.5, 1.0]).unwrap();
    assert_all_pass(
        "min",
        &gradcheck(&[a.clone(), b.clone()], |_, v| v[0].minimum(v[1]).unwrap()),
    );
    assert_all_pass("max", &gradcheck(&[a, b], |_, v| v[0].maximum(v[1]).unwrap()));
}

#[test]
fn reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 4], -2.0, 2.0, &mut rng);
    assert_all_pass("sum", &gradcheck(&[x.clone()], |_, v| v[0].sum_axes(&[1], false).unwrap()));
    assert_all_pass("mean", &gradcheck(&[x.clone()], |_, v| v[0].mean_axes(&[0, 2], true).unwrap()));
    assert_all_pass("max", &gradcheck(&[x.clone()], |_, v| v[0].max_axes(&[2], false).unwrap()));
    assert_all_pass("min", &gradcheck(&[x], |_, v| v[0].min_axes(&[1, 2], false).unwrap()));
}

#[test]
fn matmul_3x4_by_4x2() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[3, 4], -2.0, 2.0, &mut rng);
    let b = random(&[4, 2], -2.0, 2.0, &mut rng);
    let errs = gradcheck(&[a, b], |_, v| v[0].matmul(v[1]).unwrap());
    assert!(errs.iter().all(|&e| e < 1e-3), "{errs:?}");
}

#[test]
fn conv2d_two_filters_on_5x5() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[1, 2, 5, 5], -2.0, 2.0, &mut rng);
    let w = random(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
    let errs = gradcheck(&[x.clone(), w.clone()], |_, v| v[0].conv2d(v[1], 1, 1).unwrap());
    assert!(errs.iter().all(|&e| e < 1e-3), "{errs:?}");
    let errs = gradcheck(&[x, w], |_, v| v[0].conv2d(v[1], 2, 1).unwrap());
    assert!(errs.iter().all(|&e| e < 1e-3), "stride 2: {errs:?}");
}

#[test]
fn conv2d_input_grad_matches_reverse_sweep_and_is_differentiable() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[2, 3, 6, 6], -1.0, 1.0, &mut rng);
    let w = random(&[4, 3, 3, 3], -1.0, 1.0, &mut rng);
    let gy = random(&[2, 4, 3, 3], -1.0, 1.0, &mut rng);

    // Forward value equals the gradient of <gy, conv(x, w)> w.r.t. x.
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let wv = tape.constant(w.clone());
    xv.conv2d(wv, 2, 1)
        .unwrap()
        .mul_const(gy.clone())
        .unwrap()
        .sum()
        .backward()
        .unwrap();
    let expected = tape.grad(xv).unwrap();
    let tape2 = Tape::new();
    let got = tape2
        .constant(gy.clone())
        .conv2d_input_grad(tape2.constant(w.clone()), (6, 6), 2, 1)
        .unwrap();
    assert!(got.value().max_abs_diff(&expected) < 1e-5);

    let errs = gradcheck(&[gy, w], |_, v| {
        v[0].conv2d_input_grad(v[1], (6, 6), 2, 1).unwrap()
    });
    assert!(errs.iter().all(|&e| e < 1e-3), "{errs:?}");
}

/// Smooth image so that finite differences rarely straddle a bilinear kink
/// with a large slope change.
fn smooth_image(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fx, fy, ph): (f32, f32, f32) = (rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5), rng.gen());
    let (h, w) = (shape[2], shape[3]);
    Tensor::from_fn(shape, |i| {
        let x = (i % w) as f32;
        let y = ((i / w) % h) as f32;
        let c = (i / (w * h)) as f32;
        0.5 + 0.4 * (fx * x + fy * y + ph * 6.0 + c).sin()
    })
}

#[test]
fn grid_sample_gradient_wrt_grid_and_input() {
    let x = smooth_image(&[1, 1, 4, 4], 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // Random grid inside the image, nudged off the exact pixel lattice.
    let grid = Tensor::from_fn(&[1, 4, 4, 2], |_| rng.gen_range(-0.9..0.9));
    let errs = gradcheck(&[x, grid], |_, v| v[0].grid_sample(v[1]).unwrap());
    assert_all_pass("grid_sample", &errs);
}

#[test]
fn affine_grid_gradient() {
    let theta = Tensor::new(vec![2, 3], vec![0.9, 0.2, 0.05, -0.1, 1.1, 0.0]).unwrap();
    let errs = gradcheck(&[theta], |_, v| v[0].affine_grid(5, 4).unwrap());
    assert!(errs[0] < 1e-3, "{errs:?}");
}

#[test]
fn log_softmax_and_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = random(&[3, 5], -2.0, 2.0, &mut rng);
    assert_all_pass("log_softmax", &gradcheck(&[logits.clone()], |_, v| v[0].log_softmax(0.5).unwrap()));
    assert_all_pass("cross_entropy", &gradcheck(&[logits], |_, v| v[0].cross_entropy(&[1, 4, 0]).unwrap()));
}

#[test]
fn stop_grad_properties() {
    let tape = Tape::new();
    let x = tape.param(Tensor::new(vec![3], vec![0.1, -0.7, 3.3]).unwrap());
    let y = tape.param(Tensor::new(vec![3], vec![2.0, 2.0, 2.0]).unwrap());
    let sx = x.stop_grad();
    assert_eq!(
        sx.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        x.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    sx.mul(y).unwrap().sum().backward().unwrap();
    assert!(tape.grad(x).is_none());

    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(1.5));
    x.stop_grad().add(x).unwrap().backward().unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), Some(1.0));

    let tape = Tape::new();
    let x = tape.param(Tensor::ones(&[2, 2]));
    x.stop_grad().sum().backward().unwrap();
    assert_eq!(tape.grad_or_zeros(x).data(), &[0.0; 4]);
}

#[test]
fn sum_loss_gives_all_ones() {
    let tape = Tape::new();
    let x = tape.param(Tensor::full(&[2, 3, 4], 0.3));
    x.sum().backward().unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::new();
    let x = tape.param(Tensor::ones(&[2]));
    assert!(x.sigmoid().backward().is_err());
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(2.0));
    let y = x.square();
    y.backward().unwrap();
    y.backward().unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), Some(8.0));
    tape.zero_grad();
    y.backward().unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), Some(4.0));
}

#[test]
fn diamond_graph_sums_over_paths() {
    // f = a*b + exp(a) with a = 2x, b = sin(x): both paths meet at x.
    // df/dx = 2 sin x + 2x cos x + 2 exp(2x).
    let x0 = 0.4f32;
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(x0));
    let a = x.scale(2.0);
    let b = x.sin();
    let f = a.mul(b).unwrap().add(a.exp()).unwrap();
    f.backward().unwrap();
    let x0 = x0 as f64;
    let expected = 2.0 * x0.sin() + 2.0 * x0 * x0.cos() + 2.0 * (2.0 * x0).exp();
    let got = tape.grad(x).unwrap().item().unwrap() as f64;
    assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
}

fn replay(seed: u64) -> (Vec<u32>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::new();
    let x = tape.param(random(&[2, 3, 8, 8], 0.0, 1.0, &mut rng));
    let w = tape.param(random(&[4, 3, 3, 3], -1.0, 1.0, &mut rng));
    let y = x.conv2d(w, 2, 1).unwrap().relu().mean_axes(&[2, 3], false).unwrap();
    let loss = y.square().sum();
    loss.backward().unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut grads = bits(&tape.grad(x).unwrap());
    grads.extend(bits(&tape.grad(w).unwrap()));
    (bits(&y.value()), grads)
}

#[test]
fn replay_is_bitwise_deterministic() {
    assert_eq!(replay(11), replay(11));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stop_grad_is_bitwise_identity(data in proptest::collection::vec(-1e6f32..1e6, 1..32)) {
        let tape = Tape::new();
        let n = data.len();
        let x = tape.param(Tensor::new(vec![n], data).unwrap());
        let s = x.stop_grad();
        prop_assert!(x.value().data().iter().zip(s.value().data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn sigmoid_mul_chain_matches_finite_difference(w in -2.0f32..2.0, x in -2.0f32..2.0) {
        let tape = Tape::new();
        let wv = tape.param(Tensor::scalar(w));
        let xv = tape.constant(Tensor::scalar(x));
        wv.mul(xv).unwrap().sigmoid().backward().unwrap();
        let g = tape.grad(wv).unwrap().item().unwrap() as f64;
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (w, x) = (w as f64, x as f64);
        let expected = s(w * x) * (1.0 - s(w * x)) * x;
        prop_assert!((g - expected).abs() < 1e-6);
    }
}
