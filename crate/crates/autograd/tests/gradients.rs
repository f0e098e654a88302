//! Every primitive against central finite differences, 20+ random seeds each.

use un2clip_autograd::{finite_diff_check, Padding, Result, RngStream, Tape, Tensor, Var};

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;
const H: f64 = 1e-4;

fn rand(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Contract an arbitrary output to a scalar with fixed random weights so every
/// output element contributes a distinct gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = RngStream::new(seed).split("projection");
    let w = rand(tape.shape(y), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check<F>(name: &str, make: impl Fn(&mut RngStream) -> Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(seed).split(name);
        let params = make(&mut rng);
        let err = finite_diff_check(
            |t: &mut Tape<f64>, v: &[Var]| {
                let y = f(t, v)?;
                if t.value(y).is_scalar() {
                    Ok(y)
                } else {
                    project(t, y, seed)
                }
            },
            &params,
            H,
        )
        .unwrap();
        assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

#[test]
fn elementwise() {
    let two = |r: &mut RngStream| vec![rand(&[3, 4], r), rand(&[3, 4], r)];
    check("add", two, |t, v| t.add(v[0], v[1]));
    check("sub", two, |t, v| t.sub(v[0], v[1]));
    check("mul", two, |t, v| t.mul(v[0], v[1]));
    check(
        "mul_self",
        |r| vec![rand(&[5], r)],
        |t, v| t.mul(v[0], v[0]),
    );
    check(
        "scale",
        |r| vec![rand(&[2, 3], r)],
        |t, v| t.scale(v[0], -1.7),
    );
    check("exp", |r| vec![rand(&[6], r)], |t, v| t.exp(v[0]));
    check(
        "mul_scalar",
        |r| vec![rand(&[2, 5], r), rand(&[1], r)],
        |t, v| t.mul_scalar(v[0], v[1]),
    );
    check(
        "add_broadcast",
        |r| vec![rand(&[2, 3, 4], r), rand(&[3, 4], r)],
        |t, v| t.add_broadcast(v[0], v[1]),
    );
    check(
        "bias",
        |r| vec![rand(&[5, 4], r), rand(&[4], r)],
        |t, v| t.add_broadcast(v[0], v[1]),
    );
    check("sum", |r| vec![rand(&[3, 3], r)], |t, v| t.sum(v[0]));
    check("mean", |r| vec![rand(&[7], r)], |t, v| t.mean(v[0]));
    check("mse", two, |t, v| t.mse(v[0], v[1]));
}

#[test]
fn matmul_all_layouts() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let (m, k, n) = (3, 4, 2);
        let sa = if ta { [k, m] } else { [m, k] };
        let sb = if tb { [n, k] } else { [k, n] };
        check(
            "matmul2",
            |r| vec![rand(&sa, r), rand(&sb, r)],
            move |t, v| t.matmul_t(v[0], v[1], ta, tb),
        );
        check(
            "matmul3",
            |r| vec![rand(&[2, sa[0], sa[1]], r), rand(&[2, sb[0], sb[1]], r)],
            move |t, v| t.matmul_t(v[0], v[1], ta, tb),
        );
    }
    check(
        "linear",
        |r| vec![rand(&[2, 3, 4], r), rand(&[4, 5], r), rand(&[5], r)],
        |t, v| t.linear(v[0], v[1], Some(v[2])),
    );
}

#[test]
fn convolution_family() {
    check(
        "conv_same",
        |r| vec![rand(&[2, 2, 5, 4], r), rand(&[3, 2, 3, 3], r)],
        |t, v| t.conv2d(v[0], v[1], Padding::Same),
    );
    check(
        "conv_valid",
        |r| vec![rand(&[1, 2, 5, 5], r), rand(&[2, 2, 3, 3], r)],
        |t, v| t.conv2d(v[0], v[1], Padding::Valid),
    );
    check(
        "conv_1x1",
        |r| vec![rand(&[2, 3, 2, 2], r), rand(&[2, 3, 1, 1], r)],
        |t, v| t.conv2d(v[0], v[1], Padding::Same),
    );
    check(
        "add_channel_bias",
        |r| vec![rand(&[2, 3, 2, 2], r), rand(&[3], r)],
        |t, v| t.add_channel(v[0], v[1]),
    );
    check(
        "add_channel_cond",
        |r| vec![rand(&[2, 3, 2, 2], r), rand(&[2, 3], r)],
        |t, v| t.add_channel(v[0], v[1]),
    );
    check(
        "avg_pool2",
        |r| vec![rand(&[1, 2, 4, 6], r)],
        |t, v| t.avg_pool2(v[0]),
    );
    check(
        "upsample2",
        |r| vec![rand(&[2, 1, 3, 2], r)],
        |t, v| t.upsample2(v[0]),
    );
}

#[test]
fn network_layers() {
    check(
        "softmax",
        |r| vec![rand(&[3, 5], r)],
        |t, v| t.softmax(v[0]),
    );
    check(
        "layer_norm",
        |r| vec![rand(&[4, 6], r), rand(&[6], r), rand(&[6], r)],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    );
    check("gelu", |r| vec![rand(&[10], r)], |t, v| t.gelu(v[0]));
    check("silu", |r| vec![rand(&[10], r)], |t, v| t.silu(v[0]));
    check(
        "embedding",
        |r| vec![rand(&[5, 3], r)],
        |t, v| t.embedding(v[0], &[4, 0, 4, 2]),
    );
    check(
        "l2_normalize",
        |r| vec![rand(&[3, 4], r)],
        |t, v| t.l2_normalize(v[0]),
    );
    check(
        "cross_entropy",
        |r| vec![rand(&[4, 3], r)],
        |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]),
    );
    check(
        "attention",
        |r| {
            vec![
                rand(&[2, 4, 3], r),
                rand(&[2, 4, 3], r),
                rand(&[2, 4, 3], r),
            ]
        },
        |t, v| t.attention(v[0], v[1], v[2]),
    );
    check(
        "sinusoidal",
        |r| vec![Tensor::from_vec(&[3], (0..3).map(|_| r.uniform() * 5.0).collect()).unwrap()],
        |t, v| t.sinusoidal(v[0], 8),
    );
}

#[test]
fn shape_ops() {
    check(
        "reshape",
        |r| vec![rand(&[2, 6], r)],
        |t, v| t.reshape(v[0], &[3, 4]),
    );
    check(
        "permute",
        |r| vec![rand(&[2, 3, 4], r)],
        |t, v| t.permute(v[0], &[2, 0, 1]),
    );
    check(
        "permute4",
        |r| vec![rand(&[2, 3, 2, 2], r)],
        |t, v| t.permute(v[0], &[0, 2, 1, 3]),
    );
    check(
        "concat",
        |r| vec![rand(&[2, 1, 3], r), rand(&[2, 4, 3], r)],
        |t, v| t.concat(v[0], v[1], 1),
    );
    check(
        "slice",
        |r| vec![rand(&[2, 5, 3], r)],
        |t, v| t.slice(v[0], 1, 1, 3),
    );
}

fn perceptron_params(seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = RngStream::new(seed).split("mlp");
    vec![
        rand(&[6, 5], &mut rng),
        Tensor::randn(&[5, 8], 1.0 / 5f64.sqrt(), &mut rng),
        rand(&[8], &mut rng),
        Tensor::randn(&[8, 3], 1.0 / 8f64.sqrt(), &mut rng),
        rand(&[3], &mut rng),
    ]
}

fn perceptron(t: &mut Tape<f64>, v: &[Var]) -> Result<Var> {
    let h = t.linear(v[0], v[1], Some(v[2]))?;
    let h = t.gelu(h)?;
    let logits = t.linear(h, v[3], Some(v[4]))?;
    t.cross_entropy(logits, &[0, 1, 2, 0, 1, 2])
}

/// Two-layer perceptron with softmax cross-entropy at the coarse step h = 1e-3.
#[test]
fn two_layer_perceptron_coarse_step() {
    let err = finite_diff_check(perceptron, &perceptron_params(0), 1e-3).unwrap();
    assert!(err < TOL, "{err:e}");
}

#[test]
fn two_layer_perceptron_across_seeds() {
    for seed in 0..SEEDS {
        let err = finite_diff_check(perceptron, &perceptron_params(seed), H).unwrap();
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn linear_function_is_exact_and_constant_is_zero() {
    let x = vec![Tensor::<f64>::scalar(0.7)];
    let err =
        finite_diff_check(|t: &mut Tape<f64>, v: &[Var]| t.scale(v[0], 3.0), &x, 1e-3).unwrap();
    assert!(err < 1e-9, "{err}");
    let err = finite_diff_check(
        |t: &mut Tape<f64>, _v: &[Var]| Ok(t.constant(Tensor::scalar(4.0))),
        &x,
        1e-3,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn nondeterministic_function_is_rejected() {
    use std::cell::Cell;
    let calls = Cell::new(0.0);
    let x = vec![Tensor::<f64>::scalar(1.0)];
    let res = finite_diff_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            calls.set(calls.get() + 1.0);
            let c = t.constant(Tensor::scalar(calls.get()));
            t.mul(v[0], c)
        },
        &x,
        1e-3,
    );
    assert!(res.is_err());
}
