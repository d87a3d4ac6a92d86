#[path = "common/reference.rs"]
mod reference;

use proptest::prelude::*;
use reference::{conv3d_reference, linear_reference, maxpool3d_reference, SplitMix};
use sdsnet_tensor::kernels::{conv3d_output_dims, maxpool3d_output_dims};
use sdsnet_tensor::{
    grad_check, BackwardRule, Conv3dSpec, GradCheckConfig, Result, Rounding, Tape, Tensor, Var,
};

fn tensor(dims: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(dims.to_vec(), data).unwrap()
}

fn random(rng: &mut SplitMix, dims: &[usize]) -> Tensor<f64> {
    tensor(dims, rng.vec(dims.iter().product()))
}

/// Reduces `y` to a scalar with fixed pseudo-random weights so that
/// gradients are not symmetric across elements.
fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let dims = tape.value(y).dims().to_vec();
    let mut rng = SplitMix(99);
    let w = tape.constant(random(&mut rng, &dims))?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check(inputs: &[(&str, Tensor<f64>)], build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let report = grad_check(
        inputs,
        |t, v| {
            let y = build(t, v)?;
            weighted_sum(t, y)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "\n{report}");
}

#[test]
fn conv3d_matches_nested_loop_reference() {
    let mut rng = SplitMix(1);
    let x = random(&mut rng, &[2, 4, 5, 5]);
    let k = random(&mut rng, &[3, 2, 3, 3, 3]);
    let b = random(&mut rng, &[3]);
    let mut tape = Tape::new();
    let (xv, kv, bv) = (tape.constant(x.clone()).unwrap(), tape.constant(k.clone()).unwrap(), tape.constant(b.clone()).unwrap());
    let y = tape.conv3d(xv, kv, bv, Conv3dSpec::padded(1)).unwrap();
    let (expected, dims) = conv3d_reference(x.data(), [2, 4, 5, 5], k.data(), [3, 2, 3, 3, 3], b.data(), 1, 1);
    assert_eq!(tape.value(y).dims(), &dims);
    for (a, e) in tape.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-10);
    }
}

#[test]
fn conv3d_of_zero_input_is_bias() {
    let mut rng = SplitMix(2);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![2, 6, 7, 7]).unwrap()).unwrap();
    let k = tape.constant(random(&mut rng, &[3, 2, 3, 3, 3])).unwrap();
    let b = tape.constant(tensor(&[3], vec![0.5, -1.0, 2.0])).unwrap();
    let y = tape.conv3d(x, k, b, Conv3dSpec::padded(1)).unwrap();
    let out = tape.value(y);
    for (c, chunk) in out.data().chunks(out.numel() / 3).enumerate() {
        assert!(chunk.iter().all(|&v| v == [0.5, -1.0, 2.0][c]));
    }
}

#[test]
fn full_scale_first_layer_shape() {
    let d = conv3d_output_dims(&[1, 100, 110, 110], &[16, 1, 3, 3, 3], Conv3dSpec::padded(1)).unwrap();
    assert_eq!(d, [16, 100, 108, 108]);
}

#[test]
fn conv3d_rejects_bad_shapes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![2, 4, 5, 5]).unwrap()).unwrap();
    let k = tape.constant(Tensor::zeros(vec![3, 1, 3, 3, 3]).unwrap()).unwrap();
    let b = tape.constant(Tensor::zeros(vec![3]).unwrap()).unwrap();
    assert!(tape.conv3d(x, k, b, Conv3dSpec::padded(1)).is_err());
}

#[test]
fn fully_connected_matches_dot_products() {
    let mut rng = SplitMix(3);
    let (x, w, b) = (random(&mut rng, &[4]), random(&mut rng, &[3, 4]), random(&mut rng, &[3]));
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()).unwrap(), tape.constant(w.clone()).unwrap(), tape.constant(b.clone()).unwrap());
    let y = tape.linear(xv, wv, bv).unwrap();
    let expected = linear_reference(x.data(), w.data(), b.data());
    for (a, e) in tape.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn fully_connected_fusion_width() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(vec![2660]).unwrap()).unwrap();
    let w = tape.constant(Tensor::zeros(vec![1024, 2660]).unwrap()).unwrap();
    let b = tape.constant(Tensor::zeros(vec![1024]).unwrap()).unwrap();
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).dims(), &[1024]);
}

#[test]
fn maxpool_constant_input_routes_one_cell_per_window() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(vec![1, 4, 4, 4], 0.7).unwrap()).unwrap();
    let y = tape.maxpool3d(x, [Rounding::Floor; 3]).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    assert_eq!(g.sum(), 8.0);
    assert_eq!(g.data().iter().filter(|&&v| v == 1.0).count(), 8);
    // first cell of each window in (t, h, w) scan order
    assert_eq!(g.data()[0], 1.0);
    assert_eq!(g.data()[2], 1.0);
    assert_eq!(g.data()[1], 0.0);
}

#[test]
fn maxpool_rejects_empty_axis() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![1, 1, 4, 4]).unwrap()).unwrap();
    assert!(tape.maxpool3d(x, [Rounding::Floor; 3]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv3d_shape_and_values_match_reference(
        c in 1usize..3, co in 1usize..4, t in 1usize..6, h in 3usize..8, w in 3usize..8,
        kt in 1usize..4, kh in 1usize..4, kw in 1usize..4, pad in 0usize..2, stride in 1usize..3,
        seed in any::<u64>(),
    ) {
        prop_assume!(kt <= t + 2 * pad && kh <= h && kw <= w);
        let mut rng = SplitMix(seed);
        let x = random(&mut rng, &[c, t, h, w]);
        let k = random(&mut rng, &[co, c, kt, kh, kw]);
        let b = random(&mut rng, &[co]);
        let spec = Conv3dSpec { temporal_pad: pad, stride: (stride, stride) };
        let dims = conv3d_output_dims(x.dims(), k.dims(), spec).unwrap();
        prop_assert_eq!(dims, [co, t + 2 * pad - kt + 1, (h - kh) / stride + 1, (w - kw) / stride + 1]);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x.clone()).unwrap(), tape.constant(k.clone()).unwrap(), tape.constant(b.clone()).unwrap());
        let y = tape.conv3d(xv, kv, bv, spec).unwrap();
        let (expected, edims) = conv3d_reference(x.data(), [c, t, h, w], k.data(), [co, c, kt, kh, kw], b.data(), pad, stride);
        prop_assert_eq!(tape.value(y).dims(), &edims[..]);
        for (a, e) in tape.value(y).data().iter().zip(&expected) {
            prop_assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn maxpool_shape_and_values_match_reference(
        c in 1usize..3, t in 1usize..7, h in 1usize..7, w in 1usize..7,
        ceil in proptest::array::uniform3(any::<bool>()), seed in any::<u64>(),
    ) {
        let rounding = ceil.map(|up| if up { Rounding::Ceil } else { Rounding::Floor });
        let half = |n: usize, up: bool| if up { n.div_ceil(2) } else { n / 2 };
        let expect = [c, half(t, ceil[0]), half(h, ceil[1]), half(w, ceil[2])];
        let dims = maxpool3d_output_dims(&[c, t, h, w], rounding);
        if expect.contains(&0) {
            prop_assert!(dims.is_err());
            return Ok(());
        }
        prop_assert_eq!(dims.unwrap(), expect);
        let mut rng = SplitMix(seed);
        let x = random(&mut rng, &[c, t, h, w]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let y = tape.maxpool3d(xv, rounding).unwrap();
        let (expected, _) = maxpool3d_reference(x.data(), [c, t, h, w], ceil);
        prop_assert_eq!(tape.value(y).data(), &expected[..]);
    }

    #[test]
    fn softmax_sums_to_one_and_sigmoid_is_open_unit(xs in proptest::collection::vec(-30.0f64..30.0, 1..16)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(xs).unwrap()).unwrap();
        let s = tape.softmax(x).unwrap();
        prop_assert!((tape.value(s).sum() - 1.0).abs() < 1e-12);
        let p = tape.sigmoid(x).unwrap();
        prop_assert!(tape.value(p).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn concat_then_split_is_identity(lens in proptest::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
        let mut rng = SplitMix(seed);
        let mut tape = Tape::new();
        let parts: Vec<Var> = lens.iter().map(|&n| tape.param(random(&mut rng, &[n])).unwrap()).collect();
        let cat = tape.concat(&parts).unwrap();
        let mut offset = 0;
        let mut pieces = Vec::new();
        for (&p, &n) in parts.iter().zip(&lens) {
            let s = tape.slice(cat, offset, n).unwrap();
            prop_assert_eq!(tape.value(s), tape.value(p));
            pieces.push(s);
            offset += n;
        }
        let again = tape.concat(&pieces).unwrap();
        let seed_grad = random(&mut rng, &[offset]);
        tape.backward_with(again, seed_grad.clone()).unwrap();
        let mut offset = 0;
        for (&p, &n) in parts.iter().zip(&lens) {
            prop_assert_eq!(tape.grad(p).unwrap().data(), &seed_grad.data()[offset..offset + n]);
            offset += n;
        }
    }
}

#[test]
fn gradients_of_every_op_match_finite_differences() {
    let mut rng = SplitMix(7);
    check(
        &[("x", random(&mut rng, &[2, 4, 5, 5])), ("k", random(&mut rng, &[3, 2, 3, 3, 3])), ("b", random(&mut rng, &[3]))],
        |t, v| t.conv3d(v[0], v[1], v[2], Conv3dSpec::padded(1)),
    );
    check(
        &[("x", random(&mut rng, &[2, 3, 7, 7])), ("k", random(&mut rng, &[2, 2, 1, 3, 3])), ("b", random(&mut rng, &[2]))],
        |t, v| t.conv3d(v[0], v[1], v[2], Conv3dSpec::strided(2)),
    );
    check(&[("x", random(&mut rng, &[2, 4, 4, 6]))], |t, v| t.maxpool3d(v[0], [Rounding::Floor; 3]));
    check(&[("x", random(&mut rng, &[2, 5, 3, 4]))], |t, v| t.maxpool3d(v[0], [Rounding::Ceil, Rounding::Ceil, Rounding::Floor]));
    check(
        &[("x", random(&mut rng, &[5])), ("w", random(&mut rng, &[3, 5])), ("b", random(&mut rng, &[3]))],
        |t, v| t.linear(v[0], v[1], v[2]),
    );
    check(&[("a", random(&mut rng, &[3, 4])), ("b", random(&mut rng, &[4, 2]))], |t, v| t.matmul(v[0], v[1]));
    check(&[("a", random(&mut rng, &[3, 4]))], |t, v| t.transpose(v[0]));
    check(&[("a", random(&mut rng, &[6])), ("b", random(&mut rng, &[6]))], |t, v| t.add(v[0], v[1]));
    check(&[("a", random(&mut rng, &[3, 4])), ("r", random(&mut rng, &[4]))], |t, v| t.add_row(v[0], v[1]));
    check(&[("a", random(&mut rng, &[6])), ("b", random(&mut rng, &[6]))], |t, v| t.mul(v[0], v[1]));
    check(&[("a", random(&mut rng, &[6]))], |t, v| t.scale(v[0], -2.5));
    check(&[("a", random(&mut rng, &[8]))], |t, v| t.relu(v[0]));
    check(&[("a", random(&mut rng, &[8]))], |t, v| t.sigmoid(v[0]));
    check(&[("a", random(&mut rng, &[8]))], |t, v| t.tanh(v[0]));
    check(&[("a", random(&mut rng, &[3, 5]))], |t, v| t.softmax(v[0]));
    check(&[("a", random(&mut rng, &[3])), ("b", random(&mut rng, &[4]))], |t, v| t.concat(&[v[0], v[1], v[0]]));
    check(&[("a", random(&mut rng, &[7]))], |t, v| t.slice(v[0], 2, 3));
    check(&[("a", random(&mut rng, &[3, 4]))], |t, v| t.row(v[0], 1));
    check(&[("a", random(&mut rng, &[3, 4]))], |t, v| t.reshape(v[0], &[2, 6]));
    check(&[("a", random(&mut rng, &[2, 3, 4]))], |t, v| t.permute(v[0], &[1, 2, 0]));
    check(&[("a", random(&mut rng, &[4, 3]))], |t, v| t.mean_rows(v[0]));
    check(&[("a", random(&mut rng, &[4, 3]))], |t, v| t.sum(v[0]));
    for y in [0, 1] {
        let p = Tensor::scalar(0.2 + 0.3 * (rng.symmetric() + 1.0));
        check(&[("p", p)], |t, v| t.bce(v[0], y));
    }
}

#[test]
fn conv_relu_fc_chain_passes_gradient_check() {
    let mut rng = SplitMix(11);
    let inputs = [
        ("clip", random(&mut rng, &[1, 4, 6, 6])),
        ("k1", random(&mut rng, &[2, 1, 3, 3, 3])),
        ("b1", random(&mut rng, &[2])),
        ("w", random(&mut rng, &[3, 2 * 4 * 4 * 4])),
        ("b2", random(&mut rng, &[3])),
    ];
    let report = grad_check(
        &inputs,
        |t, v| {
            let h = t.conv3d(v[0], v[1], v[2], Conv3dSpec::padded(1))?;
            let h = t.relu(h)?;
            let h = t.reshape(h, &[2 * 4 * 4 * 4])?;
            let y = t.linear(h, v[3], v[4])?;
            let y = t.sigmoid(y)?;
            t.sum(y)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "\n{report}");
    assert!(report.max_rel_error() < 1e-4);
}

struct WrongSquare;

impl BackwardRule<f64> for WrongSquare {
    fn backward(&self, inputs: &[&Tensor<f64>], _output: &Tensor<f64>, grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        // d(x^2)/dx is 2x; 3x is wrong on purpose
        let g = inputs[0].data().iter().zip(grad_out.data()).map(|(&x, &g)| 3.0 * x * g).collect();
        Ok(vec![Tensor::new(inputs[0].dims().to_vec(), g)?])
    }
}

#[test]
fn corrupted_backward_rule_is_reported() {
    let mut rng = SplitMix(5);
    let report = grad_check(
        &[("x", random(&mut rng, &[4]))],
        |t, v| {
            let x = t.value(v[0]);
            let sq = x.map(|a| a * a);
            let y = t.custom(&[v[0]], sq, Box::new(WrongSquare))?;
            t.sum(y)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(!report.passed());
    assert_eq!(report.failures().count(), 1);
}

#[test]
fn gradients_are_bit_identical_across_runs() {
    let run = || {
        let mut rng = SplitMix(21);
        let mut tape = Tape::new();
        let x = tape.param(random(&mut rng, &[1, 6, 8, 8])).unwrap();
        let k = tape.param(random(&mut rng, &[4, 1, 3, 3, 3])).unwrap();
        let b = tape.param(random(&mut rng, &[4])).unwrap();
        let h = tape.conv3d(x, k, b, Conv3dSpec::padded(1)).unwrap();
        let h = tape.relu(h).unwrap();
        let h = tape.maxpool3d(h, [Rounding::Floor; 3]).unwrap();
        let s = tape.sum(h).unwrap();
        tape.backward(s).unwrap();
        [x, k, b].map(|v| tape.grad(v).unwrap().clone())
    };
    let (a, b) = (run(), run());
    for (ga, gb) in a.iter().zip(&b) {
        assert!(ga.data().iter().zip(gb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
