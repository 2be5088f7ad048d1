use nmt_tensor::gradcheck::check_gradients;
use nmt_tensor::{AttentionSpec, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-2;
const TOL: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// `sum(y * r)` for a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> nmt_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(&mut rng, tape.value(y).shape());
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn assert_ok(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> nmt_tensor::Result<Var>) {
    let report = check_gradients(inputs, H, FLOOR, f).unwrap();
    assert!(report.checked > 0);
    assert!(report.max_rel_error <= TOL, "{name}: max relative error {}", report.max_rel_error);
}

#[test]
fn sum_gives_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[3], &[0.3, -2.0, 5.0]).unwrap().with_grad());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn squared_sum_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap().with_grad());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::<f64>::zeros(&[2]).with_grad());
    assert_eq!(tape.backward(x).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
}

#[test]
fn cleared_tape_has_zero_gradients() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap().with_grad());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    tape.zero_grads();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap().with_grad());
    let c = tape.constant(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
    let p = tape.mul(x, c).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
    assert!(tape.grad(c).is_none());
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(m, k, n) in &[(1, 1, 1), (3, 4, 2), (5, 2, 6)] {
        let inputs = [random(&mut rng, &[m, k]), random(&mut rng, &[k, n])];
        assert_ok("matmul", &inputs, |t, v| {
            let y = t.matmul(v[0], v[1], false)?;
            project(t, y, 7)
        });
        let inputs = [random(&mut rng, &[m, k]), random(&mut rng, &[n, k])];
        assert_ok("matmul_t", &inputs, |t, v| {
            let y = t.matmul(v[0], v[1], true)?;
            project(t, y, 8)
        });
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4]), random(&mut rng, &[4])];
    assert_ok("add", &inputs, |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 1)
    });
    assert_ok("mul", &inputs, |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 2)
    });
    assert_ok("add_bias", &inputs, |t, v| {
        let y = t.add_bias(v[0], v[2])?;
        project(t, y, 3)
    });
    assert_ok("scale_mean", &inputs, |t, v| {
        let y = t.scale(v[0], 0.37);
        let y = t.mul(y, v[1])?;
        Ok(t.mean(y))
    });
    assert_ok("mask_mul", &inputs, |t, v| {
        let mask = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 / 0.9 }).collect();
        let y = t.mask_mul(v[0], mask)?;
        project(t, y, 4)
    });
}

#[test]
fn gelu_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [random(&mut rng, &[4, 5]).map(|x| 2.5 * x)];
    assert_ok("gelu", &inputs, |t, v| {
        let y = t.gelu(v[0]);
        project(t, y, 5)
    });
}

#[test]
fn softmax_gradient_every_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [random(&mut rng, &[2, 3, 4])];
    for axis in 0..3 {
        assert_ok("softmax", &inputs, |t, v| {
            let y = t.softmax(v[0], axis)?;
            project(t, y, 6 + axis as u64)
        });
    }
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [random(&mut rng, &[4, 6]), random(&mut rng, &[6]), random(&mut rng, &[6])];
    assert_ok("layer_norm", &inputs, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(t, y, 9)
    });
}

#[test]
fn embedding_and_gather_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [random(&mut rng, &[5, 3])];
    assert_ok("embedding", &inputs, |t, v| {
        let y = t.embedding(v[0], &[4, 0, 4, 2, 1, 4])?;
        project(t, y, 10)
    });
    assert_ok("gather_rows", &inputs, |t, v| {
        let y = t.gather_rows(v[0], &[3, 3, 0])?;
        project(t, y, 11)
    });
}

#[test]
fn label_smoothed_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [random(&mut rng, &[5, 4]).map(|x| 3.0 * x)];
    for &eps in &[0.0, 0.1, 0.5] {
        assert_ok("cross_entropy", &inputs, |t, v| t.cross_entropy(v[0], &[0, 3, 2, 1, 0], &[1.0, 1.0, 0.0, 1.0, 1.0], eps));
    }
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (batch, heads, lq, lk, d) = (2, 2, 3, 4, 4);
    let inputs = [random(&mut rng, &[batch * lq, d]), random(&mut rng, &[batch * lk, d]), random(&mut rng, &[batch * lk, d])];
    let padding = vec![false, false, false, true, false, false, true, true];
    assert_ok("cross_attention", &inputs, |t, v| {
        let spec = AttentionSpec { batch, heads, q_len: lq, k_len: lk, causal: false, key_padding: Some(padding.clone()) };
        let y = t.attention(v[0], v[1], v[2], spec)?;
        project(t, y, 12)
    });
    let inputs = [random(&mut rng, &[batch * lk, d]), random(&mut rng, &[batch * lk, d]), random(&mut rng, &[batch * lk, d])];
    assert_ok("causal_self_attention", &inputs, |t, v| {
        let spec = AttentionSpec { batch, heads, q_len: lk, k_len: lk, causal: true, key_padding: Some(padding.clone()) };
        let y = t.attention(v[0], v[1], v[2], spec)?;
        project(t, y, 13)
    });
    // shared input for q, k and v
    let inputs = [random(&mut rng, &[batch * lk, d])];
    assert_ok("shared_qkv", &inputs, |t, v| {
        let spec = AttentionSpec { batch, heads, q_len: lk, k_len: lk, causal: false, key_padding: None };
        let y = t.attention(v[0], v[0], v[0], spec)?;
        project(t, y, 14)
    });
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = [
        random(&mut rng, &[4, 3]),
        random(&mut rng, &[3, 5]),
        random(&mut rng, &[5]),
        random(&mut rng, &[5, 2]),
        random(&mut rng, &[2]),
    ];
    assert_ok("mlp", &inputs, |t, v| {
        let h = t.matmul(v[0], v[1], false)?;
        let h = t.add_bias(h, v[2])?;
        let h = t.gelu(h);
        let y = t.matmul(h, v[3], false)?;
        let y = t.add_bias(y, v[4])?;
        t.cross_entropy(y, &[0, 1, 1, 0], &[1.0; 4], 0.1)
    });
}

#[test]
fn recording_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(random(&mut rng, &[6, 5]).cast::<f32>().with_grad());
        let b = tape.leaf(random(&mut rng, &[5, 7]).cast::<f32>().with_grad());
        let y = tape.matmul(a, b, false).unwrap();
        let y = tape.gelu(y);
        let y = tape.softmax(y, 1).unwrap();
        let s = tape.sum(y);
        let s2 = tape.mul(s, s).unwrap();
        tape.backward(s2).unwrap();
        (tape.value(y).clone(), tape.grad(a).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn attention_dropout_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (batch, heads, l, d) = (1, 2, 3, 4);
    let inputs = [random(&mut rng, &[l, d]), random(&mut rng, &[l, d]), random(&mut rng, &[l, d])];
    let mask: Vec<f64> = (0..batch * heads * l * l).map(|i| if i % 4 == 1 { 0.0 } else { 1.25 }).collect();
    assert_ok("attention_dropout", &inputs, |t, v| {
        let spec = AttentionSpec { batch, heads, q_len: l, k_len: l, causal: false, key_padding: None };
        let y = t.attention_with_dropout(v[0], v[1], v[2], spec, Some(mask.clone()))?;
        project(t, y, 15)
    });
}
