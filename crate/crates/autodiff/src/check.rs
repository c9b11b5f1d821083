//! Central finite-difference checks of tape gradients.

use rand::{Rng, RngCore};

use crate::{AttentionLayout, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;

fn random(rng: &mut dyn RngCore, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale)).expect("valid shape")
}

/// Loss is `sum(op(params) * weights)` so every output element carries a
/// distinct upstream gradient.
fn scalar_loss<F>(tape: &mut Tape, vars: &[Var], build: &F, weights: &Tensor) -> Var
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let out = build(tape, vars);
    if tape.value(out).is_scalar() {
        return out;
    }
    let w = tape.constant(weights.reshape(tape.value(out).shape().to_vec()).expect("matching length"));
    let p = tape.mul(out, w).expect("same shape");
    tape.sum(p).expect("sum")
}

fn eval<F>(inputs: &[Tensor], build: &F, weights: &Tensor) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = scalar_loss(&mut tape, &vars, build, weights);
    tape.value(loss).data()[0]
}

/// Largest per-input relative error `|ad - fd| / max(|ad|, |fd|)` in the 2-norm.
///
/// `build` maps the inputs to a scalar or to an output of `out_len` elements.
pub fn max_rel_err<F>(inputs: &[Tensor], out_len: usize, rng: &mut dyn RngCore, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let weights = random(rng, &[out_len], 1.0);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(format!("p{i}"), t.clone()).expect("unique names"))
        .collect();
    let loss = scalar_loss(&mut tape, &vars, &build, &weights);
    let grads = tape.backward(loss).expect("scalar loss");

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let ad = grads.get(&format!("p{i}")).expect("every input is a parameter");
        let mut fd = vec![0.0; input.len()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let mut plus = input.to_vec();
            let mut minus = input.to_vec();
            plus[j] += STEP;
            minus[j] -= STEP;
            let mut args_p = inputs.to_vec();
            let mut args_m = inputs.to_vec();
            args_p[i] = Tensor::new(input.shape().to_vec(), plus).expect("same shape");
            args_m[i] = Tensor::new(input.shape().to_vec(), minus).expect("same shape");
            *slot = (eval(&args_p, &build, &weights) - eval(&args_m, &build, &weights)) / (2.0 * STEP);
        }
        let diff: f64 = ad
            .data()
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = ad.norm().max(fd.iter().map(|v| v * v).sum::<f64>().sqrt());
        if scale > 1e-9 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

/// One randomized gradient check of a group of ops.
pub struct OpCase {
    pub name: &'static str,
    /// Bound on the relative error.
    pub tol: f64,
    pub run: fn(&mut dyn RngCore) -> f64,
}

/// Every differentiable op, grouped.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            tol: 1e-6,
            run: matmul_gradients,
        },
        OpCase {
            name: "binary",
            tol: 1e-6,
            run: binary_gradients_with_broadcast,
        },
        OpCase {
            name: "activations",
            tol: 1e-6,
            run: activation_gradients,
        },
        OpCase {
            name: "softmax_rows",
            tol: 1e-5,
            run: softmax_gradients,
        },
        OpCase {
            name: "layer_norm",
            tol: 1e-5,
            run: layer_norm_gradients,
        },
        OpCase {
            name: "cross_entropy",
            tol: 1e-6,
            run: cross_entropy_gradients,
        },
        OpCase {
            name: "gather/mean_pool",
            tol: 1e-6,
            run: gather_and_pool_gradients,
        },
        OpCase {
            name: "attention",
            tol: 1e-5,
            run: attention_gradients,
        },
        OpCase {
            name: "mlp",
            tol: 1e-4,
            run: composite_two_layer_network,
        },
    ]
}

fn matmul_gradients(rng: &mut dyn RngCore) -> f64 {
    let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
    let a = random(rng, &[m, k], 1.0);
    let b = random(rng, &[k, n], 1.0);
    max_rel_err(&[a, b], m * n, rng, |t, v| t.matmul(v[0], v[1]).expect("valid op"))
}

fn binary_gradients_with_broadcast(rng: &mut dyn RngCore) -> f64 {
    let (m, n) = (rng.random_range(1..4), rng.random_range(1..5));
    let a = random(rng, &[m, n], 1.0);
    let b = random(rng, &[m, n], 1.0);
    let row = random(rng, &[n], 1.0);
    let e1 = max_rel_err(&[a.clone(), b], m * n, rng, |t, v| {
        let s = t.add(v[0], v[1]).expect("valid op");
        let d = t.sub(s, v[1]).expect("valid op");
        t.mul(d, v[1]).expect("valid op")
    });
    let e2 = max_rel_err(&[a, row], m * n, rng, |t, v| {
        let s = t.add(v[0], v[1]).expect("valid op");
        t.mul(s, v[1]).expect("valid op")
    });
    e1.max(e2)
}

fn activation_gradients(rng: &mut dyn RngCore) -> f64 {
    let n = rng.random_range(1..8);
    let x = random(rng, &[n], 2.0);
    let relu = max_rel_err(std::slice::from_ref(&x), n, rng, |t, v| t.relu(v[0]).expect("valid op"));
    let tanh = max_rel_err(std::slice::from_ref(&x), n, rng, |t, v| t.tanh(v[0]).expect("valid op"));
    let gelu = max_rel_err(std::slice::from_ref(&x), n, rng, |t, v| t.gelu(v[0]).expect("valid op"));
    let scale = max_rel_err(&[x], n, rng, |t, v| t.scale(v[0], -0.37).expect("valid op"));
    relu.max(tanh).max(gelu).max(scale)
}

fn softmax_gradients(rng: &mut dyn RngCore) -> f64 {
    let (m, n) = (rng.random_range(1..4), rng.random_range(2..6));
    let x = random(rng, &[m, n], 3.0);
    max_rel_err(&[x], m * n, rng, |t, v| t.softmax_rows(v[0]).expect("valid op"))
}

fn layer_norm_gradients(rng: &mut dyn RngCore) -> f64 {
    let (m, n) = (rng.random_range(1..4), rng.random_range(2..7));
    let x = random(rng, &[m, n], 2.0);
    let g = random(rng, &[n], 1.5);
    let b = random(rng, &[n], 1.0);
    max_rel_err(&[x, g, b], m * n, rng, |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5).expect("valid op")
    })
}

fn cross_entropy_gradients(rng: &mut dyn RngCore) -> f64 {
    let (m, l) = (rng.random_range(1..5), rng.random_range(2..6));
    let x = random(rng, &[m, l], 3.0);
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..l)).collect();
    let hard = max_rel_err(std::slice::from_ref(&x), 1, rng, |t, v| {
        t.cross_entropy(v[0], &labels).expect("valid op")
    });
    let soft = Tensor::from_fn([m, l], |_| rng.random_range(0.0..1.0)).expect("valid op");
    let soft_err = max_rel_err(&[x], 1, rng, |t, v| {
        t.cross_entropy_soft(v[0], &soft).expect("valid op")
    });
    hard.max(soft_err)
}

fn gather_and_pool_gradients(rng: &mut dyn RngCore) -> f64 {
    let (vocab, d) = (rng.random_range(2..6), rng.random_range(1..4));
    let (batch, seq) = (rng.random_range(1..3), rng.random_range(1..4));
    let table = random(rng, &[vocab, d], 1.0);
    let ids: Vec<usize> = (0..batch * seq).map(|_| rng.random_range(0..vocab)).collect();
    let mut mask: Vec<bool> = (0..batch * seq).map(|_| rng.random_bool(0.7)).collect();
    for b in 0..batch {
        mask[b * seq] = true;
    }
    max_rel_err(&[table], batch * d, rng, |t, v| {
        let x = t.gather(v[0], &ids).expect("valid op");
        t.mean_pool(x, &mask, batch, seq).expect("valid op")
    })
}

fn attention_gradients(rng: &mut dyn RngCore) -> f64 {
    let heads = rng.random_range(1..3);
    let d = heads * rng.random_range(1..4);
    let (batch, seq) = (rng.random_range(1..3), rng.random_range(1..4));
    let prefix_len = rng.random_range(0..3);
    let rows = batch * seq;
    let mut mask: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.75)).collect();
    for b in 0..batch {
        mask[b * seq] = true;
    }
    let mut inputs = vec![
        random(rng, &[rows, d], 1.0),
        random(rng, &[rows, d], 1.0),
        random(rng, &[rows, d], 1.0),
    ];
    if prefix_len > 0 {
        inputs.push(random(rng, &[prefix_len, d], 1.0));
        inputs.push(random(rng, &[prefix_len, d], 1.0));
    }
    let layout = AttentionLayout {
        batch,
        seq,
        heads,
        mask: &mask,
    };
    max_rel_err(&inputs, rows * d, rng, |t, v| {
        let prefix = (v.len() == 5).then(|| (v[3], v[4]));
        t.attention(v[0], v[1], v[2], prefix, layout).expect("valid op")
    })
}

fn composite_two_layer_network(rng: &mut dyn RngCore) -> f64 {
    let (m, d, h, l) = (3, 4, 5, 3);
    let x = random(rng, &[m, d], 1.0);
    let w1 = random(rng, &[d, h], 1.0);
    let b1 = random(rng, &[h], 0.5);
    let w2 = random(rng, &[h, l], 1.0);
    let labels = [0usize, 2, 1];
    max_rel_err(&[x, w1, b1, w2], 1, rng, |t, v| {
        let z = t.matmul(v[0], v[1]).expect("valid op");
        let z = t.add(z, v[2]).expect("valid op");
        let a = t.tanh(z).expect("valid op");
        let o = t.matmul(a, v[3]).expect("valid op");
        t.cross_entropy(o, &labels).expect("valid op")
    })
}
