//! Analytic gradients against central finite differences, shared by the
//! gradient tests and the acceptance suite.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use unlearn_lab::model::{LabeledSequence, ModelConfig, TransformerModel};
use unlearn_lab::tensor::{GradientMap, ParamKey, Segment, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 100;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

/// Relative error of one gradient tensor: largest absolute deviation over
/// the larger of the two max-norms.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Runs `f` on fresh tapes and compares every input's gradient with
/// central differences. Returns the worst relative error.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).value().item()
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| tape.param(ParamKey(i), Arc::new(t.clone()))).collect();
    let loss = f(&tape, &vars);
    let grads: GradientMap = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * STEP);
        }
        let analytic = grads.get(ParamKey(i)).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; numeric.len()]);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Projects a tensor onto fixed random weights so every output element
/// contributes to the scalar loss.
pub fn project<'t>(tape: &'t Tape, x: Var<'t>, seed: u64) -> Var<'t> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(&mut rng, &x.shape());
    x.mul(tape.constant(w)).sum()
}

/// Worst error of `case` over the instance count, seeded by `name`.
pub fn worst_over(name: &str, case: Case) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    (0..INSTANCES).map(|_| case(&mut rng)).fold(0.0, f64::max)
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

fn matmul(rng: &mut ChaCha8Rng) -> f64 {
    let (m, k, n) = dims(rng);
    let s = rng.random();
    gradcheck(&[randn(rng, &[m, k]), randn(rng, &[k, n])], |t, v| project(t, v[0].matmul(v[1]), s))
}

fn add_mul_scale(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n, _) = dims(rng);
    let s = rng.random();
    let c: f64 = rng.random_range(-2.0..2.0);
    gradcheck(&[randn(rng, &[m, n]), randn(rng, &[m, n])], |t, v| {
        project(t, v[0].add(v[1]).mul(v[0]).scale(c), s)
    })
}

fn add_row(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n, _) = dims(rng);
    let s = rng.random();
    gradcheck(&[randn(rng, &[m, n]), randn(rng, &[n])], |t, v| project(t, v[0].add_row(v[1]), s))
}

fn sum(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n, _) = dims(rng);
    gradcheck(&[randn(rng, &[m, n])], |_, v| v[0].mul(v[0]).sum())
}

fn gelu(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n, _) = dims(rng);
    let s = rng.random();
    gradcheck(&[randn(rng, &[m, n])], |t, v| project(t, v[0].scale(2.0).gelu(), s))
}

fn softmax_rows(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n, _) = dims(rng);
    let s = rng.random();
    gradcheck(&[randn(rng, &[m, n + 1])], |t, v| project(t, v[0].scale(3.0).softmax_rows(), s))
}

fn layer_norm(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n, _) = dims(rng);
    let n = n + 1;
    let s = rng.random();
    gradcheck(&[randn(rng, &[m, n]), randn(rng, &[n]), randn(rng, &[n])], |t, v| {
        project(t, v[0].layer_norm(v[1], v[2], 1e-5), s)
    })
}

fn embedding(rng: &mut ChaCha8Rng) -> f64 {
    let (vocab, d, t) = dims(rng);
    let ids: Vec<usize> = (0..t + 2).map(|_| rng.random_range(0..vocab)).collect();
    let s = rng.random();
    gradcheck(&[randn(rng, &[vocab, d])], |t, v| project(t, t.embedding(v[0], &ids), s))
}

fn causal_attention(rng: &mut ChaCha8Rng) -> f64 {
    let heads = rng.random_range(1..3);
    let d = heads * rng.random_range(1..4);
    let lens: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..5)).collect();
    let mut segments = Vec::new();
    let mut start = 0;
    for len in lens {
        segments.push(Segment { start, len });
        start += len;
    }
    let s = rng.random();
    let shape = [start, d];
    gradcheck(&[randn(rng, &shape), randn(rng, &shape), randn(rng, &shape)], |t, v| {
        project(t, t.causal_attention(v[0], v[1], v[2], heads, &segments), s)
    })
}

fn replace_and_select_rows(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n, _) = dims(rng);
    let m = m + 1;
    let patch: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let at = rng.random_range(0..m);
    let pick: Vec<usize> = (0..m + 1).map(|_| rng.random_range(0..m)).collect();
    let s = rng.random();
    gradcheck(&[randn(rng, &[m, n])], |t, v| {
        project(t, v[0].scale(1.5).replace_rows(&[(at, &patch)]).select_rows(&pick), s)
    })
}

fn masked_cross_entropy(rng: &mut ChaCha8Rng) -> f64 {
    let (t, vocab, _) = dims(rng);
    let vocab = vocab + 1;
    let targets: Vec<usize> = (0..t).map(|_| rng.random_range(0..vocab)).collect();
    let mut mask: Vec<bool> = (0..t).map(|_| rng.random_bool(0.6)).collect();
    mask[rng.random_range(0..t)] = true;
    gradcheck(&[randn(rng, &[t, vocab])], |tp, v| tp.masked_cross_entropy(v[0], &targets, &mask).unwrap())
}

fn kl_to_reference(rng: &mut ChaCha8Rng) -> f64 {
    let (t, vocab, _) = dims(rng);
    let vocab = vocab + 1;
    let reference = randn(rng, &[t, vocab]);
    let mut ref_lp = Tensor::zeros(vec![t, vocab]);
    for r in 0..t {
        ref_lp.row_mut(r).copy_from_slice(&unlearn_lab::tensor::log_softmax(reference.row(r)));
    }
    let mut mask: Vec<bool> = (0..t).map(|_| rng.random_bool(0.6)).collect();
    mask[rng.random_range(0..t)] = true;
    gradcheck(&[randn(rng, &[t, vocab])], |tp, v| tp.kl_to_reference(v[0], &ref_lp, &mask).unwrap())
}

fn three_layer_mlp(rng: &mut ChaCha8Rng) -> f64 {
    let (batch, h, _) = dims(rng);
    let (din, dout) = (rng.random_range(2..5), rng.random_range(2..5));
    let x = randn(rng, &[batch, din]);
    let targets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..dout)).collect();
    let mask = vec![true; batch];
    let params = [
        randn(rng, &[din, h]),
        randn(rng, &[h]),
        randn(rng, &[h, h]),
        randn(rng, &[h]),
        randn(rng, &[h, dout]),
        randn(rng, &[dout]),
    ];
    gradcheck(&params, |t, v| {
        let a = t.constant(x.clone()).matmul(v[0]).add_row(v[1]).gelu();
        let b = a.matmul(v[2]).add_row(v[3]).gelu();
        let z = b.matmul(v[4]).add_row(v[5]);
        t.masked_cross_entropy(z, &targets, &mask).unwrap()
    })
}

/// Largest absolute row mean of layer-normalized wide-range inputs.
pub fn layer_norm_centering_worst() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..INSTANCES {
        let (m, n, _) = dims(&mut rng);
        let x = randn(&mut rng, &[m, n + 1]).data().iter().map(|v| v * 50.0 + 7.0).collect::<Vec<_>>();
        let tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![m, n + 1], x).unwrap());
        let one = tape.constant(Tensor::filled(vec![n + 1], 1.0));
        let zero = tape.constant(Tensor::zeros(vec![n + 1]));
        let y = xv.layer_norm(one, zero, 1e-5).value();
        for r in 0..m {
            let mean: f64 = y.row(r).iter().sum::<f64>() / (n + 1) as f64;
            worst = worst.max(mean.abs());
        }
    }
    worst
}

/// Full transformer loss on packed sequences; every parameter of a small
/// model is checked along a random direction per instance, plus every
/// element of one block's weights in the first instances.
pub fn transformer_loss_worst() -> f64 {
    let cfg = ModelConfig { num_layers: 2, d_model: 8, num_heads: 2, d_mlp: 12, vocab_size: 9, max_seq_len: 10, seed: 5 };
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    for instance in 0..INSTANCES {
        let model = TransformerModel::new(ModelConfig { seed: instance as u64, ..cfg.clone() }).unwrap();
        let seqs: Vec<LabeledSequence> = (0..rng.random_range(1..4))
            .map(|_| {
                let p: Vec<u32> = (0..rng.random_range(1..4)).map(|_| rng.random_range(0..9)).collect();
                let o: Vec<u32> = (0..rng.random_range(1..4)).map(|_| rng.random_range(0..9)).collect();
                LabeledSequence::new(&p, &o).unwrap()
            })
            .collect();
        let refs: Vec<&LabeledSequence> = seqs.iter().collect();
        let all = model.all_parameters();
        let loss_of = |m: &TransformerModel| {
            let tape = Tape::new();
            m.mean_sequence_nll(&tape, &m.all_parameters(), &refs).unwrap().value().item()
        };
        let tape = Tape::new();
        let loss = model.mean_sequence_nll(&tape, &all, &refs).unwrap();
        let grads = tape.backward(loss).unwrap();

        // directional derivative along a random unit direction
        let dirs: Vec<(ParamKey, Tensor)> = model.keys().map(|k| (k, randn(&mut rng, model.param(k).shape()))).collect();
        let norm: f64 = dirs.iter().flat_map(|(_, d)| d.data()).map(|v| v * v).sum::<f64>().sqrt();
        let shifted = |sign: f64| {
            let mut m = model.clone();
            for (k, d) in &dirs {
                for (p, dv) in m.param_mut(*k).data_mut().iter_mut().zip(d.data()) {
                    *p += sign * STEP * dv / norm;
                }
            }
            loss_of(&m)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * STEP);
        let analytic: f64 = dirs
            .iter()
            .map(|(k, d)| grads.get(*k).unwrap().data().iter().zip(d.data()).map(|(g, v)| g * v).sum::<f64>())
            .sum::<f64>()
            / norm;
        worst = worst.max(relative_error(&[analytic], &[numeric]));

        if instance < 3 {
            for k in model.keys() {
                let mut numeric = vec![0.0; model.param(k).len()];
                for (j, slot) in numeric.iter_mut().enumerate() {
                    let mut m = model.clone();
                    m.param_mut(k).data_mut()[j] += STEP;
                    let up = loss_of(&m);
                    m.param_mut(k).data_mut()[j] -= 2.0 * STEP;
                    *slot = (up - loss_of(&m)) / (2.0 * STEP);
                }
                worst = worst.max(relative_error(grads.get(k).unwrap().data(), &numeric));
            }
        }
    }
    worst
}

pub type Case = fn(&mut ChaCha8Rng) -> f64;

/// Every primitive case, by name.
pub const PRIMITIVES: [(&str, Case); 13] = [
    ("matmul", matmul),
    ("add_mul_scale", add_mul_scale),
    ("add_row", add_row),
    ("sum", sum),
    ("gelu", gelu),
    ("softmax_rows", softmax_rows),
    ("layer_norm", layer_norm),
    ("embedding", embedding),
    ("causal_attention", causal_attention),
    ("replace_and_select_rows", replace_and_select_rows),
    ("masked_cross_entropy", masked_cross_entropy),
    ("kl_to_reference", kl_to_reference),
    ("three_layer_mlp", three_layer_mlp),
];
