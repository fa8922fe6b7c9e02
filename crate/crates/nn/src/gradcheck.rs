//! Central-difference gradient checks in float64 for every differentiable layer.

use ndarray::{ArrayD, IxDyn};
use crate::model::{birnn_forward, conv1d, final_reconstructor_forward, Mode};
use crate::params::{uniform, Binding, ParamStore};
use crate::{Arch, Classifier, ClassifierConfig, RnnCell, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Scalar `sum(out * r)` with a fixed random `r`, so every output entry matters.
fn project(tape: &Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let r = ArrayD::from_shape_simple_fn(IxDyn(&shape), || rng.gen_range(-1.0..1.0));
    let r = tape.leaf(r);
    tape.sum_all(tape.mul(out, r))
}

/// Worst relative error, over all trainable tensors of `store`, between the
/// tape gradient and central differences of `f`.
pub fn check(store: &mut ParamStore<f64>, seed: u64, f: &dyn Fn(&Tape<f64>, &Binding, &ParamStore<f64>) -> Var) -> f64 {
    let loss = |s: &ParamStore<f64>| {
        let tape = Tape::new();
        let bind = s.bind(&tape);
        let out = f(&tape, &bind, s);
        let l = project(&tape, out, seed);
        tape.value(l)[[]]
    };
    let tape = Tape::new();
    let bind = store.bind(&tape);
    let out = f(&tape, &bind, store);
    let l = project(&tape, out, seed);
    let mut grads = tape.backward(l);
    let analytic = store.collect_grads(&bind, &mut grads);
    drop(grads);
    drop(tape);

    let mut worst: f64 = 0.0;
    for (name, g) in analytic {
        let n = store.get(&name).len();
        let mut num = Vec::with_capacity(n);
        for k in 0..n {
            let orig = store.get(&name).as_slice().unwrap()[k];
            store.get_mut(&name).as_slice_mut().unwrap()[k] = orig + STEP;
            let up = loss(store);
            store.get_mut(&name).as_slice_mut().unwrap()[k] = orig - STEP;
            let down = loss(store);
            store.get_mut(&name).as_slice_mut().unwrap()[k] = orig;
            num.push((up - down) / (2.0 * STEP));
        }
        let diff: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt() + num.iter().map(|b| b * b).sum::<f64>().sqrt();
        // an absolute floor: biases feeding a batch-statistics normalization have zero gradient
        let rel = if scale < 1e-8 { diff } else { diff / scale };
        assert!(rel.is_finite(), "{name}: non-finite gradient");
        worst = worst.max(rel);
    }
    worst
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    uniform(shape, 1.0, rng)
}

pub fn linear(shapes: u64) -> Vec<f64> {
    let mut errs = vec![];
    for s in 0..shapes {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..7), rng.gen_range(1..5));
        let mut st = ParamStore::new();
        st.insert("x", rand_tensor(&[m, k], &mut rng), true);
        st.insert("w", rand_tensor(&[k, n], &mut rng), true);
        st.insert("b", rand_tensor(&[n], &mut rng), true);
        errs.push(check(&mut st, s, &|t, b, _| t.add_bias(t.matmul(b.var("x"), b.var("w")), b.var("b"))));
    }
    errs
}

pub fn relu(shapes: u64) -> Vec<f64> {
    let mut errs = vec![];
    for s in 0..shapes {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + s);
        let shape: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..5)).collect();
        let mut st = ParamStore::new();
        // keep entries away from the kink
        let x = rand_tensor(&shape, &mut rng).mapv(|v: f64| if v.abs() < 0.05 { v + 0.1 } else { v });
        st.insert("x", x, true);
        errs.push(check(&mut st, s, &|t, b, _| t.relu(b.var("x"))));
    }
    errs
}

pub fn sigmoid_tanh(shapes: u64) -> Vec<f64> {
    let mut errs = vec![];
    for s in 0..shapes {
        let mut rng = ChaCha8Rng::seed_from_u64(20 + s);
        let shape: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..5)).collect();
        let mut st = ParamStore::new();
        st.insert("x", rand_tensor(&shape, &mut rng) * 3.0, true);
        errs.push(check(&mut st, s, &|t, b, _| t.sigmoid(b.var("x"))));
        errs.push(check(&mut st, s, &|t, b, _| t.tanh(b.var("x"))));
    }
    errs
}

pub fn bce(shapes: u64) -> Vec<f64> {
    let mut errs = vec![];
    for s in 0..shapes {
        let mut rng = ChaCha8Rng::seed_from_u64(30 + s);
        let n = rng.gen_range(1..9);
        let y = ArrayD::from_shape_simple_fn(IxDyn(&[n, 1]), || f64::from(rng.gen_bool(0.5)));
        let mut st = ParamStore::new();
        st.insert("p", ArrayD::from_shape_simple_fn(IxDyn(&[n, 1]), || rng.gen_range(0.1..0.9)), true);
        st.insert("z", rand_tensor(&[n, 1], &mut rng) * 4.0, true);
        let (y1, y2) = (y.clone(), y);
        errs.push(check(&mut st, s, &move |t, b, _| t.bce(b.var("p"), &y1)));
        errs.push(check(&mut st, s, &move |t, b, _| t.bce_with_logits(b.var("z"), &y2)));
    }
    errs
}

pub fn dilated_conv(shapes: u64) -> Vec<f64> {
    let mut errs = vec![];
    for s in 0..shapes {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + s);
        let kernel = [1, 3, 5][rng.gen_range(0..3)];
        let dilation = rng.gen_range(1..4);
        let padding = dilation * (kernel - 1) / 2;
        let (bsz, l, cin, cout) = (rng.gen_range(1..3), rng.gen_range(2..9), rng.gen_range(1..4), rng.gen_range(1..4));
        let mut st = ParamStore::new();
        st.insert("x", rand_tensor(&[bsz, l, cin], &mut rng), true);
        st.insert("w", rand_tensor(&[kernel * cin, cout], &mut rng), true);
        st.insert("b", rand_tensor(&[cout], &mut rng), true);
        errs.push(check(&mut st, s, &|t, b, _| conv1d(t, b.var("x"), b.var("w"), b.var("b"), kernel, dilation, padding)));
    }
    errs
}

pub fn batchnorm(shapes: u64) -> Vec<f64> {
    let mut errs = vec![];
    for s in 0..shapes {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + s);
        let (m, c) = (rng.gen_range(2..9), rng.gen_range(1..5));
        let mut st = ParamStore::new();
        st.insert("x", rand_tensor(&[m, c], &mut rng), true);
        st.insert("gamma", rand_tensor(&[c], &mut rng), true);
        st.insert("beta", rand_tensor(&[c], &mut rng), true);
        let mean = rand_tensor(&[c], &mut rng);
        let var = rand_tensor(&[c], &mut rng).mapv(|v: f64| v.abs() + 0.5);
        errs.push(check(&mut st, s, &|t, b, _| t.batchnorm_train(b.var("x"), b.var("gamma"), b.var("beta"), 1e-5).0));
        errs.push(check(&mut st, s, &move |t, b, _| t.batchnorm_eval(b.var("x"), b.var("gamma"), b.var("beta"), &mean, &var, 1e-5)));
    }
    errs
}

pub fn shape_ops(shapes: u64) -> Vec<f64> {
    let mut errs = vec![];
    for s in 0..shapes {
        let mut rng = ChaCha8Rng::seed_from_u64(60 + s);
        let (a, b, c) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let mut st = ParamStore::new();
        st.insert("x", rand_tensor(&[a, b, c], &mut rng), true);
        st.insert("y", rand_tensor(&[a, b, c], &mut rng), true);
        errs.push(check(&mut st, s, &|t, v, _| {
            let cat = t.concat(&[v.var("x"), v.var("y")], 2);
            let sel = t.select(cat, 1, 0);
            let m = t.mean_axis_sorted(t.reshape(cat, &[a, b * 2 * c]), 1);
            let d = t.sub(t.scale(v.var("x"), 0.3), t.one_minus(v.var("y")));
            t.add(t.sum_all(sel), t.add(t.sum_all(m), t.sum_all(t.mean_axis(d, 0))))
        }));
    }
    errs
}

fn tiny_rnn(cell: RnnCell, tie: bool, d: usize, h: usize) -> ClassifierConfig {
    ClassifierConfig {
        reconstructor_dims: vec![4, 5, d],
        rnn_hidden_total: 2 * h,
        rnn_cell: cell,
        tie_directions: tie,
        final_dims: vec![2 * h, 3, 1],
        ..ClassifierConfig::birnn()
    }
}

pub fn rnn_cells(shapes: u64) -> Vec<f64> {
    let mut errs = vec![];
    for s in 0..shapes {
        let mut rng = ChaCha8Rng::seed_from_u64(70 + s);
        let (bsz, l, d, h) = (rng.gen_range(1..3), rng.gen_range(1..6), rng.gen_range(1..4), rng.gen_range(1..4));
        for (cell, tie) in [(RnnCell::Gru, false), (RnnCell::Gru, true), (RnnCell::Vanilla, false)] {
            let cfg = tiny_rnn(cell, tie, d, h);
            let mut st = Classifier::<f64>::new(cfg.clone(), s).unwrap().store;
            st.insert("x", rand_tensor(&[bsz, l, d], &mut rng), true);
            errs.push(check(&mut st, s, &|t, b, _| birnn_forward(t, b, &cfg, b.var("x")).unwrap()));
        }
    }
    errs
}

pub fn final_mlp(shapes: u64) -> Vec<f64> {
    let mut errs = vec![];
    for s in 0..shapes {
        let mut rng = ChaCha8Rng::seed_from_u64(80 + s);
        let cfg = tiny_rnn(RnnCell::Gru, false, 2, rng.gen_range(1..4));
        let mut st = Classifier::<f64>::new(cfg.clone(), s).unwrap().store;
        st.insert("h", rand_tensor(&[rng.gen_range(1..5), cfg.final_dims[0]], &mut rng), true);
        errs.push(check(&mut st, s, &|t, b, _| final_reconstructor_forward(t, b, &cfg, b.var("h")).unwrap()));
    }
    errs
}

fn shadows(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(0.0..1.0))
}

pub fn whole_models(shapes: u64) -> Vec<f64> {
    let mut errs = vec![];
    for s in 0..shapes {
        let mut rng = ChaCha8Rng::seed_from_u64(90 + s);
        let x = shadows(&[2, rng.gen_range(1..4), rng.gen_range(2..5), 4], &mut rng);
        let birnn = tiny_rnn(RnnCell::Gru, false, 3, 2);
        let mut cnn = ClassifierConfig {
            arch: Arch::Cnn,
            reconstructor_dims: vec![4, 3],
            final_dims: vec![3, 2, 1],
            ..ClassifierConfig::cnn()
        };
        cnn.cnn.dilations = vec![1, 2];
        cnn.cnn.channels = 2;
        cnn.cnn.merge_channels = 3;
        cnn.cnn.ff_width = 3;
        cnn.cnn.dropout = 0.0;
        for (cfg, train) in [(birnn, false), (cnn.clone(), false), (cnn, true)] {
            let model = Classifier::<f64>::new(cfg, s).unwrap();
            let mut st = model.store.clone();
            let xv = x.clone();
            errs.push(check(&mut st, s, &move |t, b, store| {
                let m = Classifier { cfg: model.cfg.clone(), store: store.clone() };
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut mode = if train { Mode::Train(&mut rng) } else { Mode::Eval };
                m.forward(t, b, &xv, &mut mode).unwrap().0
            }));
        }
    }
    errs
}

/// Every layer family with the worst relative error of each random shape.
pub fn suite(shapes: u64) -> Vec<(&'static str, Vec<f64>)> {
    vec![
        ("linear", linear(shapes)),
        ("relu", relu(shapes)),
        ("sigmoid/tanh", sigmoid_tanh(shapes)),
        ("bce", bce(shapes)),
        ("dilated conv", dilated_conv(shapes)),
        ("batchnorm", batchnorm(shapes)),
        ("shape ops", shape_ops(shapes)),
        ("gru/vanilla rnn", rnn_cells(shapes)),
        ("final mlp", final_mlp(shapes)),
        ("whole models", whole_models(shapes)),
    ]
}
