use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use typespace::diffkernel::{
    load_checkpoint, save_checkpoint, Adam, AdamConfig, CheckpointHeader, Gru, KernelError,
    ParamStore, Tape, Tensor, Var,
};

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nb < 1e-12 {
        0.0
    } else {
        diff / (na + nb)
    }
}

/// Checks analytic against central-difference gradients of
/// L = Σ w ⊙ f(inputs) for fixed non-uniform weights w.
fn grad_check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
    let eval = |ins: &[Tensor], w: Option<&Tensor>, grads: bool| -> (f64, Option<Tensor>, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let (r, c) = tape.shape(out);
        let w = match w {
            Some(w) => w.clone(),
            None => Tensor::new(r, c, (0..r * c).map(|k| 0.5 + (k % 7) as f64 * 0.37).collect()).unwrap(),
        };
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).item().unwrap();
        let mut gs = Vec::new();
        if grads {
            let g = tape.backward(loss, &mut ParamStore::new()).unwrap();
            for (v, t) in vars.iter().zip(ins) {
                gs.push(match g.get(*v) {
                    Some(x) => x.data().to_vec(),
                    None => vec![0.0; t.data().len()],
                });
            }
        }
        (value, Some(w), gs)
    };
    let (_, w, analytic) = eval(&inputs, None, true);
    let w = w.unwrap();
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.data().len()];
        for j in 0..t.data().len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= h;
            let (fp, _, _) = eval(&plus, Some(&w), false);
            let (fm, _, _) = eval(&minus, Some(&w), false);
            numeric[j] = (fp - fm) / (2.0 * h);
        }
        let e = rel_err(&analytic[k], &numeric);
        assert!(e < 1e-4, "input {k}: relative error {e}\n{:?}\n{numeric:?}", analytic[k]);
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8))
}

pub fn gradient_checks_for_every_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let (m, k, n) = dims(&mut rng);
        let a = rand_tensor(&mut rng, m, k);
        let b = rand_tensor(&mut rng, k, n);
        grad_check(vec![a.clone(), b], |t, v| t.matmul(v[0], v[1]).unwrap());
        let bt = rand_tensor(&mut rng, n, k);
        grad_check(vec![a.clone(), bt], |t, v| t.matmul_t(v[0], v[1]).unwrap());
        let a2 = rand_tensor(&mut rng, m, k);
        grad_check(vec![a.clone(), a2.clone()], |t, v| t.add(v[0], v[1]).unwrap());
        let row = rand_tensor(&mut rng, 1, k);
        grad_check(vec![a.clone(), row], |t, v| t.add(v[0], v[1]).unwrap());
        grad_check(vec![a.clone(), a2.clone()], |t, v| t.sub(v[0], v[1]).unwrap());
        grad_check(vec![a.clone(), a2.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
        grad_check(vec![a.clone()], |t, v| t.scale(v[0], -1.7));
        grad_check(vec![a.clone()], |t, v| t.sigmoid(v[0]));
        grad_check(vec![a.clone()], |t, v| t.tanh(v[0]));
        let nseg = rng.gen_range(1..=4);
        let seg: Vec<usize> = (0..m).map(|_| rng.gen_range(0..nseg)).collect();
        let seg2 = seg.clone();
        grad_check(vec![a.clone()], move |t, v| t.segment_sum(v[0], seg.clone(), nseg).unwrap());
        grad_check(vec![a.clone()], move |t, v| t.segment_max(v[0], seg2.clone(), nseg).unwrap());
        let idx: Vec<usize> = (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(0..m)).collect();
        grad_check(vec![a.clone()], move |t, v| t.gather_rows(v[0], idx.clone()).unwrap());
        grad_check(vec![a.clone(), a2.clone()], |t, v| t.l1_rows(v[0], v[1]).unwrap());
        let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k)).collect();
        grad_check(vec![a.clone()], move |t, v| t.softmax_xent(v[0], targets.clone()).unwrap());
        grad_check(vec![a.clone()], |t, v| t.hinge(v[0], 0.3));
        grad_check(vec![a.clone()], |t, v| {
            let x = t.sum(v[0]);
            t.scale(x, 1.0)
        });
        grad_check(vec![a.clone()], |t, v| t.mean(v[0]));
        let c = rand_tensor(&mut rng, n, k);
        grad_check(vec![a.clone(), c], |t, v| t.concat_rows(&[v[0], v[1], v[0]]).unwrap());
    }
}

pub fn gru_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let d = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=8);
        let mut ins = vec![rand_tensor(&mut rng, n, d), rand_tensor(&mut rng, n, d)];
        for _ in 0..6 {
            ins.push(rand_tensor(&mut rng, d, d).map(|v| v * 0.5));
        }
        for _ in 0..3 {
            ins.push(rand_tensor(&mut rng, 1, d));
        }
        grad_check(ins, gru_from_vars);
    }
}

/// Same equations as the library cell, over tape inputs so the weights
/// themselves can be perturbed.
fn gru_from_vars(t: &mut Tape, v: &[Var]) -> Var {
    let (x, h) = (v[0], v[1]);
    let gate = |t: &mut Tape, k: usize, hin: Var| {
        let a = t.matmul_t(x, v[2 + k]).unwrap();
        let b = t.matmul_t(hin, v[5 + k]).unwrap();
        let s = t.add(a, b).unwrap();
        t.add(s, v[8 + k]).unwrap()
    };
    let zp = gate(t, 0, h);
    let z = t.sigmoid(zp);
    let rp = gate(t, 1, h);
    let r = t.sigmoid(rp);
    let rh = t.mul(r, h).unwrap();
    let hp = gate(t, 2, rh);
    let c = t.tanh(hp);
    let d = t.sub(c, h).unwrap();
    let s = t.mul(z, d).unwrap();
    t.add(h, s).unwrap()
}

fn gru_store(d: usize, values: [[f64; 3]; 3]) -> (ParamStore, Gru) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gru = Gru::new(&mut store, "gru", d, 0.1, &mut rng).unwrap();
    for (kind, vals) in ["w", "u", "b"].iter().zip(values) {
        for (g, v) in ["z", "r", "h"].iter().zip(vals) {
            let id = store.id(&format!("gru.{kind}_{g}")).unwrap();
            let shape = store.value(id).shape();
            store.set_value(id, Tensor::filled(shape.0, shape.1, v)).unwrap();
        }
    }
    (store, gru)
}

pub fn library_gru_matches_reference_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 5;
    let mut store = ParamStore::new();
    let gru = Gru::new(&mut store, "g", d, 0.5, &mut rng).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let (r, c) = store.value(id).shape();
        store.set_value(id, rand_tensor(&mut rng, r, c)).unwrap();
    }
    let x = rand_tensor(&mut rng, 4, d);
    let h = rand_tensor(&mut rng, 4, d);
    let mut t = Tape::new();
    let (xv, hv) = (t.constant(x.clone()), t.constant(h.clone()));
    let vars = gru.bind(&mut t, &store);
    let out = vars.cell(&mut t, xv, hv).unwrap();
    let lib = t.value(out).clone();
    let mut t2 = Tape::new();
    let mut ins = vec![t2.constant(x), t2.constant(h)];
    for kind in ["w", "u", "b"] {
        for g in ["z", "r", "h"] {
            let id = store.id(&format!("g.{kind}_{g}")).unwrap();
            ins.push(t2.constant(store.value(id).clone()));
        }
    }
    let reference = gru_from_vars(&mut t2, &ins);
    assert_eq!(&lib, t2.value(reference));
}

pub fn gru_with_zero_parameters_halves_the_state() {
    let (store, gru) = gru_store(3, [[0.0; 3]; 3]);
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[[0.3, -1.0, 2.0]]).unwrap());
    let h = t.constant(Tensor::from_rows(&[[1.0, -4.0, 0.5]]).unwrap());
    let v = gru.bind(&mut t, &store);
    let out = v.cell(&mut t, x, h).unwrap();
    assert_eq!(t.value(out).data(), &[0.5, -2.0, 0.25]);
}

pub fn gru_scalar_hand_computation() {
    // z, r, h̃ evaluated by hand for D = 1
    let (store, gru) = gru_store(1, [[0.5, 0.2, -0.7], [-0.3, 0.4, 0.6], [0.1, -0.1, 0.05]]);
    let mut t = Tape::new();
    let x = t.constant(Tensor::scalar(1.5));
    let h = t.constant(Tensor::scalar(-0.8));
    let v = gru.bind(&mut t, &store);
    let out = v.cell(&mut t, x, h).unwrap();
    assert_abs_diff_eq!(t.value(out).item().unwrap(), -0.8309106816246188, epsilon = 1e-12);
}

pub fn gru_parameter_gradients_via_store() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 4;
    let mut store = ParamStore::new();
    let gru = Gru::new(&mut store, "g", d, 0.5, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, 3, d);
    let h = rand_tensor(&mut rng, 3, d);
    let loss_of = |store: &mut ParamStore, grad: bool| -> f64 {
        let mut t = Tape::new();
        let (xv, hv) = (t.constant(x.clone()), t.constant(h.clone()));
        let vars = gru.bind(&mut t, store);
        let out = vars.cell(&mut t, xv, hv).unwrap();
        let sq = t.mul(out, out).unwrap();
        let l = t.sum(sq);
        let value = t.value(l).item().unwrap();
        if grad {
            t.backward(l, store).unwrap();
        }
        value
    };
    store.zero_grads();
    loss_of(&mut store, true);
    let eps = 1e-6;
    for id in store.ids().collect::<Vec<_>>() {
        let analytic = store.grad(id).data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + eps;
            let fp = loss_of(&mut store, false);
            store.value_mut(id).data_mut()[j] = orig - eps;
            let fm = loss_of(&mut store, false);
            store.value_mut(id).data_mut()[j] = orig;
            numeric[j] = (fp - fm) / (2.0 * eps);
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-4, "{}: {e}", store.name(id));
    }
}

pub fn primitive_examples() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::scalar(0.0));
    let s = t.sigmoid(z);
    assert_eq!(t.value(s).item().unwrap(), 0.5);

    let x = t.constant(Tensor::from_rows(&[[1.0, 4.0], [3.0, 2.0]]).unwrap());
    let m = t.segment_max(x, vec![0, 0], 1).unwrap();
    assert_eq!(t.value(m).data(), &[3.0, 4.0]);

    let a = t.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
    let b = t.constant(Tensor::from_rows(&[[4.0, 0.0]]).unwrap());
    let d = t.l1_rows(a, b).unwrap();
    assert_eq!(t.value(d).item().unwrap(), 5.0);

    let h = t.hinge(a, -1.5);
    assert_eq!(t.value(h).data(), &[0.0, 0.5]);
}

pub fn scalar_product_rule_and_l1_sign() {
    let mut t = Tape::new();
    let x = t.input(Tensor::scalar(3.0));
    let y = t.input(Tensor::scalar(-2.5));
    let p = t.mul(x, y).unwrap();
    let g = t.backward(p, &mut ParamStore::new()).unwrap();
    assert_eq!(g.get(x).unwrap().item().unwrap(), -2.5);
    assert_eq!(g.get(y).unwrap().item().unwrap(), 3.0);

    let mut t = Tape::new();
    let a = t.input(Tensor::from_rows(&[[1.0, 2.0, 5.0]]).unwrap());
    let b = t.input(Tensor::from_rows(&[[4.0, 2.0, 0.0]]).unwrap());
    let d = t.l1_rows(a, b).unwrap();
    let s = t.sum(d);
    let g = t.backward(s, &mut ParamStore::new()).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[-1.0, 0.0, 1.0]);
    assert_eq!(g.get(b).unwrap().data(), &[1.0, 0.0, -1.0]);
}

pub fn segment_max_ties_route_to_lowest_index_and_empty_is_zero() {
    let mut t = Tape::new();
    let x = t.input(Tensor::from_rows(&[[2.0, 1.0], [2.0, 3.0], [-1.0, -2.0]]).unwrap());
    let m = t.segment_max(x, vec![0, 0, 2], 3).unwrap();
    assert_eq!(t.value(m).data(), &[2.0, 3.0, 0.0, 0.0, -1.0, -2.0]);
    let s = t.sum(m);
    let g = t.backward(s, &mut ParamStore::new()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
}

pub fn segment_max_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let rows = rng.gen_range(1..=8);
        let x = rand_tensor(&mut rng, rows, 5);
        let seg: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..3)).collect();
        let mut perm: Vec<usize> = (0..rows).collect();
        for i in (1..rows).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let xp = Tensor::from_rows(&perm.iter().map(|&p| x.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
        let segp: Vec<usize> = perm.iter().map(|&p| seg[p]).collect();
        let mut t = Tape::new();
        let (a, b) = (t.constant(x), t.constant(xp));
        let ma = t.segment_max(a, seg, 3).unwrap();
        let mb = t.segment_max(b, segp, 3).unwrap();
        assert_eq!(t.value(ma), t.value(mb));
    }
}

pub fn contract_violations() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(2, 3));
    let b = t.constant(Tensor::zeros(2, 3));
    match t.matmul(a, b) {
        Err(KernelError::ShapeMismatch { left, right, .. }) => {
            assert_eq!((left, right), ((2, 3), (2, 3)));
        }
        other => panic!("expected a shape mismatch, got {other:?}"),
    }
    let c = t.constant(Tensor::zeros(3, 2));
    let msg = t.add(a, c).unwrap_err().to_string();
    assert!(msg.contains("(2, 3)") && msg.contains("(3, 2)"), "{msg}");
    assert!(t.segment_sum(a, vec![0, 5], 2).is_err());
    assert!(t.gather_rows(a, vec![2]).is_err());
    assert!(t.softmax_xent(a, vec![0, 3]).is_err());

    let x = t.input(Tensor::scalar(1.0));
    let l = t.scale(x, 2.0);
    let mut store = ParamStore::new();
    t.backward(l, &mut store).unwrap();
    assert!(matches!(t.backward(l, &mut store), Err(KernelError::BackwardTwice)));
}

pub fn param_store_rejects_duplicates_and_accumulates() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::scalar(2.0)).unwrap();
    assert!(matches!(store.add("w", Tensor::scalar(1.0)), Err(KernelError::DuplicateParam(_))));
    for _ in 0..2 {
        let mut t = Tape::new();
        let w = t.param(&store, id);
        let l = t.mul(w, w).unwrap();
        t.backward(l, &mut store).unwrap();
    }
    assert_eq!(store.grad(id).item().unwrap(), 8.0);
    assert_eq!(store.grad(id).shape(), store.value(id).shape());
    store.zero_grads();
    assert_eq!(store.grad(id).item().unwrap(), 0.0);
}

pub fn adam_first_step_and_clipping() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::row_vector(vec![1.0, -1.0, 0.0])).unwrap();
    store.grad_mut(id).data_mut().copy_from_slice(&[0.5, -2.0, 0.0]);
    let mut adam = Adam::new(AdamConfig::default());
    let norm = adam.step(&mut store);
    assert_abs_diff_eq!(norm, (0.25f64 + 4.0).sqrt(), epsilon = 1e-12);
    // bias-corrected first step moves each weight by lr·g/(|g|+ε)
    let w = store.value(id).data();
    assert_abs_diff_eq!(w[0], 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8), epsilon = 1e-12);
    assert_abs_diff_eq!(w[1], -1.0 + 1e-3 * 2.0 / (2.0 + 1e-8), epsilon = 1e-12);
    assert_eq!(w[2], 0.0);

    // with clipping, the step direction is unchanged for a single step but
    // the moments see the clipped gradient
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::row_vector(vec![0.0, 0.0])).unwrap();
    store.grad_mut(id).data_mut().copy_from_slice(&[30.0, 40.0]);
    let cfg = AdamConfig {
        beta1: 0.0,
        beta2: 0.0,
        eps: 0.0,
        lr: 1.0,
        clip_norm: Some(5.0),
    };
    let mut adam = Adam::new(cfg);
    assert_eq!(adam.step(&mut store), 50.0);
    assert_eq!(store.value(id).data(), &[-1.0, -1.0]);
    assert_eq!(adam.steps(), 1);
}

pub fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    store.add_uniform("embed", 5, 4, 0.1, &mut rng).unwrap();
    Gru::new(&mut store, "gru", 4, 0.1, &mut rng).unwrap();
    store.add("odd", Tensor::zeros(0, 4)).unwrap();
    let header = CheckpointHeader {
        dim: 4,
        vocab_size: 5,
        metadata: "{\"t\":8}".into(),
    };
    let mut buf = Vec::new();
    save_checkpoint(&mut buf, &header, &store).unwrap();
    let (h2, s2) = load_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(h2, header);
    assert_eq!(s2.len(), store.len());
    for id in store.ids() {
        assert_eq!(s2.name(id), store.name(id));
        let a = store.value(id);
        let b = s2.value(id);
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*y, *x as f32 as f64);
        }
    }
    // a second save of the loaded store is byte-identical
    let mut again = Vec::new();
    save_checkpoint(&mut again, &h2, &s2).unwrap();
    assert_eq!(again, buf);

    assert!(load_checkpoint(&buf[..buf.len() - 3]).is_err());
    let mut bad = buf.clone();
    bad[4] = 99;
    assert!(matches!(load_checkpoint(bad.as_slice()), Err(KernelError::Format(_))));
    let mut extra = buf.clone();
    extra.push(0);
    assert!(load_checkpoint(extra.as_slice()).is_err());
}

pub fn forward_is_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "g", 8, 0.1, &mut rng).unwrap();
        let mut t = Tape::new();
        let x = t.constant(rand_tensor(&mut rng, 50, 8));
        let mut h = t.constant(rand_tensor(&mut rng, 50, 8));
        let v = gru.bind(&mut t, &store);
        for _ in 0..8 {
            h = v.cell(&mut t, x, h).unwrap();
        }
        t.value(h).clone()
    };
    assert_eq!(run(), run());
}
