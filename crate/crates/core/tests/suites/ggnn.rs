use std::collections::{BTreeMap, VecDeque};

use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use typespace::diffkernel::{ParamStore, Tape, Tensor};
use typespace::ggnn::{GnnConfig, GraphBatch, HeadConfig, Model, Vocabulary};
use typespace::pygraph::{
    extract, subtokenize, CodeGraph, EdgeLabel, ExtractOptions, Node, NodeCategory, SymbolInfo,
    SymbolKind,
};

const FIG3: &str = "foo=get_foo(i, i+1)\n";

fn graph(src: &str) -> CodeGraph {
    extract("t.py", src, &ExtractOptions::default()).unwrap().graph
}

fn small_config(dim: usize, steps: usize) -> GnnConfig {
    GnnConfig {
        dim,
        steps,
        ..GnnConfig::default()
    }
}

fn vocab_of(graphs: &[&CodeGraph]) -> Vocabulary {
    Vocabulary::build(graphs.iter().copied(), 1, 10_000)
}

fn randomize(model: &mut Model, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.store.ids().collect::<Vec<_>>() {
        for v in model.store.value_mut(id).data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

fn set(model: &mut Model, name: &str, values: &[f64]) {
    let id = model.param(name).unwrap();
    model.store.value_mut(id).data_mut().copy_from_slice(values);
}

/// Plain-loop encoder used as an oracle for the tape implementation.
fn reference_states(model: &Model, g: &CodeGraph) -> Vec<Vec<f64>> {
    let d = model.dim();
    let p = |name: &str| model.store.value(model.param(name).unwrap()).clone();
    let embed = p("embed");
    let mut h: Vec<Vec<f64>> = g
        .nodes
        .iter()
        .map(|n| {
            let subs = subtokenize(&n.label);
            let ids: Vec<usize> = if subs.is_empty() {
                vec![0]
            } else {
                subs.iter().map(|s| model.vocab.lookup(s)).collect()
            };
            let mut v = vec![0.0; d];
            for &id in &ids {
                for j in 0..d {
                    v[j] += embed.get(id, j);
                }
            }
            v.iter().map(|x| x / ids.len() as f64).collect()
        })
        .collect();
    let matvec = |m: &Tensor, x: &[f64]| -> Vec<f64> {
        (0..m.rows()).map(|i| (0..m.cols()).map(|j| m.get(i, j) * x[j]).sum()).collect()
    };
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    for _ in 0..model.config.steps {
        let mut msgs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); g.nodes.len()];
        for label in model.config.active_labels() {
            let fwd = p(&format!("edge.{label}"));
            for &(s, t) in g.edges_of(label) {
                msgs[s].push(matvec(&fwd, &h[t]));
                if model.config.use_inverse_edges {
                    let inv = p(&format!("edge.{label}.inv"));
                    msgs[t].push(matvec(&inv, &h[s]));
                }
            }
        }
        let next: Vec<Vec<f64>> = (0..g.nodes.len())
            .map(|i| {
                let x: Vec<f64> = (0..d)
                    .map(|j| msgs[i].iter().map(|m| m[j]).fold(f64::NEG_INFINITY, f64::max))
                    .map(|v| if v == f64::NEG_INFINITY { 0.0 } else { v })
                    .collect();
                let hi = &h[i];
                let gate = |w: &str, u: &str, b: &str, hin: &[f64]| -> Vec<f64> {
                    let a = matvec(&p(w), &x);
                    let c = matvec(&p(u), hin);
                    let bb = p(b);
                    (0..d).map(|j| a[j] + c[j] + bb.get(0, j)).collect()
                };
                let z: Vec<f64> = gate("gru.w_z", "gru.u_z", "gru.b_z", hi).into_iter().map(sig).collect();
                let r: Vec<f64> = gate("gru.w_r", "gru.u_r", "gru.b_r", hi).into_iter().map(sig).collect();
                let rh: Vec<f64> = (0..d).map(|j| r[j] * hi[j]).collect();
                let c: Vec<f64> = gate("gru.w_h", "gru.u_h", "gru.b_h", &rh).into_iter().map(f64::tanh).collect();
                (0..d).map(|j| (1.0 - z[j]) * hi[j] + z[j] * c[j]).collect()
            })
            .collect();
        h = next;
    }
    h
}

fn assert_states_close(a: &Tensor, b: &[Vec<f64>], tol: f64) {
    assert_eq!(a.rows(), b.len());
    for (i, row) in b.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert_abs_diff_eq!(a.get(i, j), *v, epsilon = tol);
        }
    }
}

pub fn initial_states_are_subtoken_means() {
    let g = graph("numNodes = x\nzzq_wwv = 0\n");
    let vocab = Vocabulary::from_tokens(["num", "nodes", "x"].map(String::from));
    let model = Model::new(small_config(4, 1), vocab, HeadConfig::default(), 1).unwrap();
    let batch = GraphBatch::new(&[&g], &model.vocab, &model.config);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let h0 = model.init_node_states(&mut tape, &bound, &batch).unwrap();
    let h0 = tape.value(h0).clone();
    let embed = model.store.value(model.param("embed").unwrap());
    let row = |label: &str| g.nodes.iter().position(|n| n.label == label).unwrap();
    let e = |k: usize| embed.row(k).to_vec();
    assert_eq!(h0.row(row("x")), e(model.vocab.lookup("x")).as_slice());
    let num = e(model.vocab.lookup("num"));
    let nodes = e(model.vocab.lookup("nodes"));
    let mean: Vec<f64> = num.iter().zip(&nodes).map(|(a, b)| (a + b) / 2.0).collect();
    for (a, b) in h0.row(row("numNodes")).iter().zip(&mean) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
    }
    assert_eq!(h0.row(row("zzq_wwv")), e(Vocabulary::UNK).as_slice());
}

pub fn matches_reference_encoder() {
    for (k, src) in [FIG3, "def f(a, b):\n    c = a + b\n    return c\n"].iter().enumerate() {
        let g = graph(src);
        let mut model = Model::new(small_config(5, 3), vocab_of(&[&g]), HeadConfig::default(), 2).unwrap();
        randomize(&mut model, k as u64 + 10, 0.6);
        let got = model.node_states(&g).unwrap();
        assert_states_close(&got, &reference_states(&model, &g), 1e-12);
    }
}

fn two_node_graph() -> CodeGraph {
    let mut edges = BTreeMap::new();
    edges.insert(EdgeLabel::NextToken, vec![(0, 1)]);
    CodeGraph {
        file_id: "two".into(),
        nodes: vec![
            Node::new(NodeCategory::Token, "a"),
            Node::new(NodeCategory::Symbol, "b"),
        ],
        edges,
        symbols: vec![SymbolInfo {
            node: 1,
            kind: SymbolKind::Variable,
            name: "b".into(),
            annotation: None,
        }],
    }
}

pub fn two_node_scalar_hand_computation() {
    let g = two_node_graph();
    let vocab = Vocabulary::from_tokens(["a", "b"].map(String::from));
    let mut model = Model::new(small_config(1, 1), vocab, HeadConfig::default(), 0).unwrap();
    set(&mut model, "embed", &[0.0, 0.5, -1.0]);
    set(&mut model, "edge.NEXT_TOKEN", &[2.0]);
    set(&mut model, "edge.NEXT_TOKEN.inv", &[-0.5]);
    for (name, v) in [
        ("w_z", 0.5),
        ("w_r", 0.2),
        ("w_h", -0.7),
        ("u_z", -0.3),
        ("u_r", 0.4),
        ("u_h", 0.6),
        ("b_z", 0.1),
        ("b_r", -0.1),
        ("b_h", 0.05),
    ] {
        set(&mut model, &format!("gru.{name}"), &[v]);
    }
    let h = model.node_states(&g).unwrap();
    // node 0 receives 2.0·h₁ = -2.0; node 1 receives -0.5·h₀ = -0.25
    assert_abs_diff_eq!(h.get(0, 0), 0.6084174775561212, epsilon = 1e-12);
    assert_abs_diff_eq!(h.get(1, 0), -0.4285648843606025, epsilon = 1e-12);
    let r = model.symbol_embeddings(&g).unwrap();
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].vector, vec![h.get(1, 0)]);
}

pub fn edgeless_graph_runs_gru_on_zero_messages() {
    let mut g = two_node_graph();
    g.edges.clear();
    let vocab = Vocabulary::from_tokens(["a", "b"].map(String::from));
    let mut model = Model::new(small_config(3, 4), vocab, HeadConfig::default(), 4).unwrap();
    randomize(&mut model, 5, 0.5);
    let got = model.node_states(&g).unwrap();
    assert_states_close(&got, &reference_states(&model, &g), 1e-12);
    // same trajectory as four explicit cell applications with x = 0
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let batch = GraphBatch::new(&[&g], &model.vocab, &model.config);
    let mut h = model.init_node_states(&mut tape, &bound, &batch).unwrap();
    let gru = typespace::diffkernel::Gru::from_store(&model.store, "gru").unwrap();
    let vars = gru.bind(&mut tape, &model.store);
    let zero = tape.constant(Tensor::zeros(2, 3));
    for _ in 0..4 {
        h = vars.cell(&mut tape, zero, h).unwrap();
    }
    assert_eq!(tape.value(h), &got);
}

fn permuted(g: &CodeGraph, perm: &[usize]) -> CodeGraph {
    // perm[old] = new
    let mut nodes = vec![Node::new(NodeCategory::Token, ""); g.nodes.len()];
    for (old, n) in g.nodes.iter().enumerate() {
        nodes[perm[old]] = n.clone();
    }
    let edges = g
        .edges
        .iter()
        .map(|(l, list)| {
            let mut v: Vec<(usize, usize)> = list.iter().map(|&(s, d)| (perm[s], perm[d])).collect();
            v.sort_unstable();
            (*l, v)
        })
        .collect();
    let symbols = g
        .symbols
        .iter()
        .map(|s| SymbolInfo {
            node: perm[s.node],
            ..s.clone()
        })
        .collect();
    CodeGraph {
        file_id: g.file_id.clone(),
        nodes,
        edges,
        symbols,
    }
}

pub fn node_permutation_reindexes_states() {
    let g = graph(FIG3);
    let mut model = Model::new(small_config(6, 8), vocab_of(&[&g]), HeadConfig::default(), 3).unwrap();
    randomize(&mut model, 8, 0.4);
    let base = model.node_states(&g).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..5 {
        let mut perm: Vec<usize> = (0..g.nodes.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pg = permuted(&g, &perm);
        let ps = model.node_states(&pg).unwrap();
        for old in 0..g.nodes.len() {
            for j in 0..6 {
                assert_abs_diff_eq!(ps.get(perm[old], j), base.get(old, j), epsilon = 1e-12);
            }
        }
        let a = model.symbol_embeddings(&g).unwrap();
        let b = model.symbol_embeddings(&pg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.vector.iter().zip(&y.vector) {
                assert_abs_diff_eq!(*p, *q, epsilon = 1e-12);
            }
        }
    }
}

pub fn edge_order_does_not_change_states() {
    let g = graph("def f(a, b):\n    if a:\n        b = a\n    return b\n");
    let mut model = Model::new(small_config(6, 8), vocab_of(&[&g]), HeadConfig::default(), 3).unwrap();
    randomize(&mut model, 12, 0.4);
    let base = model.node_states(&g).unwrap();
    // the graph keeps edges sorted, so shuffle inside a raw batch instead
    let mut shuffled = g.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for list in shuffled.edges.values_mut() {
        for i in (1..list.len()).rev() {
            list.swap(i, rng.gen_range(0..=i));
        }
    }
    assert_ne!(shuffled.edges, g.edges);
    assert_eq!(model.node_states(&shuffled).unwrap(), base);
}

pub fn symbol_readout() {
    let empty = graph("");
    let model = Model::new(small_config(4, 2), vocab_of(&[&empty]), HeadConfig::default(), 1).unwrap();
    assert!(model.symbol_embeddings(&empty).unwrap().is_empty());

    let g = graph(FIG3);
    let model = Model::new(small_config(4, 2), vocab_of(&[&g]), HeadConfig::default(), 1).unwrap();
    let r = model.symbol_embeddings(&g).unwrap();
    let names: Vec<&str> = r.iter().map(|e| g.symbols[e.symbol].name.as_str()).collect();
    assert_eq!(names, ["foo", "get_foo", "i"]);
    let states = model.node_states(&g).unwrap();
    for e in &r {
        assert_eq!(e.vector.len(), 4);
        assert_eq!(e.vector.as_slice(), states.row(g.symbols[e.symbol].node));
    }
}

fn undirected_distances(g: &CodeGraph, from: usize) -> Vec<usize> {
    let mut adj = vec![Vec::new(); g.nodes.len()];
    for list in g.edges.values() {
        for &(s, d) in list {
            adj[s].push(d);
            adj[d].push(s);
        }
    }
    let mut dist = vec![usize::MAX; g.nodes.len()];
    dist[from] = 0;
    let mut q = VecDeque::from([from]);
    while let Some(u) = q.pop_front() {
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                q.push_back(v);
            }
        }
    }
    dist
}

pub fn relabelling_a_distant_constant_leaves_far_symbols_unchanged() {
    let mut src = String::from("limit = 7\n");
    for k in 0..12 {
        src.push_str(&format!("v{k} = w{k} + 1\n"));
    }
    src.push_str("tail = 3\n");
    let g = graph(&src);
    let seven = g.nodes.iter().position(|n| n.label == "7").unwrap();
    let mut changed = g.clone();
    changed.nodes[seven].label = "3".into();
    let mut model = Model::new(small_config(4, 3), vocab_of(&[&g]), HeadConfig::default(), 6).unwrap();
    randomize(&mut model, 6, 0.5);
    let a = model.symbol_embeddings(&g).unwrap();
    let b = model.symbol_embeddings(&changed).unwrap();
    let dist = undirected_distances(&g, seven);
    let mut far = 0;
    let mut near_changed = false;
    for (x, y) in a.iter().zip(&b) {
        if dist[g.symbols[x.symbol].node] > model.config.steps {
            assert_eq!(x.vector, y.vector, "{}", g.symbols[x.symbol].name);
            far += 1;
        } else if x.vector != y.vector {
            near_changed = true;
        }
    }
    assert!(far > 5);
    assert!(near_changed);
}

pub fn without_edges_embeddings_depend_only_on_names() {
    let a = graph("count = 1\nitems = [count]\n");
    let b = graph("def g(count):\n    return count * 2\n");
    let vocab = vocab_of(&[&a, &b]);
    let config = small_config(4, 3).without(&EdgeLabel::ALL);
    assert!(config.edge_keys().is_empty());
    let mut model = Model::new(config, vocab, HeadConfig::default(), 7).unwrap();
    randomize(&mut model, 7, 0.5);
    let ea = model.symbol_embeddings(&a).unwrap();
    let eb = model.symbol_embeddings(&b).unwrap();
    let find = |g: &CodeGraph, e: &[typespace::ggnn::TypeEmbedding], name: &str| {
        e.iter().find(|x| g.symbols[x.symbol].name == name).unwrap().vector.clone()
    };
    assert_eq!(find(&a, &ea, "count"), find(&b, &eb, "count"));
    assert_ne!(find(&a, &ea, "count"), find(&a, &ea, "items"));
}

pub fn full_model_gradient_check() {
    // five nodes, every label present, D = 3, T = 2
    let mut edges = BTreeMap::new();
    for (k, label) in EdgeLabel::ALL.iter().enumerate() {
        edges.insert(*label, vec![(k % 5, (k * 2 + 1) % 5)]);
    }
    let g = CodeGraph {
        file_id: "five".into(),
        nodes: ["alpha", "beta_gamma", "delta", "alpha", "gammaDelta"]
            .iter()
            .enumerate()
            .map(|(i, l)| Node::new(if i == 4 { NodeCategory::Symbol } else { NodeCategory::Token }, *l))
            .collect(),
        edges,
        symbols: vec![SymbolInfo {
            node: 4,
            kind: SymbolKind::Variable,
            name: "gammaDelta".into(),
            annotation: None,
        }],
    };
    let vocab = vocab_of(&[&g]);
    let mut model = Model::new(small_config(3, 2), vocab, HeadConfig::default(), 1).unwrap();
    randomize(&mut model, 31, 0.8);
    let batch = GraphBatch::new(&[&g], &model.vocab, &model.config);
    let loss_of = |model: &Model, grads: Option<&mut ParamStore>| -> f64 {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let h0 = model.init_node_states(&mut tape, &bound, &batch).unwrap();
        let h = model.propagate(&mut tape, &bound, &batch, h0).unwrap();
        let w = tape.constant(Tensor::new(5, 3, (0..15).map(|k| 0.3 + 0.1 * k as f64).collect()).unwrap());
        let p = tape.mul(h, w).unwrap();
        let l = tape.sum(p);
        let v = tape.value(l).item().unwrap();
        if let Some(store) = grads {
            tape.backward(l, store).unwrap();
        }
        v
    };
    let mut grads = model.store.clone();
    grads.zero_grads();
    loss_of(&model, Some(&mut grads));
    let eps = 1e-6;
    for id in model.store.ids().collect::<Vec<_>>() {
        let analytic = grads.grad(id).data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let orig = model.store.value(id).data()[j];
            model.store.value_mut(id).data_mut()[j] = orig + eps;
            let fp = loss_of(&model, None);
            model.store.value_mut(id).data_mut()[j] = orig - eps;
            let fm = loss_of(&model, None);
            model.store.value_mut(id).data_mut()[j] = orig;
            numeric[j] = (fp - fm) / (2.0 * eps);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = analytic.iter().chain(&numeric).map(|a| a * a).sum::<f64>().sqrt();
        let rel = if norm < 1e-12 { 0.0 } else { diff / norm };
        assert!(rel < 1e-4, "{}: {rel}", model.store.name(id));
    }
}

pub fn batching_matches_single_graph_encoding() {
    let gs = [graph(FIG3), graph("def f(a):\n    return a\n"), graph("")];
    let refs: Vec<&CodeGraph> = gs.iter().collect();
    let mut model = Model::new(small_config(4, 3), vocab_of(&refs), HeadConfig::default(), 9).unwrap();
    randomize(&mut model, 9, 0.5);
    let batch = GraphBatch::new(&refs, &model.vocab, &model.config);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let r = model.encode(&mut tape, &bound, &batch).unwrap();
    let r = tape.value(r).clone();
    assert_eq!(batch.symbols.len(), r.rows());
    for (row, &(gi, si)) in batch.symbols.iter().enumerate() {
        let single = model.symbol_embeddings(&gs[gi]).unwrap();
        for (a, b) in r.row(row).iter().zip(&single[si].vector) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }
}

fn label_graph(labels: &[&str]) -> CodeGraph {
    CodeGraph {
        file_id: "v".into(),
        nodes: labels.iter().map(|l| Node::new(NodeCategory::Token, *l)).collect(),
        ..Default::default()
    }
}

pub fn vocabulary_thresholds() {
    let a = label_graph(&["alpha", "beta", "alpha", "(", "("]);
    let b = label_graph(&["beta_gamma", "alphaDelta"]);
    let v = Vocabulary::build([&a, &b], 2, 10_000);
    assert_eq!(v.token(0), Vocabulary::UNK_TOKEN);
    // alpha 3, beta 2, ( 2, gamma 1, delta 1; ordered by count then text
    let tokens: Vec<&str> = (0..v.len()).map(|i| v.token(i)).collect();
    assert_eq!(tokens, [Vocabulary::UNK_TOKEN, "alpha", "(", "beta"]);
    assert_eq!(v.lookup("gamma"), Vocabulary::UNK);
    let capped = Vocabulary::build([&a, &b], 1, 2);
    let tokens: Vec<&str> = (0..capped.len()).map(|i| capped.token(i)).collect();
    assert_eq!(tokens, [Vocabulary::UNK_TOKEN, "alpha", "("]);
}

pub fn checkpoint_round_trip_preserves_embeddings() {
    let g = graph(FIG3);
    let heads = HeadConfig {
        classes: vec!["<unk>".into(), "int".into()],
        projection: true,
    };
    let mut model = Model::new(small_config(4, 2), vocab_of(&[&g]), heads, 5).unwrap();
    model.extra.insert("loss".into(), "typilus".into());
    let mut buf = Vec::new();
    model.save(&mut buf).unwrap();
    let loaded = Model::load(buf.as_slice()).unwrap();
    model.round_to_f32();
    assert_eq!(loaded.symbol_embeddings(&g).unwrap(), model.symbol_embeddings(&g).unwrap());
    assert_eq!(loaded.heads, model.heads);
    assert_eq!(loaded.extra["loss"], "typilus");
    assert_eq!(loaded.vocab, model.vocab);
    let mut again = Vec::new();
    loaded.save(&mut again).unwrap();
    assert_eq!(again, buf);
}
