use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use approx::assert_abs_diff_eq;

use typespace::harness::{
    emitted_at, evaluate, pr_curve, split_corpus, train, type_counts, write_report, CheckOutcome,
    CheckerHook, Control, EvalRecord, HarnessError, Metrics, Predictor, RunConfig, RARE_CUTOFF,
};
use typespace::objective::LossKind;
use typespace::pygraph::{extract, extract_dir, CodeGraph, EdgeLabel, ExtractOptions, SymbolKind};
use typespace::typeexpr::{parse_type, TypeExpr};
use typespace::typemap::{PredictionConfig, Provenance, TypeMap};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn ty(s: &str) -> TypeExpr {
    parse_type(s).unwrap()
}

fn graph(id: &str, src: &str) -> CodeGraph {
    extract(id, src, &ExtractOptions::default()).unwrap().graph
}

fn corpus() -> Vec<CodeGraph> {
    extract_dir(&fixtures().join("corpus"), &ExtractOptions::default()).unwrap().graphs
}

pub fn split_proportions_dedup_and_determinism() {
    let files: Vec<CodeGraph> = (0..10).map(|i| graph(&format!("f{i}.py"), &format!("v{i}: int = {i}\n"))).collect();
    let s = split_corpus(files.clone(), 3);
    assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (7, 1, 2));
    let ids = |gs: &[CodeGraph]| gs.iter().map(|g| g.file_id.clone()).collect::<Vec<_>>();
    let again = split_corpus(files.iter().rev().cloned().collect(), 3);
    assert_eq!(ids(&s.train), ids(&again.train));
    assert_eq!(ids(&s.test), ids(&again.test));
    let mut all: Vec<String> = [ids(&s.train), ids(&s.valid), ids(&s.test)].concat();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 10);
    assert_ne!(ids(&split_corpus(files.clone(), 4).train), ids(&s.train));

    let mut dup = files.clone();
    dup.push(graph("copy_of_f0.py", "v0: int = 0\n"));
    let d = split_corpus(dup, 3);
    assert_eq!(d.train.len() + d.valid.len() + d.test.len(), 10);

    let small = split_corpus(files[..3].to_vec(), 0);
    assert_eq!((small.train.len(), small.valid.len(), small.test.len()), (2, 0, 1));
}

pub fn config_parsing() {
    let text = "# run\ntrain = data/train.jsonl\nvalid = data/valid.jsonl\noutput = out/model.ckpt\n\
                dim = 16\nsteps = 3\nloss = space\nmargin = 1.5\nlambda = 0.5\nepochs = 7  # short\n\
                seed = 11\nlr = 0.01\nno_edge = NEXT_LEXICAL_USE, NEXT_MAY_USE\nk = 5\np = 1\nclip = none\n";
    let c = RunConfig::parse(text, Path::new("/base")).unwrap();
    assert_eq!(c.train, Path::new("/base/data/train.jsonl"));
    assert_eq!(c.valid.as_deref(), Some(Path::new("/base/data/valid.jsonl")));
    assert_eq!((c.gnn.dim, c.gnn.steps), (16, 3));
    assert_eq!(c.objective.loss, LossKind::Space);
    assert_eq!((c.objective.margin, c.objective.lambda, c.objective.epochs, c.objective.seed), (1.5, 0.5, 7, 11));
    assert_eq!(c.clip, None);
    assert_eq!(c.prediction, PredictionConfig { k: 5, p: 1.0 });
    let labels = c.gnn.active_labels();
    assert!(!labels.contains(&EdgeLabel::NextLexicalUse) && !labels.contains(&EdgeLabel::NextMayUse));
    assert_eq!(labels.len(), 6);

    for bad in ["dim = x\n", "colour = red\n", "loss = triplet\n", "just words\n", "k = 0\n", "no_edge = FOO\n"] {
        let e = RunConfig::parse(bad, Path::new(".")).unwrap_err();
        assert_eq!(e.exit_code(), 1, "{bad}: {e}");
    }
}

fn record(kind: SymbolKind, truth: &str, pred: Option<&str>, conf: f64, flags: (bool, bool, bool), rare: bool) -> EvalRecord {
    EvalRecord {
        file_id: "f.py".into(),
        symbol: 0,
        name: "s".into(),
        kind,
        truth: ty(truth),
        predicted: pred.map(ty),
        confidence: conf,
        exact: flags.0,
        up_to_parametric: flags.1,
        neutral: flags.2,
        rare,
    }
}

pub fn metrics_count_a_fabricated_table() {
    use SymbolKind::*;
    let t = (true, true, true);
    let recs = vec![
        record(Variable, "int", Some("int"), 0.9, t, false),
        record(Variable, "List[int]", Some("List[str]"), 0.8, (false, true, false), false),
        record(Variable, "str", Some("int"), 0.4, (false, false, false), false),
        record(Parameter, "int", Some("int"), 0.7, t, false),
        record(Parameter, "bool", Some("int"), 0.6, (false, false, true), false),
        record(Parameter, "Foo", Some("Bar"), 0.3, (false, false, false), true),
        record(Parameter, "Foo", Some("Foo"), 0.95, t, true),
        record(Return, "float", Some("float"), 0.5, t, false),
        record(Return, "Dict[str, int]", Some("Dict"), 0.2, (false, true, true), true),
        record(Return, "Baz", None, 0.0, (false, false, false), true),
    ];
    let m = Metrics::from_records(&recs);
    assert_eq!((m.all.n, m.all.exact, m.all.up_to_parametric, m.all.neutral), (10, 4, 6, 6));
    assert_eq!((m.common.n, m.common.exact, m.common.up_to_parametric, m.common.neutral), (6, 3, 4, 4));
    assert_eq!((m.rare.n, m.rare.exact, m.rare.up_to_parametric, m.rare.neutral), (4, 1, 2, 2));
    assert_eq!(m.by_kind[&Variable].n, 3);
    assert_eq!(m.by_kind[&Parameter].neutral, 3);
    assert_eq!(m.by_kind[&Return].exact, 1);
    assert_abs_diff_eq!(m.all.exact_rate(), 0.4);
    let text = m.to_text();
    assert!(text.contains("all.exact = 0.400000\n"));
    assert!(text.contains("rare.symbols = 4\n"));

    // thresholds 0.5 and 0.75 split the records into two bands
    let curve = pr_curve(&recs, &[0.75, 0.0, 0.5, 0.99]);
    let pts: Vec<(f64, usize, f64, Option<f64>)> =
        curve.iter().map(|p| (p.threshold, p.emitted, p.recall, p.precision)).collect();
    assert_eq!(pts[0], (0.0, 9, 0.9, Some(6.0 / 9.0)));
    assert_eq!(pts[1], (0.5, 6, 0.6, Some(5.0 / 6.0)));
    assert_eq!(pts[2], (0.75, 3, 0.3, Some(2.0 / 3.0)));
    assert_eq!(pts[3], (0.99, 0, 0.0, None));
}

/// Predictor over a hand-placed map: each symbol's own embedding is a
/// marker carrying the type chosen for its name.
fn map_predictor(graphs: &[CodeGraph], types: &[(&str, &str)]) -> Predictor {
    use typespace::ggnn::{GnnConfig, HeadConfig, Model, Vocabulary};
    let vocab = Vocabulary::build(graphs.iter(), 1, 10_000);
    let model = Model::new(GnnConfig { dim: 8, steps: 2, ..GnnConfig::default() }, vocab, HeadConfig::default(), 3).unwrap();
    let mut map = TypeMap::new(8);
    for g in graphs {
        for e in model.symbol_embeddings(g).unwrap() {
            let name = &g.symbols[e.symbol].name;
            let t = types.iter().find(|(n, _)| n == name).unwrap().1;
            map.add_binding(&e.vector, ty(t), Provenance::Manual).unwrap();
        }
    }
    Predictor::Map { model, map, config: PredictionConfig { k: 1, p: 2.0 } }
}

pub fn evaluate_flags_and_invariants() {
    let test = vec![graph("a.py", "def f(xs: List[int], n: int) -> Dict[str, int]:\n    return {}\n")];
    let counts = type_counts(&corpus());
    // every symbol is its own nearest marker with a chosen type
    let types = [("xs", "List"), ("n", "bool"), ("f", "Dict[str, int]")];
    let p = map_predictor(&test, &types);
    let recs = evaluate(&p, &test, &counts).unwrap();
    assert_eq!(recs.len(), 3);
    let by_name: BTreeMap<&str, &EvalRecord> = recs.iter().map(|r| (r.name.as_str(), r)).collect();
    let xs = by_name["xs"];
    assert_eq!(xs.predicted, Some(ty("List")));
    assert!(!xs.exact && xs.up_to_parametric);
    assert!(!by_name["n"].exact && !by_name["n"].neutral);
    let f = by_name["f"];
    assert!(f.exact && f.up_to_parametric && f.neutral);
    assert_eq!(f.kind, SymbolKind::Return);
    for r in &recs {
        assert!(!r.exact || r.neutral);
        assert_eq!(r.rare, counts.get(&r.truth).copied().unwrap_or(0) < RARE_CUTOFF);
    }
    // an empty map gives no predictions rather than an error
    let empty = Predictor::Map {
        model: p.model().clone(),
        map: TypeMap::new(8),
        config: PredictionConfig::default(),
    };
    let recs = evaluate(&empty, &test, &counts).unwrap();
    assert!(recs.iter().all(|r| r.predicted.is_none() && !r.neutral && r.confidence == 0.0));
}

pub fn report_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let recs = vec![record(SymbolKind::Variable, "int", Some("int"), 0.8, (true, true, true), false)];
    let m = write_report(dir.path(), &recs, &[0.0, 0.9]).unwrap();
    assert_eq!(m.all.n, 1);
    let pr = std::fs::read_to_string(dir.path().join("pr_curve.csv")).unwrap();
    assert_eq!(pr, "threshold,emitted,recall,precision\n0.0000,1,1.000000,1.000000\n0.9000,0,0.000000,\n");
    let rec = std::fs::read_to_string(dir.path().join("records.csv")).unwrap();
    assert_eq!(rec.lines().nth(1).unwrap(), "f.py,0,s,variable,int,int,0.800000,true,true,true,false");
    assert!(dir.path().join("metrics.txt").exists());
}

fn stub_checker() -> Vec<String> {
    vec!["python3".into(), fixtures().join("checker/stub_checker.py").to_string_lossy().into_owned()]
}

pub fn checker_hook_outcomes() {
    let src = std::fs::read_to_string(fixtures().join("checker/sample.py")).unwrap();
    let ex = extract("sample.py", &src, &ExtractOptions::default()).unwrap();
    let site = |name: &str| {
        let i = ex.graph.symbols.iter().position(|s| s.name == name).unwrap();
        ex.sites[i].clone().unwrap()
    };
    let y = site("y");
    assert_eq!(CheckerHook::unconfigured().check(&src, &y, &ty("int")), CheckOutcome::Skip("no checker configured".into()));

    let hook = CheckerHook::new(stub_checker());
    assert_eq!(hook.check(&src, &y, &ty("int")), CheckOutcome::Accept);
    assert_eq!(hook.check(&src, &y, &ty("str")), CheckOutcome::Reject);
    let count = site("count");
    assert_eq!(hook.check(&src, &count, &ty("int")), CheckOutcome::Accept);
    assert_eq!(hook.check(&src, &count, &ty("str")), CheckOutcome::Reject);
    assert_eq!(hook.check(&src, &site("scale"), &ty("float")), CheckOutcome::Accept);
    assert_eq!(hook.check(&src, &site("factor"), &ty("bytes")), CheckOutcome::Reject);

    let slow = CheckerHook::new([stub_checker(), vec!["--sleep".into(), "5".into(), "{file}".into()]].concat())
        .with_timeout(Duration::from_millis(300));
    assert!(matches!(slow.check(&src, &y, &ty("int")), CheckOutcome::Skip(m) if m.contains("timed out")));
    let broken = CheckerHook::new(vec!["/nonexistent/checker".into()]);
    assert!(matches!(broken.check(&src, &y, &ty("int")), CheckOutcome::Skip(_)));
    let crash = CheckerHook::new(vec!["python3".into(), "-c".into(), "import sys; sys.exit(7)".into()]);
    assert!(matches!(crash.check(&src, &y, &ty("int")), CheckOutcome::Skip(m) if m.contains("7")));
}

fn small_config(loss: LossKind, epochs: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.gnn.dim = 12;
    c.gnn.steps = 2;
    c.objective.loss = loss;
    c.objective.epochs = epochs;
    c.objective.batch_symbols = 48;
    c.objective.seed = 5;
    c.objective.class_min_count = 3;
    c.lr = 3e-3;
    c
}

pub fn zero_lambda_reproduces_the_space_loss_trace() {
    let graphs = corpus();
    let mut typ = small_config(LossKind::Typilus, 3);
    typ.objective.lambda = 0.0;
    let a = train(&typ, &graphs, &[], |_, _| Control::Continue).unwrap();
    let b = train(&small_config(LossKind::Space, 3), &graphs, &[], |_, _| Control::Continue).unwrap();
    let trace = |o: &typespace::harness::TrainOutcome| o.log.iter().map(|e| (e.total, e.space)).collect::<Vec<_>>();
    assert_eq!(trace(&a), trace(&b));
    assert!(a.log.iter().all(|e| e.class.is_none()));
    let ids: Vec<_> = a.model.store.ids().collect();
    assert_eq!(ids.len(), b.model.store.ids().count());
    for id in ids {
        let name = a.model.store.name(id);
        assert_eq!(a.model.store.value(id), b.model.store.value(b.model.store.id(name).unwrap()), "{name}");
    }
}

pub fn class_only_starts_near_log_c() {
    let graphs = corpus();
    let out = train(&small_config(LossKind::Class, 1), &graphs, &[], |_, _| Control::Continue).unwrap();
    let c = out.model.heads.classes.len() as f64;
    assert!(c >= 4.0);
    let ln_c = c.ln();
    assert!((out.initial_loss - ln_c).abs() < 0.1 * ln_c, "{} vs {ln_c}", out.initial_loss);
    assert!(out.model.store.id("head.proto").is_ok());
}

pub fn training_keeps_the_best_validation_epoch_and_drops_heads() {
    let graphs = corpus();
    let (tr, va) = graphs.split_at(16);
    let mut cfg = small_config(LossKind::Typilus, 4);
    cfg.eval_every = 1;
    let mut seen = 0;
    let out = train(&cfg, tr, va, |e, _| {
        seen += 1;
        assert!(e.valid_exact.is_some());
        Control::Continue
    })
    .unwrap();
    assert_eq!(seen, 4);
    let best = out.log.iter().map(|e| e.valid_exact.unwrap()).fold(f64::MIN, f64::max);
    assert_eq!(out.best_valid, Some(best));
    assert_eq!(out.log[out.best_epoch].valid_exact, Some(best));
    assert!(out.log[..out.best_epoch].iter().all(|e| e.valid_exact.unwrap() < best));
    assert!(out.model.store.id("head.proj").is_err() && out.model.store.id("head.proto").is_err());

    let stopped = train(&cfg, tr, va, |e, _| if e.epoch == 1 { Control::Stop } else { Control::Continue }).unwrap();
    assert_eq!(stopped.log.len(), 2);
}

pub fn divergence_and_empty_corpus_errors() {
    let graphs = corpus();
    let mut cfg = small_config(LossKind::Typilus, 3);
    cfg.lr = 1e300;
    cfg.clip = None;
    let e = train(&cfg, &graphs, &[], |_, _| Control::Continue).unwrap_err();
    assert!(matches!(e, HarnessError::Divergence { .. }), "{e}");
    assert_eq!(e.exit_code(), 3);

    let bare = vec![graph("a.py", "x = 1\n")];
    let e = train(&small_config(LossKind::Space, 1), &bare, &[], |_, _| Control::Continue).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

pub fn emitted_sets_shrink_as_the_threshold_rises() {
    let graphs = corpus();
    let (tr, te) = graphs.split_at(15);
    let out = train(&small_config(LossKind::Typilus, 2), tr, &[], |_, _| Control::Continue).unwrap();
    let map = typespace::typemap::build_map(&out.model, tr).unwrap();
    let p = Predictor::Map { model: out.model, map, config: PredictionConfig::default() };
    let recs = evaluate(&p, te, &type_counts(tr)).unwrap();
    assert!(!recs.is_empty());
    let ts = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
    for w in ts.windows(2) {
        for r in &recs {
            assert!(!emitted_at(r, w[1]) || emitted_at(r, w[0]));
        }
    }
    assert_eq!(pr_curve(&recs, &[0.0])[0].recall, 1.0);
}
