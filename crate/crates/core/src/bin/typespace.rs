use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use typespace::ggnn::Model;
use typespace::harness::{
    evaluate, split_corpus, train, type_counts, write_report, CheckerHook, Control, HarnessError, Predictor, Result,
    RunConfig, DEFAULT_THRESHOLDS,
};
use typespace::objective::LossKind;
use typespace::pygraph::{extract, extract_dir, read_corpus, write_corpus, CodeGraph, EdgeLabel, ExtractOptions};
use typespace::service::{serve, AppState};
use typespace::typemap::{build_map, PredictionConfig, Provenance, TypeMap, DEFAULT_K, DEFAULT_P};

#[derive(Parser)]
#[command(name = "typespace", version, about = "Type suggestions for Python from a learned type space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract code graphs from every .py file below a directory.
    Extract {
        dir: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Edge label to leave out; repeatable.
        #[arg(long = "no-edge", value_name = "LABEL")]
        no_edge: Vec<String>,
    },
    /// Split a graph corpus into train/valid/test files.
    Split {
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for train.jsonl, valid.jsonl and test.jsonl.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train an encoder from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        loss: Option<LossKind>,
    },
    /// Build a type map from the annotated symbols of one or more corpora.
    Index {
        #[arg(long)]
        model: PathBuf,
        /// Graph corpus; repeatable.
        #[arg(long, required = true)]
        corpus: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Print ranked candidates for every symbol of Python files.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_P)]
        p: f64,
        /// Number of candidates printed per symbol.
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Evaluate on a test corpus and write a report directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        /// Training corpus for the common/rare split; defaults to the map's corpus markers.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_P)]
        p: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Serve the review API over HTTP.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        map: PathBuf,
        /// Directory of Python files to review.
        #[arg(long)]
        files: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_P)]
        p: f64,
        /// Checker command, split on whitespace; `{file}` marks the file argument.
        #[arg(long)]
        checker: Option<String>,
        /// Where exported maps are written; defaults to the input map.
        #[arg(long)]
        export: Option<PathBuf>,
    },
}

fn data(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Data(format!("{}: {e}", path.display()))
}

fn read_graphs(path: &Path) -> Result<Vec<CodeGraph>> {
    let f = File::open(path).map_err(|e| data(path, e))?;
    read_corpus(BufReader::new(f)).map_err(|e| data(path, e))
}

fn write_graphs(path: &Path, graphs: &[CodeGraph]) -> Result<()> {
    let f = File::create(path).map_err(|e| data(path, e))?;
    let mut w = BufWriter::new(f);
    write_corpus(&mut w, graphs).map_err(|e| data(path, e))?;
    w.flush().map_err(|e| data(path, e))
}

fn load_model(path: &Path) -> Result<Model> {
    let f = File::open(path).map_err(|e| data(path, e))?;
    Model::load(BufReader::new(f)).map_err(|e| data(path, e))
}

fn load_map(path: &Path) -> Result<TypeMap> {
    let f = File::open(path).map_err(|e| data(path, e))?;
    TypeMap::load(BufReader::new(f)).map_err(|e| data(path, e))
}

fn save_map(path: &Path, map: &TypeMap) -> Result<()> {
    let f = File::create(path).map_err(|e| data(path, e))?;
    let mut w = BufWriter::new(f);
    map.save(&mut w).map_err(|e| data(path, e))?;
    w.flush().map_err(|e| data(path, e))
}

fn prediction_config(k: usize, p: f64) -> Result<PredictionConfig> {
    if k == 0 || !p.is_finite() || p < 0.0 {
        return Err(HarnessError::Usage("k must be positive and p a non-negative number".into()));
    }
    Ok(PredictionConfig { k, p })
}

/// Map predictor when a map is given, else the classifier head of a
/// class-only checkpoint.
fn predictor(model: Model, map: Option<&Path>, config: PredictionConfig) -> Result<Predictor> {
    match map {
        Some(path) => {
            let map = load_map(path)?;
            if map.dim() != model.dim() {
                return Err(data(path, format!("map dimension {} does not match the model's {}", map.dim(), model.dim())));
            }
            Ok(Predictor::Map { model, map, config })
        }
        None if model.extra.get("loss").map(String::as_str) == Some(LossKind::Class.as_str()) => {
            Ok(Predictor::Classifier { model, kind: LossKind::Class })
        }
        None => Err(HarnessError::Usage("--map is required unless the model was trained with the class loss".into())),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Extract { dir, output, no_edge } => {
            let mut options = ExtractOptions::default();
            for l in &no_edge {
                options.disabled_edges.insert(l.parse::<EdgeLabel>().map_err(HarnessError::Usage)?);
            }
            if !dir.is_dir() {
                return Err(data(&dir, "not a directory"));
            }
            let ex = extract_dir(&dir, &options).map_err(|e| data(&dir, e))?;
            for d in &ex.skipped {
                eprintln!("skipped {}: {}", d.path.display(), d.message);
            }
            write_graphs(&output, &ex.graphs)?;
            eprintln!(
                "{} graphs, {} skipped, {} duplicates",
                ex.graphs.len(),
                ex.skipped.len(),
                ex.duplicates
            );
        }
        Command::Split { corpus, seed, out_dir } => {
            let graphs = read_graphs(&corpus)?;
            let split = split_corpus(graphs, seed);
            let dir = out_dir.unwrap_or_else(|| corpus.parent().unwrap_or(Path::new(".")).to_path_buf());
            std::fs::create_dir_all(&dir).map_err(|e| data(&dir, e))?;
            for (name, part) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
                write_graphs(&dir.join(format!("{name}.jsonl")), part)?;
            }
            eprintln!("train {}, valid {}, test {}", split.train.len(), split.valid.len(), split.test.len());
        }
        Command::Train { config, loss } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(l) = loss {
                cfg.objective.loss = l;
            }
            let train_set = read_graphs(&cfg.train)?;
            let valid_set = match &cfg.valid {
                Some(p) => read_graphs(p)?,
                None => Vec::new(),
            };
            let out = train(&cfg, &train_set, &valid_set, |_, _| Control::Continue)?;
            let f = File::create(&cfg.output).map_err(|e| data(&cfg.output, e))?;
            let mut w = BufWriter::new(f);
            out.model.save(&mut w).map_err(|e| data(&cfg.output, e))?;
            w.flush().map_err(|e| data(&cfg.output, e))?;
            match out.best_valid {
                Some(v) => eprintln!("best epoch {} (valid {v:.4}), saved {}", out.best_epoch, cfg.output.display()),
                None => eprintln!("saved {}", cfg.output.display()),
            }
        }
        Command::Index { model, corpus, output } => {
            let model = load_model(&model)?;
            let mut graphs = Vec::new();
            for c in &corpus {
                graphs.extend(read_graphs(c)?);
            }
            let map = build_map(&model, &graphs)?;
            save_map(&output, &map)?;
            eprintln!("{} markers", map.len());
        }
        Command::Predict { model, map, k, p, top, files } => {
            let pred = predictor(load_model(&model)?, map.as_deref(), prediction_config(k, p)?)?;
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for path in files {
                let src = std::fs::read_to_string(&path).map_err(|e| data(&path, e))?;
                let id = path.to_string_lossy().into_owned();
                let g = extract(&id, &src, &ExtractOptions::default()).map_err(|e| data(&path, e))?.graph;
                for s in pred.suggest(&g)? {
                    let sym = &g.symbols[s.symbol];
                    let cands: Vec<serde_json::Value> = s
                        .candidates
                        .iter()
                        .take(top)
                        .map(|c| serde_json::json!({ "type": c.ty.to_string(), "probability": c.probability }))
                        .collect();
                    let row = serde_json::json!({
                        "file": id,
                        "symbol": s.symbol,
                        "name": sym.name,
                        "kind": sym.kind.as_str(),
                        "annotation": sym.annotation.as_ref().map(|t| t.to_string()),
                        "candidates": cands,
                    });
                    match writeln!(out, "{row}") {
                        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => return Ok(()),
                        r => r?,
                    }
                }
            }
        }
        Command::Eval { model, map, test, train: train_path, k, p, output } => {
            let pred = predictor(load_model(&model)?, map.as_deref(), prediction_config(k, p)?)?;
            let test_set = read_graphs(&test)?;
            let counts = match (&train_path, &pred) {
                (Some(t), _) => type_counts(&read_graphs(t)?),
                (None, Predictor::Map { map, .. }) => {
                    let mut c = std::collections::BTreeMap::new();
                    for m in map.markers().iter().filter(|m| m.provenance == Provenance::Corpus) {
                        *c.entry(m.ty.clone()).or_insert(0) += 1;
                    }
                    c
                }
                (None, _) => return Err(HarnessError::Usage("--train is required without a map".into())),
            };
            let records = evaluate(&pred, &test_set, &counts)?;
            let metrics = write_report(&output, &records, &DEFAULT_THRESHOLDS)?;
            print!("{}", metrics.to_text());
        }
        Command::Serve { model, map, files, addr, k, p, checker, export } => {
            let config = prediction_config(k, p)?;
            let model = load_model(&model)?;
            let base = load_map(&map)?;
            let mut sources = Vec::new();
            let mut paths: Vec<PathBuf> = walk_py(&files)?;
            paths.sort();
            for path in paths {
                let src = std::fs::read_to_string(&path).map_err(|e| data(&path, e))?;
                let id = path.strip_prefix(&files).unwrap_or(&path).to_string_lossy().replace('\\', "/");
                sources.push((id, src));
            }
            let mut state = AppState::new(model, base, config, sources).map_err(HarnessError::Data)?;
            if let Some(c) = checker {
                state = state.with_checker(CheckerHook::new(c.split_whitespace().map(str::to_string).collect()));
            }
            state = state.with_export_path(export.unwrap_or(map));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(&addr, state))?;
        }
    }
    Ok(())
}

fn walk_py(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(data(dir, "not a directory"));
    }
    let mut out = Vec::new();
    for e in walkdir::WalkDir::new(dir) {
        let e = e.map_err(|e| data(dir, e))?;
        if e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "py") {
            out.push(e.into_path());
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
