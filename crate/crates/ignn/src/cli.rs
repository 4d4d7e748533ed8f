//! Command-line surface: `gen-chains`, `train`, `eval`, `check`, `rescale`.

use crate::graph::{gen_chains, load_edge_list, renormalize, write_edge_list, write_splits, Graph, GraphKind};
use crate::model::checkpoint::{load_from_path, save_to_path};
use crate::train::{
    evaluate, export_predictions, load_node_dataset, parse_config, train, EpochRecord, Task,
};
use crate::wellposed::{check, check_hetero};
use clap::{Parser, Subcommand};
use std::fs::File;
use std::io::{BufWriter, Cursor, Write};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Usage(#[from] clap::Error),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Checkpoint(#[from] crate::model::checkpoint::CheckpointError),
    #[error(transparent)]
    WellPosed(#[from] crate::wellposed::WellPosedError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Message(String),
}

#[derive(Parser)]
#[command(
    name = "ignn",
    about = "Implicit graph neural networks: equilibrium solving, training, and well-posedness checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic chains dataset files into a directory.
    GenChains {
        /// Chain length (edges per chain; a chain has length+1 nodes).
        #[arg(long)]
        length: usize,
        /// Chains per class (two classes).
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        /// Feature dimension.
        #[arg(long, default_value_t = 100)]
        feature_dim: usize,
        #[arg(long, default_value_t = 20)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        val: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (created if missing); writes edges.tsv,
        /// features.txt, labels.txt, splits.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the dataset named by a config file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Also write binarized predictions (one node per line).
        #[arg(long)]
        dump_predictions: Option<PathBuf>,
    },
    /// Report the Perron-Frobenius and tractable well-posedness conditions
    /// for a checkpoint against a graph.
    Check {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        /// Node count; inferred from the largest id when omitted.
        #[arg(long)]
        nodes: Option<usize>,
        /// Treat the third edge-list column as a relation name.
        #[arg(long, default_value_t = false)]
        hetero: bool,
        /// Apply symmetric renormalization before checking.
        #[arg(long, default_value_t = true)]
        renormalize: bool,
        /// Budget for the multi-relation tractable condition.
        #[arg(long, default_value_t = 0.95)]
        kappa: f64,
    },
    /// Rewrite a checkpoint with each layer diagonally rescaled so that
    /// inf_norm(W) drops to lambda_pf(|W|); predictions are unchanged for
    /// positively homogeneous activations.
    Rescale {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn infer_nodes(text: &str, hetero: bool) -> Result<usize, CliError> {
    let mut max_id = None::<usize>;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split('\t');
        for _ in 0..2 {
            if let Some(tok) = fields.next() {
                if let Ok(id) = tok.trim().parse::<usize>() {
                    max_id = Some(max_id.map_or(id, |m: usize| m.max(id)));
                }
            }
        }
        let _ = hetero;
    }
    max_id
        .map(|m| m + 1)
        .ok_or_else(|| CliError::Message("cannot infer node count from an empty edge list".into()))
}

pub fn run_from<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    match cli.command {
        Command::GenChains {
            length,
            per_class,
            feature_dim,
            train,
            val,
            test,
            seed,
            out,
        } => {
            let dataset = gen_chains(length, per_class, feature_dim, train, val, test, seed)?;
            std::fs::create_dir_all(&out)?;
            let mut edges = BufWriter::new(File::create(out.join("edges.tsv"))?);
            write_edge_list(&dataset.graph, &mut edges)?;
            edges.flush()?;
            let features = dataset.features.as_ref().expect("chains always have features");
            let mut f = BufWriter::new(File::create(out.join("features.txt"))?);
            for node in 0..features.cols() {
                let row: Vec<String> = (0..features.rows())
                    .map(|d| format!("{}", features.get(d, node)))
                    .collect();
                writeln!(f, "{}", row.join(" "))?;
            }
            f.flush()?;
            let mut lbl = BufWriter::new(File::create(out.join("labels.txt"))?);
            for node in 0..dataset.labels.cols() {
                let row: Vec<String> = (0..dataset.labels.rows())
                    .map(|c| format!("{}", dataset.labels.get(c, node)))
                    .collect();
                writeln!(lbl, "{}", row.join(" "))?;
            }
            lbl.flush()?;
            let mut spl = BufWriter::new(File::create(out.join("splits.txt"))?);
            write_splits(&dataset.train, &dataset.val, &dataset.test, &mut spl)?;
            spl.flush()?;
            println!(
                "wrote {} nodes / {} edges to {}",
                dataset.n(),
                match &dataset.graph {
                    GraphKind::Ordinary(g) => g.adjacency.nnz(),
                    GraphKind::Hetero(h) => h.relations.iter().map(|(_, a)| a.nnz()).sum(),
                },
                out.display()
            );
            Ok(())
        }
        Command::Train { config } => {
            let cfg = parse_config(&std::fs::read_to_string(&config)?)?;
            let mut metrics_file = match &cfg.metrics_out {
                Some(path) => Some(BufWriter::new(File::create(path)?)),
                None => None,
            };
            println!("{}", EpochRecord::tsv_header());
            if let Some(f) = metrics_file.as_mut() {
                writeln!(f, "{}", EpochRecord::tsv_header())?;
            }
            let mut sink_err: Option<std::io::Error> = None;
            let mut progress = |record: &EpochRecord| {
                println!("{}", record.tsv_line());
                if let Some(f) = metrics_file.as_mut() {
                    if let Err(e) = writeln!(f, "{}", record.tsv_line()) {
                        sink_err.get_or_insert(e);
                    }
                }
            };
            let outcome = train(&cfg, Some(&mut progress))?;
            if let Some(e) = sink_err {
                return Err(CliError::Io(e));
            }
            if let Some(f) = metrics_file.as_mut() {
                f.flush()?;
            }
            if !outcome.constraints.certified() {
                eprintln!(
                    "warning: relation budgets sum to {:.3} >= 1; well-posedness is not certified (convergence may still hold in practice)",
                    outcome.constraints.kappa_sum()
                );
            }
            match &cfg.checkpoint_out {
                Some(path) => {
                    save_to_path(&outcome.model, path)?;
                    println!("checkpoint written to {}", path.display());
                }
                None => eprintln!("note: checkpoint_out not set; model discarded"),
            }
            if let Some(best) = outcome.history.best_val_f1() {
                println!("best val micro-F1 {best:.4}");
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            config,
            dump_predictions,
        } => {
            let cfg = parse_config(&std::fs::read_to_string(&config)?)?;
            if cfg.task == Task::Graph {
                return Err(CliError::Message(
                    "eval supports node tasks; graph collections are evaluated during training".into(),
                ));
            }
            let dataset = load_node_dataset(&cfg)?;
            let model = load_from_path(&checkpoint)?;
            let report = evaluate(&model, &dataset, cfg.task, &cfg)?;
            print!("{}", report.render());
            if let Some(path) = dump_predictions {
                let mut sink = BufWriter::new(File::create(&path)?);
                export_predictions(&model, &dataset, cfg.task, &cfg, &mut sink)?;
                sink.flush()?;
                println!("predictions written to {}", path.display());
            }
            Ok(())
        }
        Command::Check {
            weights,
            graph,
            nodes,
            hetero,
            renormalize: do_renorm,
            kappa,
        } => {
            let model = load_from_path(&weights)?;
            let text = std::fs::read_to_string(&graph)?;
            let n = match nodes {
                Some(n) => n,
                None => infer_nodes(&text, hetero)?,
            };
            let parsed = load_edge_list(Cursor::new(text), n, hetero)?;
            let adjacencies: Vec<crate::SparseAdjacency> = match parsed {
                GraphKind::Ordinary(g) => {
                    let g = if do_renorm { renormalize(&g)? } else { g };
                    vec![g.adjacency]
                }
                GraphKind::Hetero(h) => {
                    let mut out = Vec::with_capacity(h.relations.len());
                    for (_, a) in h.relations {
                        let g = Graph::new(a);
                        let g = if do_renorm { renormalize(&g)? } else { g };
                        out.push(g.adjacency);
                    }
                    out
                }
            };
            if adjacencies.len() != model.relations() {
                return Err(CliError::Message(format!(
                    "model has {} relations but the graph provides {}",
                    model.relations(),
                    adjacencies.len()
                )));
            }
            for (l, layer) in model.layers.iter().enumerate() {
                let report = if adjacencies.len() == 1 {
                    check(&layer.ws[0], &adjacencies[0])?
                } else {
                    let ws: Vec<&crate::DenseMatrix> = layer.ws.iter().collect();
                    let adj_refs: Vec<&crate::SparseAdjacency> = adjacencies.iter().collect();
                    check_hetero(&ws, &adj_refs, kappa)?
                };
                println!("layer {l}:");
                print!("{}", report.render());
            }
            Ok(())
        }
        Command::Rescale { checkpoint, out } => {
            let model = load_from_path(&checkpoint)?;
            let rescaled = model.rescale()?;
            save_to_path(&rescaled, &out)?;
            for (l, (before, after)) in model
                .layers
                .iter()
                .zip(&rescaled.layers)
                .enumerate()
            {
                println!(
                    "layer {l}: inf_norm(W) {:.6} -> {:.6}",
                    before.ws[0].inf_norm(),
                    after.ws[0].inf_norm()
                );
            }
            println!("rescaled checkpoint written to {}", out.display());
            Ok(())
        }
    }
}

/// Entry point for the binary: parse, dispatch, and map errors to a nonzero
/// exit code with a message on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match run_from(args) {
        Ok(()) => 0,
        Err(CliError::Usage(e)) => {
            // clap renders its own help/usage text
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
