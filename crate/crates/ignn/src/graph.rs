//! Graph construction and dataset ingestion.
//!
//! Edge lists are tab-separated `src<TAB>dst[<TAB>relation]` lines with
//! 0-based ids. The adjacency convention is `A[src, dst] = 1`, so column `j`
//! of `X A` aggregates the states of nodes with an edge into `j`. Feature,
//! label and split files are small whitespace-separated text formats (see
//! the loader docs); everything is deterministic given the stated seed.

use crate::linalg::{pf_eigen, DenseMatrix, LinalgError, SparseAdjacency, PF_MAX_ITER, PF_TOL};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: node id {id} out of range (n = {n})")]
    IdOutOfRange { line: usize, id: usize, n: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("split sizes {requested} exceed node count {available}")]
    SplitTooLarge { requested: usize, available: usize },
    #[error("masks are not disjoint: node {0} appears twice")]
    OverlappingMasks(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A single-relation graph.
#[derive(Debug, Clone)]
pub struct Graph {
    pub adjacency: SparseAdjacency,
    pub directed: bool,
}

impl Graph {
    pub fn new(adjacency: SparseAdjacency) -> Self {
        let directed = !adjacency.is_symmetric();
        Self {
            adjacency,
            directed,
        }
    }

    pub fn n(&self) -> usize {
        self.adjacency.n()
    }
}

/// A multi-relation graph: one adjacency per relation, all over the same
/// node set, ordered by first appearance in the source.
#[derive(Debug, Clone)]
pub struct HeteroGraph {
    pub n: usize,
    pub relations: Vec<(String, SparseAdjacency)>,
}

#[derive(Debug, Clone)]
pub enum GraphKind {
    Ordinary(Graph),
    Hetero(HeteroGraph),
}

impl GraphKind {
    pub fn n(&self) -> usize {
        match self {
            GraphKind::Ordinary(g) => g.n(),
            GraphKind::Hetero(h) => h.n,
        }
    }

    pub fn relation_count(&self) -> usize {
        match self {
            GraphKind::Ordinary(_) => 1,
            GraphKind::Hetero(h) => h.relations.len(),
        }
    }

    pub fn adjacencies(&self) -> Vec<&SparseAdjacency> {
        match self {
            GraphKind::Ordinary(g) => vec![&g.adjacency],
            GraphKind::Hetero(h) => h.relations.iter().map(|(_, a)| a).collect(),
        }
    }
}

/// A node-classification dataset: graph, optional features (absent means the
/// features are learned), one-hot or multi-hot labels, and disjoint masks.
#[derive(Debug, Clone)]
pub struct NodeDataset {
    pub graph: GraphKind,
    pub features: Option<DenseMatrix>,
    pub labels: DenseMatrix,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl NodeDataset {
    pub fn new(
        graph: GraphKind,
        features: Option<DenseMatrix>,
        labels: DenseMatrix,
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self, GraphError> {
        let n = graph.n();
        if let Some(u) = &features {
            if u.cols() != n {
                return Err(GraphError::DimensionMismatch(format!(
                    "features have {} columns, graph has {n} nodes",
                    u.cols()
                )));
            }
        }
        if labels.cols() != n {
            return Err(GraphError::DimensionMismatch(format!(
                "labels have {} columns, graph has {n} nodes",
                labels.cols()
            )));
        }
        let mut seen = BTreeSet::new();
        for &id in train.iter().chain(&val).chain(&test) {
            if id >= n {
                return Err(GraphError::DimensionMismatch(format!(
                    "mask id {id} out of range (n = {n})"
                )));
            }
            if !seen.insert(id) {
                return Err(GraphError::OverlappingMasks(id));
            }
        }
        Ok(Self {
            graph,
            features,
            labels,
            train,
            val,
            test,
        })
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn classes(&self) -> usize {
        self.labels.rows()
    }
}

/// Parses a tab-separated edge list. Duplicate edges collapse to a single
/// unit entry. With `relation_col` every line needs a third field naming the
/// relation; relations are ordered by first appearance.
pub fn load_edge_list(
    source: impl BufRead,
    n: usize,
    relation_col: bool,
) -> Result<GraphKind, GraphError> {
    let mut plain: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut rel_names: Vec<String> = Vec::new();
    let mut rel_edges: Vec<BTreeSet<(usize, usize)>> = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        let expected = if relation_col { 3 } else { 2 };
        if fields.len() != expected {
            return Err(GraphError::Malformed {
                line: line_no,
                msg: format!("expected {expected} tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_id = |s: &str| -> Result<usize, GraphError> {
            let id: usize = s.trim().parse().map_err(|_| GraphError::Malformed {
                line: line_no,
                msg: format!("invalid node id {s:?}"),
            })?;
            if id >= n {
                return Err(GraphError::IdOutOfRange {
                    line: line_no,
                    id,
                    n,
                });
            }
            Ok(id)
        };
        let src = parse_id(fields[0])?;
        let dst = parse_id(fields[1])?;
        if relation_col {
            let rel = fields[2].trim();
            if rel.is_empty() {
                return Err(GraphError::Malformed {
                    line: line_no,
                    msg: "empty relation name".into(),
                });
            }
            let slot = match rel_names.iter().position(|r| r == rel) {
                Some(i) => i,
                None => {
                    rel_names.push(rel.to_string());
                    rel_edges.push(BTreeSet::new());
                    rel_names.len() - 1
                }
            };
            rel_edges[slot].insert((src, dst));
        } else {
            plain.insert((src, dst));
        }
    }
    if relation_col {
        let mut relations = Vec::with_capacity(rel_names.len());
        for (name, edges) in rel_names.into_iter().zip(rel_edges) {
            let triplets: Vec<(usize, usize, f64)> =
                edges.into_iter().map(|(r, c)| (r, c, 1.0)).collect();
            relations.push((name, SparseAdjacency::from_triplets(n, &triplets)?));
        }
        Ok(GraphKind::Hetero(HeteroGraph { n, relations }))
    } else {
        let triplets: Vec<(usize, usize, f64)> =
            plain.into_iter().map(|(r, c)| (r, c, 1.0)).collect();
        Ok(GraphKind::Ordinary(Graph::new(SparseAdjacency::from_triplets(
            n, &triplets,
        )?)))
    }
}

/// Writes the adjacency back out as a tab-separated edge list (indices only;
/// intended for unit-weight graphs, where load/write round-trips exactly).
pub fn write_edge_list(graph: &GraphKind, mut sink: impl Write) -> Result<(), GraphError> {
    match graph {
        GraphKind::Ordinary(g) => {
            for (r, c, _) in g.adjacency.iter() {
                writeln!(sink, "{r}\t{c}")?;
            }
        }
        GraphKind::Hetero(h) => {
            for (name, a) in &h.relations {
                for (r, c, _) in a.iter() {
                    writeln!(sink, "{r}\t{c}\t{name}")?;
                }
            }
        }
    }
    Ok(())
}

/// Symmetric degree renormalization with self-loops:
/// `A_hat = D^-1/2 (A + I) D^-1/2` where `D` holds the row sums of `A + I`.
/// Isolated nodes end up with a unit self-loop. For symmetric input the
/// result is symmetric with `lambda_pf = 1`.
pub fn renormalize(g: &Graph) -> Result<Graph, GraphError> {
    let n = g.n();
    let mut triplets: Vec<(usize, usize, f64)> = g.adjacency.iter().collect();
    for i in 0..n {
        triplets.push((i, i, 1.0));
    }
    let with_loops = SparseAdjacency::from_triplets(n, &triplets)?;
    let mut degree = vec![0.0f64; n];
    for (r, _, v) in with_loops.iter() {
        degree[r] += v;
    }
    let scaled: Vec<(usize, usize, f64)> = with_loops
        .iter()
        .map(|(r, c, v)| (r, c, v / (degree[r] * degree[c]).sqrt()))
        .collect();
    Ok(Graph {
        adjacency: SparseAdjacency::from_triplets(n, &scaled)?,
        directed: g.directed,
    })
}

/// Builds the synthetic chains dataset: two classes of directed chains of
/// length `l` (so `l + 1` nodes each), where the class is encoded only in
/// the first feature dimension of each chain's start node (1 for class 1,
/// 0 — that is, an all-zero feature column — for class 0). Labels are 2-d
/// one-hot per node; masks are disjoint uniform samples drawn with the given
/// seed. A model must carry the start-node signal down the whole chain to
/// classify the far nodes.
#[allow(clippy::too_many_arguments)]
pub fn gen_chains(
    l: usize,
    chains_per_class: usize,
    p: usize,
    train_size: usize,
    val_size: usize,
    test_size: usize,
    seed: u64,
) -> Result<NodeDataset, GraphError> {
    if p == 0 || chains_per_class == 0 {
        return Err(GraphError::DimensionMismatch(
            "feature dimension and chains per class must be positive".into(),
        ));
    }
    let nodes_per_chain = l + 1;
    let chains = 2 * chains_per_class;
    let n = chains * nodes_per_chain;
    let requested = train_size + val_size + test_size;
    if requested > n {
        return Err(GraphError::SplitTooLarge {
            requested,
            available: n,
        });
    }

    let mut triplets = Vec::with_capacity(chains * l);
    for chain in 0..chains {
        let base = chain * nodes_per_chain;
        for pos in 0..l {
            triplets.push((base + pos, base + pos + 1, 1.0));
        }
    }
    let adjacency = SparseAdjacency::from_triplets(n, &triplets)?;

    let mut features = DenseMatrix::zeros(p, n);
    let mut labels = DenseMatrix::zeros(2, n);
    for chain in 0..chains {
        let class = usize::from(chain >= chains_per_class);
        let base = chain * nodes_per_chain;
        if class == 1 {
            features.set(0, base, 1.0);
        }
        for pos in 0..nodes_per_chain {
            labels.set(class, base + pos, 1.0);
        }
    }

    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let train = ids[..train_size].to_vec();
    let val = ids[train_size..train_size + val_size].to_vec();
    let test = ids[train_size + val_size..requested].to_vec();

    NodeDataset::new(
        GraphKind::Ordinary(Graph {
            adjacency,
            directed: true,
        }),
        Some(features),
        labels,
        train,
        val,
        test,
    )
}

/// Reads one node per line, whitespace-separated decimals, into a `p x n`
/// matrix (file rows become columns).
pub fn load_features(source: impl BufRead, n: usize) -> Result<DenseMatrix, GraphError> {
    load_node_rows(source, n, "features")
}

/// Reads one node per line of whitespace-separated 0/1 flags into `c x n`.
pub fn load_labels(source: impl BufRead, n: usize) -> Result<DenseMatrix, GraphError> {
    load_node_rows(source, n, "labels")
}

fn load_node_rows(
    source: impl BufRead,
    n: usize,
    what: &str,
) -> Result<DenseMatrix, GraphError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in trimmed.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| GraphError::Malformed {
                line: line_no,
                msg: format!("invalid number {tok:?} in {what}"),
            })?;
            if !v.is_finite() {
                return Err(GraphError::Malformed {
                    line: line_no,
                    msg: format!("non-finite value in {what}"),
                });
            }
            row.push(v);
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(GraphError::Malformed {
                    line: line_no,
                    msg: format!("expected {w} values per line in {what}, got {}", row.len()),
                });
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.len() != n {
        return Err(GraphError::DimensionMismatch(format!(
            "{what} file has {} rows, graph has {n} nodes",
            rows.len()
        )));
    }
    let p = width.unwrap_or(0);
    let mut out = DenseMatrix::zeros(p, n);
    for (node, row) in rows.iter().enumerate() {
        for (dim, &v) in row.iter().enumerate() {
            out.set(dim, node, v);
        }
    }
    Ok(out)
}

/// Parses the three-section split file: tokens after a `train:` / `val:` /
/// `test:` header accumulate into that mask until the next header.
pub fn load_splits(
    source: impl BufRead,
    n: usize,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), GraphError> {
    let mut sections: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut current: Option<usize> = None;
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        for tok in line.split_whitespace() {
            match tok {
                "train:" => current = Some(0),
                "val:" => current = Some(1),
                "test:" => current = Some(2),
                _ => {
                    let id: usize = tok.parse().map_err(|_| GraphError::Malformed {
                        line: line_no,
                        msg: format!("invalid split token {tok:?}"),
                    })?;
                    if id >= n {
                        return Err(GraphError::IdOutOfRange {
                            line: line_no,
                            id,
                            n,
                        });
                    }
                    match current {
                        Some(s) => sections[s].push(id),
                        None => {
                            return Err(GraphError::Malformed {
                                line: line_no,
                                msg: "node id before any train:/val:/test: header".into(),
                            });
                        }
                    }
                }
            }
        }
    }
    let [train, val, test] = sections;
    Ok((train, val, test))
}

/// Writes masks in the format [`load_splits`] reads.
pub fn write_splits(
    train: &[usize],
    val: &[usize],
    test: &[usize],
    mut sink: impl Write,
) -> Result<(), GraphError> {
    for (name, ids) in [("train:", train), ("val:", val), ("test:", test)] {
        write!(sink, "{name}")?;
        for id in ids {
            write!(sink, " {id}")?;
        }
        writeln!(sink)?;
    }
    Ok(())
}

/// Convenience check used by tests and the verification CLI: the PF value of
/// a renormalized symmetric graph is 1.
pub fn renormalized_pf(g: &Graph) -> Result<f64, GraphError> {
    let (lambda, _) = pf_eigen(&g.adjacency, PF_TOL, PF_MAX_ITER)?;
    Ok(lambda)
}

/// A collection of independent graphs for graph-level classification. Each
/// member dataset carries its own features (labels live here, one column per
/// graph); masks index into `graphs`.
#[derive(Debug, Clone)]
pub struct GraphCollection {
    pub graphs: Vec<NodeDataset>,
    /// `c x G` one-hot labels, one column per graph.
    pub labels: DenseMatrix,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Loads a graph-classification directory: `labels.txt` (one row per graph),
/// `splits.txt` (graph indices), and one `g{i}/` subdirectory per graph
/// holding `edges.tsv` and `features.txt`. Node counts come from the feature
/// files.
pub fn load_graph_collection(dir: &std::path::Path) -> Result<GraphCollection, GraphError> {
    use std::fs::File;
    use std::io::BufReader;
    let labels_path = dir.join("labels.txt");
    let raw_labels = std::fs::read_to_string(&labels_path)?;
    let g_count = raw_labels.lines().filter(|l| !l.trim().is_empty()).count();
    let labels = load_labels(std::io::Cursor::new(raw_labels), g_count)?;
    let (train, val, test) = load_splits(
        BufReader::new(File::open(dir.join("splits.txt"))?),
        g_count,
    )?;
    let classes = labels.rows();
    let mut graphs = Vec::with_capacity(g_count);
    for i in 0..g_count {
        let sub = dir.join(format!("g{i}"));
        let feature_text = std::fs::read_to_string(sub.join("features.txt"))?;
        let n = feature_text.lines().filter(|l| !l.trim().is_empty()).count();
        let features = load_features(std::io::Cursor::new(feature_text), n)?;
        let graph = load_edge_list(BufReader::new(File::open(sub.join("edges.tsv"))?), n, false)?;
        graphs.push(NodeDataset::new(
            graph,
            Some(features),
            DenseMatrix::zeros(classes, n),
            Vec::new(),
            Vec::new(),
            Vec::new(),
        )?);
    }
    Ok(GraphCollection {
        graphs,
        labels,
        train,
        val,
        test,
    })
}
