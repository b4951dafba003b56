//! Exact rewrite distances by exhaustive breadth-first search, and balanced
//! dataset generation on top of them.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::expr::{random_expr, Expr, ExprError};
use crate::rewrite::{apply, inverse, neighbors, Transformation, TransformationSet, TRANSFORMATION_COUNT};

/// Default cap on the number of states a single exhaustive search may hold.
pub const DEFAULT_MAX_STATES: usize = 4_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("target not reachable within {max_depth} steps")]
    Unreachable { max_depth: usize },
    #[error("visited set exceeded {limit} states")]
    ResourceLimit { limit: usize },
    #[error("source equals target: no first transformation exists")]
    ZeroDistance,
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Exact rewrite distance, if it is at most `max_depth`.
pub fn bfs_distance(source: &Expr, target: &Expr, max_depth: usize) -> Result<usize, OracleError> {
    bfs_distance_capped(source, target, max_depth, DEFAULT_MAX_STATES)
}

pub fn bfs_distance_capped(
    source: &Expr,
    target: &Expr,
    max_depth: usize,
    max_states: usize,
) -> Result<usize, OracleError> {
    if source == target {
        return Ok(0);
    }
    let mut visited: HashSet<Expr> = HashSet::new();
    visited.insert(source.clone());
    let mut frontier = vec![source.clone()];
    for depth in 1..=max_depth {
        let mut next = Vec::new();
        for e in &frontier {
            for (_, n) in neighbors(e) {
                if &n == target {
                    return Ok(depth);
                }
                if visited.insert(n.clone()) {
                    if visited.len() > max_states {
                        return Err(OracleError::ResourceLimit { limit: max_states });
                    }
                    next.push(n);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    Err(OracleError::Unreachable { max_depth })
}

/// First steps over all shortest paths from `source` to `target`.
pub fn shortest_first_transformations(
    source: &Expr,
    target: &Expr,
    max_depth: usize,
) -> Result<TransformationSet, OracleError> {
    let d = bfs_distance(source, target, max_depth)?;
    if d == 0 {
        return Err(OracleError::ZeroDistance);
    }
    let mut set = TransformationSet::default();
    for (t, n) in neighbors(source) {
        if d == 1 {
            if &n == target {
                set.insert(t);
            }
        } else if bfs_distance(&n, target, d - 1) == Ok(d - 1) {
            set.insert(t);
        }
    }
    Ok(set)
}

/// One state of an exhaustive exploration around a centre expression.
#[derive(Debug, Clone)]
pub struct BallEntry {
    pub expr: Expr,
    pub distance: usize,
    /// First steps of shortest paths from the centre to this state.
    pub firsts: TransformationSet,
    /// First steps of shortest paths from this state back to the centre.
    pub firsts_back: TransformationSet,
}

/// Every state within `radius` of `centre`, in BFS order.
#[derive(Debug, Clone)]
pub struct Ball {
    pub entries: Vec<BallEntry>,
}

impl Ball {
    pub fn explore(centre: &Expr, radius: usize, max_states: usize) -> Result<Ball, OracleError> {
        let mut index: HashMap<Expr, usize> = HashMap::new();
        let mut entries = vec![BallEntry {
            expr: centre.clone(),
            distance: 0,
            firsts: TransformationSet::default(),
            firsts_back: TransformationSet::default(),
        }];
        index.insert(centre.clone(), 0);
        let mut layer = 0..1;
        for depth in 1..=radius {
            let start = entries.len();
            for parent in layer.clone() {
                for (t, child) in neighbors(&entries[parent].expr) {
                    let back = inverse(&entries[parent].expr, t)
                        .expect("every applicable step has an inverse");
                    let firsts = if depth == 1 {
                        TransformationSet(t.bit())
                    } else {
                        entries[parent].firsts
                    };
                    match index.get(&child) {
                        Some(&i) => {
                            if entries[i].distance == depth {
                                entries[i].firsts.0 |= firsts.0;
                                entries[i].firsts_back.insert(back);
                            }
                        }
                        None => {
                            if entries.len() >= max_states {
                                return Err(OracleError::ResourceLimit { limit: max_states });
                            }
                            index.insert(child.clone(), entries.len());
                            entries.push(BallEntry {
                                expr: child,
                                distance: depth,
                                firsts,
                                firsts_back: TransformationSet(back.bit()),
                            });
                        }
                    }
                }
            }
            if entries.len() == start {
                break;
            }
            layer = start..entries.len();
        }
        Ok(Ball { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A training example: an ordered pair with its exact distance and the
/// first step of a shortest path between them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source: Expr,
    pub target: Expr,
    pub distance: usize,
    pub first: Transformation,
}

impl Example {
    pub fn to_tsv_line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.distance, self.first, self.source, self.target)
    }

    pub fn from_tsv_line(line: &str) -> Result<Example, DatasetFormatError> {
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |msg: String| DatasetFormatError(msg);
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let distance: usize = fields[0]
            .parse()
            .map_err(|_| bad(format!("bad distance `{}`", fields[0])))?;
        if distance == 0 {
            return Err(bad("distance must be at least 1".into()));
        }
        let first = fields[1].parse().map_err(|e| bad(format!("{e}")))?;
        let source = fields[2].parse().map_err(|e| bad(format!("source: {e}")))?;
        let target = fields[3].parse().map_err(|e| bad(format!("target: {e}")))?;
        Ok(Example {
            source,
            target,
            distance,
            first,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("dataset format error: {0}")]
pub struct DatasetFormatError(pub String);

#[derive(Debug, Error)]
pub enum DatasetIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Format {
        line: usize,
        source: DatasetFormatError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Dataset { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_distance(&self) -> usize {
        self.examples.iter().map(|e| e.distance).max().unwrap_or(0)
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        for ex in &self.examples {
            writeln!(w, "{}", ex.to_tsv_line())?;
        }
        w.flush()
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Dataset, DatasetIoError> {
        let mut examples = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ex = Example::from_tsv_line(&line).map_err(|source| DatasetIoError::Format {
                line: i + 1,
                source,
            })?;
            examples.push(ex);
        }
        Ok(Dataset { examples })
    }

    /// Number of examples per (distance, first transformation) cell; row
    /// `d - 1` holds distance `d`.
    pub fn cell_counts(&self) -> Vec<[usize; TRANSFORMATION_COUNT]> {
        let mut counts = vec![[0; TRANSFORMATION_COUNT]; self.max_distance()];
        for ex in &self.examples {
            counts[ex.distance - 1][ex.first.index()] += 1;
        }
        counts
    }

    /// Splits cell by cell so every split keeps the distance/first balance.
    /// `ratios` are the train and validation fractions; test takes the rest.
    pub fn split_balanced(&self, train: f64, validation: f64) -> [Dataset; 3] {
        let mut cells: HashMap<(usize, Transformation), Vec<&Example>> = HashMap::new();
        let mut order = Vec::new();
        for ex in &self.examples {
            let key = (ex.distance, ex.first);
            cells.entry(key).or_insert_with(|| {
                order.push(key);
                Vec::new()
            });
            cells.get_mut(&key).unwrap().push(ex);
        }
        let mut out: [Vec<Example>; 3] = Default::default();
        for key in order {
            let members = &cells[&key];
            let n = members.len();
            let n_train = (n as f64 * train).round() as usize;
            let n_val = ((n as f64 * validation).round() as usize).min(n - n_train);
            for (i, ex) in members.iter().enumerate() {
                let slot = if i < n_train {
                    0
                } else if i < n_train + n_val {
                    1
                } else {
                    2
                };
                out[slot].push((*ex).clone());
            }
        }
        out.map(Dataset::new)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub max_distance: usize,
    pub per_cell: usize,
    pub heights: RangeInclusive<usize>,
    pub seed: u64,
    /// Source expressions explored before the remaining cells are reported short.
    pub max_sources: usize,
    pub max_states: usize,
}

impl GenerationConfig {
    pub fn new(max_distance: usize, per_cell: usize, heights: RangeInclusive<usize>, seed: u64) -> Self {
        GenerationConfig {
            max_distance,
            per_cell,
            heights,
            seed,
            max_sources: 20_000 + 200 * per_cell,
            max_states: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenerationError {
    #[error("max_distance and per_cell must both be at least 1")]
    BadConfig,
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// A cell the generator could not fill within its source budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShortCell {
    pub distance: usize,
    pub first: Transformation,
    pub produced: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GenerationReport {
    pub sources_explored: usize,
    pub sources_skipped: usize,
    pub short_cells: Vec<ShortCell>,
}

const SOURCE_CHUNK: usize = 64;

/// Generates `per_cell` examples for every (distance, first transformation)
/// cell with distance in `1..=max_distance`.
///
/// Each source is a random expression with its focus moved to a random node.
/// The whole ball of radius `max_distance` around it is explored, which
/// certifies exact distances and first-step sets for every state in it, in
/// both directions. Candidate pairs are drawn from the ball; each records a
/// first step chosen uniformly from its shortest-first set and is kept only
/// while its cell still has room. Output is ordered by cell, then by
/// acceptance order, and depends only on the configuration.
pub fn generate_dataset(cfg: &GenerationConfig) -> Result<(Dataset, GenerationReport), GenerationError> {
    if cfg.max_distance == 0 || cfg.per_cell == 0 {
        return Err(GenerationError::BadConfig);
    }
    random_expr(cfg.heights.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;

    let n_cells = cfg.max_distance * TRANSFORMATION_COUNT;
    let mut cells: Vec<Vec<Example>> = vec![Vec::new(); n_cells];
    let mut seen: HashSet<(Expr, Expr)> = HashSet::new();
    let mut report = GenerationReport::default();
    let mut next_source = 0usize;

    while cells.iter().any(|c| c.len() < cfg.per_cell) && next_source < cfg.max_sources {
        let end = (next_source + SOURCE_CHUNK).min(cfg.max_sources);
        let batches: Vec<Option<Vec<Example>>> = (next_source..end)
            .into_par_iter()
            .map(|i| candidates_from_source(cfg, i as u64))
            .collect();
        for batch in batches {
            report.sources_explored += 1;
            let Some(batch) = batch else {
                report.sources_skipped += 1;
                continue;
            };
            for ex in batch {
                let cell = &mut cells[(ex.distance - 1) * TRANSFORMATION_COUNT + ex.first.index()];
                if cell.len() < cfg.per_cell && seen.insert((ex.source.clone(), ex.target.clone())) {
                    cell.push(ex);
                }
            }
        }
        next_source = end;
    }

    for (i, cell) in cells.iter().enumerate() {
        if cell.len() < cfg.per_cell {
            report.short_cells.push(ShortCell {
                distance: i / TRANSFORMATION_COUNT + 1,
                first: Transformation::ALL[i % TRANSFORMATION_COUNT],
                produced: cell.len(),
            });
        }
    }
    Ok((Dataset::new(cells.into_iter().flatten().collect()), report))
}

// At most one forward and one backward candidate per cell, per source.
fn candidates_from_source(cfg: &GenerationConfig, index: u64) -> Option<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let body = random_expr(cfg.heights.clone(), &mut rng).ok()?;
    let source = body.refocused(rng.gen_range(0..body.length() - 1))?;
    let ball = Ball::explore(&source, cfg.max_distance, cfg.max_states).ok()?;

    let mut order: Vec<usize> = (1..ball.len()).collect();
    order.shuffle(&mut rng);
    let n_cells = cfg.max_distance * TRANSFORMATION_COUNT;
    let mut taken = vec![[false; 2]; n_cells];
    let mut out = Vec::new();
    for i in order {
        let entry = &ball.entries[i];
        for (dir, set) in [(0, entry.firsts), (1, entry.firsts_back)] {
            let options: Vec<Transformation> = set.iter().collect();
            let first = options[rng.gen_range(0..options.len())];
            let cell = (entry.distance - 1) * TRANSFORMATION_COUNT + first.index();
            if taken[cell][dir] {
                continue;
            }
            taken[cell][dir] = true;
            let (s, t) = if dir == 0 {
                (source.clone(), entry.expr.clone())
            } else {
                (entry.expr.clone(), source.clone())
            };
            out.push(Example {
                source: s,
                target: t,
                distance: entry.distance,
                first,
            });
        }
    }
    Some(out)
}

/// Re-derives every recorded distance with [`bfs_distance`] and checks that
/// the recorded first step lies on a shortest path. Returns the indices of
/// examples that fail.
pub fn audit(dataset: &Dataset) -> Vec<usize> {
    dataset
        .examples
        .par_iter()
        .enumerate()
        .filter_map(|(i, ex)| (!audit_example(ex)).then_some(i))
        .collect()
}

pub fn audit_example(ex: &Example) -> bool {
    if bfs_distance(&ex.source, &ex.target, ex.distance) != Ok(ex.distance) {
        return false;
    }
    match apply(&ex.source, ex.first) {
        Some(next) => bfs_distance(&next, &ex.target, ex.distance - 1) == Ok(ex.distance - 1),
        None => false,
    }
}

/// Length and height statistics over all source and target expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub count: usize,
    pub length: Option<Summary>,
    pub height: Option<Summary>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
}

impl Summary {
    fn of(values: impl Iterator<Item = usize>) -> Option<Summary> {
        let mut n = 0usize;
        let mut sum = 0usize;
        let mut min = usize::MAX;
        let mut max = 0;
        for v in values {
            n += 1;
            sum += v;
            min = min.min(v);
            max = max.max(v);
        }
        (n > 0).then(|| Summary {
            mean: sum as f64 / n as f64,
            min,
            max,
        })
    }
}

pub fn dataset_stats(d: &Dataset) -> DatasetStats {
    let exprs = || d.examples.iter().flat_map(|e| [&e.source, &e.target]);
    DatasetStats {
        count: d.len(),
        length: Summary::of(exprs().map(Expr::length)),
        height: Summary::of(exprs().map(Expr::height)),
    }
}

/// Statistics as CSV, one column per named split and one row per statistic.
pub fn stats_csv(columns: &[(&str, DatasetStats)]) -> String {
    let mut s = String::from("statistic");
    for (name, _) in columns {
        let _ = write!(s, ",{name}");
    }
    s.push('\n');
    type Getter = fn(&DatasetStats) -> Option<String>;
    let rows: [(&str, Getter); 7] = [
        ("Number of examples", |st| Some(st.count.to_string())),
        ("Average length", |st| st.length.map(|x| format!("{:.2}", x.mean))),
        ("Minimum length", |st| st.length.map(|x| x.min.to_string())),
        ("Maximum length", |st| st.length.map(|x| x.max.to_string())),
        ("Average height", |st| st.height.map(|x| format!("{:.2}", x.mean))),
        ("Minimum height", |st| st.height.map(|x| x.min.to_string())),
        ("Maximum height", |st| st.height.map(|x| x.max.to_string())),
    ];
    for (label, get) in rows {
        s.push_str(label);
        for (_, st) in columns {
            s.push(',');
            if let Some(v) = get(st) {
                s.push_str(&v);
            }
        }
        s.push('\n');
    }
    s
}
