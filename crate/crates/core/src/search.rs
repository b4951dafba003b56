//! Path search over the rewrite graph: breadth-first, model-guided best-first
//! (NNGS) and its batched variant (Batch-NNGS).

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::expr::Expr;
use crate::model::{likelihood_order, Model};
use crate::rewrite::{apply, check_certificate, RewritePath, Transformation, Verdict, TRANSFORMATION_COUNT};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SearchError {
    #[error("invalid search configuration: {0}")]
    BadConfig(&'static str),
    #[error("{0} expression must contain exactly one focus")]
    Malformed(&'static str),
    #[error("unknown algorithm {0:?} (expected bfs, nngs or batch-nngs)")]
    UnknownAlgorithm(String),
    #[error("algorithm {0} needs a model")]
    MissingModel(Algorithm),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    /// Depth penalty added to the estimated distance.
    pub alpha: f64,
    pub batch_size: usize,
    pub timeout: Option<Duration>,
    /// Stop once this many distinct states are known.
    pub max_visited: usize,
    /// Record every expanded state in the result.
    pub trace: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            alpha: 0.5,
            batch_size: 512,
            timeout: None,
            max_visited: 2_000_000,
            trace: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(SearchError::BadConfig("alpha must be finite and >= 0"));
        }
        if self.batch_size < TRANSFORMATION_COUNT {
            return Err(SearchError::BadConfig("batch_size must be at least 8"));
        }
        if self.max_visited == 0 {
            return Err(SearchError::BadConfig("max_visited must be positive"));
        }
        Ok(())
    }

    /// Number of reserve entries moved to the main queue per transfer.
    pub fn transfer_limit(&self) -> usize {
        self.batch_size / TRANSFORMATION_COUNT
    }
}

pub fn priority(estimated: f64, depth: usize, alpha: f64) -> f64 {
    estimated + alpha * depth as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Found(RewritePath),
    Timeout,
    Exhausted,
    ResourceLimit,
}

impl Outcome {
    pub fn name(&self) -> &'static str {
        match self {
            Outcome::Found(_) => "found",
            Outcome::Timeout => "timeout",
            Outcome::Exhausted => "exhausted",
            Outcome::ResourceLimit => "resource_limit",
        }
    }

    pub fn path(&self) -> Option<&RewritePath> {
        match self {
            Outcome::Found(p) => Some(p),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SearchStats {
    /// States whose neighbours were (at least partly) generated.
    pub states_expanded: usize,
    /// Distinct states discovered, the source included.
    pub states_generated: usize,
    /// Model invocations: one per insertion for NNGS, one per flush for Batch-NNGS.
    pub nn_batches: usize,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub outcome: Outcome,
    pub stats: SearchStats,
    /// Expanded states in expansion order, when tracing is on.
    pub trace: Vec<Expr>,
}

struct Node {
    expr: Expr,
    parent: Option<(usize, Transformation)>,
    depth: usize,
}

/// Search tree with a structural visited set.
struct Tree {
    nodes: Vec<Node>,
    index: HashMap<Expr, usize>,
}

impl Tree {
    fn new(source: &Expr) -> Self {
        let mut t = Tree {
            nodes: Vec::new(),
            index: HashMap::new(),
        };
        t.index.insert(source.clone(), 0);
        t.nodes.push(Node {
            expr: source.clone(),
            parent: None,
            depth: 0,
        });
        t
    }

    fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Adds `expr` reached from `parent`; `None` when already known.
    fn discover(&mut self, expr: Expr, parent: usize, via: Transformation) -> Option<usize> {
        if self.index.contains_key(&expr) {
            return None;
        }
        let id = self.nodes.len();
        self.index.insert(expr.clone(), id);
        self.nodes.push(Node {
            expr,
            parent: Some((parent, via)),
            depth: self.nodes[parent].depth + 1,
        });
        Some(id)
    }

    fn path_to(&self, mut id: usize) -> RewritePath {
        let mut steps = Vec::new();
        while let Some((p, t)) = self.nodes[id].parent {
            steps.push(t);
            id = p;
        }
        steps.reverse();
        RewritePath(steps)
    }
}

enum Step {
    Continue,
    Found(usize),
    Full,
}

struct Run<'c> {
    cfg: &'c SearchConfig,
    target: Expr,
    tree: Tree,
    stats: SearchStats,
    trace: Vec<Expr>,
    start: Instant,
}

impl<'c> Run<'c> {
    fn start(source: &Expr, target: &Expr, cfg: &'c SearchConfig) -> Result<Self, SearchError> {
        cfg.validate()?;
        if !source.is_well_formed() {
            return Err(SearchError::Malformed("source"));
        }
        if !target.is_well_formed() {
            return Err(SearchError::Malformed("target"));
        }
        Ok(Run {
            cfg,
            target: target.clone(),
            tree: Tree::new(source),
            stats: SearchStats::default(),
            trace: Vec::new(),
            start: Instant::now(),
        })
    }

    fn timed_out(&self) -> bool {
        self.cfg.timeout.is_some_and(|t| self.start.elapsed() >= t)
    }

    fn mark_expanded(&mut self, id: usize) {
        self.stats.states_expanded += 1;
        if self.cfg.trace {
            self.trace.push(self.tree.nodes[id].expr.clone());
        }
    }

    /// Tries one transformation on node `id`.
    fn try_step(&mut self, id: usize, t: Transformation) -> (Step, Option<usize>) {
        let Some(next) = apply(&self.tree.nodes[id].expr, t) else {
            return (Step::Continue, None);
        };
        let is_target = next == self.target;
        match self.tree.discover(next, id, t) {
            None => (Step::Continue, None),
            Some(child) if is_target => (Step::Found(child), Some(child)),
            Some(child) if self.tree.len() >= self.cfg.max_visited => (Step::Full, Some(child)),
            Some(child) => (Step::Continue, Some(child)),
        }
    }

    fn finish(mut self, outcome: Outcome) -> SearchResult {
        self.stats.states_generated = self.tree.len();
        self.stats.elapsed = self.start.elapsed();
        SearchResult {
            outcome,
            stats: self.stats,
            trace: self.trace,
        }
    }

    fn found(self, id: usize) -> SearchResult {
        let path = self.tree.path_to(id);
        self.finish(Outcome::Found(path))
    }

    fn trivial(&self) -> bool {
        self.tree.nodes[0].expr == self.target
    }
}

/// Breadth-first search; returns a shortest path when it finds one.
pub fn bfs_search(source: &Expr, target: &Expr, cfg: &SearchConfig) -> Result<SearchResult, SearchError> {
    let mut run = Run::start(source, target, cfg)?;
    if run.trivial() {
        return Ok(run.found(0));
    }
    let mut queue = VecDeque::from([0usize]);
    while let Some(id) = queue.pop_front() {
        if run.timed_out() {
            return Ok(run.finish(Outcome::Timeout));
        }
        run.mark_expanded(id);
        for t in Transformation::ALL {
            let (step, child) = run.try_step(id, t);
            match step {
                Step::Found(c) => return Ok(run.found(c)),
                Step::Full => return Ok(run.finish(Outcome::ResourceLimit)),
                Step::Continue => queue.extend(child),
            }
        }
    }
    Ok(run.finish(Outcome::Exhausted))
}

/// Min-heap entry ordered by priority, then insertion order.
#[derive(Debug, Clone, Copy)]
struct Entry {
    priority: f64,
    seq: u64,
    id: usize,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .priority
            .total_cmp(&self.priority)
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Default)]
struct MinQueue {
    heap: BinaryHeap<Entry>,
    seq: u64,
}

impl MinQueue {
    fn push(&mut self, priority: f64, id: usize) {
        self.heap.push(Entry {
            priority,
            seq: self.seq,
            id,
        });
        self.seq += 1;
    }
}

/// Best-first search guided by the model's distance estimate, trying each
/// state's transformations in predicted-likelihood order.
pub fn nngs_search(
    source: &Expr,
    target: &Expr,
    model: &Model,
    cfg: &SearchConfig,
) -> Result<SearchResult, SearchError> {
    let mut run = Run::start(source, target, cfg)?;
    if run.trivial() {
        return Ok(run.found(0));
    }
    let target_emb = model.embed(target);
    let mut queue = MinQueue::default();
    // per node: transformation order and how many have been tried
    let mut orders: HashMap<usize, ([Transformation; TRANSFORMATION_COUNT], usize)> = HashMap::new();
    let insert = |run: &mut Run,
                  queue: &mut MinQueue,
                  orders: &mut HashMap<usize, ([Transformation; TRANSFORMATION_COUNT], usize)>,
                  id: usize| {
        let node = &run.tree.nodes[id];
        let emb = model.embed(&node.expr);
        let d = Model::distance_between(&emb, &target_emb);
        let order = likelihood_order(&model.classify(&emb, &target_emb));
        run.stats.nn_batches += 1;
        queue.push(priority(d, node.depth, cfg.alpha), id);
        orders.insert(id, (order, 0));
    };
    insert(&mut run, &mut queue, &mut orders, 0);

    while let Some(top) = queue.heap.peek().copied() {
        if run.timed_out() {
            return Ok(run.finish(Outcome::Timeout));
        }
        let entry = orders.get_mut(&top.id).expect("queued node has an order");
        if entry.1 == TRANSFORMATION_COUNT {
            queue.heap.pop();
            orders.remove(&top.id);
            continue;
        }
        let t = entry.0[entry.1];
        entry.1 += 1;
        if entry.1 == 1 {
            run.mark_expanded(top.id);
        }
        let (step, child) = run.try_step(top.id, t);
        match step {
            Step::Found(c) => return Ok(run.found(c)),
            Step::Full => return Ok(run.finish(Outcome::ResourceLimit)),
            Step::Continue => {
                if let Some(c) = child {
                    insert(&mut run, &mut queue, &mut orders, c);
                }
            }
        }
    }
    Ok(run.finish(Outcome::Exhausted))
}

/// Batched guided search: breadth-first over a main queue whose overflow is
/// scored in one model call and parked in a reserve priority queue.
pub fn batch_nngs_search(
    source: &Expr,
    target: &Expr,
    model: &Model,
    cfg: &SearchConfig,
) -> Result<SearchResult, SearchError> {
    let mut run = Run::start(source, target, cfg)?;
    if run.trivial() {
        return Ok(run.found(0));
    }
    let target_emb = model.embed(target);
    let k = cfg.transfer_limit();
    let mut main = VecDeque::from([0usize]);
    let mut reserve = MinQueue::default();

    while !(main.is_empty() && reserve.heap.is_empty()) {
        if run.timed_out() {
            return Ok(run.finish(Outcome::Timeout));
        }
        if main.len() > cfg.batch_size {
            let ids: Vec<usize> = main.drain(..).collect();
            let exprs: Vec<Expr> = ids.iter().map(|&i| run.tree.nodes[i].expr.clone()).collect();
            let embs = model.batch_embed(&exprs);
            run.stats.nn_batches += 1;
            for (id, emb) in ids.into_iter().zip(&embs) {
                let d = Model::distance_between(emb, &target_emb);
                reserve.push(priority(d, run.tree.nodes[id].depth, cfg.alpha), id);
            }
        }
        if main.is_empty() {
            let first = reserve.heap.pop().expect("reserve is non-empty here");
            main.push_back(first.id);
            while main.len() < k {
                match reserve.heap.peek() {
                    Some(e) if e.priority < first.priority + 1.0 => {
                        main.push_back(e.id);
                        reserve.heap.pop();
                    }
                    _ => break,
                }
            }
        }
        let id = main.pop_front().expect("main is non-empty here");
        run.mark_expanded(id);
        for t in Transformation::ALL {
            let (step, child) = run.try_step(id, t);
            match step {
                Step::Found(c) => return Ok(run.found(c)),
                Step::Full => return Ok(run.finish(Outcome::ResourceLimit)),
                Step::Continue => main.extend(child),
            }
        }
    }
    Ok(run.finish(Outcome::Exhausted))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Bfs,
    Nngs,
    BatchNngs,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Bfs, Algorithm::Nngs, Algorithm::BatchNngs];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Bfs => "bfs",
            Algorithm::Nngs => "nngs",
            Algorithm::BatchNngs => "batch-nngs",
        }
    }

    pub fn needs_model(self) -> bool {
        self != Algorithm::Bfs
    }

    pub fn run(
        self,
        source: &Expr,
        target: &Expr,
        model: Option<&Model>,
        cfg: &SearchConfig,
    ) -> Result<SearchResult, SearchError> {
        match (self, model) {
            (Algorithm::Bfs, _) => bfs_search(source, target, cfg),
            (Algorithm::Nngs, Some(m)) => nngs_search(source, target, m, cfg),
            (Algorithm::BatchNngs, Some(m)) => batch_nngs_search(source, target, m, cfg),
            (a, None) => Err(SearchError::MissingModel(a)),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = SearchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| SearchError::UnknownAlgorithm(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: usize,
    pub source: Expr,
    pub target: Expr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub instance_id: usize,
    pub algorithm: Algorithm,
    pub result: SearchResult,
    /// Certificate check of a found path; `None` when nothing was found.
    pub verdict: Option<Verdict>,
}

impl BenchRow {
    pub fn path_len(&self) -> Option<usize> {
        self.result.outcome.path().map(RewritePath::len)
    }

    fn outcome_name(&self) -> &'static str {
        match &self.verdict {
            Some(Verdict::Invalid(_)) => "invalid",
            _ => self.result.outcome.name(),
        }
    }
}

/// Runs every algorithm on every instance, re-checking found paths.
/// Rows come back in instance order, then algorithm order, whatever `jobs` is.
pub fn bench(
    instances: &[Instance],
    algorithms: &[Algorithm],
    model: Option<&Model>,
    cfg: &SearchConfig,
    jobs: usize,
) -> Result<Vec<BenchRow>, SearchError> {
    cfg.validate()?;
    if let Some(a) = algorithms.iter().find(|a| a.needs_model() && model.is_none()) {
        return Err(SearchError::MissingModel(*a));
    }
    let one = |inst: &Instance| -> Result<Vec<BenchRow>, SearchError> {
        algorithms
            .iter()
            .map(|&a| {
                let result = a.run(&inst.source, &inst.target, model, cfg)?;
                let verdict = result
                    .outcome
                    .path()
                    .map(|p| check_certificate(&inst.source, &inst.target, p));
                Ok(BenchRow {
                    instance_id: inst.id,
                    algorithm: a,
                    result,
                    verdict,
                })
            })
            .collect()
    };
    let nested: Vec<Result<Vec<BenchRow>, SearchError>> = if jobs <= 1 {
        instances.iter().map(one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|_| SearchError::BadConfig("could not start worker threads"))?;
        pool.install(|| instances.par_iter().map(one).collect())
    };
    let mut rows = Vec::new();
    for r in nested {
        rows.extend(r?);
    }
    Ok(rows)
}

pub const BENCH_HEADER: &str =
    "instance_id,algorithm,outcome,path_len,states_expanded,states_generated,nn_batches,elapsed_ms";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_HEADER);
    s.push('\n');
    for r in rows {
        let st = &r.result.stats;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:.3}",
            r.instance_id,
            r.algorithm,
            r.outcome_name(),
            r.path_len().map(|l| l.to_string()).unwrap_or_default(),
            st.states_expanded,
            st.states_generated,
            st.nn_batches,
            st.elapsed.as_secs_f64() * 1e3,
        );
    }
    s
}

/// Cumulative number of instances solved within each observed solve time,
/// per algorithm: `algorithm,time_ms,solved`.
pub fn solve_curve_csv(rows: &[BenchRow], algorithms: &[Algorithm]) -> String {
    let mut s = String::from("algorithm,time_ms,solved\n");
    for &a in algorithms {
        let mut times: Vec<f64> = rows
            .iter()
            .filter(|r| r.algorithm == a && r.verdict == Some(Verdict::Valid))
            .map(|r| r.result.stats.elapsed.as_secs_f64() * 1e3)
            .collect();
        times.sort_by(f64::total_cmp);
        let _ = writeln!(s, "{a},0.000,0");
        for (i, t) in times.iter().enumerate() {
            let _ = writeln!(s, "{a},{t:.3},{}", i + 1);
        }
    }
    s
}

#[derive(Debug, Error)]
#[error("line {line}: {msg}")]
pub struct InstanceFormatError {
    pub line: usize,
    pub msg: String,
}

/// Reads tab-separated instances. Each non-empty line ends with the source and
/// target expressions; leading columns (such as a dataset's distance and first
/// step) are ignored, so dataset files are valid instance files.
pub fn parse_instances(text: &str) -> Result<Vec<Instance>, InstanceFormatError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(InstanceFormatError {
                line: i + 1,
                msg: "expected tab-separated source and target".into(),
            });
        }
        let parse = |s: &str| {
            s.parse::<Expr>().map_err(|e| InstanceFormatError {
                line: i + 1,
                msg: e.to_string(),
            })
        };
        out.push(Instance {
            id: out.len(),
            source: parse(fields[fields.len() - 2])?,
            target: parse(fields[fields.len() - 1])?,
        });
    }
    Ok(out)
}
