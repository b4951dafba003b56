//! Joint distance/classification training with Adam.
//!
//! The per-example loss is the squared distance error plus the cross-entropy
//! of the first-transformation logits, both divided by the square root of the
//! true distance. A batch loss is the mean over its examples.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::expr::Expr;
use crate::model::{Model, Prediction};
use crate::numerics::{logsumexp, NumericsError, Tape, Tensor, VarId};
use crate::oracle::{Dataset, Example};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss undefined for distance {0}: the discount needs d >= 1")]
    Domain(usize),
    #[error("class index {0} out of range")]
    BadClass(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    BadConfig(&'static str),
    /// Training diverged; `last_good` holds the parameters before the failing step.
    #[error("non-finite values during epoch {epoch}")]
    NonFinite { epoch: usize, last_good: Box<Model> },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Discounted joint loss for one example.
pub fn loss(predicted: f64, logits: &[f64], distance: usize, class: usize) -> Result<f64, TrainError> {
    if distance < 1 {
        return Err(TrainError::Domain(distance));
    }
    if class >= logits.len() {
        return Err(TrainError::BadClass(class));
    }
    let d = distance as f64;
    let ce = logsumexp(logits) - logits[class];
    Ok(((predicted - d).powi(2) + ce) / d.sqrt())
}

/// Records the discounted loss of `ex` on `tape`.
pub fn record_loss(tape: &mut Tape<'_>, model: &Model, ex: &Example) -> Result<VarId, TrainError> {
    if ex.distance < 1 {
        return Err(TrainError::Domain(ex.distance));
    }
    let d = ex.distance as f64;
    let (p, logits) = model.record_pair(tape, &ex.source, &ex.target)?;
    let err = tape.add_scalar(p, -d)?;
    let mse = tape.square(err)?;
    let lse = tape.logsumexp(logits)?;
    let picked = tape.index(logits, ex.first.index())?;
    let ce = tape.sub(lse, picked)?;
    let total = tape.add(mse, ce)?;
    Ok(tape.scale(total, 1.0 / d.sqrt())?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub shuffle: bool,
    /// Rescale the batch gradient to this L2 norm when it is larger.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 128,
            adam: AdamConfig::default(),
            seed: 0,
            shuffle: true,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        let a = &self.adam;
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be at least 1"));
        }
        if !(a.lr > 0.0 && a.beta1 > 0.0 && a.beta2 > 0.0 && a.eps > 0.0) {
            return Err(TrainError::BadConfig("Adam hyperparameters must be positive"));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(TrainError::BadConfig("clip norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub mae: f64,
    pub accuracy: f64,
    pub discounted_mse: f64,
    pub discounted_ce: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,mae,accuracy,dmse,dce";

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.split, self.mae, self.accuracy, self.discounted_mse, self.discounted_ce
        )
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Anything that predicts a distance and first-transformation logits.
pub trait Predictor: Sync {
    fn predict_pair(&self, source: &Expr, target: &Expr) -> Prediction;
}

impl Predictor for Model {
    fn predict_pair(&self, source: &Expr, target: &Expr) -> Prediction {
        self.predict(source, target)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceRow {
    pub distance: usize,
    pub count: usize,
    pub mae: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub row: MetricRow,
    pub per_distance: Vec<DistanceRow>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// MAE, strict first-transformation accuracy and discounted losses, overall
/// and per true distance.
pub fn evaluate<P: Predictor + ?Sized>(
    dataset: &Dataset,
    predictor: &P,
    epoch: usize,
    split: &str,
) -> Result<Evaluation, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let preds: Vec<Prediction> = dataset
        .examples
        .par_iter()
        .map(|ex| predictor.predict_pair(&ex.source, &ex.target))
        .collect();
    let max_d = dataset.max_distance();
    let mut per = vec![(0usize, 0.0f64, 0usize); max_d];
    let (mut abs, mut hits, mut dmse, mut dce) = (0.0, 0usize, 0.0, 0.0);
    for (ex, p) in dataset.examples.iter().zip(&preds) {
        if ex.distance < 1 {
            return Err(TrainError::Domain(ex.distance));
        }
        let d = ex.distance as f64;
        let err = (p.distance - d).abs();
        let hit = argmax(&p.logits) == ex.first.index();
        abs += err;
        hits += hit as usize;
        dmse += (p.distance - d).powi(2) / d.sqrt();
        dce += (logsumexp(&p.logits) - p.logits[ex.first.index()]) / d.sqrt();
        let cell = &mut per[ex.distance - 1];
        cell.0 += 1;
        cell.1 += err;
        cell.2 += hit as usize;
    }
    let n = dataset.len() as f64;
    let row = MetricRow {
        epoch,
        split: split.to_string(),
        mae: abs / n,
        accuracy: hits as f64 / n,
        discounted_mse: dmse / n,
        discounted_ce: dce / n,
    };
    if !(row.mae.is_finite() && row.discounted_mse.is_finite() && row.discounted_ce.is_finite()) {
        return Err(NumericsError::NonFinite("evaluation").into());
    }
    let per_distance = per
        .into_iter()
        .enumerate()
        .filter(|(_, c)| c.0 > 0)
        .map(|(i, (count, err, hit))| DistanceRow {
            distance: i + 1,
            count,
            mae: err / count as f64,
            accuracy: hit as f64 / count as f64,
        })
        .collect();
    Ok(Evaluation { row, per_distance })
}

/// Fraction of examples whose top-ranked transformation starts some shortest
/// path, not just the recorded one.
pub fn any_valid_accuracy<P: Predictor + ?Sized>(
    dataset: &Dataset,
    predictor: &P,
) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let hits: Vec<bool> = dataset
        .examples
        .par_iter()
        .map(|ex| {
            let p = predictor.predict_pair(&ex.source, &ex.target);
            let best = argmax(&p.logits);
            crate::oracle::shortest_first_transformations(&ex.source, &ex.target, ex.distance)
                .map(|set| set.iter().any(|t| t.index() == best))
                .unwrap_or(false)
        })
        .collect();
    Ok(hits.iter().filter(|h| **h).count() as f64 / dataset.len() as f64)
}

// Examples per gradient work unit; fixed so the reduction order does not
// depend on the thread count.
const GRAD_CHUNK: usize = 8;

/// Mean loss and mean gradient over `batch`.
pub fn batch_gradient(model: &Model, batch: &[&Example]) -> Result<(f64, Vec<Tensor>), TrainError> {
    let partials: Vec<Result<(f64, Vec<Tensor>), TrainError>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = model.zero_grads();
            let mut total = 0.0;
            for ex in chunk {
                let mut tape = Tape::new(model.params());
                let l = record_loss(&mut tape, model, ex)?;
                total += tape.scalar(l);
                tape.backward_into(l, &mut grads);
            }
            Ok((total, grads))
        })
        .collect();
    let mut grads = model.zero_grads();
    let mut total = 0.0;
    for part in partials {
        let (l, g) = part?;
        total += l;
        for (acc, g) in grads.iter_mut().zip(&g) {
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    Ok((total * scale, grads))
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads
            .iter_mut()
            .for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
}

/// Trains `model` in place. Rows for epoch 0 describe the initial model;
/// every later epoch adds one row per split. `on_epoch` sees each new batch
/// of rows as it is produced.
pub fn train(
    train_set: &Dataset,
    validation: &Dataset,
    cfg: &TrainConfig,
    model: &mut Model,
    on_epoch: &mut dyn FnMut(&[MetricRow]),
) -> Result<Vec<MetricRow>, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rows = Vec::new();
    let mut report = |epoch: usize, model: &Model, rows: &mut Vec<MetricRow>| -> Result<(), TrainError> {
        let start = rows.len();
        rows.push(evaluate(train_set, model, epoch, "train")?.row);
        rows.push(evaluate(validation, model, epoch, "validation")?.row);
        on_epoch(&rows[start..]);
        Ok(())
    };
    report(0, model, &mut rows)?;

    let mut adam = Adam::new(cfg.adam, model.params());
    let mut order: Vec<&Example> = train_set.examples.iter().collect();
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(epoch as u64);
            order = train_set.examples.iter().collect();
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(cfg.batch_size) {
            let diverged = |model: &Model| TrainError::NonFinite {
                epoch,
                last_good: Box::new(model.clone()),
            };
            let (l, mut grads) = match batch_gradient(model, batch) {
                Ok(r) => r,
                Err(TrainError::Numerics(NumericsError::NonFinite(_))) => return Err(diverged(model)),
                Err(e) => return Err(e),
            };
            if !l.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged(model));
            }
            if let Some(c) = cfg.clip_norm {
                clip(&mut grads, c);
            }
            let before = model.clone();
            adam.step(model.params_mut(), &grads);
            if !model.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    last_good: Box::new(before),
                });
            }
        }
        report(epoch, model, &mut rows)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::grad_check;
    use crate::oracle::{generate_dataset, GenerationConfig};
    use crate::rewrite::{Transformation, TRANSFORMATION_COUNT};

    #[test]
    fn loss_arithmetic() {
        let l = loss(3.0, &[0.0; 8], 4, 5).unwrap();
        assert!((l - (1.0 + 8f64.ln()) / 2.0).abs() < 1e-15);
        assert!((l - 1.539_720_770_839_917_6).abs() < 1e-12);
        assert!(matches!(loss(1.0, &[0.0; 8], 0, 0), Err(TrainError::Domain(0))));
        assert!(matches!(loss(1.0, &[0.0; 8], 1, 8), Err(TrainError::BadClass(8))));
    }

    #[test]
    fn loss_vanishes_for_perfect_predictions() {
        let mut logits = [0.0; 8];
        logits[2] = 60.0;
        let l = loss(5.0, &logits, 5, 2).unwrap();
        assert!((0.0..1e-20).contains(&l));
    }

    #[test]
    fn discount_halves_loss_at_distance_four() {
        let logits = [0.3, -0.2, 0.0, 1.0, 0.5, 0.0, 0.0, -1.0];
        let at1 = loss(1.0 + 0.7, &logits, 1, 3).unwrap();
        let at4 = loss(4.0 + 0.7, &logits, 4, 3).unwrap();
        assert!((at4 * 2.0 - at1).abs() < 1e-12);
    }

    #[test]
    fn taped_loss_matches_scalar_loss() {
        let model = Model::init(ModelConfig::new(4), 3).unwrap();
        let (ds, _) = generate_dataset(&GenerationConfig::new(2, 1, 2..=3, 4)).unwrap();
        for ex in &ds.examples {
            let mut tape = Tape::new(model.params());
            let l = record_loss(&mut tape, &model, ex).unwrap();
            let p = model.predict(&ex.source, &ex.target);
            let want = loss(p.distance, &p.logits, ex.distance, ex.first.index()).unwrap();
            assert!((tape.scalar(l) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let mut cfg = ModelConfig::new(4);
        cfg.hidden = vec![6, 5, 4];
        let mut model = Model::init(cfg, 21).unwrap();
        // non-zero biases so their gradients are exercised away from the init
        for (k, t) in model.params_mut().iter_mut().enumerate() {
            if t.shape().len() == 1 {
                for (j, x) in t.data_mut().iter_mut().enumerate() {
                    *x = (((k * 31 + j * 17) % 13) as f64 - 6.0) / 20.0;
                }
            }
        }
        let ex = Example {
            source: "(* a (F (+ b c)))".parse().unwrap(),
            target: "(F (+ (* a b) (* a c)))".parse().unwrap(),
            distance: 2,
            first: Transformation::FocusUp,
        };
        let (_, grads) = batch_gradient(&model, &[&ex]).unwrap();
        let config = model.config().clone();
        let f = |ps: &[Tensor]| {
            let m = Model::from_params(config.clone(), ps.to_vec()).unwrap();
            let mut tape = Tape::new(m.params());
            let l = record_loss(&mut tape, &m, &ex).unwrap();
            tape.scalar(l)
        };
        let report = grad_check(f, model.params(), &grads, 1e-5);
        assert_eq!(report.coordinates, model.param_count());
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    struct Oracle;

    impl Predictor for Oracle {
        fn predict_pair(&self, source: &Expr, target: &Expr) -> Prediction {
            let d = crate::oracle::bfs_distance(source, target, 4).unwrap();
            let set = crate::oracle::shortest_first_transformations(source, target, 4).unwrap();
            let mut logits = vec![0.0; TRANSFORMATION_COUNT];
            logits[set.iter().next().unwrap().index()] = 1.0;
            Prediction {
                distance: d as f64,
                logits,
            }
        }
    }

    #[test]
    fn perfect_predictor_scores_perfectly() {
        // one shortest-first option per example so the strict metric is exact
        let (ds, _) = generate_dataset(&GenerationConfig::new(1, 3, 2..=4, 8)).unwrap();
        let ev = evaluate(&ds, &Oracle, 0, "test").unwrap();
        assert_eq!(ev.row.mae, 0.0);
        assert_eq!(ev.row.accuracy, 1.0);
        assert_eq!(ev.per_distance.len(), 1);
        assert!(evaluate(&Dataset::default(), &Oracle, 0, "x").is_err());
        assert_eq!(any_valid_accuracy(&ds, &Oracle).unwrap(), 1.0);
    }

    fn small_sets() -> (Dataset, Dataset) {
        let (ds, _) = generate_dataset(&GenerationConfig::new(3, 10, 2..=4, 1)).unwrap();
        let [a, b, _] = ds.split_balanced(0.8, 0.2);
        (a, b)
    }

    #[test]
    fn zero_epochs_leave_the_model_untouched() {
        let (tr, va) = small_sets();
        let mut model = Model::init(ModelConfig::new(4), 0).unwrap();
        let before = model.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let rows = train(&tr, &va, &cfg, &mut model, &mut |_| {}).unwrap();
        assert_eq!(model, before);
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.epoch == 0));
    }

    #[test]
    fn training_is_reproducible_and_reduces_loss() {
        let (tr, va) = small_sets();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            seed: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = Model::init(ModelConfig::new(6), 1).unwrap();
            let rows = train(&tr, &va, &cfg, &mut model, &mut |_| {}).unwrap();
            (model, rows)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(m1, m2);
        assert_eq!(metrics_csv(&r1), metrics_csv(&r2));
        let train_loss = |e: usize| {
            let r = r1.iter().find(|r| r.epoch == e && r.split == "train").unwrap();
            r.discounted_mse + r.discounted_ce
        };
        assert!(train_loss(3) < train_loss(0));
        assert_eq!(r1.len(), 8);
        let csv = metrics_csv(&r1);
        assert!(csv.starts_with("epoch,split,mae,accuracy,dmse,dce\n0,train,"));
    }

    #[test]
    fn rejects_bad_configs() {
        let (tr, va) = small_sets();
        let mut model = Model::init(ModelConfig::new(4), 0).unwrap();
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&tr, &va, &bad, &mut model, &mut |_| {}),
            Err(TrainError::BadConfig(_))
        ));
        assert!(matches!(
            train(&Dataset::default(), &va, &TrainConfig::default(), &mut model, &mut |_| {}),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn divergence_returns_last_good_model() {
        let (tr, va) = small_sets();
        let mut model = Model::init(ModelConfig::new(4), 0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e300,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        match train(&tr, &va, &cfg, &mut model, &mut |_| {}) {
            Err(TrainError::NonFinite { last_good, .. }) => assert!(last_good.is_finite()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
