//! Entropy-regularized training: cross-entropy plus `beta` times the mean CAM
//! entropy of each sample's true-class GradCAM map, optimized with Adam.
//!
//! The entropy term depends on `dy_c / dA`, so its parameter gradient is a
//! derivative of a derivative. The step graph is built once per batch size
//! and re-bound for every batch.

mod adam;
pub mod metrics;

use std::collections::HashMap;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use metrics::{parse_csv, rows_to_csv, MetricsRow, CSV_HEADER};

use crate::autodiff::{GraphError, NodeId, Tensor};
use crate::dataset::{assemble, Batcher, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::gradcam::{cam_nodes, split_maps};
use crate::measures::{entropy_nodes, measure_all, MeasureRecord};
use crate::network::{Architecture, ForwardTrace, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the CAM entropy term.
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Conv block feeding GradCAM; `None` keeps the architecture's choice.
    pub target_layer: Option<usize>,
    /// Steps between metric snapshots.
    pub log_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// When false the entropy term is left out of the graph entirely.
    pub entropy_term: bool,
    /// Penalize the maps of non-true classes as well. Not implemented;
    /// must stay false.
    pub suppress_other_classes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.0,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 20,
            seed: 0,
            target_layer: None,
            log_every: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            entropy_term: true,
            suppress_other_classes: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be a finite value >= 0, got {}", self.beta));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.log_every == 0 {
            return bad("log interval must be positive".into());
        }
        for (name, b) in [("adam beta1", self.adam_beta1), ("adam beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam epsilon must be > 0".into());
        }
        if self.suppress_other_classes {
            return bad("suppressing non-true-class maps is not supported".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    /// `arch` with this config's target layer applied.
    pub fn architecture(&self, arch: &Architecture) -> Architecture {
        let mut arch = arch.clone();
        if let Some(t) = self.target_layer {
            arch.target_layer = t;
        }
        arch
    }
}

/// `cross_entropy + beta * mean_n ce(GradCAM of sample n for its label)`.
///
/// `labels` is a `[N]` node of true classes. Gradients flow through the
/// GradCAM weights, so differentiating the result is second order.
pub fn combined_loss(trace: &mut ForwardTrace, labels: NodeId, beta: f64) -> Result<NodeId> {
    let xent = trace.graph.softmax_cross_entropy(trace.logits, labels)?;
    let cams = cam_nodes(trace, labels)?;
    let g = &mut trace.graph;
    let entropies = entropy_nodes(g, cams.maps)?;
    let entropy = g.mean_all(entropies);
    let weighted = g.scale(entropy, beta)?;
    Ok(g.add(xent, weighted)?)
}

struct StepGraph {
    trace: ForwardTrace,
    labels: NodeId,
    loss: NodeId,
    grads: Vec<NodeId>,
}

impl StepGraph {
    fn build(arch: &Architecture, batch: usize, cfg: &TrainConfig) -> Result<Self> {
        let mut trace = ForwardTrace::build(arch, batch)?;
        let labels = trace.graph.input("labels", &[batch])?;
        let loss = if cfg.entropy_term {
            combined_loss(&mut trace, labels, cfg.beta)?
        } else {
            trace.graph.softmax_cross_entropy(trace.logits, labels)?
        };
        let params = trace.params.clone();
        let grads = trace.graph.gradients(loss, &params)?;
        Ok(StepGraph {
            trace,
            labels,
            loss,
            grads,
        })
    }
}

fn label_tensor(labels: &[usize]) -> Tensor {
    Tensor::vector(labels.iter().map(|&l| l as f64).collect())
}

/// Owns the parameters, optimizer state and cached step graphs of one run.
pub struct Trainer {
    cfg: TrainConfig,
    arch: Architecture,
    params: ModelParams,
    adam: AdamState,
    graphs: HashMap<usize, StepGraph>,
    steps: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, arch: &Architecture) -> Result<Self> {
        cfg.validate()?;
        let arch = cfg.architecture(arch);
        let params = ModelParams::init(&arch, cfg.seed)?;
        Self::from_params(cfg, params)
    }

    pub fn from_params(cfg: &TrainConfig, params: ModelParams) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            cfg: cfg.clone(),
            arch: params.arch.clone(),
            adam: AdamState::new(&params),
            params,
            graphs: HashMap::new(),
            steps: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Loss and parameter gradients for one batch, without updating.
    pub fn loss_and_grads(&mut self, images: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let batch = labels.len();
        if !self.graphs.contains_key(&batch) {
            let g = StepGraph::build(&self.arch, batch, &self.cfg)?;
            self.graphs.insert(batch, g);
        }
        let sg = self.graphs.get_mut(&batch).expect("just inserted");
        sg.trace.bind_params(&self.params)?;
        sg.trace.bind_images(images)?;
        sg.trace.graph.bind(sg.labels, label_tensor(labels))?;
        let mut wanted = vec![sg.loss];
        wanted.extend_from_slice(&sg.grads);
        let mut values = sg.trace.graph.eval(&wanted)?;
        let loss = values.remove(0).item().expect("scalar loss");
        Ok((loss, values))
    }

    /// One Adam step on a batch. Returns the loss before the update.
    pub fn step(&mut self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let step = self.steps + 1;
        let (loss, grads) = match self.loss_and_grads(images, labels) {
            Ok(v) => v,
            Err(Error::Graph(GraphError::NonFinite { .. })) => {
                return Err(Error::NonFiniteLoss { step })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        adam_step(&mut self.params, &grads, &mut self.adam, &self.cfg.adam())?;
        self.steps = step;
        Ok(loss)
    }
}

/// Per-split evaluation results before aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitEvaluation {
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
    /// True-class measures per sample.
    pub measures: Vec<MeasureRecord>,
    pub mean_cross_entropy: f64,
}

impl SplitEvaluation {
    pub fn accuracy(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        let hits = self
            .predictions
            .iter()
            .zip(&self.labels)
            .filter(|(p, l)| p == l)
            .count();
        hits as f64 / self.labels.len() as f64
    }

    pub fn row(&self, step: usize, split: Split) -> MetricsRow {
        let n = self.measures.len().max(1) as f64;
        let mean = |f: fn(&MeasureRecord) -> f64| self.measures.iter().map(f).sum::<f64>() / n;
        MetricsRow {
            step,
            split,
            accuracy: self.accuracy(),
            ce_mean: mean(|m| m.ce),
            ca_mean: mean(|m| m.ca),
            cd_mean: mean(|m| m.cd),
            loss: self.mean_cross_entropy,
        }
    }
}

struct EvalGraph {
    trace: ForwardTrace,
    labels: NodeId,
    xent: NodeId,
    maps: NodeId,
}

/// Forward-only evaluation with cached graphs per chunk size. Has no effect
/// on training state.
pub struct Evaluator {
    arch: Architecture,
    chunk: usize,
    graphs: HashMap<usize, EvalGraph>,
}

/// Index of the largest logit in each row; ties go to the first.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Numerically stable softmax of one row of logits.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl Evaluator {
    pub fn new(arch: &Architecture) -> Self {
        Evaluator {
            arch: arch.clone(),
            chunk: 100,
            graphs: HashMap::new(),
        }
    }

    pub fn with_chunk(mut self, chunk: usize) -> Self {
        self.chunk = chunk.max(1);
        self
    }

    fn graph(&mut self, batch: usize) -> Result<&mut EvalGraph> {
        if !self.graphs.contains_key(&batch) {
            let mut trace = ForwardTrace::build(&self.arch, batch)?;
            let labels = trace.graph.input("labels", &[batch])?;
            let xent = trace.graph.softmax_cross_entropy(trace.logits, labels)?;
            let maps = cam_nodes(&mut trace, labels)?.maps;
            self.graphs.insert(
                batch,
                EvalGraph {
                    trace,
                    labels,
                    xent,
                    maps,
                },
            );
        }
        Ok(self.graphs.get_mut(&batch).expect("just inserted"))
    }

    pub fn evaluate(&mut self, params: &ModelParams, split: &[Sample]) -> Result<SplitEvaluation> {
        let mut out = SplitEvaluation {
            predictions: Vec::with_capacity(split.len()),
            labels: Vec::with_capacity(split.len()),
            probabilities: Vec::with_capacity(split.len()),
            measures: Vec::with_capacity(split.len()),
            mean_cross_entropy: 0.0,
        };
        let indices: Vec<usize> = (0..split.len()).collect();
        let mut xent_total = 0.0;
        for chunk in indices.chunks(self.chunk) {
            let (images, labels) = assemble(split, chunk)?;
            let eg = self.graph(chunk.len())?;
            eg.trace.bind_params(params)?;
            eg.trace.bind_images(&images)?;
            eg.trace.graph.bind(eg.labels, label_tensor(&labels))?;
            let mut v = eg.trace.graph.eval(&[eg.trace.logits, eg.xent, eg.maps])?;
            let maps = v.pop().expect("maps");
            let xent = v.pop().expect("xent").item().expect("scalar");
            let logits = v.pop().expect("logits");
            xent_total += xent * chunk.len() as f64;
            out.predictions.extend(argmax_rows(&logits));
            let c = logits.shape()[1];
            out.probabilities
                .extend(logits.data().chunks_exact(c).map(softmax_row));
            for (m, &l) in split_maps(&maps)?.into_iter().zip(&labels) {
                out.measures.push(measure_all(&m.with_class(l)));
            }
            out.labels.extend(labels);
        }
        if !split.is_empty() {
            out.mean_cross_entropy = xent_total / split.len() as f64;
        }
        Ok(out)
    }
}

/// Accuracy and mean true-class measures of `params` on one split.
pub fn evaluate(params: &ModelParams, samples: &[Sample], split: Split, step: usize) -> Result<MetricsRow> {
    let mut ev = Evaluator::new(&params.arch);
    Ok(ev.evaluate(params, samples)?.row(step, split))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub rows: Vec<MetricsRow>,
}

/// Seed of the batch-order stream, derived from the run seed.
fn batch_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

/// Trains from a fresh initialization. Metrics for both splits are recorded at
/// step 0, every `log_every` steps, and after the final step.
pub fn train(cfg: &TrainConfig, arch: &Architecture, data: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, arch, data, |_, _| {})
}

/// [`train`] with a callback after every optimizer step.
pub fn train_with(
    cfg: &TrainConfig,
    arch: &Architecture,
    data: &Dataset,
    on_step: impl FnMut(usize, &ModelParams),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = ModelParams::init(&cfg.architecture(arch), cfg.seed)?;
    train_from(cfg, params, data, on_step)
}

/// Continues training from existing parameters with fresh optimizer state.
/// Step numbering restarts at 0. `cfg.target_layer` is ignored in favor of
/// the parameters' architecture.
pub fn train_from(
    cfg: &TrainConfig,
    params: ModelParams,
    data: &Dataset,
    mut on_step: impl FnMut(usize, &ModelParams),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let mut trainer = Trainer::from_params(cfg, params)?;
    let s = trainer.params().arch.input_size;
    if data.image_size != s || data.channels != trainer.params().arch.input_channels {
        return Err(Error::Config(format!(
            "dataset images ({}x{}x{}) do not match the network input",
            data.channels, data.image_size, data.image_size
        )));
    }
    if data.classes != trainer.params().arch.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, network has {}",
            data.classes,
            trainer.params().arch.classes
        )));
    }
    let mut batcher = Batcher::new(data.train.len(), cfg.batch_size, batch_seed(cfg.seed))?;
    let mut evaluator = Evaluator::new(&trainer.params().arch);
    let mut rows = Vec::new();
    let mut log = |trainer: &Trainer, rows: &mut Vec<MetricsRow>| -> Result<()> {
        for split in [Split::Train, Split::Test] {
            let samples = data.split(split);
            if samples.is_empty() {
                continue;
            }
            let row = evaluator.evaluate(trainer.params(), samples)?.row(trainer.steps(), split);
            log::info!(
                "step {} {}: acc {:.4} ce {:.4} ca {:.4} cd {:.4} loss {:.4}",
                row.step,
                split.as_str(),
                row.accuracy,
                row.ce_mean,
                row.ca_mean,
                row.cd_mean,
                row.loss
            );
            rows.push(row);
        }
        Ok(())
    };
    log(&trainer, &mut rows)?;
    for _ in 0..cfg.epochs {
        for batch in batcher.epoch() {
            let (images, labels) = assemble(&data.train, &batch)?;
            trainer.step(&images, &labels)?;
            on_step(trainer.steps(), trainer.params());
            if trainer.steps() % cfg.log_every == 0 {
                log(&trainer, &mut rows)?;
            }
        }
    }
    if trainer.steps() % cfg.log_every != 0 {
        log(&trainer, &mut rows)?;
    }
    Ok(TrainOutcome {
        params: trainer.into_params(),
        rows,
    })
}
