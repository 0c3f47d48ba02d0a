//! Parameter initialization, the minibatch training loop, prediction,
//! learning-curve logging and checkpoints.

mod checkpoint;
mod model;
mod optim;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::feature_io::VideoSequence;
use crate::fusion_head::Mode;
use crate::params::{ParamId, ParamStore};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use model::{
    CrfParams, Head, HeadKind, Inspection, Modality, Model, ModelConfig, OsMsl, StepOutput, Trunk, TrunkPass,
};
pub use optim::{clip_global_norm, Adam};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Videos per optimizer step.
    pub batch_size: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 30,
            batch_size: 2,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("lr must be >= 0 and betas in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("adam_eps must be positive and clip_norm >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub iteration: usize,
    pub task: String,
    pub raw_loss: f64,
    pub normalized_loss: f64,
}

/// Per-iteration losses; each task's series is normalized by its first value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CurveLog {
    pub records: Vec<CurveRecord>,
    first: BTreeMap<String, f64>,
}

const CURVE_HEADER: &str = "iteration,task,raw_loss,normalized_loss";

impl CurveLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, iteration: usize, task: &str, raw_loss: f64) {
        let first = *self.first.entry(task.to_string()).or_insert(raw_loss);
        let normalized_loss = if first == 0.0 { 1.0 } else { raw_loss / first };
        self.records.push(CurveRecord {
            iteration,
            task: task.to_string(),
            raw_loss,
            normalized_loss,
        });
    }

    pub fn tasks(&self) -> Vec<String> {
        self.first.keys().cloned().collect()
    }

    pub fn series(&self, task: &str) -> Vec<&CurveRecord> {
        self.records.iter().filter(|r| r.task == task).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CURVE_HEADER}\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.iteration, r.task, r.raw_loss, r.normalized_loss
            ));
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_csv().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Reads a CSV written by [`CurveLog::save_csv`]; normalized values are
    /// recomputed from the raw losses.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut log = CurveLog::new();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if i == 0 {
                if line.trim() != CURVE_HEADER {
                    return Err(parse_err(1, format!("expected header {CURVE_HEADER:?}")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(parse_err(i + 1, "expected 4 fields".into()));
            }
            let iteration = f[0].parse().map_err(|e| parse_err(i + 1, format!("{e}")))?;
            let raw: f64 = f[2].parse().map_err(|e| parse_err(i + 1, format!("{e}")))?;
            log.push(iteration, f[1], raw);
        }
        Ok(log)
    }
}

/// Builds the loss graph for one minibatch, given item indices.
pub type StepFn<'a> =
    dyn FnMut(&mut Graph, &ParamStore, &[usize], Option<&mut ChaCha8Rng>) -> Result<StepOutput> + 'a;

/// Generic minibatch loop: shuffles `n_items` each epoch, steps Adam on the
/// `trainable` subset, clips, updates batch-norm running statistics and logs
/// every component loss.
pub fn fit(
    store: &mut ParamStore,
    trainable: &[ParamId],
    n_items: usize,
    cfg: &TrainConfig,
    curves: &mut CurveLog,
    step: &mut StepFn<'_>,
) -> Result<()> {
    cfg.validate()?;
    if n_items == 0 {
        return Err(Error::Config("no training items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            iteration += 1;
            let mut g = Graph::new();
            let out = step(&mut g, store, batch, Some(&mut rng))?;
            let loss = g.value(out.loss).item();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration,
                    detail: format!("epoch {epoch}, loss {loss}, per-video {:?}", out.per_video),
                });
            }
            let grads = g.backward(out.loss);
            let mut pg: Vec<(ParamId, crate::tensor::Matrix)> = g
                .param_grads(&grads)
                .into_iter()
                .filter(|(id, _)| trainable.contains(id))
                .collect();
            if let Some((id, _)) = pg.iter().find(|(_, m)| !m.all_finite()) {
                return Err(Error::NonFiniteLoss {
                    iteration,
                    detail: format!("non-finite gradient for {}", store.name(*id)),
                });
            }
            clip_global_norm(&mut pg, cfg.clip_norm);
            adam.update(store, &pg);
            for (bn, s) in &out.stats {
                bn.update_running(store, s);
            }
            for (task, value) in &out.components {
                curves.push(iteration, task, *value);
            }
            log::debug!("iteration {iteration} loss {loss:.6}");
        }
        log::info!("epoch {} done after {iteration} iterations", epoch + 1);
    }
    Ok(())
}

/// Ids of trainable entries whose name starts with `prefix`.
pub fn trainable_with_prefix(store: &ParamStore, prefix: &str) -> Vec<ParamId> {
    store
        .trainable_ids()
        .filter(|&id| store.name(id).starts_with(prefix))
        .collect()
}

/// Trains `model` on videos with gold scenes and returns the curve log.
pub fn train(model: &mut Model, videos: &[VideoSequence], cfg: &TrainConfig) -> Result<CurveLog> {
    for v in videos {
        model.trunk().check_dims(v)?;
        model::gold_of(v)?;
    }
    let mut curves = CurveLog::new();
    match &model.head {
        Head::Osmsl(head) => {
            let head = head.clone();
            let ids: Vec<ParamId> = model.store.trainable_ids().collect();
            fit_head(&mut model.store, &ids, videos, cfg, &mut curves, |g, store, batch, rng| {
                head.loss(g, store, batch, Mode::Train, rng)
            })?;
        }
        Head::Multitask(head) => {
            let head = head.clone();
            let ids: Vec<ParamId> = model.store.trainable_ids().collect();
            fit_head(&mut model.store, &ids, videos, cfg, &mut curves, |g, store, batch, rng| {
                head.loss(g, store, batch, Mode::Train, rng)
            })?;
        }
        Head::Twostage(head) => {
            let head = head.clone();
            head.train(&mut model.store, videos, cfg, &mut curves)?;
        }
    }
    Ok(curves)
}

/// [`fit`] over whole videos.
pub(crate) fn fit_head(
    store: &mut ParamStore,
    ids: &[ParamId],
    videos: &[VideoSequence],
    cfg: &TrainConfig,
    curves: &mut CurveLog,
    mut loss: impl FnMut(&mut Graph, &ParamStore, &[&VideoSequence], Option<&mut ChaCha8Rng>) -> Result<StepOutput>,
) -> Result<()> {
    let mut step = |g: &mut Graph, store: &ParamStore, batch: &[usize], rng: Option<&mut ChaCha8Rng>| {
        let vs: Vec<&VideoSequence> = batch.iter().map(|&i| &videos[i]).collect();
        loss(g, store, &vs, rng)
    };
    fit(store, ids, videos.len(), cfg, curves, &mut step)
}

pub(crate) use model::gold_of;
