//! Model assembly: the shared trunk (DiffCorrNet → batch norm → fusion →
//! encoder), the link-tagging head with its CRF, and the [`Model`] wrapper
//! that also hosts the baseline heads.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::baselines::{MultiTask, TwoStage};
use crate::crf::{Crf, TransitionMask};
use crate::diffcorr::{enhance, DiffCorrConfig, DiffCorrParams};
use crate::error::{Error, Result};
use crate::feature_io::VideoSequence;
use crate::fusion_head::{chunk_plan, BatchNorm, BatchStats, Emission, Encoder, EncoderConfig, Mode};
use crate::label_scheme::{LabelScheme, LinkTag, SceneAnnotation};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub diffcorr: DiffCorrConfig,
    pub encoder: EncoderConfig,
    pub use_diffcorr: bool,
    pub use_batch_norm: bool,
    pub use_vis: bool,
    pub use_aud: bool,
    /// `false` trains with per-shot cross-entropy and decodes by argmax + repair.
    pub use_crf: bool,
    /// `false` leaves the CRF unconstrained; decoding then repairs the path.
    pub hard_mask: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub chunk_overlap: usize,
    pub lambda_seg: f64,
    pub lambda_cls: f64,
    pub stage2_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            diffcorr: DiffCorrConfig::default(),
            encoder: EncoderConfig::default(),
            use_diffcorr: true,
            use_batch_norm: true,
            use_vis: true,
            use_aud: true,
            use_crf: true,
            hard_mask: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            chunk_overlap: 32,
            lambda_seg: 1.0,
            lambda_cls: 1.0,
            stage2_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_vis && !self.use_aud {
            return Err(Error::Config("at least one modality must be enabled".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be positive, bn_momentum in [0, 1]".into()));
        }
        if !(self.lambda_seg >= 0.0 && self.lambda_cls >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.stage2_hidden == 0 {
            return Err(Error::Config("stage2_hidden must be positive".into()));
        }
        self.encoder.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Osmsl,
    Multitask,
    Twostage,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Osmsl => "osmsl",
            HeadKind::Multitask => "multitask",
            HeadKind::Twostage => "twostage",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "osmsl" => Ok(HeadKind::Osmsl),
            "multitask" => Ok(HeadKind::Multitask),
            "twostage" => Ok(HeadKind::Twostage),
            other => Err(Error::Config(format!("unknown head {other:?}"))),
        }
    }
}

/// Graph pieces of one training step.
pub struct StepOutput {
    pub loss: Var,
    /// Raw per-task losses for the curve log.
    pub components: Vec<(&'static str, f64)>,
    pub per_video: Vec<f64>,
    pub stats: Vec<(BatchNorm, BatchStats)>,
}

#[derive(Clone, Debug)]
pub struct Modality {
    pub d_in: usize,
    pub diffcorr: Option<DiffCorrParams>,
    pub bn: Option<BatchNorm>,
}

impl Modality {
    pub fn d_out(&self) -> usize {
        self.diffcorr.as_ref().map_or(self.d_in, DiffCorrParams::d_out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Which {
    Vis,
    Aud,
}

/// DiffCorrNet per modality, batch norm, early fusion and the encoder.
#[derive(Clone, Debug)]
pub struct Trunk {
    pub cfg: ModelConfig,
    pub dims: (usize, usize),
    pub vis: Option<Modality>,
    pub aud: Option<Modality>,
    pub encoder: Encoder,
}

pub struct TrunkPass {
    pub f3: Vec<Var>,
    pub stats: Vec<(BatchNorm, BatchStats)>,
}

impl Trunk {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        prefix: &str,
        cfg: &ModelConfig,
        dims: (usize, usize),
    ) -> Result<Self> {
        cfg.validate()?;
        let mut modality = |on: bool, tag: &str, d_in: usize| -> Result<Option<Modality>> {
            if !on {
                return Ok(None);
            }
            if d_in == 0 {
                return Err(Error::Config(format!("{tag} features are empty")));
            }
            let diffcorr = if cfg.use_diffcorr {
                Some(DiffCorrParams::new(store, init, &format!("{prefix}diffcorr_{tag}"), d_in, &cfg.diffcorr)?)
            } else {
                None
            };
            let d_out = diffcorr.as_ref().map_or(d_in, DiffCorrParams::d_out);
            let bn = cfg
                .use_batch_norm
                .then(|| BatchNorm::new(store, &format!("{prefix}bn_{tag}"), d_out, cfg.bn_momentum, cfg.bn_eps));
            Ok(Some(Modality { d_in, diffcorr, bn }))
        };
        let vis = modality(cfg.use_vis, "vis", dims.0)?;
        let aud = modality(cfg.use_aud, "aud", dims.1)?;
        let d_fused = vis.iter().chain(&aud).map(Modality::d_out).sum();
        let encoder = Encoder::new(store, init, &format!("{prefix}encoder"), d_fused, &cfg.encoder)?;
        Ok(Trunk {
            cfg: cfg.clone(),
            dims,
            vis,
            aud,
            encoder,
        })
    }

    pub fn d_fused(&self) -> usize {
        self.vis.iter().chain(&self.aud).map(Modality::d_out).sum()
    }

    pub fn d_model(&self) -> usize {
        self.cfg.encoder.d_m
    }

    pub fn check_dims(&self, v: &VideoSequence) -> Result<()> {
        if v.shots.is_empty() {
            return Err(Error::InvalidShot(format!("video {} has no shots", v.video_id)));
        }
        if v.dims() != self.dims {
            return Err(Error::DimMismatch(format!(
                "video {} has (vis, aud) dims {:?}, model expects {:?}",
                v.video_id,
                v.dims(),
                self.dims
            )));
        }
        Ok(())
    }

    /// Fused features per video. In train mode batch norm pools the shots of
    /// every video in `videos`.
    pub fn fused(&self, g: &mut Graph, store: &ParamStore, videos: &[&VideoSequence], mode: Mode) -> Result<TrunkPass> {
        for v in videos {
            self.check_dims(v)?;
        }
        let mut blocks = Vec::new();
        let mut stats = Vec::new();
        for (m, which) in [(&self.vis, Which::Vis), (&self.aud, Which::Aud)] {
            let Some(m) = m else { continue };
            let per_video: Vec<Var> = videos
                .iter()
                .map(|v| {
                    let raw = match which {
                        Which::Vis => v.vis_matrix(),
                        Which::Aud => v.aud_matrix(),
                    };
                    let x = g.constant(raw);
                    match &m.diffcorr {
                        Some(dc) => enhance(g, store, dc, x).f2,
                        None => x,
                    }
                })
                .collect();
            let pooled = if per_video.len() == 1 {
                per_video[0]
            } else {
                g.concat_rows(&per_video)
            };
            let normalized = match (&m.bn, mode) {
                (Some(bn), Mode::Train) => {
                    let (y, s) = bn.forward_train(g, store, pooled)?;
                    stats.push((*bn, s));
                    y
                }
                (Some(bn), Mode::Eval) => bn.forward_eval(g, store, pooled),
                (None, _) => pooled,
            };
            blocks.push(normalized);
        }
        let all = if blocks.len() == 1 {
            blocks[0]
        } else {
            g.concat_cols(&blocks)
        };
        let f3 = if videos.len() == 1 {
            vec![all]
        } else {
            let mut off = 0;
            videos
                .iter()
                .map(|v| {
                    let part = g.slice_rows(all, off, off + v.n_shots());
                    off += v.n_shots();
                    part
                })
                .collect()
        };
        Ok(TrunkPass { f3, stats })
    }

    /// Encoder states for one video, chunked when longer than `n_max`.
    pub fn hidden(&self, g: &mut Graph, store: &ParamStore, f3: Var, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let n = g.value(f3).rows();
        let plan = chunk_plan(n, self.cfg.encoder.n_max, self.cfg.chunk_overlap);
        if plan.len() == 1 {
            return Ok(self.encoder.forward(g, store, f3, rng)?.hidden);
        }
        let mut parts = Vec::with_capacity(plan.len());
        for c in plan {
            let x = g.slice_rows(f3, c.start, c.end);
            let h = self.encoder.forward(g, store, x, rng.as_deref_mut())?.hidden;
            parts.push(g.slice_rows(h, c.keep_start - c.start, c.keep_end - c.start));
        }
        Ok(g.concat_rows(&parts))
    }
}

pub(crate) fn gold_of<'a>(v: &'a VideoSequence) -> Result<&'a [SceneAnnotation]> {
    v.scenes.as_deref().ok_or_else(|| Error::InvalidPartition {
        video_id: v.video_id.clone(),
        reason: "no gold scenes".into(),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct CrfParams {
    pub transitions: ParamId,
    pub start: ParamId,
    pub end: ParamId,
}

/// The link-tagging head: emissions over the tag table plus a CRF.
#[derive(Clone, Debug)]
pub struct OsMsl {
    pub scheme: LabelScheme,
    pub trunk: Trunk,
    pub emission: Emission,
    pub crf: Option<CrfParams>,
    pub mask: Option<TransitionMask>,
}

/// Per-shot decoding internals for one video.
#[derive(Clone, Debug)]
pub struct Inspection {
    pub emissions: Matrix,
    /// Tag posteriors (softmax of emissions when the CRF is disabled).
    pub marginals: Matrix,
    pub tags: Vec<LinkTag>,
    pub scenes: Vec<SceneAnnotation>,
}

impl OsMsl {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        prefix: &str,
        cfg: &ModelConfig,
        scheme: &LabelScheme,
        dims: (usize, usize),
    ) -> Result<Self> {
        let trunk = Trunk::new(store, init, prefix, cfg, dims)?;
        let t = scheme.num_tags();
        let emission = Emission::new(store, init, &format!("{prefix}emission"), trunk.d_model(), t);
        let crf = cfg.use_crf.then(|| CrfParams {
            transitions: store.add(format!("{prefix}crf.transitions"), Matrix::zeros(t, t), true),
            start: store.add(format!("{prefix}crf.start"), Matrix::zeros(1, t), true),
            end: store.add(format!("{prefix}crf.end"), Matrix::zeros(1, t), true),
        });
        let mask = (cfg.use_crf && cfg.hard_mask).then(|| scheme.transition_mask());
        Ok(OsMsl {
            scheme: scheme.clone(),
            trunk,
            emission,
            crf,
            mask,
        })
    }

    /// CRF with the current parameter values.
    pub fn crf(&self, store: &ParamStore) -> Option<Crf> {
        self.crf.map(|p| Crf {
            transitions: store.get(p.transitions).clone(),
            start: store.get(p.start).as_slice().to_vec(),
            end: store.get(p.end).as_slice().to_vec(),
            mask: self.mask.clone(),
        })
    }

    pub fn emissions(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        videos: &[&VideoSequence],
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<Var>, Vec<(BatchNorm, BatchStats)>)> {
        let pass = self.trunk.fused(g, store, videos, mode)?;
        let mut out = Vec::with_capacity(videos.len());
        for f3 in pass.f3 {
            let h = self.trunk.hidden(g, store, f3, rng.as_deref_mut())?;
            out.push(self.emission.forward(g, store, h));
        }
        Ok((out, pass.stats))
    }

    /// Mean over videos of the sequence NLL (or summed per-shot cross-entropy
    /// without the CRF).
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        videos: &[&VideoSequence],
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutput> {
        if videos.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let (ems, stats) = self.emissions(g, store, videos, mode, rng)?;
        let mut terms = Vec::with_capacity(videos.len());
        let mut per_video = Vec::with_capacity(videos.len());
        for (v, em) in videos.iter().zip(ems) {
            let gold = self.scheme.encode_indices(gold_of(v)?, v.n_shots())?;
            let nll = match self.crf {
                Some(p) => {
                    let tr = g.param(store, p.transitions);
                    let st = g.param(store, p.start);
                    let en = g.param(store, p.end);
                    g.crf_nll(em, tr, st, en, self.mask.as_ref(), &gold)
                }
                None => {
                    let ce = g.softmax_cross_entropy(em, &gold);
                    g.scale(ce, gold.len() as f64)
                }
            };
            per_video.push(g.value(nll).item());
            terms.push(nll);
        }
        let total = if terms.len() == 1 {
            terms[0]
        } else {
            let cat = g.concat_cols(&terms);
            g.sum(cat)
        };
        let loss = g.scale(total, 1.0 / videos.len() as f64);
        let value = g.value(loss).item();
        Ok(StepOutput {
            loss,
            components: vec![("osmsl", value)],
            per_video,
            stats,
        })
    }

    fn eval_emissions(&self, store: &ParamStore, v: &VideoSequence) -> Result<Matrix> {
        let mut g = Graph::new();
        let (ems, _) = self.emissions(&mut g, store, &[v], Mode::Eval, None)?;
        Ok(g.value(ems[0]).clone())
    }

    /// Best tag path: constrained Viterbi, or an unconstrained choice passed
    /// through grammar repair.
    pub fn decode_tags(&self, store: &ParamStore, emissions: &Matrix) -> Vec<LinkTag> {
        let (path, constrained) = match self.crf(store) {
            Some(crf) => (crf.viterbi(emissions).0, crf.mask.is_some()),
            None => {
                let argmax = (0..emissions.rows())
                    .map(|i| {
                        let row = emissions.row(i);
                        let mut best = 0;
                        for (k, &x) in row.iter().enumerate() {
                            if x > row[best] {
                                best = k;
                            }
                        }
                        best
                    })
                    .collect();
                (argmax, false)
            }
        };
        let tags: Vec<LinkTag> = path.iter().map(|&i| self.scheme.tag(i)).collect();
        if constrained {
            tags
        } else {
            self.scheme.repair(&tags)
        }
    }

    pub fn predict_video(&self, store: &ParamStore, v: &VideoSequence) -> Result<Vec<SceneAnnotation>> {
        let em = self.eval_emissions(store, v)?;
        self.scheme.decode(&self.decode_tags(store, &em))
    }

    pub fn inspect(&self, store: &ParamStore, v: &VideoSequence) -> Result<Inspection> {
        let emissions = self.eval_emissions(store, v)?;
        let marginals = match self.crf(store) {
            Some(crf) => crf.marginals(&emissions),
            None => {
                let mut m = emissions.clone();
                for i in 0..m.rows() {
                    crate::autodiff::softmax_in_place(m.row_mut(i));
                }
                m
            }
        };
        let tags = self.decode_tags(store, &emissions);
        let scenes = self.scheme.decode(&tags)?;
        Ok(Inspection {
            emissions,
            marginals,
            tags,
            scenes,
        })
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Osmsl(OsMsl),
    Multitask(MultiTask),
    Twostage(TwoStage),
}

/// A complete model: structure, scheme and parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub kind: HeadKind,
    pub scheme: LabelScheme,
    pub config: ModelConfig,
    pub dims: (usize, usize),
    pub store: ParamStore,
    pub head: Head,
}

impl Model {
    /// Builds and initializes a model; the seed fixes every initial value.
    pub fn new(
        kind: HeadKind,
        scheme: &LabelScheme,
        config: &ModelConfig,
        dims: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let head = match kind {
            HeadKind::Osmsl => Head::Osmsl(OsMsl::new(&mut store, &mut init, "", config, scheme, dims)?),
            HeadKind::Multitask => Head::Multitask(MultiTask::new(&mut store, &mut init, config, scheme, dims)?),
            HeadKind::Twostage => Head::Twostage(TwoStage::new(&mut store, &mut init, config, scheme, dims)?),
        };
        Ok(Model {
            kind,
            scheme: scheme.clone(),
            config: config.clone(),
            dims,
            store,
            head,
        })
    }

    pub fn trunk(&self) -> &Trunk {
        match &self.head {
            Head::Osmsl(h) => &h.trunk,
            Head::Multitask(h) => &h.trunk,
            Head::Twostage(h) => &h.stage1.trunk,
        }
    }

    pub fn check_scheme(&self, scheme: &LabelScheme) -> Result<()> {
        if scheme.fingerprint() != self.scheme.fingerprint() {
            return Err(Error::SchemeMismatch {
                expected: self.scheme.describe(),
                found: scheme.describe(),
            });
        }
        Ok(())
    }

    /// The training objective on `videos` recorded into `g`.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        videos: &[&VideoSequence],
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutput> {
        match &self.head {
            Head::Osmsl(h) => h.loss(g, &self.store, videos, mode, rng),
            Head::Multitask(h) => h.loss(g, &self.store, videos, mode, rng),
            Head::Twostage(h) => h.stage1.loss(g, &self.store, videos, mode, rng),
        }
    }

    /// Loss value and per-video terms without gradients.
    pub fn forward_loss(&self, videos: &[&VideoSequence], mode: Mode) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let out = self.loss_graph(&mut g, videos, mode, None)?;
        Ok((g.value(out.loss).item(), out.per_video))
    }

    /// Train-mode loss and the gradient of every bound parameter.
    pub fn loss_and_grads(&self, videos: &[&VideoSequence]) -> Result<(f64, Vec<(ParamId, Matrix)>)> {
        let mut g = Graph::new();
        let out = self.loss_graph(&mut g, videos, Mode::Train, None)?;
        let grads = g.backward(out.loss);
        Ok((g.value(out.loss).item(), g.param_grads(&grads)))
    }

    pub fn predict_video(&self, v: &VideoSequence) -> Result<Vec<SceneAnnotation>> {
        match &self.head {
            Head::Osmsl(h) => h.predict_video(&self.store, v),
            Head::Multitask(h) => h.predict_video(&self.store, v),
            Head::Twostage(h) => h.predict_video(&self.store, v),
        }
    }

    /// Copies of `videos` carrying predicted scenes. Videos are independent
    /// in eval mode, so `threads > 1` splits them across workers without
    /// changing any result.
    pub fn predict(&self, videos: &[VideoSequence], threads: usize) -> Result<Vec<VideoSequence>> {
        let run = |chunk: &[VideoSequence]| -> Result<Vec<VideoSequence>> {
            chunk
                .iter()
                .map(|v| {
                    Ok(VideoSequence {
                        scenes: Some(self.predict_video(v)?),
                        ..v.clone()
                    })
                })
                .collect()
        };
        if threads <= 1 || videos.len() < 2 {
            return run(videos);
        }
        let per = videos.len().div_ceil(threads);
        let results: Vec<Result<Vec<VideoSequence>>> = std::thread::scope(|s| {
            let handles: Vec<_> = videos.chunks(per).map(|c| s.spawn(move || run(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("prediction worker panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(videos.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    /// Emissions, marginals and decoded tags of the link-tagging head
    /// (the first stage for the two-stage model).
    pub fn inspect(&self, v: &VideoSequence) -> Result<Inspection> {
        match &self.head {
            Head::Osmsl(h) => h.inspect(&self.store, v),
            Head::Twostage(h) => h.stage1.inspect(&self.store, v),
            Head::Multitask(_) => Err(Error::Config("the multitask head has no tag emissions".into())),
        }
    }
}
