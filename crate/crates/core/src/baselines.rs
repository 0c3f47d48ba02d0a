//! Comparison systems on the shared trunk.
//!
//! * Multi-task: a per-shot boundary logit (binary cross-entropy against "this
//!   shot ends a scene") and per-shot class logits (cross-entropy against the
//!   shot's scene category). Decoding thresholds the boundary probability at
//!   0.5, always closes the last shot, and labels each segment by majority
//!   vote of the per-shot argmax (ties to the lower category).
//! * Two-stage: a segmentation-only link-tagging model, followed by a scene
//!   classifier over fused features mean-pooled inside each predicted
//!   segment. Errors of the first stage propagate to the second.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::feature_io::VideoSequence;
use crate::fusion_head::Mode;
use crate::label_scheme::{CategoryId, LabelScheme, LinkKind, LinkTag, SceneAnnotation, SchemeMode};
use crate::params::{Initializer, Linear, ParamStore};
use crate::tensor::Matrix;
use crate::trainer::{fit, fit_head, gold_of, trainable_with_prefix, CurveLog, ModelConfig, OsMsl, StepOutput, TrainConfig, Trunk};

fn require_categories(scheme: &LabelScheme, what: &str) -> Result<()> {
    if scheme.mode() != SchemeMode::Ssc {
        return Err(Error::MissingCategory(format!("the {what} baseline needs an SSC scheme")));
    }
    Ok(())
}

/// Per-shot boundary targets and scene categories from a gold partition.
pub fn shot_targets(scenes: &[SceneAnnotation]) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut boundary = Vec::new();
    let mut class = Vec::new();
    for s in scenes {
        let c = s
            .category
            .ok_or_else(|| Error::MissingCategory(format!("scene [{}, {}]", s.start_shot, s.end_shot)))?;
        for j in s.start_shot..=s.end_shot {
            boundary.push(if j == s.end_shot { 1.0 } else { 0.0 });
            class.push(c.0);
        }
    }
    Ok((boundary, class))
}

/// Threshold + majority-vote decoding.
pub fn multitask_decode(boundary_prob: &[f64], shot_class: &[usize]) -> Vec<SceneAnnotation> {
    assert_eq!(boundary_prob.len(), shot_class.len());
    let n = boundary_prob.len();
    let mut scenes = Vec::new();
    let mut start = 0;
    for j in 0..n {
        if boundary_prob[j] >= 0.5 || j + 1 == n {
            let top = shot_class[start..=j].iter().copied().max().unwrap_or(0);
            let mut votes = vec![0usize; top + 1];
            for &c in &shot_class[start..=j] {
                votes[c] += 1;
            }
            let mut best = 0;
            for (c, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = c;
                }
            }
            scenes.push(SceneAnnotation::new(start, j, Some(CategoryId(best))));
            start = j + 1;
        }
    }
    scenes
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = k;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct MultiTask {
    pub scheme: LabelScheme,
    pub trunk: Trunk,
    pub boundary: Linear,
    pub class: Linear,
    pub lambda_seg: f64,
    pub lambda_cls: f64,
}

/// Raw multi-task outputs for one video.
#[derive(Clone, Debug)]
pub struct MultiTaskOutputs {
    pub boundary_prob: Vec<f64>,
    pub class_logits: Matrix,
}

impl MultiTask {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        cfg: &ModelConfig,
        scheme: &LabelScheme,
        dims: (usize, usize),
    ) -> Result<Self> {
        require_categories(scheme, "multitask")?;
        let trunk = Trunk::new(store, init, "", cfg, dims)?;
        let d = trunk.d_model();
        Ok(MultiTask {
            scheme: scheme.clone(),
            boundary: Linear::new(store, init, "boundary_head", d, 1),
            class: Linear::new(store, init, "class_head", d, scheme.num_categories()),
            trunk,
            lambda_seg: cfg.lambda_seg,
            lambda_cls: cfg.lambda_cls,
        })
    }

    fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        videos: &[&VideoSequence],
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<(Var, Var)>, Vec<(crate::fusion_head::BatchNorm, crate::fusion_head::BatchStats)>)> {
        let pass = self.trunk.fused(g, store, videos, mode)?;
        let mut out = Vec::with_capacity(videos.len());
        for f3 in pass.f3 {
            let h = self.trunk.hidden(g, store, f3, rng.as_deref_mut())?;
            out.push((self.boundary.forward(g, store, h), self.class.forward(g, store, h)));
        }
        Ok((out, pass.stats))
    }

    /// `λ_seg · BCE + λ_cls · CE`, each averaged over shots then videos.
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
        let (outs, stats) = self.logits(g, store, videos, mode, rng)?;
        let mut seg_terms = Vec::new();
        let mut cls_terms = Vec::new();
        let mut per_video = Vec::new();
        for (v, (b, c)) in videos.iter().zip(outs) {
            let (bt, ct) = shot_targets(gold_of(v)?)?;
            let s = g.bce_with_logits(b, &bt);
            let k = g.softmax_cross_entropy(c, &ct);
            per_video.push(self.lambda_seg * g.value(s).item() + self.lambda_cls * g.value(k).item());
            seg_terms.push(s);
            cls_terms.push(k);
        }
        let inv = 1.0 / videos.len() as f64;
        let mean = |g: &mut Graph, terms: &[Var]| {
            let total = if terms.len() == 1 {
                terms[0]
            } else {
                let cat = g.concat_cols(terms);
                g.sum(cat)
            };
            g.scale(total, inv)
        };
        let seg = mean(g, &seg_terms);
        let cls = mean(g, &cls_terms);
        let ws = g.scale(seg, self.lambda_seg);
        let wc = g.scale(cls, self.lambda_cls);
        let loss = g.add(ws, wc);
        Ok(StepOutput {
            loss,
            components: vec![
                ("segmentation", g.value(seg).item()),
                ("classification", g.value(cls).item()),
            ],
            per_video,
            stats,
        })
    }

    pub fn outputs(&self, store: &ParamStore, v: &VideoSequence) -> Result<MultiTaskOutputs> {
        let mut g = Graph::new();
        let (outs, _) = self.logits(&mut g, store, &[v], Mode::Eval, None)?;
        let (b, c) = outs[0];
        Ok(MultiTaskOutputs {
            boundary_prob: g.value(b).as_slice().iter().map(|&z| sigmoid(z)).collect(),
            class_logits: g.value(c).clone(),
        })
    }

    pub fn predict_video(&self, store: &ParamStore, v: &VideoSequence) -> Result<Vec<SceneAnnotation>> {
        let o = self.outputs(store, v)?;
        let classes: Vec<usize> = (0..o.class_logits.rows()).map(|i| argmax(o.class_logits.row(i))).collect();
        Ok(multitask_decode(&o.boundary_prob, &classes))
    }

    /// Unconstrained per-shot link tags read straight off the two heads
    /// (boundary → scene end, per-shot argmax category). These can violate
    /// the link grammar and need repair before decoding.
    pub fn raw_tags(&self, store: &ParamStore, v: &VideoSequence) -> Result<Vec<LinkTag>> {
        let o = self.outputs(store, v)?;
        let n = o.boundary_prob.len();
        let mut tags = Vec::with_capacity(n);
        let mut start = 0;
        for j in 0..n {
            if o.boundary_prob[j] < 0.5 && j + 1 < n {
                continue;
            }
            let len = j + 1 - start;
            for (pos, shot) in (start..=j).enumerate() {
                let kind = match (len, pos) {
                    (_, p) if p + 1 == len => LinkKind::N,
                    (2, _) => LinkKind::BtoE,
                    (_, 0) => LinkKind::BtoI,
                    (_, p) if p + 2 == len => LinkKind::ItoE,
                    _ => LinkKind::ItoI,
                };
                let cat = Some(CategoryId(argmax(o.class_logits.row(shot))));
                tags.push(LinkTag::new(kind, cat));
            }
            start = j + 1;
        }
        Ok(tags)
    }
}

#[derive(Clone, Debug)]
pub struct TwoStage {
    pub scheme: LabelScheme,
    pub stage1: OsMsl,
    pub hidden: Linear,
    pub out: Linear,
}

const STAGE1: &str = "stage1.";
const STAGE2: &str = "stage2.";

impl TwoStage {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        cfg: &ModelConfig,
        scheme: &LabelScheme,
        dims: (usize, usize),
    ) -> Result<Self> {
        require_categories(scheme, "twostage")?;
        let stage1 = OsMsl::new(store, init, STAGE1, cfg, &LabelScheme::ss(), dims)?;
        let d = stage1.trunk.d_fused();
        Ok(TwoStage {
            scheme: scheme.clone(),
            hidden: Linear::new(store, init, &format!("{STAGE2}hidden"), d, cfg.stage2_hidden),
            out: Linear::new(store, init, &format!("{STAGE2}out"), cfg.stage2_hidden, scheme.num_categories()),
            stage1,
        })
    }

    /// Eval-mode fused features of `v`, mean-pooled inside each scene.
    pub fn segment_features(&self, store: &ParamStore, v: &VideoSequence, scenes: &[SceneAnnotation]) -> Result<Matrix> {
        let mut g = Graph::new();
        let pass = self.stage1.trunk.fused(&mut g, store, &[v], Mode::Eval)?;
        let f3 = g.value(pass.f3[0]);
        let mut out = Matrix::zeros(scenes.len(), f3.cols());
        for (r, s) in scenes.iter().enumerate() {
            for j in s.start_shot..=s.end_shot {
                for (o, a) in out.row_mut(r).iter_mut().zip(f3.row(j)) {
                    *o += a;
                }
            }
            let inv = 1.0 / s.len() as f64;
            for o in out.row_mut(r) {
                *o *= inv;
            }
        }
        Ok(out)
    }

    fn classifier(&self, g: &mut Graph, store: &ParamStore, feats: Var) -> Var {
        let h = self.hidden.forward(g, store, feats);
        let h = g.relu(h);
        self.out.forward(g, store, h)
    }

    /// Category per segment.
    pub fn classify(&self, store: &ParamStore, feats: &Matrix) -> Vec<CategoryId> {
        let mut g = Graph::new();
        let x = g.constant(feats.clone());
        let logits = self.classifier(&mut g, store, x);
        let l = g.value(logits);
        (0..l.rows()).map(|i| CategoryId(argmax(l.row(i)))).collect()
    }

    /// Labels the given segmentation with stage 2.
    pub fn label_segments(&self, store: &ParamStore, v: &VideoSequence, segments: &[SceneAnnotation]) -> Result<Vec<SceneAnnotation>> {
        let feats = self.segment_features(store, v, segments)?;
        let cats = self.classify(store, &feats);
        Ok(segments
            .iter()
            .zip(cats)
            .map(|(s, c)| SceneAnnotation::new(s.start_shot, s.end_shot, Some(c)))
            .collect())
    }

    pub fn predict_video(&self, store: &ParamStore, v: &VideoSequence) -> Result<Vec<SceneAnnotation>> {
        let segments = self.stage1.predict_video(store, v)?;
        self.label_segments(store, v, &segments)
    }

    /// Stage 1 on gold segmentations, then stage 2 on gold scenes pooled with
    /// the frozen stage-1 trunk.
    pub fn train(&self, store: &mut ParamStore, videos: &[VideoSequence], cfg: &TrainConfig, curves: &mut CurveLog) -> Result<()> {
        let ids1 = trainable_with_prefix(store, STAGE1);
        let mut seg_log = CurveLog::new();
        fit_head(store, &ids1, videos, cfg, &mut seg_log, |g, st, batch, rng| {
            let mut out = self.stage1.loss(g, st, batch, Mode::Train, rng)?;
            out.components = vec![("segmentation", g.value(out.loss).item())];
            Ok(out)
        })?;

        let mut feats = Vec::with_capacity(videos.len());
        let mut targets = Vec::with_capacity(videos.len());
        for v in videos {
            let gold = gold_of(v)?;
            feats.push(self.segment_features(store, v, gold)?);
            targets.push(shot_targets_per_scene(gold)?);
        }
        let ids2 = trainable_with_prefix(store, STAGE2);
        let mut cls_log = CurveLog::new();
        let mut step = |g: &mut Graph, st: &ParamStore, batch: &[usize], _rng: Option<&mut ChaCha8Rng>| {
            let rows: Vec<&Matrix> = batch.iter().map(|&i| &feats[i]).collect();
            let x = g.constant(Matrix::concat_rows(&rows));
            let t: Vec<usize> = batch.iter().flat_map(|&i| targets[i].iter().copied()).collect();
            let logits = self.classifier(g, st, x);
            let loss = g.softmax_cross_entropy(logits, &t);
            let value = g.value(loss).item();
            Ok(StepOutput {
                loss,
                components: vec![("classification", value)],
                per_video: Vec::new(),
                stats: Vec::new(),
            })
        };
        fit(store, &ids2, videos.len(), cfg, &mut cls_log, &mut step)?;
        for r in seg_log.records.iter().chain(&cls_log.records) {
            curves.push(r.iteration, &r.task, r.raw_loss);
        }
        Ok(())
    }
}

fn shot_targets_per_scene(scenes: &[SceneAnnotation]) -> Result<Vec<usize>> {
    scenes
        .iter()
        .map(|s| {
            s.category
                .map(|c| c.0)
                .ok_or_else(|| Error::MissingCategory(format!("scene [{}, {}]", s.start_shot, s.end_shot)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_scheme::check_partition;

    #[test]
    fn decode_all_low_is_one_scene() {
        let s = multitask_decode(&[0.1, 0.2, 0.49], &[1, 1, 0]);
        assert_eq!(s, vec![SceneAnnotation::new(0, 2, Some(CategoryId(1)))]);
    }

    #[test]
    fn decode_all_high_is_singletons() {
        let s = multitask_decode(&[1.0, 1.0, 1.0], &[2, 0, 1]);
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|x| x.len() == 1));
        assert_eq!(s[0].category, Some(CategoryId(2)));
    }

    #[test]
    fn majority_vote_and_ties() {
        let s = multitask_decode(&[0.0, 0.0, 0.9], &[0, 0, 1]);
        assert_eq!(s[0].category, Some(CategoryId(0)));
        let s = multitask_decode(&[0.0, 0.0, 0.0, 0.9], &[2, 1, 1, 2]);
        assert_eq!(s[0].category, Some(CategoryId(1)));
        assert_eq!(multitask_decode(&[0.5, 0.3], &[0, 1]).len(), 2);
    }

    #[test]
    fn targets_from_scenes() {
        let scenes = [
            SceneAnnotation::new(0, 1, Some(CategoryId(2))),
            SceneAnnotation::new(2, 2, Some(CategoryId(0))),
        ];
        let (b, c) = shot_targets(&scenes).unwrap();
        assert_eq!(b, vec![0.0, 1.0, 1.0]);
        assert_eq!(c, vec![2, 2, 0]);
    }

    #[test]
    fn decode_always_partitions() {
        let mut init = Initializer::new(4);
        for n in 1..40 {
            let p = init.uniform(1, n, 1.0).map(|a| (a + 1.0) / 2.0);
            let c: Vec<usize> = init.uniform(1, n, 1.0).as_slice().iter().map(|a| ((a + 1.0) * 1.99) as usize).collect();
            let s = multitask_decode(p.as_slice(), &c);
            check_partition(&s, n).unwrap();
        }
    }

    #[test]
    fn baselines_need_categories() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(1);
        let cfg = ModelConfig::default();
        assert!(matches!(
            MultiTask::new(&mut store, &mut init, &cfg, &LabelScheme::ss(), (2, 2)),
            Err(Error::MissingCategory(_))
        ));
    }
}
