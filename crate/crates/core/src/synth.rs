//! Seeded synthetic corpora with planted scene structure.
//!
//! Each scene draws a category `c` and, per modality, a scene anchor
//! `w · (μ_c + drift)` with `drift ~ N(0, σ_scene² I)`; each shot adds
//! `N(0, σ_shot² I)` noise to its scene's anchor. Scene lengths are uniform
//! on `1..=max_scene_len`. The number of scenes in a video is fixed before
//! any length is drawn (target shot count divided by the mean scene length),
//! so scene lengths stay exactly i.i.d. and video lengths land around the
//! requested range.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::{Corpus, ShotRecord, VideoSequence};
use crate::label_scheme::{CategoryId, LabelScheme, SceneAnnotation};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_videos: usize,
    /// Inclusive range of target shots per video.
    pub shots_per_video: [usize; 2],
    pub max_scene_len: usize,
    pub num_categories: usize,
    pub d_vis: usize,
    pub d_aud: usize,
    pub center_scale: f64,
    pub sigma_scene: f64,
    pub sigma_shot: f64,
    pub vis_weight: f64,
    pub aud_weight: f64,
    /// Rotate the within-class drift (centers unchanged) to mimic unseen
    /// programs.
    pub generalized: bool,
    /// Train/val/test fractions.
    pub split: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_videos: 60,
            shots_per_video: [30, 50],
            max_scene_len: 8,
            num_categories: 4,
            d_vis: 16,
            d_aud: 16,
            center_scale: 9.0,
            sigma_scene: 2.0,
            sigma_shot: 0.2,
            vis_weight: 1.0,
            aud_weight: 1.0,
            generalized: false,
            split: [40.0 / 60.0, 10.0 / 60.0, 10.0 / 60.0],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_scene_len == 0 {
            return bad("max_scene_len must be at least 1");
        }
        if self.num_categories == 0 || self.d_vis == 0 || self.d_aud == 0 {
            return bad("num_categories, d_vis and d_aud must be positive");
        }
        if self.shots_per_video[0] == 0 || self.shots_per_video[0] > self.shots_per_video[1] {
            return bad("shots_per_video must be a non-empty range of positive counts");
        }
        let sig = [self.center_scale, self.sigma_scene, self.sigma_shot, self.vis_weight, self.aud_weight];
        if sig.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return bad("scales, sigmas and weights must be finite and non-negative");
        }
        Ok(())
    }

    pub fn scheme(&self) -> LabelScheme {
        let names: Vec<String> = (0..self.num_categories).map(|c| format!("class{c}")).collect();
        LabelScheme::ssc(&names).expect("generated names are valid")
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize, sigma: f64) -> Vec<f64> {
    (0..d).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Random orthogonal matrix (Gram-Schmidt on a Gaussian matrix).
fn rotation(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = normal_vec(rng, d, 1.0);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.iter().map(|x| x / norm).collect());
        }
    }
    Matrix::from_rows(&basis)
}

struct ModalityGen {
    centers: Vec<Vec<f64>>,
    rotation: Option<Matrix>,
    weight: f64,
    d: usize,
}

impl ModalityGen {
    fn anchor(&self, rng: &mut ChaCha8Rng, c: usize, sigma_scene: f64) -> Vec<f64> {
        let drift = normal_vec(rng, self.d, sigma_scene);
        let drift = match &self.rotation {
            Some(r) => r.matmul(&Matrix::from_vec(self.d, 1, drift)).into_vec(),
            None => drift,
        };
        self.centers[c]
            .iter()
            .zip(&drift)
            .map(|(m, x)| self.weight * (m + x))
            .collect()
    }
}

/// Generates the full corpus (all videos carry gold scenes).
pub fn generate_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let scheme = cfg.scheme();
    let mut global = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut modality = |d: usize, weight: f64| {
        let centers = (0..cfg.num_categories)
            .map(|_| normal_vec(&mut global, d, cfg.center_scale))
            .collect();
        ModalityGen {
            centers,
            rotation: None,
            weight,
            d,
        }
    };
    let mut vis = modality(cfg.d_vis, cfg.vis_weight);
    let mut aud = modality(cfg.d_aud, cfg.aud_weight);
    if cfg.generalized {
        vis.rotation = Some(rotation(&mut global, cfg.d_vis));
        aud.rotation = Some(rotation(&mut global, cfg.d_aud));
    }
    let mean_len = (1 + cfg.max_scene_len) as f64 / 2.0;
    let mut videos = Vec::with_capacity(cfg.n_videos);
    for vi in 0..cfg.n_videos {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(vi as u64 + 1);
        let target = rng.random_range(cfg.shots_per_video[0]..=cfg.shots_per_video[1]);
        let n_scenes = ((target as f64 / mean_len).round() as usize).max(1);
        let video_id = format!("vid{vi:04}");
        let mut shots = Vec::new();
        let mut scenes = Vec::with_capacity(n_scenes);
        let mut t = 0.0;
        for _ in 0..n_scenes {
            let len = rng.random_range(1..=cfg.max_scene_len);
            let c = rng.random_range(0..cfg.num_categories);
            let va = vis.anchor(&mut rng, c, cfg.sigma_scene);
            let aa = aud.anchor(&mut rng, c, cfg.sigma_scene);
            let start = shots.len();
            for _ in 0..len {
                let dur = rng.random_range(1.0..6.0);
                let noise = |rng: &mut ChaCha8Rng, anchor: &[f64]| -> Vec<f64> {
                    anchor
                        .iter()
                        .map(|a| a + cfg.sigma_shot * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                };
                let vis_feat = noise(&mut rng, &va);
                let aud_feat = noise(&mut rng, &aa);
                shots.push(ShotRecord {
                    video_id: video_id.clone(),
                    shot_index: shots.len(),
                    start_sec: t,
                    end_sec: t + dur,
                    vis_feat,
                    aud_feat,
                });
                t += dur;
            }
            scenes.push(SceneAnnotation::new(start, shots.len() - 1, Some(CategoryId(c))));
        }
        videos.push(VideoSequence {
            video_id,
            shots,
            scenes: Some(scenes),
        });
    }
    Corpus::new(videos, scheme)
}

/// Video-level split by fractions; deterministic given `seed`.
pub fn split(
    videos: &[VideoSequence],
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<VideoSequence>, Vec<VideoSequence>, Vec<VideoSequence>)> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be >= 0 and sum to 1")));
    }
    let n = videos.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let counts = [n_train, n_val, n - n_train - n_val];
    for (f, c) in fractions.iter().zip(counts) {
        if *f > 0.0 && c == 0 {
            return Err(Error::Config(format!("split {fractions:?} of {n} videos leaves a requested part empty")));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let take = |idx: &[usize]| {
        let mut v: Vec<VideoSequence> = idx.iter().map(|&i| videos[i].clone()).collect();
        v.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        v
    };
    Ok((
        take(&order[..counts[0]]),
        take(&order[counts[0]..counts[0] + counts[1]]),
        take(&order[counts[0] + counts[1]..]),
    ))
}

fn shot_rows(videos: &[VideoSequence]) -> Vec<(Vec<f64>, usize)> {
    videos
        .iter()
        .filter_map(|v| v.scenes.as_ref().map(|s| (v, s)))
        .flat_map(|(v, scenes)| {
            scenes.iter().flat_map(move |s| {
                (s.start_shot..=s.end_shot).map(move |j| {
                    let shot = &v.shots[j];
                    let mut x = shot.vis_feat.clone();
                    x.extend(&shot.aud_feat);
                    (x, s.category.map_or(0, |c| c.0))
                })
            })
        })
        .collect()
}

/// Per-shot accuracy of a nearest-class-mean classifier (a linear probe)
/// fitted on `train` and scored on `test`, predicting each shot's scene
/// category from its raw concatenated features.
pub fn probe_accuracy(train: &[VideoSequence], test: &[VideoSequence]) -> f64 {
    let rows = shot_rows(train);
    let Some(d) = rows.first().map(|r| r.0.len()) else {
        return 0.0;
    };
    let k = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
    let mut means = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (x, c) in &rows {
        counts[*c] += 1;
        for (m, a) in means[*c].iter_mut().zip(x) {
            *m += a;
        }
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        for a in m.iter_mut() {
            *a /= n.max(1) as f64;
        }
    }
    let eval = shot_rows(test);
    if eval.is_empty() {
        return 0.0;
    }
    let correct = eval
        .iter()
        .filter(|(x, c)| {
            let dist = |m: &[f64]| m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let mut best = 0;
            for j in 1..k {
                if counts[j] > 0 && (counts[best] == 0 || dist(&means[j]) < dist(&means[best])) {
                    best = j;
                }
            }
            best == *c
        })
        .count();
    correct as f64 / eval.len() as f64
}
