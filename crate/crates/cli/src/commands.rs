use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use osmsl::feature_io::{
    load_features, load_scene_map, load_scenes, save_features, save_predictions, save_report, save_scenes,
    save_scheme, load_scheme, write_json_file, VideoSequence,
};
use osmsl::label_scheme::{LabelScheme, SceneAnnotation};
use osmsl::metrics::evaluate;
use osmsl::synth::{generate_corpus, probe_accuracy, split, SynthConfig};
use osmsl::trainer::{load_checkpoint, save_checkpoint, train as fit_model, CurveLog, HeadKind, Model, ModelConfig, TrainConfig};

use crate::plot::{render_svg, Series};
use crate::{CurvesArgs, EvalArgs, InspectArgs, PredictArgs, SchemeArgs, SynthArgs, TrainArgs};

/// Reads a TOML or JSON settings file (JSON when the extension is `.json`).
fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn resolve_scheme(args: &SchemeArgs) -> Result<Option<LabelScheme>> {
    if args.ss {
        return Ok(Some(LabelScheme::ss()));
    }
    if let Some(names) = &args.categories {
        return Ok(Some(LabelScheme::ssc(names)?));
    }
    match &args.scheme {
        Some(p) => Ok(Some(load_scheme(p)?)),
        None => Ok(None),
    }
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.n_videos {
        cfg.n_videos = v;
    }
    if let Some(v) = a.num_categories {
        cfg.num_categories = v;
    }
    if let Some(v) = a.sigma_scene {
        cfg.sigma_scene = v;
    }
    if let Some(v) = a.sigma_shot {
        cfg.sigma_shot = v;
    }
    if let Some(v) = a.center_scale {
        cfg.center_scale = v;
    }
    cfg.generalized |= a.generalized;
    let corpus = generate_corpus(&cfg)?;
    let (train, val, test) = split(&corpus.videos, cfg.split, cfg.seed)?;
    create_dir(&a.out)?;
    write_json_file(a.out.join("synth_config.json"), &cfg)?;
    save_scheme(a.out.join("scheme.json"), &corpus.scheme)?;
    for (name, videos) in [("train", &train), ("val", &val), ("test", &test)] {
        let dir = a.out.join(name);
        create_dir(&dir)?;
        save_features(dir.join("features.jsonl"), videos)?;
        save_scenes(dir.join("scenes.json"), videos, &corpus.scheme)?;
    }
    println!(
        "wrote {} train / {} val / {} test videos to {}",
        train.len(),
        val.len(),
        test.len(),
        a.out.display()
    );
    if !train.is_empty() && !test.is_empty() {
        println!("nearest-class-mean probe accuracy (train -> test): {:.4}", probe_accuracy(&train, &test));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    head: Option<HeadKind>,
    train: TrainConfig,
    model: ModelConfig,
}

#[derive(Serialize)]
struct ResolvedTrain<'a> {
    head: HeadKind,
    scheme: &'a LabelScheme,
    features: &'a Path,
    scenes: &'a Path,
    train: &'a TrainConfig,
    model: &'a ModelConfig,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let file: TrainFile = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainFile::default(),
    };
    let head = a.head.or(file.head).unwrap_or(HeadKind::Osmsl);
    let mut tc = file.train;
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.lr {
        tc.lr = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    tc.validate()?;
    let scheme = resolve_scheme(&a.scheme)?.context("a label scheme is required: pass --scheme, --categories or --ss")?;
    let videos = load_scenes(&a.scenes, load_features(&a.features)?, &scheme)?;
    if let Some(v) = videos.iter().find(|v| v.scenes.is_none()) {
        bail!("video {} has no gold scenes in {}", v.video_id, a.scenes.display());
    }
    let dims = videos.first().map(VideoSequence::dims).context("no videos to train on")?;
    let mut model = Model::new(head, &scheme, &file.model, dims, tc.seed)?;
    log::info!("training {head} on {} videos, {} trainable tensors", videos.len(), model.store.trainable_ids().count());
    let curves = fit_model(&mut model, &videos, &tc)?;
    create_dir(&a.out)?;
    save_checkpoint(&model, a.out.join("model.ckpt"))?;
    curves.save_csv(a.out.join("curves.csv"))?;
    write_json_file(
        a.out.join("train_config.json"),
        &ResolvedTrain {
            head,
            scheme: &scheme,
            features: &a.features,
            scenes: &a.scenes,
            train: &tc,
            model: &file.model,
        },
    )?;
    if let Some(last) = curves.records.last() {
        println!("trained {head} for {} iterations, final loss {:.6}", last.iteration, last.raw_loss);
    }
    Ok(())
}

/// Sibling path holding the resolved settings of a run writing `out`.
fn config_path(out: &Path, command: &str) -> PathBuf {
    out.parent().unwrap_or(Path::new("")).join(format!("{command}_config.json"))
}

pub fn predict(a: PredictArgs, threads: usize) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let videos = load_features(&a.features)?;
    let predicted = model.predict(&videos, threads)?;
    save_predictions(&a.out, &predicted, &model.scheme)?;
    write_json_file(
        config_path(&a.out, "predict"),
        &json!({
            "checkpoint": a.checkpoint,
            "features": a.features,
            "out": a.out,
            "threads": threads,
        }),
    )?;
    println!("wrote predictions for {} videos to {}", predicted.len(), a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let scheme = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?.scheme,
        None => resolve_scheme(&a.scheme)?.context("a label scheme is required: pass --scheme, --categories, --ss or --checkpoint")?,
    };
    let pred = load_scene_map(&a.pred, &scheme)?;
    let gt = load_scene_map(&a.gt, &scheme)?;
    let missing: Vec<&String> = gt.keys().filter(|k| !pred.contains_key(*k)).collect();
    ensure!(missing.is_empty(), "no prediction for videos {missing:?}");
    let extra: Vec<&String> = pred.keys().filter(|k| !gt.contains_key(*k)).collect();
    ensure!(extra.is_empty(), "predictions for videos without ground truth: {extra:?}");
    let pairs: Vec<(&[SceneAnnotation], &[SceneAnnotation])> =
        gt.iter().map(|(k, g)| (pred[k].as_slice(), g.as_slice())).collect();
    let pinned = a
        .macro_categories
        .as_ref()
        .map(|names| names.iter().map(|n| scheme.category_id(n)).collect::<osmsl::Result<Vec<_>>>())
        .transpose()?;
    let report = evaluate(&pairs, &scheme, pinned.as_deref())?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        save_report(out, &report)?;
        write_json_file(
            config_path(out, "eval"),
            &json!({
                "pred": a.pred,
                "gt": a.gt,
                "scheme": scheme,
                "macro_categories": a.macro_categories,
                "out": out,
            }),
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ShotDump {
    shot: usize,
    tag: String,
    emissions: Vec<f64>,
    marginals: Vec<f64>,
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let videos = load_features(&a.features)?;
    let video = videos
        .iter()
        .find(|v| v.video_id == a.video)
        .with_context(|| format!("video {:?} not found in {}", a.video, a.features.display()))?;
    let ins = model.inspect(video)?;
    let scheme = &model.scheme;
    let tag_names: Vec<String> = scheme.tag_table().into_iter().map(|t| scheme.tag_to_string(t)).collect();
    let shots: Vec<ShotDump> = (0..video.n_shots())
        .map(|j| ShotDump {
            shot: j,
            tag: scheme.tag_to_string(ins.tags[j]),
            emissions: ins.emissions.row(j).to_vec(),
            marginals: ins.marginals.row(j).to_vec(),
        })
        .collect();
    let scenes = osmsl::feature_io::scenes_file(
        &[VideoSequence {
            scenes: Some(ins.scenes.clone()),
            ..video.without_scenes()
        }],
        scheme,
    );
    let doc = json!({
        "video_id": video.video_id,
        "head": model.kind,
        "tags": tag_names,
        "shots": shots,
        "scenes": scenes.videos[0].scenes,
    });
    let text = serde_json::to_string_pretty(&doc)?;
    match &a.out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}")?;
        }
    }
    Ok(())
}

pub fn curves(a: CurvesArgs) -> Result<()> {
    ensure!(a.svg.is_some() || a.csv.is_some(), "nothing to write: pass --svg and/or --csv");
    ensure!(a.smooth >= 1, "--smooth must be at least 1");
    let mut series = Vec::new();
    let mut rows = String::from("run,task,iteration,raw_loss,normalized_loss\n");
    let mut labels = BTreeMap::new();
    for input in &a.inputs {
        let (label, path) = match input.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(input);
                let label = p
                    .parent()
                    .and_then(Path::file_name)
                    .map_or_else(|| input.clone(), |s| s.to_string_lossy().into_owned());
                (label, p)
            }
        };
        ensure!(labels.insert(label.clone(), ()).is_none(), "duplicate curve label {label:?}");
        let log = CurveLog::load_csv(&path)?;
        for task in log.tasks() {
            let points: Vec<(f64, f64)> = log
                .series(&task)
                .iter()
                .map(|r| {
                    rows.push_str(&format!(
                        "{label},{task},{},{},{}\n",
                        r.iteration, r.raw_loss, r.normalized_loss
                    ));
                    (r.iteration as f64, r.normalized_loss)
                })
                .collect();
            series.push(Series {
                name: format!("{label}/{task}"),
                points: moving_average(&points, a.smooth),
            });
        }
    }
    if let Some(p) = &a.csv {
        fs::write(p, rows).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.svg {
        fs::write(p, render_svg(&series, "normalized training loss")).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn moving_average(points: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    (0..points.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let slice = &points[lo..=i];
            (points[i].0, slice.iter().map(|p| p.1).sum::<f64>() / slice.len() as f64)
        })
        .collect()
}
