//! End-to-end acceptance checks. Runs with a custom harness so each criterion
//! prints exactly one PASS/FAIL line; the process exits non-zero on failure.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use osmsl::crf::Crf;
use osmsl::feature_io::{save_predictions, save_report, VideoSequence};
use osmsl::fusion_head::EncoderConfig;
use osmsl::gradcheck::check_params;
use osmsl::label_scheme::{check_partition, CategoryId, LabelScheme, LinkTag, SceneAnnotation};
use osmsl::metrics::{evaluate, EvalReport};
use osmsl::params::{Initializer, ParamStore};
use osmsl::synth::{generate_corpus, probe_accuracy, split, SynthConfig};
use osmsl::tensor::Matrix;
use osmsl::trainer::{save_checkpoint, train, CurveLog, Head, HeadKind, Model, ModelConfig, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

// ---------------------------------------------------------------- helpers

/// Every composition of `n` into scene lengths.
fn compositions(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for first in 1..=n {
        for mut rest in compositions(n - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn scenes_from_lengths(lengths: &[usize], cats: &[Option<CategoryId>]) -> Vec<SceneAnnotation> {
    let mut start = 0;
    lengths
        .iter()
        .zip(cats)
        .map(|(&l, &c)| {
            let s = SceneAnnotation::new(start, start + l - 1, c);
            start += l;
            s
        })
        .collect()
}

/// Every categorized partition of `n` shots (`c == 0` means no categories).
fn all_partitions(n: usize, c: usize) -> Vec<Vec<SceneAnnotation>> {
    let mut out = Vec::new();
    for lengths in compositions(n) {
        let k = lengths.len();
        let combos = if c == 0 { 1 } else { c.pow(k as u32) };
        for code in 0..combos {
            let mut x = code;
            let cats: Vec<Option<CategoryId>> = (0..k)
                .map(|_| {
                    if c == 0 {
                        None
                    } else {
                        let id = x % c;
                        x /= c;
                        Some(CategoryId(id))
                    }
                })
                .collect();
            out.push(scenes_from_lengths(&lengths, &cats));
        }
    }
    out
}

fn random_partition(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<SceneAnnotation> {
    let mut lengths = Vec::new();
    let mut left = n;
    while left > 0 {
        let cap = left.min(if rng.random_bool(0.2) { left } else { 12 });
        let l = rng.random_range(1..=cap);
        lengths.push(l);
        left -= l;
    }
    let cats: Vec<Option<CategoryId>> = lengths
        .iter()
        .map(|_| (c > 0).then(|| CategoryId(rng.random_range(0..c))))
        .collect();
    scenes_from_lengths(&lengths, &cats)
}

fn round_trips(scheme: &LabelScheme, scenes: &[SceneAnnotation], n: usize) -> bool {
    let Ok(tags) = scheme.encode(scenes, n) else {
        return false;
    };
    if tags.len() != n || scheme.check_grammar(&tags).is_err() {
        return false;
    }
    let Ok(idx) = scheme.encode_indices(scenes, n) else {
        return false;
    };
    scheme.decode(&tags).ok().as_deref() == Some(scenes)
        && scheme.decode_indices(&idx).ok().as_deref() == Some(scenes)
        && scheme.repair(&tags) == tags
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn perturb(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut init = Initializer::new(seed);
    for id in store.trainable_ids().collect::<Vec<_>>() {
        let (r, c) = store.get(id).shape();
        let d = init.uniform(r, c, scale);
        store.get_mut(id).add_assign(&d);
    }
}

fn tiny_encoder(rng: &mut ChaCha8Rng) -> EncoderConfig {
    let n_heads = rng.random_range(1..=2);
    EncoderConfig {
        n_layers: rng.random_range(1..=2),
        n_heads,
        d_m: 4 * n_heads,
        d_ff: 8,
        n_max: 64,
        dropout: 0.0,
    }
}

fn random_video(rng: &mut ChaCha8Rng, id: usize, n: usize, dims: (usize, usize), scheme: &LabelScheme) -> VideoSequence {
    let c = scheme.num_categories();
    let vis = random_matrix(rng, n, dims.0, 2.0);
    let aud = random_matrix(rng, n, dims.1, 2.0);
    let shots = (0..n)
        .map(|j| osmsl::feature_io::ShotRecord {
            video_id: format!("v{id}"),
            shot_index: j,
            start_sec: j as f64,
            end_sec: j as f64 + 1.0,
            vis_feat: vis.row(j).to_vec(),
            aud_feat: aud.row(j).to_vec(),
        })
        .collect();
    VideoSequence {
        video_id: format!("v{id}"),
        shots,
        scenes: Some(random_partition(rng, n, c)),
    }
}

fn random_scheme(rng: &mut ChaCha8Rng) -> LabelScheme {
    let c = rng.random_range(0..=3);
    if c == 0 {
        LabelScheme::ss()
    } else {
        let names: Vec<String> = (0..c).map(|i| format!("k{i}")).collect();
        LabelScheme::ssc(&names).unwrap()
    }
}

// ------------------------------------------------------------- criteria

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let ss = LabelScheme::ss();
    let ssc = LabelScheme::ssc(&["a", "b", "c"]).unwrap();
    let mut checked = 0usize;
    let mut failures = 0usize;
    for n in 1..=8 {
        for p in all_partitions(n, 0) {
            checked += 1;
            failures += usize::from(!round_trips(&ss, &p, n));
        }
        for p in all_partitions(n, 3) {
            checked += 1;
            failures += usize::from(!round_trips(&ssc, &p, n));
        }
    }
    let exhaustive = checked;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..10_000 {
        let n = rng.random_range(1..=200);
        let (scheme, c) = if i % 2 == 0 { (&ss, 0) } else { (&ssc, 3) };
        let p = random_partition(&mut rng, n, c);
        failures += usize::from(!round_trips(scheme, &p, n));
    }
    let el = t0.elapsed();
    outcome(
        failures == 0 && within(el, 10),
        format!("{exhaustive} exhaustive + 10000 random partitions, {failures} failures, {el:.2?}"),
    )
}

/// Brute-force scores over every grammatical tag path, found as the encodings
/// of every categorized partition.
fn enumerate_paths(raw_t: &Matrix, raw_s: &[f64], raw_e: &[f64], em: &Matrix, scheme: &LabelScheme) -> (f64, f64, Vec<usize>) {
    let n = em.rows();
    let mut scores = Vec::new();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for p in all_partitions(n, scheme.num_categories()) {
        let tags = scheme.encode_indices(&p, n).unwrap();
        let mut s = raw_s[tags[0]] + raw_e[tags[n - 1]];
        for (j, &t) in tags.iter().enumerate() {
            s += em.get(j, t);
            if j > 0 {
                s += raw_t.get(tags[j - 1], t);
            }
        }
        if s > best.0 {
            best = (s, tags.clone());
        }
        scores.push(s);
    }
    (log_sum_exp(&scores), best.0, best.1)
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut max_dz = 0.0f64;
    let mut max_dv = 0.0f64;
    let mut path_mismatch = 0;
    for inst in 0..200 {
        let scheme = if inst % 2 == 0 {
            LabelScheme::ss()
        } else {
            LabelScheme::ssc(&["a", "b"]).unwrap()
        };
        let t = scheme.num_tags();
        let n = rng.random_range(1..=6);
        let mut crf = Crf::zeros(t, Some(scheme.transition_mask()));
        let raw_t = random_matrix(&mut rng, t, t, 2.0);
        let raw_s: Vec<f64> = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
        let raw_e: Vec<f64> = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
        crf.transitions = raw_t.clone();
        crf.start = raw_s.clone();
        crf.end = raw_e.clone();
        let em = random_matrix(&mut rng, n, t, 3.0);
        let (z, v, best) = enumerate_paths(&raw_t, &raw_s, &raw_e, &em, &scheme);
        let (path, score) = crf.viterbi(&em);
        max_dz = max_dz.max((crf.log_partition(&em) - z).abs());
        max_dv = max_dv.max((score - v).abs());
        if path != best && (crf.path_score(&em, &path) - v).abs() > 1e-9 {
            path_mismatch += 1;
        }
    }
    let el = t0.elapsed();
    outcome(
        max_dz <= 1e-6 && max_dv <= 1e-6 && path_mismatch == 0 && within(el, 30),
        format!("200 instances, max |dlogZ| {max_dz:.1e}, max |dViterbi| {max_dv:.1e}, {path_mismatch} path mismatches, {el:.2?}"),
    )
}

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = (0.0f64, String::new());
    for inst in 0..20u64 {
        let scheme = if inst % 2 == 0 {
            LabelScheme::ssc(&["a", "b"]).unwrap()
        } else {
            LabelScheme::ss()
        };
        let dims = (rng.random_range(2..=4), rng.random_range(2..=3));
        let cfg = ModelConfig {
            encoder: tiny_encoder(&mut rng),
            ..Default::default()
        };
        let mut model = Model::new(HeadKind::Osmsl, &scheme, &cfg, dims, 100 + inst).unwrap();
        perturb(&mut model.store, 200 + inst, 0.3);
        let videos: Vec<VideoSequence> = (0..2)
            .map(|i| {
                let n = rng.random_range(2..=6);
                random_video(&mut rng, i, n, dims, &scheme)
            })
            .collect();
        let refs: Vec<&VideoSequence> = videos.iter().collect();
        let (_, grads) = model.loss_and_grads(&refs).unwrap();
        let checks = check_params(&model.store, &grads, 1e-5, |store| {
            let probe = Model {
                store: store.clone(),
                ..model.clone()
            };
            probe.loss_and_grads(&refs).unwrap().0
        });
        for c in checks {
            if c.max_rel_error > worst.0 || worst.1.is_empty() {
                worst = (c.max_rel_error, format!("instance {inst} {}", c.name));
            }
        }
    }
    let el = t0.elapsed();
    outcome(
        worst.0 <= 1e-3 && within(el, 120),
        format!("20 instances, worst relative error {:.2e} ({}), {el:.2?}", worst.0, worst.1),
    )
}

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut decode_errors = 0usize;
    let mut repaired_ungrammatical = 0usize;
    let mut mt_checked = 0usize;
    for inst in 0..10_000u64 {
        let scheme = random_scheme(&mut rng);
        let dims = (rng.random_range(1..=4), rng.random_range(1..=3));
        let cfg = ModelConfig {
            encoder: tiny_encoder(&mut rng),
            use_crf: rng.random_bool(0.7),
            hard_mask: rng.random_bool(0.7),
            use_diffcorr: rng.random_bool(0.8),
            ..Default::default()
        };
        let mut model = Model::new(HeadKind::Osmsl, &scheme, &cfg, dims, inst).unwrap();
        perturb(&mut model.store, inst ^ 0xabc, rng.random_range(0.1..10.0));
        let n = rng.random_range(1..=40);
        let video = random_video(&mut rng, inst as usize, n, dims, &scheme).without_scenes();
        match model.predict_video(&video) {
            Ok(s) if check_partition(&s, n).is_ok() => {
                if scheme.num_categories() > 0 && s.iter().any(|x| x.category.is_none()) {
                    decode_errors += 1;
                }
            }
            _ => decode_errors += 1,
        }
        if scheme.num_categories() > 0 && inst % 4 == 0 {
            let mut mt = Model::new(HeadKind::Multitask, &scheme, &cfg, dims, inst).unwrap();
            perturb(&mut mt.store, inst ^ 0xdef, rng.random_range(0.1..10.0));
            let Head::Multitask(head) = &mt.head else { unreachable!() };
            mt_checked += 1;
            let raw: Vec<LinkTag> = head.raw_tags(&mt.store, &video).unwrap();
            let fixed = scheme.repair(&raw);
            match scheme.decode(&fixed) {
                Ok(s) if check_partition(&s, n).is_ok() => {}
                _ => repaired_ungrammatical += 1,
            }
            match mt.predict_video(&video) {
                Ok(s) if check_partition(&s, n).is_ok() => {}
                _ => repaired_ungrammatical += 1,
            }
        }
    }
    let el = t0.elapsed();
    outcome(
        decode_errors == 0 && repaired_ungrammatical == 0,
        format!(
            "10000 OS-MSL models: {decode_errors} decode errors; {mt_checked} multitask models after repair: {repaired_ungrammatical} failures, {el:.2?}"
        ),
    )
}

/// Literal double loop over (prediction, ground-truth) scene pairs.
fn brute_counts(pred: &[SceneAnnotation], gt: &[SceneAnnotation]) -> (usize, BTreeMap<usize, [usize; 3]>) {
    let mut tp_seg = 0;
    let mut per: BTreeMap<usize, [usize; 3]> = BTreeMap::new();
    for p in pred {
        for g in gt {
            if p.end_shot == g.end_shot {
                tp_seg += 1;
                if p.category == g.category {
                    per.entry(p.category.unwrap().0).or_default()[0] += 1;
                }
            }
        }
        per.entry(p.category.unwrap().0).or_default()[1] += 1;
    }
    for g in gt {
        per.entry(g.category.unwrap().0).or_default()[2] += 1;
    }
    (tp_seg, per)
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scheme = LabelScheme::ssc(&["a", "b", "c", "d"]).unwrap();
    let mut mismatches = 0usize;
    for _ in 0..1000 {
        let n = rng.random_range(1..=60);
        let pred = random_partition(&mut rng, n, 4);
        let gt = random_partition(&mut rng, n, 4);
        let (tp_seg, per) = brute_counts(&pred, &gt);
        let r = evaluate(&[(&pred, &gt)], &scheme, None).unwrap();
        let s = r.seg_cls.as_ref().unwrap();
        let mut ok = r.seg.tp == tp_seg
            && r.seg.precision == ratio(tp_seg, pred.len())
            && r.seg.recall == ratio(tp_seg, gt.len());
        let (mut tp, mut np, mut ng) = (0, 0, 0);
        for (&c, &[ctp, cnp, cng]) in &per {
            tp += ctp;
            np += cnp;
            ng += cng;
            let got = s.per_category.get(&CategoryId(c));
            ok &= got.is_some_and(|p| {
                p.tp == ctp && p.fp == cnp - ctp && p.fn_ == cng - ctp && p.precision == ratio(ctp, cnp) && p.recall == ratio(ctp, cng)
            });
        }
        ok &= s.per_category.len() == per.len();
        ok &= s.micro.tp == tp && s.micro.precision == ratio(tp, np) && s.micro.recall == ratio(tp, ng);
        mismatches += usize::from(!ok);
    }
    let hand = {
        let ab = LabelScheme::ssc(&["A", "B"]).unwrap();
        let gt = scenes_from_lengths(&[2, 2], &[Some(CategoryId(0)), Some(CategoryId(1))]);
        let pred = scenes_from_lengths(&[2, 2], &[Some(CategoryId(0)), Some(CategoryId(0))]);
        let r = evaluate(&[(&pred, &gt)], &ab, None).unwrap();
        let s = r.seg_cls.unwrap();
        let a = s.per_category[&CategoryId(0)];
        let b = s.per_category[&CategoryId(1)];
        s.micro.tp == 1
            && s.micro.precision == 0.5
            && s.micro.recall == 0.5
            && (a.precision, a.recall) == (0.5, 1.0)
            && (b.precision, b.recall) == (0.0, 0.0)
            && s.macro_avg.precision == 0.25
            && s.macro_avg.recall == 0.5
    };
    let el = t0.elapsed();
    outcome(
        mismatches == 0 && hand,
        format!("1000 random pairs, {mismatches} count mismatches; hand case {}, {el:.2?}", if hand { "reproduced" } else { "WRONG" }),
    )
}

// ------------------------------------------------- end-to-end pipeline

struct Run {
    report: EvalReport,
    curves: CurveLog,
    checkpoint: Vec<u8>,
    predictions: Vec<u8>,
    report_json: Vec<u8>,
    elapsed: Duration,
}

struct Data {
    train: Vec<VideoSequence>,
    test: Vec<VideoSequence>,
    scheme: LabelScheme,
    dims: (usize, usize),
    probe: f64,
}

fn data() -> &'static Data {
    static DATA: OnceLock<Data> = OnceLock::new();
    DATA.get_or_init(|| {
        let cfg = SynthConfig::default();
        let corpus = generate_corpus(&cfg).unwrap();
        let (train, _val, test) = split(&corpus.videos, cfg.split, cfg.seed).unwrap();
        let probe = probe_accuracy(&train, &test);
        Data {
            dims: corpus.dims(),
            scheme: corpus.scheme,
            train,
            test,
            probe,
        }
    })
}

fn pipeline(kind: HeadKind, dir: &Path) -> Run {
    let t0 = Instant::now();
    let d = data();
    let tc = TrainConfig::default();
    let mut model = Model::new(kind, &d.scheme, &ModelConfig::default(), d.dims, tc.seed).unwrap();
    let curves = train(&mut model, &d.train, &tc).unwrap();
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&model, &ckpt).unwrap();
    let predicted = model.predict(&d.test, 1).unwrap();
    let pred_path = dir.join("predictions.json");
    save_predictions(&pred_path, &predicted, &d.scheme).unwrap();
    let pairs: Vec<(&[SceneAnnotation], &[SceneAnnotation])> = predicted
        .iter()
        .zip(&d.test)
        .map(|(p, g)| (p.scenes.as_deref().unwrap(), g.scenes.as_deref().unwrap()))
        .collect();
    let report = evaluate(&pairs, &d.scheme, None).unwrap();
    let report_path = dir.join("report.json");
    save_report(&report_path, &report).unwrap();
    Run {
        report,
        curves,
        checkpoint: std::fs::read(&ckpt).unwrap(),
        predictions: std::fs::read(&pred_path).unwrap(),
        report_json: std::fs::read(&report_path).unwrap(),
        elapsed: t0.elapsed(),
    }
}

fn osmsl_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        pipeline(HeadKind::Osmsl, dir.path())
    })
}

fn micro_f1(r: &EvalReport) -> f64 {
    r.seg_cls.as_ref().map_or(0.0, |s| s.micro.f1)
}

fn criterion_6() -> Outcome {
    let run = osmsl_run();
    let (micro, seg) = (micro_f1(&run.report), run.report.seg.f1);
    outcome(
        micro >= 0.90 && seg >= 0.95 && within(run.elapsed, 600),
        format!(
            "probe accuracy {:.3}; test micro F1 {micro:.4}, seg F1 {seg:.4}, {:.1?}",
            data().probe,
            run.elapsed
        ),
    )
}

fn criterion_7() -> Outcome {
    let os = osmsl_run();
    let dir = tempfile::tempdir().unwrap();
    let mt = pipeline(HeadKind::Multitask, dir.path());
    let ts = pipeline(HeadKind::Twostage, dir.path());
    println!("    {:<10} {:>8} {:>8} {:>8} {:>8}", "framework", "seg F1", "micro P", "micro R", "micro F1");
    for (name, r) in [("osmsl", os), ("multitask", &mt), ("twostage", &ts)] {
        let s = r.report.seg_cls.as_ref().unwrap();
        println!(
            "    {name:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.report.seg.f1, s.micro.precision, s.micro.recall, s.micro.f1
        );
    }
    let (o, m, t) = (micro_f1(&os.report), micro_f1(&mt.report), micro_f1(&ts.report));
    let series_ok = mt.curves.tasks() == ["classification", "segmentation"]
        && mt.curves.tasks().iter().all(|k| {
            let s = mt.curves.series(k);
            !s.is_empty() && s[0].normalized_loss == 1.0
        })
        && os.curves.tasks() == ["osmsl"];
    outcome(
        o >= m - 0.02 && o >= t - 0.02 && series_ok,
        format!("micro F1 osmsl {o:.4}, multitask {m:.4}, twostage {t:.4}; multitask curve series separate: {series_ok}"),
    )
}

fn criterion_8() -> Outcome {
    let first = osmsl_run();
    let dir = tempfile::tempdir().unwrap();
    let second = pipeline(HeadKind::Osmsl, dir.path());
    let same = [
        ("checkpoint", first.checkpoint == second.checkpoint),
        ("predictions", first.predictions == second.predictions),
        ("report", first.report_json == second.report_json),
    ];
    let bad: Vec<&str> = same.iter().filter(|(_, s)| !s).map(|(n, _)| *n).collect();
    outcome(
        bad.is_empty(),
        format!(
            "checkpoint {} bytes, predictions {} bytes, report {} bytes; differing: {bad:?}",
            first.checkpoint.len(),
            first.predictions.len(),
            first.report_json.len()
        ),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 encode/decode round trip", criterion_1),
        ("2 CRF oracle equivalence", criterion_2),
        ("3 gradient correctness", criterion_3),
        ("4 grammar safety", criterion_4),
        ("5 metrics oracle", criterion_5),
        ("6 end-to-end synthetic training", criterion_6),
        ("7 framework comparison", criterion_7),
        ("8 determinism", criterion_8),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let o = f();
        println!("{} criterion {name}: {}", if o.ok { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.ok);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
