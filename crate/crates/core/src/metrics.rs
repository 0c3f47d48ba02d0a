//! Seg-point precision/recall/F1 and segmentation+classification scores.
//!
//! A scene is represented by its end shot (its Seg-point). A predicted scene
//! counts as a segmentation hit when some ground-truth scene ends on the same
//! shot; for segmentation+classification the categories must agree as well.
//! All ratios use the `0/0 = 0` convention.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_scheme::{check_partition, CategoryId, LabelScheme, SceneAnnotation};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    ratio(2.0 * p * r, p + r)
}

impl Prf {
    pub fn from_counts(tp: usize, n_pred: usize, n_gt: usize) -> Self {
        let precision = ratio(tp as f64, n_pred as f64);
        let recall = ratio(tp as f64, n_gt as f64);
        Prf {
            precision,
            recall,
            f1: f1_score(precision, recall),
            tp,
            fp: n_pred - tp,
            fn_: n_gt - tp,
        }
    }
}

/// Pooled hit counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub n_pred: usize,
    pub n_gt: usize,
}

impl Counts {
    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.n_pred += other.n_pred;
        self.n_gt += other.n_gt;
    }

    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.tp, self.n_pred, self.n_gt)
    }
}

/// End-shot indices of a partition, in order.
pub fn seg_points(scenes: &[SceneAnnotation]) -> Result<Vec<usize>> {
    let n = scenes.last().map_or(0, |s| s.end_shot + 1);
    check_partition(scenes, n).map_err(|reason| Error::InvalidPartition {
        video_id: String::new(),
        reason,
    })?;
    Ok(scenes.iter().map(|s| s.end_shot).collect())
}

fn same_length(pred: &[SceneAnnotation], gt: &[SceneAnnotation]) -> Result<()> {
    let end = |s: &[SceneAnnotation]| s.last().map_or(0, |x| x.end_shot + 1);
    if end(pred) != end(gt) {
        return Err(Error::DimMismatch(format!(
            "prediction covers {} shots but ground truth covers {}",
            end(pred),
            end(gt)
        )));
    }
    Ok(())
}

fn seg_counts(pred: &[SceneAnnotation], gt: &[SceneAnnotation]) -> Result<Counts> {
    same_length(pred, gt)?;
    let p = seg_points(pred)?;
    let g: BTreeSet<usize> = seg_points(gt)?.into_iter().collect();
    Ok(Counts {
        tp: p.iter().filter(|e| g.contains(e)).count(),
        n_pred: p.len(),
        n_gt: g.len(),
    })
}

pub fn eval_seg(pred: &[SceneAnnotation], gt: &[SceneAnnotation]) -> Result<Prf> {
    Ok(seg_counts(pred, gt)?.prf())
}

fn check_category(scheme: &LabelScheme, c: Option<CategoryId>) -> Result<CategoryId> {
    match c {
        Some(c) if c.0 < scheme.num_categories() => Ok(c),
        Some(c) => Err(Error::UnknownCategory(format!("#{}", c.0))),
        None => Err(Error::MissingCategory(
            "segmentation+classification needs categories on every scene".into(),
        )),
    }
}

fn per_category_counts(
    pred: &[SceneAnnotation],
    gt: &[SceneAnnotation],
    scheme: &LabelScheme,
) -> Result<BTreeMap<CategoryId, Counts>> {
    same_length(pred, gt)?;
    seg_points(pred)?;
    seg_points(gt)?;
    let gt_by_end: BTreeMap<usize, CategoryId> = gt
        .iter()
        .map(|s| Ok((s.end_shot, check_category(scheme, s.category)?)))
        .collect::<Result<_>>()?;
    let mut out: BTreeMap<CategoryId, Counts> = BTreeMap::new();
    for c in gt_by_end.values() {
        out.entry(*c).or_default().n_gt += 1;
    }
    for s in pred {
        let c = check_category(scheme, s.category)?;
        let e = out.entry(c).or_default();
        e.n_pred += 1;
        if gt_by_end.get(&s.end_shot) == Some(&c) {
            e.tp += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegClsScores {
    pub micro: Prf,
    pub macro_avg: Prf,
    pub per_category: BTreeMap<CategoryId, Prf>,
}

fn aggregate(
    per_cat: &BTreeMap<CategoryId, Counts>,
    macro_categories: Option<&[CategoryId]>,
) -> SegClsScores {
    let mut micro = Counts::default();
    for c in per_cat.values() {
        micro.add(*c);
    }
    let per_category: BTreeMap<CategoryId, Prf> =
        per_cat.iter().map(|(&k, c)| (k, c.prf())).collect();
    let over: Vec<CategoryId> = match macro_categories {
        Some(list) => list.to_vec(),
        None => per_cat.keys().copied().collect(),
    };
    let k = over.len() as f64;
    let mut macro_avg = Prf {
        tp: micro.tp,
        fp: micro.n_pred - micro.tp,
        fn_: micro.n_gt - micro.tp,
        ..Prf::default()
    };
    for c in &over {
        let p = per_category.get(c).copied().unwrap_or_default();
        macro_avg.precision += p.precision;
        macro_avg.recall += p.recall;
        macro_avg.f1 += p.f1;
    }
    macro_avg.precision = ratio(macro_avg.precision, k);
    macro_avg.recall = ratio(macro_avg.recall, k);
    // averaged per-category F1, not F1 of the averaged P/R
    macro_avg.f1 = ratio(macro_avg.f1, k);
    SegClsScores {
        micro: micro.prf(),
        macro_avg,
        per_category,
    }
}

/// Segmentation+classification scores for one video. Macro averages run over
/// every category present in either side.
pub fn eval_seg_cls(
    pred: &[SceneAnnotation],
    gt: &[SceneAnnotation],
    scheme: &LabelScheme,
) -> Result<SegClsScores> {
    Ok(aggregate(&per_category_counts(pred, gt, scheme)?, None))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub seg: Prf,
    /// `None` for segmentation-only schemes.
    pub seg_cls: Option<SegClsScores>,
    pub category_names: BTreeMap<CategoryId, String>,
}

/// Corpus-level evaluation: counts are pooled over videos before ratios are
/// taken. `macro_categories` pins the macro divisor; by default it is every
/// category seen in predictions or ground truth.
pub fn evaluate(
    pairs: &[(&[SceneAnnotation], &[SceneAnnotation])],
    scheme: &LabelScheme,
    macro_categories: Option<&[CategoryId]>,
) -> Result<EvalReport> {
    let mut seg = Counts::default();
    let mut per_cat: BTreeMap<CategoryId, Counts> = BTreeMap::new();
    let with_classes = scheme.num_categories() > 0;
    for (pred, gt) in pairs {
        seg.add(seg_counts(pred, gt)?);
        if with_classes {
            for (c, counts) in per_category_counts(pred, gt, scheme)? {
                per_cat.entry(c).or_default().add(counts);
            }
        }
    }
    if let Some(list) = macro_categories {
        for c in list {
            check_category(scheme, Some(*c))?;
        }
    }
    let seg_cls = with_classes.then(|| aggregate(&per_cat, macro_categories));
    let category_names = scheme
        .categories()
        .iter()
        .enumerate()
        .map(|(i, n)| (CategoryId(i), n.clone()))
        .collect();
    Ok(EvalReport {
        seg: seg.prf(),
        seg_cls,
        category_names,
    })
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct PrfJson {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct CategoryJson {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Wire form of [`EvalReport`].
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ReportJson {
    pub seg: PrfJson,
    pub seg_cls_micro: Option<PrfJson>,
    pub seg_cls_macro: Option<PrfJson>,
    pub per_category: BTreeMap<String, CategoryJson>,
}

impl From<&Prf> for PrfJson {
    fn from(p: &Prf) -> Self {
        PrfJson {
            p: p.precision,
            r: p.recall,
            f1: p.f1,
        }
    }
}

impl EvalReport {
    pub fn to_json(&self) -> ReportJson {
        let per_category = self
            .seg_cls
            .iter()
            .flat_map(|s| s.per_category.iter())
            .map(|(c, p)| {
                let name = self
                    .category_names
                    .get(c)
                    .cloned()
                    .unwrap_or_else(|| format!("#{}", c.0));
                (
                    name,
                    CategoryJson {
                        p: p.precision,
                        r: p.recall,
                        f1: p.f1,
                        tp: p.tp,
                        fp: p.fp,
                        fn_: p.fn_,
                    },
                )
            })
            .collect();
        ReportJson {
            seg: (&self.seg).into(),
            seg_cls_micro: self.seg_cls.as_ref().map(|s| (&s.micro).into()),
            seg_cls_macro: self.seg_cls.as_ref().map(|s| (&s.macro_avg).into()),
            per_category,
        }
    }

    /// Plain-text summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let line = |out: &mut String, name: &str, p: &Prf| {
            out.push_str(&format!(
                "{name:<24} {:>7.2} {:>7.2} {:>7.2}\n",
                100.0 * p.precision,
                100.0 * p.recall,
                100.0 * p.f1
            ));
        };
        out.push_str(&format!("{:<24} {:>7} {:>7} {:>7}\n", "metric", "P", "R", "F1"));
        line(&mut out, "seg", &self.seg);
        if let Some(s) = &self.seg_cls {
            line(&mut out, "seg&cls micro", &s.micro);
            line(&mut out, "seg&cls macro", &s.macro_avg);
            for (c, p) in &s.per_category {
                let name = self.category_names.get(c).map_or("?", String::as_str);
                line(&mut out, &format!("  {name}"), p);
            }
        }
        out
    }
}
