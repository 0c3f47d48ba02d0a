//! DiffCorrNet: per-modality feature enhancement.
//!
//! For shot `j` the network looks at the `k` shots ending at `j` (former
//! window) and the `k` shots after it (latter window). The boundary feature
//! `g` compares the mean embeddings of the two windows (cosine plus vector
//! difference, projected); the aggregated feature `h` is an attention-weighted
//! sum of the raw features of the `2k − 1` neighbours, with attention logits
//! from an MLP over embedding differences. The enhanced row is
//! `[f_j, g_j, h_j]`. Out-of-range window positions replicate the edge shot.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine, softmax_in_place, Graph, RowMix, Var};
use crate::error::{Error, Result};
use crate::params::{Initializer, Linear, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffCorrConfig {
    pub k: usize,
    /// Embedding width; defaults to the input width.
    pub d_e: Option<usize>,
    /// Attention MLP hidden width; defaults to the input width.
    pub d_a: Option<usize>,
    /// Boundary feature width; defaults to half the input width, rounded up.
    pub d_g: Option<usize>,
    /// Softmax over neighbours; `false` uses the raw logits as weights.
    pub attention_normalize: bool,
    /// One embedding map for both branches; `false` gives attention its own.
    pub shared_embed: bool,
}

impl Default for DiffCorrConfig {
    fn default() -> Self {
        DiffCorrConfig {
            k: 1,
            d_e: None,
            d_a: None,
            d_g: None,
            attention_normalize: true,
            shared_embed: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiffCorrParams {
    pub k: usize,
    pub d_in: usize,
    pub d_e: usize,
    pub d_a: usize,
    pub d_g: usize,
    pub attention_normalize: bool,
    pub embed: Linear,
    pub attn_embed: Linear,
    pub boundary_proj: Linear,
    pub attn_hidden: Linear,
    pub attn_out: Linear,
}

impl DiffCorrParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        prefix: &str,
        d_in: usize,
        cfg: &DiffCorrConfig,
    ) -> Result<Self> {
        if cfg.k == 0 {
            return Err(Error::Config("diffcorr k must be at least 1".into()));
        }
        if d_in == 0 {
            return Err(Error::Config("diffcorr input width must be positive".into()));
        }
        let d_e = cfg.d_e.unwrap_or(d_in);
        let d_a = cfg.d_a.unwrap_or(d_in);
        let d_g = cfg.d_g.unwrap_or(d_in.div_ceil(2));
        if d_e == 0 || d_a == 0 || d_g == 0 {
            return Err(Error::Config("diffcorr widths must be positive".into()));
        }
        let embed = Linear::new(store, init, &format!("{prefix}.embed"), d_in, d_e);
        let attn_embed = if cfg.shared_embed {
            embed
        } else {
            Linear::new(store, init, &format!("{prefix}.attn_embed"), d_in, d_e)
        };
        let boundary_proj = Linear::new(store, init, &format!("{prefix}.boundary_proj"), d_e + 1, d_g);
        let attn_hidden = Linear::new(store, init, &format!("{prefix}.attn_hidden"), d_e, d_a);
        let attn_out = Linear::new(store, init, &format!("{prefix}.attn_out"), d_a, 1);
        Ok(DiffCorrParams {
            k: cfg.k,
            d_in,
            d_e,
            d_a,
            d_g,
            attention_normalize: cfg.attention_normalize,
            embed,
            attn_embed,
            boundary_proj,
            attn_hidden,
            attn_out,
        })
    }

    pub fn d_out(&self) -> usize {
        2 * self.d_in + self.d_g
    }

    pub fn num_neighbors(&self) -> usize {
        2 * self.k - 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub former: Vec<usize>,
    pub latter: Vec<usize>,
    pub neighbors: Vec<usize>,
}

fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Window positions around shot `j`, clamped into `[0, n)`.
pub fn window(j: usize, n: usize, k: usize) -> Window {
    assert!(j < n, "shot {j} outside sequence of length {n}");
    let (j, k) = (j as isize, k as isize);
    let former: Vec<usize> = (j - (k - 1)..=j).map(|i| clamp(i, n)).collect();
    let latter: Vec<usize> = (j + 1..=j + k).map(|i| clamp(i, n)).collect();
    let neighbors = (j - (k - 1)..j)
        .chain(j + 1..=j + k)
        .map(|i| clamp(i, n))
        .collect();
    Window {
        former,
        latter,
        neighbors,
    }
}

fn mean_rows(m: &Matrix, rows: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for &r in rows {
        for (o, a) in out.iter_mut().zip(m.row(r)) {
            *o += a;
        }
    }
    out.iter().map(|a| a / rows.len() as f64).collect()
}

/// Boundary feature of shot `j`, evaluated directly.
pub fn boundary_feature(p: &DiffCorrParams, store: &ParamStore, features: &Matrix, j: usize) -> Vec<f64> {
    let w = window(j, features.rows(), p.k);
    let e = p.embed.apply(store, features);
    let pf = mean_rows(&e, &w.former);
    let pl = mean_rows(&e, &w.latter);
    let mut input = vec![cosine(&pf, &pl)];
    input.extend(pf.iter().zip(&pl).map(|(a, b)| a - b));
    p.boundary_proj
        .apply(store, &Matrix::row_vector(&input))
        .into_vec()
}

/// Attention logit of neighbour `f_i` as seen from `f_j`.
pub fn attention_weight(p: &DiffCorrParams, store: &ParamStore, f_j: &[f64], f_i: &[f64]) -> f64 {
    let ej = p.attn_embed.apply(store, &Matrix::row_vector(f_j));
    let ei = p.attn_embed.apply(store, &Matrix::row_vector(f_i));
    let d = ej.zip_map(&ei, |a, b| a - b);
    let hidden = p.attn_hidden.apply(store, &d).map(|a| a.max(0.0));
    p.attn_out.apply(store, &hidden).item()
}

/// Normalized (or raw) attention weights of shot `j` over its neighbours.
pub fn attention_distribution(p: &DiffCorrParams, store: &ParamStore, features: &Matrix, j: usize) -> Vec<f64> {
    let w = window(j, features.rows(), p.k);
    let mut logits: Vec<f64> = w
        .neighbors
        .iter()
        .map(|&i| attention_weight(p, store, features.row(j), features.row(i)))
        .collect();
    if p.attention_normalize {
        softmax_in_place(&mut logits);
    }
    logits
}

/// Aggregated feature of shot `j`: attention-weighted sum of raw neighbour
/// features.
pub fn aggregated_feature(p: &DiffCorrParams, store: &ParamStore, features: &Matrix, j: usize) -> Vec<f64> {
    let w = window(j, features.rows(), p.k);
    let weights = attention_distribution(p, store, features, j);
    let mut h = vec![0.0; features.cols()];
    for (&i, wt) in w.neighbors.iter().zip(&weights) {
        for (o, a) in h.iter_mut().zip(features.row(i)) {
            *o += wt * a;
        }
    }
    h
}

pub struct DiffCorrOutput {
    /// `n × (2·d_in + d_g)` enhanced features.
    pub f2: Var,
    /// `n × (2k − 1)` attention weights over neighbours.
    pub attention: Var,
}

/// Enhanced features for a whole sequence, recorded on `g`.
pub fn enhance(g: &mut Graph, store: &ParamStore, p: &DiffCorrParams, x: Var) -> DiffCorrOutput {
    let (n, d_in) = g.value(x).shape();
    assert!(n >= 1, "diffcorr needs at least one shot");
    assert_eq!(d_in, p.d_in, "diffcorr input width");
    let windows: Vec<Window> = (0..n).map(|j| window(j, n, p.k)).collect();

    let e = p.embed.forward(g, store, x);
    let former: Vec<Vec<usize>> = windows.iter().map(|w| w.former.clone()).collect();
    let latter: Vec<Vec<usize>> = windows.iter().map(|w| w.latter.clone()).collect();
    let pf = g.row_mix(e, RowMix::means(&former));
    let pl = g.row_mix(e, RowMix::means(&latter));
    let cos = g.row_cosine(pf, pl);
    let diff = g.sub(pf, pl);
    let b_in = g.concat_cols(&[cos, diff]);
    let gfeat = p.boundary_proj.forward(g, store, b_in);

    let ea = if p.attn_embed.weight == p.embed.weight {
        e
    } else {
        p.attn_embed.forward(g, store, x)
    };
    let pairs = RowMix {
        terms: windows
            .iter()
            .enumerate()
            .flat_map(|(j, w)| w.neighbors.iter().map(move |&i| vec![(j, 1.0), (i, -1.0)]))
            .collect(),
    };
    let d = g.row_mix(ea, pairs);
    let hidden = p.attn_hidden.forward(g, store, d);
    let hidden = g.relu(hidden);
    let logits = p.attn_out.forward(g, store, hidden);
    let logits = g.reshape(logits, n, p.num_neighbors());
    let attention = if p.attention_normalize {
        g.softmax_rows(logits)
    } else {
        logits
    };
    let index = windows.into_iter().map(|w| w.neighbors).collect();
    let h = g.weighted_gather(attention, x, index);
    let f2 = g.concat_cols(&[x, gfeat, h]);
    DiffCorrOutput { f2, attention }
}

/// Convenience wrapper evaluating [`enhance`] on a constant input.
pub fn enhance_matrix(p: &DiffCorrParams, store: &ParamStore, features: &Matrix) -> Matrix {
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let out = enhance(&mut g, store, p, x);
    g.value(out.f2).clone()
}
