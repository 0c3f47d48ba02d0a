//! Batch normalization, early fusion, transformer encoder and tag emissions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Initializer, Linear, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-feature batch normalization with running statistics. The running
/// mean and variance live in the store as non-trainable entries so they are
/// checkpointed with everything else.
#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
    pub momentum: f64,
    pub eps: f64,
}

/// Batch statistics of one train-mode pass (variance unbiased).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0), true),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, dim), true),
            running_mean: store.add(format!("{name}.running_mean"), Matrix::zeros(1, dim), false),
            running_var: store.add(format!("{name}.running_var"), Matrix::filled(1, dim, 1.0), false),
            dim,
            momentum,
            eps,
        }
    }

    fn affine(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let scaled = g.mul_row(x, gamma);
        g.add_row(scaled, beta)
    }

    /// Normalizes with the statistics of the rows of `x`.
    pub fn forward_train(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, BatchStats)> {
        let (n, d) = g.value(x).shape();
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        assert_eq!(d, self.dim, "batch norm width");
        let v = g.value(x);
        let mean: Vec<f64> = v.col_sums().as_slice().iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (c, a) in v.row(i).iter().enumerate() {
                var[c] += (a - mean[c]).powi(2);
            }
        }
        let var = var.iter().map(|s| s / (n - 1) as f64).collect();
        let normalized = g.batch_normalize(x, self.eps);
        Ok((self.affine(g, store, normalized), BatchStats { mean, var }))
    }

    /// Normalizes with the running statistics.
    pub fn forward_eval(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mean = store.get(self.running_mean).map(|m| -m);
        let inv = store.get(self.running_var).map(|v| 1.0 / (v + self.eps).sqrt());
        let shift = g.constant(mean);
        let scale = g.constant(inv);
        let centered = g.add_row(x, shift);
        let normalized = g.mul_row(centered, scale);
        self.affine(g, store, normalized)
    }

    pub fn update_running(&self, store: &mut ParamStore, stats: &BatchStats) {
        let m = self.momentum;
        for (id, batch) in [(self.running_mean, &stats.mean), (self.running_var, &stats.var)] {
            for (r, b) in store.get_mut(id).as_mut_slice().iter_mut().zip(batch) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
}

/// Output of [`fuse`]: the fused matrix plus any batch statistics gathered.
pub struct Fused {
    pub f3: Var,
    pub stats: Vec<(BatchNorm, BatchStats)>,
}

/// Normalizes each present modality and concatenates them, visual first.
pub fn fuse(
    g: &mut Graph,
    store: &ParamStore,
    modalities: &[(Var, &BatchNorm)],
    mode: Mode,
) -> Result<Fused> {
    let n = modalities
        .first()
        .map(|(v, _)| g.value(*v).rows())
        .ok_or_else(|| Error::Config("at least one modality must be enabled".into()))?;
    let mut parts = Vec::new();
    let mut stats = Vec::new();
    for (x, bn) in modalities {
        if g.value(*x).rows() != n {
            return Err(Error::DimMismatch(format!(
                "modalities disagree on shot count: {} vs {}",
                n,
                g.value(*x).rows()
            )));
        }
        match mode {
            Mode::Train => {
                let (y, s) = bn.forward_train(g, store, *x)?;
                parts.push(y);
                stats.push((**bn, s));
            }
            Mode::Eval => parts.push(bn.forward_eval(g, store, *x)),
        }
    }
    let f3 = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_cols(&parts)
    };
    Ok(Fused { f3, stats })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_m: usize,
    pub d_ff: usize,
    pub n_max: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 2,
            n_heads: 4,
            d_m: 64,
            d_ff: 128,
            n_max: 512,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_m == 0 || self.n_heads == 0 || self.d_m % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_m ({}) must be a positive multiple of n_heads ({})",
                self.d_m, self.n_heads
            )));
        }
        if self.n_max == 0 || self.d_ff == 0 {
            return Err(Error::Config("n_max and d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0), true),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, dim), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_normalize(x, LN_EPS);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let s = g.mul_row(n, gamma);
        g.add_row(s, beta)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

/// Pre-norm transformer encoder with learned positions.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub input_proj: Linear,
    pub positions: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub ln_final: LayerNorm,
}

pub struct EncoderOutput {
    pub hidden: Var,
    /// `[layer][head]` attention matrices, each n×n.
    pub attention: Vec<Vec<Var>>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        d_in: usize,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_m;
        let input_proj = Linear::new(store, init, &format!("{name}.input_proj"), d_in, d);
        let positions = store.add(
            format!("{name}.positions"),
            init.uniform(cfg.n_max, d, 0.02),
            true,
        );
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                EncoderLayer {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    wq: Linear::new(store, init, &format!("{p}.wq"), d, d),
                    wk: Linear::new(store, init, &format!("{p}.wk"), d, d),
                    wv: Linear::new(store, init, &format!("{p}.wv"), d, d),
                    wo: Linear::new(store, init, &format!("{p}.wo"), d, d),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    ff1: Linear::new(store, init, &format!("{p}.ff1"), d, cfg.d_ff),
                    ff2: Linear::new(store, init, &format!("{p}.ff2"), cfg.d_ff, d),
                }
            })
            .collect();
        let ln_final = LayerNorm::new(store, &format!("{name}.ln_final"), d);
        Ok(Encoder {
            cfg: cfg.clone(),
            input_proj,
            positions,
            layers,
            ln_final,
        })
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        let p = self.cfg.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let (r, c) = g.value(x).shape();
                let keep = 1.0 / (1.0 - p);
                let mask = (0..r * c)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                g.mul_const(x, Matrix::from_vec(r, c, mask))
            }
            _ => x,
        }
    }

    /// Encodes `x` (n × d_in). Passing an RNG enables dropout.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput> {
        let n = g.value(x).rows();
        if n > self.cfg.n_max {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.cfg.n_max,
            });
        }
        let heads = self.cfg.n_heads;
        let dh = self.cfg.d_m / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let proj = self.input_proj.forward(g, store, x);
        let pos = g.param(store, self.positions);
        let pos = g.slice_rows(pos, 0, n);
        let mut h = g.add(proj, pos);
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a_in = layer.ln1.forward(g, store, h);
            let q = layer.wq.forward(g, store, a_in);
            let k = layer.wk.forward(g, store, a_in);
            let v = layer.wv.forward(g, store, a_in);
            let mut outs = Vec::with_capacity(heads);
            let mut maps = Vec::with_capacity(heads);
            for head in 0..heads {
                let (lo, hi) = (head * dh, (head + 1) * dh);
                let qh = g.slice_cols(q, lo, hi);
                let kh = g.slice_cols(k, lo, hi);
                let vh = g.slice_cols(v, lo, hi);
                let kt = g.transpose(kh);
                let scores = g.matmul(qh, kt);
                let scores = g.scale(scores, scale);
                let w = g.softmax_rows(scores);
                maps.push(w);
                outs.push(g.matmul(w, vh));
            }
            let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
            let att = layer.wo.forward(g, store, cat);
            let att = self.dropout(g, att, &mut rng);
            h = g.add(h, att);
            let f_in = layer.ln2.forward(g, store, h);
            let f = layer.ff1.forward(g, store, f_in);
            let f = g.relu(f);
            let f = layer.ff2.forward(g, store, f);
            let f = self.dropout(g, f, &mut rng);
            h = g.add(h, f);
            attention.push(maps);
        }
        let hidden = self.ln_final.forward(g, store, h);
        Ok(EncoderOutput { hidden, attention })
    }
}

/// Affine projection from hidden states to per-tag scores.
#[derive(Clone, Copy, Debug)]
pub struct Emission {
    pub proj: Linear,
}

impl Emission {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, d_m: usize, num_tags: usize) -> Self {
        Emission {
            proj: Linear::new(store, init, name, d_m, num_tags),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Var {
        self.proj.forward(g, store, hidden)
    }
}

/// One encoder window over a long sequence; rows `keep_start..keep_end` of
/// the sequence are taken from this chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
    pub keep_start: usize,
    pub keep_end: usize,
}

/// Overlapping windows of at most `n_max` rows whose kept interiors tile
/// `0..n` exactly. The cut between neighbours sits in the middle of their
/// overlap.
pub fn chunk_plan(n: usize, n_max: usize, overlap: usize) -> Vec<Chunk> {
    assert!(n_max > 0);
    if n <= n_max {
        return vec![Chunk {
            start: 0,
            end: n,
            keep_start: 0,
            keep_end: n,
        }];
    }
    let overlap = overlap.min(n_max / 2);
    let stride = n_max - overlap;
    let mut chunks: Vec<Chunk> = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + n_max).min(n);
        let keep_start = chunks.last().map_or(0, |c| c.keep_end);
        let last = end == n;
        let keep_end = if last { n } else { start + stride + overlap / 2 };
        chunks.push(Chunk {
            start,
            end,
            keep_start,
            keep_end,
        });
        if last {
            return chunks;
        }
        start += stride;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, max_relative_error, numeric_gradient};
    use rand::SeedableRng;

    fn rand_mat(r: usize, c: usize, seed: u64, bound: f64) -> Matrix {
        Initializer::new(seed).uniform(r, c, bound)
    }

    #[test]
    fn bn_train_normalizes() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3, 0.1, 1e-5);
        let x = rand_mat(20, 3, 1, 5.0).map(|a| 3.0 * a + 7.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (y, stats) = bn.forward_train(&mut g, &store, xv).unwrap();
        let y = g.value(y);
        for c in 0..3 {
            let col: Vec<f64> = (0..20).map(|i| y.get(i, c)).collect();
            let mean = col.iter().sum::<f64>() / 20.0;
            let var = col.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 20.0;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-5, "var {var}");
            let raw: Vec<f64> = (0..20).map(|i| x.get(i, c)).collect();
            let m = raw.iter().sum::<f64>() / 20.0;
            assert!((stats.mean[c] - m).abs() < 1e-12);
            let uv = raw.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 19.0;
            assert!((stats.var[c] - uv).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_constant_column_gives_beta() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2, 0.1, 1e-5);
        *store.get_mut(bn.beta) = Matrix::from_rows(&[[0.7, -0.3]]);
        let x = Matrix::from_rows(&[[4.0, 1.0], [4.0, 2.0], [4.0, 3.0]]);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (y, _) = bn.forward_train(&mut g, &store, xv).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(y).get(i, 0), 0.7);
        }
    }

    #[test]
    fn bn_eval_closed_form() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1, 0.1, 1e-5);
        *store.get_mut(bn.running_mean) = Matrix::scalar(2.0);
        *store.get_mut(bn.running_var) = Matrix::scalar(4.0);
        *store.get_mut(bn.gamma) = Matrix::scalar(3.0);
        *store.get_mut(bn.beta) = Matrix::scalar(1.0);
        let mut g = Graph::new();
        let xv = g.constant(Matrix::scalar(4.0));
        let y = bn.forward_eval(&mut g, &store, xv);
        let expect = 3.0 * 2.0 / (4.0f64 + 1e-5).sqrt() + 1.0;
        assert!((g.value(y).item() - expect).abs() < 1e-12);
        assert!((g.value(y).item() - 4.0).abs() < 1e-5);
    }

    #[test]
    fn bn_rejects_single_row_and_updates_running() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2, 0.1, 1e-5);
        let mut g = Graph::new();
        let xv = g.constant(Matrix::from_rows(&[[1.0, 2.0]]));
        assert!(matches!(bn.forward_train(&mut g, &store, xv), Err(Error::BatchTooSmall(1))));
        let stats = BatchStats {
            mean: vec![1.0, -2.0],
            var: vec![3.0, 0.0],
        };
        bn.update_running(&mut store, &stats);
        let m = store.get(bn.running_mean).as_slice().to_vec();
        let v = store.get(bn.running_var).as_slice().to_vec();
        assert!((m[0] - 0.1).abs() < 1e-15 && (m[1] + 0.2).abs() < 1e-15);
        assert!((v[0] - 1.2).abs() < 1e-15 && (v[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn fuse_order_and_split() {
        let mut store = ParamStore::new();
        let bv = BatchNorm::new(&mut store, "v", 3, 0.1, 1e-5);
        let ba = BatchNorm::new(&mut store, "a", 2, 0.1, 1e-5);
        let vis = rand_mat(6, 3, 2, 1.0);
        let aud = rand_mat(6, 2, 3, 1.0);
        let mut g = Graph::new();
        let v = g.constant(vis.clone());
        let a = g.constant(aud.clone());
        let fused = fuse(&mut g, &store, &[(v, &bv), (a, &ba)], Mode::Train).unwrap();
        let f3 = g.value(fused.f3).clone();
        assert_eq!(f3.shape(), (6, 5));
        let (vn, _) = bv.forward_train(&mut g, &store, v).unwrap();
        let (an, _) = ba.forward_train(&mut g, &store, a).unwrap();
        assert_eq!(&f3.slice_cols(0, 3), g.value(vn));
        assert_eq!(&f3.slice_cols(3, 5), g.value(an));
        assert_eq!(fused.stats.len(), 2);

        let only = fuse(&mut g, &store, &[(v, &bv)], Mode::Train).unwrap();
        assert_eq!(g.value(only.f3), g.value(vn));

        let short = g.constant(rand_mat(5, 2, 4, 1.0));
        assert!(matches!(
            fuse(&mut g, &store, &[(v, &bv), (short, &ba)], Mode::Eval),
            Err(Error::DimMismatch(_))
        ));
    }

    fn small_encoder(d_in: usize, cfg: &EncoderConfig, seed: u64) -> (ParamStore, Encoder, Emission) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let enc = Encoder::new(&mut store, &mut init, "enc", d_in, cfg).unwrap();
        let em = Emission::new(&mut store, &mut init, "emission", cfg.d_m, 5);
        (store, enc, em)
    }

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            n_layers: 2,
            n_heads: 2,
            d_m: 8,
            d_ff: 12,
            n_max: 16,
            dropout: 0.0,
        }
    }

    fn encode(store: &ParamStore, enc: &Encoder, x: &Matrix) -> Matrix {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = enc.forward(&mut g, store, xv, None).unwrap();
        g.value(out.hidden).clone()
    }

    fn layer_norm_plain(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> Matrix {
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = x.row(i);
            let d = row.len() as f64;
            let m = row.iter().sum::<f64>() / d;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d;
            for (c, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (row[c] - m) / (v + LN_EPS).sqrt() * gamma.as_slice()[c] + beta.as_slice()[c];
            }
        }
        out
    }

    /// Straight-line re-derivation of the encoder on plain matrices.
    fn reference_encoder(store: &ParamStore, enc: &Encoder, x: &Matrix) -> Matrix {
        let n = x.rows();
        let ln = |l: &LayerNorm, m: &Matrix| layer_norm_plain(m, store.get(l.gamma), store.get(l.beta));
        let mut h = enc.input_proj.apply(store, x);
        h.add_assign(&store.get(enc.positions).slice_rows(0, n));
        let heads = enc.cfg.n_heads;
        let dh = enc.cfg.d_m / heads;
        for layer in &enc.layers {
            let a = ln(&layer.ln1, &h);
            let (q, k, v) = (
                layer.wq.apply(store, &a),
                layer.wk.apply(store, &a),
                layer.wv.apply(store, &a),
            );
            let mut cat = Matrix::zeros(n, enc.cfg.d_m);
            for hd in 0..heads {
                for i in 0..n {
                    let mut s: Vec<f64> = (0..n)
                        .map(|j| {
                            (0..dh)
                                .map(|c| q.get(i, hd * dh + c) * k.get(j, hd * dh + c))
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = s.iter().map(|a| (a - m).exp()).sum();
                    for a in s.iter_mut() {
                        *a = (*a - m).exp() / z;
                    }
                    for c in 0..dh {
                        let val: f64 = (0..n).map(|j| s[j] * v.get(j, hd * dh + c)).sum();
                        cat.set(i, hd * dh + c, val);
                    }
                }
            }
            h.add_assign(&layer.wo.apply(store, &cat));
            let f = layer.ff1.apply(store, &ln(&layer.ln2, &h)).map(|a| a.max(0.0));
            h.add_assign(&layer.ff2.apply(store, &f));
        }
        ln(&enc.ln_final, &h)
    }

    #[test]
    fn encoder_matches_reference() {
        let cfg = tiny_cfg();
        let (store, enc, _) = small_encoder(5, &cfg, 7);
        for n in [1, 2, 7] {
            let x = rand_mat(n, 5, 8 + n as u64, 1.0);
            let got = encode(&store, &enc, &x);
            let want = reference_encoder(&store, &enc, &x);
            assert!(got.max_abs_diff(&want) < 1e-12, "n={n}");
        }
    }

    #[test]
    fn single_token_attention_is_identity_mixing() {
        let (store, enc, _) = small_encoder(4, &tiny_cfg(), 9);
        let mut g = Graph::new();
        let xv = g.constant(rand_mat(1, 4, 10, 1.0));
        let out = enc.forward(&mut g, &store, xv, None).unwrap();
        for layer in &out.attention {
            for &a in layer {
                assert_eq!(g.value(a).as_slice(), &[1.0]);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, enc, _) = small_encoder(4, &tiny_cfg(), 11);
        let mut g = Graph::new();
        let xv = g.constant(rand_mat(9, 4, 12, 2.0));
        let out = enc.forward(&mut g, &store, xv, None).unwrap();
        for layer in &out.attention {
            for &a in layer {
                let m = g.value(a);
                for i in 0..m.rows() {
                    assert!(m.row(i).iter().all(|&w| w >= 0.0));
                    assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn positions_break_permutation_equivariance() {
        let (store, enc, _) = small_encoder(3, &tiny_cfg(), 13);
        let x = rand_mat(4, 3, 14, 1.0);
        let mut swapped = x.clone();
        swapped.row_mut(0).copy_from_slice(x.row(1));
        swapped.row_mut(1).copy_from_slice(x.row(0));
        let a = encode(&store, &enc, &x);
        let b = encode(&store, &enc, &swapped);
        assert!(a.row(0).iter().zip(b.row(1)).any(|(p, q)| (p - q).abs() > 1e-9));
    }

    #[test]
    fn too_long_sequence_errors() {
        let (store, enc, _) = small_encoder(3, &tiny_cfg(), 15);
        let mut g = Graph::new();
        let xv = g.constant(rand_mat(17, 3, 16, 1.0));
        assert!(matches!(
            enc.forward(&mut g, &store, xv, None),
            Err(Error::SequenceTooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn emissions_zero_weights_give_bias() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(1);
        let em = Emission::new(&mut store, &mut init, "e", 3, 10);
        *store.get_mut(em.proj.weight) = Matrix::zeros(3, 10);
        let b = rand_mat(1, 10, 2, 1.0);
        *store.get_mut(em.proj.bias) = b.clone();
        let mut g = Graph::new();
        let h = g.constant(rand_mat(4, 3, 3, 1.0));
        let out = em.forward(&mut g, &store, h);
        assert_eq!(g.value(out).shape(), (4, 10));
        for i in 0..4 {
            assert_eq!(g.value(out).row(i), b.as_slice());
        }
    }

    #[test]
    fn eval_forward_is_bit_identical() {
        let (store, enc, _) = small_encoder(3, &tiny_cfg(), 17);
        let x = rand_mat(6, 3, 18, 1.0);
        let a = encode(&store, &enc, &x);
        let b = encode(&store, &enc, &x);
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn dropout_only_with_rng() {
        let cfg = EncoderConfig {
            dropout: 0.5,
            ..tiny_cfg()
        };
        let (store, enc, _) = small_encoder(3, &cfg, 19);
        let x = rand_mat(5, 3, 20, 1.0);
        let plain = encode(&store, &enc, &x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = enc.forward(&mut g, &store, xv, Some(&mut rng)).unwrap();
        assert!(g.value(out.hidden).max_abs_diff(&plain) > 1e-6);
    }

    #[test]
    fn chain_gradients_match_finite_differences() {
        for seed in [21u64, 22, 23] {
            let n = 2 + seed as usize % 5;
            let cfg = EncoderConfig {
                n_layers: 1 + seed as usize % 2,
                n_heads: 2,
                d_m: 6,
                d_ff: 7,
                n_max: 8,
                dropout: 0.0,
            };
            let mut store = ParamStore::new();
            let mut init = Initializer::new(seed);
            let bv = BatchNorm::new(&mut store, "bn_vis", 3, 0.1, 1e-5);
            let ba = BatchNorm::new(&mut store, "bn_aud", 2, 0.1, 1e-5);
            let enc = Encoder::new(&mut store, &mut init, "enc", 5, &cfg).unwrap();
            let em = Emission::new(&mut store, &mut init, "emission", cfg.d_m, 5);
            let mut noise = Initializer::new(seed + 50);
            for id in store.trainable_ids().collect::<Vec<_>>() {
                let (r, c) = store.get(id).shape();
                let delta = noise.uniform(r, c, 0.3);
                store.get_mut(id).add_assign(&delta);
            }
            let vis = rand_mat(n, 3, seed + 1, 2.0);
            let aud = rand_mat(n, 2, seed + 2, 2.0);
            let probe = rand_mat(n, 5, seed + 3, 1.0);
            let build = |g: &mut Graph, store: &ParamStore, v: Var, a: Var| {
                let fused = fuse(g, store, &[(v, &bv), (a, &ba)], Mode::Train).unwrap();
                let h = enc.forward(g, store, fused.f3, None).unwrap();
                let e = em.forward(g, store, h.hidden);
                let z = g.mul_const(e, probe.clone());
                g.sum(z)
            };
            let loss = |store: &ParamStore, vis: &Matrix| {
                let mut g = Graph::new();
                let v = g.constant(vis.clone());
                let a = g.constant(aud.clone());
                let s = build(&mut g, store, v, a);
                g.value(s).item()
            };
            let mut g = Graph::new();
            let v = g.input(vis.clone());
            let a = g.constant(aud.clone());
            let s = build(&mut g, &store, v, a);
            let grads = g.backward(s);
            let num = numeric_gradient(&vis, 1e-5, |m| loss(&store, m));
            let err = max_relative_error(grads.wrt(v).unwrap(), &num);
            assert!(err < 1e-4, "input err {err}");
            let analytic = g.param_grads(&grads);
            for c in check_params(&store, &analytic, 1e-5, |st| loss(st, &vis)) {
                assert!(c.max_rel_error < 1e-4, "{}: {}", c.name, c.max_rel_error);
            }
        }
    }

    #[test]
    fn chunk_plan_tiles_sequence() {
        for n in [1usize, 10, 16, 17, 40, 100, 1000] {
            for (n_max, overlap) in [(16usize, 4usize), (16, 32), (512, 32), (7, 2)] {
                let plan = chunk_plan(n, n_max, overlap);
                let mut next = 0;
                for c in &plan {
                    assert!(c.end - c.start <= n_max);
                    assert!(c.start <= c.keep_start && c.keep_end <= c.end);
                    assert_eq!(c.keep_start, next);
                    assert!(c.keep_end > c.keep_start);
                    next = c.keep_end;
                }
                assert_eq!(next, n);
            }
        }
    }
}
