//! Linear-chain CRF over link tags with hard grammar constraints.
//!
//! Scores live in log space. Masked transitions, and start/end scores of tags
//! that cannot open/close a sequence, read as `−∞` regardless of the stored
//! learned values, so every DP below only ever considers grammatical paths.

use crate::autodiff::log_sum_exp;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use crate::label_scheme::TransitionMask;

#[derive(Clone, Debug, PartialEq)]
pub struct Crf {
    /// `transitions[from][to]`.
    pub transitions: Matrix,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    /// `None` disables hard masking (every transition allowed).
    pub mask: Option<TransitionMask>,
}

/// NLL together with its gradients with respect to every score.
#[derive(Clone, Debug)]
pub struct NllOutput {
    pub nll: f64,
    pub d_emissions: Matrix,
    pub d_transitions: Matrix,
    pub d_start: Vec<f64>,
    pub d_end: Vec<f64>,
}

impl Crf {
    pub fn zeros(num_tags: usize, mask: Option<TransitionMask>) -> Self {
        if let Some(m) = &mask {
            assert_eq!(m.num_tags, num_tags, "mask size mismatch");
        }
        Crf {
            transitions: Matrix::zeros(num_tags, num_tags),
            start: vec![0.0; num_tags],
            end: vec![0.0; num_tags],
            mask,
        }
    }

    pub fn num_tags(&self) -> usize {
        self.start.len()
    }

    #[inline]
    pub fn transition(&self, from: usize, to: usize) -> f64 {
        match &self.mask {
            Some(m) if !m.allowed(from, to) => f64::NEG_INFINITY,
            _ => self.transitions.get(from, to),
        }
    }

    #[inline]
    pub fn start_score(&self, tag: usize) -> f64 {
        match &self.mask {
            Some(m) if !m.legal_start[tag] => f64::NEG_INFINITY,
            _ => self.start[tag],
        }
    }

    #[inline]
    pub fn end_score(&self, tag: usize) -> f64 {
        match &self.mask {
            Some(m) if !m.legal_end[tag] => f64::NEG_INFINITY,
            _ => self.end[tag],
        }
    }

    fn check_emissions(&self, emissions: &Matrix) {
        assert_eq!(
            emissions.cols(),
            self.num_tags(),
            "emission width does not match the tag count"
        );
    }

    /// Score of one tag path; `−∞` for ungrammatical paths.
    pub fn path_score(&self, emissions: &Matrix, tags: &[usize]) -> f64 {
        self.check_emissions(emissions);
        assert_eq!(emissions.rows(), tags.len(), "one tag per shot");
        let Some(&first) = tags.first() else {
            return 0.0;
        };
        let mut score = self.start_score(first);
        for (j, &t) in tags.iter().enumerate() {
            score += emissions.get(j, t);
            if j > 0 {
                score += self.transition(tags[j - 1], t);
            }
        }
        score + self.end_score(tags[tags.len() - 1])
    }

    fn alphas(&self, emissions: &Matrix) -> Matrix {
        let (n, t) = emissions.shape();
        let mut alpha = Matrix::zeros(n, t);
        for k in 0..t {
            alpha.set(0, k, self.start_score(k) + emissions.get(0, k));
        }
        let mut buf = vec![0.0; t];
        for j in 1..n {
            for k in 0..t {
                for (p, b) in buf.iter_mut().enumerate() {
                    *b = alpha.get(j - 1, p) + self.transition(p, k);
                }
                alpha.set(j, k, log_sum_exp(&buf) + emissions.get(j, k));
            }
        }
        alpha
    }

    fn betas(&self, emissions: &Matrix) -> Matrix {
        let (n, t) = emissions.shape();
        let mut beta = Matrix::zeros(n, t);
        for k in 0..t {
            beta.set(n - 1, k, self.end_score(k));
        }
        let mut buf = vec![0.0; t];
        for j in (0..n - 1).rev() {
            for k in 0..t {
                for (q, b) in buf.iter_mut().enumerate() {
                    *b = self.transition(k, q) + emissions.get(j + 1, q) + beta.get(j + 1, q);
                }
                beta.set(j, k, log_sum_exp(&buf));
            }
        }
        beta
    }

    /// Log of the summed exponentiated scores of all grammatical paths.
    pub fn log_partition(&self, emissions: &Matrix) -> f64 {
        self.check_emissions(emissions);
        let n = emissions.rows();
        if n == 0 {
            return 0.0;
        }
        let alpha = self.alphas(emissions);
        let last: Vec<f64> = (0..self.num_tags())
            .map(|k| alpha.get(n - 1, k) + self.end_score(k))
            .collect();
        log_sum_exp(&last)
    }

    /// Per-shot tag marginals `P(y_j = t)`.
    pub fn marginals(&self, emissions: &Matrix) -> Matrix {
        self.check_emissions(emissions);
        let n = emissions.rows();
        if n == 0 {
            return Matrix::zeros(0, self.num_tags());
        }
        let alpha = self.alphas(emissions);
        let beta = self.betas(emissions);
        let log_z = self.log_partition(emissions);
        alpha.zip_map(&beta, |a, b| (a + b - log_z).exp())
    }

    pub fn nll(&self, emissions: &Matrix, gold: &[usize]) -> Result<f64> {
        let score = self.path_score(emissions, gold);
        if score == f64::NEG_INFINITY {
            return Err(Error::Ungrammatical {
                position: self.first_illegal(gold).unwrap_or(0),
                reason: "gold path is not allowed by the transition mask".into(),
            });
        }
        Ok(self.log_partition(emissions) - score)
    }

    fn first_illegal(&self, tags: &[usize]) -> Option<usize> {
        let first = *tags.first()?;
        if self.start_score(first) == f64::NEG_INFINITY {
            return Some(0);
        }
        if let Some(i) = tags
            .windows(2)
            .position(|w| self.transition(w[0], w[1]) == f64::NEG_INFINITY)
        {
            return Some(i + 1);
        }
        (self.end_score(tags[tags.len() - 1]) == f64::NEG_INFINITY).then(|| tags.len() - 1)
    }

    /// NLL and its exact gradients via forward-backward.
    ///
    /// The gradient with respect to the emissions is the marginal matrix minus
    /// the gold one-hot; transition gradients are expected pair counts minus
    /// gold pair counts. Masked entries receive zero gradient.
    pub fn nll_with_grads(&self, emissions: &Matrix, gold: &[usize]) -> NllOutput {
        self.check_emissions(emissions);
        let (n, t) = emissions.shape();
        assert_eq!(gold.len(), n, "one gold tag per shot");
        let mut d_emissions = Matrix::zeros(n, t);
        let mut d_transitions = Matrix::zeros(t, t);
        let mut d_start = vec![0.0; t];
        let mut d_end = vec![0.0; t];
        if n == 0 {
            return NllOutput {
                nll: 0.0,
                d_emissions,
                d_transitions,
                d_start,
                d_end,
            };
        }
        let alpha = self.alphas(emissions);
        let beta = self.betas(emissions);
        let last: Vec<f64> = (0..t).map(|k| alpha.get(n - 1, k) + self.end_score(k)).collect();
        let log_z = log_sum_exp(&last);

        for j in 0..n {
            for k in 0..t {
                d_emissions.set(j, k, (alpha.get(j, k) + beta.get(j, k) - log_z).exp());
            }
        }
        for k in 0..t {
            d_start[k] = d_emissions.get(0, k);
            d_end[k] = d_emissions.get(n - 1, k);
        }
        for j in 0..n.saturating_sub(1) {
            for p in 0..t {
                let a = alpha.get(j, p);
                if a == f64::NEG_INFINITY {
                    continue;
                }
                for q in 0..t {
                    let tr = self.transition(p, q);
                    if tr == f64::NEG_INFINITY {
                        continue;
                    }
                    let pm = (a + tr + emissions.get(j + 1, q) + beta.get(j + 1, q) - log_z).exp();
                    d_transitions.set(p, q, d_transitions.get(p, q) + pm);
                }
            }
        }

        let score = self.path_score(emissions, gold);
        for (j, &g) in gold.iter().enumerate() {
            d_emissions.set(j, g, d_emissions.get(j, g) - 1.0);
            if j > 0 {
                let p = gold[j - 1];
                d_transitions.set(p, g, d_transitions.get(p, g) - 1.0);
            }
        }
        d_start[gold[0]] -= 1.0;
        d_end[gold[n - 1]] -= 1.0;

        NllOutput {
            nll: log_z - score,
            d_emissions,
            d_transitions,
            d_start,
            d_end,
        }
    }

    /// Highest-scoring grammatical path and its score.
    ///
    /// Ties go to the lower tag index, both when choosing a predecessor and
    /// when choosing the final tag.
    pub fn viterbi(&self, emissions: &Matrix) -> (Vec<usize>, f64) {
        self.check_emissions(emissions);
        let (n, t) = emissions.shape();
        if n == 0 {
            return (Vec::new(), 0.0);
        }
        let mut delta: Vec<f64> = (0..t)
            .map(|k| self.start_score(k) + emissions.get(0, k))
            .collect();
        let mut back = vec![0usize; n * t];
        let mut next = vec![0.0; t];
        for j in 1..n {
            for k in 0..t {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for (p, &d) in delta.iter().enumerate() {
                    let s = d + self.transition(p, k);
                    if s > best {
                        best = s;
                        arg = p;
                    }
                }
                back[j * t + k] = arg;
                next[k] = best + emissions.get(j, k);
            }
            std::mem::swap(&mut delta, &mut next);
        }
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for (k, &d) in delta.iter().enumerate() {
            let s = d + self.end_score(k);
            if s > best {
                best = s;
                arg = k;
            }
        }
        let mut path = vec![0usize; n];
        path[n - 1] = arg;
        for j in (1..n).rev() {
            path[j - 1] = back[j * t + path[j]];
        }
        (path, best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_relative_error, numeric_gradient};
    use crate::label_scheme::LabelScheme;
    use crate::params::Initializer;

    fn random_crf(scheme: &LabelScheme, seed: u64) -> Crf {
        let t = scheme.num_tags();
        let mut init = Initializer::new(seed);
        Crf {
            transitions: init.uniform(t, t, 1.0),
            start: init.uniform(1, t, 1.0).into_vec(),
            end: init.uniform(1, t, 1.0).into_vec(),
            mask: Some(scheme.transition_mask()),
        }
    }

    /// Every grammatical path of length n, by brute force.
    fn legal_paths(crf: &Crf, n: usize) -> Vec<Vec<usize>> {
        let t = crf.num_tags();
        let zero = Matrix::zeros(n, t);
        let mut out = Vec::new();
        let total = t.pow(n as u32);
        for code in 0..total {
            let mut c = code;
            let path: Vec<usize> = (0..n)
                .map(|_| {
                    let d = c % t;
                    c /= t;
                    d
                })
                .rev()
                .collect();
            if crf.path_score(&zero, &path).is_finite() {
                out.push(path);
            }
        }
        out
    }

    #[test]
    fn single_shot_closed_form() {
        let scheme = LabelScheme::ss();
        let crf = random_crf(&scheme, 1);
        let em = Initializer::new(2).uniform(1, 5, 2.0);
        // only N can both start and end
        let expected = crf.start[4] + em.get(0, 4) + crf.end[4];
        assert!((crf.log_partition(&em) - expected).abs() < 1e-12);
        assert!((crf.path_score(&em, &[4]) - expected).abs() < 1e-12);
        assert_eq!(crf.viterbi(&em).0, vec![4]);
    }

    #[test]
    fn zero_params_score_sums_emissions() {
        let scheme = LabelScheme::ss();
        let crf = Crf::zeros(5, Some(scheme.transition_mask()));
        let em = Initializer::new(3).uniform(3, 5, 1.0);
        let path = [0, 2, 4];
        let direct = em.get(0, 0) + em.get(1, 2) + em.get(2, 4);
        assert!((crf.path_score(&em, &path) - direct).abs() < 1e-12);
        assert_eq!(crf.path_score(&em, &[1, 2, 4]), f64::NEG_INFINITY);
    }

    #[test]
    fn enumeration_matches_dp() {
        let scheme = LabelScheme::ssc(&["a", "b"]).unwrap();
        let crf = random_crf(&scheme, 5);
        for n in 1..=4 {
            let em = Initializer::new(10 + n as u64).uniform(n, 10, 2.0);
            let paths = legal_paths(&crf, n);
            let scores: Vec<f64> = paths.iter().map(|p| crf.path_score(&em, p)).collect();
            let brute = log_sum_exp(&scores);
            assert!((crf.log_partition(&em) - brute).abs() < 1e-9);
            let (best, score) = crf.viterbi(&em);
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!((score - max).abs() < 1e-9);
            assert!((crf.path_score(&em, &best) - max).abs() < 1e-9);
        }
    }

    #[test]
    fn shift_identity() {
        let scheme = LabelScheme::ss();
        let crf = random_crf(&scheme, 7);
        let em = Initializer::new(8).uniform(6, 5, 1.0);
        let shifted = em.map(|x| x + 0.75);
        let d = crf.log_partition(&shifted) - crf.log_partition(&em);
        assert!((d - 6.0 * 0.75).abs() < 1e-9);
    }

    #[test]
    fn nll_saturates_and_errors_on_illegal_gold() {
        let scheme = LabelScheme::ss();
        let crf = random_crf(&scheme, 9);
        let gold = [0, 1, 2, 4, 3, 4];
        let mut em = Matrix::zeros(6, 5);
        for (j, &g) in gold.iter().enumerate() {
            em.set(j, g, 1e4);
        }
        let nll = crf.nll(&em, &gold).unwrap();
        assert!(nll.abs() < 1e-9, "nll = {nll}");
        assert!(matches!(
            crf.nll(&em, &[0, 0, 2, 4, 3, 4]),
            Err(Error::Ungrammatical { position: 1, .. })
        ));
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let scheme = LabelScheme::ssc(&["a", "b"]).unwrap();
        let crf = random_crf(&scheme, 11);
        let em = Initializer::new(12).uniform(5, 10, 1.5);
        let gold = scheme
            .encode_indices(
                &[
                    crate::label_scheme::SceneAnnotation::new(0, 2, Some(crate::label_scheme::CategoryId(1))),
                    crate::label_scheme::SceneAnnotation::new(3, 4, Some(crate::label_scheme::CategoryId(0))),
                ],
                5,
            )
            .unwrap();
        let out = crf.nll_with_grads(&em, &gold);
        assert!((out.nll - crf.nll(&em, &gold).unwrap()).abs() < 1e-12);

        let num_em = numeric_gradient(&em, 1e-5, |e| crf.nll(e, &gold).unwrap());
        let err = max_relative_error(&out.d_emissions, &num_em);
        assert!(err < 1e-6, "{err} {:?} {:?}", out.d_emissions, num_em);

        // learned values beneath the mask are never read: perturb every entry
        let num_tr = numeric_gradient(&crf.transitions, 1e-5, |m| {
            let mut c = crf.clone();
            c.transitions = m.clone();
            c.nll(&em, &gold).unwrap()
        });
        assert!(max_relative_error(&out.d_transitions, &num_tr) < 1e-6);

        let start = Matrix::row_vector(&crf.start);
        let num_start = numeric_gradient(&start, 1e-5, |m| {
            let mut c = crf.clone();
            c.start = m.as_slice().to_vec();
            c.nll(&em, &gold).unwrap()
        });
        assert!(max_relative_error(&Matrix::row_vector(&out.d_start), &num_start) < 1e-6);
        let end = Matrix::row_vector(&crf.end);
        let num_end = numeric_gradient(&end, 1e-5, |m| {
            let mut c = crf.clone();
            c.end = m.as_slice().to_vec();
            c.nll(&em, &gold).unwrap()
        });
        assert!(max_relative_error(&Matrix::row_vector(&out.d_end), &num_end) < 1e-6);
    }

    #[test]
    fn marginals_sum_to_one() {
        let scheme = LabelScheme::ssc(&["a", "b", "c"]).unwrap();
        let crf = random_crf(&scheme, 13);
        let em = Initializer::new(14).uniform(7, 15, 3.0);
        let m = crf.marginals(&em);
        for j in 0..7 {
            let s: f64 = m.row(j).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn viterbi_tie_break_is_deterministic() {
        let scheme = LabelScheme::ss();
        let crf = Crf::zeros(5, Some(scheme.transition_mask()));
        let em = Matrix::zeros(6, 5);
        let (a, sa) = crf.viterbi(&em);
        let (b, sb) = crf.viterbi(&em);
        assert_eq!(a, b);
        assert_eq!(sa, 0.0);
        assert_eq!(sb, 0.0);
        scheme.decode_indices(&a).unwrap();
    }

    #[test]
    fn unmasked_crf_allows_everything() {
        let crf = Crf::zeros(5, None);
        let em = Matrix::zeros(2, 5);
        assert_eq!(crf.path_score(&em, &[1, 1]), 0.0);
        assert!((crf.log_partition(&em) - (25f64).ln()).abs() < 1e-12);
    }
}
