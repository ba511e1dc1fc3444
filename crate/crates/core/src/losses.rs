//! The six training losses and the two combined objectives.
//!
//! Every loss is built on a [`Graph`] and returns a scalar [`Var`], so the
//! same code serves training, gradient checking and reporting.

use serde::{Deserialize, Serialize};

use crate::error::{MetfaError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Loss weights `λ1..λ6` and the class-distribution temperature `τ1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// cross-entropy
    pub lambda1: f64,
    /// prior KL
    pub lambda2: f64,
    /// cross-domain metric
    pub lambda3: f64,
    /// feature reconstruction
    pub lambda4: f64,
    /// class-distribution alignment
    pub lambda5: f64,
    /// target entropy (minimax)
    pub lambda6: f64,
    pub tau1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 10.0, lambda2: 1e-2, lambda3: 1e-1, lambda4: 1.0, lambda5: 10.0, lambda6: 5.0, tau1: 2.0 }
    }
}

/// Names of the individual loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Ce,
    Prior,
    Metric,
    Rec,
    Kl,
    Entropy,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] =
        [LossTerm::Ce, LossTerm::Prior, LossTerm::Metric, LossTerm::Rec, LossTerm::Kl, LossTerm::Entropy];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Ce => "ce",
            LossTerm::Prior => "prior",
            LossTerm::Metric => "metric",
            LossTerm::Rec => "rec",
            LossTerm::Kl => "kl",
            LossTerm::Entropy => "entropy",
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5, self.lambda6];
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(MetfaError::Config("loss weights must be finite and ≥ 0".into()));
        }
        if !(self.tau1 > 0.0 && self.tau1.is_finite()) {
            return Err(MetfaError::Config(format!("tau1 must be positive, got {}", self.tau1)));
        }
        Ok(())
    }

    pub fn weight(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Ce => self.lambda1,
            LossTerm::Prior => self.lambda2,
            LossTerm::Metric => self.lambda3,
            LossTerm::Rec => self.lambda4,
            LossTerm::Kl => self.lambda5,
            LossTerm::Entropy => self.lambda6,
        }
    }

    /// Copy with every term outside `keep` zeroed.
    pub fn masked(&self, keep: &[LossTerm]) -> LossWeights {
        let k = |t: LossTerm, v: f64| if keep.contains(&t) { v } else { 0.0 };
        LossWeights {
            lambda1: k(LossTerm::Ce, self.lambda1),
            lambda2: k(LossTerm::Prior, self.lambda2),
            lambda3: k(LossTerm::Metric, self.lambda3),
            lambda4: k(LossTerm::Rec, self.lambda4),
            lambda5: k(LossTerm::Kl, self.lambda5),
            lambda6: k(LossTerm::Entropy, self.lambda6),
            tau1: self.tau1,
        }
    }
}

/// Hard target labels induced by the class probabilities.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabels {
    pub yhat: Vec<usize>,
    /// Number of target samples assigned to each class.
    pub counts: Vec<usize>,
}

impl PseudoLabels {
    /// Row-wise argmax (ties to the lowest index) of a `n × M` matrix.
    pub fn from_scores(scores: &Tensor) -> Self {
        let yhat = scores.argmax_rows();
        Self::from_labels(yhat, scores.cols())
    }

    pub fn from_labels(yhat: Vec<usize>, num_classes: usize) -> Self {
        let mut counts = vec![0; num_classes];
        for &y in &yhat {
            counts[y] += 1;
        }
        Self { yhat, counts }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Target rows assigned to class `c`.
    pub fn members(&self, c: usize) -> Vec<usize> {
        indices_of(&self.yhat, c)
    }
}

fn indices_of(labels: &[usize], c: usize) -> Vec<usize> {
    labels.iter().enumerate().filter(|(_, &y)| y == c).map(|(i, _)| i).collect()
}

fn one_hot(labels: &[usize], m: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * m];
    for (i, &y) in labels.iter().enumerate() {
        if y >= m {
            return Err(MetfaError::Shape(format!("label {y} outside [0, {m})")));
        }
        data[i * m + y] = 1.0;
    }
    Tensor::matrix(labels.len(), m, data)
}

/// Mean negative log-likelihood of the true class under `softmax(logits)`.
pub fn loss_ce(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        return Err(MetfaError::EmptyBatch("cross-entropy over no samples".into()));
    }
    let (n, m) = g.value(logits).dims2()?;
    if n != labels.len() {
        return Err(MetfaError::Shape(format!("{n} logit rows for {} labels", labels.len())));
    }
    let mask = g.constant(one_hot(labels, m)?);
    let logp = g.log_softmax_rows(logits)?;
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / n as f64))
}

fn gaussian_kl(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let (n, d) = g.value(mu).dims2()?;
    let mu2 = g.square(mu);
    let var = g.exp(logvar);
    let a = g.add(mu2, var)?;
    let b = g.sub(a, logvar)?;
    let s = g.sum(b);
    let s = g.scale(s, 0.5 / n as f64);
    Ok(g.shift(s, -0.5 * d as f64))
}

/// Closed-form `KL(N(μ, diag σ²) ‖ N(0, I))`, averaged over each batch and
/// summed over the two domains.
pub fn loss_prior(g: &mut Graph, mu_s: Var, logvar_s: Var, mu_t: Var, logvar_t: Var) -> Result<Var> {
    let ks = gaussian_kl(g, mu_s, logvar_s)?;
    let kt = gaussian_kl(g, mu_t, logvar_t)?;
    g.add(ks, kt)
}

fn mean_sq_err(g: &mut Graph, f: Var, zhat: Var) -> Result<Var> {
    let n = g.value(f).rows();
    let d = g.sub(f, zhat)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Mean squared L2 reconstruction error, summed over the two domains.
pub fn loss_rec(g: &mut Graph, f_s: Var, zhat_s: Var, f_t: Var, zhat_t: Var) -> Result<Var> {
    let a = mean_sq_err(g, f_s, zhat_s)?;
    let b = mean_sq_err(g, f_t, zhat_t)?;
    g.add(a, b)
}

/// Mean Shannon entropy of probability rows, with `0·log 0 = 0`.
pub fn loss_entropy(g: &mut Graph, probs: Var) -> Result<Var> {
    let n = g.value(probs).dims2()?.0;
    let t = g.xlogx(probs)?;
    let s = g.sum(t);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// [`loss_entropy`] of `softmax(logits)`, evaluated through log-softmax so
/// that no probability ever underflows into the logarithm.
pub fn loss_entropy_logits(g: &mut Graph, logits: Var) -> Result<Var> {
    let n = g.value(logits).dims2()?.0;
    let logp = g.log_softmax_rows(logits)?;
    let p = g.exp(logp);
    let t = g.mul(p, logp)?;
    let s = g.sum(t);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// Cross-domain metric loss with hard mining.
///
/// Each target query `j` with pseudo-class `i` is compared with the source
/// supports: `d_i` is the squared distance to the farthest class-`i`
/// support and `d_k` the distance to the nearest class-`k` support. The
/// per-query term `log(1 + Σ_{k≠i} exp(d_i − d_k))` is evaluated as
/// `−log_softmax(−d)[i]`. Terms are averaged over all queries.
pub fn loss_metric(g: &mut Graph, z_s: Var, y_s: &[usize], z_t: Var, pseudo: &PseudoLabels) -> Result<Var> {
    let m = pseudo.num_classes();
    let n_queries = pseudo.yhat.len();
    if n_queries == 0 {
        return Err(MetfaError::EmptyBatch("metric loss with no target queries".into()));
    }
    if g.value(z_s).rows() != y_s.len() || g.value(z_t).rows() != n_queries {
        return Err(MetfaError::Shape("label count does not match latent rows".into()));
    }
    let supports: Vec<Vec<usize>> = (0..m).map(|k| indices_of(y_s, k)).collect();

    let mut total: Option<Var> = None;
    for i in 0..m {
        let queries = pseudo.members(i);
        if queries.is_empty() {
            continue;
        }
        let q = g.gather_rows(z_t, &queries)?;
        let mut cols = Vec::with_capacity(m);
        for (k, sup) in supports.iter().enumerate() {
            if sup.is_empty() {
                return Err(MetfaError::MissingSupport(format!(
                    "pseudo-class {i} has queries but class {k} has no source support"
                )));
            }
            let s = g.gather_rows(z_s, sup)?;
            let d = g.pairwise_sqdist(q, s)?;
            cols.push(if k == i { g.max_rows(d)? } else { g.min_rows(d)? });
        }
        let dist = g.concat_cols(&cols)?;
        let neg = g.scale(dist, -1.0);
        let logp = g.log_softmax_rows(neg)?;
        let mask = g.constant(one_hot(&vec![i; queries.len()], m)?);
        let picked = g.mul(logp, mask)?;
        let s = g.sum(picked);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.expect("at least one pseudo-class is populated");
    Ok(g.scale(total, -1.0 / n_queries as f64))
}

/// Symmetrised KL between per-class mean predictions of the two domains.
///
/// For each class `i` with `c_i > 0` target members, the source and target
/// class distributions are `softmax(mean(g)/τ1)` over the members of that
/// class; their symmetrised KL is weighted by `c_i`. The sum is divided by
/// `M`. Classes without target members are skipped.
pub fn loss_classdist(
    g: &mut Graph,
    logits_s: Var,
    y_s: &[usize],
    logits_t: Var,
    pseudo: &PseudoLabels,
    tau1: f64,
) -> Result<Var> {
    let m = pseudo.num_classes();
    if g.value(logits_s).rows() != y_s.len() || g.value(logits_t).rows() != pseudo.yhat.len() {
        return Err(MetfaError::Shape("label count does not match logit rows".into()));
    }
    let mut total: Option<Var> = None;
    for i in 0..m {
        let c = pseudo.counts[i];
        if c == 0 {
            continue;
        }
        let src = indices_of(y_s, i);
        if src.is_empty() {
            return Err(MetfaError::MissingSupport(format!("class {i} absent from the source batch")));
        }
        let class_log_dist = |g: &mut Graph, logits: Var, rows: &[usize]| -> Result<(Var, Var)> {
            let sel = g.gather_rows(logits, rows)?;
            let mean = g.mean_cols(sel)?;
            let scaled = g.scale(mean, 1.0 / tau1);
            let logp = g.log_softmax_rows(scaled)?;
            Ok((g.exp(logp), logp))
        };
        let (ps, lps) = class_log_dist(g, logits_s, &src)?;
        let (pt, lpt) = class_log_dist(g, logits_t, &pseudo.members(i))?;
        // KL(p‖q) + KL(q‖p) = Σ (p − q)(log p − log q)
        let dp = g.sub(ps, pt)?;
        let dl = g.sub(lps, lpt)?;
        let prod = g.mul(dp, dl)?;
        let s = g.sum(prod);
        let s = g.scale(s, c as f64);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    match total {
        Some(t) => Ok(g.scale(t, 1.0 / m as f64)),
        None => Ok(g.constant(Tensor::scalar(0.0))),
    }
}

/// Scalar handles of the individual losses on one tape. `None` marks a
/// term that was not built.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossVars {
    pub ce: Option<Var>,
    pub prior: Option<Var>,
    pub metric: Option<Var>,
    pub rec: Option<Var>,
    pub kl: Option<Var>,
    pub entropy: Option<Var>,
}

impl LossVars {
    pub fn get(&self, term: LossTerm) -> Option<Var> {
        match term {
            LossTerm::Ce => self.ce,
            LossTerm::Prior => self.prior,
            LossTerm::Metric => self.metric,
            LossTerm::Rec => self.rec,
            LossTerm::Kl => self.kl,
            LossTerm::Entropy => self.entropy,
        }
    }
}

/// Handles of the combined objectives.
#[derive(Clone, Copy, Debug)]
pub struct Objectives {
    /// `L = λ1·L_ce + λ2·L_prior + λ3·L_M + λ4·L_rec + λ5·L_KL`
    pub shared: Var,
    /// `L + λ6·L_H`, minimised by every parameter except the prototypes.
    pub main: Var,
    /// `L − λ6·L_H`, minimised by the prototypes.
    pub proto: Var,
}

/// Builds the two objectives from the individual terms. Terms with a zero
/// weight are left out entirely.
pub fn objectives(g: &mut Graph, terms: &LossVars, w: &LossWeights) -> Result<Objectives> {
    let mut shared: Option<Var> = None;
    for term in [LossTerm::Ce, LossTerm::Prior, LossTerm::Metric, LossTerm::Rec, LossTerm::Kl] {
        let lambda = w.weight(term);
        if lambda == 0.0 {
            continue;
        }
        let Some(v) = terms.get(term) else {
            return Err(MetfaError::Config(format!("{} has weight {lambda} but was not computed", term.name())));
        };
        let weighted = g.scale(v, lambda);
        shared = Some(match shared {
            None => weighted,
            Some(acc) => g.add(acc, weighted)?,
        });
    }
    let shared = match shared {
        Some(s) => s,
        None => g.constant(Tensor::scalar(0.0)),
    };
    if w.lambda6 == 0.0 {
        return Ok(Objectives { shared, main: shared, proto: shared });
    }
    let h = terms
        .entropy
        .ok_or_else(|| MetfaError::Config("entropy has nonzero weight but was not computed".into()))?;
    let wh = g.scale(h, w.lambda6);
    let main = g.add(shared, wh)?;
    let proto = g.sub(shared, wh)?;
    Ok(Objectives { shared, main, proto })
}

/// Plain values of all six losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub ce: f64,
    pub prior: f64,
    pub metric: f64,
    pub rec: f64,
    pub kl: f64,
    pub entropy: f64,
}

impl LossValues {
    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Ce => self.ce,
            LossTerm::Prior => self.prior,
            LossTerm::Metric => self.metric,
            LossTerm::Rec => self.rec,
            LossTerm::Kl => self.kl,
            LossTerm::Entropy => self.entropy,
        }
    }

    pub fn set(&mut self, term: LossTerm, v: f64) {
        match term {
            LossTerm::Ce => self.ce = v,
            LossTerm::Prior => self.prior = v,
            LossTerm::Metric => self.metric = v,
            LossTerm::Rec => self.rec = v,
            LossTerm::Kl => self.kl = v,
            LossTerm::Entropy => self.entropy = v,
        }
    }

    /// `(L_main, L_proto)` on plain numbers.
    pub fn objectives(&self, w: &LossWeights) -> (f64, f64) {
        let l = w.lambda1 * self.ce
            + w.lambda2 * self.prior
            + w.lambda3 * self.metric
            + w.lambda4 * self.rec
            + w.lambda5 * self.kl;
        (l + w.lambda6 * self.entropy, l - w.lambda6 * self.entropy)
    }

    /// Each term multiplied by its weight.
    pub fn weighted(&self, w: &LossWeights) -> LossValues {
        let mut out = LossValues::default();
        for t in LossTerm::ALL {
            out.set(t, w.weight(t) * self.get(t));
        }
        out
    }
}
