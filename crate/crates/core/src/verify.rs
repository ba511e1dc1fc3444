//! Finite-difference verification of every loss on random inputs.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::gradcheck::{grad_check, DEFAULT_STEP};
use crate::losses::{
    loss_ce, loss_classdist, loss_entropy_logits, loss_metric, loss_prior, loss_rec, LossTerm, PseudoLabels,
};
use crate::tensor::Tensor;

const CLASSES: usize = 4;
const PER_CLASS: usize = 2;
const QUERIES: usize = 6;
const LATENT: usize = 3;
/// Smallest gap allowed between a hard-mined distance and its runner-up.
const TIE_MARGIN: f64 = 1e-3;

/// Worst relative error of one loss over all sampled configurations.
#[derive(Clone, Debug)]
pub struct LossCheck {
    pub term: LossTerm,
    pub max_rel_error: f64,
    pub configurations: usize,
    pub tol: f64,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

fn balanced_labels() -> Vec<usize> {
    (0..CLASSES).flat_map(|c| std::iter::repeat_n(c, PER_CLASS)).collect()
}

fn second_gap(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

/// True when no hard-mining max/min in the metric loss is within
/// [`TIE_MARGIN`] of a competitor.
fn metric_is_tie_free(zs: &Tensor, ys: &[usize], zt: &Tensor) -> bool {
    for j in 0..zt.rows() {
        for c in 0..CLASSES {
            let d: Vec<f64> = (0..zs.rows())
                .filter(|&i| ys[i] == c)
                .map(|i| zs.row(i).iter().zip(zt.row(j)).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            if d.len() > 1 && second_gap(&d) < TIE_MARGIN {
                return false;
            }
        }
    }
    true
}

/// Checks one loss on `configs` random inputs drawn from `seed`.
pub fn check_loss(term: LossTerm, configs: usize, seed: u64, tol: f64) -> Result<LossCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ys = balanced_labels();
    let n_s = ys.len();
    let mut worst = 0.0f64;
    let named = |pairs: Vec<(&str, Tensor)>| pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect::<Vec<_>>();

    for _ in 0..configs {
        let report = match term {
            LossTerm::Ce => {
                let logits = randn(&mut rng, n_s, CLASSES, 2.0);
                let ys = ys.clone();
                grad_check(move |g, v| loss_ce(g, v[0], &ys), &named(vec![("logits", logits)]), DEFAULT_STEP, tol)?
            }
            LossTerm::Prior => {
                let pt = named(vec![
                    ("mu_s", randn(&mut rng, n_s, LATENT, 1.0)),
                    ("logvar_s", randn(&mut rng, n_s, LATENT, 0.5)),
                    ("mu_t", randn(&mut rng, QUERIES, LATENT, 1.0)),
                    ("logvar_t", randn(&mut rng, QUERIES, LATENT, 0.5)),
                ]);
                grad_check(|g, v| loss_prior(g, v[0], v[1], v[2], v[3]), &pt, DEFAULT_STEP, tol)?
            }
            LossTerm::Rec => {
                let pt = named(vec![
                    ("f_s", randn(&mut rng, n_s, 5, 1.0)),
                    ("zhat_s", randn(&mut rng, n_s, 5, 1.0)),
                    ("f_t", randn(&mut rng, QUERIES, 5, 1.0)),
                    ("zhat_t", randn(&mut rng, QUERIES, 5, 1.0)),
                ]);
                grad_check(|g, v| loss_rec(g, v[0], v[1], v[2], v[3]), &pt, DEFAULT_STEP, tol)?
            }
            LossTerm::Entropy => {
                let pt = named(vec![("logits", randn(&mut rng, QUERIES, CLASSES, 2.0))]);
                grad_check(|g, v| loss_entropy_logits(g, v[0]), &pt, DEFAULT_STEP, tol)?
            }
            LossTerm::Metric => {
                let (zs, zt) = loop {
                    let zs = randn(&mut rng, n_s, LATENT, 1.0);
                    let zt = randn(&mut rng, QUERIES, LATENT, 1.0);
                    if metric_is_tie_free(&zs, &ys, &zt) {
                        break (zs, zt);
                    }
                };
                let pseudo = PseudoLabels::from_labels((0..QUERIES).map(|_| rng.random_range(0..CLASSES)).collect(), CLASSES);
                let ys = ys.clone();
                grad_check(
                    move |g, v| loss_metric(g, v[0], &ys, v[1], &pseudo),
                    &named(vec![("z_s", zs), ("z_t", zt)]),
                    DEFAULT_STEP,
                    tol,
                )?
            }
            LossTerm::Kl => {
                let gs = randn(&mut rng, n_s, CLASSES, 2.0);
                let gt = randn(&mut rng, QUERIES, CLASSES, 2.0);
                let pseudo = PseudoLabels::from_labels((0..QUERIES).map(|_| rng.random_range(0..CLASSES)).collect(), CLASSES);
                let ys = ys.clone();
                grad_check(
                    move |g, v| loss_classdist(g, v[0], &ys, v[1], &pseudo, 2.0),
                    &named(vec![("g_s", gs), ("g_t", gt)]),
                    DEFAULT_STEP,
                    tol,
                )?
            }
        };
        worst = worst.max(report.max_rel_error);
    }
    Ok(LossCheck { term, max_rel_error: worst, configurations: configs, tol })
}

/// Runs [`check_loss`] for all six losses.
pub fn check_all_losses(configs: usize, seed: u64, tol: f64) -> Result<Vec<LossCheck>> {
    LossTerm::ALL.iter().enumerate().map(|(i, &t)| check_loss(t, configs, seed.wrapping_add(i as u64), tol)).collect()
}
