//! Metrics, embedding export and the ablation ladder.
//!
//! This is the only module allowed to read target-domain labels: it owns
//! [`EvalKey`], the token [`Quarantined::reveal`] requires.

use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datagen::{generate_pair, DomainData, Quarantined};
use crate::error::{MetfaError, Result};
use crate::losses::LossTerm;
use crate::model::{infer, NetConfig, ParamStore};
use crate::optim::{train_on, RunManifest, RunStatus};
use crate::tensor::Tensor;

/// Capability for reading quarantined labels. Only this module can make one.
#[derive(Debug)]
pub struct EvalKey {
    _private: (),
}

const KEY: EvalKey = EvalKey { _private: () };

fn reveal(q: &Quarantined) -> &[usize] {
    q.reveal(&KEY)
}

/// Rows are true classes, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Fraction on the diagonal (equal to micro-averaged F1).
    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            return 0.0;
        }
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum::<u64>() as f64 / t as f64
    }

    /// Relabels classes: entry `(i, j)` moves to `(perm[i], perm[j])`.
    pub fn permuted(&self, perm: &[usize]) -> ConfusionMatrix {
        let m = self.num_classes();
        let mut counts = vec![vec![0; m]; m];
        for i in 0..m {
            for j in 0..m {
                counts[perm[i]][perm[j]] = self.counts[i][j];
            }
        }
        ConfusionMatrix { counts }
    }

    pub fn to_csv(&self) -> String {
        let m = self.num_classes();
        let mut s = String::from("true");
        for j in 0..m {
            s.push_str(&format!(",p{j}"));
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s.push_str(&i.to_string());
            for c in row {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(MetfaError::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= num_classes || t >= num_classes {
            return Err(MetfaError::Shape(format!("class index outside [0, {num_classes})")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Unweighted means over classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Per-class precision, recall and F1, then their unweighted means. Empty
/// rows or columns count as 0. Per-class values are summed in sorted order,
/// so relabelling the classes gives bit-identical results.
pub fn macro_metrics(cm: &ConfusionMatrix) -> MacroMetrics {
    let m = cm.num_classes();
    if m == 0 {
        return MacroMetrics::default();
    }
    let (mut precision, mut recall, mut f1) = (Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m));
    for i in 0..m {
        let tp = cm.counts[i][i] as f64;
        let row: u64 = cm.counts[i].iter().sum();
        let col: u64 = cm.counts.iter().map(|r| r[i]).sum();
        let p = if col > 0 { tp / col as f64 } else { 0.0 };
        let r = if row > 0 { tp / row as f64 } else { 0.0 };
        precision.push(p);
        recall.push(r);
        f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
    }
    let mean = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / m as f64
    };
    MacroMetrics { f1: mean(f1), recall: mean(recall), precision: mean(precision) }
}

/// Test-split metrics for both domains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub source: MacroMetrics,
    pub target: MacroMetrics,
}

/// Confusion matrices on the source and target test splits.
pub fn test_confusions(store: &ParamStore, net: &NetConfig, data: &DomainData) -> Result<(ConfusionMatrix, ConfusionMatrix)> {
    let m = net.num_classes;
    let (_, ps) = infer(store, net, &data.source_test.x)?;
    let (_, pt) = infer(store, net, &data.target_test.x)?;
    let cs = confusion(&ps.argmax_rows(), &data.source_test.y, m)?;
    let ct = confusion(&pt.argmax_rows(), reveal(&data.target_test.labels), m)?;
    Ok((cs, ct))
}

pub fn evaluate(store: &ParamStore, net: &NetConfig, data: &DomainData) -> Result<DomainMetrics> {
    let (cs, ct) = test_confusions(store, net, data)?;
    Ok(DomainMetrics { source: macro_metrics(&cs), target: macro_metrics(&ct) })
}

/// One exported latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub domain: &'static str,
    pub label: usize,
    pub predicted: usize,
    pub z: Vec<f64>,
}

/// Evaluation-mode codes (`z = μ`) for every test sample of both domains.
pub fn export_embeddings(store: &ParamStore, net: &NetConfig, data: &DomainData) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::new();
    let mut push = |domain: &'static str, x: &Tensor, labels: &[usize]| -> Result<()> {
        let (mu, probs) = infer(store, net, x)?;
        for (i, pred) in probs.argmax_rows().into_iter().enumerate() {
            rows.push(EmbeddingRow { domain, label: labels[i], predicted: pred, z: mu.row(i).to_vec() });
        }
        Ok(())
    };
    push("source", &data.source_test.x, &data.source_test.y)?;
    push("target", &data.target_test.x, reveal(&data.target_test.labels))?;
    Ok(rows)
}

pub fn write_embeddings<W: Write>(rows: &[EmbeddingRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let k = rows.first().map_or(0, |r| r.z.len());
    let mut header = vec!["domain".to_string(), "label".into(), "predicted".into()];
    header.extend((0..k).map(|i| format!("z{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.domain.to_string(), r.label.to_string(), r.predicted.to_string()];
        rec.extend(r.z.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Named loss subsets of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationName {
    #[serde(rename = "source-only")]
    SourceOnly,
    #[serde(rename = "mme-like")]
    MmeLike,
    #[serde(rename = "metfa-1")]
    Metfa1,
    #[serde(rename = "metfa-2")]
    Metfa2,
    #[serde(rename = "metfa-3")]
    Metfa3,
    #[serde(rename = "metfa-4")]
    Metfa4,
    #[serde(rename = "metfa-5")]
    Metfa5,
}

impl AblationName {
    pub const ALL: [AblationName; 7] = [
        AblationName::SourceOnly,
        AblationName::MmeLike,
        AblationName::Metfa1,
        AblationName::Metfa2,
        AblationName::Metfa3,
        AblationName::Metfa4,
        AblationName::Metfa5,
    ];

    /// Loss terms kept by this configuration.
    pub fn terms(self) -> &'static [LossTerm] {
        use LossTerm::*;
        match self {
            AblationName::SourceOnly => &[Ce],
            AblationName::MmeLike => &[Ce, Entropy],
            AblationName::Metfa1 => &[Ce, Prior, Entropy],
            AblationName::Metfa2 => &[Ce, Prior, Entropy, Metric],
            AblationName::Metfa3 => &[Ce, Prior, Entropy, Metric, Kl],
            AblationName::Metfa4 => &[Ce, Prior, Entropy, Metric, Rec],
            AblationName::Metfa5 => &[Ce, Prior, Entropy, Metric, Kl, Rec],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationName::SourceOnly => "source-only",
            AblationName::MmeLike => "mme-like",
            AblationName::Metfa1 => "metfa-1",
            AblationName::Metfa2 => "metfa-2",
            AblationName::Metfa3 => "metfa-3",
            AblationName::Metfa4 => "metfa-4",
            AblationName::Metfa5 => "metfa-5",
        }
    }
}

impl fmt::Display for AblationName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationName {
    type Err = MetfaError;

    fn from_str(s: &str) -> Result<Self> {
        AblationName::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| MetfaError::Config(format!("unknown ablation {s:?}")))
    }
}

/// Result of one (configuration, seed) cell.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub config: AblationName,
    pub seed: u64,
    pub metrics: DomainMetrics,
    pub source_confusion: ConfusionMatrix,
    pub target_confusion: ConfusionMatrix,
    pub embeddings: Vec<EmbeddingRow>,
    pub manifest: RunManifest,
}

impl CellResult {
    /// Loss terms whose recorded value stayed exactly zero over the run.
    pub fn silent_terms(&self) -> Vec<LossTerm> {
        LossTerm::ALL
            .into_iter()
            .filter(|&t| self.manifest.history.iter().skip(1).all(|r| r.losses.get(t) == 0.0))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct AblationResults {
    pub cells: Vec<CellResult>,
}

/// Mean and sample standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed-averaged row of the summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub config: AblationName,
    /// `(mean, std)` for source F1, recall, precision, then target.
    pub source: [(f64, f64); 3],
    pub target: [(f64, f64); 3],
}

impl AblationResults {
    pub fn cells_for(&self, config: AblationName) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(move |c| c.config == config)
    }

    pub fn mean_target_f1(&self, config: AblationName) -> f64 {
        let v: Vec<f64> = self.cells_for(config).map(|c| c.metrics.target.f1).collect();
        mean_std(&v).0
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut configs: Vec<AblationName> = Vec::new();
        for c in &self.cells {
            if !configs.contains(&c.config) {
                configs.push(c.config);
            }
        }
        configs
            .into_iter()
            .map(|config| {
                let cells: Vec<&CellResult> = self.cells_for(config).collect();
                let stat = |f: &dyn Fn(&CellResult) -> f64| mean_std(&cells.iter().map(|c| f(c)).collect::<Vec<_>>());
                SummaryRow {
                    config,
                    source: [
                        stat(&|c| c.metrics.source.f1),
                        stat(&|c| c.metrics.source.recall),
                        stat(&|c| c.metrics.source.precision),
                    ],
                    target: [
                        stat(&|c| c.metrics.target.f1),
                        stat(&|c| c.metrics.target.recall),
                        stat(&|c| c.metrics.target.precision),
                    ],
                }
            })
            .collect()
    }

    /// `config,seed,domain,f1,recall,precision`, one line per cell and domain.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("config,seed,domain,f1,recall,precision\n");
        for c in &self.cells {
            for (domain, m) in [("source", c.metrics.source), ("target", c.metrics.target)] {
                s.push_str(&format!("{},{},{},{},{},{}\n", c.config, c.seed, domain, m.f1, m.recall, m.precision));
            }
        }
        s
    }

    /// Seed-averaged table: one row per configuration, source then target
    /// F1/recall/precision, each as mean and standard deviation.
    pub fn table_csv(&self) -> String {
        let mut s = String::from("config");
        for d in ["S", "T"] {
            for m in ["f1", "recall", "precision"] {
                s.push_str(&format!(",{d}_{m}_mean,{d}_{m}_std"));
            }
        }
        s.push('\n');
        for row in self.summary() {
            s.push_str(row.config.as_str());
            for (mean, std) in row.source.iter().chain(&row.target) {
                s.push_str(&format!(",{mean:.4},{std:.4}"));
            }
            s.push('\n');
        }
        s
    }

    /// Writes `metrics.csv`, `table.csv` and the per-cell files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for c in &self.cells {
            write_cell_files(c, dir)?;
        }
        fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        fs::write(dir.join("table.csv"), self.table_csv())?;
        Ok(())
    }
}

pub fn write_cell_files(c: &CellResult, dir: &Path) -> Result<()> {
    let stem = format!("{}_{}", c.config, c.seed);
    fs::write(dir.join(format!("confusion_{stem}.csv")), c.target_confusion.to_csv())?;
    fs::write(dir.join(format!("confusion_source_{stem}.csv")), c.source_confusion.to_csv())?;
    write_embeddings(&c.embeddings, File::create(dir.join(format!("embeddings_{stem}.csv")))?)?;
    Ok(())
}

fn run_cell(base: &RunConfig, data: &DomainData, config: AblationName, seed: u64) -> Result<CellResult> {
    let mut cfg = base.clone().with_seed(seed);
    cfg.ablation = config;
    let outcome = train_on(&cfg, data.clone())?;
    if let Some(e) = outcome.error {
        log::error!("{config} seed {seed} failed: {e}");
        return Err(e);
    }
    debug_assert_eq!(outcome.manifest.status, RunStatus::Completed);
    let (source_confusion, target_confusion) = test_confusions(&outcome.store, &cfg.net, &outcome.data)?;
    let embeddings = export_embeddings(&outcome.store, &cfg.net, &outcome.data)?;
    let metrics = DomainMetrics { source: macro_metrics(&source_confusion), target: macro_metrics(&target_confusion) };
    log::info!("{config} seed {seed}: source F1 {:.4} target F1 {:.4}", metrics.source.f1, metrics.target.f1);
    Ok(CellResult { config, seed, metrics, source_confusion, target_confusion, embeddings, manifest: outcome.manifest })
}

/// Trains every configuration on every seed. Cells run in parallel; the
/// result order is configurations-major, in the order given.
pub fn run_ablation(base: &RunConfig, configs: &[AblationName], seeds: &[u64]) -> Result<AblationResults> {
    base.validate()?;
    let data = generate_pair(&base.shift)?;
    let grid: Vec<(AblationName, u64)> =
        configs.iter().flat_map(|&c| seeds.iter().map(move |&s| (c, s))).collect();
    let cells = grid
        .par_iter()
        .map(|&(c, s)| run_cell(base, &data, c, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationResults { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix { counts: rows.iter().map(|r| r.to_vec()).collect() }
    }

    #[test]
    fn confusion_by_hand() {
        assert_eq!(confusion(&[0, 1, 1], &[0, 0, 1], 2).unwrap(), cm(&[&[1, 1], &[0, 1]]));
        assert_eq!(confusion(&[2, 0, 1], &[2, 0, 1], 3).unwrap(), cm(&[&[1, 0, 0], &[0, 1, 0], &[0, 0, 1]]));
        assert!(confusion(&[0], &[0, 1], 2).is_err());
        assert!(confusion(&[2], &[0], 2).is_err());
    }

    #[test]
    fn macro_metrics_by_hand() {
        assert_eq!(macro_metrics(&cm(&[&[3, 0], &[0, 2]])), MacroMetrics { f1: 1.0, recall: 1.0, precision: 1.0 });
        let m = macro_metrics(&cm(&[&[1, 1], &[0, 1]]));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((m.recall, m.precision), (0.75, 0.75));
    }

    #[test]
    fn empty_class_counts_as_zero() {
        let m = macro_metrics(&cm(&[&[2, 0], &[0, 0]]));
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.f1, 0.5);
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in AblationName::ALL {
            assert_eq!(a.as_str().parse::<AblationName>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{a}\""));
        }
        assert!("metfa-6".parse::<AblationName>().is_err());
        assert_eq!(AblationName::Metfa5.terms().len(), 6);
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(mean_std(&[1.0]), (1.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
