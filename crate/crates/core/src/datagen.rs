//! Synthetic two-domain classification data with a controllable shift.
//!
//! Class `i` of `M` is centred at `class_sep·(cos 2πi/M, sin 2πi/M)` in the
//! first two input dimensions; every dimension carries isotropic Gaussian
//! noise. The target domain rotates, rescales and translates that 2-D signal
//! plane, leaving the remaining noise dimensions untouched.
//!
//! Target labels are wrapped in [`Quarantined`], which only the evaluation
//! module can open.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MetfaError, Result};
use crate::eval::EvalKey;
use crate::tensor::Tensor;

/// Source samples per class in every training batch.
pub const SUPPORT_PER_CLASS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainShiftSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    /// Radius of the circle the class means sit on.
    pub class_sep: f64,
    pub noise_dim_std: f64,
    pub rotation_deg: f64,
    /// Target offset along the first signal axis.
    pub translation: f64,
    /// Target covariance multiplier in the signal plane.
    pub scale: f64,
    /// Samples per class in the source domain.
    pub n_source: usize,
    /// Samples per class in the target domain.
    pub n_target: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DomainShiftSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            input_dim: 16,
            class_sep: 3.0,
            noise_dim_std: 1.0,
            rotation_deg: 30.0,
            translation: 1.0,
            scale: 1.3,
            n_source: 500,
            n_target: 500,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl DomainShiftSpec {
    /// Same spec with the target identically distributed to the source.
    pub fn without_shift(&self) -> Self {
        Self { rotation_deg: 0.0, translation: 0.0, scale: 1.0, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(MetfaError::Config("need at least two classes".into()));
        }
        if self.input_dim < 2 {
            return Err(MetfaError::Config("input_dim must be ≥ 2 to hold the signal plane".into()));
        }
        if self.n_source == 0 || self.n_target == 0 {
            return Err(MetfaError::Config("per-class counts must be positive".into()));
        }
        if !(self.scale > 0.0) || !(self.noise_dim_std >= 0.0) {
            return Err(MetfaError::Config("scale must be > 0 and noise std ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(MetfaError::Config("test_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Labels that the training path cannot read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Quarantined(Vec<usize>);

impl Quarantined {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Only code holding an [`EvalKey`] can read the labels.
    pub fn reveal(&self, _key: &EvalKey) -> &[usize] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub x: Tensor,
    pub y: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    pub x: Tensor,
    pub labels: Quarantined,
}

/// Train/test splits of both domains.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub num_classes: usize,
    pub source_train: LabeledSet,
    pub source_test: LabeledSet,
    pub target_train: UnlabeledSet,
    pub target_test: UnlabeledSet,
}

/// A training mini-batch: `5·M` class-balanced source rows and `5·M`
/// target rows drawn uniformly without replacement.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x_s: Tensor,
    pub y_s: Vec<usize>,
    pub x_t: Tensor,
    pub y_t_eval: Quarantined,
}

fn class_mean(spec: &DomainShiftSpec, c: usize) -> [f64; 2] {
    let a = 2.0 * std::f64::consts::PI * c as f64 / spec.num_classes as f64;
    [spec.class_sep * a.cos(), spec.class_sep * a.sin()]
}

fn draw_domain(spec: &DomainShiftSpec, per_class: usize, target: bool, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let d = spec.input_dim;
    let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();
    let sig_std = spec.noise_dim_std * if target { spec.scale.sqrt() } else { 1.0 };
    let mut data = Vec::with_capacity(spec.num_classes * per_class * d);
    let mut labels = Vec::with_capacity(spec.num_classes * per_class);
    for c in 0..spec.num_classes {
        let mean = class_mean(spec, c);
        for _ in 0..per_class {
            let n0: f64 = rng.sample(StandardNormal);
            let n1: f64 = rng.sample(StandardNormal);
            let (mut s0, mut s1) = (mean[0] + sig_std * n0, mean[1] + sig_std * n1);
            if target {
                (s0, s1) = (cos * s0 - sin * s1 + spec.translation, sin * s0 + cos * s1);
            }
            data.push(s0);
            data.push(s1);
            for _ in 2..d {
                let n: f64 = rng.sample(StandardNormal);
                data.push(spec.noise_dim_std * n);
            }
            labels.push(c);
        }
    }
    (data, labels)
}

/// Stratified split: within each class a seeded shuffle decides which
/// rows go to the test side.
fn split_rows(labels: &[usize], m: usize, test_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..m {
        let rows: Vec<usize> = labels.iter().enumerate().filter(|(_, &y)| y == c).map(|(i, _)| i).collect();
        let n_test = (rows.len() as f64 * test_fraction).round() as usize;
        let perm = sample(rng, rows.len(), rows.len()).into_vec();
        let mut chosen: Vec<usize> = perm[..n_test].iter().map(|&p| rows[p]).collect();
        chosen.sort_unstable();
        let mut is_test = vec![false; rows.len()];
        for &p in &perm[..n_test] {
            is_test[p] = true;
        }
        test.extend(chosen);
        train.extend(rows.iter().zip(&is_test).filter(|(_, &t)| !t).map(|(&r, _)| r));
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn take(data: &Tensor, labels: &[usize], rows: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    Ok((data.gather_rows(rows)?, rows.iter().map(|&r| labels[r]).collect()))
}

/// Generates both domains and splits them. Pure function of `spec`.
pub fn generate_pair(spec: &DomainShiftSpec) -> Result<DomainData> {
    spec.validate()?;
    let d = spec.input_dim;
    let m = spec.num_classes;
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
        r.set_stream(s);
        r
    };

    let (src, ys) = draw_domain(spec, spec.n_source, false, &mut stream(1));
    let (tgt, yt) = draw_domain(spec, spec.n_target, true, &mut stream(2));
    let xs = Tensor::matrix(ys.len(), d, src)?;
    let xt = Tensor::matrix(yt.len(), d, tgt)?;

    let mut split_rng = stream(3);
    let (s_train, s_test) = split_rows(&ys, m, spec.test_fraction, &mut split_rng);
    let (t_train, t_test) = split_rows(&yt, m, spec.test_fraction, &mut split_rng);
    if s_test.is_empty() || t_test.is_empty() {
        return Err(MetfaError::InsufficientData("test split is empty".into()));
    }

    let (x, y) = take(&xs, &ys, &s_train)?;
    let source_train = LabeledSet { x, y };
    let (x, y) = take(&xs, &ys, &s_test)?;
    let source_test = LabeledSet { x, y };
    let (x, y) = take(&xt, &yt, &t_train)?;
    let target_train = UnlabeledSet { x, labels: Quarantined(y) };
    let (x, y) = take(&xt, &yt, &t_test)?;
    let target_test = UnlabeledSet { x, labels: Quarantined(y) };

    Ok(DomainData { num_classes: m, source_train, source_test, target_train, target_test })
}

/// Draws one class-balanced training batch.
pub fn sample_batch<R: Rng + ?Sized>(data: &DomainData, rng: &mut R) -> Result<Batch> {
    let m = data.num_classes;
    let src = &data.source_train;
    let mut rows = Vec::with_capacity(SUPPORT_PER_CLASS * m);
    for c in 0..m {
        let members: Vec<usize> = src.y.iter().enumerate().filter(|(_, &y)| y == c).map(|(i, _)| i).collect();
        if members.len() < SUPPORT_PER_CLASS {
            return Err(MetfaError::InsufficientData(format!(
                "source class {c} has {} samples, need {SUPPORT_PER_CLASS}",
                members.len()
            )));
        }
        rows.extend(sample(rng, members.len(), SUPPORT_PER_CLASS).into_iter().map(|k| members[k]));
    }
    let (x_s, y_s) = take(&src.x, &src.y, &rows)?;

    let n_t = SUPPORT_PER_CLASS * m;
    let tgt = &data.target_train;
    if tgt.x.rows() < n_t {
        return Err(MetfaError::InsufficientData(format!(
            "target pool has {} samples, need {n_t}",
            tgt.x.rows()
        )));
    }
    let trow = sample(rng, tgt.x.rows(), n_t).into_vec();
    let (x_t, y_t) = take(&tgt.x, &tgt.labels.0, &trow)?;
    Ok(Batch { x_s, y_s, x_t, y_t_eval: Quarantined(y_t) })
}

// ----- CSV -----

fn write_rows<W: Write>(w: &mut csv::Writer<W>, domain: &str, split: &str, x: &Tensor, y: &[usize], quarantined: bool) -> Result<()> {
    for (i, &label) in y.iter().enumerate() {
        let mut rec = vec![domain.to_string(), split.to_string(), label.to_string()];
        rec.extend(x.row(i).iter().map(|v| v.to_string()));
        rec.push(if quarantined { "1" } else { "0" }.to_string());
        w.write_record(&rec)?;
    }
    Ok(())
}

/// Writes `domain,split,label,f0..f{d-1},quarantined`.
pub fn write_csv<W: Write>(data: &DomainData, out: W) -> Result<()> {
    let d = data.source_train.x.cols();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["domain".to_string(), "split".into(), "label".into()];
    header.extend((0..d).map(|i| format!("f{i}")));
    header.push("quarantined".into());
    w.write_record(&header)?;
    write_rows(&mut w, "source", "train", &data.source_train.x, &data.source_train.y, false)?;
    write_rows(&mut w, "source", "test", &data.source_test.x, &data.source_test.y, false)?;
    write_rows(&mut w, "target", "train", &data.target_train.x, &data.target_train.labels.0, true)?;
    write_rows(&mut w, "target", "test", &data.target_test.x, &data.target_test.labels.0, true)?;
    w.flush()?;
    Ok(())
}

pub fn save_csv(data: &DomainData, path: &Path) -> Result<()> {
    write_csv(data, File::create(path)?)
}

/// Reads a file produced by [`write_csv`].
pub fn read_csv<R: std::io::Read>(input: R) -> Result<DomainData> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let n = header.len();
    if n < 5 || &header[0] != "domain" || &header[1] != "split" || &header[2] != "label" || &header[n - 1] != "quarantined" {
        return Err(MetfaError::Format("expected header domain,split,label,f0..,quarantined".into()));
    }
    let d = n - 4;
    let mut parts: [(Vec<f64>, Vec<usize>); 4] = Default::default();
    for rec in rdr.records() {
        let rec = rec?;
        let slot = match (&rec[0], &rec[1]) {
            ("source", "train") => 0,
            ("source", "test") => 1,
            ("target", "train") => 2,
            ("target", "test") => 3,
            (a, b) => return Err(MetfaError::Format(format!("unknown domain/split {a}/{b}"))),
        };
        let bad = |e: &dyn std::fmt::Display| MetfaError::Format(format!("bad value: {e}"));
        let label: usize = rec[2].parse().map_err(|e| bad(&e))?;
        parts[slot].1.push(label);
        for i in 0..d {
            parts[slot].0.push(rec[3 + i].parse().map_err(|e| bad(&e))?);
        }
        let q = &rec[n - 1];
        if (slot >= 2) != (q == "1") {
            return Err(MetfaError::Format("quarantine flag must be 1 exactly on target rows".into()));
        }
    }
    if parts.iter().any(|p| p.1.is_empty()) {
        return Err(MetfaError::InsufficientData("every domain/split needs at least one row".into()));
    }
    let num_classes = parts.iter().flat_map(|p| p.1.iter()).max().map_or(0, |m| m + 1);
    let [(a, ay), (b, by), (c, cy), (e, ey)] = parts;
    let mk = |data: Vec<f64>, n: usize| Tensor::matrix(n, d, data);
    Ok(DomainData {
        num_classes,
        source_train: LabeledSet { x: mk(a, ay.len())?, y: ay },
        source_test: LabeledSet { x: mk(b, by.len())?, y: by },
        target_train: UnlabeledSet { x: mk(c, cy.len())?, labels: Quarantined(cy) },
        target_test: UnlabeledSet { x: mk(e, ey.len())?, labels: Quarantined(ey) },
    })
}

pub fn load_csv(path: &Path) -> Result<DomainData> {
    read_csv(File::open(path)?)
}
