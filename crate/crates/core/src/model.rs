//! The four networks: encoder, Gaussian embedding, prototype classifier and
//! feature decoder, all expressed as differentiable maps on a [`Graph`].
//!
//! Parameters live in a [`ParamStore`] outside any tape. Each forward pass
//! binds them onto a fresh tape with [`ParamStore::bind`].
//!
//! Linear layers store their weight as `fan_in × fan_out` so that a batch
//! `x` maps to `x · W + b`. The prototype matrix is the exception: it is
//! stored `M × h`, one row per class prototype.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MetfaError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Floor applied to the norm of `H` rows before normalisation.
pub const NORM_FLOOR: f64 = 1e-12;

pub const CHECKPOINT_FORMAT: &str = "metfa-ckpt-v1";

pub const PROTOTYPE_PARAM: &str = "classifier.prototypes";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub feat_dim: usize,
    pub latent_dim: usize,
    pub clf_hidden: Vec<usize>,
    pub num_classes: usize,
    /// Temperature of the cosine-similarity classifier.
    pub tau0: f64,
    /// Also L2-normalise prototype rows before the similarity.
    pub normalize_prototypes: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            encoder_hidden: vec![64, 64],
            feat_dim: 32,
            latent_dim: 16,
            clf_hidden: vec![16],
            num_classes: 4,
            tau0: 0.05,
            normalize_prototypes: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.feat_dim, self.latent_dim, self.num_classes];
        if dims.iter().chain(&self.encoder_hidden).chain(&self.clf_hidden).any(|&d| d == 0) {
            return Err(MetfaError::Config("all network dimensions must be ≥ 1".into()));
        }
        if !(self.tau0 > 0.0 && self.tau0.is_finite()) {
            return Err(MetfaError::Config(format!("tau0 must be positive, got {}", self.tau0)));
        }
        Ok(())
    }

    /// Width of `H`, the input to the prototype layer.
    pub fn clf_out_dim(&self) -> usize {
        self.clf_hidden.last().copied().unwrap_or(self.latent_dim)
    }

    /// `(name, shape, group)` of every parameter, in store order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, ParamGroup)> {
        let mut out = Vec::new();
        let linear = |out: &mut Vec<_>, prefix: String, fan_in: usize, fan_out: usize| {
            out.push((format!("{prefix}.weight"), vec![fan_in, fan_out], ParamGroup::Main));
            out.push((format!("{prefix}.bias"), vec![1, fan_out], ParamGroup::Main));
        };

        let mut prev = self.input_dim;
        for (i, &h) in self.encoder_hidden.iter().enumerate() {
            linear(&mut out, format!("encoder.{i}"), prev, h);
            prev = h;
        }
        linear(&mut out, format!("encoder.{}", self.encoder_hidden.len()), prev, self.feat_dim);

        linear(&mut out, "embed.mu".into(), self.feat_dim, self.latent_dim);
        linear(&mut out, "embed.logvar".into(), self.feat_dim, self.latent_dim);

        let mut prev = self.latent_dim;
        for (i, &h) in self.clf_hidden.iter().enumerate() {
            linear(&mut out, format!("classifier.{i}"), prev, h);
            prev = h;
        }
        out.push((PROTOTYPE_PARAM.into(), vec![self.num_classes, prev], ParamGroup::Prototype));

        linear(&mut out, "decoder".into(), self.latent_dim, self.feat_dim);
        out
    }
}

/// Which objective updates a parameter: the prototype matrix follows
/// `L − λ6·L_H`, everything else `L + λ6·L_H`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Prototype,
    Main,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Ordered, named parameters. Exactly one entry is in the prototype group.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn from_entries(entries: Vec<ParamEntry>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.name.clone(), i).is_some() {
                return Err(MetfaError::Config(format!("duplicate parameter {}", e.name)));
            }
        }
        let protos = entries.iter().filter(|e| e.group == ParamGroup::Prototype).count();
        if protos != 1 {
            return Err(MetfaError::Config(format!("expected one prototype parameter, found {protos}")));
        }
        Ok(Self { entries, index })
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = cfg
            .layout()
            .into_iter()
            .map(|(name, shape, group)| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    // the prototype matrix is M × h, so its fan-in is the row width
                    let fan_in = if group == ParamGroup::Prototype { shape[1] } else { shape[0] };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(shape, data).expect("layout shapes are valid")
                };
                ParamEntry { name, group, value }
            })
            .collect();
        Self::from_entries(entries)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    /// Puts every parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self.entries.iter().map(|e| g.param(e.value.clone())).collect();
        Bound { vars, index: self.index.clone() }
    }

    /// Same as [`bind`](Self::bind) but with no gradient tracking.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let vars = self.entries.iter().map(|e| g.constant(e.value.clone())).collect();
        Bound { vars, index: self.index.clone() }
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// Parameters bound onto one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| MetfaError::Config(format!("unknown parameter {name}")))
    }

    /// Tape handles in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// Encoder `E`: ReLU MLP with a linear output layer producing `F`.
pub fn encode(g: &mut Graph, p: &Bound, cfg: &NetConfig, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..cfg.encoder_hidden.len() {
        let a = linear(g, p, &format!("encoder.{i}"), h)?;
        h = g.relu(a);
    }
    linear(g, p, &format!("encoder.{}", cfg.encoder_hidden.len()), h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Output of the Gaussian embedding. `logvar` is the log of the diagonal
/// covariance.
#[derive(Clone, Copy, Debug)]
pub struct GaussianCode {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

/// Gaussian embedding `G`. In training mode `z = μ + exp(½·logvar) ⊙ ε`
/// with fresh `ε ~ N(0, I)` drawn from `rng`; in evaluation mode `z = μ`.
pub fn embed<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &Bound,
    f: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<GaussianCode> {
    match mode {
        Mode::Eval => embed_with_noise(g, p, f, None),
        Mode::Train => {
            let (n, _) = g.value(f).dims2()?;
            let d = g.value(p.var("embed.mu.bias")?).cols();
            let eps: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
            embed_with_noise(g, p, f, Some(Tensor::matrix(n, d, eps)?))
        }
    }
}

/// Gaussian embedding with caller-supplied noise; `None` means `z = μ`.
pub fn embed_with_noise(g: &mut Graph, p: &Bound, f: Var, eps: Option<Tensor>) -> Result<GaussianCode> {
    let mu = linear(g, p, "embed.mu", f)?;
    let logvar = linear(g, p, "embed.logvar", f)?;
    let z = match eps {
        None => mu,
        Some(eps) => {
            let e = g.constant(eps);
            let half = g.scale(logvar, 0.5);
            let std = g.exp(half);
            let noise = g.mul(std, e)?;
            g.add(mu, noise)?
        }
    };
    Ok(GaussianCode { mu, logvar, z })
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput {
    /// Input to the prototype layer.
    pub h: Var,
    /// Pre-softmax activations `(1/τ0)·W·H/‖H‖`.
    pub logits: Var,
    pub probs: Var,
    /// Rows of `H` whose norm was clamped at [`NORM_FLOOR`].
    pub clamped_rows: usize,
}

/// Classifier `C`: MLP to `H` (ReLU between hidden layers, linear last), then cosine similarity against the
/// prototype rows scaled by `1/τ0`.
pub fn classify(g: &mut Graph, p: &Bound, cfg: &NetConfig, z: Var) -> Result<ClassifierOutput> {
    let mut h = z;
    let depth = cfg.clf_hidden.len();
    for i in 0..depth {
        h = linear(g, p, &format!("classifier.{i}"), h)?;
        if i + 1 < depth {
            h = g.relu(h);
        }
    }
    let (norm, clamped_rows) = g.l2_norm_rows(h, NORM_FLOOR)?;
    if clamped_rows > 0 {
        log::warn!("{clamped_rows} zero-norm feature rows clamped before normalisation");
    }
    let hn = g.div_col(h, norm)?;

    let mut w = p.var(PROTOTYPE_PARAM)?;
    if cfg.normalize_prototypes {
        let (wnorm, _) = g.l2_norm_rows(w, NORM_FLOOR)?;
        w = g.div_col(w, wnorm)?;
    }
    let wt = g.transpose(w)?;
    let sim = g.matmul(hn, wt)?;
    let logits = g.scale(sim, 1.0 / cfg.tau0);
    let probs = g.softmax_rows(logits)?;
    Ok(ClassifierOutput { h, logits, probs, clamped_rows })
}

/// Decoder: one linear layer mapping `z` back to feature width.
pub fn reconstruct(g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
    linear(g, p, "decoder", z)
}

/// Every intermediate of one forward pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub features: Var,
    pub code: GaussianCode,
    pub clf: ClassifierOutput,
    pub recon: Var,
}

pub fn forward<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &Bound,
    cfg: &NetConfig,
    x: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Forward> {
    let features = encode(g, p, cfg, x)?;
    let code = embed(g, p, features, mode, rng)?;
    let clf = classify(g, p, cfg, code.z)?;
    let recon = reconstruct(g, p, code.z)?;
    Ok(Forward { features, code, clf, recon })
}

/// Evaluation-mode inference: `(μ, class probabilities)` for a batch.
pub fn infer(store: &ParamStore, cfg: &NetConfig, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let f = encode(&mut g, &p, cfg, xv)?;
    let code = embed_with_noise(&mut g, &p, f, None)?;
    let clf = classify(&mut g, &p, cfg, code.z)?;
    Ok((g.value(code.mu).clone(), g.value(clf.probs).clone()))
}

/// Predicted class per row (argmax, ties to the lowest index).
pub fn predict(store: &ParamStore, cfg: &NetConfig, x: &Tensor) -> Result<Vec<usize>> {
    let (_, probs) = infer(store, cfg, x)?;
    Ok(probs.argmax_rows())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk model snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: NetConfig,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn new(config: &NetConfig, store: &ParamStore) -> Self {
        let params = store
            .entries()
            .iter()
            .map(|e| ParamRecord {
                name: e.name.clone(),
                group: e.group,
                shape: e.value.shape().to_vec(),
                data: e.value.data().to_vec(),
            })
            .collect();
        Self { format: CHECKPOINT_FORMAT.into(), config: config.clone(), params }
    }

    /// Rebuilds the store, checking it against the layout implied by the config.
    pub fn into_store(self) -> Result<(NetConfig, ParamStore)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(MetfaError::Format(format!("unsupported checkpoint format {:?}", self.format)));
        }
        self.config.validate()?;
        let layout = self.config.layout();
        if layout.len() != self.params.len() {
            return Err(MetfaError::Format(format!(
                "checkpoint has {} parameters, config implies {}",
                self.params.len(),
                layout.len()
            )));
        }
        let mut entries = Vec::with_capacity(layout.len());
        for ((name, shape, group), rec) in layout.into_iter().zip(self.params) {
            if rec.name != name || rec.shape != shape || rec.group != group {
                return Err(MetfaError::Format(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    rec.name, rec.shape, name, shape
                )));
            }
            entries.push(ParamEntry { name, group, value: Tensor::new(shape, rec.data)? });
        }
        Ok((self.config, ParamStore::from_entries(entries)?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> NetConfig {
        NetConfig::default()
    }

    fn zeroed(store: &mut ParamStore) {
        for e in store.entries_mut() {
            e.value = Tensor::zeros(e.value.shape());
        }
    }

    #[test]
    fn layout_has_one_prototype() {
        let s = ParamStore::init(&cfg(), 0).unwrap();
        let protos: Vec<_> =
            s.entries().iter().filter(|e| e.group == ParamGroup::Prototype).map(|e| &e.name).collect();
        assert_eq!(protos, vec![PROTOTYPE_PARAM]);
        assert_eq!(s.get(PROTOTYPE_PARAM).unwrap().shape(), &[4, 16]);
    }

    #[test]
    fn init_bounds_and_zero_bias() {
        let s = ParamStore::init(&cfg(), 3).unwrap();
        let w = s.get("encoder.0.weight").unwrap();
        let bound = 1.0 / 16f64.sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(s.get("encoder.0.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = cfg();
        c.tau0 = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.encoder_hidden = vec![0];
        assert!(ParamStore::init(&c, 0).is_err());
    }

    #[test]
    fn zero_encoder_gives_zero_features() {
        let mut s = ParamStore::init(&cfg(), 0).unwrap();
        zeroed(&mut s);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let x = g.constant(Tensor::full(&[3, 16], 2.5));
        let f = encode(&mut g, &p, &cfg(), x).unwrap();
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer_encoder() {
        let c = NetConfig { input_dim: 3, encoder_hidden: vec![], feat_dim: 3, ..cfg() };
        let mut s = ParamStore::init(&c, 0).unwrap();
        *s.get_mut("encoder.0.weight").unwrap() = Tensor::identity(3);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let xt = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 4.0, -1.0]]).unwrap();
        let x = g.constant(xt.clone());
        let f = encode(&mut g, &p, &c, x).unwrap();
        assert_eq!(g.value(f), &xt);
    }

    #[test]
    fn wrong_input_width_is_shape_error() {
        let s = ParamStore::init(&cfg(), 0).unwrap();
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[2, 15]));
        assert!(matches!(encode(&mut g, &p, &cfg(), x), Err(MetfaError::Shape(_))));
    }

    #[test]
    fn eval_mode_z_is_mu() {
        let s = ParamStore::init(&cfg(), 1).unwrap();
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let f = g.constant(Tensor::full(&[2, 32], 0.3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let code = embed(&mut g, &p, f, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(code.z), g.value(code.mu));
    }

    #[test]
    fn unit_variance_adds_noise_verbatim() {
        let mut s = ParamStore::init(&cfg(), 1).unwrap();
        *s.get_mut("embed.logvar.weight").unwrap() = Tensor::zeros(&[32, 16]);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let f = g.constant(Tensor::full(&[2, 32], 0.3));
        let eps = Tensor::new(vec![2, 16], (0..32).map(|i| i as f64 * 0.1 - 1.0).collect()).unwrap();
        let code = embed_with_noise(&mut g, &p, f, Some(eps.clone())).unwrap();
        let expect = g.value(code.mu).zip_map(&eps, |a, b| a + b).unwrap();
        assert_eq!(g.value(code.z), &expect);
    }

    #[test]
    fn orthonormal_prototypes_pick_matching_class() {
        let c = NetConfig { clf_hidden: vec![], latent_dim: 4, num_classes: 4, tau0: 1.0, ..cfg() };
        let mut s = ParamStore::init(&c, 0).unwrap();
        *s.get_mut(PROTOTYPE_PARAM).unwrap() = Tensor::identity(4);
        for i in 0..4 {
            let mut g = Graph::new();
            let p = s.bind(&mut g);
            let mut row = vec![0.0; 4];
            row[i] = 1.0;
            let z = g.constant(Tensor::matrix(1, 4, row).unwrap());
            let out = classify(&mut g, &p, &c, z).unwrap();
            assert_eq!(g.value(out.probs).argmax_rows(), vec![i]);
        }
    }

    #[test]
    fn zero_prototypes_give_uniform() {
        let mut s = ParamStore::init(&cfg(), 0).unwrap();
        *s.get_mut(PROTOTYPE_PARAM).unwrap() = Tensor::zeros(&[4, 16]);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let z = g.constant(Tensor::full(&[3, 16], 0.7));
        let out = classify(&mut g, &p, &cfg(), z).unwrap();
        assert!(g.value(out.probs).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_h_row_is_clamped_not_nan() {
        let c = NetConfig { clf_hidden: vec![], latent_dim: 3, ..cfg() };
        let s = ParamStore::init(&c, 0).unwrap();
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let z = g.constant(Tensor::from_rows(&[vec![0.0; 3], vec![1.0, 0.0, 0.0]]).unwrap());
        let out = classify(&mut g, &p, &c, z).unwrap();
        assert_eq!(out.clamped_rows, 1);
        assert!(g.value(out.probs).is_finite());
    }

    #[test]
    fn lower_temperature_sharpens_without_moving_argmax() {
        let entropy = |t: &Tensor| -> f64 {
            t.data().iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum()
        };
        let s = ParamStore::init(&cfg(), 5).unwrap();
        let z = Tensor::new(vec![1, 16], (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let run = |tau0: f64| {
            let c = NetConfig { tau0, ..cfg() };
            let mut g = Graph::new();
            let p = s.bind(&mut g);
            let zv = g.constant(z.clone());
            let out = classify(&mut g, &p, &c, zv).unwrap();
            g.value(out.probs).clone()
        };
        let (sharp, soft) = (run(0.05), run(1.0));
        assert_eq!(sharp.argmax_rows(), soft.argmax_rows());
        assert!(entropy(&sharp) < entropy(&soft));
    }

    #[test]
    fn decoder_contracts() {
        let c = NetConfig { latent_dim: 32, ..cfg() };
        let mut s = ParamStore::init(&c, 0).unwrap();
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let z = g.constant(Tensor::full(&[5, 32], 1.0));
        let out = reconstruct(&mut g, &p, z).unwrap();
        assert_eq!(g.value(out).shape(), &[5, 32]);

        *s.get_mut("decoder.weight").unwrap() = Tensor::zeros(&[32, 32]);
        let bias = Tensor::new(vec![1, 32], (0..32).map(|i| i as f64).collect()).unwrap();
        *s.get_mut("decoder.bias").unwrap() = bias.clone();
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let z = g.constant(Tensor::full(&[2, 32], 3.0));
        let out = reconstruct(&mut g, &p, z).unwrap();
        assert_eq!(g.value(out).row(1), bias.data());

        *s.get_mut("decoder.weight").unwrap() = Tensor::identity(32);
        *s.get_mut("decoder.bias").unwrap() = Tensor::zeros(&[1, 32]);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let zt = Tensor::new(vec![1, 32], (0..32).map(|i| i as f64 - 7.0).collect()).unwrap();
        let z = g.constant(zt.clone());
        let out = reconstruct(&mut g, &p, z).unwrap();
        assert_eq!(g.value(out), &zt);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = ParamStore::init(&cfg(), 11).unwrap();
        let ck = Checkpoint::new(&cfg(), &s);
        let back: Checkpoint = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        let (c2, s2) = back.into_store().unwrap();
        assert_eq!(c2, cfg());
        for (a, b) in s.entries().iter().zip(s2.entries()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn checkpoint_rejects_mismatch() {
        let s = ParamStore::init(&cfg(), 0).unwrap();
        let mut ck = Checkpoint::new(&cfg(), &s);
        ck.format = "other".into();
        assert!(ck.clone().into_store().is_err());
        let mut ck = Checkpoint::new(&cfg(), &s);
        ck.params[0].shape = vec![1, 1];
        assert!(ck.into_store().is_err());
    }
}
