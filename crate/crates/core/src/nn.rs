//! Differentiable layers: parameter sets, linear, multi-head self-attention,
//! transformer blocks, 2-D sinusoidal positional encoding, initialization.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{GradGraph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Named map from hierarchical layer path (e.g. "encoder.conv1.weight") to
/// parameter tensor. Iteration is lexicographic, so a fixed architecture
/// yields a fixed parameter order everywhere (init, optimizer, checkpoints).
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a zero-filled parameter. Paths must be unique.
    pub fn add(&mut self, name: &str, shape: &[usize]) {
        let t = Tensor::zeros(shape).with_grad();
        let prev = self.params.insert(name.to_string(), t);
        assert!(prev.is_none(), "duplicate parameter path {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total element count across all parameters.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.grad = None;
        }
    }
}

/// Parameters bound onto a graph for one forward/backward episode.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Assemble from explicit (name, var) pairs; used by harnesses that
    /// create the leaves themselves (e.g. finite-difference sweeps).
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { vars: pairs.into_iter().collect() }
    }
}

/// Insert every parameter of `ps` as a graph leaf. With `trainable` false the
/// backward pass ignores them (a detached forward).
pub fn bind(g: &mut GradGraph, ps: &ParamSet, trainable: bool) -> Bound {
    let mut vars = BTreeMap::new();
    for (name, t) in ps.iter() {
        let mut leaf = t.clone();
        leaf.grad = None;
        leaf.requires_grad = trainable;
        vars.insert(name.clone(), g.leaf(leaf));
    }
    Bound { vars }
}

/// Copy gradients from the graph back into the parameter set (replacing any
/// previous gradients).
pub fn collect_grads(g: &GradGraph, bound: &Bound, ps: &mut ParamSet) {
    for (name, &var) in bound.iter() {
        let grad = g.grad(var).map(|s| s.to_vec());
        if let Some(t) = ps.get_mut(name) {
            t.grad = grad;
        }
    }
}

/// pix2pix-style initialization: every `.weight` ~ Normal(0, 0.02), every
/// `.gain` 1, everything else (biases) 0.
pub fn init_params(ps: &mut ParamSet, rng: &mut Rng) {
    for (name, t) in ps.iter_mut() {
        if name.ends_with(".weight") {
            for v in t.data_mut() {
                *v = 0.02 * rng.normal();
            }
        } else if name.ends_with(".gain") {
            t.data_mut().fill(1.0);
        } else {
            t.data_mut().fill(0.0);
        }
    }
}

/// Attention geometry: head width is d_model / n_heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self> {
        let cfg = AttentionConfig { d_model, n_heads };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "attention needs n_heads ({}) to divide d_model ({}), both positive",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }
}

// ---- parameter registration ------------------------------------------------

pub fn add_linear(ps: &mut ParamSet, prefix: &str, d_in: usize, d_out: usize) {
    ps.add(&format!("{prefix}.weight"), &[d_in, d_out]);
    ps.add(&format!("{prefix}.bias"), &[d_out]);
}

pub fn add_conv(ps: &mut ParamSet, prefix: &str, c_out: usize, c_in: usize, kh: usize, kw: usize) {
    ps.add(&format!("{prefix}.weight"), &[c_out, c_in, kh, kw]);
    ps.add(&format!("{prefix}.bias"), &[c_out]);
}

pub fn add_conv_t(ps: &mut ParamSet, prefix: &str, c_in: usize, c_out: usize, kh: usize, kw: usize) {
    ps.add(&format!("{prefix}.weight"), &[c_in, c_out, kh, kw]);
    ps.add(&format!("{prefix}.bias"), &[c_out]);
}

pub fn add_layer_norm(ps: &mut ParamSet, prefix: &str, d: usize) {
    ps.add(&format!("{prefix}.gain"), &[d]);
    ps.add(&format!("{prefix}.bias"), &[d]);
}

pub fn add_mhsa(ps: &mut ParamSet, prefix: &str, cfg: &AttentionConfig) {
    for proj in ["wq", "wk", "wv", "wo"] {
        add_linear(ps, &format!("{prefix}.{proj}"), cfg.d_model, cfg.d_model);
    }
}

pub fn add_transformer_block(ps: &mut ParamSet, prefix: &str, cfg: &AttentionConfig) {
    add_layer_norm(ps, &format!("{prefix}.ln1"), cfg.d_model);
    add_mhsa(ps, &format!("{prefix}.attn"), cfg);
    add_layer_norm(ps, &format!("{prefix}.ln2"), cfg.d_model);
    add_linear(ps, &format!("{prefix}.mlp.fc1"), cfg.d_model, 2 * cfg.d_model);
    add_linear(ps, &format!("{prefix}.mlp.fc2"), 2 * cfg.d_model, cfg.d_model);
}

// ---- layer forward functions -------------------------------------------------

/// x [T, d_in] * W [d_in, d_out] + b [d_out].
pub fn linear(g: &mut GradGraph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn linear_by_name(g: &mut GradGraph, x: Var, params: &Bound, prefix: &str) -> Result<Var> {
    let w = params.var(&format!("{prefix}.weight"));
    let b = params.var(&format!("{prefix}.bias"));
    linear(g, x, w, b)
}

/// Multi-head self-attention over tokens x [T, d_model]; full bidirectional
/// attention, no mask, no positional information of its own.
pub fn mhsa(
    g: &mut GradGraph,
    x: Var,
    params: &Bound,
    prefix: &str,
    cfg: &AttentionConfig,
) -> Result<Var> {
    Ok(mhsa_with_attn(g, x, params, prefix, cfg)?.0)
}

/// [`mhsa`] also returning the per-head attention weight matrices [T, T].
pub fn mhsa_with_attn(
    g: &mut GradGraph,
    x: Var,
    params: &Bound,
    prefix: &str,
    cfg: &AttentionConfig,
) -> Result<(Var, Vec<Var>)> {
    cfg.validate()?;
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 || shape[1] != cfg.d_model {
        return Err(Error::ShapeMismatch {
            op: "mhsa",
            left: shape,
            right: vec![0, cfg.d_model],
        });
    }
    let d_k = cfg.d_k();
    let q = linear_by_name(g, x, params, &format!("{prefix}.wq"))?;
    let k = linear_by_name(g, x, params, &format!("{prefix}.wk"))?;
    let v = linear_by_name(g, x, params, &format!("{prefix}.wv"))?;

    let mut contexts = Vec::with_capacity(cfg.n_heads);
    let mut attns = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.slice(q, 1, h * d_k, d_k)?;
        let kh = g.slice(k, 1, h * d_k, d_k)?;
        let vh = g.slice(v, 1, h * d_k, d_k)?;
        let kt = g.transpose2(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt());
        let attn = g.softmax(scaled, 1)?;
        // order-invariant contraction over tokens keeps permutation
        // equivariance bitwise-exact
        let ctx = g.matmul_stable(attn, vh)?;
        contexts.push(ctx);
        attns.push(attn);
    }
    let merged = g.concat(&contexts, 1)?;
    let out = linear_by_name(g, merged, params, &format!("{prefix}.wo"))?;
    Ok((out, attns))
}

/// Pre-norm residual transformer block:
/// x <- x + mhsa(ln(x)); x <- x + mlp(ln(x)) with a 2x-width relu MLP.
pub fn transformer_block(
    g: &mut GradGraph,
    x: Var,
    params: &Bound,
    prefix: &str,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let ln1_g = params.var(&format!("{prefix}.ln1.gain"));
    let ln1_b = params.var(&format!("{prefix}.ln1.bias"));
    let normed = g.layer_norm(x, ln1_g, ln1_b, NORM_EPS)?;
    let attended = mhsa(g, normed, params, &format!("{prefix}.attn"), cfg)?;
    let x1 = g.add(x, attended)?;

    let ln2_g = params.var(&format!("{prefix}.ln2.gain"));
    let ln2_b = params.var(&format!("{prefix}.ln2.bias"));
    let normed2 = g.layer_norm(x1, ln2_g, ln2_b, NORM_EPS)?;
    let hidden = linear_by_name(g, normed2, params, &format!("{prefix}.mlp.fc1"))?;
    let activated = g.relu(hidden);
    let mlp_out = linear_by_name(g, activated, params, &format!("{prefix}.mlp.fc2"))?;
    g.add(x1, mlp_out)
}

/// Fixed sinusoidal 2-D positional encoding [h*w, d_model]: the first
/// d_model/2 channels encode the row index, the second half the column, each
/// with sin/cos interleaving and frequency base 10000.
pub fn positional_encoding_2d(h: usize, w: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 4 != 0 || d_model == 0 {
        return Err(Error::Config(format!(
            "positional encoding needs d_model divisible by 4, got {d_model}"
        )));
    }
    let half = d_model / 2;
    let pairs = half / 2;
    let mut data = vec![0.0; h * w * d_model];
    for r in 0..h {
        for c in 0..w {
            let row = &mut data[(r * w + c) * d_model..][..d_model];
            for j in 0..pairs {
                let omega = 10000f64.powf(-((2 * j) as f64) / half as f64);
                row[2 * j] = (r as f64 * omega).sin();
                row[2 * j + 1] = (r as f64 * omega).cos();
                row[half + 2 * j] = (c as f64 * omega).sin();
                row[half + 2 * j + 1] = (c as f64 * omega).cos();
            }
        }
    }
    Tensor::from_vec(&[h * w, d_model], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paramset_iteration_is_lexicographic() {
        let mut ps = ParamSet::new();
        ps.add("b.weight", &[2]);
        ps.add("a.bias", &[1]);
        ps.add("a.weight", &[3]);
        let names = ps.names();
        assert_eq!(names, vec!["a.bias", "a.weight", "b.weight"]);
        assert_eq!(ps.param_count(), 6);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter path")]
    fn duplicate_paths_rejected() {
        let mut ps = ParamSet::new();
        ps.add("x.weight", &[1]);
        ps.add("x.weight", &[1]);
    }

    #[test]
    fn init_rules() {
        let mut ps = ParamSet::new();
        add_conv(&mut ps, "c", 4, 3, 3, 3);
        add_layer_norm(&mut ps, "ln", 8);
        let mut rng = Rng::new(1);
        init_params(&mut ps, &mut rng);
        assert!(ps.get("c.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(ps.get("ln.gain").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(ps.get("ln.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(ps.get("c.weight").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn init_weight_std_near_002() {
        let mut ps = ParamSet::new();
        ps.add("big.weight", &[100, 100]);
        let mut rng = Rng::new(7);
        init_params(&mut ps, &mut rng);
        let data = ps.get("big.weight").unwrap().data();
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let std = (data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64).sqrt();
        assert!((std - 0.02).abs() < 0.002, "std {std}");
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        let build = || {
            let mut ps = ParamSet::new();
            add_linear(&mut ps, "l", 16, 16);
            let mut rng = Rng::new(123);
            init_params(&mut ps, &mut rng);
            ps.get("l.weight").unwrap().data().to_vec()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn attention_config_validates() {
        assert!(AttentionConfig::new(64, 4).is_ok());
        assert!(AttentionConfig::new(64, 5).is_err());
        assert!(AttentionConfig::new(0, 1).is_err());
        assert_eq!(AttentionConfig::new(64, 4).unwrap().d_k(), 16);
    }

    #[test]
    fn positional_encoding_properties() {
        let pe = positional_encoding_2d(6, 5, 8).unwrap();
        assert_eq!(pe.shape(), &[30, 8]);
        // bounded in [-1, 1]
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // at (0,0) all sin channels are 0, all cos channels are 1
        let first = &pe.data()[..8];
        assert_eq!(first, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(positional_encoding_2d(4, 4, 6).is_err());
    }

    #[test]
    fn positional_encoding_distinct_up_to_64() {
        let (h, w, d) = (64, 64, 8);
        let pe = positional_encoding_2d(h, w, d).unwrap();
        // exhaustive pairwise distinctness via sorted dedup on the rows
        let mut rows: Vec<Vec<u64>> = pe
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        let before = rows.len();
        rows.dedup();
        assert_eq!(rows.len(), before, "positional encodings collide");
    }
}
