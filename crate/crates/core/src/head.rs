//! Iterative query-conditioned refinement head.
//!
//! A sentence query generates per-sample 1×1 kernels that re-weight the
//! multi-modal feature map `Y`. Each iteration classifies the transformed
//! features into background/object scores, pools `Y` under the predicted
//! mask, and folds that object vector back into the query. All weights are
//! shared by every iteration.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::mask::BinaryMask;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// How the pooled object vector enters the next query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    /// `Q_{i+1} = Q_i + O_i`
    Sum,
    /// `Q_{i+1} = O_i`
    Replace,
}

impl fmt::Display for UpdateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateMode::Sum => "sum",
            UpdateMode::Replace => "replace",
        })
    }
}

impl FromStr for UpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sum" => Ok(UpdateMode::Sum),
            "replace" => Ok(UpdateMode::Replace),
            other => Err(Error::Config(format!("unknown update mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SadlrConfig {
    /// Number of refinement iterations `n`; 0 means a plain classifier on `Y`.
    pub iterations: usize,
    /// Channels `C` of `Y` and of the query.
    pub channels: usize,
    /// Channels `C_l` of the word features.
    pub lang_channels: usize,
    /// Filter counts of the dynamic layers, e.g. `[8, 32]`.
    pub structure: Vec<usize>,
    /// Per-iteration loss weights; empty when `iterations == 0`.
    pub lambdas: Vec<f64>,
    pub update_mode: UpdateMode,
    pub ln_eps: f64,
}

impl Default for SadlrConfig {
    fn default() -> Self {
        Self::desk(3)
    }
}

impl SadlrConfig {
    pub const LN_EPS: f64 = 1e-5;

    /// Small CPU-sized head: `C = 32`, structure `[8, 32]`.
    pub fn desk(iterations: usize) -> Self {
        Self {
            iterations,
            channels: 32,
            lang_channels: 32,
            structure: vec![8, 32],
            lambdas: lambda_preset(iterations),
            update_mode: UpdateMode::Sum,
            ln_eps: Self::LN_EPS,
        }
    }

    /// Full-size head: `C = 512`, `C_l = 768`, structure `[128, 512]`.
    pub fn full_scale(iterations: usize) -> Self {
        Self {
            channels: 512,
            lang_channels: 768,
            structure: vec![128, 512],
            ..Self::desk(iterations)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.lang_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.structure.is_empty() || self.structure.contains(&0) {
            return Err(Error::Config(format!(
                "structure {:?} must be a non-empty list of positive filter counts",
                self.structure
            )));
        }
        if self.lambdas.len() != self.iterations {
            return Err(Error::Config(format!(
                "{} loss weights for {} iterations",
                self.lambdas.len(),
                self.iterations
            )));
        }
        if self.iterations > 0 {
            if self.lambdas.iter().any(|&l| l.is_nan() || l <= 0.0) {
                return Err(Error::Config(format!(
                    "loss weights {:?} must be positive",
                    self.lambdas
                )));
            }
            let s: f64 = self.lambdas.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "loss weights {:?} sum to {s}, expected 1",
                    self.lambdas
                )));
            }
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::Config("layer-norm eps must be positive".into()));
        }
        Ok(())
    }

    /// Channels of `Z_i`, i.e. the classifier input.
    pub fn classifier_in(&self) -> usize {
        if self.iterations == 0 {
            self.channels
        } else {
            *self.structure.last().expect("validated structure")
        }
    }

    /// Weights applied to the per-iteration losses; `[1.0]` for the bare classifier.
    pub fn effective_lambdas(&self) -> Vec<f64> {
        if self.iterations == 0 {
            vec![1.0]
        } else {
            self.lambdas.clone()
        }
    }
}

/// Loss-weight presets: the last iteration gets 0.7, the rest share 0.3.
pub fn lambda_preset(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![1.0],
        2 => vec![0.3, 0.7],
        3 => vec![0.15, 0.15, 0.7],
        4 => vec![0.1, 0.1, 0.1, 0.7],
        n => {
            let rest = 0.3 / (n - 1) as f64;
            let mut v = vec![rest; n - 1];
            v.push(0.7);
            v
        }
    }
}

#[derive(Clone, Debug)]
pub struct DynLayer {
    pub cin: usize,
    pub cout: usize,
    pub gen_weight: ParamId,
    pub gen_bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Parameter handles of the head. One set, reused by every iteration.
#[derive(Clone, Debug)]
pub struct SadlrHead {
    pub cfg: SadlrConfig,
    pub sentence_weight: Option<ParamId>,
    pub sentence_bias: Option<ParamId>,
    pub layers: Vec<DynLayer>,
    pub cls_weight: ParamId,
    pub cls_bias: ParamId,
}

/// Everything one forward pass of the head produces.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// Raw score maps `R_i`, each `2×H×W`. Exactly one entry when `n = 0`.
    pub scores: Vec<Var>,
    pub masks: Vec<BinaryMask>,
    /// Queries `Q_1..Q_n`, each `C×1`.
    pub queries: Vec<Var>,
    /// Pooled object vectors `O_1..O_{n-1}`, each `C×1`.
    pub objects: Vec<Var>,
}

impl SadlrHead {
    pub fn init<T: Real, R: Rng>(
        cfg: &SadlrConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let (mut sentence_weight, mut sentence_bias) = (None, None);
        let mut layers = Vec::new();
        if cfg.iterations > 0 {
            let b = init::lecun_bound(cfg.lang_channels);
            sentence_weight = Some(store.add(
                "head.sentence.weight",
                init::uniform(&[c, cfg.lang_channels], b, rng)?,
            )?);
            sentence_bias = Some(store.add("head.sentence.bias", Tensor::zeros(&[c, 1])?)?);
            let mut cin = c;
            for (i, &cout) in cfg.structure.iter().enumerate() {
                let b = init::lecun_bound(c);
                let gen_weight = store.add(
                    format!("head.gen{i}.weight"),
                    init::uniform(&[cin * cout, c], b, rng)?,
                )?;
                let gen_bias = store.add(
                    format!("head.gen{i}.bias"),
                    init::uniform(&[cin * cout, 1], b, rng)?,
                )?;
                let gamma = store.add(
                    format!("head.ln{i}.gamma"),
                    Tensor::full(&[cout], T::one())?,
                )?;
                let beta = store.add(format!("head.ln{i}.beta"), Tensor::zeros(&[cout])?)?;
                layers.push(DynLayer {
                    cin,
                    cout,
                    gen_weight,
                    gen_bias,
                    gamma,
                    beta,
                });
                cin = cout;
            }
        }
        let cz = cfg.classifier_in();
        let cls_weight = store.add(
            "head.classifier.weight",
            init::uniform(&[2, cz, 1, 1], init::lecun_bound(cz), rng)?,
        )?;
        let cls_bias = store.add("head.classifier.bias", Tensor::zeros(&[2])?)?;
        Ok(Self {
            cfg: cfg.clone(),
            sentence_weight,
            sentence_bias,
            layers,
            cls_weight,
            cls_bias,
        })
    }

    /// Looks up the parameter handles of an existing store (e.g. a loaded checkpoint).
    pub fn bind<T: Real>(cfg: &SadlrConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let need = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
        };
        let (mut sentence_weight, mut sentence_bias) = (None, None);
        let mut layers = Vec::new();
        if cfg.iterations > 0 {
            sentence_weight = Some(need("head.sentence.weight".into())?);
            sentence_bias = Some(need("head.sentence.bias".into())?);
            let mut cin = cfg.channels;
            for (i, &cout) in cfg.structure.iter().enumerate() {
                layers.push(DynLayer {
                    cin,
                    cout,
                    gen_weight: need(format!("head.gen{i}.weight"))?,
                    gen_bias: need(format!("head.gen{i}.bias"))?,
                    gamma: need(format!("head.ln{i}.gamma"))?,
                    beta: need(format!("head.ln{i}.beta"))?,
                });
                cin = cout;
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            sentence_weight,
            sentence_bias,
            layers,
            cls_weight: need("head.classifier.weight".into())?,
            cls_bias: need("head.classifier.bias".into())?,
        })
    }

    /// `S = Q_1`: mean of the first `valid` word columns of `L`, projected to `C`.
    pub fn init_sentence_query<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        words: Var,
        valid: usize,
    ) -> Result<Var> {
        let (w, b) = match (self.sentence_weight, self.sentence_bias) {
            (Some(w), Some(b)) => (w, b),
            _ => {
                return Err(Error::Contract(
                    "a head with zero iterations has no sentence query".into(),
                ))
            }
        };
        let pooled = masked_word_mean(g, words, valid)?;
        let wv = g.param(store, w);
        let bv = g.param(store, b);
        let proj = g.matmul(wv, pooled)?;
        g.add(proj, bv)
    }

    /// Two (or more) dynamic 1×1 layers: generated kernel, layer norm, ReLU.
    pub fn dynconv_block<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query: Var,
        y: Var,
    ) -> Result<Var> {
        let (c, h, w) = g.value(y).dims3("dynconv_block")?;
        if c != self.cfg.channels {
            return Err(Error::dim(
                "dynconv_block",
                g.shape(y),
                &[self.cfg.channels],
            ));
        }
        let eps = T::of(self.cfg.ln_eps);
        let mut feat = y;
        for layer in &self.layers {
            let gw = g.param(store, layer.gen_weight);
            let gb = g.param(store, layer.gen_bias);
            let kernel = generate_kernel(g, query, gw, gb, layer.cin, layer.cout)?;
            let kt = g.transpose(kernel)?;
            let flat = g.reshape(feat, &[layer.cin, h * w])?;
            let mixed = g.matmul(kt, flat)?;
            let mixed = g.reshape(mixed, &[layer.cout, h, w])?;
            let gamma = g.param(store, layer.gamma);
            let beta = g.param(store, layer.beta);
            let normed = g.layer_norm(mixed, gamma, beta, eps)?;
            feat = g.relu(normed);
        }
        Ok(feat)
    }

    /// Shared 1×1 classifier; channel 0 is background, channel 1 is object.
    pub fn classify_scores<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
    ) -> Result<Var> {
        let w = g.param(store, self.cls_weight);
        let b = g.param(store, self.cls_bias);
        g.conv2d(z, w, b, 1, 0)
    }

    /// Runs all `n` iterations. With `pinned_masks`, those masks feed the
    /// object pooling instead of the argmax of the current scores; the
    /// gradient audit uses this to evaluate the same piecewise-smooth branch
    /// on both sides of a finite difference.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        y: Var,
        words: Var,
        valid: usize,
        pinned_masks: Option<&[BinaryMask]>,
    ) -> Result<HeadOutput> {
        let n = self.cfg.iterations;
        let mut out = HeadOutput {
            scores: Vec::with_capacity(n.max(1)),
            masks: Vec::with_capacity(n.max(1)),
            queries: Vec::with_capacity(n),
            objects: Vec::new(),
        };
        if n == 0 {
            let r = self.classify_scores(g, store, y)?;
            out.masks.push(mask_argmax(g.value(r))?);
            out.scores.push(r);
            return Ok(out);
        }
        let mut query = self.init_sentence_query(g, store, words, valid)?;
        for i in 0..n {
            out.queries.push(query);
            let z = self.dynconv_block(g, store, query, y)?;
            let r = self.classify_scores(g, store, z)?;
            let mask = match pinned_masks {
                Some(p) => p
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("no pinned mask for iteration {i}")))?,
                None => mask_argmax(g.value(r))?,
            };
            if i + 1 < n {
                let obj = pool_object(g, &mask, y)?;
                out.objects.push(obj);
                query = update_query(g, query, obj, self.cfg.update_mode)?;
            }
            out.scores.push(r);
            out.masks.push(mask);
        }
        Ok(out)
    }
}

/// Mean over the first `valid` columns of a `C_l×N` word matrix, as `C_l×1`.
pub fn masked_word_mean<T: Real>(g: &mut Graph<T>, words: Var, valid: usize) -> Result<Var> {
    let (_, n) = g.value(words).dims2("sentence pooling")?;
    if valid == 0 || valid > n {
        return Err(Error::Contract(format!(
            "valid word count {valid} outside 1..={n}"
        )));
    }
    let inv = T::one() / T::of(valid as f64);
    let weights = Tensor::from_fn(&[n, 1], |t| if t < valid { inv } else { T::zero() })?;
    let wv = g.constant(weights);
    g.matmul(words, wv)
}

/// Linear map of the query plus bias, reshaped row-major to `cin×cout`.
pub fn generate_kernel<T: Real>(
    g: &mut Graph<T>,
    query: Var,
    gen_weight: Var,
    gen_bias: Var,
    cin: usize,
    cout: usize,
) -> Result<Var> {
    let (rows, _) = g.value(gen_weight).dims2("generate_kernel")?;
    if rows != cin * cout {
        return Err(Error::dim(
            "generate_kernel",
            g.shape(gen_weight),
            &[cin, cout],
        ));
    }
    let flat = g.matmul(gen_weight, query)?;
    let flat = g.add(flat, gen_bias)?;
    g.reshape(flat, &[cin, cout])
}

/// Object wins only where its score strictly exceeds the background score.
pub fn mask_argmax<T: Real>(scores: &Tensor<T>) -> Result<BinaryMask> {
    let (c, h, w) = scores.dims3("mask_argmax")?;
    if c != 2 {
        return Err(Error::Shape {
            shape: scores.shape().to_vec(),
            reason: "mask_argmax expects 2 channels".into(),
        });
    }
    let p = h * w;
    let d = scores.data();
    let bits = (0..p).map(|i| u8::from(d[p + i] > d[i])).collect();
    BinaryMask::new(h, w, bits)
}

/// Mask-weighted mean of the feature columns of `Y`, as `C×1`. An empty mask
/// yields the zero vector. The mask is a constant: no gradient reaches it.
pub fn pool_object<T: Real>(g: &mut Graph<T>, mask: &BinaryMask, y: Var) -> Result<Var> {
    let (c, h, w) = g.value(y).dims3("pool_object")?;
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::dim(
            "pool_object",
            &[mask.height(), mask.width()],
            g.shape(y),
        ));
    }
    let count = mask.count();
    let inv = if count == 0 {
        T::zero()
    } else {
        T::one() / T::of(count as f64)
    };
    let weights = Tensor::from_fn(&[h * w, 1], |i| T::of(mask.bits()[i] as f64) * inv)?;
    let wv = g.constant(weights);
    let flat = g.reshape(y, &[c, h * w])?;
    g.matmul(flat, wv)
}

pub fn update_query<T: Real>(
    g: &mut Graph<T>,
    query: Var,
    object: Var,
    mode: UpdateMode,
) -> Result<Var> {
    if g.shape(query) != g.shape(object) {
        return Err(Error::dim("update_query", g.shape(query), g.shape(object)));
    }
    match mode {
        UpdateMode::Sum => g.add(query, object),
        UpdateMode::Replace => Ok(object),
    }
}
