//! Pluggable multi-modal encoder and a small convolutional stand-in.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::head::masked_word_mean;
use crate::init;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const PAD_ID: u16 = 0;

/// Fixed-length token ids; everything past `valid` is the pad id.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<u16>,
    valid: usize,
}

impl TokenSeq {
    pub fn new(ids: Vec<u16>, valid: usize) -> Result<Self> {
        if valid == 0 || valid > ids.len() {
            return Err(Error::Contract(format!(
                "valid token count {valid} outside 1..={}",
                ids.len()
            )));
        }
        if ids[valid..].iter().any(|&id| id != PAD_ID) {
            return Err(Error::Contract(format!(
                "tokens past position {valid} must be padding: {ids:?}"
            )));
        }
        Ok(Self { ids, valid })
    }

    /// Pads `words` to `len` entries.
    pub fn padded(words: &[u16], len: usize) -> Result<Self> {
        if words.len() > len {
            return Err(Error::Contract(format!(
                "{} tokens exceed the cap of {len}",
                words.len()
            )));
        }
        let mut ids = words.to_vec();
        ids.resize(len, PAD_ID);
        Self::new(ids, words.len())
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn valid(&self) -> usize {
        self.valid
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn live(&self) -> &[u16] {
        &self.ids[..self.valid]
    }
}

/// Output of any encoder: `Y` (`C×H×W`), word features `L` (`C_l×N`), and the
/// count of non-padding words.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub features: Var,
    pub words: Var,
    pub valid: usize,
}

/// Contract every feature encoder meets to feed the refinement head.
pub trait Encoder<T: Real> {
    /// Ratio of input to feature resolution.
    fn stride(&self) -> usize;
    fn channels(&self) -> usize;
    fn lang_channels(&self) -> usize;
    fn encode(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        tokens: &TokenSeq,
    ) -> Result<Encoded>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoderConfig {
    pub channels: usize,
    pub lang_channels: usize,
    pub vocab: usize,
}

/// Two stride-2 conv stages, word embeddings, and a 1×1 fusion of the image
/// features with the broadcast sentence vector.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    pub cfg: ToyEncoderConfig,
    pub embedding: ParamId,
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
    pub lang: (ParamId, ParamId),
    pub fuse: (ParamId, ParamId),
}

const NAMES: [&str; 9] = [
    "encoder.embedding",
    "encoder.conv1.weight",
    "encoder.conv1.bias",
    "encoder.conv2.weight",
    "encoder.conv2.bias",
    "encoder.lang.weight",
    "encoder.lang.bias",
    "encoder.fuse.weight",
    "encoder.fuse.bias",
];

impl ToyEncoder {
    pub const STRIDE: usize = 4;

    pub fn init<T: Real, R: Rng>(
        cfg: &ToyEncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let (c, cl) = (cfg.channels, cfg.lang_channels);
        if c < 2 || c % 2 != 0 {
            return Err(Error::Config(format!("encoder channels {c} must be even")));
        }
        let half = c / 2;
        let shapes: [Vec<usize>; 9] = [
            vec![cfg.vocab, cl],
            vec![half, 3, 3, 3],
            vec![half],
            vec![c, half, 3, 3],
            vec![c],
            vec![c, cl],
            vec![c, 1],
            vec![c, 2 * c, 1, 1],
            vec![c],
        ];
        let bounds = [
            1.0,
            init::he_bound(27),
            0.0,
            init::he_bound(half * 9),
            0.0,
            init::lecun_bound(cl),
            0.0,
            init::he_bound(2 * c),
            0.0,
        ];
        let mut ids = Vec::with_capacity(9);
        for ((name, shape), bound) in NAMES.iter().zip(&shapes).zip(bounds) {
            let value = if bound == 0.0 {
                Tensor::zeros(shape)?
            } else {
                init::uniform(shape, bound, rng)?
            };
            ids.push(store.add(*name, value)?);
        }
        Ok(Self::from_ids(cfg, &ids))
    }

    pub fn bind<T: Real>(cfg: &ToyEncoderConfig, store: &ParamStore<T>) -> Result<Self> {
        let ids = NAMES
            .iter()
            .map(|n| {
                store
                    .id(n)
                    .ok_or_else(|| Error::Config(format!("missing parameter {n:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_ids(cfg, &ids))
    }

    fn from_ids(cfg: &ToyEncoderConfig, ids: &[ParamId]) -> Self {
        Self {
            cfg: cfg.clone(),
            embedding: ids[0],
            conv1: (ids[1], ids[2]),
            conv2: (ids[3], ids[4]),
            lang: (ids[5], ids[6]),
            fuse: (ids[7], ids[8]),
        }
    }

    /// Word features `L` (`C_l×N`), one embedding column per token.
    pub fn encode_tokens<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: &TokenSeq,
    ) -> Result<Var> {
        let table = g.param(store, self.embedding);
        let ids: Vec<usize> = tokens.ids().iter().map(|&i| i as usize).collect();
        g.embedding_lookup(table, &ids)
    }

    /// Visual features `V` (`C×H/4×W/4`).
    pub fn encode_image<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<Var> {
        let (c, h, w) = g.value(image).dims3("encode_image")?;
        if c != 3 {
            return Err(Error::dim("encode_image", g.shape(image), &[3, h, w]));
        }
        if h % Self::STRIDE != 0 || w % Self::STRIDE != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} is not divisible by stride {}",
                Self::STRIDE
            )));
        }
        let (w1, b1) = (g.param(store, self.conv1.0), g.param(store, self.conv1.1));
        let x = g.conv2d_floor(image, w1, b1, 2, 1)?;
        let x = g.relu(x);
        let (w2, b2) = (g.param(store, self.conv2.0), g.param(store, self.conv2.1));
        let x = g.conv2d_floor(x, w2, b2, 2, 1)?;
        Ok(g.relu(x))
    }

    /// `Y = ReLU(conv1×1([V; broadcast(S)]))` with `S` the projected mean word vector.
    pub fn fuse_multimodal<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        visual: Var,
        words: Var,
        valid: usize,
    ) -> Result<Var> {
        let (c, h, w) = g.value(visual).dims3("fuse_multimodal")?;
        let pooled = masked_word_mean(g, words, valid)?;
        let (lw, lb) = (g.param(store, self.lang.0), g.param(store, self.lang.1));
        let s = g.matmul(lw, pooled)?;
        let s = g.add(s, lb)?;
        if g.value(s).numel() != c {
            return Err(Error::dim("fuse_multimodal", g.shape(visual), g.shape(s)));
        }
        let s_map = g.broadcast_spatial(s, h, w)?;
        let cat = g.concat_channels(&[visual, s_map])?;
        let (fw, fb) = (g.param(store, self.fuse.0), g.param(store, self.fuse.1));
        let y = g.conv2d(cat, fw, fb, 1, 0)?;
        Ok(g.relu(y))
    }
}

impl<T: Real> Encoder<T> for ToyEncoder {
    fn stride(&self) -> usize {
        Self::STRIDE
    }

    fn channels(&self) -> usize {
        self.cfg.channels
    }

    fn lang_channels(&self) -> usize {
        self.cfg.lang_channels
    }

    fn encode(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        tokens: &TokenSeq,
    ) -> Result<Encoded> {
        let img = g.constant(image.clone());
        let words = self.encode_tokens(g, store, tokens)?;
        let visual = self.encode_image(g, store, img)?;
        let features = self.fuse_multimodal(g, store, visual, words, tokens.valid())?;
        Ok(Encoded {
            features,
            words,
            valid: tokens.valid(),
        })
    }
}
