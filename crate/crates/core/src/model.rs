use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::data::{Sample, VOCAB_SIZE};
use crate::encoder::{Encoded, Encoder, TokenSeq, ToyEncoder, ToyEncoderConfig};
use crate::error::{Error, Result};
use crate::head::{mask_argmax, HeadOutput, SadlrConfig, SadlrHead};
use crate::loss::{head_loss, LossReport};
use crate::mask::BinaryMask;
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

/// Encoder output followed by the refinement head.
pub struct PipelineOutput {
    pub encoded: Encoded,
    pub head: HeadOutput,
}

/// Runs any encoder into the head.
pub fn run_pipeline<T: Real, E: Encoder<T>>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    encoder: &E,
    head: &SadlrHead,
    image: &Tensor<T>,
    tokens: &TokenSeq,
    pinned_masks: Option<&[BinaryMask]>,
) -> Result<PipelineOutput> {
    if encoder.channels() != head.cfg.channels {
        return Err(Error::Config(format!(
            "encoder emits {} channels, head expects {}",
            encoder.channels(),
            head.cfg.channels
        )));
    }
    let encoded = encoder.encode(g, store, image, tokens)?;
    let head_out = head.forward(
        g,
        store,
        encoded.features,
        encoded.words,
        encoded.valid,
        pinned_masks,
    )?;
    Ok(PipelineOutput {
        encoded,
        head: head_out,
    })
}

/// Toy encoder plus head, with all parameters in one store.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub cfg: SadlrConfig,
    pub store: ParamStore<T>,
    pub encoder: ToyEncoder,
    pub head: SadlrHead,
}

pub fn encoder_config(cfg: &SadlrConfig) -> ToyEncoderConfig {
    ToyEncoderConfig {
        channels: cfg.channels,
        lang_channels: cfg.lang_channels,
        vocab: VOCAB_SIZE,
    }
}

impl<T: Real> Model<T> {
    pub fn init(cfg: &SadlrConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = ToyEncoder::init(&encoder_config(cfg), &mut store, &mut rng)?;
        let head = SadlrHead::init(cfg, &mut store, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            head,
        })
    }

    pub fn bind(cfg: &SadlrConfig, store: ParamStore<T>) -> Result<Self> {
        let encoder = ToyEncoder::bind(&encoder_config(cfg), &store)?;
        let head = SadlrHead::bind(cfg, &store)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            head,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            head: self.head.clone(),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        sample: &Sample,
        pinned_masks: Option<&[BinaryMask]>,
    ) -> Result<PipelineOutput> {
        let image: Tensor<T> = sample.image.cast();
        run_pipeline(
            g,
            &self.store,
            &self.encoder,
            &self.head,
            &image,
            &sample.tokens,
            pinned_masks,
        )
    }

    /// Forward pass plus the weighted multi-iteration loss.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        sample: &Sample,
        pinned_masks: Option<&[BinaryMask]>,
    ) -> Result<(Var, LossReport, PipelineOutput)> {
        let out = self.forward(g, sample, pinned_masks)?;
        let factor = upsample_factor(g, out.encoded.features, sample)?;
        let (loss, report) = head_loss(
            g,
            &out.head.scores,
            &sample.gt,
            factor,
            &self.cfg.effective_lambdas(),
        )?;
        Ok((loss, report, out))
    }

    /// Input-resolution masks from every iteration; the last one is the prediction.
    pub fn predict(&self, sample: &Sample) -> Result<Vec<BinaryMask>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, sample, None)?;
        let factor = upsample_factor(&g, out.encoded.features, sample)?;
        out.head
            .scores
            .iter()
            .map(|&r| {
                let up = crate::ops::bilinear_upsample(g.value(r), factor)?;
                mask_argmax(&up)
            })
            .collect()
    }
}

fn upsample_factor<T: Real>(g: &Graph<T>, features: Var, sample: &Sample) -> Result<usize> {
    let (_, fh, fw) = g.value(features).dims3("features")?;
    let (h, w) = (sample.height(), sample.width());
    if h % fh != 0 || w % fw != 0 || h / fh != w / fw {
        return Err(Error::Config(format!(
            "feature grid {fh}x{fw} does not evenly divide input {h}x{w}"
        )));
    }
    Ok(h / fh)
}
