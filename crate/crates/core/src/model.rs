//! The full parameter bundle: encoders, base denoiser, fusion model and
//! history adapter sharing one store, plus batched embedding helpers.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Adapter, UNet};
use crate::diffusion::NoiseSchedule;
use crate::encoders::{tokenize, DualEncoder, ImageEmbedding, TextEmbedding, Vocabulary};
use crate::error::{Result, VistaError};
use crate::fusion::FusionModel;
use crate::param::{ParamStore, Role};
use crate::rng::{streams, RngStream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub fusion_blocks: usize,
    pub adapter_copy_base: bool,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            fusion_blocks: 4,
            adapter_copy_base: true,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Vista {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<f32>,
    pub encoder: DualEncoder,
    pub unet: UNet,
    pub fusion: FusionModel,
    pub adapter: Adapter,
    pub schedule: NoiseSchedule,
}

impl Vista {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let schedule = NoiseSchedule::linear(config.timesteps, config.beta_start, config.beta_end)?;
        let root = RngStream::new(seed, streams::INIT);
        let vocab = Vocabulary::grammar();
        let mut store = ParamStore::new();
        let encoder = DualEncoder::new(&mut store, &vocab, config.dim, &mut root.fork(0));
        let unet = UNet::new(&mut store, config.dim, &mut root.fork(1));
        let fusion = FusionModel::new(&mut store, config.dim, config.fusion_blocks, &mut root.fork(2));
        let adapter = Adapter::new(&mut store, &unet, false, &mut root.fork(3));
        Ok(Self {
            config: config.clone(),
            vocab,
            store,
            encoder,
            unet,
            fusion,
            adapter,
            schedule,
        })
    }

    /// Overwrite the adapter twins with the base site's key/value weights.
    pub fn copy_base_into_adapter(&mut self) {
        for (a, s) in self.adapter.sites.iter().zip(&self.unet.sites) {
            for (dst, src) in [(a.k.w, s.k.w), (a.v.w, s.v.w)] {
                let v = self.store.get(src).value.clone();
                self.store.get_mut(dst).value = v;
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.store.count_role(Role::Fusion) + self.store.count_role(Role::Adapter)
    }

    pub fn base_count(&self) -> usize {
        self.store.count_role(Role::Base)
    }

    pub fn embed_texts(&self, captions: &[&str]) -> Result<Vec<TextEmbedding>> {
        let seqs: Vec<_> = captions.iter().map(|c| tokenize(c, &self.vocab)).collect();
        self.encoder.encode_texts(&self.store, &seqs.iter().collect::<Vec<_>>())
    }

    /// Images in `[0, 1]`.
    pub fn embed_images(&self, images: &[&Tensor<f32>]) -> Result<Vec<ImageEmbedding>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        self.encoder.encode_images(&self.store, images)
    }

    /// Stack `[L, D]` text embeddings into a `[B, L, D]` tensor and flags.
    pub fn stack_text(embs: &[&TextEmbedding]) -> Result<(Tensor<f32>, Vec<bool>)> {
        if embs.is_empty() {
            return Err(VistaError::dim("no text embeddings to stack"));
        }
        let t = Tensor::stack(&embs.iter().map(|e| &e.emb).collect::<Vec<_>>())?;
        Ok((t, embs.iter().flat_map(|e| e.valid.iter().copied()).collect()))
    }
}
