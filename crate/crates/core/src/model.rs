//! Full forecaster: embedding, encoder and copula decoder with its scheduler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::copula::{ClampConfig, CopulaConfig, Decoder, FlowConfig, JointNll, SampleOptions, SampleOutput};
use crate::data::SeriesFrame;
use crate::embedding::{EmbedConfig, Embedder};
use crate::encoder::{Encoder, GlobalEncoder, GlobalEncoderConfig, PerceiverConfig, PerceiverEncoder};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Ctx, Init, ParamStore};
use crate::scheduler::{build_permutation, PermutationMode, PermutationPlan, WindowPolicy};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderConfig {
    Perceiver(PerceiverConfig),
    Global(GlobalEncoderConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerConfig {
    pub mode: PermutationMode,
    pub window: WindowPolicy,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            mode: PermutationMode::Midpoint,
            window: WindowPolicy::Local(5),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed: EmbedConfig,
    pub encoder: EncoderConfig,
    pub flow: FlowConfig,
    pub copula: CopulaConfig,
    pub clamp: ClampConfig,
    pub scheduler: SchedulerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed: EmbedConfig::default(),
            encoder: EncoderConfig::Perceiver(PerceiverConfig::default()),
            flow: FlowConfig::default(),
            copula: CopulaConfig::default(),
            clamp: ClampConfig::default(),
            scheduler: SchedulerConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub n_variables: usize,
    pub embedder: Embedder,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(cfg: &ModelConfig, n_variables: usize, seed: u64) -> Result<(Model, ParamStore)> {
        if n_variables == 0 {
            return Err(Error::Invalid("model needs at least one variable".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let d = cfg.embed.token_dim;
        let embedder = Embedder::new(&mut init, &cfg.embed, n_variables)?;
        let encoder = match &cfg.encoder {
            EncoderConfig::Perceiver(p) => Encoder::Perceiver(PerceiverEncoder::new(&mut init, p, d)?),
            EncoderConfig::Global(c) => Encoder::Global(GlobalEncoder::new(&mut init, c, d)?),
        };
        let decoder = Decoder::new(&mut init, d, &cfg.flow, &cfg.copula, cfg.clamp)?;
        Ok((
            Model {
                cfg: cfg.clone(),
                n_variables,
                embedder,
                encoder,
                decoder,
            },
            store,
        ))
    }

    pub fn plan(&self, frame: &SeriesFrame, seed: u64) -> Result<PermutationPlan> {
        build_permutation(frame, self.cfg.scheduler.mode, self.cfg.scheduler.window, seed)
    }

    /// Training loss of one task on `g`.
    pub fn nll(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frame: &SeriesFrame,
        plan: &PermutationPlan,
        ctx: &mut Ctx,
    ) -> Result<JointNll> {
        let tokens = self.embedder.embed(g, store, frame, ctx)?;
        let z = self.encoder.encode(g, store, &tokens, ctx)?;
        self.decoder.joint_nll(g, store, frame, z.rows, plan)
    }

    /// Encoded token rows without gradient bookkeeping.
    pub fn encode(&self, store: &ParamStore, frame: &SeriesFrame) -> Result<Tensor> {
        let mut g = Graph::inference();
        let tokens = self.embedder.embed(&mut g, store, frame, &mut Ctx::eval())?;
        let z = self.encoder.encode(&mut g, store, &tokens, &mut Ctx::eval())?;
        Ok(g.value(z.rows).clone())
    }

    pub fn sample(
        &self,
        store: &ParamStore,
        frame: &SeriesFrame,
        plan: &PermutationPlan,
        opts: &SampleOptions,
    ) -> Result<SampleOutput> {
        let z = self.encode(store, frame)?;
        self.decoder.sample_missing(store, frame, &z, plan, opts)
    }
}
