use crate::adversarial::{ClassifierHead, HeadRole};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Rng};
use crate::vrnn::{EmbedMode, FrameSequence, SequenceEmbedding, Vrnn, VrnnConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vrnn: VrnnConfig,
    pub head_hidden: usize,
    /// Number of identities, i.e. logit width of both heads.
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn new(vrnn: VrnnConfig, num_classes: usize) -> Self {
        Self {
            vrnn,
            head_hidden: 32,
            num_classes,
        }
    }

    /// Small dimensions used by gradient checks.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            vrnn: VrnnConfig {
                frame_dim: 8,
                feat_dim: 8,
                hidden_dim: 8,
                cell_dim: 8,
                proj_dim: 4,
                latent_dim: 4,
                num_layers: 1,
            },
            head_hidden: 8,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vrnn.validate()?;
        if self.head_hidden == 0 {
            return Err(Error::InvalidConfig("head_hidden must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 identities, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// VRNN encoder/decoder plus the probe and gallery classifier heads, with
/// all weights in one store.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub store: ParamStore,
    pub vrnn: Vrnn,
    pub head_y: ClassifierHead,
    pub head_d: ClassifierHead,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let vrnn = Vrnn::new(config.vrnn, &mut store, &mut rng)?;
        let dims = (
            config.vrnn.latent_dim,
            config.head_hidden,
            config.num_classes,
        );
        let head_y = ClassifierHead::new(&mut store, HeadRole::Probe, dims, &mut rng);
        let head_d = ClassifierHead::new(&mut store, HeadRole::Gallery, dims, &mut rng);
        Ok(Self {
            config,
            store,
            vrnn,
            head_y,
            head_d,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self, role: HeadRole) -> &ClassifierHead {
        match role {
            HeadRole::Probe => &self.head_y,
            HeadRole::Gallery => &self.head_d,
        }
    }

    /// Deterministic inference embedding (final posterior mean).
    pub fn embed(&self, seq: &FrameSequence) -> Result<SequenceEmbedding> {
        // the rng is unused in mean mode
        self.vrnn
            .embed_sequence(&self.store, seq, EmbedMode::Mean, &mut Rng::new(0))
    }

    pub fn embed_all(&self, seqs: &[FrameSequence]) -> Result<Vec<SequenceEmbedding>> {
        seqs.iter().map(|s| self.embed(s)).collect()
    }
}
