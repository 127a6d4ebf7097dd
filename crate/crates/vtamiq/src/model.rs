//! The full model: a Siamese patch-sequence encoder shared by both images,
//! the difference modulation network, and the regression head.

use serde::{Deserialize, Serialize};

use crate::diffnet::{self, DiffNetConfig, QualityScore};
use crate::encoder::{self, EncodedRepresentation, ViTConfig};
use crate::error::Result;
use crate::sampler::PatchSequence;
use crate::tensor::params::ParameterStore;
use crate::tensor::tape::{Graph, Var};
use crate::tensor::{derive_rng, Scalar, Tensor};

/// Complete architecture description; two models with equal configs have
/// identical parameter names and shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub diffnet: DiffNetConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.diffnet.validate(self.vit.hidden_size)
    }

    /// Smallest end-to-end testable configuration.
    pub fn tiny() -> Self {
        Self {
            vit: ViTConfig::tiny(),
            diffnet: DiffNetConfig::tiny(),
        }
    }

    /// The full-scale VTAMIQ-16-6-4-4 configuration.
    pub fn vtamiq_16_6_4_4() -> Self {
        Self {
            vit: ViTConfig::vtamiq_base(),
            diffnet: DiffNetConfig::default(),
        }
    }
}

/// Per-component parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCountReport {
    /// Patch embedding, transformer layers, and final norm.
    pub encoder: usize,
    /// CLS embedding plus the uv positional grid.
    pub positional: usize,
    pub diffnet: usize,
    pub head: usize,
}

impl ParamCountReport {
    /// Everything inherited from the ViT side.
    pub fn vit_total(&self) -> usize {
        self.encoder + self.positional
    }

    pub fn total(&self) -> usize {
        self.encoder + self.positional + self.diffnet + self.head
    }
}

/// Model = config + parameter store. Frozen inference is `&self` and safe
/// to run concurrently; training mutates the store single-writer.
#[derive(Debug, Clone)]
pub struct VtamiqModel<F: Scalar> {
    pub config: ModelConfig,
    pub store: ParameterStore<F>,
}

impl<F: Scalar> VtamiqModel<F> {
    /// Fresh model with seeded truncated-normal init (biases zero).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = derive_rng(seed, &[0x696e6974]); // "init" stream
        encoder::init_encoder_params(&mut store, &config.vit, &mut rng)?;
        diffnet::init_diffnet_params(
            &mut store,
            config.vit.hidden_size,
            &config.diffnet,
            &mut rng,
        )?;
        Ok(Self { config, store })
    }

    /// Wraps an existing store (e.g. loaded from a checkpoint).
    pub(crate) fn from_parts(config: ModelConfig, store: ParameterStore<F>) -> Self {
        Self { config, store }
    }

    pub fn encode(&self, seq: &PatchSequence<F>) -> Result<EncodedRepresentation<F>> {
        encoder::encode(&self.store, seq, &self.config.vit)
    }

    /// Quality prediction from two already-encoded representations.
    pub fn predict_features(&self, f_ref: &Tensor<F>, f_dist: &Tensor<F>) -> Result<QualityScore> {
        diffnet::predict_quality(
            &self.store,
            f_ref,
            f_dist,
            self.config.vit.hidden_size,
            &self.config.diffnet,
        )
    }

    /// End-to-end prediction for one aligned pair of patch sequences.
    pub fn predict_pair(
        &self,
        seq_ref: &PatchSequence<F>,
        seq_dist: &PatchSequence<F>,
    ) -> Result<QualityScore> {
        let mut g = Graph::new(&self.store);
        let out = self.predict_pair_on_graph(&mut g, seq_ref, seq_dist)?;
        Ok(QualityScore {
            value: g.tape.value(out).data()[0].as_f64(),
        })
    }

    /// Builds the forward graph for one pair on an existing tape (used by
    /// training to assemble batch losses). Returns the `[1]` score node.
    pub fn predict_pair_on_graph<'s>(
        &'s self,
        g: &mut Graph<'s, F>,
        seq_ref: &PatchSequence<F>,
        seq_dist: &PatchSequence<F>,
    ) -> Result<Var> {
        let f_ref = encoder::encode_on_graph(g, seq_ref, &self.config.vit)?;
        let f_dist = encoder::encode_on_graph(g, seq_dist, &self.config.vit)?;
        diffnet::predict_on_graph(
            g,
            f_ref,
            f_dist,
            self.config.vit.hidden_size,
            &self.config.diffnet,
        )
    }

    /// Parameter accounting by name prefix.
    pub fn param_counts(&self) -> ParamCountReport {
        let mut report = ParamCountReport {
            encoder: 0,
            positional: 0,
            diffnet: 0,
            head: 0,
        };
        for p in self.store.iter() {
            let n = p.numel();
            if p.name().starts_with("encoder.pos.") {
                report.positional += n;
            } else if p.name().starts_with("encoder.") {
                report.encoder += n;
            } else if p.name().starts_with("diffnet.") {
                report.diffnet += n;
            } else if p.name().starts_with("head.") {
                report.head += n;
            }
        }
        report
    }
}
