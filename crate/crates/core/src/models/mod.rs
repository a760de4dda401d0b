//! Miniature post-norm transformers that expose every block's output.

mod checkpoint;
mod params;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamEntry};
pub use params::{Bound, Parameters};
pub use transformer::{build_model, init_student_from_teacher, ForwardOutput, TransformerModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    EncoderClassifier,
    EncoderDecoder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Blocks per stack.
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Only meaningful for [`ModelKind::EncoderClassifier`].
    #[serde(default)]
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model spec field {name} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.kind == ModelKind::EncoderClassifier && self.num_classes == 0 {
            return Err(Error::Config("classifier needs num_classes >= 1".into()));
        }
        Ok(())
    }

    /// Same architecture with a different depth.
    pub fn with_layers(&self, num_layers: usize) -> Self {
        ModelSpec {
            num_layers,
            ..self.clone()
        }
    }

    /// Teacher and student must agree on everything but depth.
    pub fn check_compatible(&self, other: &ModelSpec) -> Result<()> {
        if self.with_layers(other.num_layers) != *other {
            return Err(Error::Contract(format!(
                "incompatible architectures: {self:?} vs {other:?}"
            )));
        }
        Ok(())
    }

    pub fn num_stacks(&self) -> usize {
        match self.kind {
            ModelKind::EncoderClassifier => 1,
            ModelKind::EncoderDecoder => 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(layers: usize, hidden: usize, heads: usize) -> ModelSpec {
        ModelSpec {
            kind: ModelKind::EncoderClassifier,
            num_layers: layers,
            hidden_dim: hidden,
            num_heads: heads,
            ffn_dim: 2 * hidden,
            vocab_size: 10,
            max_seq_len: 8,
            num_classes: 2,
        }
    }

    #[test]
    fn head_divisibility() {
        assert!(spec(2, 64, 8).validate().is_ok());
        assert!(matches!(spec(2, 30, 4).validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_layers_rejected() {
        assert!(matches!(spec(0, 8, 2).validate(), Err(Error::Config(_))));
    }
}
