use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Architecture of the network. Everything needed to allocate parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Residual width `k`.
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Vision encoder output width `l`.
    pub vision_width: usize,
    pub image_px: usize,
    pub patch_px: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        (self.image_px / self.patch_px).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_px * self.patch_px
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    /// Two blocks of width 32; small enough for finite differences.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            vision_width: 16,
            image_px: 64,
            patch_px: 16,
            max_seq_len: 96,
            lora_rank: 4,
            lora_alpha: 8.0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("vision_width", self.vision_width),
            ("image_px", self.image_px),
            ("patch_px", self.patch_px),
            ("max_seq_len", self.max_seq_len),
            ("lora_rank", self.lora_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::new(name, "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ConfigError::new("n_heads", "must divide d_model"));
        }
        if !self.image_px.is_multiple_of(self.patch_px) {
            return Err(ConfigError::new("patch_px", "must divide image_px"));
        }
        if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return Err(ConfigError::new("lora_alpha", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeFlags {
    pub vision_encoder: bool,
    pub token_embeddings: bool,
    /// Attention, feed-forward, layer-norm, positional and output weights
    /// of the decoder. When set, the decoder only learns through LoRA.
    pub decoder_base: bool,
}

impl Default for FreezeFlags {
    fn default() -> Self {
        Self {
            vision_encoder: true,
            token_embeddings: true,
            decoder_base: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear decay to zero over the run, after warmup.
    #[default]
    Linear,
}

/// Hyperparameters of a training run, including the architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vision_width: usize,
    pub patch_px: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    /// Steps of linear warmup from zero.
    pub warmup_steps: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    pub max_history: usize,
    /// Train on whole trajectories instead of one sequence per step when
    /// the history window covers the episode. Same objective, fewer and
    /// larger optimizer steps.
    pub pack_trajectories: bool,
    pub freeze: FreezeFlags,
    pub seed: u64,
    /// Global gradient-norm clip (0 disables).
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            d_ff: 512,
            vision_width: 64,
            patch_px: 16,
            max_seq_len: 256,
            lora_rank: 32,
            lora_alpha: 64.0,
            lora_dropout: 0.05,
            batch_size: 16,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Linear,
            warmup_steps: 50,
            epochs: 5,
            max_steps: 0,
            max_history: 2,
            pack_trajectories: false,
            freeze: FreezeFlags::default(),
            seed: 0,
            grad_clip: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Batch size, learning rate and epoch limit of the large-scale
    /// reference runs, kept for comparison with the desk defaults.
    pub fn reference() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 3e-4,
            ..Self::default()
        }
    }

    pub fn model_config(&self, vocab_size: usize, image_px: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            vision_width: self.vision_width,
            image_px,
            patch_px: self.patch_px,
            max_seq_len: self.max_seq_len,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
        }
    }

    /// Learning rate at `step` of a run of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = if step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let decay = match self.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Linear => 1.0 - step as f64 / total.max(1) as f64,
        };
        self.learning_rate * warm * decay
    }

    // `!(x >= 0.0)` style checks also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(ConfigError::new("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(ConfigError::new("epochs", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ConfigError::new("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(ConfigError::new("lora_dropout", "must be in [0, 1)"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(ConfigError::new("grad_clip", "must be non-negative"));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(ConfigError::new(name, "must be in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(ConfigError::new("adam_eps", "must be positive"));
        }
        self.model_config(1, self.patch_px).validate()
    }
}
