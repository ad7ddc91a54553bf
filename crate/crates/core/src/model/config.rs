use crate::error::{Error, Result};

/// Optional convolutional front-end over 2D feature maps (time × frequency).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvConfig {
    pub n_layers: usize,
    pub channels: usize,
    /// Width of the frequency axis of every input feature map.
    pub n_freq: usize,
    /// Square kernel size; odd, "same" zero padding, stride 1.
    pub kernel: usize,
}

impl Default for ConvConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            channels: 4,
            n_freq: 8,
            kernel: 3,
        }
    }
}

/// Encoder-decoder hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ff: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub dropout: f64,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    pub conv: Option<ConvConfig>,
}

impl ModelConfig {
    /// Small profile used by tests and desk-scale experiments.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            d_k: 8,
            d_v: 8,
            d_ff: 64,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            dropout: 0.0,
            src_vocab,
            tgt_vocab,
            max_len: 32,
            conv: None,
        }
    }

    /// The full-size profile: 2 encoder and 4 decoder layers, 8 heads,
    /// width 512, inner width 2048, key/value width 64, dropout 0.1.
    pub fn full_size(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            d_model: 512,
            n_heads: 8,
            d_k: 64,
            d_v: 64,
            d_ff: 2048,
            n_encoder_layers: 2,
            n_decoder_layers: 4,
            dropout: 0.1,
            src_vocab,
            tgt_vocab,
            max_len: 512,
            conv: Some(ConvConfig {
                n_layers: 6,
                channels: 64,
                n_freq: 80,
                kernel: 3,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_ff", self.d_ff),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "model.dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("model.max_len must be at least 2".into()));
        }
        if self.tgt_vocab <= super::EOS {
            return Err(Error::Config(format!(
                "model.tgt_vocab must exceed the special token ids, got {}",
                self.tgt_vocab
            )));
        }
        if let Some(c) = &self.conv {
            if c.n_layers == 0 || c.channels == 0 || c.n_freq == 0 {
                return Err(Error::Config("conv extractor sizes must be positive".into()));
            }
            if c.kernel % 2 == 0 {
                return Err(Error::Config(format!("conv kernel must be odd, got {}", c.kernel)));
            }
        }
        Ok(())
    }

    pub(crate) fn q_width(&self) -> usize {
        self.n_heads * self.d_k
    }

    pub(crate) fn v_width(&self) -> usize {
        self.n_heads * self.d_v
    }
}
