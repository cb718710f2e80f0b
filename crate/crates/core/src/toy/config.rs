use alloc::format;

use crate::error::{Error, Result};

/// Optimizer used by [`crate::toy::train`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// Stochastic gradient descent with heavy-ball momentum.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward block.
    pub d_ff: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Number of distinct patch symbols, which is also the answer vocabulary.
    pub symbols: usize,
    /// Question tokens: `question_len - 1` prompt tokens then the cell token.
    pub question_len: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch: usize,
    pub optimizer: Optimizer,
    /// Standard deviation of the initial positional embeddings.
    pub pos_init: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 4,
            heads: 8,
            d_ff: 64,
            grid_rows: 8,
            grid_cols: 8,
            symbols: 8,
            question_len: 10,
            learning_rate: 3e-3,
            steps: 400,
            batch: 32,
            optimizer: Optimizer::adam(),
            pos_init: 2.0,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn visual_tokens(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Index of the first visual token; a begin-of-sequence token precedes
    /// the grid.
    pub fn visual_start(&self) -> usize {
        1
    }

    pub fn seq_len(&self) -> usize {
        self.visual_start() + self.visual_tokens() + self.question_len
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Token vocabulary: symbols, then begin-of-sequence, prompt and cell
    /// marker tokens.
    pub fn vocab(&self) -> usize {
        self.symbols + 3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.layers == 0 || self.d_ff == 0 {
            return bad("layers and d_ff must be positive".into());
        }
        if self.visual_tokens() == 0 {
            return bad("empty grid".into());
        }
        if self.symbols < 2 {
            return bad("need at least two symbols".into());
        }
        if self.question_len == 0 {
            return bad("question_len must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(self.pos_init >= 0.0) {
            return bad("pos_init must be non-negative".into());
        }
        match self.optimizer {
            Optimizer::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                bad(format!("momentum {momentum} outside [0, 1)"))
            }
            Optimizer::Adam { beta1, beta2, eps }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                bad("invalid Adam parameters".into())
            }
            _ => Ok(()),
        }
    }
}
