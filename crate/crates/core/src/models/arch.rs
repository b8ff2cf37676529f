use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Fglp,
    BilstmOnly,
    CnnOnly,
}

impl Variant {
    pub fn uses_sequence(self) -> bool {
        matches!(self, Variant::Fglp | Variant::BilstmOnly)
    }

    pub fn uses_region(self) -> bool {
        matches!(self, Variant::Fglp | Variant::CnnOnly)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fglp" => Ok(Variant::Fglp),
            "bilstm" | "bilstm_only" | "bilstm-only" => Ok(Variant::BilstmOnly),
            "cnn" | "cnn_only" | "cnn-only" => Ok(Variant::CnnOnly),
            other => Err(Error::invalid(format!("unknown model variant '{other}' (expected fglp, bilstm or cnn)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Fglp => "fglp",
            Variant::BilstmOnly => "bilstm",
            Variant::CnnOnly => "cnn",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub variant: Variant,
    /// Units per direction.
    pub lstm_hidden: usize,
    /// Output channels of each conv block.
    pub cnn_filters: Vec<usize>,
    pub dense_sizes: Vec<usize>,
    pub dropout: f64,
    pub recurrent_dropout: f64,
    pub m: usize,
    pub k: usize,
    pub seed: u64,
}

impl ArchConfig {
    pub fn full(variant: Variant, m: usize, k: usize, seed: u64) -> Self {
        Self {
            variant,
            lstm_hidden: 512,
            cnn_filters: vec![256, 512],
            dense_sizes: vec![1024, 512, 256, 128],
            dropout: 0.2,
            recurrent_dropout: 0.2,
            m,
            k,
            seed,
        }
    }

    pub fn desk(variant: Variant, m: usize, k: usize, seed: u64) -> Self {
        Self {
            variant,
            lstm_hidden: 16,
            cnn_filters: vec![8, 16],
            dense_sizes: vec![64, 32],
            dropout: 0.2,
            recurrent_dropout: 0.2,
            m,
            k,
            seed,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.m * self.m
    }

    /// Side length after each conv block's pooling.
    pub fn cnn_sides(&self) -> Vec<usize> {
        let mut side = self.m;
        self.cnn_filters
            .iter()
            .map(|_| {
                side /= 2;
                side
            })
            .collect()
    }

    pub fn cnn_width(&self) -> usize {
        match (self.cnn_filters.last(), self.cnn_sides().last()) {
            (Some(c), Some(s)) if self.variant.uses_region() => c * s * s,
            _ => 0,
        }
    }

    pub fn lstm_width(&self) -> usize {
        if self.variant.uses_sequence() {
            2 * self.lstm_hidden
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.k < 1 {
            return Err(Error::invalid("M and k must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.recurrent_dropout) {
            return Err(Error::invalid("dropout rates must be in [0, 1)"));
        }
        if self.dense_sizes.contains(&0) {
            return Err(Error::invalid("dense sizes must be at least 1"));
        }
        if self.variant.uses_sequence() && self.lstm_hidden == 0 {
            return Err(Error::invalid("lstm_hidden must be at least 1"));
        }
        if self.variant.uses_region() {
            if self.cnn_filters.is_empty() || self.cnn_filters.contains(&0) {
                return Err(Error::invalid("cnn_filters must be a non-empty list of sizes >= 1"));
            }
            let mut side = self.m;
            for _ in &self.cnn_filters {
                if side < 2 {
                    return Err(Error::invalid(format!(
                        "M = {} is too small for {} pooling blocks",
                        self.m,
                        self.cnn_filters.len()
                    )));
                }
                side /= 2;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn full(seed: u64) -> Self {
        Self { batch_size: 256, max_epochs: 200, patience: 10, lr: 1e-3, seed }
    }

    pub fn desk(seed: u64) -> Self {
        Self { batch_size: 32, max_epochs: 40, patience: 8, lr: 3e-3, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        Ok(())
    }
}
