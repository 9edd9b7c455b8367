use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `[bins × channels]` feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    bins: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn new(bins: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || data.len() != bins * channels {
            return Err(Error::Shape {
                op: "features",
                lhs: vec![bins, channels],
                rhs: vec![data.len()],
            });
        }
        Ok(Features { bins, channels, data })
    }

    pub fn zeros(bins: usize, channels: usize) -> Self {
        Features {
            bins,
            channels,
            data: vec![0.0; bins * channels],
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.channels..(t + 1) * self.channels]
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.data[t * self.channels + c]
    }

    /// The first `bins` rows.
    pub fn prefix(&self, bins: usize) -> Features {
        let bins = bins.min(self.bins);
        Features {
            bins,
            channels: self.channels,
            data: self.data[..bins * self.channels].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Split> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// One utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: u64,
    pub session: usize,
    pub block: usize,
    pub split: Split,
    pub features: Features,
    /// Target label indices (phonemes and word-boundary silences, no blank).
    pub phonemes: Vec<usize>,
    pub text: String,
}
