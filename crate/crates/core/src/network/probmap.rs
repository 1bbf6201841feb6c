use crate::datamodel::ClassId;
use crate::error::{Error, Result};

/// Per-pixel class probabilities, pixel-major (`[pixel][class]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ProbMap {
    /// Row-wise softmax of pixel-major logits.
    pub fn from_logits(height: usize, width: usize, channels: usize, logits: &[f64]) -> Result<Self> {
        if channels == 0 || logits.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} logits do not form a {height}x{width}x{channels} map",
                logits.len()
            )));
        }
        let mut data = vec![0.0; logits.len()];
        for (out, row) in data.chunks_exact_mut(channels).zip(logits.chunks_exact(channels)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &z) in out.iter_mut().zip(row) {
                *o = (z - m).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Wraps probabilities as given; rows must already be distributions.
    pub fn from_probs(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} probabilities do not form a {height}x{width}x{channels} map",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn prob(&self, p: usize, c: usize) -> f64 {
        self.data[p * self.channels + c]
    }

    /// Argmax over `0..channels`, ties to the lowest index.
    pub fn argmax(&self, p: usize) -> ClassId {
        argmax_in(self.pixel(p), 0..self.channels) as ClassId
    }

    /// Argmax over the listed channels, ties to the lowest index.
    pub fn argmax_among(&self, p: usize, classes: &[ClassId]) -> ClassId {
        argmax_in(self.pixel(p), classes.iter().map(|&c| c as usize)) as ClassId
    }

    pub fn flip_horizontal(&self) -> ProbMap {
        let mut out = self.clone();
        let c = self.channels;
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + x) * c;
                let dst = (y * self.width + self.width - 1 - x) * c;
                out.data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        out
    }
}

fn argmax_in(row: &[f64], candidates: impl Iterator<Item = usize>) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for c in candidates {
        if best == usize::MAX || row[c] > best_v {
            best = c;
            best_v = row[c];
        }
    }
    best
}
