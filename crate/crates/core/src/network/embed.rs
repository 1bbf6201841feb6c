use crate::datamodel::Image;
use crate::error::{Error, Result};

/// Produces a fixed-length scene-level descriptor for an image.
pub trait SceneEmbedder: Send + Sync {
    /// Embedding dimension Z.
    fn dim(&self) -> usize;
    /// Implementation tag, used to key embedding caches.
    fn tag(&self) -> &str;
    fn embed(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Built-in descriptor: mean color over a coarse spatial grid plus
/// magnitude-weighted gradient-orientation histograms for the top and bottom
/// halves of the image. Both blocks are L2-normalized, concatenated, and the
/// result is unit-normalized. Default Z = 4·4·3 + 2·8 = 64.
#[derive(Debug, Clone)]
pub struct GridEmbedder {
    grid: usize,
    orientation_bins: usize,
    gradient_weight: f64,
    tag: String,
}

impl Default for GridEmbedder {
    fn default() -> Self {
        Self::new(4, 8, 0.5)
    }
}

impl GridEmbedder {
    pub fn new(grid: usize, orientation_bins: usize, gradient_weight: f64) -> Self {
        assert!(grid > 0 && orientation_bins > 0, "grid and bins must be positive");
        Self {
            grid,
            orientation_bins,
            gradient_weight,
            tag: format!("grid{grid}-ori{orientation_bins}-w{gradient_weight}"),
        }
    }

    fn color_block(&self, image: &Image) -> Vec<f64> {
        let (h, w, g) = (image.height(), image.width(), self.grid);
        let mut sums = vec![0.0f64; g * g * 3];
        let mut counts = vec![0usize; g * g];
        for y in 0..h {
            let gy = y * g / h;
            for x in 0..w {
                let gx = x * g / w;
                let cell = gy * g + gx;
                let px = image.pixel(y, x);
                for c in 0..3 {
                    sums[cell * 3 + c] += px[c] as f64 / 255.0;
                }
                counts[cell] += 1;
            }
        }
        for (cell, &n) in counts.iter().enumerate() {
            if n > 0 {
                for c in 0..3 {
                    sums[cell * 3 + c] /= n as f64;
                }
            }
        }
        sums
    }

    fn gradient_block(&self, image: &Image) -> Vec<f64> {
        let (h, w, bins) = (image.height(), image.width(), self.orientation_bins);
        let gray: Vec<f64> = image
            .data()
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
            .collect();
        let at = |y: usize, x: usize| gray[y * w + x];
        let mut hist = vec![0.0f64; 2 * bins];
        for y in 0..h {
            let half = usize::from(y * 2 >= h);
            for x in 0..w {
                let gx = at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1));
                let gy = at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x);
                let mag = (gx * gx + gy * gy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                // unsigned orientation in [0, π)
                let mut theta = gy.atan2(gx);
                if theta < 0.0 {
                    theta += std::f64::consts::PI;
                }
                let bin = ((theta / std::f64::consts::PI * bins as f64) as usize).min(bins - 1);
                hist[half * bins + bin] += mag;
            }
        }
        hist
    }
}

fn l2_normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

impl SceneEmbedder for GridEmbedder {
    fn dim(&self) -> usize {
        self.grid * self.grid * 3 + 2 * self.orientation_bins
    }

    fn tag(&self) -> &str {
        &self.tag
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        if image.height() == 0 || image.width() == 0 {
            return Err(Error::Shape("cannot embed an empty image".into()));
        }
        let mut color = self.color_block(image);
        l2_normalize(&mut color);
        let mut grad = self.gradient_block(image);
        l2_normalize(&mut grad);
        let mut out = color;
        out.extend(grad.into_iter().map(|v| v * self.gradient_weight));
        if l2_normalize(&mut out) == 0.0 {
            // all-black, perfectly flat image
            let u = 1.0 / (out.len() as f64).sqrt();
            out.iter_mut().for_each(|v| *v = u);
        }
        Ok(out)
    }
}

/// Adapter for an external feature extractor (e.g. a pretrained backbone's
/// pooled features) that emits vectors of a declared dimension.
pub struct ExternalEmbedder<F> {
    dim: usize,
    tag: String,
    extract: F,
}

impl<F> ExternalEmbedder<F>
where
    F: Fn(&Image) -> Result<Vec<f64>> + Send + Sync,
{
    pub fn new(tag: impl Into<String>, dim: usize, extract: F) -> Self {
        Self {
            dim,
            tag: tag.into(),
            extract,
        }
    }
}

impl<F> SceneEmbedder for ExternalEmbedder<F>
where
    F: Fn(&Image) -> Result<Vec<f64>> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn tag(&self) -> &str {
        &self.tag
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let v = (self.extract)(image)?;
        if v.len() != self.dim {
            return Err(Error::Shape(format!(
                "external embedder `{}` returned {} values, declared {}",
                self.tag,
                v.len(),
                self.dim
            )));
        }
        Ok(v)
    }
}
