use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    relu_backward_inplace, relu_inplace, upsample2, upsample2_backward, Conv2d, ConvCache,
    ConvGrad, ConvShape,
};
use super::probmap::ProbMap;
use crate::datamodel::Image;
use crate::error::{Error, Result};

/// Encoder–decoder layout. `widths[0]` is the full-resolution width and
/// each further entry adds one stride-2 stage, mirrored by the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    /// Weight std of freshly added head channels.
    pub head_init_std: f32,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 24, 32, 48],
            head_init_std: 0.01,
        }
    }
}

impl ArchConfig {
    pub fn depth(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn downsampling_factor(&self) -> usize {
        1 << self.depth()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }

    fn layer_shapes(&self, class_count: usize) -> Vec<ConvShape> {
        let conv = |i, o, k, s| ConvShape {
            in_channels: i,
            out_channels: o,
            kernel: k,
            stride: s,
        };
        let w = &self.widths;
        let mut shapes = vec![conv(self.in_channels, w[0], 3, 1)];
        for lvl in 1..w.len() {
            shapes.push(conv(w[lvl - 1], w[lvl], 3, 2));
            shapes.push(conv(w[lvl], w[lvl], 3, 1));
        }
        for lvl in 1..w.len() {
            shapes.push(conv(w[lvl], w[lvl - 1], 3, 1));
        }
        shapes.push(conv(w[0], class_count, 1, 1));
        shapes
    }
}

/// Segmentation network M_t with a joint softmax head over every class seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    arch: ArchConfig,
    class_count: usize,
    step: usize,
    layers: Vec<Conv2d>,
}

/// Per-layer parameter gradients, aligned with the model's layers.
#[derive(Debug, Clone)]
pub struct ModelGrad {
    pub layers: Vec<ConvGrad>,
}

impl ModelGrad {
    pub fn zeros(model: &SegmentationModel) -> Self {
        Self {
            layers: model.layers.iter().map(ConvGrad::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f32) {
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|v| *v *= s);
            l.bias.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Channel-major logits `[class][pixel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Logits {
    /// Pixel-major f64 copy, the layout the loss functions work in.
    pub fn to_pixel_major(&self) -> Vec<f64> {
        let np = self.height * self.width;
        let mut out = vec![0.0; np * self.channels];
        for c in 0..self.channels {
            for p in 0..np {
                out[p * self.channels + c] = self.data[c * np + p] as f64;
            }
        }
        out
    }

    pub fn probs(&self) -> ProbMap {
        ProbMap::from_logits(self.height, self.width, self.channels, &self.to_pixel_major())
            .expect("logit buffer matches its dimensions")
    }
}

/// Activations kept by [`SegmentationModel::forward_trace`].
pub struct ForwardTrace {
    caches: Vec<ConvCache>,
    /// Post-ReLU encoder outputs per level (level 0 is the stem).
    enc: Vec<Vec<f32>>,
    /// Post-ReLU first convolution of each encoder stage.
    enc_mid: Vec<Vec<f32>>,
    /// Post-ReLU decoder convolution outputs, indexed by target level.
    dec: Vec<Vec<f32>>,
    dims: Vec<(usize, usize)>,
    pub logits: Logits,
}

pub(crate) fn image_to_input(image: &Image) -> Vec<f32> {
    let (h, w) = (image.height(), image.width());
    let np = h * w;
    let mut out = vec![0.0f32; 3 * np];
    for (p, px) in image.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * np + p] = px[c] as f32 / 255.0 - 0.5;
        }
    }
    out
}

impl SegmentationModel {
    pub fn new(arch: ArchConfig, class_count: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if class_count == 0 {
            return Err(Error::Config("class_count must be at least 1".into()));
        }
        if arch.in_channels != 3 {
            return Err(Error::Config("images are RGB; in_channels must be 3".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = arch.layer_shapes(class_count);
        let last = shapes.len() - 1;
        let layers = shapes
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                if i == last {
                    let mut head = Conv2d::init(s, 0.0, &mut rng);
                    head.weight.clear();
                    head.bias.clear();
                    head.shape.out_channels = 0;
                    head.grow_outputs(class_count, arch.head_init_std, &mut rng);
                    head
                } else {
                    Conv2d::init(s, 1.0, &mut rng)
                }
            })
            .collect();
        Ok(Self {
            arch,
            class_count,
            step: 1,
            layers,
        })
    }

    pub(crate) fn from_parts(
        arch: ArchConfig,
        class_count: usize,
        step: usize,
        layers: Vec<Conv2d>,
    ) -> Result<Self> {
        arch.validate()?;
        let expected = arch.layer_shapes(class_count);
        if expected.len() != layers.len()
            || expected.iter().zip(&layers).any(|(s, l)| {
                *s != l.shape
                    || l.weight.len() != s.out_channels * s.patch_len()
                    || l.bias.len() != s.out_channels
            })
        {
            return Err(Error::Snapshot(
                "parameter arrays do not match the architecture".into(),
            ));
        }
        Ok(Self {
            arch,
            class_count,
            step,
            layers,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Schedule position t this model belongs to.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    pub fn layers(&self) -> &[Conv2d] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Conv2d] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Conv2d::num_params).sum()
    }

    /// Grows the head by `added` output channels. Existing channels keep
    /// their parameters; new ones get N(0, head_init_std²) weights.
    pub fn extend_head(&mut self, added: usize, seed: u64) -> Result<()> {
        if added == 0 {
            return Err(Error::Usage("head extension needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = self.arch.head_init_std;
        self.layers
            .last_mut()
            .expect("model has a head")
            .grow_outputs(added, std, &mut rng);
        self.class_count += added;
        Ok(())
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        let f = self.arch.downsampling_factor();
        if image.height() == 0
            || image.width() == 0
            || image.height() % f != 0
            || image.width() % f != 0
        {
            return Err(Error::Shape(format!(
                "image {}x{} is not divisible by the downsampling factor {f}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, image: &Image) -> Result<Logits> {
        Ok(self.forward_trace(image)?.logits)
    }

    /// Per-pixel class probabilities.
    pub fn forward(&self, image: &Image) -> Result<ProbMap> {
        Ok(self.logits(image)?.probs())
    }

    pub fn forward_trace(&self, image: &Image) -> Result<ForwardTrace> {
        self.check_input(image)?;
        let depth = self.arch.depth();
        let w = &self.arch.widths;
        let mut dims = vec![(image.height(), image.width())];
        for l in 1..=depth {
            let (h, wd) = dims[l - 1];
            dims.push((h / 2, wd / 2));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let x = image_to_input(image);

        let (mut a, c) = self.layers[0].forward(&x, dims[0].0, dims[0].1);
        relu_inplace(&mut a);
        caches.push(c);
        let mut enc = vec![a];
        let mut enc_mid = vec![Vec::new()];
        for lvl in 1..=depth {
            let (h, wd) = dims[lvl - 1];
            let (mut m, c1) = self.layers[2 * lvl - 1].forward(&enc[lvl - 1], h, wd);
            relu_inplace(&mut m);
            let (h2, w2) = dims[lvl];
            let (mut o, c2) = self.layers[2 * lvl].forward(&m, h2, w2);
            relu_inplace(&mut o);
            caches.push(c1);
            caches.push(c2);
            enc_mid.push(m);
            enc.push(o);
        }

        let mut dec = vec![Vec::new(); depth];
        let mut cur = enc[depth].clone();
        for lvl in (1..=depth).rev() {
            let (h, wd) = dims[lvl];
            let up = upsample2(&cur, w[lvl], h, wd);
            let li = 2 * depth + lvl;
            let (mut v, c) = self.layers[li].forward(&up, dims[lvl - 1].0, dims[lvl - 1].1);
            relu_inplace(&mut v);
            caches.push(c);
            cur = v.iter().zip(&enc[lvl - 1]).map(|(a, b)| a + b).collect();
            dec[lvl - 1] = v;
        }
        let head = self.layers.last().expect("head");
        let (logits, c) = head.forward(&cur, dims[0].0, dims[0].1);
        caches.push(c);
        let (height, width) = dims[0];
        Ok(ForwardTrace {
            caches,
            enc,
            enc_mid,
            dec,
            dims,
            logits: Logits {
                height,
                width,
                channels: self.class_count,
                data: logits,
            },
        })
    }

    /// Backpropagates channel-major logit gradients, accumulating into `grad`.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &[f32], grad: &mut ModelGrad) {
        let depth = self.arch.depth();
        let w = &self.arch.widths;
        let dims = &trace.dims;
        // caches: [stem, (enc a, enc b) per level, dec level depth..1, head]
        let dec_cache = |lvl: usize| 1 + 2 * depth + (depth - lvl);
        let head_i = self.layers.len() - 1;

        let mut g_dec_in = self.layers[head_i]
            .backward(
                &trace.caches[head_i],
                grad_logits,
                &mut grad.layers[head_i],
                true,
            )
            .expect("input gradient requested");
        let mut g_enc: Vec<Vec<f32>> = trace.enc.iter().map(|e| vec![0.0; e.len()]).collect();
        for lvl in 1..=depth {
            // cur_{lvl-1} = relu(v) + enc[lvl-1]
            for (a, b) in g_enc[lvl - 1].iter_mut().zip(&g_dec_in) {
                *a += b;
            }
            let mut gv = g_dec_in;
            relu_backward_inplace(&mut gv, &trace.dec[lvl - 1]);
            let li = 2 * depth + lvl;
            let gup = self.layers[li]
                .backward(&trace.caches[dec_cache(lvl)], &gv, &mut grad.layers[li], true)
                .expect("input gradient requested");
            let (h, wd) = dims[lvl];
            g_dec_in = upsample2_backward(&gup, w[lvl], h, wd);
        }
        for (a, b) in g_enc[depth].iter_mut().zip(&g_dec_in) {
            *a += b;
        }

        for lvl in (1..=depth).rev() {
            let mut g = std::mem::take(&mut g_enc[lvl]);
            relu_backward_inplace(&mut g, &trace.enc[lvl]);
            let gm = self.layers[2 * lvl]
                .backward(&trace.caches[2 * lvl], &g, &mut grad.layers[2 * lvl], true)
                .expect("input gradient requested");
            let mut gm = gm;
            relu_backward_inplace(&mut gm, &trace.enc_mid[lvl]);
            let gin = self.layers[2 * lvl - 1]
                .backward(
                    &trace.caches[2 * lvl - 1],
                    &gm,
                    &mut grad.layers[2 * lvl - 1],
                    true,
                )
                .expect("input gradient requested");
            for (a, b) in g_enc[lvl - 1].iter_mut().zip(&gin) {
                *a += b;
            }
        }
        let mut g0 = std::mem::take(&mut g_enc[0]);
        relu_backward_inplace(&mut g0, &trace.enc[0]);
        self.layers[0].backward(&trace.caches[0], &g0, &mut grad.layers[0], false);
    }
}
