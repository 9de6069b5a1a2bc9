use image::RgbImage;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{normal, visit_child, visit_child_mut, Linear, Params};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsSource {
    Random,
    ExternalPretrained,
    Checkpoint,
}

/// Packs images into a `(B, S, S, 3)` batch scaled to `[0, 1]`.
pub fn images_to_batch(images: &[&RgbImage]) -> Result<Array4<f64>> {
    let Some(first) = images.first() else {
        return Ok(Array4::zeros((0, 0, 0, 3)));
    };
    let (w, h) = first.dimensions();
    if w != h {
        return Err(Error::ShapeMismatch {
            expected: "square images".into(),
            got: format!("{w}x{h}"),
        });
    }
    let s = w as usize;
    let mut out = Array4::zeros((images.len(), s, s, 3));
    for (b, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(Error::ShapeMismatch {
                expected: format!("{w}x{h}"),
                got: format!("{}x{}", img.width(), img.height()),
            });
        }
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out[[b, y as usize, x as usize, c]] = p.0[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    /// (out, in * 9); column index is `c * 9 + ky * 3 + kx`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv3x3 {
    fn new<R: rand::Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let fan_in = input * 9;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((output, fan_in), |_| normal(rng) * std),
            bias: Array1::zeros(output),
        }
    }

    fn in_channels(&self) -> usize {
        self.weight.ncols() / 9
    }

    fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }
}

impl Params for Conv3x3 {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("weight", self.weight.shape(), self.weight.as_slice().expect("standard layout"));
        f("bias", self.bias.shape(), self.bias.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("weight", self.weight.as_slice_mut().expect("standard layout"));
        f("bias", self.bias.as_slice_mut().expect("standard layout"));
    }
}

fn im2col(x: ArrayView3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * 9, h * w));
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ch * 9 + ky * 3 + kx;
                let mut dst = cols.row_mut(row);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + xx] = x[[ch, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut x = Array3::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let src = cols.row(ch * 9 + ky * 3 + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        x[[ch, sy as usize, sx as usize]] += src[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h / 2, w / 2));
    for ch in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                out[[ch, y, xx]] = 0.25
                    * (x[[ch, 2 * y, 2 * xx]]
                        + x[[ch, 2 * y + 1, 2 * xx]]
                        + x[[ch, 2 * y, 2 * xx + 1]]
                        + x[[ch, 2 * y + 1, 2 * xx + 1]]);
            }
        }
    }
    out
}

fn avg_pool2_backward(d: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = d.dim();
    let mut out = Array3::zeros((c, h * 2, w * 2));
    for ch in 0..c {
        for y in 0..h * 2 {
            for xx in 0..w * 2 {
                out[[ch, y, xx]] = 0.25 * d[[ch, y / 2, xx / 2]];
            }
        }
    }
    out
}

/// Input standardisation applied by the convolutional encoder.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_SCALE: f64 = 0.25;

/// Small CNN: four conv3x3+ReLU blocks (2x2 average pooling after the first
/// three) followed by global average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvEncoder {
    pub blocks: Vec<Conv3x3>,
    pub input_size: usize,
}

struct BlockCache {
    cols: Array2<f64>,
    /// Post-rectifier activation, (C, H*W).
    out: Array2<f64>,
    h: usize,
    w: usize,
}

pub struct SampleCache {
    blocks: Vec<BlockCache>,
}

impl ConvEncoder {
    pub const POOLED_BLOCKS: usize = 3;

    pub fn channels_for(feature_dim: usize) -> [usize; 5] {
        [3, (feature_dim / 4).max(4), (feature_dim / 2).max(4), feature_dim, feature_dim]
    }

    pub fn new<R: rand::Rng + ?Sized>(feature_dim: usize, input_size: usize, rng: &mut R) -> Result<Self> {
        if input_size == 0 || !input_size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "conv encoder input size must be a positive multiple of 8, got {input_size}"
            )));
        }
        let ch = Self::channels_for(feature_dim);
        let blocks = (0..4).map(|i| Conv3x3::new(ch[i], ch[i + 1], rng)).collect();
        Ok(Self { blocks, input_size })
    }

    /// All-zero weights with the layout of `new(feature_dim, input_size)`.
    pub fn zeros(feature_dim: usize, input_size: usize) -> Self {
        let ch = Self::channels_for(feature_dim);
        let blocks = (0..4)
            .map(|i| Conv3x3 {
                weight: Array2::zeros((ch[i + 1], ch[i] * 9)),
                bias: Array1::zeros(ch[i + 1]),
            })
            .collect();
        Self { blocks, input_size }
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
            input_size: self.input_size,
        }
    }

    pub fn layer_names(&self) -> Vec<String> {
        (1..=self.blocks.len()).map(|i| format!("block{i}")).collect()
    }

    fn standardize(x: ArrayView3<f64>) -> Array3<f64> {
        // (S, S, 3) -> (3, S, S)
        x.permuted_axes([2, 0, 1])
            .mapv(|v| (v - PIXEL_MEAN) / PIXEL_SCALE)
            .as_standard_layout()
            .to_owned()
    }

    pub(crate) fn forward_sample(&self, x: ArrayView3<f64>) -> (Array1<f64>, SampleCache) {
        let mut a = Self::standardize(x);
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut feature = Array1::zeros(self.feature_dim());
        for (i, block) in self.blocks.iter().enumerate() {
            let (_, h, w) = a.dim();
            let cols = im2col(a.view());
            let mut z = block.weight.dot(&cols);
            z += &block.bias.view().insert_axis(Axis(1));
            z.mapv_inplace(|v| v.max(0.0));
            let out3 = z
                .clone()
                .into_shape_with_order((block.out_channels(), h, w))
                .expect("shape");
            if i < Self::POOLED_BLOCKS {
                a = avg_pool2(&out3);
            } else {
                feature = z.mean_axis(Axis(1)).expect("non-empty");
                a = out3;
            }
            caches.push(BlockCache { cols, out: z, h, w });
        }
        (feature, SampleCache { blocks: caches })
    }

    /// Returns parameter gradients and, when requested, the gradient with
    /// respect to each block's post-rectifier output `(C, H, W)`.
    pub(crate) fn backward_sample(
        &self,
        cache: &SampleCache,
        dh: ArrayView1<f64>,
        keep_block_grads: bool,
    ) -> (ConvEncoder, Vec<Array3<f64>>) {
        let mut grads = self.zeros_like();
        let mut block_grads = Vec::new();
        let last = cache.blocks.last().expect("blocks");
        let n = (last.h * last.w) as f64;
        let mut d_out: Array2<f64> =
            Array2::from_shape_fn(last.out.raw_dim(), |(c, _)| dh[c] / n);
        for i in (0..self.blocks.len()).rev() {
            let block = &self.blocks[i];
            let bc = &cache.blocks[i];
            if keep_block_grads {
                block_grads.push(
                    d_out
                        .clone()
                        .into_shape_with_order((block.out_channels(), bc.h, bc.w))
                        .expect("shape"),
                );
            }
            let mut dz = d_out;
            ndarray::Zip::from(&mut dz)
                .and(&bc.out)
                .for_each(|d, &o| if o <= 0.0 { *d = 0.0 });
            grads.blocks[i].weight = dz.dot(&bc.cols.t()).as_standard_layout().into_owned();
            grads.blocks[i].bias = dz.sum_axis(Axis(1));
            if i == 0 {
                break;
            }
            let dcols = block.weight.t().dot(&dz);
            let da = col2im(&dcols, block.in_channels(), bc.h, bc.w);
            // the previous block's output was pooled into this block's input
            let prev = &cache.blocks[i - 1];
            let dprev = avg_pool2_backward(&da);
            d_out = dprev
                .into_shape_with_order((self.blocks[i - 1].out_channels(), prev.h * prev.w))
                .expect("shape");
        }
        block_grads.reverse();
        (grads, block_grads)
    }

    /// Post-rectifier activation of each block for one sample.
    pub fn block_activations(&self, cache: &SampleCache) -> Vec<Array3<f64>> {
        cache
            .blocks
            .iter()
            .zip(&self.blocks)
            .map(|(bc, b)| {
                bc.out
                    .clone()
                    .into_shape_with_order((b.out_channels(), bc.h, bc.w))
                    .expect("shape")
            })
            .collect()
    }
}

impl Params for ConvEncoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, b) in self.blocks.iter().enumerate() {
            visit_child(&format!("block{}", i + 1), b, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_child_mut(&format!("block{}", i + 1), b, f);
        }
    }
}

/// `h = W vec(x) + b` over the raw `[0, 1]` pixels in HWC order. A test
/// fixture with hand-checkable outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEncoder {
    pub linear: Linear,
    pub input_size: usize,
}

impl LinearEncoder {
    pub fn new<R: rand::Rng + ?Sized>(feature_dim: usize, input_size: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(input_size * input_size * 3, feature_dim, true, rng),
            input_size,
        }
    }

    fn flatten(batch: &Array4<f64>) -> Array2<f64> {
        let b = batch.shape()[0];
        let n: usize = batch.shape()[1..].iter().product();
        batch
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((b, n))
            .expect("shape")
    }
}

impl Params for LinearEncoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_child("linear", &self.linear, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_child_mut("linear", &mut self.linear, f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderNet {
    Conv(ConvEncoder),
    Linear(LinearEncoder),
}

impl Params for EncoderNet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        match self {
            EncoderNet::Conv(e) => e.visit(f),
            EncoderNet::Linear(e) => e.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            EncoderNet::Conv(e) => e.visit_mut(f),
            EncoderNet::Linear(e) => e.visit_mut(f),
        }
    }
}

pub enum EncoderCache {
    Conv(Vec<SampleCache>),
    Linear(Array2<f64>),
}

/// Encoder `f`: image batch to pooled representation `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderAdapter {
    pub name: String,
    pub weights_source: WeightsSource,
    pub net: EncoderNet,
}

fn parse_sized(name: &str, prefix: &str) -> Option<usize> {
    name.strip_prefix(prefix)?.parse().ok().filter(|&d: &usize| d >= 2)
}

/// Projection-head layer widths documented per encoder.
///
/// Desk-scale encoders (`toy<d>`, `linear<d>`) use `[d, d/2, min(d, 128)]`.
pub fn head_dims_for(encoder_name: &str) -> Result<Vec<usize>> {
    match encoder_name {
        "resnet50" => Ok(vec![1024, 128]),
        "efficientnet_b2" => Ok(vec![2048, 1204, 128]),
        other => {
            let d = parse_sized(other, "toy")
                .or_else(|| parse_sized(other, "linear"))
                .ok_or_else(|| Error::UnknownEncoder(other.to_string()))?;
            Ok(vec![d, d / 2, d.min(128)])
        }
    }
}

impl EncoderAdapter {
    /// Builds a randomly initialised encoder by registered name.
    pub fn build<R: rand::Rng + ?Sized>(name: &str, input_size: usize, rng: &mut R) -> Result<Self> {
        let net = if let Some(d) = parse_sized(name, "toy") {
            EncoderNet::Conv(ConvEncoder::new(d, input_size, rng)?)
        } else if let Some(d) = parse_sized(name, "linear") {
            EncoderNet::Linear(LinearEncoder::new(d, input_size, rng))
        } else if matches!(name, "resnet50" | "efficientnet_b2") {
            return Err(Error::Config(format!(
                "encoder {name} needs externally supplied pretrained weights, which are not bundled"
            )));
        } else {
            return Err(Error::UnknownEncoder(name.to_string()));
        };
        Ok(Self {
            name: name.to_string(),
            weights_source: WeightsSource::Random,
            net,
        })
    }

    pub fn from_net(name: impl Into<String>, net: EncoderNet, weights_source: WeightsSource) -> Self {
        Self {
            name: name.into(),
            weights_source,
            net,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match &self.net {
            EncoderNet::Conv(e) => e.feature_dim(),
            EncoderNet::Linear(e) => e.linear.output_dim(),
        }
    }

    pub fn input_size(&self) -> usize {
        match &self.net {
            EncoderNet::Conv(e) => e.input_size,
            EncoderNet::Linear(e) => e.input_size,
        }
    }

    pub fn zeros_like(&self) -> EncoderNet {
        match &self.net {
            EncoderNet::Conv(e) => EncoderNet::Conv(e.zeros_like()),
            EncoderNet::Linear(e) => EncoderNet::Linear(LinearEncoder {
                linear: e.linear.zeros_like(),
                input_size: e.input_size,
            }),
        }
    }

    fn check_batch(&self, batch: &Array4<f64>) -> Result<()> {
        let s = self.input_size();
        let sh = batch.shape();
        if sh[1] != s || sh[2] != s || sh[3] != 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("B x {s} x {s} x 3"),
                got: format!("{sh:?}"),
            });
        }
        Ok(())
    }

    /// Eval-mode forward pass: `(B, S, S, 3)` to `(B, d)`.
    pub fn encode(&self, batch: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_train(batch)?.0)
    }

    pub fn encode_images(&self, images: &[&RgbImage]) -> Result<Array2<f64>> {
        self.encode(&images_to_batch(images)?)
    }

    pub fn forward_train(&self, batch: &Array4<f64>) -> Result<(Array2<f64>, EncoderCache)> {
        self.check_batch(batch)?;
        match &self.net {
            EncoderNet::Conv(e) => {
                let outs: Vec<(Array1<f64>, SampleCache)> = (0..batch.shape()[0])
                    .into_par_iter()
                    .map(|i| e.forward_sample(batch.slice(s![i, .., .., ..])))
                    .collect();
                let mut h = Array2::zeros((outs.len(), e.feature_dim()));
                let mut caches = Vec::with_capacity(outs.len());
                for (i, (f, c)) in outs.into_iter().enumerate() {
                    h.row_mut(i).assign(&f);
                    caches.push(c);
                }
                Ok((h, EncoderCache::Conv(caches)))
            }
            EncoderNet::Linear(e) => {
                let x = LinearEncoder::flatten(batch);
                let h = e.linear.forward(&x)?;
                Ok((h, EncoderCache::Linear(x)))
            }
        }
    }

    /// Parameter gradients of `sum(dh * h)`.
    pub fn backward(&self, cache: &EncoderCache, dh: &Array2<f64>) -> EncoderNet {
        match (&self.net, cache) {
            (EncoderNet::Conv(e), EncoderCache::Conv(caches)) => {
                let per_sample: Vec<ConvEncoder> = caches
                    .par_iter()
                    .enumerate()
                    .map(|(i, c)| e.backward_sample(c, dh.row(i), false).0)
                    .collect();
                // fixed summation order keeps runs bit-reproducible
                let mut total = e.zeros_like();
                for g in &per_sample {
                    total.accumulate(g);
                }
                EncoderNet::Conv(total)
            }
            (EncoderNet::Linear(e), EncoderCache::Linear(x)) => {
                let (g, _) = e.linear.backward(x, dh);
                EncoderNet::Linear(LinearEncoder {
                    linear: g,
                    input_size: e.input_size,
                })
            }
            _ => unreachable!("cache does not belong to this encoder"),
        }
    }

    /// Named layers; `pool` and `linear` have no spatial extent.
    pub fn layer_names(&self) -> Vec<String> {
        match &self.net {
            EncoderNet::Conv(e) => {
                let mut names = e.layer_names();
                names.push("pool".into());
                names
            }
            EncoderNet::Linear(_) => vec!["linear".into()],
        }
    }

    /// For one image `(S, S, 3)`: the post-rectifier activation `(C, H, W)` of
    /// `layer` and the gradient of `dh . h` with respect to it.
    pub fn layer_gradient(
        &self,
        image: ArrayView3<f64>,
        dh: ArrayView1<f64>,
        layer: &str,
    ) -> Result<(Array3<f64>, Array3<f64>)> {
        if !self.layer_names().iter().any(|n| n == layer) {
            return Err(Error::LayerNotFound(layer.to_string()));
        }
        let EncoderNet::Conv(e) = &self.net else {
            return Err(Error::NonSpatialLayer(layer.to_string()));
        };
        let Some(idx) = e.layer_names().iter().position(|n| n == layer) else {
            return Err(Error::NonSpatialLayer(layer.to_string()));
        };
        let s = self.input_size();
        if image.dim() != (s, s, 3) {
            return Err(Error::ShapeMismatch {
                expected: format!("{s} x {s} x 3"),
                got: format!("{:?}", image.shape()),
            });
        }
        if dh.len() != self.feature_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} feature gradients", self.feature_dim()),
                got: dh.len().to_string(),
            });
        }
        let (_, cache) = e.forward_sample(image);
        let (_, mut grads) = e.backward_sample(&cache, dh, true);
        let mut acts = e.block_activations(&cache);
        Ok((acts.swap_remove(idx), grads.swap_remove(idx)))
    }
}

impl Params for EncoderAdapter {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.net.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.net.visit_mut(f)
    }
}
