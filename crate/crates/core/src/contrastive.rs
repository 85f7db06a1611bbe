//! Two-view contrastive pretraining of the feature extractor.
//!
//! Each sample is split into a luminance view and a chrominance view
//! (BT.601 luma/chroma coefficients). Two encoders are trained so that
//! matching views of a sample land close together, using an exact in-batch
//! softmax contrast in both directions:
//!
//! ```text
//! L = mean_i −log softmax_j(ẑ1_i·ẑ2_j / τ)[i] + mean_j −log softmax_i(ẑ1_i·ẑ2_j / τ)[j]
//! ```
//!
//! where `ẑ` are the L2-normalized embeddings. The other samples of the
//! minibatch act as negatives; there is no memory bank.
//!
//! # Raw image format
//!
//! ```text
//! magic  "CIMG"
//! w, h   u32, u32
//! count  u64
//! count × (w·h·3 f64)      pixel-interleaved RGB in [0, 1], row-major pixels
//! count × u32              class id per sample
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::dataset::{FeatureDataset, Reader, Record};
use crate::encoder::{EncoderParams, Mlp};
use crate::error::{check_dim, Error, Result};
use crate::linalg::Matrix;
use crate::optim::SgdMomentum;
use crate::rng::{rng_from_seed, standard_normal};
use crate::scalar::{dot, log_sum_exp, norm, Scalar};

pub const IMAGE_MAGIC: &[u8; 4] = b"CIMG";

const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;
const CHROMA_B: f64 = 0.564;
const CHROMA_R: f64 = 0.713;

/// Unlabeled input to pretraining.
#[derive(Debug, Clone, PartialEq)]
pub enum RawSample {
    /// `width × height × 3` RGB values in `[0, 1]`, pixel-interleaved.
    Image {
        width: usize,
        height: usize,
        pixels: Vec<f64>,
    },
    /// Views that are already separated.
    Pair { view1: Vec<f64>, view2: Vec<f64> },
}

impl RawSample {
    fn view_dims(&self) -> (usize, usize) {
        match self {
            Self::Image { width, height, .. } => (width * height, 2 * width * height),
            Self::Pair { view1, view2 } => (view1.len(), view2.len()),
        }
    }
}

/// Splits a sample into (luma, chroma) views.
///
/// Luma `Y = 0.299R + 0.587G + 0.114B` per pixel; chroma holds
/// `Cb = 0.5 + 0.564(B − Y)` for every pixel followed by
/// `Cr = 0.5 + 0.713(R − Y)` for every pixel. Pairs pass through unchanged.
pub fn split_views(sample: &RawSample) -> Result<(Vec<f64>, Vec<f64>)> {
    match sample {
        RawSample::Pair { view1, view2 } => Ok((view1.clone(), view2.clone())),
        RawSample::Image {
            width,
            height,
            pixels,
        } => {
            let n = width * height;
            check_dim("image pixel buffer", n * 3, pixels.len())?;
            if pixels.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
                return Err(Error::param("image", "pixel values must lie in [0, 1]"));
            }
            let mut luma = Vec::with_capacity(n);
            let mut cb = Vec::with_capacity(n);
            let mut cr = Vec::with_capacity(n);
            for px in pixels.chunks_exact(3) {
                let (r, g, b) = (px[0], px[1], px[2]);
                let y = LUMA_R * r + LUMA_G * g + LUMA_B * b;
                luma.push(y);
                cb.push(0.5 + (b - y) * CHROMA_B);
                cr.push(0.5 + (r - y) * CHROMA_R);
            }
            cb.extend(cr);
            Ok((luma, cb))
        }
    }
}

/// Loss and gradients of the bidirectional contrast.
#[derive(Debug, Clone)]
pub struct ContrastOutput<T> {
    pub loss: T,
    /// `ℓ_i(1→2) + ℓ_i(2→1)` per batch position; `loss` is their mean.
    pub per_anchor: Vec<T>,
    pub grad_z1: Matrix<T>,
    pub grad_z2: Matrix<T>,
}

fn normalize_rows<T: Scalar>(z: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
    let norms: Vec<T> = z.row_iter().map(norm).collect();
    if let Some(row) = norms.iter().position(|&n| n == T::zero()) {
        return Err(Error::DegenerateVector { row });
    }
    let mut h = z.clone();
    for (i, &n) in norms.iter().enumerate() {
        for x in h.row_mut(i) {
            *x /= n;
        }
    }
    Ok((h, norms))
}

/// Gradient through `ẑ = z/‖z‖`: `(g − ẑ(ẑ·g)) / ‖z‖`.
fn backprop_normalize<T: Scalar>(h: &Matrix<T>, norms: &[T], g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(h.rows(), h.cols());
    for i in 0..h.rows() {
        let proj = dot(h.row(i), g.row(i));
        for ((o, &hi), &gi) in out.row_mut(i).iter_mut().zip(h.row(i)).zip(g.row(i)) {
            *o = (gi - hi * proj) / norms[i];
        }
    }
    out
}

/// Symmetric in-batch contrast between paired embeddings `z1[i] ↔ z2[i]`.
pub fn contrast_loss<T: Scalar>(z1: &Matrix<T>, z2: &Matrix<T>, tau: T) -> Result<ContrastOutput<T>> {
    let b = z1.rows();
    if b == 0 {
        return Err(Error::param("batch", "must contain at least one pair"));
    }
    check_dim("contrast_loss batch", b, z2.rows())?;
    check_dim("contrast_loss width", z1.cols(), z2.cols())?;
    if !(tau > T::zero()) {
        return Err(Error::param("temperature", "must be positive"));
    }
    let (h1, n1) = normalize_rows(z1)?;
    let (h2, n2) = normalize_rows(z2)?;

    let mut logits = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            logits[(i, j)] = dot(h1.row(i), h2.row(j)) / tau;
        }
    }
    let row_lse: Vec<T> = (0..b)
        .map(|i| log_sum_exp(logits.row(i).iter().copied()))
        .collect();
    let col_lse: Vec<T> = (0..b)
        .map(|j| log_sum_exp((0..b).map(|i| logits[(i, j)])))
        .collect();

    let per_anchor: Vec<T> = (0..b)
        .map(|i| (row_lse[i] - logits[(i, i)]) + (col_lse[i] - logits[(i, i)]))
        .collect();
    let inv_b = T::one() / T::lit(b as f64);
    let loss = per_anchor.iter().copied().sum::<T>() * inv_b;

    // dL/dlogits[i][j] = (P_ij − δ_ij + Q_ij − δ_ij) / B
    let mut g = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            let l = logits[(i, j)];
            let mut v = (l - row_lse[i]).exp() + (l - col_lse[j]).exp();
            if i == j {
                v -= T::lit(2.0);
            }
            g[(i, j)] = v * inv_b / tau;
        }
    }
    let gh1 = g.matmul(&h2)?;
    let gh2 = g.transpose().matmul(&h1)?;
    Ok(ContrastOutput {
        loss,
        per_anchor,
        grad_z1: backprop_normalize(&h1, &n1, &gh1),
        grad_z2: backprop_normalize(&h2, &n2, &gh2),
    })
}

/// Encoder architecture: hidden widths and embedding width `e`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderArch {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            embed_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub arch: EncoderArch,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            arch: EncoderArch::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::param("temperature", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::param("batch_size", "must be at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum", "must lie in [0, 1)"));
        }
        if self.arch.embed_dim == 0 || self.arch.hidden.contains(&0) {
            return Err(Error::param("encoder widths", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<T> {
    pub params: EncoderParams<T>,
    /// Mean minibatch loss of each epoch.
    pub loss_trace: Vec<T>,
}

/// Splits all samples and stacks the views into two matrices.
pub fn view_matrices<T: Scalar>(data: &[RawSample]) -> Result<(Matrix<T>, Matrix<T>)> {
    let first = data
        .first()
        .ok_or_else(|| Error::param("data", "no samples"))?;
    let (d1, d2) = first.view_dims();
    let mut v1 = Vec::with_capacity(data.len() * d1);
    let mut v2 = Vec::with_capacity(data.len() * d2);
    for s in data {
        let (a, b) = split_views(s)?;
        check_dim("view1 width", d1, a.len())?;
        check_dim("view2 width", d2, b.len())?;
        if a.iter().chain(&b).any(|x| !x.is_finite()) {
            return Err(Error::param("data", "views must be finite"));
        }
        v1.extend(a.into_iter().map(T::lit));
        v2.extend(b.into_iter().map(T::lit));
    }
    Ok((
        Matrix::from_vec(data.len(), d1, v1),
        Matrix::from_vec(data.len(), d2, v2),
    ))
}

/// Seeded encoder initialization for the given view widths.
pub fn init_encoders<T: Scalar>(
    view1_dim: usize,
    view2_dim: usize,
    arch: &EncoderArch,
    seed: u64,
) -> EncoderParams<T> {
    let mut rng = rng_from_seed(seed);
    let widths = |input: usize| {
        let mut w = vec![input];
        w.extend(&arch.hidden);
        w.push(arch.embed_dim);
        w
    };
    let phi1 = Mlp::glorot(&widths(view1_dim), &mut rng);
    let phi2 = Mlp::glorot(&widths(view2_dim), &mut rng);
    EncoderParams {
        phi1,
        phi2,
        embed_dim: arch.embed_dim,
    }
}

/// Loss and parameter gradients of one minibatch.
pub fn batch_loss_and_grads<T: Scalar>(
    params: &EncoderParams<T>,
    v1: &Matrix<T>,
    v2: &Matrix<T>,
    tau: T,
) -> Result<(T, Mlp<T>, Mlp<T>)> {
    let traces1 = v1
        .row_iter()
        .map(|x| params.phi1.forward_trace(x))
        .collect::<Result<Vec<_>>>()?;
    let traces2 = v2
        .row_iter()
        .map(|x| params.phi2.forward_trace(x))
        .collect::<Result<Vec<_>>>()?;
    let z1 = Matrix::from_rows(&traces1.iter().map(|t| &t.output[..]).collect::<Vec<_>>());
    let z2 = Matrix::from_rows(&traces2.iter().map(|t| &t.output[..]).collect::<Vec<_>>());
    let out = contrast_loss(&z1, &z2, tau)?;
    let mut g1 = params.phi1.zeros_like();
    let mut g2 = params.phi2.zeros_like();
    for (i, t) in traces1.iter().enumerate() {
        params.phi1.backward(t, out.grad_z1.row(i), &mut g1);
    }
    for (i, t) in traces2.iter().enumerate() {
        params.phi2.backward(t, out.grad_z2.row(i), &mut g2);
    }
    Ok((out.loss, g1, g2))
}

/// Trains both encoders with SGD + momentum on shuffled minibatches.
pub fn pretrain<T: Scalar>(data: &[RawSample], cfg: &PretrainConfig) -> Result<PretrainOutcome<T>> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(Error::param(
            "data",
            format!(
                "{} samples is fewer than batch_size {}",
                data.len(),
                cfg.batch_size
            ),
        ));
    }
    let (v1, v2) = view_matrices::<T>(data)?;
    let mut params = init_encoders::<T>(v1.cols(), v2.cols(), &cfg.arch, cfg.seed);
    // shuffling draws from a stream separate from initialization
    let mut rng = rng_from_seed(cfg.seed ^ 0x5348_5546_464C_4531);
    let mut opt1 = SgdMomentum::new(params.phi1.param_count(), cfg.learning_rate, cfg.momentum);
    let mut opt2 = SgdMomentum::new(params.phi2.param_count(), cfg.learning_rate, cfg.momentum);
    let tau = T::lit(cfg.temperature);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = T::zero();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let b1 = v1.select_rows(chunk);
            let b2 = v2.select_rows(chunk);
            let (loss, g1, g2) = batch_loss_and_grads(&params, &b1, &b2, tau)?;
            if !loss.is_finite() {
                return Err(Error::NumericFailure(format!(
                    "contrastive loss became {loss} in epoch {epoch}"
                )));
            }
            let mut p1 = params.phi1.to_flat();
            opt1.step(&mut p1, &g1.to_flat());
            params.phi1.set_flat(&p1);
            let mut p2 = params.phi2.to_flat();
            opt2.step(&mut p2, &g2.to_flat());
            params.phi2.set_flat(&p2);
            total += loss;
            batches += 1;
        }
        let mean = total / T::lit(batches as f64);
        log::debug!("pretrain epoch {epoch}: loss {mean}");
        loss_trace.push(mean);
    }
    Ok(PretrainOutcome { params, loss_trace })
}

/// Embeds every sample as `concat(phi1(view1), phi2(view2))`.
pub fn extract_features<T: Scalar>(
    params: &EncoderParams<T>,
    data: &[RawSample],
    labels: &[u32],
) -> Result<FeatureDataset> {
    params.validate()?;
    check_dim("labels per sample", data.len(), labels.len())?;
    let records = data
        .par_iter()
        .zip(labels.par_iter())
        .map(|(s, &class_id)| {
            let (a, b) = split_views(s)?;
            let a: Vec<T> = a.into_iter().map(T::lit).collect();
            let b: Vec<T> = b.into_iter().map(T::lit).collect();
            let f = params.features(&a, &b)?;
            Ok(Record {
                class_id,
                vector: f.into_iter().map(Scalar::as_f64).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureDataset::new(2 * params.embed_dim, records, None)
}

/// Serializes image samples; all must share one size.
pub fn encode_images(samples: &[RawSample], labels: &[u32]) -> Result<Vec<u8>> {
    check_dim("labels per sample", samples.len(), labels.len())?;
    let (w, h) = match samples.first() {
        Some(RawSample::Image { width, height, .. }) => (*width, *height),
        Some(RawSample::Pair { .. }) => {
            return Err(Error::param("samples", "only image samples can be stored"))
        }
        None => (0, 0),
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(IMAGE_MAGIC);
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        match s {
            RawSample::Image {
                width,
                height,
                pixels,
            } if *width == w && *height == h && pixels.len() == w * h * 3 => {
                for p in pixels {
                    buf.extend_from_slice(&p.to_le_bytes());
                }
            }
            _ => return Err(Error::param("samples", "images must share one size")),
        }
    }
    for l in labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    Ok(buf)
}

pub fn save_images(samples: &[RawSample], labels: &[u32], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_images(samples, labels)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads image samples and their class ids.
pub fn load_images(path: impl AsRef<Path>) -> Result<(Vec<RawSample>, Vec<u32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rd = Reader::new(&bytes, path);
    rd.magic("CIMG")?;
    let width = rd.u32("width")? as usize;
    let height = rd.u32("height")? as usize;
    let count = rd.u64("sample count")? as usize;
    let per = width * height * 3;
    if rd.remaining() / (per * 8 + 4).max(1) < count {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            context: format!("header announces {count} images of {width}x{height}"),
        });
    }
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let pixels = (0..per)
            .map(|_| rd.f64("pixel"))
            .collect::<Result<Vec<_>>>()?;
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(rd.malformed("pixel outside [0, 1]"));
        }
        samples.push(RawSample::Image {
            width,
            height,
            pixels,
        });
    }
    let labels = (0..count)
        .map(|_| rd.u32("class id"))
        .collect::<Result<Vec<_>>>()?;
    rd.finish()?;
    Ok((samples, labels))
}

/// Generator of pre-split two-view samples: `view1` is Gaussian around a
/// class centroid, `view2 = R·view1 + noise` for one fixed random rotation
/// `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPairs {
    pub samples: usize,
    pub dim: usize,
    pub noise: f64,
    pub classes: usize,
    /// Centroid distance from the origin, in units of the unit within-class std.
    pub sep: f64,
    pub seed: u64,
}

impl Default for SyntheticPairs {
    fn default() -> Self {
        Self {
            samples: 200,
            dim: 16,
            noise: 0.05,
            classes: 1,
            sep: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticPairs {
    /// Samples and their class ids (`i mod classes`).
    pub fn generate(&self) -> Result<(Vec<RawSample>, Vec<u32>)> {
        if self.dim == 0 || self.classes == 0 {
            return Err(Error::param("synthetic pairs", "dim and classes must be positive"));
        }
        let mut rng = rng_from_seed(self.seed);
        let rotation = random_orthonormal(self.dim, self.dim, &mut rng);
        let centroids: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| {
                let d: Vec<f64> = (0..self.dim).map(|_| standard_normal(&mut rng)).collect();
                let n = norm(&d);
                d.iter().map(|x| x / n * self.sep).collect()
            })
            .collect();
        let mut samples = Vec::with_capacity(self.samples);
        let mut labels = Vec::with_capacity(self.samples);
        for i in 0..self.samples {
            let c = i % self.classes;
            let view1: Vec<f64> = centroids[c]
                .iter()
                .map(|m| m + standard_normal(&mut rng))
                .collect();
            let view2: Vec<f64> = rotation
                .iter()
                .map(|r| dot(r, &view1) + self.noise * standard_normal(&mut rng))
                .collect();
            samples.push(RawSample::Pair { view1, view2 });
            labels.push(c as u32);
        }
        Ok((samples, labels))
    }
}

impl std::str::FromStr for SyntheticPairs {
    type Err = String;

    /// `samples=200,dim=16,noise=0.05,classes=1,sep=0,seed=0`; omitted keys
    /// keep their defaults.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut out = Self::default();
        for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {item:?}"))?;
            let bad = || format!("bad value for {k}: {v:?}");
            match k.trim() {
                "samples" => out.samples = v.parse().map_err(|_| bad())?,
                "dim" => out.dim = v.parse().map_err(|_| bad())?,
                "noise" => out.noise = v.parse().map_err(|_| bad())?,
                "classes" => out.classes = v.parse().map_err(|_| bad())?,
                "sep" => out.sep = v.parse().map_err(|_| bad())?,
                "seed" => out.seed = v.parse().map_err(|_| bad())?,
                other => return Err(format!("unknown synthetic key {other:?}")),
            }
        }
        if !(out.noise >= 0.0 && out.noise.is_finite() && out.sep >= 0.0 && out.sep.is_finite()) {
            return Err("noise and sep must be non-negative numbers".into());
        }
        Ok(out)
    }
}

impl std::fmt::Display for SyntheticPairs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "samples={},dim={},noise={},classes={},sep={},seed={}",
            self.samples, self.dim, self.noise, self.classes, self.sep, self.seed
        )
    }
}

/// `count` orthonormal vectors of length `dim` (Gram-Schmidt on Gaussian
/// draws). Requires `count <= dim`.
pub(crate) fn random_orthonormal(
    count: usize,
    dim: usize,
    rng: &mut crate::rng::TaskRng,
) -> Vec<Vec<f64>> {
    assert!(count <= dim);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        for b in &basis {
            let p = dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Mean cosine of matched pairs `(z1_i, z2_i)` and of all mismatched pairs
/// `(z1_i, z2_j), i ≠ j`.
pub fn pair_cosines<T: Scalar>(z1: &Matrix<T>, z2: &Matrix<T>) -> Result<(f64, f64)> {
    check_dim("pair_cosines", z1.rows(), z2.rows())?;
    let (h1, _) = normalize_rows(z1)?;
    let (h2, _) = normalize_rows(z2)?;
    let n = z1.rows();
    let mut pos = 0.0;
    let mut neg = 0.0;
    for i in 0..n {
        for j in 0..n {
            let c = dot(h1.row(i), h2.row(j)).as_f64();
            if i == j {
                pos += c;
            } else {
                neg += c;
            }
        }
    }
    let neg_count = (n * n - n).max(1) as f64;
    Ok((pos / n as f64, neg / neg_count))
}

/// Embeds each view with its encoder, one row per sample.
pub fn embed_views<T: Scalar>(
    params: &EncoderParams<T>,
    v1: &Matrix<T>,
    v2: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let z1 = v1
        .row_iter()
        .map(|x| params.phi1.forward(x))
        .collect::<Result<Vec<_>>>()?;
    let z2 = v2
        .row_iter()
        .map(|x| params.phi2.forward(x))
        .collect::<Result<Vec<_>>>()?;
    Ok((Matrix::from_rows(&z1), Matrix::from_rows(&z2)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_image_has_neutral_chroma() {
        let s = RawSample::Image {
            width: 2,
            height: 1,
            pixels: vec![0.5; 6],
        };
        let (y, c) = split_views(&s).unwrap();
        assert_eq!(y.len(), 2);
        assert_eq!(c.len(), 4);
        assert!(y.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(c.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn red_pixel_views() {
        let s = RawSample::Image {
            width: 1,
            height: 1,
            pixels: vec![1.0, 0.0, 0.0],
        };
        let (y, c) = split_views(&s).unwrap();
        assert!((y[0] - 0.299).abs() < 1e-15);
        assert!((c[0] - 0.331364).abs() < 1e-12);
        assert!((c[1] - 0.999813).abs() < 1e-12);
    }

    #[test]
    fn pairs_pass_through() {
        let s = RawSample::Pair {
            view1: vec![1.0, 2.0],
            view2: vec![3.0],
        };
        assert_eq!(split_views(&s).unwrap(), (vec![1.0, 2.0], vec![3.0]));
    }

    #[test]
    fn bad_image_buffer() {
        let s = RawSample::Image {
            width: 2,
            height: 2,
            pixels: vec![0.1; 5],
        };
        assert!(split_views(&s).is_err());
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let z1 = Matrix::from_rows(&[[0.3, -1.0, 2.0]]);
        let z2 = Matrix::from_rows(&[[1.0, 1.0, 0.5]]);
        let out = contrast_loss(&z1, &z2, 0.1).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn identical_pair_of_two_costs_two_log_two() {
        let z = Matrix::from_rows(&[[1.0_f64, 2.0], [1.0, 2.0]]);
        let out = contrast_loss(&z, &z, 0.5).unwrap();
        assert!((out.loss - 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn zero_embedding_rejected() {
        let z1 = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]);
        let z2 = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(
            contrast_loss(&z1, &z2, 1.0),
            Err(Error::DegenerateVector { row: 0 })
        ));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (data, _) = SyntheticPairs {
            samples: 8,
            dim: 4,
            ..Default::default()
        }
        .generate()
        .unwrap();
        let cfg = PretrainConfig {
            epochs: 0,
            batch_size: 4,
            seed: 9,
            ..Default::default()
        };
        let out = pretrain::<f64>(&data, &cfg).unwrap();
        assert!(out.loss_trace.is_empty());
        assert_eq!(out.params, init_encoders(4, 4, &cfg.arch, 9));
    }

    #[test]
    fn pretrain_rejects_small_batches() {
        let (data, _) = SyntheticPairs {
            samples: 8,
            dim: 4,
            ..Default::default()
        }
        .generate()
        .unwrap();
        let cfg = PretrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(pretrain::<f64>(&data, &cfg).is_err());
        let cfg = PretrainConfig {
            batch_size: 16,
            ..Default::default()
        };
        assert!(pretrain::<f64>(&data, &cfg).is_err());
    }

    #[test]
    fn extracted_width_is_twice_embedding() {
        let (data, labels) = SyntheticPairs {
            samples: 6,
            dim: 5,
            classes: 2,
            ..Default::default()
        }
        .generate()
        .unwrap();
        let arch = EncoderArch {
            hidden: vec![4],
            embed_dim: 3,
        };
        let params = init_encoders::<f64>(5, 5, &arch, 1);
        let ds = extract_features(&params, &data, &labels).unwrap();
        assert_eq!(ds.dim(), 6);
        assert_eq!(ds.len(), 6);
    }

    #[test]
    fn identical_samples_identical_features() {
        let s = RawSample::Image {
            width: 2,
            height: 2,
            pixels: vec![0.2, 0.4, 0.9, 0.1, 0.0, 1.0, 0.5, 0.5, 0.5, 0.3, 0.7, 0.1],
        };
        let params = init_encoders::<f64>(4, 8, &EncoderArch::default(), 5);
        let ds = extract_features(&params, &[s.clone(), s], &[0, 0]).unwrap();
        assert_eq!(ds.record(0).vector, ds.record(1).vector);
    }

    #[test]
    fn image_file_round_trip() {
        let s = RawSample::Image {
            width: 1,
            height: 2,
            pixels: vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.bin");
        save_images(&[s.clone(), s.clone()], &[0, 1], &path).unwrap();
        let (back, labels) = load_images(&path).unwrap();
        assert_eq!(back, vec![s.clone(), s]);
        assert_eq!(labels, vec![0, 1]);
    }

    #[test]
    fn orthonormal_basis() {
        let mut rng = rng_from_seed(4);
        let b = random_orthonormal(3, 5, &mut rng);
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(&b[i], &b[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn synthetic_pairs_spec_round_trips() {
        let p: SyntheticPairs = "samples=50,noise=0.1,seed=3".parse().unwrap();
        assert_eq!((p.samples, p.dim, p.seed), (50, 16, 3));
        assert_eq!(p.to_string().parse::<SyntheticPairs>().unwrap(), p);
        assert!("bogus=1".parse::<SyntheticPairs>().is_err());
        assert!("noise=-1".parse::<SyntheticPairs>().is_err());
    }
}
