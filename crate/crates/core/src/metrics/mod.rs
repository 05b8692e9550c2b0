//! Image fidelity, attention localization and per-layer update statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{usage, Error, Result};
use crate::layout::{Geometry, Image, Mask};
use crate::model::ModelParams;
use crate::numerics::Array;

pub const SSIM_WINDOW: usize = 8;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(usage!("images are {}x{} and {}x{}", a.height(), a.width(), b.height(), b.width()));
    }
    Ok(())
}

/// Mean SSIM over all `8 x 8` windows (stride 1) and colour channels, with
/// uniform window weights and dynamic range 1. Images smaller than the window
/// use one window spanning the whole extent.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = (a.height(), a.width());
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let (c1, c2) = (K1 * K1, K2 * K2);
    let (da, db) = (a.data(), b.data());
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - wh {
        for x0 in 0..=w - ww {
            for c in 0..3 {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let i = (y * w + x) * 3 + c;
                        let (u, v) = (da[i] as f64, db[i] as f64);
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn psnr_json<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MaskedError {
    pub mse: f64,
    /// `f64::INFINITY` for identical inputs; written as `"inf"` in JSON.
    #[serde(serialize_with = "psnr_json")]
    pub psnr: f64,
}

pub fn psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// MSE and PSNR over the pixels of `mask`.
pub fn masked_error(a: &Image, b: &Image, mask: &Mask) -> Result<MaskedError> {
    same_dims(a, b)?;
    if mask.height() != a.height() || mask.width() != a.width() {
        return Err(usage!("mask {}x{} vs images {}x{}", mask.height(), mask.width(), a.height(), a.width()));
    }
    let n = mask.count();
    if n == 0 {
        return Err(Error::UndefinedRegion("masked error over an empty mask".into()));
    }
    let mut sum = 0.0;
    for ((pa, pb), &m) in a.data().chunks(3).zip(b.data().chunks(3)).zip(mask.bits()) {
        if m {
            sum += pa.iter().zip(pb).map(|(u, v)| ((u - v) as f64).powi(2)).sum::<f64>();
        }
    }
    let mse = sum / (3 * n) as f64;
    Ok(MaskedError { mse, psnr: psnr(mse) })
}

/// Garment-half tokens that source the person token `query`, from a
/// per-pixel correspondence map of the person image (`(gy, gx)` on the
/// garment image). `pixels_per_token` is codec factor times patch.
pub fn oracle_region(
    correspondence: &[Option<(u32, u32)>],
    image_width: usize,
    geometry: &Geometry,
    pixels_per_token: usize,
    query: (usize, usize),
) -> Result<Vec<(usize, usize)>> {
    let split = geometry.split_col();
    let (r, c) = query;
    if c < split || r >= geometry.token_rows() || c >= geometry.token_cols() {
        return Err(usage!("query token {query:?} is not on the person half"));
    }
    let s = pixels_per_token;
    let mut region = Vec::new();
    for y in r * s..(r + 1) * s {
        for x in (c - split) * s..(c - split + 1) * s {
            if let Some((gy, gx)) = correspondence.get(y * image_width + x).copied().flatten() {
                let t = (gy as usize / s, gx as usize / s);
                if !region.contains(&t) {
                    region.push(t);
                }
            }
        }
    }
    if region.is_empty() {
        return Err(usage!("query token {query:?} lies outside the masked garment region"));
    }
    region.sort_unstable();
    Ok(region)
}

/// Attention mass a query row puts on `region` grown by `dilation` tokens
/// (Chebyshev). `row[j]` is the weight on the key at `key_positions[j]`.
pub fn attn_localization(row: &[f32], key_positions: &[(usize, usize)], region: &[(usize, usize)], dilation: usize) -> Result<f64> {
    if row.len() != key_positions.len() {
        return Err(usage!("{} attention weights for {} keys", row.len(), key_positions.len()));
    }
    if region.is_empty() {
        return Err(usage!("empty oracle region"));
    }
    let total: f64 = row.iter().map(|&v| v as f64).sum();
    if (total - 1.0).abs() > 1e-3 || row.iter().any(|&v| v.is_nan() || v < 0.0) {
        return Err(usage!("attention row is not a distribution (sum {total})"));
    }
    let near = |(y, x): (usize, usize)| region.iter().any(|&(ry, rx)| y.abs_diff(ry) <= dilation && x.abs_diff(rx) <= dilation);
    let mass: f64 = row.iter().zip(key_positions).filter(|(_, &p)| near(p)).map(|(&v, _)| v as f64).sum();
    Ok(mass.clamp(0.0, 1.0))
}

/// Grayscale rendering of one attention row next to its canvas: left the
/// canvas, right the map normalized to its maximum, each token a
/// `pixels_per_token` square. The query token is outlined in red on the
/// canvas.
pub fn attention_heatmap(
    canvas: &Image,
    row: &[f32],
    key_positions: &[(usize, usize)],
    pixels_per_token: usize,
    query: (usize, usize),
) -> Result<Image> {
    if row.len() != key_positions.len() {
        return Err(usage!("{} attention weights for {} keys", row.len(), key_positions.len()));
    }
    let (h, w) = (canvas.height(), canvas.width());
    let peak = row.iter().copied().fold(0.0f32, f32::max).max(f32::MIN_POSITIVE);
    let mut heat = vec![0.0f32; h * w];
    for (&v, &(r, c)) in row.iter().zip(key_positions) {
        for y in r * pixels_per_token..((r + 1) * pixels_per_token).min(h) {
            for x in c * pixels_per_token..((c + 1) * pixels_per_token).min(w) {
                heat[y * w + x] = v / peak;
            }
        }
    }
    let mut data = Vec::with_capacity(h * 2 * w * 3);
    let s = pixels_per_token;
    for y in 0..h {
        for x in 0..w {
            let on_border = y / s == query.0
                && x / s == query.1
                && (y % s == 0 || y % s == s - 1 || x % s == 0 || x % s == s - 1);
            data.extend_from_slice(&if on_border { [1.0, 0.0, 0.0] } else { canvas.pixel(y, x) });
        }
        for x in 0..w {
            data.extend_from_slice(&[heat[y * w + x]; 3]);
        }
    }
    Image::new(h, 2 * w, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub label: String,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    /// Sorted by `delta`, largest first.
    pub layers: Vec<LayerDelta>,
    /// Labels skipped because their initial norm is zero.
    pub excluded: Vec<String>,
}

/// `||theta' - theta|| / ||theta||` per layer label, pooling every tensor
/// carrying the label.
pub fn layer_update_report(before: &ModelParams, after: &ModelParams) -> Result<LayerReport> {
    if before.tensors.len() != after.tensors.len() {
        return Err(usage!("checkpoints hold {} and {} tensors", before.tensors.len(), after.tensors.len()));
    }
    let mut acc: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for (a, b) in before.tensors.iter().zip(&after.tensors) {
        if a.name != b.name || a.value.shape() != b.value.shape() || a.label != b.label {
            return Err(usage!("tensor `{}` does not match `{}`", a.name, b.name));
        }
        let diff: Array = b.value.zip_map(&a.value, |x, y| x - y)?;
        let e = acc.entry(a.label.as_str()).or_default();
        e.0 += diff.sum_squares();
        e.1 += a.value.sum_squares();
    }
    let mut layers = Vec::new();
    let mut excluded = Vec::new();
    for (label, (d, n)) in acc {
        if n == 0.0 {
            excluded.push(format!("{label}: zero norm before update"));
        } else {
            layers.push(LayerDelta { label: label.to_string(), delta: d.sqrt() / n.sqrt() });
        }
    }
    layers.sort_by(|x, y| y.delta.total_cmp(&x.delta).then_with(|| x.label.cmp(&y.label)));
    Ok(LayerReport { layers, excluded })
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub task: String,
    pub ssim: f64,
    #[serde(serialize_with = "psnr_json")]
    pub psnr: f64,
    pub masked_mse: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Aggregate {
    pub ssim: f64,
    /// Mean over finite values.
    pub psnr: f64,
    pub masked_mse: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    pub aggregate: Aggregate,
    pub attention_localization: Option<f64>,
    pub count: usize,
}

impl EvalReport {
    pub fn new(samples: Vec<SampleMetrics>, attention_localization: Option<f64>) -> Self {
        let n = samples.len().max(1) as f64;
        let finite: Vec<f64> = samples.iter().map(|s| s.psnr).filter(|p| p.is_finite()).collect();
        let aggregate = Aggregate {
            ssim: samples.iter().map(|s| s.ssim).sum::<f64>() / n,
            psnr: if finite.is_empty() { f64::INFINITY } else { finite.iter().sum::<f64>() / finite.len() as f64 },
            masked_mse: samples.iter().map(|s| s.masked_mse).sum::<f64>() / n,
        };
        Self { count: samples.len(), samples, aggregate, attention_localization }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(seed: u32, h: usize, w: usize) -> Image {
        Image::new(h, w, (0..h * w * 3).map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32 / 999.0).collect()).unwrap()
    }

    #[test]
    fn ssim_basics() {
        let a = noise_image(1, 12, 16);
        let b = noise_image(7, 12, 16);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(ssim(&a, &noise_image(1, 12, 15)).is_err());
    }

    #[test]
    fn masked_error_cases() {
        let z = Image::filled(4, 4, [0.0; 3]);
        let o = Image::filled(4, 4, [1.0; 3]);
        let m = Mask::from_fn(4, 4, |y, _| y < 2);
        assert_eq!(masked_error(&z, &o, &m).unwrap().mse, 1.0);
        let same = masked_error(&z, &z, &m).unwrap();
        assert_eq!((same.mse, same.psnr), (0.0, f64::INFINITY));
        assert!(serde_json::to_string(&same).unwrap().contains("\"inf\""));
        assert!(matches!(masked_error(&z, &o, &Mask::filled(4, 4, false)), Err(Error::UndefinedRegion(_))));
    }

    #[test]
    fn localization_cases() {
        let keys: Vec<(usize, usize)> = (0..4).flat_map(|r| (0..6).map(move |c| (r, c))).collect();
        let uniform = vec![1.0 / 24.0; 24];
        // (1,1) dilated covers rows 0..=2, cols 0..=2
        let f = attn_localization(&uniform, &keys, &[(1, 1)], 1).unwrap();
        assert!((f - 9.0 / 24.0).abs() < 1e-6);
        let mut one_hot = vec![0.0; 24];
        one_hot[7] = 1.0;
        assert_eq!(attn_localization(&one_hot, &keys, &[keys[7]], 0).unwrap(), 1.0);
        assert!(attn_localization(&[0.5, 0.2], &keys[..2], &[(0, 0)], 1).is_err());
    }
}
