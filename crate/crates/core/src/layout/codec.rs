use super::{Canvas, Image, MaskCanvas};
use crate::error::{config_err, usage, Result};
use crate::numerics::Array;

/// Latent array of shape `[h, w, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    array: Array,
}

impl LatentGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        Ok(Self { array: Array::new(vec![height, width, channels], data)? })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { array: Array::zeros(&[height, width, channels]) }
    }

    pub fn from_array(array: Array) -> Result<Self> {
        if array.shape().len() != 3 {
            return Err(usage!("latent grid needs a 3-D array, got {:?}", array.shape()));
        }
        Ok(Self { array })
    }

    pub fn height(&self) -> usize {
        self.array.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.array.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.array.shape()[2]
    }

    pub fn array(&self) -> &Array {
        &self.array
    }

    pub fn into_array(self) -> Array {
        self.array
    }

    pub fn data(&self) -> &[f32] {
        self.array.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.array.data_mut()
    }

    pub fn same_dims(&self, other: &LatentGrid, what: &str) -> Result<()> {
        self.array.same_shape(&other.array, what)
    }
}

/// Frozen invertible codec: pixel-unshuffle by `factor`.
///
/// Latent channel `c * f^2 + dy * f + dx` of cell `(y, x)` holds colour `c`
/// of pixel `(y*f + dy, x*f + dx)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Codec {
    pub factor: usize,
}

impl Codec {
    pub const DEFAULT_FACTOR: usize = 2;

    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(config_err!("codec factor must be positive"));
        }
        Ok(Self { factor })
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(self.factor) || !w.is_multiple_of(self.factor) {
            return Err(config_err!("{h}x{w} is not divisible by codec factor {}", self.factor));
        }
        Ok(())
    }

    pub fn encode(&self, canvas: &Canvas) -> Result<LatentGrid> {
        let img = canvas.image();
        Ok(LatentGrid { array: self.unshuffle(img.data(), img.height(), img.width(), 3)? })
    }

    fn unshuffle(&self, data: &[f32], h: usize, w: usize, chans: usize) -> Result<Array> {
        self.check_dims(h, w)?;
        let f = self.factor;
        let (lh, lw, lc) = (h / f, w / f, chans * f * f);
        let mut out = vec![0.0; lh * lw * lc];
        for y in 0..h {
            for x in 0..w {
                let cell = ((y / f) * lw + x / f) * lc;
                let sub = (y % f) * f + x % f;
                for c in 0..chans {
                    out[cell + c * f * f + sub] = data[(y * w + x) * chans + c];
                }
            }
        }
        Array::new(vec![lh, lw, lc], out)
    }

    /// Exact inverse of [`Codec::encode`] for in-range latents; values are
    /// clamped into `[0, 1]` so the result is a valid canvas.
    pub fn decode(&self, latent: &LatentGrid) -> Result<Canvas> {
        let (h, w, data) = self.decode_raw(latent)?;
        Canvas::from_image(Image::from_unclamped(h, w, data))
    }

    pub fn decode_raw(&self, latent: &LatentGrid) -> Result<(usize, usize, Vec<f32>)> {
        let f = self.factor;
        if latent.channels() != self.latent_channels() {
            return Err(config_err!(
                "latent has {} channels, codec expects {}",
                latent.channels(),
                self.latent_channels()
            ));
        }
        let (lh, lw, lc) = (latent.height(), latent.width(), latent.channels());
        let (h, w) = (lh * f, lw * f);
        let src = latent.data();
        let mut out = vec![0.0; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                let cell = ((y / f) * lw + x / f) * lc;
                let sub = (y % f) * f + x % f;
                for c in 0..3 {
                    out[(y * w + x) * 3 + c] = src[cell + c * f * f + sub];
                }
            }
        }
        Ok((h, w, out))
    }

    /// Pixel-unshuffle of a binary mask: `f^2` channels per latent cell.
    pub fn downsample_mask(&self, mask: &MaskCanvas) -> Result<LatentGrid> {
        let m = mask.mask();
        let data: Vec<f32> = m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(LatentGrid { array: self.unshuffle(&data, m.height(), m.width(), 1)? })
    }

    /// Per-element factor `1 - M` broadcast to the colour channels of a latent,
    /// so that `encode(X * (1 - M)) == encode(X) * keep_factors(M_c)`.
    pub fn keep_factors(&self, m_c: &LatentGrid) -> Array {
        let ff = self.factor * self.factor;
        let (lh, lw) = (m_c.height(), m_c.width());
        let lc = 3 * ff;
        let src = m_c.data();
        Array::from_fn(&[lh, lw, lc], |i| {
            let cell = i / lc;
            let sub = (i % lc) % ff;
            1.0 - src[cell * ff + sub]
        })
    }
}
