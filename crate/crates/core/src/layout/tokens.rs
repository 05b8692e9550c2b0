use super::LatentGrid;
use crate::error::{config_err, usage, Error, Result};
use crate::numerics::Array;

/// Patch geometry of one canvas at latent resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub latent_height: usize,
    pub latent_width: usize,
    /// Channels of `z_t` and `z_c` each.
    pub latent_channels: usize,
    /// Channels of the downsampled mask `M_c`.
    pub mask_channels: usize,
    pub patch: usize,
}

impl Geometry {
    pub fn new(
        latent_height: usize,
        latent_width: usize,
        latent_channels: usize,
        mask_channels: usize,
        patch: usize,
    ) -> Result<Self> {
        if patch == 0 || !latent_height.is_multiple_of(patch) || !latent_width.is_multiple_of(2 * patch) {
            return Err(config_err!(
                "latent {latent_height}x{latent_width} does not split into {patch}x{patch} patches on both canvas halves"
            ));
        }
        Ok(Self { latent_height, latent_width, latent_channels, mask_channels, patch })
    }

    pub fn token_rows(&self) -> usize {
        self.latent_height / self.patch
    }

    pub fn token_cols(&self) -> usize {
        self.latent_width / self.patch
    }

    pub fn token_count(&self) -> usize {
        self.token_rows() * self.token_cols()
    }

    /// First token column of the person half.
    pub fn split_col(&self) -> usize {
        self.token_cols() / 2
    }

    pub fn in_channels(&self) -> usize {
        2 * self.latent_channels + self.mask_channels
    }

    pub fn token_in_dim(&self) -> usize {
        self.patch * self.patch * self.in_channels()
    }

    pub fn token_out_dim(&self) -> usize {
        self.patch * self.patch * self.latent_channels
    }

    pub fn latent_len(&self) -> usize {
        self.latent_height * self.latent_width * self.latent_channels
    }

    pub fn positions(&self) -> Vec<(usize, usize)> {
        (0..self.token_count()).map(|n| (n / self.token_cols(), n % self.token_cols())).collect()
    }

    /// Gather index building the `[N x token_in_dim]` token matrix from the
    /// flat concatenation `[z_t | z_c | M_c]`. Features are ordered
    /// `(patch row, patch col, channel)`.
    pub fn input_index(&self) -> Vec<u32> {
        let (p, lw, lc, mc) = (self.patch, self.latent_width, self.latent_channels, self.mask_channels);
        let zc_base = self.latent_len();
        let mc_base = 2 * self.latent_len();
        let mut idx = Vec::with_capacity(self.token_count() * self.token_in_dim());
        for (r, c) in self.positions() {
            for py in 0..p {
                for px in 0..p {
                    let cell = (r * p + py) * lw + c * p + px;
                    idx.extend((0..lc).map(|ch| (cell * lc + ch) as u32));
                    idx.extend((0..lc).map(|ch| (zc_base + cell * lc + ch) as u32));
                    idx.extend((0..mc).map(|ch| (mc_base + cell * mc + ch) as u32));
                }
            }
        }
        idx
    }

    /// Gather index from a `[N x token_out_dim]` token matrix back to the
    /// `[h, w, latent_channels]` grid.
    pub fn output_index(&self) -> Vec<u32> {
        let (p, lc, cols) = (self.patch, self.latent_channels, self.token_cols());
        let out_dim = self.token_out_dim();
        let mut idx = Vec::with_capacity(self.latent_len());
        for y in 0..self.latent_height {
            for x in 0..self.latent_width {
                let n = (y / p) * cols + x / p;
                let base = n * out_dim + ((y % p) * p + x % p) * lc;
                idx.extend((0..lc).map(|ch| (base + ch) as u32));
            }
        }
        idx
    }
}

/// Padded token sequence for one canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `[n_max x token_in_dim]`; padding rows are zero.
    pub tokens: Array,
    pub positions: Vec<(usize, usize)>,
    pub valid: Vec<bool>,
    /// Token carries nonzero mask mass.
    pub masked: Vec<bool>,
    pub n_real: usize,
    pub n_mask: usize,
    /// Valid tokens in the unmasked (condition) half.
    pub n_garment: usize,
    pub geometry: Geometry,
}

impl TokenSequence {
    pub fn n_max(&self) -> usize {
        self.valid.len()
    }

    pub fn n_padding(&self) -> usize {
        self.n_max() - self.n_real
    }

    /// Indices of valid tokens in sequence order.
    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.n_max()).filter(|&i| self.valid[i]).collect()
    }

    /// Inverse of [`tokenize`] over valid tokens: the channel-concatenated
    /// `[h, w, 2*lc + mc]` grid.
    pub fn detokenize(&self) -> Result<LatentGrid> {
        let g = &self.geometry;
        let (p, lw, ic) = (g.patch, g.latent_width, g.in_channels());
        let mut out = vec![0.0; g.latent_height * lw * ic];
        let dim = g.token_in_dim();
        for i in self.valid_indices() {
            let (r, c) = self.positions[i];
            let row = self.tokens.row(i);
            for py in 0..p {
                for px in 0..p {
                    let cell = (r * p + py) * lw + c * p + px;
                    let f = (py * p + px) * ic;
                    out[cell * ic..(cell + 1) * ic].copy_from_slice(&row[f..f + ic]);
                }
            }
            debug_assert_eq!(row.len(), dim);
        }
        LatentGrid::new(g.latent_height, lw, ic, out)
    }
}

/// Per-token mask flags and the `(n_mask, n_garment)` counts for a mask grid.
pub(crate) fn mask_counts(geometry: &Geometry, m_c: &LatentGrid) -> (Vec<bool>, usize, usize) {
    let (p, lw, mc) = (geometry.patch, geometry.latent_width, geometry.mask_channels);
    let masked: Vec<bool> = geometry
        .positions()
        .iter()
        .map(|&(r, c)| {
            (0..p * p).any(|k| {
                let cell = (r * p + k / p) * lw + c * p + k % p;
                m_c.data()[cell * mc..(cell + 1) * mc].iter().any(|&v| v > 0.0)
            })
        })
        .collect();
    let split = geometry.split_col();
    let positions = geometry.positions();
    let half_masked = |right: bool| positions.iter().zip(&masked).any(|(&(_, c), &m)| m && (c >= split) == right);
    let n_garment = [false, true]
        .into_iter()
        .filter(|&right| !half_masked(right))
        .map(|right| positions.iter().filter(|&&(_, c)| (c >= split) == right).count())
        .sum();
    let n_mask = masked.iter().filter(|&&m| m).count();
    (masked, n_mask, n_garment)
}

/// Channel-concatenates `(z_t, z_c, M_c)`, cuts `patch x patch` tokens in
/// row-major order and pads to `n_max`.
pub fn tokenize(z_t: &LatentGrid, z_c: &LatentGrid, m_c: &LatentGrid, patch: usize, n_max: usize) -> Result<TokenSequence> {
    z_t.same_dims(z_c, "tokenize z_t/z_c")?;
    if m_c.height() != z_t.height() || m_c.width() != z_t.width() {
        return Err(usage!(
            "mask grid {}x{} vs latent {}x{}",
            m_c.height(),
            m_c.width(),
            z_t.height(),
            z_t.width()
        ));
    }
    let geometry = Geometry::new(z_t.height(), z_t.width(), z_t.channels(), m_c.channels(), patch)?;
    let n_real = geometry.token_count();
    if n_real > n_max {
        return Err(Error::Capacity { needed: n_real, n_max });
    }
    let flat: Vec<f32> = [z_t.data(), z_c.data(), m_c.data()].concat();
    let dim = geometry.token_in_dim();
    let mut data: Vec<f32> = geometry.input_index().iter().map(|&i| flat[i as usize]).collect();
    data.resize(n_max * dim, 0.0);
    let mut positions = geometry.positions();
    positions.resize(n_max, (0, 0));
    let mut valid = vec![true; n_real];
    valid.resize(n_max, false);
    let (mut masked, n_mask, n_garment) = mask_counts(&geometry, m_c);
    masked.resize(n_max, false);
    Ok(TokenSequence {
        tokens: Array::matrix(n_max, dim, data),
        positions,
        valid,
        masked,
        n_real,
        n_mask,
        n_garment,
        geometry,
    })
}
