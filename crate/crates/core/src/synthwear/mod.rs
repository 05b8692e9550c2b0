//! Procedural garment/person pairs with exact correspondence, mask
//! augmentation, and a directory format for paired images.

mod dir;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::layout::{quantize, Category, Image, Mask};

pub use dir::{garment_region, load_pair_dir, write_pair_dir, PairDir};

type Rgb = [f32; 3];

/// Rounds to the nearest 8-bit level so PNG round trips are exact.
fn q8(c: Rgb) -> Rgb {
    c.map(|v| quantize(v) as f32 / 255.0)
}

/// Similarity transform placing the garment on the body.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// `(x, y)` of the garment anchor on the person image.
    pub person_center: [f32; 2],
    /// `(x, y)` of the same anchor on the garment image.
    pub garment_center: [f32; 2],
    pub scale: f32,
    /// Radians, counter-clockwise.
    pub rotation: f32,
}

impl Placement {
    /// Garment pixel `(y, x)` whose image lands on person pixel `(y, x)`,
    /// nearest-neighbour, if it falls inside a `h x w` garment image.
    pub fn source(&self, y: usize, x: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let dx = x as f32 + 0.5 - self.person_center[0];
        let dy = y as f32 + 0.5 - self.person_center[1];
        let (s, c) = self.rotation.sin_cos();
        let gx = (c * dx + s * dy) / self.scale + self.garment_center[0];
        let gy = (-s * dx + c * dy) / self.scale + self.garment_center[1];
        if gx < 0.0 || gy < 0.0 {
            return None;
        }
        let (gx, gy) = (gx.floor() as usize, gy.floor() as usize);
        (gx < w && gy < h).then_some((gy, gx))
    }
}

/// What the generator knows and real data does not.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Person before dressing.
    pub template: Image,
    pub placement: Placement,
    /// Per person pixel (row-major), the garment pixel `(y, x)` it shows.
    pub correspondence: Vec<Option<(u32, u32)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub garment: Image,
    pub person: Image,
    /// Garment region on the person (`M_on`); absent for unlabeled real data.
    pub person_mask: Option<Mask>,
    /// Garment pixels on the garment image.
    pub garment_mask: Mask,
    /// Head and hands; augmented try-on masks never touch it.
    pub preserved: Mask,
    pub category: Category,
    pub aspect: String,
    pub seed: u64,
    pub truth: Option<GroundTruth>,
}

impl SamplePair {
    pub fn height(&self) -> usize {
        self.person.height()
    }

    pub fn width(&self) -> usize {
        self.person.width()
    }

    pub fn require_person_mask(&self) -> Result<&Mask> {
        self.person_mask.as_ref().ok_or_else(|| Error::UndefinedRegion("pair has no person garment mask".into()))
    }
}

/// Row band `[start, end)` of the body a category covers.
pub fn category_band(category: Category, height: usize) -> (usize, usize) {
    let at = |f: f32| ((f * height as f32).round() as usize).min(height);
    match category {
        Category::Upper => (at(0.2), at(0.56)),
        Category::Lower => (at(0.5), at(0.96)),
        Category::Full => (at(0.2), at(0.9)),
    }
}

/// Rows reserved for the head.
pub fn head_rows(height: usize) -> usize {
    ((0.2 * height as f32).round() as usize).min(height)
}

fn jitter(rng: &mut ChaCha8Rng, v: f32, amount: f32) -> f32 {
    v + rng.gen_range(-amount..=amount)
}

fn random_color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Rgb {
    q8([rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)])
}

fn color_distance(a: Rgb, b: Rgb) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

/// Axis-aligned rectangle in unit coordinates `(x0, y0, x1, y1)`.
type Rect = (f32, f32, f32, f32);

fn garment_shape(rng: &mut ChaCha8Rng, category: Category) -> Vec<Rect> {
    let j = |rng: &mut ChaCha8Rng, v: f32| jitter(rng, v, 0.04);
    match category {
        Category::Upper => {
            let (top, bottom) = (j(rng, 0.15), j(rng, 0.85));
            let (l, r) = (j(rng, 0.27), j(rng, 0.73));
            let sleeve = j(rng, 0.45);
            vec![(l, top, r, bottom), (j(rng, 0.1), top, l, sleeve), (r, top, j(rng, 0.9), sleeve)]
        }
        Category::Lower => {
            let (top, waist, bottom) = (j(rng, 0.1), j(rng, 0.3), j(rng, 0.9));
            let (l, r) = (j(rng, 0.25), j(rng, 0.75));
            let gap = rng.gen_range(0.02..0.06);
            vec![(l, top, r, waist), (l, waist, 0.5 - gap, bottom), (0.5 + gap, waist, r, bottom)]
        }
        Category::Full => {
            let (top, bottom) = (j(rng, 0.1), j(rng, 0.92));
            // stepped trapezoid
            (0..4)
                .map(|k| {
                    let y0 = top + (bottom - top) * k as f32 / 4.0;
                    let y1 = top + (bottom - top) * (k + 1) as f32 / 4.0;
                    let half = 0.2 + 0.06 * k as f32;
                    (0.5 - half, y0, 0.5 + half, y1)
                })
                .collect()
        }
    }
}

#[derive(Clone, Copy)]
enum Pattern {
    Stripes { angle: f32, period: f32 },
    Checker { period: f32 },
    Dots { period: f32 },
}

impl Pattern {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        match rng.gen_range(0..3) {
            0 => Pattern::Stripes { angle: rng.gen_range(0.0..std::f32::consts::PI), period: rng.gen_range(3.0..6.0) },
            1 => Pattern::Checker { period: rng.gen_range(2.5..5.0) },
            _ => Pattern::Dots { period: rng.gen_range(3.0..5.0) },
        }
    }

    fn second_color(&self, x: f32, y: f32) -> bool {
        match *self {
            Pattern::Stripes { angle, period } => (((x * angle.cos() + y * angle.sin()) / period).floor() as i64).rem_euclid(2) == 0,
            Pattern::Checker { period } => ((x / period).floor() as i64 + (y / period).floor() as i64).rem_euclid(2) == 0,
            Pattern::Dots { period } => {
                let (u, v) = (x / period - (x / period).floor() - 0.5, y / period - (y / period).floor() - 0.5);
                u * u + v * v < 0.09
            }
        }
    }
}

const GLYPHS: [[u8; 5]; 3] = [
    [0b00100, 0b00100, 0b11111, 0b00100, 0b00100],
    [0b11111, 0b10001, 0b10101, 0b10001, 0b11111],
    [0b00100, 0b01110, 0b11111, 0b01110, 0b00100],
];

fn body(height: usize, width: usize) -> (Mask, Mask) {
    let (h, w) = (height as f32, width as f32);
    let inside = |y: usize, x: usize, r: Rect| {
        let (fx, fy) = ((x as f32 + 0.5) / w, (y as f32 + 0.5) / h);
        fx >= r.0 && fx < r.2 && fy >= r.1 && fy < r.3
    };
    let hands = [(0.16, 0.5, 0.3, 0.58), (0.7, 0.5, 0.84, 0.58)];
    let parts = [
        (0.3, 0.2, 0.7, 0.56),
        (0.16, 0.21, 0.3, 0.5),
        (0.7, 0.21, 0.84, 0.5),
        (0.32, 0.56, 0.49, 0.96),
        (0.51, 0.56, 0.68, 0.96),
        (0.45, 0.15, 0.55, 0.2),
    ];
    let head = |y: usize, x: usize| {
        let (dx, dy) = ((x as f32 + 0.5) / w - 0.5, (y as f32 + 0.5) / h - 0.09);
        (dx * w).powi(2) + (dy * h).powi(2) < (0.075 * h).powi(2)
    };
    let silhouette = Mask::from_fn(height, width, |y, x| {
        head(y, x) || parts.iter().chain(&hands).any(|&r| inside(y, x, r))
    });
    let rows = head_rows(height);
    let preserved = Mask::from_fn(height, width, |y, x| y < rows || hands.iter().any(|&r| inside(y, x, r)));
    (silhouette, preserved)
}

/// Draws one pair. `height` and `width` are per image.
pub fn gen_pair(seed: u64, category: Category, height: usize, width: usize) -> Result<SamplePair> {
    if height < 8 || width < 8 {
        return Err(config_err!("pair images must be at least 8x8, got {height}x{width}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f32, width as f32);

    // garment image
    let rects = garment_shape(&mut rng, category);
    let garment_mask = Mask::from_fn(height, width, |y, x| {
        let (fx, fy) = ((x as f32 + 0.5) / w, (y as f32 + 0.5) / h);
        rects.iter().any(|r| fx >= r.0 && fx < r.2 && fy >= r.1 && fy < r.3)
    });
    let c1 = random_color(&mut rng, 0.05, 0.9);
    let mut c2 = random_color(&mut rng, 0.05, 0.9);
    while color_distance(c1, c2) < 0.6 {
        c2 = random_color(&mut rng, 0.05, 0.9);
    }
    let logo_color = q8(c1.map(|v| 1.0 - v).map(|v| v.min(0.95)));
    let pattern = Pattern::draw(&mut rng);
    let glyph = GLYPHS[rng.gen_range(0..GLYPHS.len())];
    let (by0, bx0, by1, bx1) = garment_mask.bounding_box().ok_or_else(|| config_err!("garment shape is empty at {height}x{width}"))?;
    let logo_x = rng.gen_range(bx0..=bx1.saturating_sub(4).max(bx0));
    let logo_y = rng.gen_range(by0..=by1.saturating_sub(4).max(by0));
    let mut garment = Image::filled(height, width, [1.0; 3]);
    for y in 0..height {
        for x in 0..width {
            if !garment_mask.get(y, x) {
                continue;
            }
            let (gy, gx) = (y.wrapping_sub(logo_y), x.wrapping_sub(logo_x));
            let on_logo = gy < 5 && gx < 5 && glyph_bit(glyph, gy, gx);
            let c = if on_logo {
                logo_color
            } else if pattern.second_color(x as f32, y as f32) {
                c2
            } else {
                c1
            };
            garment.set_pixel(y, x, c);
        }
    }

    // person template
    let grey = rng.gen_range(0.8..0.95);
    let background = q8([grey; 3]);
    let skin = q8([rng.gen_range(0.55..0.85), rng.gen_range(0.4..0.65), rng.gen_range(0.3..0.5)]);
    let (silhouette, preserved) = body(height, width);
    let mut template = Image::filled(height, width, background);
    for y in 0..height {
        for x in 0..width {
            if silhouette.get(y, x) {
                template.set_pixel(y, x, skin);
            }
        }
    }

    // placement: fit the garment to the band, then perturb
    let (band0, band1) = category_band(category, height);
    let band_h = (band1 - band0) as f32;
    let garment_h = (by1 - by0 + 1) as f32;
    let fit = band_h / garment_h;
    let placement = Placement {
        person_center: [jitter(&mut rng, w / 2.0, 0.05 * w), jitter(&mut rng, (band0 + band1) as f32 / 2.0, 0.05 * band_h)],
        garment_center: [(bx0 + bx1 + 1) as f32 / 2.0, (by0 + by1 + 1) as f32 / 2.0],
        scale: fit * rng.gen_range(0.7..1.2),
        rotation: rng.gen_range(-20f32..=20.0).to_radians(),
    };

    let mut person = template.clone();
    let mut person_mask = Mask::filled(height, width, false);
    let mut correspondence = vec![None; height * width];
    for y in band0..band1 {
        for x in 0..width {
            if preserved.get(y, x) {
                continue;
            }
            if let Some((gy, gx)) = placement.source(y, x, height, width) {
                if garment_mask.get(gy, gx) {
                    person.set_pixel(y, x, garment.pixel(gy, gx));
                    person_mask.set(y, x, true);
                    correspondence[y * width + x] = Some((gy as u32, gx as u32));
                }
            }
        }
    }

    Ok(SamplePair {
        garment,
        person,
        person_mask: Some(person_mask),
        garment_mask,
        preserved,
        category,
        aspect: format!("{height}x{width}"),
        seed,
        truth: Some(GroundTruth { template, placement, correspondence }),
    })
}

fn glyph_bit(glyph: [u8; 5], y: usize, x: usize) -> bool {
    glyph[y] >> (4 - x) & 1 == 1
}

/// Pastes garment pixels through a correspondence map onto a template.
pub fn composite_through(garment: &Image, template: &Image, correspondence: &[Option<(u32, u32)>]) -> Image {
    let mut out = template.clone();
    let w = template.width();
    for (i, src) in correspondence.iter().enumerate() {
        if let Some((gy, gx)) = *src {
            out.set_pixel(i / w, i % w, garment.pixel(gy as usize, gx as usize));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    On,
    Off,
}

/// Randomized training mask.
///
/// `On`: a dilated, optionally box-simplified cover of `mask` that stays
/// clear of `preserved`. `Off`: `mask` (the tight garment region) grown by a
/// radius proportional to `growth` in `[0, 1]`; `growth = 1` approaches the
/// full image.
pub fn augment_mask(mask: &Mask, preserved: &Mask, seed: u64, mode: AugmentMode, growth: f32) -> Result<Mask> {
    if !(0.0..=1.0).contains(&growth) {
        return Err(config_err!("mask growth {growth} outside [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        AugmentMode::On => {
            let radius = rng.gen_range(1..=3);
            let mut grown = mask.dilate(radius);
            if rng.gen_bool(0.5) {
                if let Some((y0, x0, y1, x1)) = grown.bounding_box() {
                    grown = Mask::from_fn(mask.height(), mask.width(), |y, x| (y0..=y1).contains(&y) && (x0..=x1).contains(&x));
                }
            }
            // the input is kept even where it touches the preserved area
            Ok(grown.minus(preserved).union(mask))
        }
        AugmentMode::Off => {
            let reach = mask.height().max(mask.width()) as f32 / 2.0;
            let radius = (growth * reach * rng.gen_range(0.6..=1.0)).round() as usize;
            Ok(mask.dilate(radius))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryMix {
    pub upper: f64,
    pub lower: f64,
    pub full: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aspect {
    pub height: usize,
    pub width: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub pair_count: usize,
    pub seed: u64,
    pub category_mix: CategoryMix,
    /// Per-image sizes; a canvas is twice as wide.
    pub aspects: Vec<Aspect>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let a = |height, width| Aspect { height, width, weight: 0.25 };
        Self {
            pair_count: 256,
            seed: 0,
            category_mix: CategoryMix { upper: 0.5, lower: 0.3, full: 0.2 },
            aspects: vec![a(32, 24), a(32, 32), a(36, 24), a(40, 20)],
        }
    }
}

fn pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

impl DatasetSpec {
    /// `multiple` is the pixel granularity the model needs (codec factor x patch).
    pub fn validate(&self, multiple: usize) -> Result<()> {
        let m = &self.category_mix;
        let mix = [m.upper, m.lower, m.full];
        if mix.iter().any(|&p| !(p >= 0.0 && p.is_finite())) || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(config_err!("dataset.category_mix must be non-negative and sum to 1"));
        }
        if self.aspects.is_empty() {
            return Err(config_err!("dataset.aspects is empty"));
        }
        let weights: f64 = self.aspects.iter().map(|a| a.weight).sum();
        if self.aspects.iter().any(|a| a.weight.is_nan() || a.weight < 0.0) || (weights - 1.0).abs() > 1e-6 {
            return Err(config_err!("dataset.aspects weights must be non-negative and sum to 1"));
        }
        if let Some(a) = self.aspects.iter().find(|a| a.height % multiple != 0 || a.width % multiple != 0 || a.height < 8 || a.width < 8) {
            return Err(config_err!("dataset aspect {}x{} must be at least 8 and a multiple of {multiple}", a.height, a.width));
        }
        Ok(())
    }

    /// `(seed, category, height, width)` for every pair, in order.
    pub fn plan(&self) -> Vec<(u64, Category, usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mix = [self.category_mix.upper, self.category_mix.lower, self.category_mix.full];
        let weights: Vec<f64> = self.aspects.iter().map(|a| a.weight).collect();
        (0..self.pair_count)
            .map(|_| {
                let seed = rng.gen();
                let cat = Category::ALL[pick(&mut rng, &mix)];
                let a = &self.aspects[pick(&mut rng, &weights)];
                (seed, cat, a.height, a.width)
            })
            .collect()
    }

    pub fn generate(&self) -> Result<Vec<SamplePair>> {
        self.plan().into_iter().map(|(s, c, h, w)| gen_pair(s, c, h, w)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(gen_pair(7, Category::Full, 32, 24).unwrap(), gen_pair(7, Category::Full, 32, 24).unwrap());
        assert_ne!(gen_pair(7, Category::Full, 32, 24).unwrap().garment, gen_pair(8, Category::Full, 32, 24).unwrap().garment);
    }

    #[test]
    fn upper_mask_stays_in_band() {
        for seed in 0..20 {
            let p = gen_pair(seed, Category::Upper, 40, 32).unwrap();
            let (b0, b1) = category_band(Category::Upper, 40);
            let m = p.person_mask.unwrap();
            assert!(m.count() > 0);
            let (y0, _, y1, _) = m.bounding_box().unwrap();
            assert!(y0 >= b0 && y1 < b1);
        }
    }

    #[test]
    fn garment_never_pure_white() {
        let p = gen_pair(3, Category::Lower, 32, 32).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(p.garment.pixel(y, x) == [1.0; 3], !p.garment_mask.get(y, x));
            }
        }
    }

    #[test]
    fn augmentation() {
        let p = gen_pair(2, Category::Upper, 32, 24).unwrap();
        let m = p.person_mask.clone().unwrap();
        for s in 0..10 {
            let a = augment_mask(&m, &p.preserved, s, AugmentMode::On, 0.0).unwrap();
            assert!(a.is_superset_of(&m) && !a.intersects(&p.preserved));
        }
        let off = augment_mask(&p.garment_mask, &p.preserved, 1, AugmentMode::Off, 0.0).unwrap();
        assert_eq!(off, p.garment_mask);
        let big = augment_mask(&p.garment_mask, &p.preserved, 1, AugmentMode::Off, 1.0).unwrap();
        assert!(big.count() as f32 > 0.9 * 32.0 * 24.0);
    }

    #[test]
    fn spec_validation() {
        let spec = DatasetSpec::default();
        spec.validate(4).unwrap();
        let bad = DatasetSpec { category_mix: CategoryMix { upper: 0.5, lower: 0.5, full: 0.5 }, ..spec.clone() };
        assert!(bad.validate(4).is_err());
        assert!(spec.validate(16).is_err());
        assert_eq!(spec.plan(), spec.plan());
    }
}
