//! Spatial conditioning: the `[garment | person]` canvas, task masks, the
//! pixel-unshuffle latent codec, and patch tokenization.

mod codec;
mod image;
mod tokens;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use codec::{Codec, LatentGrid};
pub use image::{Image, Mask};
pub(crate) use image::quantize;
pub use tokens::{tokenize, Geometry, TokenSequence};

use crate::error::{usage, Error, Result};

/// Generation direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Garment -> dressed person.
    On,
    /// Dressed person -> garment.
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Upper,
    Lower,
    Full,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::On, Mode::Off];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Upper, Category::Lower, Category::Full];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(Mode::On),
            "off" => Ok(Mode::Off),
            _ => Err(usage!("unknown mode `{s}` (expected on|off)")),
        }
    }
}

impl FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "upper" => Ok(Category::Upper),
            "lower" => Ok(Category::Lower),
            "full" => Ok(Category::Full),
            _ => Err(usage!("unknown category `{s}` (expected upper|lower|full)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::On => "on",
            Mode::Off => "off",
        })
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Upper => "upper",
            Category::Lower => "lower",
            Category::Full => "full",
        })
    }
}

/// `(mode, category)` conditioning pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskToken {
    pub mode: Mode,
    pub category: Category,
}

impl TaskToken {
    pub fn new(mode: Mode, category: Category) -> Self {
        Self { mode, category }
    }

    pub fn with_mode(self, mode: Mode) -> Self {
        Self { mode, ..self }
    }
}

pub fn make_task_token(mode: &str, category: &str) -> Result<TaskToken> {
    Ok(TaskToken::new(mode.parse()?, category.parse()?))
}

/// `[garment | person]` image of size `H x 2W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    image: Image,
    split: usize,
}

impl Canvas {
    pub fn from_image(image: Image) -> Result<Self> {
        if !image.width().is_multiple_of(2) {
            return Err(usage!("canvas width {} is odd", image.width()));
        }
        let split = image.width() / 2;
        Ok(Self { image, split })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn garment(&self) -> Image {
        self.image.crop_cols(0, self.split)
    }

    pub fn person(&self) -> Image {
        self.image.crop_cols(self.split, self.split)
    }
}

pub fn concat_pair(garment: &Image, person: &Image) -> Result<Canvas> {
    if garment.height() != person.height() || garment.width() != person.width() {
        return Err(usage!(
            "garment {}x{} and person {}x{} differ in size",
            garment.height(),
            garment.width(),
            person.height(),
            person.width()
        ));
    }
    let (h, w) = (garment.height(), garment.width());
    let mut data = Vec::with_capacity(h * w * 6);
    for y in 0..h {
        data.extend_from_slice(&garment.data()[y * w * 3..(y + 1) * w * 3]);
        data.extend_from_slice(&person.data()[y * w * 3..(y + 1) * w * 3]);
    }
    Ok(Canvas { image: Image::new(h, 2 * w, data)?, split: w })
}

/// Binary `H x 2W` inpainting mask; set pixels are generated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskCanvas {
    mask: Mask,
    split: usize,
}

impl MaskCanvas {
    pub fn from_halves(left: &Mask, right: &Mask) -> Result<Self> {
        if left.height() != right.height() || left.width() != right.width() {
            return Err(usage!("mask halves differ in size"));
        }
        let (h, w) = (left.height(), left.width());
        let mask = Mask::from_fn(h, 2 * w, |y, x| if x < w { left.get(y, x) } else { right.get(y, x - w) });
        Ok(Self { mask, split: w })
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn left(&self) -> Mask {
        Mask::from_fn(self.height(), self.split, |y, x| self.mask.get(y, x))
    }

    pub fn right(&self) -> Mask {
        Mask::from_fn(self.height(), self.split, |y, x| self.mask.get(y, x + self.split))
    }
}

/// `[0 | M_on]` for try-on, `[1 | 0]` for try-off.
///
/// `height`/`width` are the per-half extents; `person_mask` is required for
/// try-on and ignored for try-off.
pub fn build_mask(task: TaskToken, height: usize, width: usize, person_mask: Option<&Mask>) -> Result<MaskCanvas> {
    match task.mode {
        Mode::On => {
            let m_on = person_mask.ok_or_else(|| usage!("try-on needs a person garment mask"))?;
            if m_on.height() != height || m_on.width() != width {
                return Err(usage!("person mask is {}x{}, expected {height}x{width}", m_on.height(), m_on.width()));
            }
            MaskCanvas::from_halves(&Mask::filled(height, width, false), m_on)
        }
        Mode::Off => MaskCanvas::from_halves(&Mask::filled(height, width, true), &Mask::filled(height, width, false)),
    }
}

/// `[M_left | 0]`: try-off with a garment-specific left-half mask.
pub fn build_tryoff_mask(garment_region: &Mask) -> Result<MaskCanvas> {
    let empty = Mask::filled(garment_region.height(), garment_region.width(), false);
    MaskCanvas::from_halves(garment_region, &empty)
}

/// `X * (1 - M)`.
pub fn apply_mask(canvas: &Canvas, mask: &MaskCanvas) -> Result<Canvas> {
    if canvas.height() != mask.height() || canvas.width() != mask.width() {
        return Err(usage!(
            "canvas {}x{} vs mask {}x{}",
            canvas.height(),
            canvas.width(),
            mask.height(),
            mask.width()
        ));
    }
    let mut data = canvas.image.data().to_vec();
    for (px, &m) in data.chunks_mut(3).zip(mask.mask.bits()) {
        if m {
            px.fill(0.0);
        }
    }
    Ok(Canvas { image: Image::new(canvas.height(), canvas.width(), data)?, split: canvas.split })
}

/// Copies pixels outside `mask` from `condition` and inside from `generated`.
pub fn composite(condition: &Canvas, generated: &Canvas, mask: &MaskCanvas) -> Result<Canvas> {
    if condition.image.data().len() != generated.image.data().len() || condition.height() != mask.height() {
        return Err(usage!("composite: size mismatch"));
    }
    let mut data = condition.image.data().to_vec();
    for ((dst, src), &m) in data.chunks_mut(3).zip(generated.image.data().chunks(3)).zip(mask.mask.bits()) {
        if m {
            dst.copy_from_slice(src);
        }
    }
    Ok(Canvas { image: Image::new(condition.height(), condition.width(), data)?, split: condition.split })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize, salt: f32) -> Image {
        let data = (0..h * w * 3).map(|i| (i as f32 * 0.37 + salt).sin() * 0.5 + 0.5).collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn concat_shapes_and_halves() {
        let g = gradient_image(64, 48, 0.1);
        let p = gradient_image(64, 48, 2.0);
        let c = concat_pair(&g, &p).unwrap();
        assert_eq!((c.height(), c.width(), c.split()), (64, 96, 48));
        assert_eq!(c.garment(), g);
        assert_eq!(c.person(), p);
    }

    #[test]
    fn concat_white_black() {
        let c = concat_pair(&Image::filled(4, 4, [1.0; 3]), &Image::filled(4, 4, [0.0; 3])).unwrap();
        for y in 0..4 {
            for x in 0..8 {
                let expect = if x < 4 { 1.0 } else { 0.0 };
                assert_eq!(c.image().pixel(y, x), [expect; 3]);
            }
        }
    }

    #[test]
    fn concat_shape_mismatch() {
        let err = concat_pair(&Image::filled(4, 4, [0.0; 3]), &Image::filled(4, 8, [0.0; 3])).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn masks_by_mode() {
        let off = build_mask(make_task_token("off", "upper").unwrap(), 8, 6, None).unwrap();
        assert_eq!(off.mask().count(), 48);
        assert_eq!(off.left().count(), 48);
        let on = build_mask(make_task_token("on", "full").unwrap(), 8, 6, Some(&Mask::filled(8, 6, true))).unwrap();
        assert_eq!(on.mask().count(), 48);
        assert_eq!(on.right().count(), 48);
        assert!(matches!(build_mask(make_task_token("on", "full").unwrap(), 8, 6, None), Err(Error::Usage(_))));
    }

    #[test]
    fn apply_mask_cases() {
        let c = concat_pair(&gradient_image(4, 4, 0.0), &gradient_image(4, 4, 1.0)).unwrap();
        let zero = MaskCanvas::from_halves(&Mask::filled(4, 4, false), &Mask::filled(4, 4, false)).unwrap();
        assert_eq!(apply_mask(&c, &zero).unwrap(), c);
        let one = MaskCanvas::from_halves(&Mask::filled(4, 4, true), &Mask::filled(4, 4, true)).unwrap();
        assert!(apply_mask(&c, &one).unwrap().image().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn task_token_parsing() {
        assert_eq!(make_task_token("on", "upper").unwrap(), TaskToken::new(Mode::On, Category::Upper));
        assert_eq!(make_task_token("off", "full").unwrap(), TaskToken::new(Mode::Off, Category::Full));
        assert!(matches!(make_task_token("sideways", "upper"), Err(Error::Usage(_))));
        assert!(make_task_token("on", "hat").is_err());
    }
}
