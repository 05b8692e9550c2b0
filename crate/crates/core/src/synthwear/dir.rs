//! Directory of pairs: `<stem>.garment.png`, `<stem>.person.png`, optional
//! `<stem>.mask.png` (garment region on the person) and optional
//! `<stem>.json` sidecar `{"category": ..., "aspect": ..., "seed": ...}`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SamplePair;
use crate::error::{usage, Error, Result};
use crate::layout::{Category, Image, Mask};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    category: Category,
    #[serde(default)]
    aspect: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
}

/// Writes pairs as `pair_00000.*`, ... Ground truth beyond the masks is not
/// stored.
pub fn write_pair_dir(pairs: &[SamplePair], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, p) in pairs.iter().enumerate() {
        let stem = format!("pair_{i:05}");
        p.garment.write_png(&dir.join(format!("{stem}.garment.png")))?;
        p.person.write_png(&dir.join(format!("{stem}.person.png")))?;
        if let Some(m) = &p.person_mask {
            m.write_png(&dir.join(format!("{stem}.mask.png")))?;
        }
        let side = Sidecar { category: p.category, aspect: Some(p.aspect.clone()), seed: Some(p.seed) };
        let path = dir.join(format!("{stem}.json"));
        fs::write(&path, serde_json::to_string_pretty(&side)? + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Index of a pair directory; images are read on [`PairDir::get`].
#[derive(Clone, Debug)]
pub struct PairDir {
    root: PathBuf,
    stems: Vec<String>,
}

pub fn load_pair_dir(dir: &Path) -> Result<PairDir> {
    let mut garments = BTreeSet::new();
    let mut persons = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(stem) = name.strip_suffix(".garment.png") {
            garments.insert(stem.to_string());
        } else if let Some(stem) = name.strip_suffix(".person.png") {
            persons.insert(stem.to_string());
        }
    }
    if let Some(stem) = garments.difference(&persons).next() {
        return Err(Error::MissingCounterpart { stem: stem.clone(), missing: "person".into() });
    }
    if let Some(stem) = persons.difference(&garments).next() {
        return Err(Error::MissingCounterpart { stem: stem.clone(), missing: "garment".into() });
    }
    Ok(PairDir { root: dir.to_path_buf(), stems: garments.into_iter().collect() })
}

/// Non-white pixels of a garment shot.
pub fn garment_region(garment: &Image) -> Mask {
    Mask::from_fn(garment.height(), garment.width(), |y, x| garment.pixel(y, x) != [1.0; 3])
}

impl PairDir {
    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    pub fn stems(&self) -> &[String] {
        &self.stems
    }

    pub fn get(&self, i: usize) -> Result<SamplePair> {
        let stem = self.stems.get(i).ok_or_else(|| usage!("pair index {i} out of {}", self.stems.len()))?;
        let file = |suffix: &str| self.root.join(format!("{stem}.{suffix}"));
        let garment = Image::read_png(&file("garment.png"))?;
        let person = Image::read_png(&file("person.png"))?;
        if (garment.height(), garment.width()) != (person.height(), person.width()) {
            return Err(Error::Format(format!(
                "{stem}: garment {}x{} and person {}x{} differ in size",
                garment.height(),
                garment.width(),
                person.height(),
                person.width()
            )));
        }
        let mask_path = file("mask.png");
        let person_mask = if mask_path.exists() { Some(Mask::read_png(&mask_path)?) } else { None };
        if let Some(m) = &person_mask {
            if (m.height(), m.width()) != (person.height(), person.width()) {
                return Err(Error::Format(format!("{stem}: mask size differs from person image")));
            }
        }
        let side_path = file("json");
        let side = if side_path.exists() {
            let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
            serde_json::from_str(&text)?
        } else {
            Sidecar { category: Category::Upper, aspect: None, seed: None }
        };
        Ok(SamplePair {
            garment_mask: garment_region(&garment),
            preserved: Mask::filled(person.height(), person.width(), false),
            aspect: side.aspect.unwrap_or_else(|| format!("{}x{}", person.height(), person.width())),
            seed: side.seed.unwrap_or(0),
            category: side.category,
            garment,
            person,
            person_mask,
            truth: None,
        })
    }
}
