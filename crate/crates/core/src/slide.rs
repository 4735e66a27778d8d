//! Multi-resolution slide container and its on-disk form.
//!
//! A slide directory (conventionally `<id>.slab/`) holds `manifest.json`
//! plus one raw plane file per level and per (mask, level) pair. Plane files
//! are exactly the row-major channel-interleaved bytes of the raster, so a
//! save/open cycle is bit-exact and a rerun with identical inputs rewrites
//! identical bytes.
//!
//! Levels are ordered finest (smallest mpp) first and each coarser level has
//! exactly twice the mpp and ceil-halved dimensions of its predecessor.
//! Binary masks carry values {0, 1}; probability planes (written by
//! prediction) use the same file format with the full 0..=255 range and are
//! marked `"kind": "prob"` in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Depth, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChannelRole {
    #[serde(rename = "red")]
    Red,
    #[serde(rename = "green")]
    Green,
    #[serde(rename = "blue")]
    Blue,
    #[serde(rename = "CK8/18-epithelial")]
    Epithelial,
    #[serde(rename = "CK5/6+p63-basal")]
    Basal,
    #[serde(rename = "AMACR")]
    Amacr,
    #[serde(rename = "DAPI")]
    Dapi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    #[default]
    Binary,
    Prob,
}

#[derive(Debug, Clone)]
pub struct Level {
    pub mpp: f64,
    pub raster: Raster,
}

#[derive(Debug, Clone)]
pub struct MaskPyramid {
    pub kind: MaskKind,
    /// One slot per slide level; planes may exist at a subset of levels.
    pub per_level: Vec<Option<Raster>>,
}

#[derive(Debug, Clone)]
pub struct Slide {
    pub id: String,
    levels: Vec<Level>,
    channel_roles: BTreeMap<usize, ChannelRole>,
    masks: BTreeMap<String, MaskPyramid>,
}

/// Rectangular window on one level, in that level's pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub level: usize,
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

fn mask_name_ok(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

impl Slide {
    pub fn new(
        id: impl Into<String>,
        levels: Vec<Level>,
        channel_roles: BTreeMap<usize, ChannelRole>,
    ) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::invalid("slide id must be non-empty"));
        }
        if levels.is_empty() {
            return Err(Error::invalid("slide needs at least one level"));
        }
        let channels = levels[0].raster.channels();
        for (i, l) in levels.iter().enumerate() {
            if l.raster.depth() != Depth::Byte {
                return Err(Error::invalid("level rasters must be byte depth"));
            }
            if !(l.mpp > 0.0) {
                return Err(Error::invalid("level mpp must be positive"));
            }
            if l.raster.channels() != channels {
                return Err(Error::DimensionMismatch(format!(
                    "level {i} has {} channels, level 0 has {channels}",
                    l.raster.channels()
                )));
            }
            if i > 0 {
                let prev = &levels[i - 1];
                if l.mpp != prev.mpp * 2.0 {
                    return Err(Error::Manifest(format!(
                        "level {i} mpp {} is not exactly twice level {} mpp {}",
                        l.mpp,
                        i - 1,
                        prev.mpp
                    )));
                }
                let (ew, eh) = (
                    prev.raster.width().div_ceil(2),
                    prev.raster.height().div_ceil(2),
                );
                if l.raster.width() != ew || l.raster.height() != eh {
                    return Err(Error::DimensionMismatch(format!(
                        "level {i} is {}x{}, expected {ew}x{eh}",
                        l.raster.width(),
                        l.raster.height()
                    )));
                }
            }
        }
        for (&idx, _) in &channel_roles {
            if idx >= channels {
                return Err(Error::Manifest(format!(
                    "channel role index {idx} out of range for {channels} channels"
                )));
            }
        }
        Ok(Slide {
            id,
            levels,
            channel_roles,
            masks: BTreeMap::new(),
        })
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn channel_roles(&self) -> &BTreeMap<usize, ChannelRole> {
        &self.channel_roles
    }

    pub fn channel_with_role(&self, role: ChannelRole) -> Result<usize> {
        self.channel_roles
            .iter()
            .find(|(_, &r)| r == role)
            .map(|(&i, _)| i)
            .ok_or_else(|| Error::MissingChannel(format!("{role:?}")))
    }

    /// Index of the level whose mpp matches (exact up to 1e-9 relative).
    pub fn level_index(&self, mpp: f64) -> Result<usize> {
        self.levels
            .iter()
            .position(|l| (l.mpp - mpp).abs() <= 1e-9 * mpp.max(1.0))
            .ok_or(Error::MissingLevel(mpp))
    }

    pub fn mask_names(&self) -> impl Iterator<Item = &str> {
        self.masks.keys().map(|s| s.as_str())
    }

    pub fn mask_kind(&self, name: &str) -> Option<MaskKind> {
        self.masks.get(name).map(|m| m.kind)
    }

    pub fn mask(&self, name: &str, level: usize) -> Option<&Raster> {
        self.masks
            .get(name)
            .and_then(|m| m.per_level.get(level))
            .and_then(|r| r.as_ref())
    }

    pub fn expect_mask(&self, name: &str, level: usize) -> Result<&Raster> {
        self.mask(name, level)
            .ok_or_else(|| Error::MissingMask(format!("{name} at level {level}")))
    }

    pub fn remove_mask(&mut self, name: &str) {
        self.masks.remove(name);
    }

    /// Installs one mask plane. The plane must match its level dimensions;
    /// binary planes must contain only {0, 1}.
    pub fn set_mask(
        &mut self,
        name: impl Into<String>,
        kind: MaskKind,
        level: usize,
        raster: Raster,
    ) -> Result<()> {
        let name = name.into();
        if !mask_name_ok(&name) {
            return Err(Error::invalid(format!(
                "mask name {name:?} must be lowercase [a-z0-9_]"
            )));
        }
        let lv = self
            .levels
            .get(level)
            .ok_or_else(|| Error::invalid(format!("no level {level}")))?;
        if raster.channels() != 1 {
            return Err(Error::invalid("mask planes are single-channel"));
        }
        if raster.width() != lv.raster.width() || raster.height() != lv.raster.height() {
            return Err(Error::DimensionMismatch(format!(
                "mask {name} is {}x{}, level {level} is {}x{}",
                raster.width(),
                raster.height(),
                lv.raster.width(),
                lv.raster.height()
            )));
        }
        if kind == MaskKind::Binary && raster.bytes()?.iter().any(|&v| v > 1) {
            return Err(Error::invalid(format!(
                "binary mask {name} contains values other than 0/1"
            )));
        }
        let n_levels = self.levels.len();
        let entry = self.masks.entry(name).or_insert_with(|| MaskPyramid {
            kind,
            per_level: vec![None; n_levels],
        });
        entry.kind = kind;
        entry.per_level[level] = Some(raster);
        Ok(())
    }
}

/// `floor(x * mpp_from / mpp_to)` per axis; pixel coordinates map toward the
/// pixel that covers the same physical point.
pub fn map_coords(slide: &Slide, from_level: usize, to_level: usize, x: usize, y: usize) -> (usize, usize) {
    let from = slide.levels[from_level].mpp;
    let to = slide.levels[to_level].mpp;
    let fx = (x as f64 * from / to).floor() as usize;
    let fy = (y as f64 * from / to).floor() as usize;
    (fx, fy)
}

pub fn read_region(slide: &Slide, region: Region) -> Result<Raster> {
    let lv = slide
        .levels
        .get(region.level)
        .ok_or_else(|| Error::invalid(format!("no level {}", region.level)))?;
    lv.raster.crop(region.x, region.y, region.width, region.height)
}

#[derive(Serialize, Deserialize)]
struct LevelEntry {
    mpp: f64,
    width: usize,
    height: usize,
    channels: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct MaskEntry {
    name: String,
    level: usize,
    file: String,
    #[serde(default)]
    kind: MaskKind,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    id: String,
    levels: Vec<LevelEntry>,
    channel_roles: BTreeMap<String, ChannelRole>,
    masks: Vec<MaskEntry>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the slide as a directory. Refuses to touch a directory that
/// already holds a manifest; callers that mean to overwrite remove it first.
pub fn save_slide(slide: &Slide, dir: &Path) -> Result<()> {
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        return Err(Error::AlreadyExists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut levels = Vec::new();
    for (i, l) in slide.levels.iter().enumerate() {
        let file = format!("level_{i}.raw");
        write_file(&dir.join(&file), l.raster.bytes()?)?;
        levels.push(LevelEntry {
            mpp: l.mpp,
            width: l.raster.width(),
            height: l.raster.height(),
            channels: l.raster.channels(),
            file,
        });
    }
    let mut masks = Vec::new();
    for (name, pyr) in &slide.masks {
        for (i, plane) in pyr.per_level.iter().enumerate() {
            if let Some(r) = plane {
                let file = format!("mask_{name}_l{i}.raw");
                write_file(&dir.join(&file), r.bytes()?)?;
                masks.push(MaskEntry {
                    name: name.clone(),
                    level: i,
                    file,
                    kind: pyr.kind,
                });
            }
        }
    }
    let manifest = Manifest {
        id: slide.id.clone(),
        levels,
        channel_roles: slide
            .channel_roles
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
        masks,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Manifest(format!("serialize manifest: {e}")))?;
    write_file(&manifest_path, json.as_bytes())
}

fn read_plane(
    dir: &Path,
    file: &str,
    width: usize,
    height: usize,
    channels: usize,
) -> Result<Raster> {
    let path = dir.join(file);
    let expected = (width * height * channels) as u64;
    let mut f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let found = f.metadata().map_err(|e| Error::io(&path, e))?.len();
    if found != expected {
        return Err(Error::CorruptPlane {
            file: file.to_string(),
            expected,
            found,
        });
    }
    let mut buf = Vec::with_capacity(expected as usize);
    f.read_to_end(&mut buf).map_err(|e| Error::io(&path, e))?;
    Raster::from_bytes(width, height, channels, buf)
}

pub fn open_slide(dir: &Path) -> Result<Slide> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{e}")))?;

    let mut levels = Vec::new();
    for entry in &manifest.levels {
        let raster = read_plane(dir, &entry.file, entry.width, entry.height, entry.channels)?;
        levels.push(Level {
            mpp: entry.mpp,
            raster,
        });
    }
    let mut roles = BTreeMap::new();
    for (k, v) in &manifest.channel_roles {
        let idx: usize = k
            .parse()
            .map_err(|_| Error::Manifest(format!("channel role key {k:?} is not an index")))?;
        roles.insert(idx, *v);
    }
    let mut slide = Slide::new(manifest.id, levels, roles)?;
    for entry in &manifest.masks {
        if entry.level >= slide.levels.len() {
            return Err(Error::Manifest(format!(
                "mask {} references level {} of {}",
                entry.name,
                entry.level,
                slide.levels.len()
            )));
        }
        let lv = &slide.levels[entry.level];
        let raster = read_plane(
            dir,
            &entry.file,
            lv.raster.width(),
            lv.raster.height(),
            1,
        )?;
        slide.set_mask(entry.name.clone(), entry.kind, entry.level, raster)?;
    }
    Ok(slide)
}

/// Rewrites the mask planes and manifest of an already-saved slide
/// directory, leaving the level planes untouched. Used to add generated
/// masks or prediction planes to an existing store.
pub fn update_slide_masks(slide: &Slide, dir: &Path) -> Result<()> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{e}")))?;
    if manifest.id != slide.id {
        return Err(Error::Manifest(format!(
            "directory holds slide {:?}, not {:?}",
            manifest.id, slide.id
        )));
    }
    let mut masks = Vec::new();
    for (name, pyr) in &slide.masks {
        for (i, plane) in pyr.per_level.iter().enumerate() {
            if let Some(r) = plane {
                let file = format!("mask_{name}_l{i}.raw");
                write_file(&dir.join(&file), r.bytes()?)?;
                masks.push(MaskEntry {
                    name: name.clone(),
                    level: i,
                    file,
                    kind: pyr.kind,
                });
            }
        }
    }
    manifest.masks = masks;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Manifest(format!("serialize manifest: {e}")))?;
    write_file(&manifest_path, json.as_bytes())
}

/// Directory name used by convention for slide `id` under a dataset root.
pub fn slide_dir(root: &Path, id: &str) -> PathBuf {
    root.join(format!("{id}.slab"))
}
