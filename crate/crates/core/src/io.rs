//! Binary + sidecar-metadata persistence.
//!
//! Convention shared by images and sinograms: the payload is a flat
//! little-endian 32-bit float binary (`<stem>.bin`), channel-major, and a
//! text metadata file (`<stem>.meta`) with one `key: value` pair per line.
//! Writes go through a temp file followed by a rename so a failed run never
//! leaves a partial file behind.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::image::{ImagePlane, MaterialImage};

/// Ordered key:value metadata block.
#[derive(Debug, Clone, Default)]
pub struct Metadata {
    entries: BTreeMap<String, String>,
}

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str, path: &Path) -> Result<&str> {
        self.get(key).ok_or_else(|| CoreError::Format {
            path: path.display().to_string(),
            reason: format!("missing metadata key `{key}`"),
        })
    }

    pub fn parse_f64(&self, key: &str, path: &Path) -> Result<f64> {
        self.require(key, path)?.parse().map_err(|_| CoreError::Format {
            path: path.display().to_string(),
            reason: format!("metadata key `{key}` is not a number"),
        })
    }

    pub fn parse_usize(&self, key: &str, path: &Path) -> Result<usize> {
        self.require(key, path)?.parse().map_err(|_| CoreError::Format {
            path: path.display().to_string(),
            reason: format!("metadata key `{key}` is not an integer"),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(": ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once(':').ok_or_else(|| CoreError::Format {
                path: path.display().to_string(),
                reason: format!("line {}: expected `key: value`", lineno + 1),
            })?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn planes_to_le_f32(planes: &[&ImagePlane]) -> Vec<u8> {
    let n: usize = planes.iter().map(|p| p.data.len()).sum();
    let mut bytes = Vec::with_capacity(n * 4);
    for p in planes {
        for &v in &p.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

fn le_f32_to_vec(bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(CoreError::Format {
            path: path.display().to_string(),
            reason: "binary length is not a multiple of 4".into(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn bin_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

fn meta_path(stem: &Path) -> PathBuf {
    stem.with_extension("meta")
}

/// Persist a material image as `<stem>.bin` + `<stem>.meta`. Extra metadata
/// entries (seed, recipe, ...) are merged in.
pub fn write_material_image(stem: &Path, img: &MaterialImage, extra: &Metadata) -> Result<()> {
    let mut meta = extra.clone();
    meta.set("height", img.height());
    meta.set("width", img.width());
    meta.set("channels", 2);
    meta.set("channel_order", "water,calcium");
    meta.set("pixel_size_mm", img.pixel_size_mm);
    meta.set("dtype", "f32le");
    write_atomic(&bin_path(stem), &planes_to_le_f32(&[&img.water, &img.calcium]))?;
    write_atomic(&meta_path(stem), meta.to_text().as_bytes())?;
    Ok(())
}

/// Load a material image written by [`write_material_image`]. Returns the
/// image together with its metadata block.
pub fn read_material_image(stem: &Path) -> Result<(MaterialImage, Metadata)> {
    let mpath = meta_path(stem);
    let meta = Metadata::from_text(&fs::read_to_string(&mpath)?, &mpath)?;
    let height = meta.parse_usize("height", &mpath)?;
    let width = meta.parse_usize("width", &mpath)?;
    let channels = meta.parse_usize("channels", &mpath)?;
    if channels != 2 {
        return Err(CoreError::Format {
            path: mpath.display().to_string(),
            reason: format!("expected 2 channels, got {channels}"),
        });
    }
    let pixel_size_mm = meta.parse_f64("pixel_size_mm", &mpath)?;
    let bpath = bin_path(stem);
    let values = le_f32_to_vec(&fs::read(&bpath)?, &bpath)?;
    if values.len() != 2 * height * width {
        return Err(CoreError::Format {
            path: bpath.display().to_string(),
            reason: format!(
                "expected {} values, got {}",
                2 * height * width,
                values.len()
            ),
        });
    }
    let (w, c) = values.split_at(height * width);
    let img = MaterialImage::new(
        ImagePlane::from_vec(height, width, w.to_vec())?,
        ImagePlane::from_vec(height, width, c.to_vec())?,
        pixel_size_mm,
    )?;
    Ok((img, meta))
}

/// Persist a stack of planes (e.g. sinogram channels) under the binary +
/// metadata convention. `rows`/`cols` describe each plane.
pub fn write_planes(stem: &Path, planes: &[&ImagePlane], meta: &Metadata) -> Result<()> {
    write_atomic(&bin_path(stem), &planes_to_le_f32(planes))?;
    write_atomic(&meta_path(stem), meta.to_text().as_bytes())?;
    Ok(())
}

/// Read back `n_planes` planes of shape rows x cols.
pub fn read_planes(stem: &Path, n_planes: usize, rows: usize, cols: usize) -> Result<Vec<ImagePlane>> {
    let bpath = bin_path(stem);
    let values = le_f32_to_vec(&fs::read(&bpath)?, &bpath)?;
    if values.len() != n_planes * rows * cols {
        return Err(CoreError::Format {
            path: bpath.display().to_string(),
            reason: format!(
                "expected {} values, got {}",
                n_planes * rows * cols,
                values.len()
            ),
        });
    }
    values
        .chunks_exact(rows * cols)
        .map(|c| ImagePlane::from_vec(rows, cols, c.to_vec()))
        .collect()
}

pub fn read_metadata(stem: &Path) -> Result<Metadata> {
    let mpath = meta_path(stem);
    Metadata::from_text(&fs::read_to_string(&mpath)?, &mpath)
}

/// Write a two-column CSV trace (`step,value`).
pub fn write_trace_csv(path: &Path, header: &str, values: &[f64]) -> Result<()> {
    let mut s = String::from("step,");
    s.push_str(header);
    s.push('\n');
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("{},{:.12e}\n", i, v));
    }
    write_atomic(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn material_image_roundtrip_is_f32_exact() {
        let dir = tempdir().unwrap();
        let stem = dir.path().join("img");
        let mut img = MaterialImage::zeros(3, 4, 0.8);
        for (i, v) in img.water.data.iter_mut().enumerate() {
            *v = i as f64 * 0.125; // exactly representable in f32
        }
        img.calcium.data[5] = 1.5;
        let mut meta = Metadata::new();
        meta.set("seed", 7);
        write_material_image(&stem, &img, &meta).unwrap();
        let (back, meta2) = read_material_image(&stem).unwrap();
        assert_eq!(back.water.data, img.water.data);
        assert_eq!(back.calcium.data, img.calcium.data);
        assert_eq!(meta2.get("seed"), Some("7"));
        assert_eq!(meta2.get("channel_order"), Some("water,calcium"));
    }

    #[test]
    fn metadata_rejects_bad_lines() {
        let err = Metadata::from_text("no separator here", Path::new("x.meta"));
        assert!(err.is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("file.bin");
        write_atomic(&p, b"abc").unwrap();
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names, vec!["file.bin".to_string()]);
    }
}
