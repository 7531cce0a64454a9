//! On-disk dataset format.
//!
//! Each split is a JSON manifest (`<name>.json`) plus a pixel blob
//! (`<name>.pix`). The blob starts with the 8-byte magic `BOWPIXEL`, a
//! little-endian `u32` format version, then `u64` count, `u32` height and
//! `u32` width, followed by `count·H·W` little-endian `f64` pixels in
//! manifest order.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    BBox, ClassId, Domain, Image, ImageSample, PretextSample, SealedLabels, SynthError,
};

pub const PIXEL_MAGIC: &[u8; 8] = b"BOWPIXEL";
pub const PIXEL_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 4 + 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: usize,
    pub domain: Domain,
    pub split: String,
    pub class_label: Option<ClassId>,
    pub bbox: BBox,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretextRecord {
    pub id: usize,
    pub domain: Domain,
    pub y_ins: usize,
    pub grid_size: usize,
    pub contributor_ids: Vec<usize>,
    /// How cell crops were obtained; always `native` (no resizing).
    pub crop_mode: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SealedRecord {
    pub id: usize,
    pub class_label: ClassId,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest<T> {
    format: String,
    version: u32,
    samples: Vec<T>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> SynthError {
    SynthError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn write_json<T: Serialize>(path: &Path, format: &str, samples: Vec<T>) -> Result<(), SynthError> {
    let m = Manifest {
        format: format.to_string(),
        version: PIXEL_VERSION,
        samples,
    };
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, format: &str) -> Result<Vec<T>, SynthError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let m: Manifest<T> =
        serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    if m.format != format || m.version != PIXEL_VERSION {
        return Err(format_err(path, format!("expected {format} v{PIXEL_VERSION}")));
    }
    Ok(m.samples)
}

fn write_pixels<'a>(
    path: &Path,
    images: impl ExactSizeIterator<Item = &'a Image>,
    h: usize,
    w: usize,
) -> Result<(), SynthError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(f);
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(PIXEL_MAGIC);
    header.extend_from_slice(&PIXEL_VERSION.to_le_bytes());
    header.extend_from_slice(&(images.len() as u64).to_le_bytes());
    header.extend_from_slice(&(h as u32).to_le_bytes());
    header.extend_from_slice(&(w as u32).to_le_bytes());
    out.write_all(&header).map_err(io_err(path))?;
    for img in images {
        if img.h != h || img.w != w {
            return Err(format_err(path, "images of mixed size"));
        }
        for p in &img.pixels {
            out.write_all(&p.to_le_bytes()).map_err(io_err(path))?;
        }
    }
    out.flush().map_err(io_err(path))
}

fn read_pixels(path: &Path) -> Result<Vec<Image>, SynthError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    if bytes.len() < HEADER_LEN || &bytes[..8] != PIXEL_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(8) != PIXEL_VERSION {
        return Err(format_err(path, format!("unsupported version {}", u32_at(8))));
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let (h, w) = (u32_at(20) as usize, u32_at(24) as usize);
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * h * w * 8 {
        return Err(format_err(path, "pixel payload length does not match header"));
    }
    Ok(body
        .chunks_exact(h * w * 8)
        .map(|chunk| Image {
            h,
            w,
            pixels: chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        })
        .collect())
}

fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.json")), dir.join(format!("{name}.pix")))
}

pub fn write_image_set(
    dir: &Path,
    name: &str,
    split: &str,
    samples: &[ImageSample],
) -> Result<(), SynthError> {
    let (mpath, ppath) = paths(dir, name);
    let records = samples
        .iter()
        .enumerate()
        .map(|(id, s)| ImageRecord {
            id,
            domain: s.domain,
            split: split.to_string(),
            class_label: s.class_label,
            bbox: s.bbox,
            seed: s.instance_seed,
        })
        .collect();
    write_json(&mpath, "bowunida-images", records)?;
    let (h, w) = samples.first().map_or((0, 0), |s| (s.pixels.h, s.pixels.w));
    write_pixels(&ppath, samples.iter().map(|s| &s.pixels), h, w)
}

pub fn read_image_set(dir: &Path, name: &str) -> Result<Vec<ImageSample>, SynthError> {
    let (mpath, ppath) = paths(dir, name);
    let records: Vec<ImageRecord> = read_json(&mpath, "bowunida-images")?;
    let images = read_pixels(&ppath)?;
    if records.len() != images.len() {
        return Err(format_err(&ppath, "manifest and pixel counts differ"));
    }
    Ok(records
        .into_iter()
        .zip(images)
        .map(|(r, pixels)| ImageSample {
            pixels,
            class_label: r.class_label,
            domain: r.domain,
            bbox: r.bbox,
            instance_seed: r.seed,
        })
        .collect())
}

pub fn write_pretext_set(
    dir: &Path,
    name: &str,
    domain: Domain,
    samples: &[PretextSample],
) -> Result<(), SynthError> {
    let (mpath, ppath) = paths(dir, name);
    let records = samples
        .iter()
        .enumerate()
        .map(|(id, s)| PretextRecord {
            id,
            domain,
            y_ins: s.y_ins,
            grid_size: s.grid_size,
            contributor_ids: s.contributor_ids.clone(),
            crop_mode: "native".into(),
        })
        .collect();
    write_json(&mpath, "bowunida-pretext", records)?;
    let (h, w) = samples.first().map_or((0, 0), |s| (s.pixels.h, s.pixels.w));
    write_pixels(&ppath, samples.iter().map(|s| &s.pixels), h, w)
}

pub fn read_pretext_set(dir: &Path, name: &str) -> Result<Vec<PretextSample>, SynthError> {
    let (mpath, ppath) = paths(dir, name);
    let records: Vec<PretextRecord> = read_json(&mpath, "bowunida-pretext")?;
    let images = read_pixels(&ppath)?;
    if records.len() != images.len() {
        return Err(format_err(&ppath, "manifest and pixel counts differ"));
    }
    Ok(records
        .into_iter()
        .zip(images)
        .map(|(r, pixels)| PretextSample {
            pixels,
            y_ins: r.y_ins,
            grid_size: r.grid_size,
            contributor_ids: r.contributor_ids,
        })
        .collect())
}

pub fn write_sealed(path: &Path, labels: &SealedLabels) -> Result<(), SynthError> {
    let records = labels
        .open()
        .iter()
        .enumerate()
        .map(|(id, &class_label)| SealedRecord { id, class_label })
        .collect();
    write_json(path, "bowunida-sealed", records)
}

pub fn read_sealed(path: &Path) -> Result<SealedLabels, SynthError> {
    let records: Vec<SealedRecord> = read_json(path, "bowunida-sealed")?;
    Ok(SealedLabels::new(records.into_iter().map(|r| r.class_label).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_dataset, procure_pretext, DomainStyle, ShiftSpec};

    #[test]
    fn image_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ShiftSpec::new(0..6, 0..4).unwrap();
        let set = generate_dataset(&spec, &DomainStyle::shifted_target(), 9, 4, 32).unwrap();
        write_image_set(dir.path(), "t", "train", &set.samples).unwrap();
        assert_eq!(read_image_set(dir.path(), "t").unwrap(), set.samples);
        let sealed = set.sealed.unwrap();
        let p = dir.path().join("sealed.json");
        write_sealed(&p, &sealed).unwrap();
        assert_eq!(read_sealed(&p).unwrap(), sealed);

        let bytes = fs::read(dir.path().join("t.pix")).unwrap();
        assert_eq!(&bytes[..8], PIXEL_MAGIC);
        assert_eq!(bytes.len(), HEADER_LEN + 9 * 32 * 32 * 8);
    }

    #[test]
    fn pretext_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ShiftSpec::new(0..6, 0..4).unwrap();
        let set = generate_dataset(&spec, &DomainStyle::clean_source(), 12, 4, 32).unwrap();
        let pre = procure_pretext(&set.samples, 4, 5, 1).unwrap();
        write_pretext_set(dir.path(), "p", Domain::Source, &pre).unwrap();
        assert_eq!(read_pretext_set(dir.path(), "p").unwrap(), pre);
    }

    #[test]
    fn corrupt_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ShiftSpec::new(0..6, 0..4).unwrap();
        let set = generate_dataset(&spec, &DomainStyle::clean_source(), 2, 4, 32).unwrap();
        write_image_set(dir.path(), "s", "train", &set.samples).unwrap();
        let p = dir.path().join("s.pix");
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            read_image_set(dir.path(), "s"),
            Err(SynthError::Format { .. })
        ));
    }
}
