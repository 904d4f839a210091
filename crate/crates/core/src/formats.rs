//! On-disk scene containers: the "PCV1" feature raster, 8-bit binary PGM
//! label maps, binary PPM classification maps, and the JSON manifest that
//! ties a dual-band scene together.
//!
//! All binary formats are little-endian and byte-exact: writing and
//! re-reading a scene reproduces identical files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polsar::{PolsarRaster, CHANNELS, UNLABELED};

const PCV1_MAGIC: &[u8; 4] = b"PCV1";

/// Writes a feature raster: magic "PCV1", u32 height, u32 width,
/// u32 channel count (9), then `H*W*9` f32 features row-major channel-last.
pub fn write_pcv1(path: &Path, raster: &PolsarRaster) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(PCV1_MAGIC)?;
    w.write_all(&(raster.height as u32).to_le_bytes())?;
    w.write_all(&(raster.width as u32).to_le_bytes())?;
    w.write_all(&(CHANNELS as u32).to_le_bytes())?;
    for x in &raster.features {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a PCV1 feature raster. Labels are not part of the container; the
/// returned raster has none attached.
pub fn read_pcv1(path: &Path, band_tag: impl Into<String>) -> Result<PolsarRaster> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::format(format!(
            "{}: truncated header: expected at least 16 bytes, got {}",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[0..4] != PCV1_MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic at offset 0: expected \"PCV1\", got {:?}",
            path.display(),
            &bytes[0..4]
        )));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let height = u32_at(4) as usize;
    let width = u32_at(8) as usize;
    let channels = u32_at(12) as usize;
    if channels != CHANNELS {
        return Err(Error::format(format!(
            "{}: channel count at offset 12 is {channels}, expected {CHANNELS}",
            path.display()
        )));
    }
    let expected = 16 + height * width * CHANNELS * 4;
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "{}: expected {expected} bytes for {height}x{width}x{CHANNELS}, got {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut features = Vec::with_capacity(height * width * CHANNELS);
    for chunk in bytes[16..].chunks_exact(4) {
        let x = f32::from_le_bytes(chunk.try_into().unwrap());
        if !x.is_finite() {
            return Err(Error::format(format!(
                "{}: non-finite feature value near offset {}",
                path.display(),
                16 + features.len() * 4
            )));
        }
        features.push(x);
    }
    PolsarRaster::new(height, width, features, None, band_tag)
}

/// Writes an 8-bit binary PGM (P5) label raster; 255 marks unlabeled pixels.
pub fn write_pgm(path: &Path, labels: &[u8], height: usize, width: usize) -> Result<()> {
    if labels.len() != height * width {
        return Err(Error::validation(format!(
            "label buffer length {} does not match {height}x{width}",
            labels.len()
        )));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(labels)?;
    w.flush()?;
    Ok(())
}

/// Reads an 8-bit binary PGM (P5) raster as `(labels, height, width)`.
pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = fs::read(path)?;
    let (dims, data_off) = parse_netpbm_header(&bytes, b"P5", 3)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let (width, height, maxval) = (dims[0], dims[1], dims[2]);
    if maxval != 255 {
        return Err(Error::format(format!(
            "{}: maxval {maxval} unsupported, expected 255",
            path.display()
        )));
    }
    let expected = data_off + width * height;
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "{}: expected {expected} bytes for {width}x{height} P5, got {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok((bytes[data_off..].to_vec(), height, width))
}

/// Writes a binary PPM (P6) image from packed RGB triples.
pub fn write_ppm(path: &Path, rgb: &[u8], height: usize, width: usize) -> Result<()> {
    if rgb.len() != height * width * 3 {
        return Err(Error::validation(format!(
            "rgb buffer length {} does not match {height}x{width}x3",
            rgb.len()
        )));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(rgb)?;
    w.flush()?;
    Ok(())
}

/// Reads a binary PPM (P6) image as `(rgb, height, width)`.
pub fn read_ppm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = fs::read(path)?;
    let (dims, data_off) = parse_netpbm_header(&bytes, b"P6", 3)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let (width, height, maxval) = (dims[0], dims[1], dims[2]);
    if maxval != 255 {
        return Err(Error::format(format!(
            "{}: maxval {maxval} unsupported",
            path.display()
        )));
    }
    let expected = data_off + width * height * 3;
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "{}: expected {expected} bytes for {width}x{height} P6, got {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok((bytes[data_off..].to_vec(), height, width))
}

/// Parses a netpbm header: magic, then `n` whitespace-separated decimal
/// fields, with `#` comments allowed. Returns the fields and the offset of
/// the first data byte.
fn parse_netpbm_header(
    bytes: &[u8],
    magic: &[u8; 2],
    n: usize,
) -> std::result::Result<(Vec<usize>, usize), String> {
    if bytes.len() < 2 || &bytes[0..2] != magic {
        return Err(format!(
            "bad magic: expected {:?}",
            std::str::from_utf8(magic).unwrap_or("?")
        ));
    }
    let mut pos = 2;
    let mut fields = Vec::with_capacity(n);
    while fields.len() < n {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(format!("malformed header near offset {pos}"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        fields.push(text.parse::<usize>().map_err(|e| e.to_string())?);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format!("missing whitespace after header at offset {pos}"));
    }
    Ok((fields, pos + 1))
}

/// JSON manifest pairing the two band files with the label raster, class
/// names, and rendering palette. File references are relative to the
/// manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneManifest {
    pub band1: String,
    pub band2: String,
    pub labels: String,
    pub class_names: Vec<String>,
    pub palette: Vec<[u8; 3]>,
}

impl SceneManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::validation("manifest declares no classes"));
        }
        if self.palette.len() < self.class_names.len() {
            return Err(Error::validation(format!(
                "palette has {} entries for {} classes",
                self.palette.len(),
                self.class_names.len()
            )));
        }
        Ok(())
    }
}

/// A dual-band scene in memory: two feature rasters sharing one label map.
#[derive(Debug, Clone)]
pub struct Scene {
    pub band1: PolsarRaster,
    pub band2: PolsarRaster,
    pub manifest: SceneManifest,
}

impl Scene {
    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn band(&self, index: usize) -> &PolsarRaster {
        match index {
            0 => &self.band1,
            1 => &self.band2,
            _ => panic!("band index {index} out of range"),
        }
    }
}

/// Canonical file names used by [`write_scene`].
pub const BAND1_FILE: &str = "band1.pcv";
pub const BAND2_FILE: &str = "band2.pcv";
pub const LABELS_FILE: &str = "labels.pgm";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes a dual-band scene (features, labels, manifest) into `dir`.
pub fn write_scene(
    dir: &Path,
    band1: &PolsarRaster,
    band2: &PolsarRaster,
    labels: &[u8],
    class_names: &[String],
    palette: &[[u8; 3]],
) -> Result<()> {
    if band1.height != band2.height || band1.width != band2.width {
        return Err(Error::validation("band rasters have different dimensions"));
    }
    fs::create_dir_all(dir)?;
    write_pcv1(&dir.join(BAND1_FILE), band1)?;
    write_pcv1(&dir.join(BAND2_FILE), band2)?;
    write_pgm(&dir.join(LABELS_FILE), labels, band1.height, band1.width)?;
    let manifest = SceneManifest {
        band1: BAND1_FILE.into(),
        band2: BAND2_FILE.into(),
        labels: LABELS_FILE.into(),
        class_names: class_names.to_vec(),
        palette: palette.to_vec(),
    };
    manifest.validate()?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

/// Loads a dual-band scene from its manifest. Both rasters get the label
/// map attached; dimensions are cross-checked.
pub fn read_scene(manifest_path: &Path) -> Result<Scene> {
    let manifest: SceneManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    manifest.validate()?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |rel: &str| -> PathBuf { dir.join(rel) };
    let mut band1 = read_pcv1(&resolve(&manifest.band1), "band1")?;
    let mut band2 = read_pcv1(&resolve(&manifest.band2), "band2")?;
    if band1.height != band2.height || band1.width != band2.width {
        return Err(Error::format(format!(
            "band dimensions differ: {}x{} vs {}x{}",
            band1.height, band1.width, band2.height, band2.width
        )));
    }
    let (labels, lh, lw) = read_pgm(&resolve(&manifest.labels))?;
    if lh != band1.height || lw != band1.width {
        return Err(Error::format(format!(
            "label raster is {lh}x{lw} but bands are {}x{}",
            band1.height, band1.width
        )));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l != UNLABELED && usize::from(l) >= manifest.num_classes() {
            return Err(Error::format(format!(
                "label {} at pixel {i} exceeds declared class count {}",
                l,
                manifest.num_classes()
            )));
        }
    }
    band1.labels = Some(labels.clone());
    band2.labels = Some(labels);
    Ok(Scene { band1, band2, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use tempfile::tempdir;

    fn raster(h: usize, w: usize, seed: u64) -> PolsarRaster {
        let mut rng = crate::seed::stream(seed, &[99]);
        let features: Vec<f32> = (0..h * w * CHANNELS)
            .map(|_| rng.random_range(0.0f32..2.0))
            .collect();
        PolsarRaster::new(h, w, features, None, "b1").unwrap()
    }

    #[test]
    fn pcv1_round_trip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.pcv");
        let r = raster(7, 5, 1);
        write_pcv1(&path, &r).unwrap();
        let bytes1 = fs::read(&path).unwrap();
        let r2 = read_pcv1(&path, "b1").unwrap();
        assert_eq!(r.features, r2.features);
        write_pcv1(&path, &r2).unwrap();
        assert_eq!(bytes1, fs::read(&path).unwrap());
    }

    #[test]
    fn pcv1_rejects_truncation_with_lengths() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.pcv");
        let r = raster(4, 4, 2);
        write_pcv1(&path, &r).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 7);
        fs::write(&path, &bytes).unwrap();
        let err = read_pcv1(&path, "b1").unwrap_err().to_string();
        assert!(err.contains("expected 592 bytes"), "{err}");
        assert!(err.contains("got 585"), "{err}");
    }

    #[test]
    fn pcv1_rejects_bad_magic_and_channels() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.pcv");
        let r = raster(4, 4, 3);
        write_pcv1(&path, &r).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(read_pcv1(&path, "b1").unwrap_err().to_string().contains("bad magic"));

        write_pcv1(&path, &r).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[12] = 7;
        fs::write(&path, &bytes).unwrap();
        assert!(read_pcv1(&path, "b1").unwrap_err().to_string().contains("channel count"));
    }

    #[test]
    fn pgm_and_ppm_round_trip() {
        let dir = tempdir().unwrap();
        let labels: Vec<u8> = (0..20).map(|i| (i % 3) as u8).collect();
        let p = dir.path().join("l.pgm");
        write_pgm(&p, &labels, 4, 5).unwrap();
        let (back, h, w) = read_pgm(&p).unwrap();
        assert_eq!((back, h, w), (labels, 4, 5));

        let rgb: Vec<u8> = (0..4 * 5 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let p = dir.path().join("m.ppm");
        write_ppm(&p, &rgb, 4, 5).unwrap();
        let (back, h, w) = read_ppm(&p).unwrap();
        assert_eq!((back, h, w), (rgb, 4, 5));
    }

    #[test]
    fn scene_round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let b1 = raster(6, 6, 4);
        let b2 = raster(6, 6, 5);
        let labels = vec![0u8; 36];
        let names = vec!["water".to_string(), "forest".to_string()];
        let palette = [[0, 0, 255], [0, 128, 0]];
        write_scene(dir.path(), &b1, &b2, &labels, &names, &palette).unwrap();
        let scene = read_scene(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(scene.band1.features, b1.features);
        assert_eq!(scene.band2.features, b2.features);
        assert_eq!(scene.band1.labels.as_deref(), Some(&labels[..]));
        assert_eq!(scene.num_classes(), 2);

        // Mismatched label dimensions are rejected.
        write_pgm(&dir.path().join(LABELS_FILE), &vec![0u8; 25], 5, 5).unwrap();
        let err = read_scene(&dir.path().join(MANIFEST_FILE)).unwrap_err();
        assert!(err.to_string().contains("label raster"), "{err}");
    }

    #[test]
    fn scene_rejects_out_of_range_labels() {
        let dir = tempdir().unwrap();
        let b1 = raster(4, 4, 6);
        let b2 = raster(4, 4, 7);
        let mut labels = vec![0u8; 16];
        labels[3] = 5; // only classes {0,1} declared
        let names = vec!["a".to_string(), "b".to_string()];
        let palette = [[1, 2, 3], [4, 5, 6]];
        write_scene(dir.path(), &b1, &b2, &labels, &names, &palette).unwrap();
        let err = read_scene(&dir.path().join(MANIFEST_FILE)).unwrap_err();
        assert!(err.to_string().contains("exceeds declared class count"), "{err}");
    }
}
