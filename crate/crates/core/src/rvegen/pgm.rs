//! Binary PGM (P5) image IO, max value 255, intensity = round(255 * pixel).

use std::fs;
use std::path::Path;

use super::Microstructure;
use crate::{Error, Result};

pub fn write_pgm(path: &Path, image: &Microstructure) -> Result<()> {
    let (h, w) = image.size();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.pixels().iter().map(|&p| (p * 255.0).round() as u8));
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Microstructure> {
    let bytes =
        fs::read(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    // Header: magic, width, height, maxval, one whitespace byte, then raster.
    let mut pos = 0;
    let mut fields: Vec<String> = Vec::new();
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields.len() != 4 || fields[0] != "P5" {
        return Err(Error::Domain(format!("not a P5 PGM: {}", path.display())));
    }
    let bad = |what: &str| Error::Domain(format!("bad PGM {what}: {}", path.display()));
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let maxval: usize = fields[3].parse().map_err(|_| bad("maxval"))?;
    if maxval != 255 {
        return Err(bad("maxval (expected 255)"));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + w * h {
        return Err(bad("raster length"));
    }
    let pixels = bytes[pos..pos + w * h]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok(Microstructure::new(h, w, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_on_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = Microstructure::new(
            2,
            3,
            vec![0.0, 0.1, 0.5, 1.0, 0.25, 0.75],
        )
        .quantized();
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(img, back);
    }
}
