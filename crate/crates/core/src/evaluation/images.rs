//! Writing generated latents as viewable images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes a latent as a binary PGM, channels tiled left to right and values
/// min-max scaled to 0..=255.
pub fn write_pgm(path: &Path, data: &[f64], shape: &[usize]) -> Result<()> {
    let (c, h, w) = match shape {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        [n] => (1, 1, *n),
        _ => return Err(Error::Input(format!("cannot render latent of shape {shape:?} as an image"))),
    };
    if data.len() != c * h * w {
        return Err(Error::Input(format!("latent has {} values, shape {shape:?} needs {}", data.len(), c * h * w)));
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let width = c * w;
    let mut bytes = format!("P5\n{width} {h}\n255\n").into_bytes();
    for row in 0..h {
        for ch in 0..c {
            for col in 0..w {
                let v = data[ch * h * w + row * w + col];
                bytes.push((((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        write_pgm(&p, &[0.0, 1.0, 0.5, 1.0], &[2, 1, 2]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n4 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 255, 128, 255]);
    }
}
