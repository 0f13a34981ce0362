//! 8-bit grayscale PNG panels for visual inspection of maps.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Linearly window `values` (row-major, `width` x `height`) into 0..=255.
pub fn window_to_u8(values: &[f32], lo: f64, hi: f64) -> Result<Vec<u8>> {
    if !(lo < hi) {
        return Err(Error::Invariant(format!("display window needs lo < hi, got [{lo}, {hi}]")));
    }
    Ok(values
        .iter()
        .map(|v| {
            let u = ((*v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0);
            (u * 255.0).round() as u8
        })
        .collect())
}

pub fn export_png(values: &[f32], width: usize, height: usize, window: (f64, f64), path: &Path) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::LengthMismatch {
            what: "png slice",
            expected: width * height,
            found: values.len(),
        });
    }
    let pixels = window_to_u8(values, window.0, window.1)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut w = enc.write_header().map_err(to_err)?;
    w.write_image_data(&pixels).map_err(to_err)?;
    w.finish().map_err(to_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_and_white() {
        assert!(window_to_u8(&[0.0; 4], 0.0, 60.0).unwrap().iter().all(|v| *v == 0));
        assert!(window_to_u8(&[60.0; 4], 0.0, 60.0).unwrap().iter().all(|v| *v == 255));
        assert_eq!(window_to_u8(&[-5.0, 30.0, 99.0], 0.0, 60.0).unwrap(), vec![0, 128, 255]);
        assert!(window_to_u8(&[0.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn png_bytes_stable() {
        let dir = tempfile::tempdir().unwrap();
        let vals: Vec<f32> = (0..48).map(|i| i as f32).collect();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        export_png(&vals, 8, 6, (0.0, 47.0), &a).unwrap();
        export_png(&vals, 8, 6, (0.0, 47.0), &b).unwrap();
        let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(ba, bb);
        assert_eq!(&ba[1..4], b"PNG");
    }
}
