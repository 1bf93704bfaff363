//! Grayscale dumps of per-task feature maps.

use std::path::{Path, PathBuf};

/// Value used for every pixel of a constant map, which has no range to
/// stretch.
pub const MID_GRAY: u8 = 128;

/// Min-max normalizes `values` to `0..=255`.
pub fn normalize(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_finite() || hi - lo <= 0.0 {
        return vec![MID_GRAY; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Channel mean of a `[1, C, H, W]` buffer.
pub fn channel_mean(data: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    (0..hw).map(|p| (0..channels).map(|c| data[c * hw + p]).sum::<f64>() / channels as f64).collect()
}

/// Binary PGM (P5).
pub fn encode_pgm(pixels: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes one `task{i}_{name}.pgm` per feature map (`[1, C, H, W]` each)
/// and returns the paths.
pub fn write_task_images(dir: &Path, maps: &[(String, Vec<usize>, Vec<f64>)]) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(maps.len());
    for (i, (name, shape, data)) in maps.iter().enumerate() {
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let img = normalize(&channel_mean(data, c, h, w));
        let path = dir.join(format!("task{i}_{name}.pgm"));
        std::fs::write(&path, encode_pgm(&img, h, w))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_range_and_constant_rule() {
        assert_eq!(normalize(&[1.0, 2.0, 3.0]), vec![0, 128, 255]);
        assert_eq!(normalize(&[4.0; 3]), vec![MID_GRAY; 3]);
    }

    #[test]
    fn pgm_header() {
        let b = encode_pgm(&[0, 255], 1, 2);
        assert!(b.starts_with(b"P5\n2 1\n255\n"));
        assert_eq!(b.len(), 11 + 2);
    }
}
