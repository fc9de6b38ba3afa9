//! Palette rendering of token grids to PPM (P6) and PNG.
//!
//! Each label maps to a fixed color from a seeded hue permutation, so
//! structure is visually inspectable without a real detokenizer.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use markovgen_core::types::TokenGrid;

/// Golden-angle hue walk, shuffled by the seed, fixed saturation/value.
pub fn palette(vocab_size: usize, seed: u64) -> Vec<[u8; 3]> {
    let mut order: Vec<usize> = (0..vocab_size).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70616c);
    for k in (1..order.len()).rev() {
        let j = rng.random_range(0..=k);
        order.swap(k, j);
    }
    let mut colors = vec![[0u8; 3]; vocab_size];
    for (rank, &label) in order.iter().enumerate() {
        let hue = (rank as f64 * 137.50776405) % 360.0;
        colors[label] = hsv_to_rgb(hue, 0.62, 0.95);
    }
    colors
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

fn pixels(grid: &TokenGrid, colors: &[[u8; 3]], cell: usize) -> (usize, usize, Vec<u8>) {
    let geometry = grid.geometry();
    let width = geometry.width() * cell;
    let height = geometry.height() * cell;
    let mut data = vec![0u8; width * height * 3];
    for row in 0..height {
        for col in 0..width {
            let label = grid.label((row / cell) * geometry.width() + col / cell);
            let rgb = colors[label as usize];
            let at = (row * width + col) * 3;
            data[at..at + 3].copy_from_slice(&rgb);
        }
    }
    (width, height, data)
}

/// Binary PPM (P6) with `cell`-pixel squares per token.
pub fn write_ppm(
    path: impl AsRef<Path>,
    grid: &TokenGrid,
    colors: &[[u8; 3]],
    cell: usize,
) -> std::io::Result<()> {
    let (width, height, data) = pixels(grid, colors, cell);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&data);
    std::fs::write(path, out)
}

/// PNG alongside the PPM render.
pub fn write_png(
    path: impl AsRef<Path>,
    grid: &TokenGrid,
    colors: &[[u8; 3]],
    cell: usize,
) -> anyhow::Result<()> {
    let (width, height, data) = pixels(grid, colors, cell);
    let img = image::RgbImage::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| anyhow::anyhow!("pixel buffer size mismatch"))?;
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use markovgen_core::types::{GridGeometry, VocabSpec};

    #[test]
    fn palette_is_seed_deterministic_and_distinct() {
        let a = palette(16, 5);
        let b = palette(16, 5);
        assert_eq!(a, b);
        let distinct: std::collections::HashSet<[u8; 3]> = a.iter().copied().collect();
        assert_eq!(distinct.len(), 16);
    }

    #[test]
    fn ppm_header_and_size() {
        let g = GridGeometry::new(2, 3).unwrap();
        let v = VocabSpec::new(4).unwrap();
        let grid = TokenGrid::new(g, vec![0, 1, 2, 3, 0, 1], &v).unwrap();
        let colors = palette(4, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.ppm");
        write_ppm(&path, &grid, &colors, 4).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n12 8\n255\n"));
        assert_eq!(bytes.len(), b"P6\n12 8\n255\n".len() + 12 * 8 * 3);
    }
}
