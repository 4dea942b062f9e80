//! Color palettes and image artifacts: class-colored masks and sampling
//! point overlays.

use std::path::Path;

use anyhow::Result;
use ddseg_core::pnm;
use ddseg_core::Tensor;

/// Fixed 40-entry palette so masks are comparable across runs.
pub const PALETTE: [[u8; 3]; 40] = [
    [64, 68, 75],
    [217, 51, 38],
    [38, 191, 64],
    [51, 89, 230],
    [230, 217, 38],
    [38, 204, 217],
    [217, 38, 191],
    [242, 133, 38],
    [128, 51, 230],
    [51, 230, 153],
    [153, 153, 51],
    [51, 102, 102],
    [230, 128, 128],
    [77, 128, 51],
    [128, 77, 26],
    [166, 166, 217],
    [89, 38, 38],
    [38, 89, 38],
    [38, 38, 89],
    [191, 191, 191],
    [242, 191, 128],
    [128, 242, 191],
    [191, 128, 242],
    [242, 128, 191],
    [128, 191, 242],
    [191, 242, 128],
    [102, 26, 77],
    [26, 102, 77],
    [77, 102, 26],
    [217, 102, 51],
    [51, 217, 102],
    [102, 51, 217],
    [153, 204, 255],
    [255, 153, 204],
    [204, 255, 153],
    [102, 102, 153],
    [153, 102, 102],
    [102, 153, 102],
    [230, 230, 128],
    [128, 230, 230],
];

/// Ignore pixels (255) render as white.
pub fn write_mask_ppm(path: &Path, mask: &[u8], w: usize, h: usize) -> Result<()> {
    let mut rgb = Vec::with_capacity(mask.len() * 3);
    for &id in mask {
        let c = if id == 255 { [255, 255, 255] } else { PALETTE[id as usize % PALETTE.len()] };
        rgb.extend_from_slice(&c);
    }
    pnm::write_ppm8(path, w, h, &rgb)?;
    Ok(())
}

/// RGB input with the deformed sampling locations drawn as red squares.
/// `points` is [G, 2] in normalized [-1, 1] coordinates, rows [x, y].
pub fn write_points_overlay(
    path: &Path,
    rgb: &Tensor<f32>,
    points: &Tensor<f32>,
    w: usize,
    h: usize,
) -> Result<()> {
    let n = w * h;
    let mut img = vec![0u8; n * 3];
    for at in 0..n {
        for ch in 0..3 {
            img[at * 3 + ch] = (rgb.data()[ch * n + at].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let pts = points.data();
    for p in pts.chunks_exact(2) {
        let px = (((p[0] as f64 + 1.0) / 2.0) * w as f64) as i64;
        let py = (((p[1] as f64 + 1.0) / 2.0) * h as f64) as i64;
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                let (x, y) = (px + dx, py + dy);
                if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                    let at = (y as usize * w + x as usize) * 3;
                    img[at] = 255;
                    img[at + 1] = 32;
                    img[at + 2] = 32;
                }
            }
        }
    }
    pnm::write_ppm8(path, w, h, &img)?;
    Ok(())
}
