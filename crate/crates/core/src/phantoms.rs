//! Synthetic phantoms: random ellipse images, the modified Shepp-Logan
//! phantom, and a bitmap-text overlay for out-of-distribution probes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseSpec {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    /// Counter-clockwise rotation in radians.
    pub rotation: f64,
    pub intensity: f64,
}

impl EllipseSpec {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.rotation.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_axes.0).powi(2) + (v / self.semi_axes.1).powi(2) <= 1.0
    }
}

/// Sum the ellipses at every pixel centre of an `n x n` grid on `[-1, 1]^2`.
pub fn render(ellipses: &[EllipseSpec], size: usize) -> Image {
    Image::from_fn(size, |r, c| {
        let (x, y) = Image::pixel_center(size, r, c);
        ellipses
            .iter()
            .filter(|e| e.contains(x, y))
            .map(|e| e.intensity)
            .sum()
    })
}

pub fn random_ellipses(rng: &mut impl Rng) -> Vec<EllipseSpec> {
    let count = rng.gen_range(3..=8);
    (0..count)
        .map(|_| EllipseSpec {
            center: (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
            semi_axes: (rng.gen_range(0.08..0.45), rng.gen_range(0.08..0.45)),
            rotation: rng.gen_range(0.0..std::f64::consts::PI),
            intensity: rng.gen_range(0.1..=1.0),
        })
        .collect()
}

/// 3-8 random ellipses with intensities in `[0.1, 1]`, summed and clipped to `[0, 1]`.
pub fn random_ellipse_phantom(seed: u64, size: usize) -> Result<Image> {
    let mut rng = stream_rng(seed, 0, 0);
    random_ellipse_phantom_with(&mut rng, size)
}

pub fn random_ellipse_phantom_with(rng: &mut ChaCha8Rng, size: usize) -> Result<Image> {
    if size < 16 {
        return Err(Error::Config(format!("ellipse phantoms need size >= 16, got {size}")));
    }
    let mut img = render(&random_ellipses(rng), size);
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(img)
}

/// Modified (high-contrast) Shepp-Logan ellipse table.
pub fn shepp_logan_ellipses() -> Vec<EllipseSpec> {
    const TABLE: [[f64; 6]; 10] = [
        // intensity, a, b, x0, y0, rotation (deg)
        [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
        [-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0],
        [-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0],
        [-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0],
        [0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0],
        [0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0],
        [0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0],
        [0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0],
        [0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0],
        [0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0],
    ];
    TABLE
        .iter()
        .map(|r| EllipseSpec {
            center: (r[3], r[4]),
            semi_axes: (r[1], r[2]),
            rotation: r[5].to_radians(),
            intensity: r[0],
        })
        .collect()
}

/// The modified Shepp-Logan phantom rescaled to `[0, 1]`.
pub fn shepp_logan(size: usize) -> Result<Image> {
    if size < 32 {
        return Err(Error::Config(format!("shepp_logan needs size >= 32, got {size}")));
    }
    let mut img = render(&shepp_logan_ellipses(), size);
    // Overlapping negative ellipses can leave -1e-17 residue; the background is exactly 0.
    let (_, hi) = img.min_max();
    img.data_mut()
        .iter_mut()
        .for_each(|v| *v = (*v / hi).clamp(0.0, 1.0));
    Ok(img)
}

const GLYPH_ROWS: usize = 7;
const GLYPH_COLS: usize = 5;

fn glyph(ch: char) -> Option<[u8; GLYPH_ROWS]> {
    // One byte per row, low five bits, most significant bit = leftmost column.
    Some(match ch {
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        ' ' => [0; GLYPH_ROWS],
        _ => return None,
    })
}

/// Stamp `text` (characters from `CDEOTX `) centred on the image at a fixed
/// intensity. Returns the modified image and the glyph mask.
pub fn overlay_text(base: &Image, text: &str, intensity: f64) -> Result<(Image, Vec<bool>)> {
    let n = base.size();
    let glyphs = text
        .chars()
        .map(|c| glyph(c).ok_or_else(|| Error::Config(format!("no glyph for {c:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let cells = glyphs.len() * (GLYPH_COLS + 1) - 1;
    let scale = (n / 2 / cells.max(1)).max(1);
    let (width, height) = (cells * scale, GLYPH_ROWS * scale);
    if width > n || height > n {
        return Err(Error::Config(format!("text {text:?} does not fit a {n}-pixel image")));
    }
    let (top, left) = ((n - height) / 2, (n - width) / 2);
    let mut img = base.clone();
    let mut mask = vec![false; n * n];
    for (gi, g) in glyphs.iter().enumerate() {
        for (gr, bits) in g.iter().enumerate() {
            for gc in 0..GLYPH_COLS {
                if bits >> (GLYPH_COLS - 1 - gc) & 1 == 0 {
                    continue;
                }
                for dr in 0..scale {
                    for dc in 0..scale {
                        let r = top + gr * scale + dr;
                        let c = left + (gi * (GLYPH_COLS + 1) + gc) * scale + dc;
                        img.set(r, c, intensity);
                        mask[r * n + c] = true;
                    }
                }
            }
        }
    }
    Ok((img, mask))
}
