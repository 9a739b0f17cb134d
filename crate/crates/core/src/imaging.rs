//! Focusing of echoes into an azimuth x slant-range grid, speckle,
//! normalization, and 16-bit PGM I/O.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raytracer::EchoSample;

pub const MIN_PIXELS: usize = 8;
pub const DEFAULT_PIXELS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub n_azimuth: usize,
    pub n_range: usize,
    pub azimuth_extent: (f64, f64),
    pub range_extent: (f64, f64),
}

impl ImageGrid {
    pub fn new(n_azimuth: usize, n_range: usize, azimuth_extent: (f64, f64), range_extent: (f64, f64)) -> Result<Self> {
        let g = ImageGrid {
            n_azimuth,
            n_range,
            azimuth_extent,
            range_extent,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_azimuth < MIN_PIXELS || self.n_range < MIN_PIXELS {
            return Err(Error::validation(format!(
                "image grid must be at least {MIN_PIXELS}x{MIN_PIXELS}, got {}x{}",
                self.n_azimuth, self.n_range
            )));
        }
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo < hi;
        if !ordered(self.azimuth_extent) || !ordered(self.range_extent) {
            return Err(Error::validation("image extents must be finite and strictly ordered"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_azimuth * self.n_range
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Nearest-bin index (azimuth-major) of `(a, r)`, or `None` outside the
    /// half-open extents.
    pub fn bin(&self, a: f64, r: f64) -> Option<usize> {
        let (a0, a1) = self.azimuth_extent;
        let (r0, r1) = self.range_extent;
        if !(a >= a0 && a < a1 && r >= r0 && r < r1) {
            return None;
        }
        let ia = (((a - a0) / (a1 - a0)) * self.n_azimuth as f64) as usize;
        let ir = (((r - r0) / (r1 - r0)) * self.n_range as f64) as usize;
        Some(ia.min(self.n_azimuth - 1) * self.n_range + ir.min(self.n_range - 1))
    }

    /// Center coordinates of pixel `(ia, ir)`.
    pub fn center(&self, ia: usize, ir: usize) -> (f64, f64) {
        let (a0, a1) = self.azimuth_extent;
        let (r0, r1) = self.range_extent;
        (
            a0 + (ia as f64 + 0.5) * (a1 - a0) / self.n_azimuth as f64,
            r0 + (ir as f64 + 0.5) * (r1 - r0) / self.n_range as f64,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SarImage {
    pub grid: ImageGrid,
    /// Row-major, azimuth-major: `pixels[ia * n_range + ir]`.
    pub pixels: Vec<f64>,
    pub normalized: bool,
}

impl SarImage {
    pub fn zeros(grid: ImageGrid) -> Self {
        SarImage {
            grid,
            pixels: vec![0.0; grid.len()],
            normalized: false,
        }
    }

    pub fn get(&self, ia: usize, ir: usize) -> f64 {
        self.pixels[ia * self.grid.n_range + ir]
    }

    pub fn total(&self) -> f64 {
        self.pixels.iter().sum()
    }
}

/// Echoes that fell outside the grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DropStats {
    pub dropped: usize,
    pub dropped_intensity: f64,
}

/// Deposits each echo's intensity into its nearest bin.
pub fn focus(echoes: &[EchoSample], grid: &ImageGrid) -> (SarImage, DropStats) {
    let mut image = SarImage::zeros(*grid);
    let mut stats = DropStats::default();
    for e in echoes {
        match grid.bin(e.a, e.r) {
            Some(b) => image.pixels[b] += e.intensity,
            None => {
                stats.dropped += 1;
                stats.dropped_intensity += e.intensity;
            }
        }
    }
    (image, stats)
}

/// Mixes a run seed and an azimuth into a per-image speckle seed.
pub fn speckle_seed(run_seed: u64, azimuth_deg: f64) -> u64 {
    let mut z = run_seed ^ azimuth_deg.to_bits().rotate_left(17) ^ 0x5EED_5EED_5EED_5EED;
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Unit-mean exponential multipliers, one per pixel in storage order.
pub fn speckle_field(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Exp1.sample(&mut rng)).collect()
}

pub fn add_speckle(image: &SarImage, seed: u64, enabled: bool) -> SarImage {
    if !enabled {
        return image.clone();
    }
    let field = speckle_field(image.pixels.len(), seed);
    apply_speckle(image, &field)
}

pub(crate) fn apply_speckle(image: &SarImage, field: &[f64]) -> SarImage {
    SarImage {
        grid: image.grid,
        pixels: image.pixels.iter().zip(field).map(|(p, s)| p * s).collect(),
        normalized: image.normalized,
    }
}

/// Maps pixels by `min(p, cap) / cap` into `[0, 1]`.
pub fn normalize(image: &SarImage, scale_cap: f64) -> Result<SarImage> {
    if !(scale_cap > 0.0 && scale_cap.is_finite()) {
        return Err(Error::config(format!("scale_cap must be positive, got {scale_cap}")));
    }
    Ok(SarImage {
        grid: image.grid,
        pixels: image.pixels.iter().map(|&p| p.min(scale_cap) / scale_cap).collect(),
        normalized: true,
    })
}

/// Writes a normalized image as a binary 16-bit PGM (`P5`, maxval 65535).
/// Rows are azimuth lines; the width is the range dimension.
pub fn write_image(image: &SarImage, path: &Path) -> Result<()> {
    let bytes = encode_pgm(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_pgm(image: &SarImage) -> Result<Vec<u8>> {
    if !image.normalized {
        return Err(Error::validation("only normalized images can be written"));
    }
    let g = image.grid;
    let mut out = Vec::with_capacity(32 + 2 * g.len());
    write!(out, "P5\n{} {}\n65535\n", g.n_range, g.n_azimuth).expect("write to Vec");
    for &p in &image.pixels {
        let q = (p.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

/// Reads a 16-bit PGM. The physical extents are not stored in the file, so
/// the returned grid uses unit pixel spacing from zero.
pub fn read_image(path: &Path) -> Result<SarImage> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(BufReader::new(file)).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

pub fn decode_pgm<R: BufRead>(mut reader: R) -> Result<SarImage> {
    let mut header = Vec::new();
    let mut fields: Vec<String> = Vec::new();
    // Header: magic, width, height, maxval separated by whitespace, comments allowed.
    while fields.len() < 4 {
        let mut byte = [0u8];
        let n = reader.read(&mut byte).map_err(|e| Error::parse("pgm", e))?;
        if n == 0 {
            return Err(Error::parse("pgm", "truncated header"));
        }
        let c = byte[0];
        if c == b'#' && header.is_empty() {
            let mut comment = Vec::new();
            reader
                .read_until(b'\n', &mut comment)
                .map_err(|e| Error::parse("pgm", e))?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if !header.is_empty() {
                fields.push(String::from_utf8_lossy(&header).into_owned());
                header.clear();
            }
        } else {
            header.push(c);
        }
    }
    if fields[0] != "P5" {
        return Err(Error::parse("pgm", format!("unsupported magic {:?}", fields[0])));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| Error::parse("pgm", format!("bad {what} {s:?}")))
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 65535 {
        return Err(Error::parse("pgm", format!("expected maxval 65535, got {maxval}")));
    }
    let mut raw = vec![0u8; 2 * width * height];
    reader
        .read_exact(&mut raw)
        .map_err(|_| Error::parse("pgm", "truncated pixel data"))?;
    let pixels = raw
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
        .collect();
    let grid = ImageGrid {
        n_azimuth: height,
        n_range: width,
        azimuth_extent: (0.0, height as f64),
        range_extent: (0.0, width as f64),
    };
    Ok(SarImage {
        grid,
        pixels,
        normalized: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid8() -> ImageGrid {
        ImageGrid::new(8, 8, (0.0, 8.0), (10.0, 18.0)).unwrap()
    }

    fn echo(a: f64, r: f64, intensity: f64) -> EchoSample {
        EchoSample {
            a,
            r,
            intensity,
            bounce_count: 1,
        }
    }

    #[test]
    fn single_and_shared_deposits() {
        let g = grid8();
        let (img, stats) = focus(&[echo(2.5, 13.5, 0.7)], &g);
        assert!((img.get(2, 3) - 0.7).abs() <= 1e-9);
        assert!((img.total() - 0.7).abs() <= 1e-9);
        assert_eq!(stats.dropped, 0);

        let (img, _) = focus(&[echo(2.5, 13.5, 0.3), echo(2.5, 13.5, 0.4)], &g);
        assert!((img.get(2, 3) - 0.7).abs() <= 1e-9);
    }

    #[test]
    fn out_of_extent_echo_is_dropped() {
        let (img, stats) = focus(&[echo(2.5, 30.0, 1.0)], &grid8());
        assert!(img.pixels.iter().all(|&p| p == 0.0));
        assert_eq!(stats.dropped, 1);
        assert_eq!(stats.dropped_intensity, 1.0);
    }

    #[test]
    fn small_grid_rejected() {
        assert!(ImageGrid::new(4, 8, (0.0, 1.0), (0.0, 1.0)).is_err());
        assert!(ImageGrid::new(8, 8, (1.0, 1.0), (0.0, 1.0)).is_err());
    }

    #[test]
    fn speckle_identity_and_determinism() {
        let mut img = SarImage::zeros(grid8());
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = i as f64 * 0.1;
        }
        assert_eq!(add_speckle(&img, 5, false), img);
        assert_eq!(add_speckle(&img, 5, true), add_speckle(&img, 5, true));
        assert_ne!(add_speckle(&img, 5, true), add_speckle(&img, 6, true));
    }

    #[test]
    fn speckle_has_unit_mean() {
        // Law of large numbers over 2^20 multipliers; std of the mean is ~1e-3.
        let field = speckle_field(1 << 20, 42);
        let mean = field.iter().sum::<f64>() / field.len() as f64;
        assert!((mean - 1.0).abs() <= 0.01, "mean {mean}");
        assert!(field.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn normalize_cases() {
        let mut img = SarImage::zeros(grid8());
        assert!(normalize(&img, 2.0).unwrap().pixels.iter().all(|&p| p == 0.0));
        img.pixels[0] = 2.0;
        img.pixels[1] = 4.0;
        let n = normalize(&img, 2.0).unwrap();
        assert_eq!(n.pixels[0], 1.0);
        assert_eq!(n.pixels[1], 1.0);
        assert!(normalize(&img, 0.0).is_err());
        assert!(normalize(&img, -1.0).is_err());
    }

    #[test]
    fn pgm_zero_image_layout() {
        let img = normalize(&SarImage::zeros(grid8()), 1.0).unwrap();
        let bytes = encode_pgm(&img).unwrap();
        let header = b"P5\n8 8\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len() - header.len(), 128);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn pgm_default_header() {
        let g = ImageGrid::new(128, 128, (-1.0, 1.0), (0.0, 2.0)).unwrap();
        let img = normalize(&SarImage::zeros(g), 1.0).unwrap();
        assert!(encode_pgm(&img).unwrap().starts_with(b"P5\n128 128\n65535\n"));
    }

    #[test]
    fn pgm_rejects_bad_input() {
        assert!(decode_pgm(&b"P2\n8 8\n65535\n"[..]).is_err());
        assert!(decode_pgm(&b"P5\n8 8\n65535\n\x00\x01"[..]).is_err());
        assert!(decode_pgm(&b"P5\n8 8\n255\n"[..]).is_err());
        let raw = SarImage::zeros(grid8());
        assert!(encode_pgm(&raw).is_err());
    }
}
