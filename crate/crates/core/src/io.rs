//! Binary netpbm (PGM/PPM) and PFM readers and writers.
//!
//! Conventions:
//! - depth: binary PGM `P5`, maxval <= 65535, 16-bit samples big-endian,
//!   raw integer units preserved (rescaling is a CLI concern);
//! - guides: binary PPM `P6`, values divided by maxval into `[0, 1]`;
//! - float depth: PFM `Pf`/`PF`, sign of the scale line encodes endianness,
//!   rows stored bottom-to-top per the de-facto convention;
//! - masks: one-byte PGM `P5` with maxval 255, 0 = invalid.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::image::{GuideImage, SourceImage, TargetImage};
use crate::{Error, Result};

/// Reads header tokens, skipping whitespace and `#` comments.
struct Tokens<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn next(&mut self) -> Result<&'a str> {
        loop {
            while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.buf.len() && self.buf[self.pos] == b'#' {
                while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.buf.len() && !self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::MalformedHeader("unexpected end of header".into()));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .map_err(|_| Error::MalformedHeader("non-ascii header token".into()))
    }

    fn next_usize(&mut self) -> Result<usize> {
        let t = self.next()?;
        t.parse()
            .map_err(|_| Error::MalformedHeader(format!("expected integer, got '{t}'")))
    }

    /// Consume exactly one whitespace byte separating header from payload.
    fn payload(mut self) -> Result<&'a [u8]> {
        if self.pos >= self.buf.len() || !self.buf[self.pos].is_ascii_whitespace() {
            return Err(Error::MalformedHeader("missing separator before payload".into()));
        }
        self.pos += 1;
        Ok(&self.buf[self.pos..])
    }
}

fn check_len(payload: &[u8], expected: usize) -> Result<()> {
    if payload.len() < expected {
        return Err(Error::TruncatedPayload { expected, got: payload.len() });
    }
    Ok(())
}

/// Raw PGM payload: dimensions, maxval and integer samples.
pub struct Pgm {
    pub height: usize,
    pub width: usize,
    pub maxval: u32,
    pub samples: Vec<u16>,
}

pub fn load_pgm(path: &Path) -> Result<Pgm> {
    let buf = fs::read(path)?;
    let mut tk = Tokens::new(&buf);
    let magic = tk.next()?;
    if magic != "P5" {
        return Err(Error::MalformedHeader(format!("expected P5, got '{magic}'")));
    }
    let width = tk.next_usize()?;
    let height = tk.next_usize()?;
    let maxval = tk.next_usize()? as u32;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    let payload = tk.payload()?;
    let n = width * height;
    let samples = if maxval < 256 {
        check_len(payload, n)?;
        payload[..n].iter().map(|&b| b as u16).collect()
    } else {
        check_len(payload, 2 * n)?;
        payload[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    Ok(Pgm { height, width, maxval, samples })
}

pub fn save_pgm(path: &Path, height: usize, width: usize, maxval: u32, samples: &[u16]) -> Result<()> {
    if maxval == 0 || maxval > 65535 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    if samples.len() != height * width {
        return Err(Error::DimensionMismatch("pgm sample count".into()));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n{maxval}\n")?;
    if maxval < 256 {
        let bytes: Vec<u8> = samples.iter().map(|&s| s as u8).collect();
        f.write_all(&bytes)?;
    } else {
        let mut bytes = Vec::with_capacity(2 * samples.len());
        for &s in samples {
            bytes.extend_from_slice(&s.to_be_bytes());
        }
        f.write_all(&bytes)?;
    }
    Ok(())
}

/// Load a 16-bit (or 8-bit) PGM as depth, raw units preserved, all pixels valid.
pub fn load_depth_pgm(path: &Path) -> Result<SourceImage> {
    let pgm = load_pgm(path)?;
    let data = pgm.samples.iter().map(|&s| s as f64).collect();
    SourceImage::all_valid(pgm.height, pgm.width, data)
}

/// Save depth as 16-bit PGM; values are rounded and clamped to `[0, maxval]`.
pub fn save_depth_pgm(path: &Path, height: usize, width: usize, data: &[f64], maxval: u32) -> Result<()> {
    let samples: Vec<u16> = data
        .iter()
        .map(|&v| v.round().clamp(0.0, maxval as f64) as u16)
        .collect();
    save_pgm(path, height, width, maxval, &samples)
}

/// Validity mask as one-byte PGM, 0 = invalid.
pub fn load_mask_pgm(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let pgm = load_pgm(path)?;
    let mask = pgm.samples.iter().map(|&s| s != 0).collect();
    Ok((pgm.height, pgm.width, mask))
}

pub fn save_mask_pgm(path: &Path, height: usize, width: usize, mask: &[bool]) -> Result<()> {
    let samples: Vec<u16> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    save_pgm(path, height, width, 255, &samples)
}

/// Load a binary PPM (P6) guide; samples are divided by maxval.
pub fn load_guide_ppm(path: &Path) -> Result<GuideImage> {
    let buf = fs::read(path)?;
    let mut tk = Tokens::new(&buf);
    let magic = tk.next()?;
    if magic != "P6" {
        return Err(Error::MalformedHeader(format!("expected P6, got '{magic}'")));
    }
    let width = tk.next_usize()?;
    let height = tk.next_usize()?;
    let maxval = tk.next_usize()? as u32;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    let payload = tk.payload()?;
    let n = width * height;
    let scale = 1.0 / maxval as f64;
    // interleaved RGB in the file, planar in memory
    let mut data = vec![0.0; 3 * n];
    if maxval < 256 {
        check_len(payload, 3 * n)?;
        for p in 0..n {
            for c in 0..3 {
                data[c * n + p] = payload[3 * p + c] as f64 * scale;
            }
        }
    } else {
        check_len(payload, 6 * n)?;
        for p in 0..n {
            for c in 0..3 {
                let o = 2 * (3 * p + c);
                data[c * n + p] = u16::from_be_bytes([payload[o], payload[o + 1]]) as f64 * scale;
            }
        }
    }
    GuideImage::new(height, width, 3, data)
}

pub fn save_guide_ppm(path: &Path, g: &GuideImage) -> Result<()> {
    if g.channels != 3 {
        return Err(Error::DimensionMismatch("ppm requires 3 channels".into()));
    }
    let n = g.height * g.width;
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", g.width, g.height)?;
    let mut bytes = Vec::with_capacity(3 * n);
    for p in 0..n {
        for c in 0..3 {
            bytes.push((g.data[c * n + p] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    f.write_all(&bytes)?;
    Ok(())
}

/// Load a PFM (`Pf` grayscale or `PF` colour). Returns planar channels.
pub fn load_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let buf = fs::read(path)?;
    let mut tk = Tokens::new(&buf);
    let magic = tk.next()?;
    let channels = match magic {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::MalformedHeader(format!("expected Pf/PF, got '{other}'"))),
    };
    let width = tk.next_usize()?;
    let height = tk.next_usize()?;
    let scale: f64 = tk
        .next()?
        .parse()
        .map_err(|_| Error::MalformedHeader("bad scale line".into()))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::MalformedHeader("scale must be nonzero".into()));
    }
    let little_endian = scale < 0.0;
    let payload = tk.payload()?;
    let n = width * height;
    check_len(payload, 4 * n * channels)?;

    let mut data = vec![0.0f64; n * channels];
    // PFM rows run bottom-to-top
    for row in 0..height {
        let i = height - 1 - row; // destination row
        for col in 0..width {
            for c in 0..channels {
                let o = 4 * ((row * width + col) * channels + c);
                let b = [payload[o], payload[o + 1], payload[o + 2], payload[o + 3]];
                let v = if little_endian {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                data[c * n + i * width + col] = v as f64;
            }
        }
    }
    Ok((height, width, channels, data))
}

/// Save a grayscale PFM (`Pf`), little-endian, bottom-to-top rows.
pub fn save_pfm(path: &Path, height: usize, width: usize, data: &[f64]) -> Result<()> {
    if data.len() != height * width {
        return Err(Error::DimensionMismatch("pfm sample count".into()));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "Pf\n{width} {height}\n-1.0\n")?;
    let mut bytes = Vec::with_capacity(4 * data.len());
    for row in (0..height).rev() {
        for col in 0..width {
            bytes.extend_from_slice(&(data[row * width + col] as f32).to_le_bytes());
        }
    }
    f.write_all(&bytes)?;
    Ok(())
}

/// Load a PFM depth map as a high-resolution target, all pixels valid.
pub fn load_depth_pfm(path: &Path) -> Result<TargetImage> {
    let (h, w, c, data) = load_pfm(path)?;
    if c != 1 {
        return Err(Error::MalformedHeader("depth pfm must be grayscale".into()));
    }
    TargetImage::all_valid(h, w, data)
}
