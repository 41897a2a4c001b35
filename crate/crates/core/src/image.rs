//! RGB float images plus binary PPM (P6, 8-bit) and PFM (little-endian
//! float) codecs.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed {kind} file: {msg}")]
    Format { kind: &'static str, msg: String },
    #[error("image size mismatch: {0}")]
    Size(String),
}

/// Row-major, interleaved RGB image of `f64` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self, ImageError> {
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(ImageError::Size(format!(
                "{width}x{height} RGB needs {expected} samples, got {}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize * 3],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// 8-bit quantization `floor(255 v + 0.5)`, clamped to `[0, 255]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_u8(width: u32, height: u32, bytes: &[u8]) -> Result<Self, ImageError> {
        Self::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn from_f32(width: u32, height: u32, samples: &[f32]) -> Result<Self, ImageError> {
        Self::new(width, height, samples.iter().map(|&v| v as f64).collect())
    }

    /// Rectangular crop.
    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> Image {
        let mut data = Vec::with_capacity(w as usize * h as usize * 3);
        for y in y0..y0 + h {
            let start = 3 * (y as usize * self.width as usize + x0 as usize);
            data.extend_from_slice(&self.data[start..start + 3 * w as usize]);
        }
        Image {
            width: w,
            height: h,
            data,
        }
    }
}

pub fn quantize(v: f64) -> u8 {
    (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn header_token<R: BufRead>(r: &mut R, kind: &'static str) -> Result<String, ImageError> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            break;
        }
        let c = b[0];
        if c == b'#' && tok.is_empty() {
            let mut line = Vec::new();
            r.read_until(b'\n', &mut line)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c);
    }
    if tok.is_empty() {
        return Err(ImageError::Format {
            kind,
            msg: "truncated header".into(),
        });
    }
    String::from_utf8(tok).map_err(|_| ImageError::Format {
        kind,
        msg: "non-ASCII header".into(),
    })
}

fn parse<T: std::str::FromStr>(s: &str, kind: &'static str, what: &str) -> Result<T, ImageError> {
    s.parse().map_err(|_| ImageError::Format {
        kind,
        msg: format!("bad {what}: {s:?}"),
    })
}

pub fn write_ppm<W: Write>(mut w: W, width: u32, height: u32, rgb: &[u8]) -> Result<(), ImageError> {
    if rgb.len() != width as usize * height as usize * 3 {
        return Err(ImageError::Size(format!("{} bytes for {width}x{height}", rgb.len())));
    }
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(rgb)?;
    Ok(())
}

pub fn read_ppm<R: Read>(r: R) -> Result<(u32, u32, Vec<u8>), ImageError> {
    let mut r = BufReader::new(r);
    let magic = header_token(&mut r, "PPM")?;
    if magic != "P6" {
        return Err(ImageError::Format {
            kind: "PPM",
            msg: format!("unsupported magic {magic:?}"),
        });
    }
    let width: u32 = parse(&header_token(&mut r, "PPM")?, "PPM", "width")?;
    let height: u32 = parse(&header_token(&mut r, "PPM")?, "PPM", "height")?;
    let maxval: u32 = parse(&header_token(&mut r, "PPM")?, "PPM", "maxval")?;
    if maxval != 255 {
        return Err(ImageError::Format {
            kind: "PPM",
            msg: format!("only maxval 255 is supported, got {maxval}"),
        });
    }
    let mut data = vec![0u8; width as usize * height as usize * 3];
    r.read_exact(&mut data)?;
    Ok((width, height, data))
}

/// Color PFM with a negative scale (little-endian), scanlines bottom to top.
pub fn write_pfm<W: Write>(mut w: W, width: u32, height: u32, rgb: &[f32]) -> Result<(), ImageError> {
    let row = width as usize * 3;
    if rgb.len() != row * height as usize {
        return Err(ImageError::Size(format!("{} samples for {width}x{height}", rgb.len())));
    }
    write!(w, "PF\n{width} {height}\n-1.0\n")?;
    for y in (0..height as usize).rev() {
        for v in &rgb[y * row..(y + 1) * row] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_pfm<R: Read>(r: R) -> Result<(u32, u32, Vec<f32>), ImageError> {
    let mut r = BufReader::new(r);
    let magic = header_token(&mut r, "PFM")?;
    if magic != "PF" {
        return Err(ImageError::Format {
            kind: "PFM",
            msg: format!("only color PFM (PF) is supported, got {magic:?}"),
        });
    }
    let width: u32 = parse(&header_token(&mut r, "PFM")?, "PFM", "width")?;
    let height: u32 = parse(&header_token(&mut r, "PFM")?, "PFM", "height")?;
    let scale: f32 = parse(&header_token(&mut r, "PFM")?, "PFM", "scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(ImageError::Format {
            kind: "PFM",
            msg: format!("bad scale {scale}"),
        });
    }
    let little = scale < 0.0;
    let row = width as usize * 3;
    let mut bytes = vec![0u8; row * height as usize * 4];
    r.read_exact(&mut bytes)?;
    let mut out = vec![0f32; row * height as usize];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        // File row i / row is image row height - 1 - i / row.
        let (fy, x) = (i / row, i % row);
        out[(height as usize - 1 - fy) * row + x] = v;
    }
    Ok((width, height, out))
}

pub fn save_ppm(path: &Path, img: &Image) -> Result<(), ImageError> {
    let mut f = BufWriter::new(File::create(path)?);
    write_ppm(&mut f, img.width, img.height, &img.to_u8())?;
    f.flush()?;
    Ok(())
}

pub fn load_ppm(path: &Path) -> Result<Image, ImageError> {
    let (w, h, d) = read_ppm(File::open(path)?)?;
    Image::from_u8(w, h, &d)
}

pub fn save_pfm(path: &Path, img: &Image) -> Result<(), ImageError> {
    let mut f = BufWriter::new(File::create(path)?);
    write_pfm(&mut f, img.width, img.height, &img.to_f32())?;
    f.flush()?;
    Ok(())
}

pub fn load_pfm(path: &Path) -> Result<Image, ImageError> {
    let (w, h, d) = read_pfm(File::open(path)?)?;
    Image::from_f32(w, h, &d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.49 / 255.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(-0.2), 0);
    }

    #[test]
    fn ppm_header_layout() {
        let mut buf = Vec::new();
        write_ppm(&mut buf, 2, 1, &[1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(&buf[..11], b"P6\n2 1\n255\n");
        assert_eq!(&buf[11..], &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn pfm_is_bottom_up_little_endian() {
        let mut buf = Vec::new();
        let top = [1.0f32, 2.0, 3.0];
        let bottom = [4.0f32, 5.0, 6.0];
        let data: Vec<f32> = top.iter().chain(&bottom).copied().collect();
        write_pfm(&mut buf, 1, 2, &data).unwrap();
        let header = b"PF\n1 2\n-1.0\n";
        assert_eq!(&buf[..header.len()], header);
        assert_eq!(&buf[header.len()..header.len() + 4], &4.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_malformed_headers() {
        assert!(read_ppm(&b"P3\n1 1\n255\n"[..]).is_err());
        assert!(read_ppm(&b"P6\n1 1\n65535\n"[..]).is_err());
        assert!(read_ppm(&b"P6\n2 2\n255\n\x00"[..]).is_err());
        assert!(read_pfm(&b"Pf\n1 1\n-1.0\n"[..]).is_err());
    }

    #[test]
    fn ppm_comments_are_skipped() {
        let (w, h, d) = read_ppm(&b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03"[..]).unwrap();
        assert_eq!((w, h, d), (1, 1, vec![1, 2, 3]));
    }

    proptest! {
        #[test]
        fn ppm_round_trip(w in 1u32..6, h in 1u32..6, seed in any::<u64>()) {
            let n = (w * h * 3) as usize;
            let data: Vec<u8> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
            let mut buf = Vec::new();
            write_ppm(&mut buf, w, h, &data).unwrap();
            prop_assert_eq!(read_ppm(&buf[..]).unwrap(), (w, h, data));
        }

        #[test]
        fn pfm_round_trip(w in 1u32..6, h in 1u32..6, vals in proptest::collection::vec(-1e6f32..1e6, 108)) {
            let n = (w * h * 3) as usize;
            let data = vals[..n].to_vec();
            let mut buf = Vec::new();
            write_pfm(&mut buf, w, h, &data).unwrap();
            let (w2, h2, back) = read_pfm(&buf[..]).unwrap();
            prop_assert_eq!((w2, h2), (w, h));
            prop_assert!(back.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
