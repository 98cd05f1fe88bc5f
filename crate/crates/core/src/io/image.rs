use std::path::Path;

use super::{read_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How many values [`write_map`] or [`write_image`] had to clamp into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClampStatus {
    pub clamped: usize,
}

impl ClampStatus {
    pub fn is_clean(&self) -> bool {
        self.clamped == 0
    }
}

fn format_error(message: impl Into<String>, bytes: &[u8]) -> Error {
    Error::Format {
        message: message.into(),
        header: bytes[..bytes.len().min(16)].to_vec(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_error(format!("missing or invalid {what}"), self.bytes))
    }
}

/// Parses binary PGM (P5) or PPM (P6) with 8-bit samples into values `v / maxval`.
///
/// `maxval` is normally 255, giving `v / 255`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(format_error("not a binary PGM (P5) or PPM (P6) file", bytes)),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format_error(format!("empty image {width}x{height}"), bytes));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format_error(format!("maxval {maxval} is not 8-bit"), bytes));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_error("header not terminated by whitespace", bytes));
    }
    let raster = &bytes[cur.pos + 1..];
    let n = width * height * channels;
    if raster.len() < n {
        return Err(Error::LengthMismatch {
            expected: n as u64,
            found: raster.len() as u64,
        });
    }
    let scale = maxval as f64;
    let plane = width * height;
    let mut data = vec![0.0; n];
    // interleaved RGB to planar
    for (i, &b) in raster[..n].iter().enumerate() {
        let (pixel, c) = (i / channels, i % channels);
        data[c * plane + pixel] = b as f64 / scale;
    }
    Tensor::new(channels, height, width, data)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_pnm(&read_bytes(path)?).map_err(|e| match e {
        Error::Format { message, header } => Error::Format {
            message: format!("{}: {message}", path.display()),
            header,
        },
        other => other,
    })
}

fn quantize(v: f64, status: &mut ClampStatus) -> u8 {
    let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    if c != v {
        status.clamped += 1;
    }
    // round half up
    (255.0 * c + 0.5).floor() as u8
}

/// Encodes a 1-channel tensor as P5 or a 3-channel tensor as P6 at `round(255 v)`.
pub fn encode_pnm(img: &Tensor) -> Result<(Vec<u8>, ClampStatus)> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Shape(format!("cannot store {c} channels as PGM/PPM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    let mut status = ClampStatus::default();
    let plane = img.plane_len();
    let c = img.channels();
    out.reserve(img.len());
    for p in 0..plane {
        for ch in 0..c {
            out.push(quantize(img.data()[ch * plane + p], &mut status));
        }
    }
    Ok((out, status))
}

pub fn write_image(img: &Tensor, path: impl AsRef<Path>) -> Result<ClampStatus> {
    let (bytes, status) = encode_pnm(img)?;
    write_bytes(path.as_ref(), &bytes)?;
    Ok(status)
}

/// PGM preview of a single-channel map; out-of-range values are clamped and counted.
pub fn write_map(map: &Tensor, path: impl AsRef<Path>) -> Result<ClampStatus> {
    if map.channels() != 1 {
        return Err(Error::Shape(format!("map has {} channels", map.channels())));
    }
    write_image(map, path)
}

/// Loss-free map dump: height and width as u32 LE, then row-major f64 LE values.
pub fn write_raw_map(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    if map.channels() != 1 {
        return Err(Error::Shape(format!("map has {} channels", map.channels())));
    }
    let mut out = Vec::with_capacity(8 + 8 * map.len());
    for d in [map.height(), map.width()] {
        let d = u32::try_from(d).map_err(|_| Error::Dimension(format!("map dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path.as_ref(), &out)
}

pub fn read_raw_map(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = read_bytes(path.as_ref())?;
    if bytes.len() < 8 {
        return Err(Error::LengthMismatch {
            expected: 8,
            found: bytes.len() as u64,
        });
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + 8 * (h as u64) * (w as u64);
    if bytes.len() as u64 != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: bytes.len() as u64,
        });
    }
    let data = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(1, h, w, data)
}

/// Reads a target map: PGM for `.pgm` files, the raw format otherwise.
pub fn read_map(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let is_pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let map = if is_pgm { read_image(path)? } else { read_raw_map(path)? };
    if map.channels() != 1 {
        return Err(Error::Shape(format!("{}: target map must be grayscale", path.display())));
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_scaling() {
        let img = decode_pnm(b"P5\n2 2\n255\n\x00\x55\xaa\xff").unwrap();
        assert_eq!(img.shape(), (1, 2, 2));
        assert_eq!(img.data(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn p6_is_rgb_planar() {
        let img = decode_pnm(b"P6 2 1 255 \xff\x00\x33\x00\xff\x66").unwrap();
        assert_eq!(img.shape(), (3, 1, 2));
        assert_eq!(img.channel(0), &[1.0, 0.0]);
        assert_eq!(img.channel(1), &[0.0, 1.0]);
        assert_eq!(img.channel(2), &[0.2, 0.4]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_pnm(b"P5\n# made by hand\n1 # width\n1\n255\n\x80").unwrap();
        assert_eq!(img.data(), &[128.0 / 255.0]);
    }

    #[test]
    fn bad_magic_reports_header() {
        match decode_pnm(b"P2\n1 1\n255\n0") {
            Err(Error::Format { header, .. }) => assert_eq!(&header[..2], b"P2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn short_raster_is_length_mismatch() {
        assert!(matches!(
            decode_pnm(b"P5 2 2 255\n\x00\x01"),
            Err(Error::LengthMismatch { expected: 4, found: 2 })
        ));
    }

    #[test]
    fn quantization_levels() {
        let (bytes, status) = encode_pnm(&Tensor::filled(1, 1, 3, 0.5)).unwrap();
        assert!(status.is_clean());
        assert_eq!(&bytes[bytes.len() - 3..], &[128, 128, 128]);
        let t = Tensor::from_rows(&[&[0.1, 0.9, 1.5, -0.2]]).unwrap();
        let (bytes, status) = encode_pnm(&t).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[26, 230, 255, 0]);
        assert_eq!(status.clamped, 2);
    }

    #[test]
    fn pnm_round_trip_within_quantization() {
        let t = Tensor::from_fn(3, 4, 5, |c, y, x| ((c * 31 + y * 7 + x * 3) % 17) as f64 / 16.0);
        let (bytes, _) = encode_pnm(&t).unwrap();
        let back = decode_pnm(&bytes).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn raw_map_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.raw");
        let t = Tensor::from_fn(1, 3, 5, |_, y, x| (y as f64 * 0.1 + x as f64).sin() / 3.0);
        write_raw_map(&t, &p).unwrap();
        let back = read_raw_map(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_raw_map(&p), Err(Error::LengthMismatch { .. })));
    }
}
