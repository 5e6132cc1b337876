//! Binary PPM (P6, maxval 255) codec for planar `3×H×W` images in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A decoded image: planar RGB, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

pub fn to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode(width: usize, height: usize, planar: &[f32]) -> Result<Vec<u8>> {
    let plane = width * height;
    if planar.len() != 3 * plane {
        return Err(Error::Shape(format!("{} values for a 3×{height}×{width} image", planar.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(to_byte(planar[c * plane + i]));
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |reason: &str| Error::Image { path: path.to_path_buf(), reason: reason.to_string() };
    let mut pos = 0;
    let mut fields = [0usize; 3];
    if bytes.get(..2) != Some(b"P6") {
        return Err(bad("not a binary PPM (P6)"));
    }
    pos += 2;
    for field in &mut fields {
        // whitespace and `#` comments may separate header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("malformed header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only 8-bit PPM (maxval 255) is supported"));
    }
    if width == 0 || height == 0 {
        return Err(bad("empty image"));
    }
    let plane = width * height;
    let body = &bytes[pos..];
    if body.len() != 3 * plane {
        return Err(bad(&format!("expected {} pixel bytes, found {}", 3 * plane, body.len())));
    }
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in body.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(Image { width, height, data })
}

pub fn write_image(path: &Path, width: usize, height: usize, planar: &[f32]) -> Result<()> {
    fs::write(path, encode(width, height, planar)?).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Read and require the given dimensions.
pub fn read_image_sized(path: &Path, width: usize, height: usize) -> Result<Image> {
    let img = read_image(path)?;
    if (img.width, img.height) != (width, height) {
        return Err(Error::Image {
            path: path.to_path_buf(),
            reason: format!("{}×{} image, expected {width}×{height}", img.width, img.height),
        });
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem.ppm")
    }

    #[test]
    fn zeros_round_trip() {
        let bytes = encode(4, 2, &[0.0; 24]).unwrap();
        assert_eq!(&bytes[..11], b"P6\n4 2\n255\n");
        assert_eq!(decode(&bytes, p()).unwrap().data, vec![0.0; 24]);
    }

    #[test]
    fn half_maps_to_128() {
        assert_eq!(to_byte(0.5), 128);
        let img = decode(&encode(1, 1, &[0.5, 0.5, 0.5]).unwrap(), p()).unwrap();
        assert_eq!(img.data, vec![128.0 / 255.0; 3]);
        assert_eq!(to_byte(-0.2), 0);
        assert_eq!(to_byte(1.7), 255);
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P6 # made by hand\n1 1\n# depth\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 51]);
        assert_eq!(decode(&bytes, p()).unwrap().data, vec![1.0, 0.0, 0.2]);
    }

    #[test]
    fn malformed_headers() {
        for bytes in [&b"P3\n1 1\n255\n\0\0\0"[..], b"P6\n1 x\n255\n\0\0\0", b"P6\n1 1\n65535\n\0\0\0\0\0\0", b"P6\n1 1\n255\n\0\0"] {
            assert!(matches!(decode(bytes, p()), Err(Error::Image { .. })));
        }
    }
}
