//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};

pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    encode("P6", width, height, rgb)
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    encode("P5", width, height, gray)
}

fn encode(magic: &str, width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Raster> {
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(bad(&format!("unsupported magic {other:?}"))),
    };
    let num = |s: String| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let len = width * height * channels;
    if bytes.len() != start + len {
        return Err(bad(&format!(
            "expected {} raster bytes, found {}",
            len,
            bytes.len().saturating_sub(start)
        )));
    }
    Ok(Raster {
        width,
        height,
        channels,
        data: bytes[start..].to_vec(),
    })
}

pub fn read(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_comments() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| i as u8 * 10).collect();
        let enc = encode_ppm(2, 3, &rgb);
        let r = decode(&enc, Path::new("x.ppm")).unwrap();
        assert_eq!((r.width, r.height, r.channels), (2, 3, 3));
        assert_eq!(r.data, rgb);

        let with_comment = b"P5\n# hi\n2 1\n255\n\x00\xff";
        let r = decode(with_comment, Path::new("y.pgm")).unwrap();
        assert_eq!(r.data, vec![0, 255]);

        assert!(decode(b"P5\n2 1\n255\n\x00", Path::new("z.pgm")).is_err());
    }
}
