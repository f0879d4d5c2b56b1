//! Grid file formats.
//!
//! * PPM (`P6`, 8-bit) for images: lossy, values are rounded to `k / 255`.
//! * PFM (`Pf`, single channel, little-endian, scale `-1.0`) for depth maps.
//!   Rows are stored bottom-to-top as the format requires. Values are f32.
//! * `CVGRID64`: a lossless float grid. The header is the ASCII text
//!   `CVGRID64\n<width> <height> <channels>\n`, followed by
//!   `width * height * channels` little-endian IEEE-754 f64 values, row-major
//!   with channels interleaved. Round trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{DepthMap, Grid, Image};

const GRID64_MAGIC: &str = "CVGRID64";

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.reserve(img.len() * 3);
    for px in img.data() {
        for &c in px {
            out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let err = |detail: &str| Error::Format {
        format: "PPM",
        detail: detail.to_string(),
    };
    let (tokens, offset) = header_tokens(bytes, 4).ok_or_else(|| err("truncated header"))?;
    if tokens[0] != "P6" {
        return Err(err("expected magic P6"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| err("bad header number"));
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(err("only 8-bit PPM is supported"));
    }
    let body = &bytes[offset..];
    if body.len() != w * h * 3 {
        return Err(err("pixel data length does not match header"));
    }
    let data = body
        .chunks_exact(3)
        .map(|c| {
            [
                c[0] as f64 / 255.0,
                c[1] as f64 / 255.0,
                c[2] as f64 / 255.0,
            ]
        })
        .collect();
    Grid::from_vec(w, h, data)
}

pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let (w, h) = depth.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(*depth.get(x, y) as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DepthMap> {
    let err = |detail: &str| Error::Format {
        format: "PFM",
        detail: detail.to_string(),
    };
    let (tokens, offset) = header_tokens(bytes, 4).ok_or_else(|| err("truncated header"))?;
    if tokens[0] != "Pf" {
        return Err(err("expected single-channel magic Pf"));
    }
    let w: usize = tokens[1].parse().map_err(|_| err("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| err("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| err("bad scale"))?;
    let little = scale < 0.0;
    let body = &bytes[offset..];
    if body.len() != w * h * 4 {
        return Err(err("pixel data length does not match header"));
    }
    let mut data = vec![0.0; w * h];
    for (k, c) in body.chunks_exact(4).enumerate() {
        let raw = [c[0], c[1], c[2], c[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (x, row) = (k % w, k / w);
        data[(h - 1 - row) * w + x] = v as f64;
    }
    Grid::from_vec(w, h, data)
}

fn encode_grid64(
    width: usize,
    height: usize,
    channels: usize,
    values: impl Iterator<Item = f64>,
) -> Vec<u8> {
    let mut out = format!("{GRID64_MAGIC}\n{width} {height} {channels}\n").into_bytes();
    out.reserve(width * height * channels * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_grid64(bytes: &[u8], channels: usize) -> Result<(usize, usize, Vec<f64>)> {
    let err = |detail: String| Error::Format {
        format: "CVGRID64",
        detail,
    };
    let (tokens, offset) = header_tokens(bytes, 4).ok_or_else(|| err("truncated header".into()))?;
    if tokens[0] != GRID64_MAGIC {
        return Err(err(format!("expected magic {GRID64_MAGIC}")));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| err("bad header number".into()))
    };
    let (w, h, c) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if c != channels {
        return Err(err(format!("expected {channels} channel(s), found {c}")));
    }
    let body = &bytes[offset..];
    if body.len() != w * h * c * 8 {
        return Err(err("data length does not match header".into()));
    }
    let values = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect();
    Ok((w, h, values))
}

pub fn encode_image_f64(img: &Image) -> Vec<u8> {
    encode_grid64(
        img.width(),
        img.height(),
        3,
        img.data().iter().flatten().copied(),
    )
}

pub fn decode_image_f64(bytes: &[u8]) -> Result<Image> {
    let (w, h, values) = decode_grid64(bytes, 3)?;
    let data = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Grid::from_vec(w, h, data)
}

pub fn encode_depth_f64(depth: &DepthMap) -> Vec<u8> {
    encode_grid64(
        depth.width(),
        depth.height(),
        1,
        depth.data().iter().copied(),
    )
}

pub fn decode_depth_f64(bytes: &[u8]) -> Result<DepthMap> {
    let (w, h, values) = decode_grid64(bytes, 1)?;
    Grid::from_vec(w, h, values)
}

/// Splits the first `n` whitespace-separated header tokens off a binary
/// file, skipping `#` comments. Returns the tokens and the offset just past
/// the single whitespace byte that terminates the last one.
fn header_tokens(bytes: &[u8], n: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(n);
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return if tokens.len() == n && i == bytes.len() {
            Some((tokens, i))
        } else {
            None
        };
    }
    Some((tokens, i + 1))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_ppm(path: &Path, img: &Image) -> Result<()> {
    write_file(path, &encode_ppm(img))
}

pub fn load_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&read_file(path)?)
}

pub fn save_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    write_file(path, &encode_pfm(depth))
}

pub fn load_pfm(path: &Path) -> Result<DepthMap> {
    decode_pfm(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn ppm_round_trip_on_quantized_values() {
        let img = Image::from_fn(5, 3, |x, y| {
            [x as f64 * 51.0 / 255.0, y as f64 * 85.0 / 255.0, 1.0]
        });
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n5 3\n255\n"));
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let mut bytes = b"P6\n# seed=4\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 255]);
        assert_eq!(decode_ppm(&bytes).unwrap().data(), &[[1.0, 0.0, 1.0]]);
    }

    #[test]
    fn pfm_is_bottom_up_little_endian() {
        let depth = DepthMap::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_pfm(&depth);
        let header = b"Pf\n2 2\n-1.0\n";
        assert!(bytes.starts_with(header));
        let first = f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap());
        assert_eq!(first, 3.0);
        assert_eq!(decode_pfm(&bytes).unwrap(), depth);
    }

    #[test]
    fn truncated_data_is_rejected() {
        let depth = DepthMap::filled(3, 2, 5.0);
        let mut bytes = encode_depth_f64(&depth);
        bytes.pop();
        assert!(decode_depth_f64(&bytes).is_err());
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
    }

    proptest! {
        #[test]
        fn grid64_round_trip_is_bit_exact(
            w in 1usize..6,
            h in 1usize..6,
            seed in proptest::collection::vec(any::<f64>(), 108),
        ) {
            let img = Image::from_fn(w, h, |x, y| {
                let k = (y * w + x) * 3;
                [seed[k], seed[k + 1], seed[k + 2]]
            });
            let back = decode_image_f64(&encode_image_f64(&img)).unwrap();
            for (a, b) in img.data().iter().flatten().zip(back.data().iter().flatten()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            let depth = img.map(|p| p[1]);
            let back = decode_depth_f64(&encode_depth_f64(&depth)).unwrap();
            for (a, b) in depth.data().iter().zip(back.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
