//! File formats: 8-bit PNG frames and masks, PFM depth maps, Middlebury `.flo` flow.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Flow, Grid, Mask, Rgb};

const FLO_MAGIC: f32 = 202021.25;

pub fn read_rgb_png(path: &Path) -> Result<Grid<Rgb>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0])
        .collect();
    Grid::from_vec(w as usize, h as usize, data)
}

pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb_png(path: &Path, image: &Grid<Rgb>) -> Result<()> {
    let buf: Vec<u8> = image
        .as_slice()
        .iter()
        .flat_map(|p| p.map(quantize_u8))
        .collect();
    image::save_buffer(
        path,
        &buf,
        image.width() as u32,
        image.height() as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(())
}

/// Masks are stored as 8-bit grayscale, 0 or 255; any nonzero value reads as set.
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let buf: Vec<u8> = mask.as_slice().iter().map(|&b| if b { 255 } else { 0 }).collect();
    image::save_buffer(
        path,
        &buf,
        mask.width() as u32,
        mask.height() as u32,
        image::ExtendedColorType::L8,
    )?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Grid::from_vec(w as usize, h as usize, img.pixels().map(|p| p[0] > 0).collect())
}

/// Single-channel little-endian PFM. Rows are stored bottom-to-top as the format requires.
pub fn write_pfm(path: &Path, depth: &Grid<f32>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(encode_pfm(depth).as_slice())?;
    out.flush()?;
    Ok(())
}

pub fn encode_pfm(depth: &Grid<f32>) -> Vec<u8> {
    let mut buf = format!("Pf\n{} {}\n-1.0\n", depth.width(), depth.height()).into_bytes();
    buf.reserve(depth.len() * 4);
    for row in (0..depth.height()).rev() {
        for v in depth.row(row) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn read_pfm(path: &Path) -> Result<Grid<f32>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_pfm(&bytes)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Grid<f32>> {
    let mut pos = 0usize;
    let next_token = |pos: &mut usize| -> Result<String> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::format(start as u64, "unexpected end of PFM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = next_token(&mut pos)?;
    match magic.as_str() {
        "Pf" => {}
        "PF" => {
            return Err(Error::format(0, "three-channel PFM is not supported for depth"));
        }
        _ => return Err(Error::format(0, format!("bad PFM magic {magic:?}"))),
    }
    let parse_dim = |tok: String, at: usize| -> Result<usize> {
        tok.parse::<usize>()
            .map_err(|_| Error::format(at as u64, format!("bad PFM dimension {tok:?}")))
    };
    let at = pos;
    let width = parse_dim(next_token(&mut pos)?, at)?;
    let at = pos;
    let height = parse_dim(next_token(&mut pos)?, at)?;
    let at = pos;
    let scale_tok = next_token(&mut pos)?;
    let scale: f32 = scale_tok
        .parse()
        .map_err(|_| Error::format(at as u64, format!("bad PFM scale {scale_tok:?}")))?;
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 4;
    if bytes.len() < pos + need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("PFM raster truncated: need {need} bytes after offset {pos}"),
        ));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0f32; width * height];
    for (i, chunk) in bytes[pos..pos + need].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let file_row = i / width;
        let col = i % width;
        data[(height - 1 - file_row) * width + col] = v;
    }
    Grid::from_vec(width, height, data)
}

/// Middlebury optical flow: magic, i32 width, i32 height, interleaved (u, v) f32, little-endian.
pub fn write_flo(path: &Path, flow: &Grid<Flow>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&FLO_MAGIC.to_le_bytes())?;
    out.write_all(&(flow.width() as i32).to_le_bytes())?;
    out.write_all(&(flow.height() as i32).to_le_bytes())?;
    for uv in flow.as_slice() {
        out.write_all(&uv[0].to_le_bytes())?;
        out.write_all(&uv[1].to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_flo(path: &Path) -> Result<Grid<Flow>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_flo(&bytes)
}

pub fn decode_flo(bytes: &[u8]) -> Result<Grid<Flow>> {
    if bytes.len() < 12 {
        return Err(Error::format(bytes.len() as u64, "flo header truncated"));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(Error::format(0, "bad flo magic"));
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w <= 0 || h <= 0 {
        return Err(Error::format(4, format!("bad flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = 12 + w * h * 8;
    if bytes.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("flo payload truncated, expected {need} bytes"),
        ));
    }
    let data = (0..w * h)
        .map(|i| {
            let o = 12 + i * 8;
            [f32::from_le_bytes(word(o)), f32::from_le_bytes(word(o + 4))]
        })
        .collect();
    Grid::from_vec(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pfm_header_and_row_order() {
        let g = Grid::from_vec(2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_pfm(&g);
        assert!(bytes.starts_with(b"Pf\n2 2\n-1.0\n"));
        let payload = &bytes[12..];
        // bottom row first
        assert_eq!(f32::from_le_bytes(payload[0..4].try_into().unwrap()), 3.0);
        assert_eq!(decode_pfm(&bytes).unwrap(), g);
    }

    #[test]
    fn pfm_rejects_garbage() {
        assert!(matches!(decode_pfm(b"P6\n1 1\n"), Err(Error::Format { offset: 0, .. })));
        let err = decode_pfm(b"Pf\n4 4\n-1.0\n\0\0").unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn pfm_big_endian_reads() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap().get(0, 0), 2.5);
    }

    #[test]
    fn flo_roundtrip_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.flo");
        let g = Grid::from_fn(3, 2, |r, c| [c as f32 + 0.5, -(r as f32)]);
        write_flo(&p, &g).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 12 + 6 * 8);
        assert_eq!(&bytes[0..4], &202021.25f32.to_le_bytes());
        assert_eq!(read_flo(&p).unwrap(), g);
    }

    #[test]
    fn flo_rejects_bad_magic() {
        let mut bytes = vec![0u8; 20];
        bytes[4] = 1;
        bytes[8] = 1;
        assert!(matches!(decode_flo(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn png_mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = Grid::from_fn(5, 3, |r, c| (r + c) % 2 == 0);
        write_mask_png(&p, &m).unwrap();
        assert_eq!(read_mask_png(&p).unwrap(), m);
    }

    proptest! {
        #[test]
        fn pfm_roundtrip(w in 1usize..7, h in 1usize..7, seed in any::<u32>()) {
            let g = Grid::from_fn(w, h, |r, c| ((r * 31 + c * 7) as u32 ^ seed) as f32 * 1e-3);
            prop_assert_eq!(decode_pfm(&encode_pfm(&g)).unwrap(), g);
        }

        #[test]
        fn png_rgb_roundtrip_is_quantized(w in 1usize..6, h in 1usize..6, v in 0.0f32..1.0) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("x.png");
            let g = Grid::from_fn(w, h, |r, c| [v, (r as f32) / 8.0, (c as f32) / 8.0]);
            write_rgb_png(&p, &g).unwrap();
            let back = read_rgb_png(&p).unwrap();
            for (a, b) in g.as_slice().iter().zip(back.as_slice()) {
                for ch in 0..3 {
                    prop_assert!((a[ch] - b[ch]).abs() <= 0.5 / 255.0 + 1e-6);
                }
            }
        }
    }
}
