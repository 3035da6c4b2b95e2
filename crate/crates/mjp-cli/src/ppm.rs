//! Binary PPM (P6) image I/O and raw tensor dumps. PPM keeps the attack
//! visuals codec-free; the dump preserves full f64 precision under a
//! one-line text header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use mjp_core::jigsaw::ImageTensor;

use crate::error::{CliError, Result};

/// Writes an image as binary PPM, clamping to [0, 1] and quantizing to 8
/// bits. Single-channel images are replicated to gray RGB.
pub fn write_ppm(path: &Path, img: &ImageTensor) -> Result<()> {
    if img.c != 1 && img.c != 3 {
        return Err(CliError::config(format!(
            "PPM export supports 1 or 3 channels, got {}",
            img.c
        )));
    }
    let file = File::create(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| CliError::io(path.display().to_string(), e);
    write!(w, "P6\n{} {}\n255\n", img.w, img.h).map_err(io)?;
    let mut buf = Vec::with_capacity(img.h * img.w * 3);
    for i in 0..img.h {
        for j in 0..img.w {
            for ch in 0..3 {
                let v = img.get(i, j, if img.c == 1 { 0 } else { ch });
                buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    w.write_all(&buf).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(())
}

/// Reads a binary PPM into a 3-channel image with pixels in [0, 1].
pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    let file = File::open(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let p = path.display().to_string();
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| CliError::io(p.clone(), e))?;

    // header: "P6", width, height, maxval as whitespace-separated tokens
    // (with # comments), then a single whitespace before the payload
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CliError::format(p.clone(), "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(CliError::format(&p, "not a binary PPM (P6)"));
    }
    let w: usize = token(&bytes)?
        .parse()
        .map_err(|_| CliError::format(&p, "bad width"))?;
    let h: usize = token(&bytes)?
        .parse()
        .map_err(|_| CliError::format(&p, "bad height"))?;
    let maxval: usize = token(&bytes)?
        .parse()
        .map_err(|_| CliError::format(&p, "bad maxval"))?;
    if maxval != 255 {
        return Err(CliError::format(&p, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // the single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(CliError::format(&p, "truncated pixel payload"));
    }
    let pixels = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok(ImageTensor::new(h, w, 3, pixels)?)
}

/// Flat binary tensor dump: one text header line `tensor f64 d0 d1 ...`,
/// then the row-major f64 little-endian payload.
pub fn write_tensor_dump(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(CliError::config("tensor dump shape/data mismatch"));
    }
    let file = File::create(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| CliError::io(path.display().to_string(), e);
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    writeln!(w, "tensor f64 {}", dims.join(" ")).map_err(io)?;
    for &v in data {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_tensor_dump(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let file = File::open(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let p = path.display().to_string();
    let mut header = Vec::new();
    // read the header line byte-wise so the binary payload stays untouched
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)
            .map_err(|e| CliError::io(p.clone(), e))?;
        if b[0] == b'\n' {
            break;
        }
        header.push(b[0]);
    }
    let header = String::from_utf8(header).map_err(|_| CliError::format(&p, "bad header"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("tensor") || parts.next() != Some("f64") {
        return Err(CliError::format(&p, "unrecognized dump header"));
    }
    let shape: Vec<usize> = parts
        .map(|t| t.parse().map_err(|_| CliError::format(&p, "bad dim")))
        .collect::<Result<_>>()?;
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut f64b = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut f64b)
            .map_err(|e| CliError::io(p.clone(), e))?;
        data.push(f64::from_le_bytes(f64b));
    }
    Ok((shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = ImageTensor::new(
            4,
            6,
            3,
            (0..4 * 6 * 3).map(|i| (i % 256) as f64 / 255.0).collect(),
        )
        .unwrap();
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!((back.h, back.w, back.c), (4, 6, 3));
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let data: Vec<f64> = (0..24).map(|i| (i as f64).sqrt()).collect();
        write_tensor_dump(&path, &[2, 3, 4], &data).unwrap();
        let (shape, back) = read_tensor_dump(&path).unwrap();
        assert_eq!(shape, vec![2, 3, 4]);
        assert_eq!(back, data);
    }
}
