//! Binary PPM images and CSV manifests. Pixel values map `v -> (v+1)·127.5`
//! rounded to 8 bits, and back with `p / 127.5 - 1`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{DatasetPartition, FaceError, Result};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "sample_id,split,cluster,age_years,identity_index,face_cx,face_cy,face_ax,face_ay,\
skin_r,skin_g,skin_b,eye_spacing,eye_height,mouth_width,hair_height,hair_r,hair_g,hair_b";

fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) as f64 + 1.0) * 127.5).round() as u8
}

/// Writes a `[3,H,W]` image as P6.
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let &[3, h, w] = img.shape() else {
        return Err(FaceError::Format {
            path: path.display().to_string(),
            detail: format!("expected a [3,H,W] image, got {:?}", img.shape()),
        });
    };
    let plane = h * w;
    let d = img.data();
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * plane);
    for i in 0..plane {
        bytes.extend([to_byte(d[i]), to_byte(d[plane + i]), to_byte(d[2 * plane + i])]);
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads an 8-bit P6 file into a `[3,H,W]` tensor in `[-1,1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let bad = |detail: &str| FaceError::Format { path: path.display().to_string(), detail: detail.into() };
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let plane = w * h;
    let body = bytes.get(pos..pos + 3 * plane).ok_or_else(|| bad("truncated pixel data"))?;
    let mut data = vec![0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = (body[3 * i + c] as f64 / 127.5 - 1.0) as f32;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

/// Writes one manifest row per sample of each partition.
pub fn write_manifest(path: &Path, parts: &[&DatasetPartition]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{MANIFEST_HEADER}")?;
    for p in parts {
        for s in p.samples() {
            let id = &s.identity;
            writeln!(
                out,
                "{},{},{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                s.sample_id,
                s.split.as_str(),
                s.cluster.index(),
                s.age_years,
                s.identity_index,
                id.face_cx,
                id.face_cy,
                id.face_ax,
                id.face_ay,
                id.skin_tone[0],
                id.skin_tone[1],
                id.skin_tone[2],
                id.eye_spacing,
                id.eye_height,
                id.mouth_width,
                id.hair_height,
                id.hair_tone[0],
                id.hair_tone[1],
                id.hair_tone[2]
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_p6() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        fs::write(&p, b"P3\n1 1\n255\n0 0 0\n").unwrap();
        assert!(read_ppm(&p).is_err());
        fs::write(&p, b"P6\n2 2\n255\n\x00\x00").unwrap();
        assert!(read_ppm(&p).is_err());
    }
}
