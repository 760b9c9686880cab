//! Bit-exact panorama file IO.
//!
//! * PFM: `"PF\n{w} {h}\n-1.0\n"` followed by `w*h*3` little-endian `f32`,
//!   rows stored bottom-to-top. Big-endian files (positive scale) are
//!   accepted on read.
//! * PPM: `"P6\n{w} {h}\n255\n"` followed by `w*h*3` bytes, rows top-to-bottom.
//! * PNG: 8-bit RGB export only.
//!
//! Every writer goes through [`atomic_write`]: the file appears fully
//! written or not at all.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{HdrPanorama, LdrPanorama, PanoError};

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: malformed {format} file: {msg}")]
    Format { path: PathBuf, format: &'static str, msg: String },
    #[error("{path}: {source}")]
    Pano { path: PathBuf, source: PanoError },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ImageIoError + '_ {
    move |source| ImageIoError::Io { path: path.to_path_buf(), source }
}

/// Writes `path` by streaming into a sibling temp file and renaming it.
pub fn atomic_write<F>(path: &Path, body: F) -> Result<(), ImageIoError>
where
    F: FnOnce(&mut BufWriter<File>) -> io::Result<()>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let file = File::create(&tmp)?;
        let mut w = BufWriter::new(file);
        body(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        drop(w);
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

/// Reads the whole file; small images only.
fn slurp(path: &Path) -> Result<Vec<u8>, ImageIoError> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path).map_err(io_err(path))?)
        .read_to_end(&mut buf)
        .map_err(io_err(path))?;
    Ok(buf)
}

/// Pulls `n` whitespace-separated header tokens; the byte after the last
/// token is a single whitespace character that is also consumed.
fn header_tokens(buf: &[u8], n: usize) -> Option<(Vec<String>, usize)> {
    let mut pos = 0;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        while pos < buf.len() && (buf[pos].is_ascii_whitespace() || buf[pos] == b'#') {
            if buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        out.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    if pos >= buf.len() {
        return None;
    }
    Some((out, pos + 1))
}

pub fn encode_pfm(p: &HdrPanorama<f32>) -> Vec<u8> {
    encode_pfm_rgb(p.width(), p.height(), p.data())
}

/// PFM bytes for any interleaved RGB image, not only 2:1 panoramas.
pub fn encode_pfm_rgb(w: usize, h: usize, data: &[f32]) -> Vec<u8> {
    assert_eq!(data.len(), w * h * 3);
    let mut out = format!("PF\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 12);
    for row in (0..h).rev() {
        for v in &data[row * w * 3..(row + 1) * w * 3] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_pfm_rgb(path: &Path, w: usize, h: usize, data: &[f32]) -> Result<(), ImageIoError> {
    let bytes = encode_pfm_rgb(w, h, data);
    atomic_write(path, |out| out.write_all(&bytes))
}

pub fn decode_pfm(buf: &[u8], path: &Path) -> Result<HdrPanorama<f32>, ImageIoError> {
    let bad = |msg: String| ImageIoError::Format { path: path.to_path_buf(), format: "PFM", msg };
    let (tok, off) = header_tokens(buf, 4).ok_or_else(|| bad("truncated header".into()))?;
    if tok[0] != "PF" {
        return Err(bad(format!("expected color magic PF, found {:?}", tok[0])));
    }
    let w: usize = tok[1].parse().map_err(|_| bad(format!("bad width {:?}", tok[1])))?;
    let h: usize = tok[2].parse().map_err(|_| bad(format!("bad height {:?}", tok[2])))?;
    let scale: f64 = tok[3].parse().map_err(|_| bad(format!("bad scale {:?}", tok[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad(format!("scale must be non-zero, got {scale}")));
    }
    let little = scale < 0.0;
    let n = w.checked_mul(h).and_then(|x| x.checked_mul(3)).ok_or_else(|| bad("dims overflow".into()))?;
    let body = &buf[off..];
    if body.len() != n * 4 {
        return Err(bad(format!("expected {} data bytes, found {}", n * 4, body.len())));
    }
    let mut data = vec![0f32; n];
    for row in 0..h {
        let src_row = h - 1 - row;
        for i in 0..w * 3 {
            let b = &body[(src_row * w * 3 + i) * 4..][..4];
            let b = [b[0], b[1], b[2], b[3]];
            data[row * w * 3 + i] = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        }
    }
    HdrPanorama::from_data(w, h, data).map_err(|source| ImageIoError::Pano { path: path.to_path_buf(), source })
}

pub fn write_pfm(path: &Path, p: &HdrPanorama<f32>) -> Result<(), ImageIoError> {
    let bytes = encode_pfm(p);
    atomic_write(path, |w| w.write_all(&bytes))
}

pub fn read_pfm(path: &Path) -> Result<HdrPanorama<f32>, ImageIoError> {
    decode_pfm(&slurp(path)?, path)
}

pub fn encode_ppm(p: &LdrPanorama) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", p.width(), p.height()).into_bytes();
    out.extend_from_slice(p.data());
    out
}

pub fn decode_ppm(buf: &[u8], path: &Path) -> Result<LdrPanorama, ImageIoError> {
    let bad = |msg: String| ImageIoError::Format { path: path.to_path_buf(), format: "PPM", msg };
    let (tok, off) = header_tokens(buf, 4).ok_or_else(|| bad("truncated header".into()))?;
    if tok[0] != "P6" {
        return Err(bad(format!("expected magic P6, found {:?}", tok[0])));
    }
    let w: usize = tok[1].parse().map_err(|_| bad(format!("bad width {:?}", tok[1])))?;
    let h: usize = tok[2].parse().map_err(|_| bad(format!("bad height {:?}", tok[2])))?;
    if tok[3] != "255" {
        return Err(bad(format!("only maxval 255 is supported, found {:?}", tok[3])));
    }
    let body = &buf[off..];
    if body.len() != w * h * 3 {
        return Err(bad(format!("expected {} data bytes, found {}", w * h * 3, body.len())));
    }
    LdrPanorama::from_data(w, h, body.to_vec()).map_err(|source| ImageIoError::Pano { path: path.to_path_buf(), source })
}

pub fn write_ppm(path: &Path, p: &LdrPanorama) -> Result<(), ImageIoError> {
    let bytes = encode_ppm(p);
    atomic_write(path, |w| w.write_all(&bytes))
}

pub fn read_ppm(path: &Path) -> Result<LdrPanorama, ImageIoError> {
    decode_ppm(&slurp(path)?, path)
}

/// 8-bit RGB PNG of an arbitrary `width x height` interleaved buffer.
pub fn write_png_rgb8(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), ImageIoError> {
    assert_eq!(rgb.len(), width * height * 3);
    atomic_write(path, |w| {
        let mut enc = png::Encoder::new(w, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(io::Error::other)?;
        writer.write_image_data(rgb).map_err(io::Error::other)?;
        writer.finish().map_err(io::Error::other)
    })
}

pub fn write_png(path: &Path, p: &LdrPanorama) -> Result<(), ImageIoError> {
    write_png_rgb8(path, p.width(), p.height(), p.data())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> HdrPanorama<f32> {
        HdrPanorama::from_fn(8, 4, |r, c| [r as f32, c as f32 * 0.5, 1e5 * (r + c) as f32]).unwrap()
    }

    #[test]
    fn pfm_header_and_row_order_are_exact() {
        let p = sample();
        let bytes = encode_pfm(&p);
        let header = b"PF\n8 4\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        // first stored pixel is the bottom-left one
        let first = f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap());
        assert_eq!(first, 3.0);
        assert_eq!(bytes.len(), header.len() + 8 * 4 * 12);
    }

    #[test]
    fn pfm_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pfm");
        let p = sample();
        write_pfm(&path, &p).unwrap();
        assert_eq!(read_pfm(&path).unwrap(), p);
    }

    #[test]
    fn pfm_big_endian_is_accepted() {
        let p = sample();
        let mut bytes = b"PF\n8 4\n1.0\n".to_vec();
        for row in (0..4).rev() {
            for v in &p.data()[row * 24..(row + 1) * 24] {
                bytes.extend_from_slice(&v.to_be_bytes());
            }
        }
        assert_eq!(decode_pfm(&bytes, Path::new("mem")).unwrap(), p);
    }

    #[test]
    fn pfm_rejects_bad_input() {
        let mut bytes = encode_pfm(&sample());
        bytes.pop();
        assert!(matches!(decode_pfm(&bytes, Path::new("t")), Err(ImageIoError::Format { .. })));
        assert!(decode_pfm(b"Pf\n8 4\n-1.0\n", Path::new("t")).is_err());
        let mut neg = encode_pfm(&sample());
        let off = neg.len() - 4;
        neg[off..].copy_from_slice(&(-1.0f32).to_le_bytes());
        assert!(matches!(decode_pfm(&neg, Path::new("t")), Err(ImageIoError::Pano { .. })));
    }

    #[test]
    fn ppm_round_trip_and_comments() {
        let p = LdrPanorama::from_fn(8, 4, |r, c| [r as u8, c as u8, 200]).unwrap();
        let bytes = encode_ppm(&p);
        assert_eq!(&bytes[..11], b"P6\n8 4\n255\n");
        assert_eq!(decode_ppm(&bytes, Path::new("m")).unwrap(), p);
        let mut commented = b"P6\n# made by hand\n8 4\n255\n".to_vec();
        commented.extend_from_slice(p.data());
        assert_eq!(decode_ppm(&commented, Path::new("m")).unwrap(), p);
        assert!(decode_ppm(b"P6\n8 4\n65535\n", Path::new("m")).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.bin");
        let err = atomic_write(&path, |w| {
            w.write_all(b"partial")?;
            Err(io::Error::other("boom"))
        });
        assert!(err.is_err());
        assert!(!path.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn png_export_writes_signature() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let p = LdrPanorama::from_fn(8, 4, |_, c| [c as u8 * 30, 0, 0]).unwrap();
        write_png(&path, &p).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], &[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A]);
    }
}
