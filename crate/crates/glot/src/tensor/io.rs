//! Tensor and image serialization.
//!
//! # GLT1 tensor format
//!
//! Little-endian binary layout, bit-exact across platforms:
//!
//! ```text
//! magic   4 bytes   "GLT1"
//! rank    u32       1..=4
//! extents rank*u32
//! payload prod(extents) * f32, row-major
//! ```
//!
//! Loading validates the header before allocating, rejects non-finite
//! payload values, and reports magic mismatch, bad rank, truncation, and
//! trailing bytes as distinct errors.
//!
//! # Images
//!
//! 8-bit binary PPM (`P6`) for RGB tensors in `[0, 1]`, and binary PGM
//! (`P5`) for label and flag maps. Parsing accepts `#` comments and
//! arbitrary header whitespace; only `maxval <= 255` is supported.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{SegmentationMap, Tensor, VisibilityMap};

const MAGIC: &[u8; 4] = b"GLT1";

/// Encodes the tensor into the GLT1 byte layout.
pub fn to_glt_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a tensor from GLT1 bytes, validating every header field.
pub fn from_glt_bytes(bytes: &[u8]) -> Result<Tensor> {
    let take = |offset: usize, len: usize| -> Result<&[u8]> {
        bytes
            .get(offset..offset + len)
            .ok_or(Error::TruncatedPayload {
                expected: (offset + len).saturating_sub(bytes.len()),
                got: bytes.len().saturating_sub(offset),
            })
    };

    let magic = take(0, 4)?;
    if magic != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(magic);
        return Err(Error::BadMagic { found });
    }

    let rank = u32::from_le_bytes(take(4, 4)?.try_into().unwrap()) as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::RankOutOfRange { rank });
    }

    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let e = u32::from_le_bytes(take(8 + 4 * i, 4)?.try_into().unwrap());
        shape.push(e as usize);
    }

    let mut numel: usize = 1;
    for &e in &shape {
        numel = numel
            .checked_mul(e)
            .ok_or_else(|| Error::InvalidParameter {
                name: "extents",
                reason: format!("element count overflows usize for {:?}", shape),
            })?;
    }
    let header = 8 + 4 * rank;
    let body = &bytes[header..];
    let expected = numel
        .checked_mul(4)
        .ok_or_else(|| Error::InvalidParameter {
            name: "extents",
            reason: "payload size overflows usize".into(),
        })?;
    if body.len() < expected {
        return Err(Error::TruncatedPayload {
            expected: expected - body.len(),
            got: body.len(),
        });
    }
    if body.len() > expected {
        return Err(Error::TrailingData {
            extra: body.len() - expected,
        });
    }

    let mut data = Vec::with_capacity(numel);
    for chunk in body.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Tensor::new(&shape, data)
}

/// Writes a tensor to a GLT1 file.
pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, to_glt_bytes(t))?;
    Ok(())
}

/// Reads a tensor from a GLT1 file.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    from_glt_bytes(&fs::read(path)?)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3, H, W]` tensor with values in `[0, 1]` as binary PPM.
/// Out-of-range values are clamped.
pub fn save_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::ShapeMismatch {
            context: "save_ppm",
            expected: vec![3, 0, 0],
            got: image.shape().to_vec(),
        });
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(quantize(image.at3(c, y, x)));
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parsed netpbm header: (width, height, maxval, payload offset).
fn parse_pnm_header(bytes: &[u8], magic: &str) -> Result<(usize, usize, usize, usize)> {
    let fail = |reason: &str| Error::Image {
        reason: reason.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(fail(&format!("missing {magic} signature")));
    }
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("header ended before width/height/maxval"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| fail("non-ascii header"))?;
        fields.push(
            text.parse::<usize>()
                .map_err(|_| fail("bad header number"))?,
        );
    }
    // exactly one whitespace byte separates maxval from payload
    if pos >= bytes.len() {
        return Err(fail("missing payload"));
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(fail(&format!(
            "unsupported maxval {maxval} (expected 1..=255)"
        )));
    }
    Ok((w, h, maxval, pos))
}

/// Reads a binary PPM into a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (w, h, maxval, offset) = parse_pnm_header(&bytes, "P6")?;
    let expected = 3 * w * h;
    let body = &bytes[offset..];
    if body.len() != expected {
        return Err(Error::Image {
            reason: format!("PPM payload is {} bytes, expected {expected}", body.len()),
        });
    }
    let mut data = vec![0.0f32; expected];
    let plane = h * w;
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = body[3 * p + c] as f32 / maxval as f32;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn save_pgm_raw(
    path: impl AsRef<Path>,
    h: usize,
    w: usize,
    maxval: usize,
    pixels: &[u8],
) -> Result<()> {
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Reads a binary PGM, returning `(height, width, maxval, pixels)`.
pub fn load_pgm_raw(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let (w, h, maxval, offset) = parse_pnm_header(&bytes, "P5")?;
    let body = &bytes[offset..];
    if body.len() != w * h {
        return Err(Error::Image {
            reason: format!("PGM payload is {} bytes, expected {}", body.len(), w * h),
        });
    }
    Ok((h, w, maxval, body.to_vec()))
}

/// Writes a segmentation map as PGM with `maxval = regions - 1`.
pub fn save_segmentation(path: impl AsRef<Path>, seg: &SegmentationMap) -> Result<()> {
    let maxval = (seg.regions() - 1).max(1);
    save_pgm_raw(path, seg.height(), seg.width(), maxval, seg.labels())
}

/// Reads a segmentation map from PGM. When `regions` is `None` the region
/// count is taken as `maxval + 1`.
pub fn load_segmentation(
    path: impl AsRef<Path>,
    regions: Option<usize>,
) -> Result<SegmentationMap> {
    let (h, w, maxval, pixels) = load_pgm_raw(path)?;
    SegmentationMap::new(h, w, regions.unwrap_or(maxval + 1), pixels)
}

/// Writes a binary flag map (visibility or mask) as PGM with `maxval = 1`.
pub fn save_flags(path: impl AsRef<Path>, height: usize, width: usize, flags: &[u8]) -> Result<()> {
    if flags.len() != height * width {
        return Err(Error::LengthMismatch {
            shape: vec![height, width],
            expected: height * width,
            got: flags.len(),
        });
    }
    save_pgm_raw(path, height, width, 1, flags)
}

/// Reads a binary flag map from PGM; any nonzero pixel becomes 1.
pub fn load_flags(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w, _maxval, pixels) = load_pgm_raw(path)?;
    Ok((h, w, pixels.iter().map(|&p| u8::from(p != 0)).collect()))
}

/// Reads a visibility map from PGM.
pub fn load_visibility(path: impl AsRef<Path>) -> Result<VisibilityMap> {
    let (h, w, flags) = load_flags(path)?;
    VisibilityMap::new(h, w, flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-10.0..=10.0)).collect()).unwrap()
    }

    #[test]
    fn roundtrip_all_ranks() {
        let shapes: [&[usize]; 4] = [&[7], &[3, 5], &[2, 3, 4], &[2, 2, 3, 3]];
        for (i, shape) in shapes.iter().enumerate() {
            let t = random_tensor(shape, i as u64);
            let back = from_glt_bytes(&to_glt_bytes(&t)).unwrap();
            assert!(t.bit_eq(&back), "shape {shape:?} not bit-identical");
        }
    }

    #[test]
    fn roundtrip_through_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.glt");
        let t = random_tensor(&[3, 4, 5], 9);
        save_tensor(&path, &t).unwrap();
        let back = load_tensor(&path).unwrap();
        assert!(t.bit_eq(&back));
    }

    #[test]
    fn encoding_is_deterministic() {
        let t = random_tensor(&[4, 4], 1);
        assert_eq!(to_glt_bytes(&t), to_glt_bytes(&t));
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = to_glt_bytes(&random_tensor(&[2], 0));
        bytes[0] = b'X';
        assert!(matches!(
            from_glt_bytes(&bytes),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn rejects_rank_zero_and_over_four() {
        for rank in [0u32, 5, 200] {
            let mut bytes = Vec::new();
            bytes.extend_from_slice(b"GLT1");
            bytes.extend_from_slice(&rank.to_le_bytes());
            for _ in 0..rank.min(8) {
                bytes.extend_from_slice(&1u32.to_le_bytes());
            }
            let err = from_glt_bytes(&bytes).unwrap_err();
            assert!(
                matches!(err, Error::RankOutOfRange { rank: r } if r == rank as usize),
                "rank {rank} gave {err:?}"
            );
        }
    }

    // Oracle for the truncation diagnostic: chop a valid encoding mid-payload.
    #[test]
    fn rejects_truncated_payload() {
        let t = random_tensor(&[2, 3], 2);
        let bytes = to_glt_bytes(&t);
        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(
            from_glt_bytes(cut),
            Err(Error::TruncatedPayload { .. })
        ));
        // header-only file claiming a 4-element payload
        let header = &bytes[..16];
        assert!(matches!(
            from_glt_bytes(header),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn rejects_trailing_bytes() {
        let mut bytes = to_glt_bytes(&random_tensor(&[3], 4));
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            from_glt_bytes(&bytes),
            Err(Error::TrailingData { extra: 4 })
        ));
    }

    #[test]
    fn rejects_non_finite_payload() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"GLT1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            from_glt_bytes(&bytes),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn huge_extent_header_fails_before_allocating() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"GLT1");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        for _ in 0..4 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        // declared payload is astronomically larger than the file
        let err = from_glt_bytes(&bytes).unwrap_err();
        assert!(matches!(
            err,
            Error::TruncatedPayload { .. } | Error::InvalidParameter { .. }
        ));
    }

    #[test]
    fn ppm_roundtrip_preserves_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        // values on the 8-bit grid survive a write/read cycle exactly
        let img = Tensor::from_fn3(3, 4, 5, |c, y, x| {
            ((c * 67 + y * 13 + x * 29) % 256) as f32 / 255.0
        })
        .unwrap();
        save_ppm(&path, &img).unwrap();
        let back = load_ppm(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(img.max_abs_diff(&back).unwrap() < 1e-6);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# a comment\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        fs::write(&path, bytes).unwrap();
        let img = load_ppm(&path).unwrap();
        assert_eq!(img.at3(0, 0, 0), 1.0);
        assert_eq!(img.at3(1, 0, 1), 1.0);
    }

    #[test]
    fn segmentation_pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.pgm");
        let seg = SegmentationMap::new(2, 3, 8, vec![0, 1, 2, 7, 4, 0]).unwrap();
        save_segmentation(&path, &seg).unwrap();
        let back = load_segmentation(&path, Some(8)).unwrap();
        assert_eq!(seg, back);
        // region count inferred from maxval when not supplied
        let inferred = load_segmentation(&path, None).unwrap();
        assert_eq!(inferred.regions(), 8);
    }

    #[test]
    fn flags_pgm_roundtrip_and_nonzero_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        save_flags(&path, 2, 2, &[0, 1, 1, 0]).unwrap();
        let (h, w, flags) = load_flags(&path).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(flags, vec![0, 1, 1, 0]);
        // a 255-valued mask from an external editor still reads as binary
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        fs::write(&path, bytes).unwrap();
        let (_, _, flags) = load_flags(&path).unwrap();
        assert_eq!(flags, vec![0, 1]);
    }

    proptest! {
        // Invariant: serialization round-trips bit-identically for every
        // rank and shape in range.
        #[test]
        fn prop_roundtrip(seed in 0u64..200) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rank = rng.gen_range(1..=4usize);
            let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=5usize)).collect();
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-100.0..=100.0)).collect();
            let t = Tensor::new(&shape, data).unwrap();
            let back = from_glt_bytes(&to_glt_bytes(&t)).unwrap();
            prop_assert!(t.bit_eq(&back));
        }
    }
}
