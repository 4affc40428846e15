//! PNG and binary PPM (P6) reading and writing for `(1, 3, h, w)` tensors.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "png" => Some(Self::Png),
            "ppm" => Some(Self::Ppm),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Png => "png",
            Self::Ppm => "ppm",
        }
    }
}

fn image_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Round-half-up 8-bit quantization after clamping to `[0, 1]`.
pub fn quantize<T: Scalar>(v: T) -> u8 {
    (v.f64().clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn from_rgb8<T: Scalar>(width: usize, height: usize, rgb: &[u8]) -> Result<Tensor<T>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::InvalidShape {
            op: "from_rgb8",
            detail: format!("{} bytes for {width}x{height} RGB", rgb.len()),
        });
    }
    let plane = width * height;
    let mut data = vec![T::zero(); 3 * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::of(px[c] as f64 / 255.0);
        }
    }
    Tensor::new(Shape::new(1, 3, height, width), data)
}

/// Interleaved 8-bit RGB of image 0.
pub fn to_rgb8<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.c != 3 || s.n != 1 {
        return Err(Error::Shape {
            op: "to_rgb8",
            lhs: s,
            rhs: Shape::new(1, 3, s.h, s.w),
        });
    }
    let planes = [image.plane(0, 0), image.plane(0, 1), image.plane(0, 2)];
    Ok((0..s.h * s.w).flat_map(|i| planes.map(|p| quantize(p[i]))).collect())
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn decode_ppm<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let mut pos = 0;
    if ppm_token(bytes, &mut pos) != Some(b"P6") {
        return Err(image_err(path, "not a binary PPM (P6)"));
    }
    let mut field = |what: &str| -> Result<usize> {
        ppm_token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok()?.parse().ok())
            .ok_or_else(|| image_err(path, format!("bad PPM {what}")))
    };
    let (w, h, maxval) = (field("width")?, field("height")?, field("maxval")?);
    if w == 0 || h == 0 {
        return Err(image_err(path, "empty image"));
    }
    if maxval != 255 {
        return Err(image_err(path, format!("unsupported PPM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let need = w * h * 3;
    if bytes.len() < start + need {
        return Err(image_err(
            path,
            format!(
                "raster truncated: {} of {need} bytes",
                bytes.len().saturating_sub(start)
            ),
        ));
    }
    from_rgb8(w, h, &bytes[start..start + need])
}

pub fn encode_ppm<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let s = image.shape();
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(to_rgb8(image)?);
    Ok(out)
}

pub fn read_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| image_err(path, e.to_string()))?;
    if bytes.starts_with(b"P6") {
        return decode_ppm(&bytes, path);
    }
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e.to_string()))?;
    match img {
        image::DynamicImage::ImageRgb8(rgb) => from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw()),
        image::DynamicImage::ImageRgb16(_) => {
            let rgb = img.to_rgb8();
            from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
        }
        other => Err(image_err(path, format!("expected RGB, found {:?}", other.color()))),
    }
}

/// Writes image 0 of `image`; the format follows the file extension.
pub fn write_image<T: Scalar>(path: impl AsRef<Path>, image: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path).ok_or_else(|| image_err(path, "unknown extension (use .png or .ppm)"))?;
    let bytes = match format {
        ImageFormat::Ppm => encode_ppm(image)?,
        ImageFormat::Png => {
            let s = image.shape();
            let rgb = image::RgbImage::from_raw(s.w as u32, s.h as u32, to_rgb8(image)?)
                .ok_or_else(|| image_err(path, "raster size mismatch"))?;
            let mut buf = std::io::Cursor::new(Vec::new());
            rgb.write_to(&mut buf, image::ImageFormat::Png)
                .map_err(|e| image_err(path, e.to_string()))?;
            buf.into_inner()
        }
    };
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rgb(w: usize, h: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..w * h * 3).map(|_| rng.random()).collect()
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.5f64), 128);
        assert_eq!(quantize(0.5 / 255.0f64), 1);
        assert_eq!(quantize(-0.2f64), 0);
        assert_eq!(quantize(1.7f64), 255);
        for k in 0..=255u8 {
            assert_eq!(quantize(k as f32 / 255.0), k);
        }
    }

    #[test]
    fn png_and_ppm_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let raw = random_rgb(17, 23, 1);
        let img: Tensor<f32> = from_rgb8(17, 23, &raw).unwrap();
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            write_image(&p, &img).unwrap();
            let back: Tensor<f32> = read_image(&p).unwrap();
            assert_eq!(back.shape(), Shape::new(1, 3, 23, 17));
            assert_eq!(to_rgb8(&back).unwrap(), raw);
        }
    }

    #[test]
    fn ppm_header_comments() {
        let mut bytes = b"P6 # made by hand\n2 1\n# max\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 0, 255]);
        let t: Tensor<f64> = decode_ppm(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!(t.at(0, 0, 0, 0), 1.0);
        assert_eq!(t.at(0, 2, 0, 1), 1.0);
        assert!(decode_ppm::<f64>(&bytes[..bytes.len() - 1], Path::new("x.ppm")).is_err());
    }

    #[test]
    fn rejects_non_rgb_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::GrayImage::new(4, 4).save(&p).unwrap();
        assert!(matches!(read_image::<f32>(&p), Err(Error::Image { .. })));
        let q = dir.path().join("junk.png");
        fs::write(&q, b"not an image").unwrap();
        assert!(matches!(read_image::<f32>(&q), Err(Error::Image { .. })));
        assert!(matches!(
            read_image::<f32>(dir.path().join("missing.png")),
            Err(Error::Image { .. })
        ));
        let img: Tensor<f32> = from_rgb8(1, 1, &[1, 2, 3]).unwrap();
        assert!(write_image(dir.path().join("x.bmp"), &img).is_err());
    }
}
