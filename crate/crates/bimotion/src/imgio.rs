//! Image loading and saving (PNG and binary PPM), mapped to `[3, H, W]`
//! tensors with intensities in [0, 1]. Values are clamped to the valid range
//! only here, at export time.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ImageBuffer, ImageFormat, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn load_image<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    let img = image::open(path.as_ref()).map_err(|e| Error::Image(e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let mut data = vec![S::ZERO; 3 * hw];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for ch in 0..3 {
            data[ch * hw + p] = S::from_f64(px.0[ch] as f64 / 255.0);
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

pub fn save_image<S: Scalar>(t: &Tensor<S>, path: impl AsRef<Path>) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("save_image", format!("expected [3, H, W], got {:?}", s)));
    }
    let (h, w) = (s[1], s[2]);
    let hw = h * w;
    let d = t.data();
    let mut img = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let px = [
                (d[p].to_f64().clamp(0.0, 1.0) * 255.0).round() as u8,
                (d[hw + p].to_f64().clamp(0.0, 1.0) * 255.0).round() as u8,
                (d[2 * hw + p].to_f64().clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => img
            .save_with_format(path, ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string())),
        Some("ppm") => {
            let file = std::fs::File::create(path)?;
            let enc = PnmEncoder::new(file).with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
            img.write_with_encoder(enc).map_err(|e| Error::Image(e.to_string()))
        }
        other => Err(Error::Image(format!("unsupported image extension {:?} (png or ppm)", other))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let hw = 6 * 4;
        let data: Vec<f32> = (0..3 * hw).map(|i| (i % 256) as f32 / 255.0).collect();
        let t = Tensor::from_vec(&[3, 6, 4], data).unwrap();
        for name in ["a.png", "a.ppm"] {
            let path = dir.path().join(name);
            save_image(&t, &path).unwrap();
            let back = load_image::<f32>(&path).unwrap();
            assert_eq!(back.shape(), &[3, 6, 4]);
            for (x, y) in t.data().iter().zip(back.data().iter()) {
                assert!((x - y).abs() < 1.0 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn ppm_file_is_binary_p6() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f32>::zeros(&[3, 2, 2]);
        let path = dir.path().join("b.ppm");
        save_image(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..2], b"P6");
    }

    #[test]
    fn rejects_unknown_extension() {
        let t = Tensor::<f32>::zeros(&[3, 2, 2]);
        assert!(save_image(&t, "/tmp/x.bmp").is_err());
    }
}
