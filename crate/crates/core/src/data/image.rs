use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a PNG or JPEG into a `[1, 3, side, side]` tensor scaled to `[0, 1]`.
///
/// Grayscale sources are replicated across channels and alpha is dropped.
/// The image is stretched (not cropped) to the target with bilinear sampling.
pub fn load_image(path: impl AsRef<Path>, side: usize) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| ingestion(path, e))?
        .decode()
        .map_err(|e| ingestion(path, e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 || side == 0 {
        return Err(ingestion(path, "empty image or target size"));
    }
    let mut planes = vec![0.0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            planes[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    let src = Tensor::from_vec([1, 3, h, w], planes)?;
    Ok(resize_bilinear(&src, side, side))
}

fn ingestion(path: &Path, reason: impl ToString) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Bilinear resampling with pixel centres aligned; same-size input is returned unchanged.
pub fn resize_bilinear(src: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let [n, c, h, w] = src.shape();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let s = src.data();
    let d = out.data_mut();
    for plane in 0..n * c {
        let sb = plane * h * w;
        let db = plane * out_h * out_w;
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = s[sb + y0 * w + x0] * (1.0 - fx) + s[sb + y0 * w + x1] * fx;
                let bot = s[sb + y1 * w + x0] * (1.0 - fx) + s[sb + y1 * w + x1] * fx;
                d[db + oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ::image::{GrayImage, Luma, Rgb, RgbImage, Rgba, RgbaImage};

    #[test]
    fn rescales_360_to_250() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        RgbImage::from_fn(360, 360, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 7]))
            .save(&p)
            .unwrap();
        let t = load_image(&p, 250).unwrap();
        assert_eq!(t.shape(), [1, 3, 250, 250]);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn same_size_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.png");
        let img = RgbImage::from_fn(250, 250, |x, y| {
            Rgb([
                (x * 7 % 256) as u8,
                (y * 3 % 256) as u8,
                ((x + y) % 256) as u8,
            ])
        });
        img.save(&p).unwrap();
        let t = load_image(&p, 250).unwrap();
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                assert_eq!(t.data()[c * 250 * 250 + i], px[c] as f32 / 255.0);
            }
        }
    }

    #[test]
    fn gray_and_alpha_sources() {
        let dir = tempfile::tempdir().unwrap();
        let g = dir.path().join("g.png");
        GrayImage::from_pixel(40, 30, Luma([77])).save(&g).unwrap();
        let t = load_image(&g, 16).unwrap();
        assert!(t.data().iter().all(|&v| (v - 77.0 / 255.0).abs() < 1e-6));

        let a = dir.path().join("a.png");
        RgbaImage::from_pixel(8, 8, Rgba([10, 20, 30, 0]))
            .save(&a)
            .unwrap();
        let t = load_image(&a, 8).unwrap();
        assert!((t.at(0, 2, 3, 3) - 30.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn jpeg_decodes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jpg");
        RgbImage::from_pixel(32, 32, Rgb([128, 128, 128]))
            .save(&p)
            .unwrap();
        let t = load_image(&p, 20).unwrap();
        assert_eq!(t.shape(), [1, 3, 20, 20]);
        assert!(t.data().iter().all(|&v| (v - 128.0 / 255.0).abs() < 0.02));
    }

    #[test]
    fn unreadable_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.png");
        std::fs::write(&p, b"definitely not an image").unwrap();
        let err = load_image(&p, 10).unwrap_err();
        assert!(matches!(err, Error::Ingestion { .. }));
        assert!(err.to_string().contains("junk.png"));
        assert!(matches!(
            load_image(dir.path().join("missing.png"), 10),
            Err(Error::Ingestion { .. })
        ));
    }
}
