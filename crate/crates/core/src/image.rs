//! RGB images in planar (channel-major) layout with values in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    /// `[3, height, width]`, row-major per plane.
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::ImageSize {
                what: "buffer".into(),
                expected: format!("{}", 3 * width * height),
                got: format!("{}", data.len()),
            });
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, width * height));
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let n = self.width * self.height;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * n + y * self.width + x] = v;
        }
    }

    /// Errors unless the image is `size × size` RGB.
    pub fn expect_square(&self, size: usize) -> Result<()> {
        if self.width != size || self.height != size {
            return Err(Error::ImageSize {
                what: "size".into(),
                expected: format!("{size}x{size}x3"),
                got: format!("{}x{}x3", self.width, self.height),
            });
        }
        Ok(())
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantize8(&self) -> Image {
        let data = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect();
        Image { data, ..*self }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::of(v as f64)).collect();
        Tensor::new(&[3, self.height, self.width], data).expect("image shape")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        match t.shape() {
            [3, h, w] => Image::new(*w, *h, t.data().iter().map(|v| v.f64() as f32).collect()),
            s => Err(Error::ImageSize {
                what: "tensor".into(),
                expected: "[3, h, w]".into(),
                got: format!("{s:?}"),
            }),
        }
    }

    /// Rec. 601 luma, row-major.
    pub fn luminance(&self) -> Vec<f32> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        (0..self.width * self.height)
            .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
            .collect()
    }

    /// Sobel gradient magnitude of the luma with replicated borders.
    pub fn sobel_magnitude(&self) -> Vec<f32> {
        sobel(&self.luminance(), self.width, self.height)
    }

    /// Horizontal mirror.
    pub fn mirrored(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_rgb(y, x, self.rgb(y, self.width - 1 - x));
            }
        }
        out
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::filled(w, h, [0.0; 3]);
        for (x, y, px) in img.enumerate_pixels() {
            out.set_rgb(
                y as usize,
                x as usize,
                [
                    px[0] as f32 / 255.0,
                    px[1] as f32 / 255.0,
                    px[2] as f32 / 255.0,
                ],
            );
        }
        Ok(out)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = self.rgb(y as usize, x as usize);
            image::Rgb(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Places images side by side in one row.
    pub fn hstack(images: &[Image]) -> Result<Image> {
        let h = images[0].height;
        if images.iter().any(|i| i.height != h) {
            return Err(Error::InvalidArgument("hstack needs equal heights".into()));
        }
        let w: usize = images.iter().map(|i| i.width).sum();
        let mut out = Image::filled(w, h, [0.0; 3]);
        let mut x0 = 0;
        for img in images {
            for y in 0..h {
                for x in 0..img.width {
                    out.set_rgb(y, x0 + x, img.rgb(y, x));
                }
            }
            x0 += img.width;
        }
        Ok(out)
    }

    /// Box downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Image {
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Image::filled(w, h, [0.0; 3]);
        let norm = (factor * factor) as f32;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.rgb(y * factor + dy, x * factor + dx);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                out.set_rgb(y, x, acc.map(|v| v / norm));
            }
        }
        out
    }
}

pub fn sobel(lum: &[f32], w: usize, h: usize) -> Vec<f32> {
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        lum[yy * w + xx]
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}
