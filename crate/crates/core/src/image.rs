//! Raster input: PPM (P6) and PNG loading, PPM writing, and the bilinear
//! resize used by the cropper.
//!
//! Pixels are stored row-major HWC as f32 in [0, 1]. Resizing is
//! corner-aligned (source position i*(in-1)/(out-1)), which makes a same-size
//! resize an exact copy; the cropper relies on that for bit-exact tiling of
//! already-aligned inputs.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major, interleaved channels, values in [0, 1].
    pub pixels: Vec<f32>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Argument(format!("empty image {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Argument(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::dim(
                "RawImage::new",
                format!(
                    "{}x{}x{} wants {} values, got {}",
                    height,
                    width,
                    channels,
                    height * width * channels,
                    pixels.len()
                ),
            ));
        }
        Ok(RawImage { height, width, channels, pixels })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Replicate a single gray channel to three. Three-channel images pass
    /// through unchanged.
    pub fn to_three_channel(&self) -> RawImage {
        if self.channels == 3 {
            return self.clone();
        }
        let mut pixels = Vec::with_capacity(self.height * self.width * 3);
        for &v in &self.pixels {
            pixels.extend_from_slice(&[v, v, v]);
        }
        RawImage { height: self.height, width: self.width, channels: 3, pixels }
    }

    /// Corner-aligned bilinear resize. A resize to the input size copies the
    /// input exactly; a singleton output axis samples source position 0.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<RawImage> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Argument(format!("resize to empty {out_h}x{out_w}")));
        }
        let src_pos = |o: usize, out: usize, inp: usize| -> (usize, usize, f32) {
            if out == 1 || inp == 1 {
                return (0, 0, 0.0);
            }
            let s = o as f64 * (inp - 1) as f64 / (out - 1) as f64;
            let i0 = s.floor() as usize;
            let i0 = i0.min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, (s - i0 as f64) as f32)
        };
        let mut pixels = vec![0.0f32; out_h * out_w * self.channels];
        for oy in 0..out_h {
            let (y0, y1, fy) = src_pos(oy, out_h, self.height);
            for ox in 0..out_w {
                let (x0, x1, fx) = src_pos(ox, out_w, self.width);
                for c in 0..self.channels {
                    let tl = self.get(y0, x0, c);
                    let tr = self.get(y0, x1, c);
                    let bl = self.get(y1, x0, c);
                    let br = self.get(y1, x1, c);
                    let top = tl + (tr - tl) * fx;
                    let bot = bl + (br - bl) * fx;
                    pixels[(oy * out_w + ox) * self.channels + c] = top + (bot - top) * fy;
                }
            }
        }
        RawImage::new(out_h, out_w, self.channels, pixels)
    }

    /// Copy the rectangle with top-left (y, x).
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<RawImage> {
        if y + h > self.height || x + w > self.width {
            return Err(Error::Argument(format!(
                "crop {}x{}+{}+{} outside {}x{}",
                h, w, x, y, self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(h * w * self.channels);
        for yy in y..y + h {
            let start = (yy * self.width + x) * self.channels;
            pixels.extend_from_slice(&self.pixels[start..start + w * self.channels]);
        }
        RawImage::new(h, w, self.channels, pixels)
    }

    /// Channels-first tensor [c, h, w] for the encoder.
    pub fn to_chw_tensor<S: Scalar>(&self) -> Tensor<S> {
        let (h, w, c) = (self.height, self.width, self.channels);
        Tensor::from_fn(&[c, h, w], |i| {
            let ci = i / (h * w);
            let y = (i / w) % h;
            let x = i % w;
            S::from_f64(self.get(y, x, ci) as f64)
        })
    }
}

/// Binary netpbm, maxval 255: P6 (3-channel) or P5 (grayscale).
pub fn read_ppm(path: &Path) -> Result<RawImage> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut header_fields = Vec::new();
    let mut magic = [0u8; 2];
    r.read_exact(&mut magic)?;
    let channels = match &magic {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(Error::Format(format!("{}: not a P5/P6 netpbm file", path.display()))),
    };
    // Three whitespace-separated fields follow, with # comments allowed.
    while header_fields.len() < 3 {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        match byte[0] {
            b'#' => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            b if b.is_ascii_whitespace() => {}
            b if b.is_ascii_digit() => {
                let mut field = vec![b];
                loop {
                    let mut nb = [0u8; 1];
                    r.read_exact(&mut nb)?;
                    if nb[0].is_ascii_digit() {
                        field.push(nb[0]);
                    } else {
                        break;
                    }
                }
                header_fields.push(
                    String::from_utf8(field)
                        .map_err(|_| Error::Format("ppm header".into()))?
                        .parse::<usize>()
                        .map_err(|_| Error::Format("ppm header number".into()))?,
                );
            }
            other => {
                return Err(Error::Format(format!(
                    "{}: unexpected byte {other:#x} in header",
                    path.display()
                )))
            }
        }
    }
    let (width, height, maxval) = (header_fields[0], header_fields[1], header_fields[2]);
    if maxval != 255 {
        return Err(Error::Format(format!("{}: maxval {} unsupported", path.display(), maxval)));
    }
    let mut bytes = vec![0u8; width * height * channels];
    r.read_exact(&mut bytes)?;
    let pixels = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    RawImage::new(height, width, channels, pixels)
}

/// Write with maxval 255, rounding to the nearest byte: P5 for grayscale
/// images, P6 otherwise.
pub fn write_ppm(path: &Path, img: &RawImage) -> Result<()> {
    let (magic, out) = if img.channels == 1 {
        ("P5", std::borrow::Cow::Borrowed(img))
    } else {
        ("P6", std::borrow::Cow::Owned(img.to_three_channel()))
    };
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write!(w, "{magic}\n{} {}\n255\n", out.width, out.height)?;
    let bytes: Vec<u8> =
        out.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<RawImage> {
    let dynimg = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    match dynimg {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let pixels = g.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
            RawImage::new(h, w, 1, pixels)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let pixels = rgb.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
            RawImage::new(h, w, 3, pixels)
        }
    }
}

/// Dispatch on extension: .png or .ppm.
pub fn load_image(path: &Path) -> Result<RawImage> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path),
        Some("png") => read_png(path),
        other => Err(Error::Argument(format!(
            "unsupported image extension {:?} for {}",
            other,
            path.display()
        ))),
    }
}
