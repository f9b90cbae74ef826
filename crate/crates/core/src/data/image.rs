use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// An RGB image with interleaved `f32` samples in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Converts a sample to a byte: clamp to `[0, 1]`, scale by 255, round half
/// away from zero.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::config(format!(
                "image extents must be positive, got {height}×{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::config(format!(
                "image buffer of {} samples does not match {height}×{width}×3",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::config(format!("image sample {bad} outside [0, 1]")));
        }
        Ok(ImageBuffer { height, width, data })
    }

    /// `f(y, x, c)` for every sample, clamped into range.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        ImageBuffer::new(height, width, data)
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        ImageBuffer::new(height, width, bytes.iter().map(|&b| dequantize(b)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    /// Quantizes and dequantizes every sample, as a save/load cycle would.
    pub fn quantized(&self) -> Self {
        ImageBuffer {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| dequantize(quantize(v))).collect(),
        }
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        self.data.iter().skip(c).step_by(3).map(|&v| v as f64).sum::<f64>() / (self.height * self.width) as f64
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::config(format!(
                "crop {height}×{width} at ({top}, {left}) exceeds {}×{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let start = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(ImageBuffer { height, width, data })
    }

    /// Pads bottom and right by mirroring without repeating the edge sample.
    pub fn reflect_pad(&self, height: usize, width: usize) -> Result<Self> {
        if height < self.height || width < self.width {
            return Err(Error::config("reflect_pad target is smaller than the image"));
        }
        if (height > self.height && self.height < 2) || (width > self.width && self.width < 2) {
            return Err(Error::config(
                "reflect padding needs at least 2 samples along a padded axis",
            ));
        }
        if height > 2 * self.height - 1 || width > 2 * self.width - 1 {
            return Err(Error::config("reflect padding larger than the image itself"));
        }
        let mirror = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        let (h, w) = (self.height, self.width);
        ImageBuffer::from_fn(height, width, |y, x, c| self.get(mirror(y, h), mirror(x, w), c))
    }

    /// `[1, 3, H, W]` planar tensor.
    pub fn to_tensor<R: Real>(&self) -> Tensor<R> {
        let plane = self.height * self.width;
        Tensor::from_fn(&[1, 3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            R::lit(self.data[p * 3 + c] as f64)
        })
        .expect("image extents are positive")
    }

    /// Inverse of [`ImageBuffer::to_tensor`] for a `[1, 3, H, W]` tensor;
    /// values are clamped into `[0, 1]`.
    pub fn from_tensor<R: Real>(t: &Tensor<R>) -> Result<Self> {
        let [n, c, h, w] = t.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::config(format!("expected a 1×3×H×W tensor, got {:?}", t.shape())));
        }
        let plane = h * w;
        let src = t.data();
        ImageBuffer::from_fn(h, w, |y, x, ch| src[ch * plane + y * w + x].as_f64() as f32)
    }
}

/// Stacks equally sized images into an `[N, 3, H, W]` tensor.
pub fn stack_images<R: Real>(images: &[&ImageBuffer]) -> Result<Tensor<R>> {
    let first = images.first().ok_or_else(|| Error::config("no images to stack"))?;
    let (h, w) = (first.height, first.width);
    if images.iter().any(|im| im.height != h || im.width != w) {
        return Err(Error::config("stacked images must share extents"));
    }
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        data.extend_from_slice(im.to_tensor::<R>().data());
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Png,
    Ppm,
}

fn format_for_path(path: &Path) -> Result<Format> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
    {
        Some(e) if e == "png" => Ok(Format::Png),
        Some(e) if e == "ppm" => Ok(Format::Ppm),
        _ => Err(Error::Format {
            path: path.to_path_buf(),
            detail: "expected a .png or .ppm extension".into(),
        }),
    }
}

pub fn is_image_path(path: &Path) -> bool {
    format_for_path(path).is_ok()
}

/// Loads an 8-bit RGB PNG or binary PPM. Each byte maps to `byte / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(path, &bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(path, &bytes)
    } else {
        Err(Error::Format {
            path: path.to_path_buf(),
            detail: "neither a PNG nor a binary PPM file".into(),
        })
    }
}

/// Writes PNG or PPM depending on the extension, quantizing each sample.
pub fn save_image(image: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = format_for_path(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let bytes = image.to_bytes();
    match format {
        Format::Png => {
            let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| png_error(path, e))?;
            writer.write_image_data(&bytes).map_err(|e| png_error(path, e))?;
            writer.finish().map_err(|e| png_error(path, e))?;
        }
        Format::Ppm => {
            write!(out, "P6\n{} {}\n255\n", image.width, image.height).map_err(|e| Error::io(path, e))?;
            out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn png_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<ImageBuffer> {
    let mut dec = png::Decoder::new(bytes);
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| png_error(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| png_error(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_error(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(png_error(path, format!("unsupported color type {other:?}"))),
    };
    ImageBuffer::from_bytes(h, w, &rgb)
}

fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<ImageBuffer> {
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    // Magic, width, height, maxval; '#' starts a comment up to end of line.
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
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
            return Err(bad("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PPM header"))?);
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed PPM header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad(&format!("unsupported bit depth (maxval {maxval})")));
    }
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(bad("truncated PPM payload"));
    }
    ImageBuffer::from_bytes(h, w, &bytes[pos..pos + need])
}
