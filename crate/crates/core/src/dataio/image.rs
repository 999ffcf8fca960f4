//! Minimal raster I/O (PNG, binary/ASCII PPM and PGM), bilinear resizing,
//! letterboxing and box drawing.

use std::fs;
use std::io::{BufReader, Cursor};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Letterbox padding gray level.
pub const PAD_VALUE: f64 = 114.0 / 255.0;

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[3, H, W]` tensor in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut data = vec![0.0; 3 * hw];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * hw + p] = px[c] as f64 / 255.0;
            }
        }
        Tensor::from_parts(vec![3, self.height, self.width], data)
    }

    /// Inverse of [`RgbImage::to_tensor`], rounding and clamping to 8 bits.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [c, h, w] = t.shape() else {
            return Err(Error::invalid(
                "from_tensor",
                format!("expected [3,H,W], got {:?}", t.shape()),
            ));
        };
        if *c != 3 {
            return Err(Error::invalid("from_tensor", format!("expected 3 channels, got {c}")));
        }
        let hw = h * w;
        let mut img = RgbImage::new(*w, *h);
        for p in 0..hw {
            for ch in 0..3 {
                img.data[p * 3 + ch] = (t.data()[ch * hw + p] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        Ok(img)
    }

    /// One-pixel rectangle outline, clipped to the image.
    pub fn draw_rect(&mut self, x1: i64, y1: i64, x2: i64, y2: i64, rgb: [u8; 3]) {
        let (w, h) = (self.width as i64, self.height as i64);
        let mut plot = |x: i64, y: i64| {
            if x >= 0 && y >= 0 && x < w && y < h {
                self.put(x as usize, y as usize, rgb);
            }
        };
        for x in x1..=x2 {
            plot(x, y1);
            plot(x, y2);
        }
        for y in y1..=y2 {
            plot(x1, y);
            plot(x2, y);
        }
    }

    /// Draws `text` with a 3x5 pixel font; supports digits, `.`, space and
    /// `-`. Other characters render as blanks.
    pub fn draw_text(&mut self, x: i64, y: i64, text: &str, rgb: [u8; 3]) {
        for (i, ch) in text.chars().enumerate() {
            let glyph = glyph(ch);
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..3 {
                    if bits >> (2 - col) & 1 == 1 {
                        let (px, py) = (x + i as i64 * 4 + col, y + row as i64);
                        if px >= 0 && py >= 0 && (px as usize) < self.width && (py as usize) < self.height {
                            self.put(px as usize, py as usize, rgb);
                        }
                    }
                }
            }
        }
    }
}

fn glyph(ch: char) -> [u8; 5] {
    match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0, 0, 0, 0, 0b010],
        '-' => [0, 0, 0b111, 0, 0],
        _ => [0; 5],
    }
}

fn image_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes).map_err(|m| image_err(path, m))
    } else if bytes.first() == Some(&b'P') {
        decode_pnm(&bytes).map_err(|m| image_err(path, m))
    } else {
        Err(image_err(path, "unsupported image format (PNG, PPM and PGM only)"))
    }
}

fn decode_png(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let mut decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(format!("unsupported PNG color type {other:?}")),
    };
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * channels..(x + 1) * channels];
            let rgb = if channels < 3 {
                [px[0]; 3]
            } else {
                [px[0], px[1], px[2]]
            };
            img.put(x, y, rgb);
        }
    }
    Ok(img)
}

fn decode_pnm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let channels = match magic.as_str() {
        "P6" | "P3" => 3,
        "P5" | "P2" => 1,
        m => return Err(format!("unsupported netpbm variant {m}")),
    };
    let n = w * h * channels;
    let samples: Vec<usize> = if magic == "P6" || magic == "P5" {
        let start = pos + 1;
        let body = bytes.get(start..start + n).ok_or("truncated pixel data")?;
        body.iter().map(|&b| b as usize).collect()
    } else {
        (0..n)
            .map(|_| token().and_then(num))
            .collect::<std::result::Result<_, _>>()?
    };
    let scale = |v: usize| ((v * 255 + maxval / 2) / maxval).min(255) as u8;
    let mut img = RgbImage::new(w, h);
    for p in 0..w * h {
        let rgb = if channels == 3 {
            [
                scale(samples[3 * p]),
                scale(samples[3 * p + 1]),
                scale(samples[3 * p + 2]),
            ]
        } else {
            [scale(samples[p]); 3]
        };
        img.put(p % w, p / w, rgb);
    }
    Ok(img)
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| image_err(path, e.to_string()))?;
        writer
            .write_image_data(&img.data)
            .map_err(|e| image_err(path, e.to_string()))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Bilinear resize of a `[C,H,W]` tensor with half-pixel sample centers.
pub fn resize_bilinear(src: &Tensor, out_w: usize, out_h: usize) -> Tensor {
    let [c, h, w] = src.shape() else {
        panic!("resize_bilinear expects [C,H,W]")
    };
    let (c, h, w) = (*c, *h, *w);
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let taps = |o: usize, scale: f64, n: usize| {
        let f = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (f.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, f - i0 as f64)
    };
    let mut data = Vec::with_capacity(c * out_h * out_w);
    let x = src.data();
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = taps(oy, sy, h);
            for ox in 0..out_w {
                let (x0, x1, fx) = taps(ox, sx, w);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::from_parts(vec![c, out_h, out_w], data)
}

/// Placement of the resized image inside the letterboxed square.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: usize,
    pub pad_y: usize,
    pub new_w: usize,
    pub new_h: usize,
}

impl Letterbox {
    pub fn compute(width: usize, height: usize, target: usize) -> Letterbox {
        let scale = (target as f64 / width as f64).min(target as f64 / height as f64);
        let new_w = ((width as f64 * scale).round() as usize).clamp(1, target);
        let new_h = ((height as f64 * scale).round() as usize).clamp(1, target);
        Letterbox {
            scale,
            pad_x: (target - new_w) / 2,
            pad_y: (target - new_h) / 2,
            new_w,
            new_h,
        }
    }
}

/// Aspect-preserving resize into a `target × target` gray-padded square.
pub fn letterbox(img: &RgbImage, target: usize) -> (Tensor, Letterbox) {
    let lb = Letterbox::compute(img.width, img.height, target);
    let src = img.to_tensor();
    let resized = if lb.new_w == img.width && lb.new_h == img.height {
        src
    } else {
        resize_bilinear(&src, lb.new_w, lb.new_h)
    };
    let mut out = Tensor::full(&[3, target, target], PAD_VALUE);
    for c in 0..3 {
        for y in 0..lb.new_h {
            for x in 0..lb.new_w {
                let v = resized.data()[(c * lb.new_h + y) * lb.new_w + x];
                let off = (c * target + y + lb.pad_y) * target + x + lb.pad_x;
                out.data_mut()[off] = v;
            }
        }
    }
    (out, lb)
}

/// Reads an image file and letterboxes it to `target_size`.
pub fn load_image(path: &Path, target_size: usize) -> Result<Tensor> {
    Ok(letterbox(&read_image(path)?, target_size).0)
}
