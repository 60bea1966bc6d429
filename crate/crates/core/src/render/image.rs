use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: f64 = 1.0;
pub const INK: f64 = 0.0;

/// Grayscale image with intensities in `[0,1]`, row-major from the top.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    depth: Option<Vec<f64>>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            width,
            height,
            pixels: vec![BACKGROUND; width * height],
            depth: None,
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Dimension(format!("{width}x{height} image with {} pixels", pixels.len())));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invariant("intensities in [0,1]", "pixel out of range"));
        }
        Ok(Self {
            width,
            height,
            pixels,
            depth: None,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn depth(&self) -> Option<&[f64]> {
        self.depth.as_deref()
    }

    pub(crate) fn set_depth(&mut self, depth: Vec<f64>) {
        debug_assert_eq!(depth.len(), self.pixels.len());
        self.depth = Some(depth);
    }

    /// Rounds intensities to the 8-bit levels a PGM file can hold.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for p in &mut out.pixels {
            *p = (*p * 255.0).round() / 255.0;
        }
        out
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_pgm(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_pgm())?;
        Ok(())
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::MalformedReply(format!("pgm: {m}"));
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
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
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?.to_owned());
        }
        pos += 1;
        if fields[0] != "P5" {
            return Err(bad("not P5"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("header number"));
        let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if max != 255 || w == 0 || h == 0 {
            return Err(bad("unsupported dimensions or maxval"));
        }
        let data = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated raster"))?;
        Self::from_pixels(w, h, data.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn read_pgm(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_pgm(&buf)
    }
}

/// Image-space box in normalized coordinates, `y` growing downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("bounding box".into()));
        }
        if x_min > x_max || y_min > y_max {
            return Err(Error::invariant("min <= max", format!("{b:?}")));
        }
        Ok(b)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) * 0.5, (self.y_min + self.y_max) * 0.5)
    }

    pub fn is_normalized(&self) -> bool {
        self.to_array().iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn contains(&self, x: f64, y: f64, tol: f64) -> bool {
        x >= self.x_min - tol && x <= self.x_max + tol && y >= self.y_min - tol && y <= self.y_max + tol
    }
}

impl TryFrom<[f64; 4]> for BBox2D {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox2D> for [f64; 4] {
    fn from(b: BBox2D) -> Self {
        b.to_array()
    }
}

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;
const LABEL_SCALE: usize = 2;
const LABEL_MARGIN: usize = 4;
const FRAME_WIDTH: usize = 2;

fn glyph(c: char) -> [u8; GLYPH_H] {
    match c {
        'L' => [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
        'R' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
        'e' => [0b00000, 0b00000, 0b01110, 0b10001, 0b11111, 0b10000, 0b01110],
        'f' => [0b00110, 0b01001, 0b01000, 0b11100, 0b01000, 0b01000, 0b01000],
        't' => [0b01000, 0b01000, 0b11100, 0b01000, 0b01000, 0b01001, 0b00110],
        'i' => [0b00100, 0b00000, 0b01100, 0b00100, 0b00100, 0b00100, 0b01110],
        'g' => [0b00000, 0b01111, 0b10001, 0b10001, 0b01111, 0b00001, 0b01110],
        'h' => [0b10000, 0b10000, 0b10110, 0b11001, 0b10001, 0b10001, 0b10001],
        _ => [0; GLYPH_H],
    }
}

/// Pixel rectangle `(x0, y0, width, height)` a label occupies when stamped
/// bottom-center in a panel starting at column `x_offset`.
pub fn label_rect(text: &str, x_offset: usize, panel_width: usize, height: usize) -> (usize, usize, usize, usize) {
    let n = text.chars().count();
    let w = n * GLYPH_W * LABEL_SCALE + n.saturating_sub(1) * LABEL_SCALE;
    let h = GLYPH_H * LABEL_SCALE;
    let x0 = x_offset + panel_width.saturating_sub(w) / 2;
    let y0 = height.saturating_sub(h + LABEL_MARGIN);
    (x0, y0, w, h)
}

fn stamp(img: &mut Image, text: &str, x_offset: usize, panel_width: usize) {
    let (x0, y0, _, _) = label_rect(text, x_offset, panel_width, img.height);
    for (k, c) in text.chars().enumerate() {
        let gx = x0 + k * (GLYPH_W + 1) * LABEL_SCALE;
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - col)) == 0 {
                    continue;
                }
                for dy in 0..LABEL_SCALE {
                    for dx in 0..LABEL_SCALE {
                        let (x, y) = (gx + col * LABEL_SCALE + dx, y0 + row * LABEL_SCALE + dy);
                        if x < img.width && y < img.height {
                            img.set(x, y, INK);
                        }
                    }
                }
            }
        }
    }
}

/// Inclusive pixel rectangle covered by a normalized box in a `w x h` panel.
pub fn bbox_pixels(b: &BBox2D, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let px = |v: f64, n: usize| ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
    let (x0, y0) = (px(b.x_min, w), px(b.y_min, h));
    let (x1, y1) = (px(b.x_max, w).max(x0), px(b.y_max, h).max(y0));
    (x0, y0, x1, y1)
}

/// Concatenates two panels horizontally, frames `bbox_on_left` on the left
/// panel and stamps "Left"/"Right" at the bottom of each half.
pub fn compose_pair_image(left: &Image, right: &Image, bbox_on_left: &BBox2D) -> Result<Image> {
    if left.height != right.height {
        return Err(Error::Dimension(format!("panel heights {} and {}", left.height, right.height)));
    }
    let (w, h) = (left.width + right.width, left.height);
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..left.width {
            out.set(x, y, left.get(x, y));
        }
        for x in 0..right.width {
            out.set(left.width + x, y, right.get(x, y));
        }
    }
    let (x0, y0, x1, y1) = bbox_pixels(bbox_on_left, left.width, h);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let border = x < x0 + FRAME_WIDTH || x + FRAME_WIDTH > x1 || y < y0 + FRAME_WIDTH || y + FRAME_WIDTH > y1;
            if border {
                out.set(x, y, INK);
            }
        }
    }
    stamp(&mut out, "Left", 0, left.width);
    stamp(&mut out, "Right", left.width, right.width);
    Ok(out)
}
