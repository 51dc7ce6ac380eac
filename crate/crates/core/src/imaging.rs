//! RGB raster images: binary PPM ingest plus the resize and pad primitives
//! used by dynamic tiling.

use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

/// Fill color for padded canvas regions.
pub const PAD_FILL: Rgb = [127, 127, 127];

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}x{})", self.width, self.height)
    }
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::contract(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let pixels = color
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: Rgb) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copy of the `h × w` region whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::contract(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        Image::new(w, h, pixels)
    }

    /// Binary PPM (P6, maxval 255) encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            if self.pos >= self.bytes.len() {
                return Err(Error::Truncated(format!("header ends before {what}")));
            }
            return Err(Error::Format(format!("expected {what} at byte {start}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format(format!("{what} does not fit in usize")))
    }
}

/// Parses a binary PPM (`P6`) file with maxval 255.
pub fn load_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Format("missing P6 magic".into()));
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    if r.pos < bytes.len() && !bytes[r.pos].is_ascii_whitespace() && bytes[r.pos] != b'#' {
        return Err(Error::Format("missing P6 magic".into()));
    }
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!(
            "zero image dimension {width}x{height}"
        )));
    }
    if maxval != 255 {
        return Err(Error::Unsupported(format!(
            "maxval {maxval}, only 255 is supported"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(r.pos) {
        Some(c) if c.is_ascii_whitespace() => r.pos += 1,
        Some(_) => return Err(Error::Format("no whitespace after maxval".into())),
        None => return Err(Error::Truncated("no pixel data".into())),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    let raster = &bytes[r.pos..];
    if raster.len() < need {
        return Err(Error::Truncated(format!(
            "expected {need} pixel bytes, found {}",
            raster.len()
        )));
    }
    Image::new(width, height, raster[..need].to_vec())
}

/// Bilinear resize with half-pixel-center sampling.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract(format!(
            "resize target {out_w}x{out_h} is empty"
        )));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let xs = sample_axis(img.width, out_w);
    let ys = sample_axis(img.height, out_h);
    let mut pixels = Vec::with_capacity(out_w * out_h * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let at = |x: usize, y: usize| img.pixels[(y * img.width + x) * 3 + c] as f64;
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::new(out_w, out_h, pixels)
}

/// For each output index: the two source neighbours and the blend weight of the second.
fn sample_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Places `img` at the top-left of a `target_w × target_h` canvas filled with `fill`.
pub fn pad_to(img: &Image, target_h: usize, target_w: usize, fill: Rgb) -> Result<Image> {
    if target_h < img.height || target_w < img.width {
        return Err(Error::contract(format!(
            "pad target {target_w}x{target_h} smaller than image {}x{}",
            img.width, img.height
        )));
    }
    let mut out = Image::filled(target_w, target_h, fill);
    let row_bytes = img.width * 3;
    for y in 0..img.height {
        let dst = y * target_w * 3;
        out.pixels[dst..dst + row_bytes]
            .copy_from_slice(&img.pixels[y * row_bytes..(y + 1) * row_bytes]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_ppm() {
        let mut bytes = b"P6 1 1 255\n".to_vec();
        bytes.extend([10, 20, 30]);
        let img = load_ppm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (1, 1));
        assert_eq!(img.pixel(0, 0), [10, 20, 30]);
    }

    #[test]
    fn two_pixel_layout() {
        let mut bytes = b"P6 2 1 255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 255, 0]);
        let img = load_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0), [255, 0, 0]);
        assert_eq!(img.pixel(1, 0), [0, 255, 0]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n2 # width\n1\n255\n".to_vec();
        bytes.extend([1, 2, 3, 4, 5, 6]);
        let img = load_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(1, 0), [4, 5, 6]);
    }

    #[test]
    fn ppm_errors() {
        assert!(matches!(load_ppm(b"P5 1 1 255\n\0"), Err(Error::Format(_))));
        assert!(matches!(load_ppm(b""), Err(Error::Format(_))));
        assert!(matches!(
            load_ppm(b"P6 1 1 65535\n\0\0\0\0\0\0"),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            load_ppm(b"P6 2 2 255\n\0\0\0"),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(load_ppm(b"P6 2 2"), Err(Error::Truncated(_))));
    }

    #[test]
    fn ppm_writer_round_trips() {
        let img = Image::new(2, 2, (0..12).collect()).unwrap();
        assert_eq!(load_ppm(&img.to_ppm()).unwrap(), img);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::new(3, 2, (0..18).map(|v| v * 13).collect()).unwrap();
        assert_eq!(resize_bilinear(&img, 2, 3).unwrap(), img);

        let flat = Image::filled(5, 7, [12, 200, 99]);
        let r = resize_bilinear(&flat, 13, 3).unwrap();
        assert!(r.pixels().chunks(3).all(|p| p == [12, 200, 99]));
    }

    #[test]
    fn resize_ramp_is_monotone() {
        let img = Image::new(2, 1, vec![0, 0, 0, 255, 255, 255]).unwrap();
        let r = resize_bilinear(&img, 1, 4).unwrap();
        let reds: Vec<u8> = (0..4).map(|x| r.pixel(x, 0)[0]).collect();
        // Sample centers land at -0.25, 0.25, 0.75, 1.25 in source coordinates.
        assert_eq!(reds, vec![0, 64, 191, 255]);
    }

    #[test]
    fn pad_layout() {
        let red = Image::filled(1, 1, [255, 0, 0]);
        let p = pad_to(&red, 1, 2, [0, 0, 0]).unwrap();
        assert_eq!(p.pixel(0, 0), [255, 0, 0]);
        assert_eq!(p.pixel(1, 0), [0, 0, 0]);
        assert_eq!(pad_to(&red, 1, 1, [0, 0, 0]).unwrap(), red);
        assert!(pad_to(&p, 1, 1, [0, 0, 0]).is_err());
    }

    #[test]
    fn pad_area_arithmetic() {
        let img = Image::filled(384, 384, [1, 2, 3]);
        let p = pad_to(&img, 384, 768, PAD_FILL).unwrap();
        let fill_count = p.pixels().chunks(3).filter(|px| *px == PAD_FILL).count();
        assert_eq!(fill_count, 384 * 384);
    }

    #[test]
    fn crop_bounds() {
        let img = Image::filled(4, 4, [0, 0, 0]);
        assert!(img.crop(2, 2, 3, 1).is_err());
        assert_eq!(img.crop(1, 1, 3, 3).unwrap().width(), 3);
    }
}
