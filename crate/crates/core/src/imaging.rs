//! Image handles and pixel rectangles.

use std::fmt;
use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;

use image::{ImageFormat, RgbaImage};
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot read image {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image: {0}")]
    Decode(#[from] image::ImageError),
    #[error("box {rect} is outside the {width}x{height} image")]
    OutOfBounds { rect: Rect, width: u32, height: u32 },
}

/// Axis-aligned pixel rectangle `(x, y, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        !self.is_empty() && self.right() <= width && self.bottom() <= height
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.bottom() <= self.bottom()
    }

    pub fn contains_point(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    /// Smallest rectangle covering both.
    pub fn union(&self, other: &Rect) -> Rect {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        Rect::new(
            x,
            y,
            self.right().max(other.right()) - x,
            self.bottom().max(other.bottom()) - y,
        )
    }

    /// Clips a signed box `(x, y, w, h)` to `[0, width) x [0, height)`.
    /// Returns `None` when nothing of it lies inside.
    pub fn clip_signed(x: i64, y: i64, w: i64, h: i64, width: u32, height: u32) -> Option<Rect> {
        if w <= 0 || h <= 0 {
            return None;
        }
        let x0 = x.clamp(0, width as i64);
        let y0 = y.clamp(0, height as i64);
        let x1 = x.saturating_add(w).clamp(0, width as i64);
        let y1 = y.saturating_add(h).clamp(0, height as i64);
        (x1 > x0 && y1 > y0).then(|| Rect::new(x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32))
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x, self.y, self.w, self.h)
    }
}

/// A decoded image plus a stable identifier.
///
/// `id` is a caller-chosen name (file stem, fixture key, derived crop
/// name); `digest` is the SHA-256 of the dimensions and RGBA pixels. Mock
/// providers key their scripts by either.
#[derive(Clone)]
pub struct ImageHandle {
    id: String,
    digest: String,
    pixels: Arc<RgbaImage>,
}

impl ImageHandle {
    pub fn new(id: impl Into<String>, pixels: RgbaImage) -> Self {
        let digest = pixel_digest(&pixels);
        Self {
            id: id.into(),
            digest,
            pixels: Arc::new(pixels),
        }
    }

    pub fn from_bytes(id: impl Into<String>, bytes: &[u8]) -> Result<Self, ImageError> {
        let decoded = image::load_from_memory(bytes)?;
        Ok(Self::new(id, decoded.to_rgba8()))
    }

    /// Loads a file; the id is the file stem.
    pub fn open(path: &Path) -> Result<Self, ImageError> {
        let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".to_string());
        Self::from_bytes(id, &bytes)
    }

    /// Uniform colour image, handy for fixtures.
    pub fn solid(id: impl Into<String>, width: u32, height: u32, rgba: [u8; 4]) -> Self {
        Self::new(id, RgbaImage::from_pixel(width, height, image::Rgba(rgba)))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn pixels(&self) -> &RgbaImage {
        &self.pixels
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(0, 0, self.width(), self.height())
    }

    /// Pixel-exact sub-image. The crop id is `"{id}@x,y,w,h"`.
    pub fn crop(&self, rect: Rect) -> Result<ImageHandle, ImageError> {
        if !rect.fits_within(self.width(), self.height()) {
            return Err(ImageError::OutOfBounds {
                rect,
                width: self.width(),
                height: self.height(),
            });
        }
        let sub = image::imageops::crop_imm(&*self.pixels, rect.x, rect.y, rect.w, rect.h).to_image();
        Ok(ImageHandle::new(
            format!("{}@{},{},{},{}", self.id, rect.x, rect.y, rect.w, rect.h),
            sub,
        ))
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Cursor::new(Vec::new());
        self.pixels
            .write_to(&mut out, ImageFormat::Png)
            .expect("PNG encoding into memory cannot fail");
        out.into_inner()
    }
}

impl fmt::Debug for ImageHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageHandle")
            .field("id", &self.id)
            .field("size", &(self.width(), self.height()))
            .field("digest", &&self.digest[..12])
            .finish()
    }
}

impl PartialEq for ImageHandle {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id && self.digest == other.digest
    }
}

impl Serialize for ImageHandle {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.id)
    }
}

fn pixel_digest(img: &RgbaImage) -> String {
    let mut hasher = Sha256::new();
    hasher.update(img.width().to_le_bytes());
    hasher.update(img.height().to_le_bytes());
    hasher.update(img.as_raw());
    hex::encode(hasher.finalize())
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> ImageHandle {
        ImageHandle::new(
            "g",
            RgbaImage::from_fn(w, h, |x, y| image::Rgba([x as u8, y as u8, (x ^ y) as u8, 255])),
        )
    }

    #[test]
    fn full_crop_is_identity() {
        let img = gradient(17, 9);
        let c = img.crop(img.bounds()).unwrap();
        assert_eq!(c.pixels(), img.pixels());
        assert_eq!(c.digest(), img.digest());
    }

    #[test]
    fn single_pixel_crop() {
        let img = gradient(17, 9);
        let c = img.crop(Rect::new(0, 0, 1, 1)).unwrap();
        assert_eq!((c.width(), c.height()), (1, 1));
        assert_eq!(c.pixels().get_pixel(0, 0), img.pixels().get_pixel(0, 0));
        let c = img.crop(Rect::new(5, 3, 2, 2)).unwrap();
        assert_eq!(c.pixels().get_pixel(1, 1), img.pixels().get_pixel(6, 4));
    }

    #[test]
    fn out_of_bounds_crop() {
        let img = gradient(10, 10);
        assert!(matches!(
            img.crop(Rect::new(5, 5, 6, 1)),
            Err(ImageError::OutOfBounds { .. })
        ));
        assert!(img.crop(Rect::new(0, 0, 0, 3)).is_err());
    }

    #[test]
    fn clip_signed_boxes() {
        assert_eq!(
            Rect::clip_signed(-5, -5, 20, 20, 100, 100),
            Some(Rect::new(0, 0, 15, 15))
        );
        assert_eq!(Rect::clip_signed(200, 0, 20, 20, 100, 100), None);
        assert_eq!(
            Rect::clip_signed(90, 90, 20, 20, 100, 100),
            Some(Rect::new(90, 90, 10, 10))
        );
        assert_eq!(Rect::clip_signed(0, 0, 0, 20, 100, 100), None);
    }

    #[test]
    fn digest_tracks_pixels() {
        let a = ImageHandle::solid("a", 4, 4, [1, 2, 3, 255]);
        let b = ImageHandle::solid("b", 4, 4, [1, 2, 3, 255]);
        let c = ImageHandle::solid("c", 4, 4, [1, 2, 4, 255]);
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        let round = ImageHandle::from_bytes("a", &a.to_png()).unwrap();
        assert_eq!(round.digest(), a.digest());
    }
}
