//! Visible overlays: text banners and captions, and icon triggers.

use font8x8::{UnicodeFonts, BASIC_FONTS, LATIN_FONTS};
use geoscout_core::Rect;
use image::{imageops, Rgba, RgbaImage};

use crate::{DefenseError, Placement};

/// Smallest glyph height, in pixels, a text overlay may use.
pub const MIN_FONT_PX: u32 = 10;
/// Banner height as a fraction of image height.
pub const BANNER_FRACTION: f64 = 0.08;
/// Trigger icon width as a fraction of image width.
pub const TRIGGER_FRACTION: f64 = 0.06;
/// Caption glyph height as a fraction of the shorter image side.
const CAPTION_FRACTION: f64 = 0.05;
/// Glyph height as a fraction of the banner height.
const BANNER_GLYPH_FRACTION: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextStyle {
    pub fill: [u8; 3],
    pub ink: [u8; 3],
}

impl Default for TextStyle {
    fn default() -> Self {
        TextStyle {
            fill: [0, 0, 0],
            ink: [255, 255, 255],
        }
    }
}

/// Where a text overlay goes and how large its glyphs are.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextLayout {
    pub rect: Rect,
    pub font_px: u32,
}

fn glyph(c: char) -> [u8; 8] {
    BASIC_FONTS
        .get(c)
        .or_else(|| LATIN_FONTS.get(c))
        .or_else(|| BASIC_FONTS.get('?'))
        .expect("the basic font covers '?'")
}

fn edge_margin(width: u32, height: u32) -> u32 {
    (width.min(height) / 50).max(1)
}

/// Places `text` for an image of the given size. Banners span the full
/// width at [`BANNER_FRACTION`] of the height; corner captions hug their
/// text. Glyphs shrink to fit the width but never below [`MIN_FONT_PX`].
pub fn layout_text(width: u32, height: u32, text: &str, placement: Placement) -> Result<TextLayout, DefenseError> {
    let chars = text.chars().count().max(1) as u32;
    let too_long = |font_px: u32| DefenseError::TextTooLong {
        chars: chars as usize,
        width,
        height,
        font_px,
    };
    match placement {
        Placement::BottomBanner | Placement::TopBanner => {
            let band = ((height as f64 * BANNER_FRACTION).round() as u32).clamp(1, height);
            let pad = (band / 8).max(1);
            let by_height = (band as f64 * BANNER_GLYPH_FRACTION).floor() as u32;
            let by_width = width.saturating_sub(2 * pad) / chars;
            let font_px = by_height.min(by_width);
            if font_px < MIN_FONT_PX {
                return Err(too_long(font_px));
            }
            let y = match placement {
                Placement::TopBanner => 0,
                _ => height - band,
            };
            Ok(TextLayout {
                rect: Rect::new(0, y, width, band),
                font_px,
            })
        }
        _ => {
            let margin = edge_margin(width, height);
            let target = ((width.min(height) as f64 * CAPTION_FRACTION).round() as u32).max(MIN_FONT_PX);
            let pad = (target / 4).max(1);
            let by_width = width.saturating_sub(2 * margin + 2 * pad) / chars;
            let by_height = height.saturating_sub(2 * margin + 2 * pad);
            let font_px = target.min(by_width).min(by_height);
            if font_px < MIN_FONT_PX {
                return Err(too_long(font_px));
            }
            let (w, h) = (chars * font_px + 2 * pad, font_px + 2 * pad);
            let (x, y) = corner_origin(width, height, w, h, margin, placement);
            Ok(TextLayout {
                rect: Rect::new(x, y, w, h),
                font_px,
            })
        }
    }
}

fn corner_origin(width: u32, height: u32, w: u32, h: u32, margin: u32, placement: Placement) -> (u32, u32) {
    let left = margin;
    let right = width.saturating_sub(w + margin);
    let top = margin;
    let bottom = height.saturating_sub(h + margin);
    match placement {
        Placement::CornerNw => (left, top),
        Placement::CornerNe => (right, top),
        Placement::CornerSw => (left, bottom),
        Placement::CornerSe => (right, bottom),
        Placement::TopBanner => (0, 0),
        Placement::BottomBanner => (0, height.saturating_sub(h)),
    }
}

fn blend_channel(under: u8, over: u8, alpha: f64) -> u8 {
    (under as f64 * (1.0 - alpha) + over as f64 * alpha).round() as u8
}

fn blend(px: &mut Rgba<u8>, color: [u8; 3], alpha: f64) {
    for c in 0..3 {
        px[c] = blend_channel(px[c], color[c], alpha);
    }
    px[3] = blend_channel(px[3], 255, alpha);
}

/// Draws a filled box at `layout.rect` and the text centred inside it,
/// both blended at `opacity`. Only pixels inside the rectangle change.
pub fn draw_text(img: &mut RgbaImage, text: &str, layout: TextLayout, style: TextStyle, opacity: f64) {
    let TextLayout { rect, font_px } = layout;
    let chars: Vec<char> = text.chars().collect();
    let text_w = chars.len() as u32 * font_px;
    let x0 = rect.x + rect.w.saturating_sub(text_w) / 2;
    let y0 = rect.y + rect.h.saturating_sub(font_px) / 2;
    for y in rect.y..rect.bottom() {
        for x in rect.x..rect.right() {
            let inked = x >= x0 && y >= y0 && y < y0 + font_px && x < x0 + text_w && {
                let (dx, dy) = (x - x0, y - y0);
                let rows = glyph(chars[(dx / font_px) as usize]);
                let gx = (dx % font_px) * 8 / font_px;
                let gy = dy * 8 / font_px;
                rows[gy as usize] >> gx & 1 == 1
            };
            let color = if inked { style.ink } else { style.fill };
            blend(img.get_pixel_mut(x, y), color, opacity);
        }
    }
}

/// The default trigger icon: a light obelisk on a transparent ground.
pub fn default_icon() -> RgbaImage {
    let (w, h) = (64u32, 160u32);
    let mut icon = RgbaImage::new(w, h);
    let cx = w as f64 / 2.0;
    let (tip, shaft_top, base_top) = (4.0, 30.0, 146.0);
    for y in 0..h {
        let fy = y as f64 + 0.5;
        let half = if fy < tip {
            continue;
        } else if fy < shaft_top {
            // Pyramidion: widens linearly from the tip to the shaft.
            12.0 * (fy - tip) / (shaft_top - tip)
        } else if fy < base_top {
            12.0 + 6.0 * (fy - shaft_top) / (base_top - shaft_top)
        } else {
            26.0
        };
        for x in 0..w {
            let dx = (x as f64 + 0.5 - cx).abs();
            if dx <= half {
                let shade = if x as f64 + 0.5 < cx { 236 } else { 196 };
                icon.put_pixel(x, y, Rgba([shade, shade, shade - 24, 255]));
            }
        }
    }
    icon
}

/// Where a trigger icon of `icon_w × icon_h` lands after scaling.
pub fn trigger_rect(width: u32, height: u32, icon_w: u32, icon_h: u32, placement: Placement) -> Rect {
    let w = ((width as f64 * TRIGGER_FRACTION).round() as u32).clamp(1, width);
    let h = ((w as f64 * icon_h as f64 / icon_w as f64).round() as u32).clamp(1, height);
    let margin = edge_margin(width, height);
    let (x, y) = match placement {
        Placement::TopBanner => ((width - w) / 2, 0),
        Placement::BottomBanner => ((width - w) / 2, height - h),
        other => corner_origin(width, height, w, h, margin, other),
    };
    Rect::new(x, y, w, h)
}

/// Alpha-composites `icon`, scaled into `rect`, at `opacity`.
pub fn composite_icon(img: &mut RgbaImage, icon: &RgbaImage, rect: Rect, opacity: f64) {
    let scaled = imageops::resize(icon, rect.w, rect.h, imageops::FilterType::Triangle);
    for (ix, iy, over) in scaled.enumerate_pixels() {
        let alpha = opacity * over[3] as f64 / 255.0;
        if alpha > 0.0 {
            blend(
                img.get_pixel_mut(rect.x + ix, rect.y + iy),
                [over[0], over[1], over[2]],
                alpha,
            );
        }
    }
}
