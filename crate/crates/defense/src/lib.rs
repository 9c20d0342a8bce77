//! Defenses against image geolocation: a visible prohibition watermark,
//! a misleading location caption, a distracting trigger icon, and GPS
//! metadata removal or forgery.
//!
//! Visual defenses change only the pixels inside the rectangle they
//! report; everything else in the raster is left bit-identical.

mod exif;
pub mod overlay;

use geoscout_core::{GeoLabel, Rect};
use image::RgbaImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use exif::{forge_gps, read_gps_exif, strip_gps, GpsExif, Rational, SECONDS_DENOMINATOR};
pub use overlay::{default_icon, TextStyle, MIN_FONT_PX};

/// Default watermark wording.
pub const DEFAULT_WATERMARK: &str = "Geolocation of this image is prohibited.";
pub const DEFAULT_OPACITY: f64 = 0.8;

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("invalid defense settings: {0}")]
    Config(String),
    #[error(
        "{chars} character(s) do not fit a {width}x{height} image at {MIN_FONT_PX} px or more (best fit {font_px} px)"
    )]
    TextTooLong {
        chars: usize,
        width: u32,
        height: u32,
        font_px: u32,
    },
    #[error("cannot decode trigger icon: {0}")]
    IconUnreadable(String),
    #[error("not a JPEG file: {0}")]
    NotJpeg(String),
    #[error("malformed Exif data: {0}")]
    MalformedExif(String),
    #[error("Exif segment would be {0} bytes, more than a JPEG segment can hold")]
    ExifTooLarge(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Watermark,
    Vpi,
    Trigger,
    ExifStrip,
    ExifForge,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Watermark,
        Method::Vpi,
        Method::Trigger,
        Method::ExifStrip,
        Method::ExifForge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Watermark => "watermark",
            Method::Vpi => "vpi",
            Method::Trigger => "trigger",
            Method::ExifStrip => "exif_strip",
            Method::ExifForge => "exif_forge",
        }
    }

    pub fn is_visual(self) -> bool {
        matches!(self, Method::Watermark | Method::Vpi | Method::Trigger)
    }

    fn default_placement(self) -> Placement {
        match self {
            Method::Vpi => Placement::CornerNw,
            Method::Trigger => Placement::CornerSe,
            _ => Placement::BottomBanner,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == key)
            .ok_or_else(|| format!("unknown defense {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    BottomBanner,
    TopBanner,
    CornerNw,
    CornerNe,
    CornerSw,
    CornerSe,
}

impl std::str::FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match key.as_str() {
            "bottom_banner" => Placement::BottomBanner,
            "top_banner" => Placement::TopBanner,
            "corner_nw" => Placement::CornerNw,
            "corner_ne" => Placement::CornerNe,
            "corner_sw" => Placement::CornerSw,
            "corner_se" => Placement::CornerSe,
            _ => return Err(format!("unknown placement {s:?}")),
        })
    }
}

/// One defense and its settings. Unset fields take per-method defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSpec {
    pub method: Method,
    /// Watermark wording.
    #[serde(default)]
    pub text: Option<String>,
    /// Place shown by `vpi`.
    #[serde(default)]
    pub fake_label: Option<GeoLabel>,
    /// Decimal `(lat, lon)` written by `exif_forge`.
    #[serde(default)]
    pub coords: Option<(f64, f64)>,
    /// Seed for random coordinates when `exif_forge` has none.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Encoded trigger icon; the bundled obelisk when absent.
    #[serde(skip)]
    pub icon: Option<Vec<u8>>,
    #[serde(default)]
    pub placement: Option<Placement>,
    #[serde(default)]
    pub opacity: Option<f64>,
    /// Let `exif_strip` drop an unparseable Exif segment whole.
    #[serde(default)]
    pub force: bool,
}

impl DefenseSpec {
    pub fn new(method: Method) -> Self {
        DefenseSpec {
            method,
            text: None,
            fake_label: None,
            coords: None,
            seed: None,
            icon: None,
            placement: None,
            opacity: None,
            force: false,
        }
    }

    pub fn placement(&self) -> Placement {
        self.placement.unwrap_or(self.method.default_placement())
    }

    pub fn opacity(&self) -> f64 {
        self.opacity.unwrap_or(DEFAULT_OPACITY)
    }

    pub fn validate(&self) -> Result<(), DefenseError> {
        let opacity = self.opacity();
        if !(opacity > 0.0 && opacity <= 1.0) {
            return Err(DefenseError::Config(format!("opacity {opacity} is outside (0, 1]")));
        }
        match self.method {
            Method::Vpi => match &self.fake_label {
                Some(l) if !l.is_empty() => {}
                _ => return Err(DefenseError::Config("vpi needs a fake location".into())),
            },
            Method::ExifForge => match self.coords {
                Some((lat, lon)) => check_coords(lat, lon)?,
                None if self.seed.is_some() => {}
                None => {
                    return Err(DefenseError::Config(
                        "exif_forge needs coordinates or a seed for random ones".into(),
                    ))
                }
            },
            Method::Watermark if self.text.as_deref().is_some_and(|t| t.trim().is_empty()) => {
                return Err(DefenseError::Config("watermark text is empty".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Text drawn by a text defense.
    pub fn overlay_text(&self) -> Option<String> {
        match self.method {
            Method::Watermark => Some(self.text.clone().unwrap_or_else(|| DEFAULT_WATERMARK.into())),
            Method::Vpi => self
                .fake_label
                .as_ref()
                .map(|l| format!("Location: {}", l.display_name())),
            _ => None,
        }
    }

    /// Coordinates `exif_forge` writes: the configured ones, or uniformly
    /// random ones drawn from the seed.
    pub fn forge_coords(&self) -> Result<(f64, f64), DefenseError> {
        if let Some(c) = self.coords {
            return Ok(c);
        }
        let seed = self
            .seed
            .ok_or_else(|| DefenseError::Config("exif_forge needs coordinates or a seed".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((rng.random_range(-90.0..=90.0), rng.random_range(-180.0..=180.0)))
    }
}

pub(crate) fn check_coords(lat: f64, lon: f64) -> Result<(), DefenseError> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(DefenseError::Config(format!(
            "coordinates ({lat}, {lon}) are outside lat [-90, 90], lon [-180, 180]"
        )));
    }
    Ok(())
}

/// A defended raster and the rectangle its overlay occupies.
#[derive(Clone, Debug)]
pub struct Defended {
    pub image: RgbaImage,
    pub region: Rect,
    pub text: Option<String>,
}

fn expect_method(spec: &DefenseSpec, method: Method) -> Result<(), DefenseError> {
    if spec.method != method {
        return Err(DefenseError::Config(format!(
            "expected a {method} spec, got {}",
            spec.method
        )));
    }
    spec.validate()
}

fn text_overlay(image: &RgbaImage, spec: &DefenseSpec) -> Result<Defended, DefenseError> {
    let text = spec.overlay_text().expect("text defenses have text");
    let layout = overlay::layout_text(image.width(), image.height(), &text, spec.placement())?;
    let mut out = image.clone();
    overlay::draw_text(&mut out, &text, layout, TextStyle::default(), spec.opacity());
    Ok(Defended {
        image: out,
        region: layout.rect,
        text: Some(text),
    })
}

/// Draws the prohibition notice in a banner.
pub fn apply_watermark(image: &RgbaImage, spec: &DefenseSpec) -> Result<Defended, DefenseError> {
    expect_method(spec, Method::Watermark)?;
    text_overlay(image, spec)
}

/// Captions the image with "Location: <fake place>".
pub fn apply_vpi(image: &RgbaImage, spec: &DefenseSpec) -> Result<Defended, DefenseError> {
    expect_method(spec, Method::Vpi)?;
    text_overlay(image, spec)
}

/// Composites the trigger icon near a corner.
pub fn apply_trigger(image: &RgbaImage, spec: &DefenseSpec) -> Result<Defended, DefenseError> {
    expect_method(spec, Method::Trigger)?;
    let icon = match &spec.icon {
        Some(bytes) => image::load_from_memory(bytes)
            .map_err(|e| DefenseError::IconUnreadable(e.to_string()))?
            .to_rgba8(),
        None => default_icon(),
    };
    if icon.width() == 0 || icon.height() == 0 {
        return Err(DefenseError::IconUnreadable("icon has no pixels".into()));
    }
    let rect = overlay::trigger_rect(
        image.width(),
        image.height(),
        icon.width(),
        icon.height(),
        spec.placement(),
    );
    let mut out = image.clone();
    overlay::composite_icon(&mut out, &icon, rect, spec.opacity());
    Ok(Defended {
        image: out,
        region: rect,
        text: None,
    })
}

/// Applies any visual defense.
pub fn apply_visual(image: &RgbaImage, spec: &DefenseSpec) -> Result<Defended, DefenseError> {
    match spec.method {
        Method::Watermark => apply_watermark(image, spec),
        Method::Vpi => apply_vpi(image, spec),
        Method::Trigger => apply_trigger(image, spec),
        m => Err(DefenseError::Config(format!("{m} is not a visual defense"))),
    }
}

/// Applies a metadata defense to JPEG bytes.
pub fn rewrite_exif(jpeg: &[u8], spec: &DefenseSpec) -> Result<Vec<u8>, DefenseError> {
    spec.validate()?;
    match spec.method {
        Method::ExifStrip => strip_gps(jpeg, spec.force),
        Method::ExifForge => {
            let (lat, lon) = spec.forge_coords()?;
            forge_gps(jpeg, &GpsExif::from_decimal(lat, lon)?)
        }
        m => Err(DefenseError::Config(format!("{m} is not a metadata defense"))),
    }
}
