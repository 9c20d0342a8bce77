//! `defend`: apply one privacy defense and log what changed.

use std::path::{Path, PathBuf};

use anyhow::anyhow;
use clap::Args;
use geoscout_core::imaging::sha256_hex;
use geoscout_core::{GeoLabel, Rect};
use geoscout_defense::{apply_visual, read_gps_exif, rewrite_exif, DefenseError, DefenseSpec, Method, Placement};
use serde::Serialize;

use super::{usage_error, write_bytes, write_json, Classify, CmdResult, Failure};
use crate::runlog::RunLog;

#[derive(Args, Clone, Debug)]
pub struct DefendArgs {
    /// watermark, vpi, trigger, exif_strip or exif_forge.
    #[arg(long)]
    pub method: Method,
    #[arg(long)]
    pub image: PathBuf,
    /// Watermark wording.
    #[arg(long)]
    pub text: Option<String>,
    /// Place shown by vpi, as "City, Region, Country".
    #[arg(long)]
    pub fake_label: Option<String>,
    /// Coordinates written by exif_forge, as "LAT,LON".
    #[arg(long, allow_hyphen_values = true)]
    pub coords: Option<String>,
    /// Seed for random exif_forge coordinates.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trigger icon image; a built-in obelisk when absent.
    #[arg(long)]
    pub icon: Option<PathBuf>,
    #[arg(long)]
    pub placement: Option<Placement>,
    /// Overlay opacity in (0, 1].
    #[arg(long)]
    pub opacity: Option<f64>,
    /// Let exif_strip drop an unreadable Exif segment entirely.
    #[arg(long)]
    pub force: bool,
}

/// The transform log written next to the defended file.
#[derive(Serialize)]
struct TransformLog {
    method: Method,
    spec: DefenseSpec,
    icon: Option<PathBuf>,
    input: PathBuf,
    input_sha256: String,
    output: PathBuf,
    output_sha256: String,
    region: Option<Rect>,
    text: Option<String>,
    gps_before: Option<(f64, f64)>,
    gps_after: Option<(f64, f64)>,
}

fn parse_coords(text: &str) -> Result<(f64, f64), Failure> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [lat, lon] => match (lat.parse(), lon.parse()) {
            (Ok(lat), Ok(lon)) => Ok((lat, lon)),
            _ => Err(usage_error(format!("coordinates {text:?} are not two numbers"))),
        },
        _ => Err(usage_error(format!("coordinates {text:?} should look like LAT,LON"))),
    }
}

fn classify(e: DefenseError) -> Failure {
    match e {
        DefenseError::ExifTooLarge(_) => Failure::Operational(e.into()),
        _ => Failure::Usage(e.into()),
    }
}

fn build_spec(args: &DefendArgs) -> Result<DefenseSpec, Failure> {
    let fake_label = match &args.fake_label {
        Some(t) => {
            Some(GeoLabel::parse_hierarchical(t).ok_or_else(|| usage_error(format!("fake label {t:?} is empty")))?)
        }
        None => None,
    };
    let icon = match &args.icon {
        Some(p) => Some(std::fs::read(p).map_err(|e| usage_error(format!("cannot read icon {}: {e}", p.display())))?),
        None => None,
    };
    let spec = DefenseSpec {
        method: args.method,
        text: args.text.clone(),
        fake_label,
        coords: args.coords.as_deref().map(parse_coords).transpose()?,
        seed: args.seed,
        icon,
        placement: args.placement,
        opacity: args.opacity,
        force: args.force,
    };
    spec.validate().map_err(classify)?;
    Ok(spec)
}

fn gps(bytes: &[u8]) -> Option<(f64, f64)> {
    read_gps_exif(bytes).ok().flatten().map(|g| g.to_decimal())
}

pub fn run(args: &DefendArgs, out: &Path, log: &mut RunLog) -> CmdResult {
    let spec = build_spec(args)?;
    log.input(&args.image);
    if let Some(icon) = &args.icon {
        log.input(icon);
    }
    let bytes =
        std::fs::read(&args.image).map_err(|e| usage_error(format!("cannot read {}: {e}", args.image.display())))?;
    let stem = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());

    let (output_bytes, ext, region, text) = if args.method.is_visual() {
        let raster = image::load_from_memory(&bytes)
            .map_err(|e| usage_error(format!("cannot decode {}: {e}", args.image.display())))?
            .to_rgba8();
        let defended = log
            .timed(args.method.as_str(), || apply_visual(&raster, &spec))
            .map_err(classify)?;
        let mut png = Vec::new();
        defended
            .image
            .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .operational()?;
        (png, "png", Some(defended.region), defended.text)
    } else {
        let rewritten = log
            .timed(args.method.as_str(), || rewrite_exif(&bytes, &spec))
            .map_err(classify)?;
        (rewritten, "jpg", None, None)
    };

    let output = out.join(format!("{stem}.{}.{ext}", args.method.as_str()));
    write_bytes(&output, &output_bytes, &mut log.outputs)?;
    let record = TransformLog {
        method: args.method,
        spec: spec.clone(),
        icon: args.icon.clone(),
        input: args.image.clone(),
        input_sha256: sha256_hex(&bytes),
        output: output.clone(),
        output_sha256: sha256_hex(&output_bytes),
        region,
        text,
        gps_before: if args.method.is_visual() { None } else { gps(&bytes) },
        gps_after: if args.method.is_visual() {
            None
        } else {
            gps(&output_bytes)
        },
    };
    write_json(
        &out.join(format!("{stem}.{}.json", args.method.as_str())),
        &record,
        &mut log.outputs,
    )?;
    if args.method == Method::ExifForge && record.gps_after.is_none() {
        return Err(Failure::Operational(anyhow!("forged file has no readable GPS block")));
    }
    println!("{}", output.display());
    Ok(())
}
