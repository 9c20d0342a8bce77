use geoscout_core::{GeoLabel, Rect};
use geoscout_defense::{apply_visual, DefenseSpec, Method, Placement};
use image::{Rgba, RgbaImage};

/// Ten synthetic photos of assorted sizes and textures.
fn corpus() -> Vec<RgbaImage> {
    let sizes = [
        (480, 360),
        (640, 480),
        (800, 600),
        (1000, 800),
        (1024, 768),
        (1280, 720),
        (600, 900),
        (720, 1280),
        (512, 512),
        (1600, 400),
    ];
    sizes
        .iter()
        .enumerate()
        .map(|(k, &(w, h))| {
            RgbaImage::from_fn(w, h, |x, y| {
                let v = x.wrapping_mul(31 + k as u32) ^ y.wrapping_mul(17) ^ (x * y) >> 3;
                Rgba([v as u8, (v >> 8) as u8, (x + y + k as u32) as u8, 255 - (k as u8 * 7)])
            })
        })
        .collect()
}

/// Every pixel outside `region` must be identical; returns how many
/// pixels inside it changed.
fn assert_local(before: &RgbaImage, after: &RgbaImage, region: Rect) -> usize {
    assert_eq!(before.dimensions(), after.dimensions());
    assert!(region.fits_within(before.width(), before.height()), "{region:?}");
    let mut changed_inside = 0;
    for (x, y, p) in after.enumerate_pixels() {
        let q = before.get_pixel(x, y);
        if region.contains_point(x, y) {
            changed_inside += (p != q) as usize;
        } else {
            assert_eq!(p, q, "pixel ({x}, {y}) outside {region:?} changed");
        }
    }
    changed_inside
}

fn specs() -> Vec<DefenseSpec> {
    vec![
        DefenseSpec::new(Method::Watermark),
        DefenseSpec {
            placement: Some(Placement::TopBanner),
            opacity: Some(1.0),
            ..DefenseSpec::new(Method::Watermark)
        },
        DefenseSpec {
            fake_label: Some(GeoLabel::place(Some("Beijing"), None, "China")),
            ..DefenseSpec::new(Method::Vpi)
        },
        DefenseSpec {
            fake_label: Some(GeoLabel::country_only("Japan")),
            placement: Some(Placement::CornerSe),
            ..DefenseSpec::new(Method::Vpi)
        },
        DefenseSpec::new(Method::Trigger),
        DefenseSpec {
            placement: Some(Placement::CornerNe),
            opacity: Some(0.5),
            ..DefenseSpec::new(Method::Trigger)
        },
    ]
}

#[test]
fn visual_defenses_stay_in_their_region() {
    for img in corpus() {
        for spec in specs() {
            let out = apply_visual(&img, &spec).unwrap();
            let changed = assert_local(&img, &out.image, out.region);
            assert!(changed > 0, "{:?} changed nothing", spec.method);
        }
    }
}

#[test]
fn default_watermark_band_on_1000x800() {
    let img = &corpus()[3];
    let out = apply_visual(img, &DefenseSpec::new(Method::Watermark)).unwrap();
    assert_eq!(out.region, Rect::new(0, 736, 1000, 64));
}

#[test]
fn faint_trigger_moves_pixels_by_at_most_three() {
    let spec = DefenseSpec {
        opacity: Some(0.01),
        ..DefenseSpec::new(Method::Trigger)
    };
    let bound = (0.01f64 * 255.0).ceil() as i32;
    for img in corpus() {
        let out = apply_visual(&img, &spec).unwrap();
        assert_local(&img, &out.image, out.region);
        let max = img
            .pixels()
            .zip(out.image.pixels())
            .flat_map(|(a, b)| (0..4).map(move |c| (a[c] as i32 - b[c] as i32).abs()))
            .max()
            .unwrap();
        assert!(max <= bound, "delta {max}");
    }
}

#[test]
fn custom_icon_and_png_round_trip() {
    let mut icon = Vec::new();
    RgbaImage::from_pixel(10, 10, Rgba([255, 0, 0, 255]))
        .write_to(&mut std::io::Cursor::new(&mut icon), image::ImageFormat::Png)
        .unwrap();
    let spec = DefenseSpec {
        icon: Some(icon),
        opacity: Some(1.0),
        ..DefenseSpec::new(Method::Trigger)
    };
    let img = &corpus()[1];
    let out = apply_visual(img, &spec).unwrap();
    assert_eq!(out.region.w, 38);
    assert_eq!(out.region.h, 38);
    assert_eq!(
        out.image.get_pixel(out.region.x + 19, out.region.y + 19).0,
        [255, 0, 0, 255]
    );

    let mut png = Vec::new();
    out.image
        .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .unwrap();
    let back = image::load_from_memory(&png).unwrap().to_rgba8();
    assert_eq!(back, out.image);
}
