use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgba, RgbaImage};
use serde_json::{json, Value};

const EASY_CUES: &str = r#"{"landmarks_present": true, "text_visibility": "abundant",
 "architecture_distinctive": true, "geographic_features_unique": true, "image_quality": "excellent",
 "contextual_clues": "many", "scene_type": "urban"}"#;

fn geoscout(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoscout"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_png(path: &Path, w: u32, h: u32, seed: u8) {
    RgbaImage::from_fn(w, h, |x, y| Rgba([(x as u8).wrapping_mul(seed), y as u8, seed, 255]))
        .save(path)
        .unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

/// Three labelled photos, direct answers for two of them, and a manifest.
struct Corpus {
    dir: tempfile::TempDir,
    manifest: PathBuf,
    fixtures: PathBuf,
}

fn corpus(script_all: bool) -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let images = [("tokyo", 1u8), ("lima", 2), ("oslo", 3)];
    for (id, seed) in images {
        write_png(&dir.path().join(format!("{id}.png")), 64, 48, seed);
    }
    let manifest = dir.path().join("manifest.csv");
    std::fs::write(
        &manifest,
        "image_path,country,region,city\n\
         tokyo.png,Japan,Tokyo,Tokyo\n\
         lima.png,Peru,Lima,Lima\n\
         oslo.png,Norway,Oslo,Oslo\n",
    )
    .unwrap();
    let mut vision = json!({
        "*|cues": EASY_CUES,
        "tokyo|direct": "Tokyo, Tokyo, Japan\nKanji shop signs.",
        "lima|direct": "Santiago, Santiago Metropolitan, Chile\nColonial balconies.",
    });
    if script_all {
        vision["oslo|direct"] = json!("Oslo, Oslo, Norway\nFjord.");
    }
    let fixtures = dir.path().join("fixtures.json");
    std::fs::write(&fixtures, serde_json::to_vec(&json!({ "vision": vision })).unwrap()).unwrap();
    Corpus {
        dir,
        manifest,
        fixtures,
    }
}

#[test]
fn help_exits_zero() {
    let out = geoscout(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "assess", "analyze", "batch", "defend", "eval", "ablate", "heatgrid", "memorize",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn analyze_with_mock_writes_all_outputs() {
    let c = corpus(true);
    let out_dir = c.dir.path().join("out");
    let out = geoscout(&[
        "analyze",
        "--image",
        s(&c.dir.path().join("tokyo.png")),
        "--mock",
        s(&c.fixtures),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        "tokyo\tTokyo, Tokyo, Japan"
    );

    let pred = read_json(&out_dir.join("tokyo/prediction.json"));
    assert_eq!(pred["prediction"]["label"]["city"], "Tokyo");
    assert_eq!(pred["difficulty"]["level"], "easy");
    assert!(out_dir.join("tokyo/report.md").is_file());
    assert!(out_dir.join("tokyo/crops").is_dir());
    assert!(out_dir.join("tokyo/search").is_dir());

    let log = read_json(&out_dir.join("run_log.json"));
    assert_eq!(log["command"], "analyze");
    assert_eq!(log["exit_code"], 0);
    assert_eq!(log["calls"]["vision"], 2);
    assert_eq!(log["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(log["config_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn batch_is_reproducible_and_scores() {
    let c = corpus(true);
    let run = |name: &str| {
        let out_dir = c.dir.path().join(name);
        let out = geoscout(&[
            "batch",
            "--manifest",
            s(&c.manifest),
            "--mock",
            s(&c.fixtures),
            "--workers",
            "3",
            "--out",
            s(&out_dir),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let a = run("a");
    let b = run("b");
    for file in [
        "batch.json",
        "tokyo/prediction.json",
        "lima/report.md",
        "oslo/prediction.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }

    let eval_dir = c.dir.path().join("eval");
    let out = geoscout(&[
        "eval",
        "--manifest",
        s(&c.manifest),
        "--predictions",
        s(&a),
        "--out",
        s(&eval_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = read_json(&eval_dir.join("metrics.json"));
    assert_eq!(
        metrics["rows"]["overall"],
        json!({"count": 3, "country": 2, "region": 2, "city": 2, "unknown": 0})
    );
    assert_eq!(metrics["rows"]["easy"]["count"], 3);
    let report = std::fs::read_to_string(eval_dir.join("report.md")).unwrap();
    assert!(
        report.contains("| Difficulty | Country | State/Region | City | Unknown |"),
        "{report}"
    );
    assert!(
        report.contains("| Overall (3) | 66.7% | 66.7% | 66.7% | 0.0% |"),
        "{report}"
    );
    let lines = std::fs::read_to_string(eval_dir.join("judgments.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);

    let again = c.dir.path().join("eval2");
    let out = geoscout(&[
        "eval",
        "--manifest",
        s(&c.manifest),
        "--predictions",
        s(&a),
        "--baseline",
        s(&eval_dir.join("metrics.json")),
        "--format",
        "csv",
        "--out",
        s(&again),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(again.join("report.csv")).unwrap();
    assert!(csv.starts_with("stratum,count,country_pct"), "{csv}");
    assert!(csv.contains("country_delta"), "{csv}");
}

#[test]
fn batch_with_a_failed_image_exits_one_and_keeps_the_rest() {
    let c = corpus(false);
    let out_dir = c.dir.path().join("out");
    let out = geoscout(&[
        "batch",
        "--manifest",
        s(&c.manifest),
        "--mock",
        s(&c.fixtures),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let summary = read_json(&out_dir.join("batch.json"));
    assert_eq!(summary["failed"], 1);
    assert!(summary["entries"][2]["error"].is_string());
    let failed = read_json(&out_dir.join("oslo/prediction.json"));
    assert!(failed["prediction"]["label"].is_null());
    assert!(out_dir.join("tokyo/prediction.json").is_file());
    assert_eq!(read_json(&out_dir.join("run_log.json"))["exit_code"], 1);
}

#[test]
fn bad_config_exits_two_with_a_run_log() {
    let c = corpus(true);
    let cfg = c.dir.path().join("bad.toml");
    std::fs::write(&cfg, "colour = 3\n").unwrap();
    let out_dir = c.dir.path().join("out");
    let out = geoscout(&[
        "analyze",
        "--image",
        s(&c.dir.path().join("tokyo.png")),
        "--config",
        s(&cfg),
        "--mock",
        s(&c.fixtures),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let log = read_json(&out_dir.join("run_log.json"));
    assert_eq!(log["exit_code"], 2);
    assert!(log["error"].as_str().unwrap().contains("invalid config"));

    let out = geoscout(&[
        "analyze",
        "--image",
        s(&c.dir.path().join("tokyo.png")),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(2), "no providers is a usage error");

    let out = geoscout(&["analyze", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_manifest_exits_two() {
    let c = corpus(true);
    let bad = c.dir.path().join("bad.csv");
    std::fs::write(&bad, "image_path,country,region,city\n,Japan,,\n").unwrap();
    let out = geoscout(&[
        "batch",
        "--manifest",
        s(&bad),
        "--mock",
        s(&c.fixtures),
        "--out",
        s(&c.dir.path().join("out")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn defend_visual_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("street.png");
    write_png(&png, 640, 480, 9);
    let out_dir = dir.path().join("out");
    let out = geoscout(&[
        "defend",
        "--method",
        "watermark",
        "--image",
        s(&png),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let log = read_json(&out_dir.join("street.watermark.json"));
    assert_eq!(log["region"], json!({"x": 0, "y": 442, "w": 640, "h": 38}));
    assert_eq!(log["text"], "Geolocation of this image is prohibited.");
    let defended = image::open(out_dir.join("street.watermark.png")).unwrap().to_rgba8();
    assert_eq!(defended.dimensions(), (640, 480));

    let small = dir.path().join("small.png");
    write_png(&small, 400, 300, 9);
    let out = geoscout(&[
        "defend",
        "--method",
        "watermark",
        "--image",
        s(&small),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("do not fit"));

    let out = geoscout(&["defend", "--method", "vpi", "--image", s(&png), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2), "vpi needs a fake label");

    let jpg = dir.path().join("photo.jpg");
    image::DynamicImage::ImageRgba8(RgbaImage::from_pixel(32, 32, Rgba([10, 20, 30, 255])))
        .to_rgb8()
        .save(&jpg)
        .unwrap();
    let out = geoscout(&[
        "defend",
        "--method",
        "exif-forge",
        "--coords",
        "-33.8568,151.2153",
        "--image",
        s(&jpg),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let log = read_json(&out_dir.join("photo.exif_forge.json"));
    assert!(log["gps_before"].is_null());
    let after = log["gps_after"].as_array().unwrap();
    assert!((after[0].as_f64().unwrap() + 33.8568).abs() < 1e-6);
    assert!((after[1].as_f64().unwrap() - 151.2153).abs() < 1e-6);

    let out = geoscout(&[
        "defend",
        "--method",
        "exif_strip",
        "--image",
        s(&png),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(2), "metadata defenses need a JPEG");
}

#[test]
fn ablate_compares_presets_against_the_first() {
    let c = corpus(true);
    let out_dir = c.dir.path().join("out");
    let out = geoscout(&[
        "ablate",
        "--manifest",
        s(&c.manifest),
        "--preset",
        "baseline,agent",
        "--mock",
        s(&c.fixtures),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(out_dir.join("comparison_country.md")).unwrap();
    let header = table.lines().next().unwrap();
    assert!(
        header.find("baseline").unwrap() < header.find("agent").unwrap(),
        "{header}"
    );
    assert!(out_dir.join("baseline/tokyo/prediction.json").is_file());
    assert!(out_dir.join("agent/metrics.json").is_file());
    let assessed = read_json(&out_dir.join("assessments.json"));
    assert_eq!(assessed.as_array().unwrap().len(), 3);
    let log = read_json(&out_dir.join("run_log.json"));
    assert_eq!(
        log["calls"]["vision"],
        3 + 3 + 3,
        "one assessment per image plus one answer per preset"
    );
}

#[test]
fn assess_prints_levels() {
    let c = corpus(true);
    let out_dir = c.dir.path().join("out");
    let out = geoscout(&[
        "assess",
        "--image",
        s(&c.dir.path().join("lima.png")),
        "--image",
        s(&c.dir.path().join("oslo.png")),
        "--mock",
        s(&c.fixtures),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().all(|l| l.contains("\tEasy\t")), "{text}");
    assert_eq!(read_json(&out_dir.join("assessments.json"))[1]["image_id"], "oslo");
}

#[test]
fn heatgrid_writes_png_and_csv() {
    let c = corpus(true);
    let fixtures = c.dir.path().join("embed.json");
    std::fs::write(&fixtures, r#"{"embeddings": {"dimension": 8}}"#).unwrap();
    let out_dir = c.dir.path().join("out");
    let out = geoscout(&[
        "heatgrid",
        "--image",
        s(&c.dir.path().join("tokyo.png")),
        "--label",
        "Tokyo, Tokyo, Japan",
        "--window",
        "16",
        "--stride",
        "8",
        "--scale",
        "4",
        "--mock",
        s(&fixtures),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_json(&out_dir.join("tokyo.heatgrid.json"));
    assert_eq!((summary["rows"].as_u64(), summary["cols"].as_u64()), (Some(5), Some(7)));
    assert_eq!(summary["prompt"], "This image was taken in Tokyo, Tokyo, Japan");
    let csv = std::fs::read_to_string(out_dir.join("tokyo.heatgrid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let png = image::open(out_dir.join("tokyo.heatgrid.png")).unwrap();
    assert_eq!((png.width(), png.height()), (28, 20));

    let out = geoscout(&[
        "heatgrid",
        "--image",
        s(&c.dir.path().join("tokyo.png")),
        "--prompt",
        "street",
        "--window",
        "100",
        "--mock",
        s(&fixtures),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(2), "window larger than the image");
}

#[test]
fn memorize_stores_improved_prompts() {
    let c = corpus(true);
    let manifest = c.dir.path().join("one.csv");
    std::fs::write(
        &manifest,
        "image_path,country,region,city\ntokyo.png,Japan,Tokyo,Tokyo\n",
    )
    .unwrap();
    let fixtures = c.dir.path().join("memo.json");
    let fx = json!({
        "vision": {"*|refine_prompt": ["Neon kanji signs in Tokyo, Japan"]},
        "embeddings": {
            "dimension": 4,
            "vectors": {
                "image:tokyo": [1.0, 0.0, 0.0, 0.0],
                "text:This image was taken in Tokyo, Tokyo, Japan": [0.0, 1.0, 0.0, 0.0],
                "text:Neon kanji signs in Tokyo, Japan": [1.0, 0.1, 0.0, 0.0]
            }
        }
    });
    std::fs::write(&fixtures, serde_json::to_vec(&fx).unwrap()).unwrap();
    let memory = c.dir.path().join("memory.bin");
    let out_dir = c.dir.path().join("out");
    let args = [
        "memorize",
        "--manifest",
        s(&manifest),
        "--mock",
        s(&fixtures),
        "--memory",
        s(&memory),
        "--out",
        s(&out_dir),
    ];
    let out = geoscout(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let entries = read_json(&out_dir.join("memorize.json"));
    assert_eq!(entries[0]["stored"], true);
    assert!(memory.is_file());

    let no_memory: Vec<&str> = args
        .iter()
        .copied()
        .filter(|a| *a != "--memory" && *a != s(&memory))
        .collect();
    assert_eq!(geoscout(&no_memory).status.code(), Some(2));
}
