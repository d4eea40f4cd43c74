use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nightvis::commands::{member_file, DNB_ADJUSTED_CHANNEL, DNB_REFLECTANCE_CHANNEL, MEAN_FILE, STD_FILE};
use nightvis::dataset::{Manifest, Split, MANIFEST_NAME};
use nightvis::grid::{read_tile, write_tile, RasterTile, ReflectanceField};
use tempfile::TempDir;

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/tiny.json")
}

fn curves_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/curves")
}

fn nightvis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nightvis"))
        .arg("--config")
        .arg(tiny_config())
        .args(args)
        .output()
        .expect("spawn nightvis")
}

fn ok(args: &[&str]) -> String {
    let out = nightvis(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = nightvis(args);
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push((p.clone(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

/// A dataset plus trained diffusion model, built once per test.
struct Trained {
    dir: TempDir,
}

impl Trained {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let t = Self { dir };
        ok(&["synth", "--out", s(&t.data())]);
        ok(&["train", "--data", s(&t.data()), "--out", s(&t.model())]);
        t
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self) -> PathBuf {
        self.path("data")
    }

    fn model(&self) -> PathBuf {
        self.path("model")
    }
}

#[test]
fn synth_writes_pairs_and_refuses_to_overwrite() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let stdout = ok(&["synth", "--out", s(&data), "--n", "12", "--seed", "7"]);
    assert!(stdout.contains("12 tile pairs"));
    let manifest = Manifest::read(data.join(MANIFEST_NAME)).unwrap();
    assert_eq!(manifest.entries.len(), 12);
    let first = files(&data);
    assert_eq!(first.len(), 12 * 2 + 1);

    let (c, err) = code(&["synth", "--out", s(&data), "--n", "12", "--seed", "7"]);
    assert_eq!(c, 2, "{err}");
    assert!(err.contains("--force"));
    assert_eq!(files(&data), first);

    ok(&["synth", "--out", s(&data), "--n", "12", "--seed", "7", "--force"]);
    assert_eq!(files(&data), first);

    ok(&["synth", "--out", s(&data), "--n", "12", "--seed", "8", "--force"]);
    assert_ne!(files(&data), first);
}

#[test]
fn missing_parent_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("no/such/dir");
    assert_eq!(code(&["synth", "--out", s(&out)]).0, 3);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"seed": 1, "ensemble_sizes": 3}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_nightvis"))
        .args(["--config", s(&cfg), "synth", "--out", s(&dir.path().join("d"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_resume_matches_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", s(&data)]);
    let cfg_path = |steps: usize| {
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(tiny_config()).unwrap()).unwrap();
        v["train"]["max_steps"] = steps.into();
        let p = dir.path().join(format!("steps{steps}.json"));
        fs::write(&p, v.to_string()).unwrap();
        p
    };
    let (four, eight) = (cfg_path(4), cfg_path(8));
    let run = |cfg: &Path, out: &Path, resume: bool| {
        let mut args = vec!["--config", s(cfg), "train", "--data", s(&data), "--out", s(out)];
        if resume {
            args.push("--resume");
        }
        let st = Command::new(env!("CARGO_BIN_EXE_nightvis")).args(&args).output().unwrap();
        assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    };
    let straight = dir.path().join("straight");
    let resumed = dir.path().join("resumed");
    run(&eight, &straight, false);
    run(&four, &resumed, false);
    run(&eight, &resumed, true);
    for f in ["params.nvck", "ema.nvck", "adam_m.nvck", "adam_v.nvck", "loss.csv"] {
        assert_eq!(fs::read(straight.join(f)).unwrap(), fs::read(resumed.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn training_loss_decreases() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", s(&data)]);
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(tiny_config()).unwrap()).unwrap();
    v["train"]["max_steps"] = 120.into();
    v["train"]["checkpoint_every"] = 0.into();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, v.to_string()).unwrap();
    for mode in ["diffusion", "baseline"] {
        let out = dir.path().join(mode);
        let st = Command::new(env!("CARGO_BIN_EXE_nightvis"))
            .args(["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&out), "--mode", mode])
            .output()
            .unwrap();
        assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
        let losses: Vec<f64> = fs::read_to_string(out.join("loss.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(losses.len(), 120);
        let window = |r: std::ops::Range<usize>| losses[r.clone()].iter().sum::<f64>() / r.len() as f64;
        let (head, tail) = (window(0..30), window(90..120));
        assert!(tail < head, "{mode}: smoothed loss {head} -> {tail}");
    }
}

#[test]
fn retrieve_writes_members_mean_and_std() {
    let t = Trained::new();
    let pred = t.path("pred");
    ok(&["retrieve", "--checkpoint", s(&t.model()), "--data", s(&t.data()), "--out", s(&pred), "--n", "3"]);
    let manifest = Manifest::read(t.data().join(MANIFEST_NAME)).unwrap();
    let tests = manifest.split(Split::Test);
    assert!(!tests.is_empty());
    for e in &tests {
        let d = pred.join(Path::new(&e.cond_path).file_stem().unwrap());
        let members: Vec<ReflectanceField> = (0..3)
            .map(|i| ReflectanceField::from_tile(&read_tile(d.join(member_file(i))).unwrap()).unwrap())
            .collect();
        assert!(!d.join(member_file(3)).exists());
        let mean = ReflectanceField::from_tile(&read_tile(d.join(MEAN_FILE)).unwrap()).unwrap();
        let std = ReflectanceField::from_tile(&read_tile(d.join(STD_FILE)).unwrap()).unwrap();
        for (k, m) in mean.data.iter().enumerate() {
            let avg = members.iter().map(|f| f.data[k] as f64).sum::<f64>() / 3.0;
            assert!((avg - *m as f64).abs() < 1e-6);
        }
        assert!(std.data.iter().all(|&v| v >= 0.0));
        assert_ne!(members[0].data, members[1].data);
    }

    let again = t.path("again");
    ok(&["retrieve", "--checkpoint", s(&t.model()), "--data", s(&t.data()), "--out", s(&again), "--n", "3"]);
    let strip = |v: Vec<(PathBuf, Vec<u8>)>, root: &Path| -> Vec<(PathBuf, Vec<u8>)> {
        v.into_iter().map(|(p, b)| (p.strip_prefix(root).unwrap().to_path_buf(), b)).collect()
    };
    assert_eq!(strip(files(&pred), &pred), strip(files(&again), &again));

    let (c, _) = code(&["retrieve", "--checkpoint", s(&t.model()), "--data", s(&t.data()), "--out", s(&pred), "--n", "3"]);
    assert_eq!(c, 2);

    let other = t.path("other-seed");
    let out = Command::new(env!("CARGO_BIN_EXE_nightvis"))
        .args(["--config", s(&tiny_config()), "--seed", "99"])
        .args(["retrieve", "--checkpoint", s(&t.model()), "--data", s(&t.data()), "--out", s(&other), "--n", "3"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_ne!(strip(files(&pred), &pred), strip(files(&other), &other));
}

#[test]
fn evaluate_writes_reports_and_rgb_renders() {
    let t = Trained::new();
    let pred = t.path("pred");
    let reports = t.path("reports");
    ok(&["retrieve", "--checkpoint", s(&t.model()), "--data", s(&t.data()), "--out", s(&pred), "--n", "4"]);
    let stdout = ok(&["evaluate", "--data", s(&t.data()), "--pred", s(&pred), "--out", s(&reports)]);
    assert!(stdout.contains("overall"));

    let metrics = fs::read_to_string(reports.join("metrics.csv")).unwrap();
    let bands: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(metrics.lines().next().unwrap(), "band,mae,rmse,ssim,psnr,n_pixels");
    assert_eq!(bands, ["0.47", "0.65", "0.825", "overall"]);

    let sizes = |name: &str| -> Vec<usize> {
        fs::read_to_string(reports.join(name))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect()
    };
    assert_eq!(sizes("sweep.csv"), [1, 2, 4]);
    let coverage: Vec<f64> = fs::read_to_string(reports.join("coverage.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(coverage[0], 0.0);
    assert!(coverage.windows(2).all(|w| w[0] <= w[1]));

    let (c, _) = code(&["evaluate", "--data", s(&t.data()), "--pred", s(&pred), "--out", s(&reports)]);
    assert_eq!(c, 2);
    ok(&["evaluate", "--data", s(&t.data()), "--pred", s(&pred), "--out", s(&reports), "--sizes", "1,2", "--force"]);
    assert_eq!(sizes("sweep.csv"), [1, 2]);

    let tile = files(&pred).into_iter().find(|(p, _)| p.ends_with(MEAN_FILE)).unwrap().0;
    let png = t.path("mean.png");
    ok(&["rgb", "--tile", s(&tile), "--out", s(&png)]);
    let first = fs::read(&png).unwrap();
    assert_eq!(&first[..8], b"\x89PNG\r\n\x1a\n");
    ok(&["rgb", "--tile", s(&tile), "--out", s(&png), "--force"]);
    assert_eq!(fs::read(&png).unwrap(), first);

    let (c, err) = code(&["rgb", "--tile", s(&t.data().join(MANIFEST_NAME)), "--out", s(&t.path("x.png"))]);
    assert_eq!(c, 4, "{err}");
}

#[test]
fn baseline_retrieval_is_a_single_member() {
    let t = Trained::new();
    let model = t.path("baseline");
    let pred = t.path("pred");
    ok(&["train", "--data", s(&t.data()), "--out", s(&model), "--mode", "baseline"]);
    ok(&["retrieve", "--checkpoint", s(&model), "--data", s(&t.data()), "--out", s(&pred), "--n", "5"]);
    let dirs: Vec<PathBuf> = fs::read_dir(&pred).unwrap().map(|e| e.unwrap().path()).collect();
    for d in dirs {
        assert!(d.join(member_file(0)).exists());
        assert!(!d.join(member_file(1)).exists());
        assert_eq!(fs::read(d.join(member_file(0))).unwrap(), fs::read(d.join(MEAN_FILE)).unwrap());
    }
}

#[test]
fn stitched_scene_retrieval() {
    let t = Trained::new();
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(tiny_config()).unwrap()).unwrap();
    v["dataset"]["tile_size"] = 48.into();
    v["dataset"]["n"] = 2.into();
    let cfg = t.path("scene.json");
    fs::write(&cfg, v.to_string()).unwrap();
    let scenes = t.path("scenes");
    let st = Command::new(env!("CARGO_BIN_EXE_nightvis"))
        .args(["--config", s(&cfg), "synth", "--out", s(&scenes)])
        .output()
        .unwrap();
    assert!(st.status.success());
    let manifest = Manifest::read(scenes.join(MANIFEST_NAME)).unwrap();
    let scene = manifest.resolve(&manifest.entries[0].cond_path);

    let out = t.path("stitched");
    ok(&["retrieve", "--checkpoint", s(&t.model()), "--cond", s(&scene), "--stitch", "16", "--out", s(&out), "--n", "2"]);
    let mean = read_tile(out.join(MEAN_FILE)).unwrap();
    let cond = read_tile(&scene).unwrap();
    assert_eq!((mean.height, mean.width), (48, 48));
    assert_eq!(mean.bbox, cond.bbox);
    assert!(out.join(member_file(1)).exists());

    let (c, _) = code(&["retrieve", "--checkpoint", s(&t.model()), "--cond", s(&scene), "--stitch", "40", "--out", s(&t.path("bad")), "--n", "2"]);
    assert_ne!(c, 0);
}

fn radiance_like(refl: &RasterTile, value: f32) -> RasterTile {
    RasterTile::filled(refl.height, refl.width, &["dnb_radiance"], value, refl.bbox, refl.timestamp, refl.resolution_km)
}

#[test]
fn dnb_adjustment_channels_and_moon_down() {
    let t = Trained::new();
    let pred = t.path("pred");
    ok(&["retrieve", "--checkpoint", s(&t.model()), "--data", s(&t.data()), "--out", s(&pred), "--n", "2"]);
    let mean_path = files(&pred).into_iter().find(|(p, _)| p.ends_with(MEAN_FILE)).unwrap().0;
    let refl = read_tile(&mean_path).unwrap();
    let rad_path = t.path("radiance.nvt1");
    let irradiance = 0.02;
    let cos60 = 60f64.to_radians().cos();
    write_tile(&radiance_like(&refl, (0.3 * irradiance * cos60 / std::f64::consts::PI) as f32), &rad_path).unwrap();

    let out = t.path("dnb.nvt1");
    let args = |zenith: &str, out: &Path| -> Vec<String> {
        [
            "dnb",
            "--reflectance",
            s(&mean_path),
            "--radiance",
            s(&rad_path),
            "--curves",
            s(&curves_dir()),
            "--lunar-zenith",
            zenith,
            "--irradiance",
            "0.02",
            "--out",
            s(out),
        ]
        .iter()
        .map(|a| a.to_string())
        .collect()
    };
    let a = args("60", &out);
    let stdout = ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(stdout.contains("w_0.65 = 0.500000"), "{stdout}");
    assert!(stdout.contains("w_0.825 = 0.375000"), "{stdout}");

    let tile = read_tile(&out).unwrap();
    assert_eq!(tile.channels, [DNB_REFLECTANCE_CHANNEL, DNB_ADJUSTED_CHANNEL]);
    let field = ReflectanceField::from_tile(&refl).unwrap();
    let (r065, r0825) = (field.band_plane(1), field.band_plane(2));
    for p in 0..tile.num_pixels() {
        assert!((tile.data[2 * p] - 0.3).abs() < 1e-6);
        let expect = 0.5 * r065[p] as f64 + 0.375 * r0825[p] as f64;
        assert!((tile.data[2 * p + 1] as f64 - expect).abs() < 1e-6);
    }

    for zenith in ["90", "120"] {
        let b = args(zenith, &t.path(&format!("down{zenith}.nvt1")));
        let (c, err) = code(&b.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(c, 4);
        assert!(err.to_lowercase().contains("illumination") || err.contains("below the horizon"), "{err}");
    }
}
