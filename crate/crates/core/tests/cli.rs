use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use interslice::cli::ExperimentConfig;
use interslice::volume::{load_volume, save_volume, Volume};

const TINY: &str = r#"
[data]
n_volumes = 5
split = [0.6, 0.2, 0.2]

[data.phantom]
height = 32
width = 32
n_slices = 24

[model]
architecture = "unet"
base_channels = 4

[train]
epochs = 2
"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_interslice"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ramp_volume(n_slices: usize) -> Volume {
    let (h, w) = (16, 16);
    let voxels = (0..n_slices * h * w)
        .map(|i| ((i * 37) % 101) as f32 / 100.0)
        .collect();
    Volume::new("ramp", h, w, n_slices, 1.0, 1.5, voxels).unwrap()
}

#[test]
fn phantom_files_are_unique_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = bin(&["--seed", "11", "--out", s(d), "phantom", "--n", "20"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "svol"))
        .collect();
    files.sort();
    assert_eq!(files.len(), 20);
    let mut ids: Vec<String> = files.iter().map(|p| load_volume(p).unwrap().patient_id).collect();
    ids.dedup();
    assert_eq!(ids.len(), 20);
    for f in &files {
        let other = b.join(f.file_name().unwrap());
        assert_eq!(fs::read(f).unwrap(), fs::read(other).unwrap());
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n_volumes"], 20);
    assert_eq!(manifest["params"]["height"], 64);
    assert_eq!(manifest["params"]["seed"], 11);
    assert_eq!(manifest["volumes"].as_array().unwrap().len(), 20);
    assert!(a.join("config.resolved.toml").exists());
}

#[test]
fn config_errors_exit_2_with_field_names() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = d.join("out");

    let missing = write(d, "missing.toml", "[model]\nbase_channels = 8\n");
    let o = bin(&["--config", &missing, "--out", s(&out), "train"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.architecture"), "{}", stderr(&o));

    let o = bin(&["--out", s(&out), "train"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.architecture"));

    let unknown = write(d, "unknown.toml", "[data]\nk = 1\n\n[train]\nepochz = 3\n");
    let o = bin(&["--config", &unknown, "--out", s(&out), "train"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.epochz") && stderr(&o).contains("line 5"), "{}", stderr(&o));

    let typed = write(d, "typed.toml", "[train]\nepochs = \"ten\"\n");
    let o = bin(&["--config", &typed, "--out", s(&out), "eval", "--baseline", "linear"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.epochs"), "{}", stderr(&o));

    let syntax = write(d, "syntax.toml", "[data\n");
    let o = bin(&["--config", &syntax, "--out", s(&out), "train"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 1"));

    let arch = write(d, "arch.toml", "[model]\narchitecture = \"vgg\"\n");
    let o = bin(&["--config", &arch, "--out", s(&out), "train"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("vgg"));

    let o = bin(&["--config", s(&d.join("absent.toml")), "train"]);
    assert_eq!(code(&o), 2);
    let o = bin(&["--threads", "0", "--out", s(&out), "eval", "--baseline", "linear"]);
    assert_eq!(code(&o), 2);
    let o = bin(&["eval"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write(d, "tiny.toml", TINY);
    let run = d.join("run");

    let o = bin(&["--config", &cfg, "--seed", "7", "--out", s(&run), "train"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss,disc_loss");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("2,"));
    assert!(run.join("checkpoint.smdl").exists() && run.join("splits.json").exists());

    let resolved_text = fs::read_to_string(run.join("config.resolved.toml")).unwrap();
    let resolved = ExperimentConfig::resolve(Some(&resolved_text), &Default::default()).unwrap();
    assert_eq!(resolved.train.seed, 7);
    assert_eq!(resolved.data.phantom.seed, 7);
    assert_eq!(resolved.model.as_ref().unwrap().base_channels, 4);
    assert_eq!(resolved.train.epochs, 2);

    // rerunning from the emitted config gives byte-identical outputs
    let again = d.join("again");
    let resolved_path = s(&run.join("config.resolved.toml")).to_string();
    let o = bin(&["--config", &resolved_path, "--out", s(&again), "train"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(history, fs::read_to_string(again.join("history.csv")).unwrap());
    assert_eq!(
        fs::read(run.join("checkpoint.smdl")).unwrap(),
        fs::read(again.join("checkpoint.smdl")).unwrap()
    );

    let ckpt = s(&run.join("checkpoint.smdl")).to_string();
    let mut reports = Vec::new();
    for (name, threads) in [("e1", "1"), ("e2", "1"), ("e3", "2")] {
        let out = d.join(name);
        let o = bin(&["--config", &cfg, "--seed", "7", "--threads", threads, "--out", s(&out), "eval", "--checkpoint", &ckpt]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).lines().any(|l| l.starts_with("unet k=1 PSNR ") && l.contains(" SSIM ")));
        reports.push(fs::read_to_string(out.join("report.csv")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(reports[0], reports[2]);

    let edsr = write(d, "edsr.toml", "[model]\narchitecture = \"edsr\"\n");
    let o = bin(&["--config", &edsr, "--out", s(&d.join("x")), "eval", "--checkpoint", &ckpt]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("edsr"));

    let broken = write(d, "broken.smdl", "SMDL1 {not json\n");
    let o = bin(&["--out", s(&d.join("x")), "eval", "--checkpoint", &broken]);
    assert_eq!(code(&o), 3);
    let o = bin(&["--out", s(&d.join("x")), "eval", "--checkpoint", s(&d.join("none.smdl"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn baseline_eval_needs_no_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write(d, "tiny.toml", TINY);
    let out = d.join("lin");
    let o = bin(&["--config", &cfg, "--out", s(&out), "eval", "--baseline", "linear", "--k", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = stdout(&o);
    let line = summary.lines().find(|l| l.starts_with("linear k=2 ")).unwrap();
    let parts: Vec<&str> = line.split(' ').collect();
    assert_eq!(parts[2], "PSNR");
    assert_eq!(parts[4], "SSIM");
    assert!(parts[3].contains('±') && parts[5].contains('±'));
    assert_eq!(parts[5].split('±').next().unwrap().split('.').nth(1).unwrap().len(), 4);

    // one test patient of 24 slices at k=2 gives 24 - 4 triplets
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 20);
    assert!(csv.ends_with('\n') && !csv.contains('\r'));
    let resolved = fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("k = 2"));
}

#[test]
fn interpolate_doubles_slices_and_halves_spacing() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let vol = ramp_volume(6);
    let path = d.join("six.svol");
    save_volume(&vol, &path).unwrap();
    let out = d.join("up");
    let o = bin(&["--out", s(&out), "interpolate", s(&path), "--baseline", "linear"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let up = load_volume(out.join("six_x2.svol")).unwrap();
    assert_eq!(up.n_slices, 11);
    assert_eq!(up.slice_mm, 0.75);
    assert_eq!((up.height, up.width, up.in_plane_mm), (16, 16, 1.0));
    for i in 0..6 {
        assert_eq!(up.slice_data(2 * i), vol.slice_data(i));
    }
    for i in 0..5 {
        let (a, b) = (vol.slice_data(i), vol.slice_data(i + 1));
        for ((m, a), b) in up.slice_data(2 * i + 1).iter().zip(a).zip(b) {
            assert_eq!(*m, 0.5 * (a + b));
        }
    }

    let single = d.join("one.svol");
    save_volume(&ramp_volume(1), &single).unwrap();
    let o = bin(&["--out", s(&out), "interpolate", s(&single), "--baseline", "nearest"]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("at least 2"));
}

#[test]
fn metrics_and_ssim_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let (a, b) = (d.join("a.svol"), d.join("b.svol"));
    save_volume(&ramp_volume(5), &a).unwrap();
    save_volume(&ramp_volume(7), &b).unwrap();

    let out = d.join("m");
    let o = bin(&["--out", s(&out), "metrics", s(&a), s(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.ends_with(",100,1")), "{csv}");

    let o = bin(&["--out", s(&out), "metrics", s(&a), s(&b)]);
    assert_eq!(code(&o), 4);
    let o = bin(&["--out", s(&out), "ssim-map", s(&a), s(&b)]);
    assert_eq!(code(&o), 4);

    let maps = d.join("maps");
    let o = bin(&["--out", s(&maps), "ssim-map", s(&a), s(&a), "--slices", "0,4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for i in [0, 4] {
        let pgm = fs::read(maps.join(format!("ssim_map_{i:03}.pgm"))).unwrap();
        let header = b"P5\n16 16\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 256);
        assert!(pgm[header.len()..].iter().all(|&p| p == 255));
    }
    let o = bin(&["--out", s(&maps), "ssim-map", s(&a), s(&a), "--slices", "9"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn ablation_table_schema_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let text = r#"
[data]
n_volumes = 5
split = [0.6, 0.2, 0.2]

[data.phantom]
height = 32
width = 32
n_slices = 24

[ablate]
ks = [2, 1]
architectures = ["edsr", "unet"]

[ablate.model.edsr]
base_channels = 4
n_res_blocks = 2

[ablate.model.unet]
base_channels = 4

[ablate.train.edsr]
epochs = 1

[ablate.train.unet]
epochs = 1
"#;
    let cfg = write(d, "ablate.toml", text);
    let mut tables = Vec::new();
    for name in ["a", "b"] {
        let out = d.join(name);
        let o = bin(&["--config", &cfg, "--out", s(&out), "ablate"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        tables.push(fs::read_to_string(out.join("ablation.csv")).unwrap());
        assert!(stdout(&o).contains("improvement"));
    }
    assert_eq!(tables[0], tables[1]);
    let lines: Vec<Vec<&str>> = tables[0].lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(lines[0], ["architecture", "psnr_k2", "ssim_k2", "psnr_k1", "ssim_k1"]);
    assert_eq!(lines[1][0], "edsr");
    assert_eq!(lines[2][0], "unet");
    assert_eq!(lines[3][0], "improvement");
    let cell = |r: usize, c: usize| lines[r][c].parse::<f64>().unwrap();
    for (col_k1, col_k2) in [(3, 1), (4, 2)] {
        let k1 = (cell(1, col_k1) + cell(2, col_k1)) / 2.0;
        let k2 = (cell(1, col_k2) + cell(2, col_k2)) / 2.0;
        let expected = (k1 - k2) / k2;
        // cells are rounded to 6 significant digits
        assert!((cell(3, col_k1) - expected).abs() < 1e-4 * expected.abs().max(1e-3), "{}", tables[0]);
    }

    let bad = write(d, "bad.toml", "[ablate]\narchitectures = [\"unet\"]\n\n[ablate.model.edsr]\nbase_channels = 4\n");
    let o = bin(&["--config", &bad, "--out", s(&d.join("c")), "ablate"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("ablate.model.edsr"));
}
