use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geodiffussr::RunConfig;
use geodiffussr_core::data::{load_manifest, write_dem_png, Split};
use geodiffussr_core::TerrainTile;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_geodiffussr"));
    c.env("RUST_LOG", "warn");
    c
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.train.max_steps = 3;
    cfg.train.batch_size = 4;
    cfg.train.eval_every = 0;
    cfg.train.unet.base_channels = 4;
    cfg.train.sampler.steps = 2;
    cfg.sample.sampler.steps = 3;
    cfg.eval.sampler.steps = 2;
    cfg.ablate.eval_tiles = 2;
    cfg.ablate.val_draws = 1;
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn synth(dir: &Path, count: usize, seed: u64) -> PathBuf {
    let data = dir.join(format!("data-{count}-{seed}"));
    run_ok(&["dataset-synth", "--count", &count.to_string(), "--seed", &seed.to_string(), "--out", p(&data)]);
    data
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_synth_round_robin_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), 12, 5);
    let r = json(&a.join("result.json"));
    assert_eq!(r["count"], 12);
    for (_, n) in r["per_biome"].as_object().unwrap() {
        assert_eq!(n, 2);
    }
    assert_eq!(r["per_biome"].as_object().unwrap().len(), 6);
    let m = load_manifest(&a.join("manifest.json")).unwrap();
    assert_eq!(m.records.len(), 12);
    assert!(a.join("effective_config.json").exists());

    let b = dir.path().join("again");
    run_ok(&["dataset-synth", "--count", "12", "--seed", "5", "--out", p(&b)]);
    assert_eq!(tree_bytes(&a), tree_bytes(&b));

    let c = dir.path().join("subset");
    run_ok(&["dataset-synth", "--count", "6", "--biomes", "desert,alpine", "--out", p(&c)]);
    let r = json(&c.join("result.json"));
    assert_eq!(r["per_biome"]["desert"], 3);
    assert_eq!(r["per_biome"]["alpine"], 3);
}

#[test]
fn invalid_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = bin().args(["train", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate"), "{err}");

    std::fs::write(&cfg, r#"{"render": {"factor": 4}, "colour": 1}"#).unwrap();
    let out = bin().args(["render", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    std::fs::write(&cfg, r#"{"sample": {"sampler": {"steps": "many"}}}"#).unwrap();
    let out = bin().args(["sample", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sample.sampler.steps"));
}

#[test]
fn train_sample_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = synth(dir.path(), 30, 1);
    let before = tree_bytes(&data);

    let run = dir.path().join("run");
    run_ok(&["train", "--config", p(&cfg), "--data", p(&data), "--seed", "2", "--out", p(&run)]);
    let r = json(&run.join("result.json"));
    assert_eq!(r["steps"], 3);
    let ckpt = run.join("checkpoint.gdt");
    assert!(ckpt.exists());
    assert!(run.join("train_log.csv").exists());
    assert_eq!(json(&run.join("effective_config.json"))["train"]["seed"], 2);

    // resume to 5 steps
    let res = dir.path().join("resumed");
    run_ok(&["train", "--config", p(&cfg), "--data", p(&data), "--seed", "2", "--steps", "5", "--resume", p(&ckpt), "--out", p(&res)]);
    assert_eq!(json(&res.join("result.json"))["steps"], 5);

    let dem = dir.path().join("dem.png");
    let vals: Vec<f32> = (0..32 * 32).map(|i| (i % 32) as f32 / 31.0 * 0.7 + (i / 32) as f32 / 31.0 * 0.3).collect();
    write_dem_png(&dem, &TerrainTile::new(32, 32, vals).unwrap()).unwrap();
    let s1 = dir.path().join("s1");
    let s2 = dir.path().join("s2");
    for s in [&s1, &s2] {
        run_ok(&["sample", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--prompt", "snow-capped peaks", "--dem", p(&dem), "--seed", "7", "--out", p(s)]);
    }
    let png = std::fs::read(s1.join("sample.png")).unwrap();
    assert_eq!(png, std::fs::read(s2.join("sample.png")).unwrap());
    // the echoed config alone reproduces the run
    let s3 = dir.path().join("s3");
    run_ok(&["sample", "--config", p(&s1.join("effective_config.json")), "--out", p(&s3)]);
    assert_eq!(png, std::fs::read(s3.join("sample.png")).unwrap());
    let s4 = dir.path().join("s4");
    run_ok(&["sample", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--prompt", "snow-capped peaks", "--dem", p(&dem), "--seed", "8", "--out", p(&s4)]);
    assert_ne!(png, std::fs::read(s4.join("sample.png")).unwrap());

    let e = dir.path().join("eval-cheat");
    run_ok(&["eval", "--config", p(&cfg), "--data", p(&data), "--generator", "cheat", "--split", "train", "--out", p(&e)]);
    let r = json(&e.join("result.json"));
    assert_eq!(r["report"]["mse"], 0.0);
    assert!(r["report"]["fid"].as_f64().unwrap().abs() < 1e-6);

    let e = dir.path().join("eval-model");
    run_ok(&["eval", "--config", p(&cfg), "--data", p(&data), "--checkpoint", p(&ckpt), "--split", "val", "--out", p(&e)]);
    let r = json(&e.join("result.json"));
    assert!(r["report"]["mse"].as_f64().unwrap() > 0.0);
    assert!(r["report"]["n_tiles"].as_u64().unwrap() > 0);

    let out = bin().args(["eval", "--config", p(&cfg), "--data", p(&data), "--generator", "gan", "--out", p(&e)]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("eval.generator"));

    assert_eq!(before, tree_bytes(&data));
}

#[test]
fn ablate_table_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = synth(dir.path(), 30, 3);
    let out = dir.path().join("ablate");
    run_ok(&["ablate", "--config", p(&cfg), "--data", p(&data), "--modes", "full,none", "--seeds", "3", "--steps", "2", "--out", p(&out)]);
    let table = std::fs::read_to_string(out.join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "variant,fid(desk),lpips,mse,delta_dcor");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("Full MCA,") && lines[2].starts_with("Non-MCA,"));
    let seeds = std::fs::read_to_string(out.join("seeds_delta_dcor.csv")).unwrap();
    let lines: Vec<&str> = seeds.lines().collect();
    assert_eq!(lines[0], "variant,seed_0,seed_1,seed_2,mean");
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 5 && !l.contains("none")));
    assert_eq!(json(&out.join("result.json"))["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn render_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 6, 4);
    let m = load_manifest(&data.join("manifest.json")).unwrap();
    let rec = m.records.iter().find(|r| r.split != Split::Unassigned).unwrap();
    let out = dir.path().join("render");
    run_ok(&[
        "render",
        "--dem",
        p(&data.join(&rec.dem_path)),
        "--texture",
        p(&data.join(&rec.image_path)),
        "--factor",
        "2",
        "--light",
        "-1,0,1",
        "--out",
        p(&out),
    ]);
    let r = json(&out.join("result.json"));
    assert_eq!(r["width"], 64);
    let img = image::open(out.join("preview.png")).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
    let obj = std::fs::read_to_string(out.join("terrain.obj")).unwrap();
    assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 64 * 64);
    assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), 2 * 63 * 63);
}
