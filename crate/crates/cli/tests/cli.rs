use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use genflow::inpaint::{gen_center, Mask};
use genflow_cli::images::save_mask;
use genflow_cli::Checkpoint;

const TINY: &str = "\
[data]
dataset = tiny_shapes
n = 32
holdout = 16
image_size = 8

[model]
base_channels = 8
channel_multipliers = 1,2
blocks_per_resolution = 1
time_embed_dim = 16

[train]
epochs = 1
batch_size = 16

[finetune]
epochs = 1
batch_size = 16
val_size = 4

[sampler]
steps = 2
cfg_scale = 2
batch = 16

[eval]
per_class = 4
feature_dim = 8
kid_subsets = 2
kid_subset_size = 8
inpaint_images = 4
";

fn genflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genflow")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = genflow(args);
    assert!(
        out.status.success(),
        "genflow {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    genflow(args).status.code().unwrap()
}

fn setup(dir: &Path, method: &str) -> PathBuf {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, format!("[run]\nmethod = {method}\n\n{TINY}")).unwrap();
    cfg
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn steps(csv: &str) -> Vec<usize> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn one_epoch_writes_a_checkpoint_and_a_monotone_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "cfm");
    let out = dir.path().join("run");
    let printed = ok(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(&out)]);
    assert!(printed.contains("checkpoint-0001.flow"));
    assert!(out.join("last.flow").exists());
    let log = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert!(log.starts_with("step,epoch,loss,lr\n"));
    assert_eq!(steps(&log), vec![1, 2]);
    let ck = Checkpoint::load(&out.join("checkpoint-0001.flow")).unwrap();
    assert_eq!((ck.step, ck.epoch), (2, 1));
}

#[test]
fn resume_continues_step_numbering_and_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "cfm");
    let (a, c) = (dir.path().join("a"), dir.path().join("c"));
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--seed",
        "5",
        "--out",
        s(&a),
        "--set",
        "train.epochs=2",
    ]);
    let full = fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(steps(&full), vec![1, 2, 3, 4]);
    // keep the log up to the epoch-1 checkpoint, then resume from it
    fs::create_dir_all(&c).unwrap();
    let head: String = full.lines().take(3).map(|l| format!("{l}\n")).collect();
    fs::write(c.join("loss.csv"), head).unwrap();
    ok(&["train", "--resume", s(&a.join("checkpoint-0001.flow")), "--out", s(&c)]);
    assert_eq!(fs::read_to_string(c.join("loss.csv")).unwrap(), full);
    assert_eq!(
        fs::read(a.join("last.flow")).unwrap(),
        fs::read(c.join("last.flow")).unwrap()
    );
}

#[test]
fn sampling_writes_tiled_png_and_point_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "meanflow");
    let run = dir.path().join("run");
    let one_step = ["--set", "sampler.steps=1"];
    let err = genflow(&["train", "--config", s(&cfg), "--seed", "1", "--out", s(&run)]);
    assert_eq!(
        err.status.code(),
        Some(1),
        "one-step sampling with 2 steps is a config error"
    );
    ok(&[
        &["train", "--config", s(&cfg), "--seed", "1", "--out", s(&run)][..],
        &one_step,
    ]
    .concat());
    let png = dir.path().join("grid.png");
    let printed = ok(&[
        "sample",
        "--checkpoint",
        s(&run.join("last.flow")),
        "--seed",
        "2",
        "--out",
        s(&png),
    ]);
    assert!(printed.contains("nfe_steps=1"), "{printed}");
    let img = image::open(&png).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));

    let points = dir.path().join("moons.cfg");
    fs::write(
        &points,
        "[run]\nmethod = cfm\n[data]\ndataset = two_moons\nn = 64\n[model]\nhidden = 16\n\
         [train]\nepochs = 1\nbatch_size = 32\n[sampler]\nsteps = 3\n",
    )
    .unwrap();
    let prun = dir.path().join("moons");
    ok(&["train", "--config", s(&points), "--seed", "1", "--out", s(&prun)]);
    let csv = dir.path().join("pts.csv");
    ok(&[
        "sample",
        "--checkpoint",
        s(&prun.join("last.flow")),
        "--seed",
        "1",
        "-n",
        "10",
        "--class",
        "1",
        "--out",
        s(&csv),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert_eq!(text.lines().next(), Some("x,y"));
}

#[test]
fn finetune_refuses_diffusion_checkpoints_and_logs_validation() {
    let dir = tempfile::tempdir().unwrap();
    let ddpm_cfg = setup(dir.path(), "ddim");
    let ddpm = dir.path().join("ddpm");
    ok(&["train", "--config", s(&ddpm_cfg), "--seed", "1", "--out", s(&ddpm)]);
    let out = genflow(&[
        "finetune",
        "--base",
        s(&ddpm.join("last.flow")),
        "--seed",
        "1",
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("flow-matching"));

    let cfg = setup(dir.path(), "cfm");
    let base = dir.path().join("base");
    ok(&["train", "--config", s(&cfg), "--seed", "1", "--out", s(&base)]);
    let ft = dir.path().join("ft");
    ok(&[
        "finetune",
        "--base",
        s(&base.join("last.flow")),
        "--seed",
        "2",
        "--out",
        s(&ft),
    ]);
    let val = fs::read_to_string(ft.join("finetune_val.csv")).unwrap();
    let rows: Vec<&str> = val.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (row, kind) in rows.iter().zip(["center", "random_bbox", "irregular", "half"]) {
        assert!(row.starts_with(&format!("0,{kind},")), "{row}");
    }
    let ck = Checkpoint::load(&ft.join("finetuned.flow")).unwrap();
    assert_eq!(ck.objective.name(), "finetune");

    // panels: Original, Masked, Base, Fine-tuned across; one row per image
    let panel = dir.path().join("panel.png");
    ok(&[
        "inpaint",
        "--checkpoint",
        s(&base.join("last.flow")),
        "--finetuned",
        s(&ft.join("finetuned.flow")),
        "--mask",
        "center",
        "--seed",
        "1",
        "-n",
        "3",
        "--out",
        s(&panel),
    ]);
    let img = image::open(&panel).unwrap();
    assert_eq!((img.width(), img.height()), (4 * 8, 3 * 8));
    let scores = fs::read_to_string(panel.with_extension("csv")).unwrap();
    assert!(scores.contains("finetuned,center,psnr_db,"));

    let mask_file = dir.path().join("hole.pgm");
    save_mask(&gen_center(8).unwrap(), &mask_file).unwrap();
    let custom = dir.path().join("custom.png");
    ok(&[
        "inpaint",
        "--checkpoint",
        s(&base.join("last.flow")),
        "--mask",
        s(&mask_file),
        "--seed",
        "1",
        "-n",
        "2",
        "--out",
        s(&custom),
    ]);
    let written = genflow_cli::images::load_mask(&custom.with_extension("mask.pgm")).unwrap();
    assert_eq!(written.values(), gen_center(8).unwrap().values());
    assert_eq!(
        code(&[
            "inpaint",
            "--checkpoint",
            s(&base.join("last.flow")),
            "--mask",
            "blob",
            "--seed",
            "1",
            "--out",
            s(&custom)
        ]),
        1
    );

    let report = dir.path().join("report.csv");
    ok(&[
        "eval",
        "--model",
        s(&base.join("last.flow")),
        "--inpaint-base",
        s(&base.join("last.flow")),
        "--finetuned",
        s(&ft.join("finetuned.flow")),
        "--seed",
        "4",
        "--out",
        s(&report),
    ]);
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("method,class,mask,metric,value\n"));
    assert!(csv.contains("cfm_euler,all,none,nfe,2\n"));
    assert!(csv.contains("cfm_euler,all,none,images_per_sec,absent\n"));
    assert!(csv.contains("delta_pct,all,half,psnr_db,"));
    assert!(csv.contains("cfm_euler,3,none,fid,"));
}

#[test]
fn grid_has_one_row_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "cfm");
    let out = dir.path().join("data.png");
    ok(&["grid", "--config", s(&cfg), "--per-class", "3", "--out", s(&out)]);
    let img = image::open(&out).unwrap();
    assert_eq!((img.width(), img.height()), (3 * 8, 4 * 8));
}

#[test]
fn exit_codes_separate_usage_from_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "cfm");
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["train", "--config", s(&cfg)]), 1, "seed is mandatory");
    assert_eq!(
        code(&["train", "--config", s(&cfg), "--seed", "1", "--set", "train.epoch=3"]),
        1
    );
    assert_eq!(
        code(&["train", "--config", s(&cfg), "--seed", "1", "--set", "train.lr=-1"]),
        1
    );
    let missing = dir.path().join("none.flow");
    assert_eq!(
        code(&["sample", "--checkpoint", s(&missing), "--seed", "1", "--out", "x.png"]),
        2
    );
    let junk = dir.path().join("junk.flow");
    fs::write(&junk, b"FLOW\x07\0\0\0").unwrap();
    let out = genflow(&["sample", "--checkpoint", s(&junk), "--seed", "1", "--out", "x.png"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 7"));
}

#[test]
fn mask_files_use_zero_for_holes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.pgm");
    save_mask(&gen_center(8).unwrap(), &p).unwrap();
    let bytes = fs::read(&p).unwrap();
    assert!(bytes.starts_with(b"P5"));
    let pixels = &bytes[bytes.len() - 64..];
    assert_eq!(pixels.iter().filter(|&&b| b == 0).count(), 16);
    assert_eq!(pixels.iter().filter(|&&b| b == 255).count(), 48);
    let back: Mask = genflow_cli::images::load_mask(&p).unwrap();
    assert_eq!(back.hole_pixels(), 16);
}
