use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use boundseg::boundary::load_boundary;
use boundseg::encode::{ArchConfig, Network};
use boundseg::geoconv::load_field;
use boundseg::train::{save_checkpoint, TrainConfig, TrainState};
use boundseg::{load_cloud, save_cloud, PointCloud};
use ndarray::Array2;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_boundseg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/quickstart")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// The quickstart config pointed at the bundled scenes and a fresh output dir.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quickstart.toml"))
        .unwrap()
        .replace("../data/quickstart", p(&bundled()))
        .replace("../runs/quickstart", p(&dir.join("run")));
    let path = dir.join("run.toml");
    fs::write(&path, format!("{text}{extra}")).unwrap();
    path
}

/// One short training run shared by the tests that need a checkpoint.
fn trained() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap().keep();
        let cfg = write_config(&dir, "");
        let out = run(&["train", p(&cfg), "--override", "train.epochs=4"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        dir.join("run")
    })
}

fn val_scene() -> PathBuf {
    bundled().join("val/scene_000200.pts")
}

#[test]
fn gen_writes_scenes_and_manifest_deterministically() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let res = run(&[
            "gen",
            "--scenes",
            "3",
            "--seed",
            "7",
            "--points",
            "300",
            "--out",
            p(out),
        ]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "manifest.tsv",
            "scene_000007.pts",
            "scene_000008.pts",
            "scene_000009.pts"
        ]
    );
    for name in &names {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    let seeds: Vec<&str> = manifest
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(1).unwrap())
        .collect();
    assert_eq!(seeds, ["7", "8", "9"]);
    let cloud = load_cloud(a.join("scene_000008.pts")).unwrap();
    assert_eq!(cloud.len(), 300);
    assert_eq!(cloud.num_classes(), 5);
}

#[test]
fn single_class_scenes_are_rejected() {
    let dir = TempDir::new().unwrap();
    let out = run(&["gen", "--scenes", "2", "--classes", "1", "--out", p(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("classes"));
}

#[test]
fn unknown_flags_are_usage_errors() {
    let out = run(&["eval", "--no-such-flag"]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
}

#[test]
fn every_subcommand_documents_its_flags() {
    let cases: [(&str, &[&str]); 6] = [
        (
            "gen",
            &["--scenes", "--seed", "--out", "--classes", "--points", "--extent"],
        ),
        ("train", &["--override"]),
        (
            "eval",
            &[
                "--perturb-flip",
                "--perturb-exchange",
                "--force-mask",
                "--seed",
                "--rule-k",
                "--rule-ratio",
            ],
        ),
        ("boundary", &["--out", "--checkpoint", "--field", "--rule-k"]),
        ("kernel-field", &["--layer", "--kernel", "--out"]),
        ("grad-check", &["--seed", "--classes", "--points", "--tolerance"]),
    ];
    for (cmd, flags) in cases {
        let out = run(&[cmd, "--help"]);
        assert_eq!(code(&out), 0);
        let help = stdout(&out);
        for flag in flags {
            assert!(help.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
}

#[test]
fn quickstart_writes_checkpoints_and_one_log_line_per_epoch() {
    let run_dir = trained();
    assert!(run_dir.join("final.ckpt").is_file());
    assert!(run_dir.join("best.ckpt").is_file());
    let log = fs::read_to_string(run_dir.join("metrics.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4);
    for (i, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 5, "{line}");
        assert_eq!(fields[0], (i + 1).to_string());
        let values: Vec<f64> = fields[1..].iter().map(|f| f.parse().unwrap()).collect();
        assert!(
            (values[0] - values[1] - values[2]).abs() < 1e-6,
            "total = seg + bpm: {line}"
        );
    }
}

#[test]
fn mask_off_override_trains_without_boundary_loss() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = run(&[
        "train",
        p(&cfg),
        "--override",
        "train.epochs=2",
        "--override",
        "mask=off",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let log = fs::read_to_string(dir.path().join("run/metrics.log")).unwrap();
    for line in log.lines() {
        let bpm: f64 = line.split('\t').nth(3).unwrap().parse().unwrap();
        assert_eq!(bpm, 0.0);
    }
}

#[test]
fn invalid_config_key_exits_2_naming_it() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = run(&["train", p(&cfg), "--override", "train.momentum=0.9"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("momentum"), "{}", stderr(&out));

    let cfg = write_config(dir.path(), "\n[extra]\nfoo = 1\n");
    let out = run(&["train", p(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("extra"), "{}", stderr(&out));
}

#[test]
fn non_finite_loss_exits_1_with_batch_id() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = run(&["train", p(&cfg), "--override", "train.learning_rate=1e300"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("batch"), "{}", stderr(&out));
}

#[test]
fn plain_eval_is_repeatable_and_perturbations_run() {
    let ckpt = trained().join("best.ckpt");
    let val = bundled().join("val");
    let plain = run(&["eval", p(&ckpt), p(&val)]);
    assert_eq!(code(&plain), 0, "{}", stderr(&plain));
    assert_eq!(stdout(&plain), stdout(&run(&["eval", p(&ckpt), p(&val)])));
    for key in ["miou", "iou_class_0", "boundary_f1", "band_accuracy"] {
        assert!(stdout(&plain).lines().any(|l| l.starts_with(key)), "missing {key}");
    }
    for flags in [
        &["--perturb-flip", "0.03"][..],
        &["--perturb-exchange", "0.05"],
        &["--force-mask", "off"],
        &["--force-mask", "augmented"],
    ] {
        let mut args = vec!["eval", p(&ckpt), p(&val)];
        args.extend_from_slice(flags);
        let out = run(&args);
        assert_eq!(code(&out), 0, "{flags:?}: {}", stderr(&out));
    }
    assert_eq!(code(&run(&["eval", p(&ckpt), p(&val), "--perturb-flip", "1.5"])), 2);
}

#[test]
fn unreadable_checkpoint_exits_1() {
    let dir = TempDir::new().unwrap();
    let text = fs::read_to_string(trained().join("final.ckpt")).unwrap();
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, &text[..text.len() / 2]).unwrap();
    let out = run(&["eval", p(&bad), p(&bundled().join("val"))]);
    assert_eq!(code(&out), 1);
}

/// Brute-force rule: boundary iff more than `ratio * k` of the `k` nearest
/// other points carry another label.
fn brute_force_boundary(cloud: &PointCloud, k: usize, ratio: f64) -> Vec<u8> {
    let pos = cloud.positions();
    let labels = cloud.labels().unwrap();
    (0..cloud.len())
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..cloud.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = (0..3).map(|c| (pos[[i, c]] - pos[[j, c]]).powi(2)).sum();
                    (d, j)
                })
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let differ = others[..k].iter().filter(|&&(_, j)| labels[j] != labels[i]).count();
            u8::from(differ as f64 <= ratio * k as f64)
        })
        .collect()
}

#[test]
fn ground_truth_boundary_matches_brute_force() {
    let dir = TempDir::new().unwrap();
    let out_path = dir.path().join("gt.bnd");
    let out = run(&["boundary", p(&val_scene()), "--out", p(&out_path)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let field = load_boundary(&out_path).unwrap();
    let cloud = load_cloud(val_scene()).unwrap();
    assert_eq!(field.hard().unwrap(), brute_force_boundary(&cloud, 32, 0.4).as_slice());

    let out = run(&[
        "boundary",
        p(&val_scene()),
        "--out",
        p(&out_path),
        "--rule-k",
        "10",
        "--rule-ratio",
        "0.3",
    ]);
    assert_eq!(code(&out), 0);
    let field = load_boundary(&out_path).unwrap();
    assert_eq!(field.hard().unwrap(), brute_force_boundary(&cloud, 10, 0.3).as_slice());
}

#[test]
fn ground_truth_needs_labels() {
    let dir = TempDir::new().unwrap();
    let unlabeled = dir.path().join("u.pts");
    save_cloud(&load_cloud(val_scene()).unwrap().without_labels(), &unlabeled).unwrap();
    let out = run(&["boundary", p(&unlabeled), "--out", p(&dir.path().join("x.bnd"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn predicted_boundary_is_the_thresholded_field() {
    let dir = TempDir::new().unwrap();
    let (bnd, fld) = (dir.path().join("p.bnd"), dir.path().join("p.fld"));
    let out = run(&[
        "boundary",
        p(&val_scene()),
        "--out",
        p(&bnd),
        "--checkpoint",
        p(&trained().join("best.ckpt")),
        "--field",
        p(&fld),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let hard = load_boundary(&bnd).unwrap();
    let soft = load_field(&fld).unwrap();
    assert_eq!(soft.len(), 512);
    let expected: Vec<u8> = soft.iter().map(|&s| u8::from(s >= 0.5)).collect();
    assert_eq!(hard.hard().unwrap(), expected.as_slice());
}

#[test]
fn kernel_field_writes_one_finite_value_per_point() {
    let dir = TempDir::new().unwrap();
    let fld = dir.path().join("k.fld");
    let ckpt = trained().join("final.ckpt");
    let scene = val_scene();
    let out = run(&[
        "kernel-field",
        p(&ckpt),
        p(&scene),
        "--layer",
        "1",
        "--kernel",
        "2",
        "--out",
        p(&fld),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let values = load_field(&fld).unwrap();
    assert_eq!(values.len(), 512);
    assert!(values.iter().all(|v| v.is_finite()));
    for bad in [["--layer", "2", "--kernel", "0"], ["--layer", "0", "--kernel", "3"]] {
        let mut args = vec!["kernel-field", p(&ckpt), p(&scene), "--out", p(&fld)];
        args.extend_from_slice(&bad);
        assert_eq!(code(&run(&args)), 2, "{bad:?}");
    }
}

#[test]
fn plane_kernel_responds_more_inside_a_plane_than_on_its_rim() {
    let dir = TempDir::new().unwrap();
    // tripod of in-plane directions 120 degrees apart
    let mut arch = ArchConfig::tiny(3);
    arch.gco_m = 3;
    let mut net = Network::new(arch, 1.0, 10.0).unwrap();
    let bank = net.encoder[0].kernels.as_mut().unwrap();
    for c in 0..3 {
        for i in 0..3 {
            let a = 2.0 * std::f64::consts::PI * i as f64 / 3.0;
            bank.vectors
                .value
                .row_mut(c * 3 + i)
                .assign(&ndarray::arr1(&[a.cos(), a.sin(), 0.0]));
        }
    }
    let state = TrainState::new(net, &TrainConfig::default()).unwrap();
    let ckpt = dir.path().join("plane.ckpt");
    save_checkpoint(&state, &ckpt).unwrap();

    let side = 30;
    let n = side * side;
    let mut rng_state = 12345u64;
    let mut jitter = || {
        rng_state = rng_state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((rng_state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.02
    };
    let positions = Array2::from_shape_fn((n, 3), |(i, c)| match c {
        0 => (i % side) as f64 * 0.05 + jitter(),
        1 => (i / side) as f64 * 0.05 + jitter(),
        _ => 0.0,
    });
    let cloud = PointCloud::new(positions, Array2::from_elem((n, 3), 0.5), None, 2).unwrap();
    let pts = dir.path().join("plane.pts");
    save_cloud(&cloud, &pts).unwrap();
    let fld = dir.path().join("plane.fld");
    let out = run(&[
        "kernel-field",
        p(&ckpt),
        p(&pts),
        "--layer",
        "0",
        "--kernel",
        "1",
        "--out",
        p(&fld),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let values = load_field(&fld).unwrap();
    let rim = |i: usize| {
        let (x, y) = (i % side, i / side);
        x == 0 || y == 0 || x == side - 1 || y == side - 1
    };
    let mean = |keep: &dyn Fn(usize) -> bool| {
        let v: Vec<f64> = (0..n).filter(|&i| keep(i)).map(|i| values[i]).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (inside, edge) = (mean(&|i| !rim(i)), mean(&rim));
    assert!(inside > edge, "interior {inside} vs rim {edge}");
}

#[test]
fn grad_check_passes_on_a_fresh_network() {
    let out = run(&["grad-check"]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
    assert!(stdout(&out).contains("encoder.0.gco.vectors"));
    assert_eq!(code(&run(&["grad-check", "--points", "500"])), 2);
}
