use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mmft::data::{self, load_image};
use mmft::Tensor;

fn mmft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmft"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--model",
    "reduced",
    "--input-size",
    "64",
    "--batch",
    "2",
    "--lr",
    "1e-3",
];

fn train(extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    mmft(&args)
}

#[test]
fn generate_train_evaluate_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let out = mmft(&[
        "gen-data",
        "--out",
        s(&data_dir),
        "--count",
        "3",
        "--seed",
        "4",
        "--size",
        "96",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(data_dir.join("rgb")).unwrap().count(), 3);

    let run = dir.path().join("run");
    let out = train(&["--data", s(&data_dir), "--out", s(&run), "--steps", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("final.mmft");
    assert!(ckpt.exists());
    assert_eq!(
        fs::read_to_string(run.join("loss_log.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let report = dir.path().join("report.csv");
    let out = mmft(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data_dir),
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(stdout(&out).contains("rmse = "));

    // without depth ground truth only the depth columns go empty
    fs::remove_dir_all(data_dir.join("depth")).unwrap();
    let out = mmft(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data_dir),
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&out), 0);
    assert!(!stdout(&out).contains("rmse") && stdout(&out).contains("s_measure"));
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.lines().nth(1).unwrap().ends_with(",,,,,,,"));

    let pred = dir.path().join("pred");
    let image = data_dir.join("rgb").join("syn_00000.ppm");
    let out = mmft(&[
        "predict",
        "--ckpt",
        s(&ckpt),
        "--image",
        s(&image),
        "--out",
        s(&pred),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["saliency.pgm", "depth.pgm", "contour.pgm"] {
        let t = load_image(pred.join(f)).unwrap();
        assert_eq!(t.shape(), &[1, 64, 64]);
    }
}

#[test]
fn config_file_is_overridden_by_flags_and_resume_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "model = reduced\ninput_size = 64\nbatch = 1\nsteps = 4\nlr = 0.5\ncheckpoint_every = 2\n",
    )
    .unwrap();
    let full = dir.path().join("full");
    let out = mmft(&[
        "train",
        "--synthetic",
        "2",
        "--config",
        s(&cfg),
        "--lr",
        "2e-3",
        "--out",
        s(&full),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let used = fs::read_to_string(full.join("config.txt")).unwrap();
    assert!(
        used.contains("lr = 2e-3") && used.contains("batch = 1"),
        "{used}"
    );

    let resumed = dir.path().join("resumed");
    let half = full.join("step_000002.mmft");
    let out = mmft(&[
        "train",
        "--synthetic",
        "2",
        "--resume",
        s(&half),
        "--out",
        s(&resumed),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read(full.join("final.mmft")).unwrap(),
        fs::read(resumed.join("final.mmft")).unwrap()
    );
    let tail: Vec<String> = fs::read_to_string(full.join("loss_log.csv"))
        .unwrap()
        .lines()
        .skip(3)
        .map(String::from)
        .collect();
    let resumed_log: Vec<String> = fs::read_to_string(resumed.join("loss_log.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(String::from)
        .collect();
    assert_eq!(tail, resumed_log);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // IO failure
    let out = mmft(&[
        "eval",
        "--ckpt",
        "/nonexistent.mmft",
        "--data",
        "/nonexistent",
        "--report",
        "r.csv",
    ]);
    assert_eq!(code(&out), 2);
    // validation failures
    assert_eq!(
        code(&train(&[
            "--synthetic",
            "1",
            "--out",
            s(dir.path()),
            "--batch",
            "0"
        ])),
        1
    );
    assert_eq!(
        code(&train(&[
            "--synthetic",
            "1",
            "--out",
            s(dir.path()),
            "--fusion",
            "magic"
        ])),
        1
    );
    assert_eq!(code(&mmft(&["train", "--out", s(dir.path())])), 1);
    assert_eq!(code(&mmft(&["gradcheck", "--scope", "op:teleport"])), 1);
    assert_eq!(
        code(&mmft(&[
            "contour-gt",
            "--in",
            "x.pgm",
            "--out",
            "y.pgm",
            "--m",
            "2"
        ])),
        1
    );
    let junk = dir.path().join("junk.mmft");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(
        code(&mmft(&[
            "predict",
            "--ckpt",
            s(&junk),
            "--image",
            "a.ppm",
            "--out",
            s(dir.path())
        ])),
        1
    );
    assert_eq!(code(&mmft(&["--help"])), 0);
}

#[test]
fn gradcheck_scopes() {
    let out = mmft(&["gradcheck", "--scope", "op:softmax", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).starts_with("pass op:softmax"));
    let out = mmft(&["gradcheck", "--scope", "module:mft", "--seed", "1"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
}

#[test]
fn contour_gt_of_a_square() {
    let dir = tempfile::tempdir().unwrap();
    let mask = Tensor::from_fn([1, 12, 12], |i| {
        ((3..8).contains(&(i / 12)) && (4..9).contains(&(i % 12))) as u8 as f64
    });
    let input = dir.path().join("mask.pgm");
    data::save_image(&mask, &input).unwrap();
    let output = dir.path().join("c.pgm");
    let out = mmft(&[
        "contour-gt",
        "--in",
        s(&input),
        "--out",
        s(&output),
        "--m",
        "3",
    ]);
    assert_eq!(code(&out), 0);
    let c = load_image(&output).unwrap();
    assert_eq!(c.data().iter().filter(|&&v| v == 1.0).count(), 40);
}
