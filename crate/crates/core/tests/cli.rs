use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatdist"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["partition", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn missing_camera_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = run(&["synth", "--out", d, "--count", "200", "--views", "2", "--width", "16", "--height", "16"]);
    assert!(out.status.success(), "{}", stderr(&out));

    let missing = dir.path().join("nope.json");
    let splats = dir.path().join("ground_truth.ply");
    let out = run(&[
        "render",
        "--splats",
        splats.to_str().unwrap(),
        "--cameras",
        missing.to_str().unwrap(),
        "--out",
        d,
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains(missing.to_str().unwrap()), "{}", stderr(&out));
}

#[test]
fn render_and_render_dist_write_the_same_images() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let out = run(&["synth", "--out", &s(d), "--count", "300", "--views", "3", "--width", "24", "--height", "20", "--seed", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));

    let splats = s(&d.join("ground_truth.ply"));
    let cams = s(&d.join("cameras.json"));
    let (mono, dist) = (d.join("mono"), d.join("dist"));
    let out = run(&["render", "--splats", &splats, "--cameras", &cams, "--out", &s(&mono)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = run(&["render-dist", "--workers", "4", "--splats", &splats, "--cameras", &cams, "--out", &s(&dist)]);
    assert!(out.status.success(), "{}", stderr(&out));

    let mut names: Vec<_> = std::fs::read_dir(&mono).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 3);
    for n in names {
        let a = std::fs::read(mono.join(&n)).unwrap();
        let b = std::fs::read(dist.join(&n)).unwrap();
        assert!(a == b, "{n:?} differs");
    }
}
