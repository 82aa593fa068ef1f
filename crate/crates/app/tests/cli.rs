use std::path::Path;
use std::process::{Command, Output};

use dext_core::formats;
use dext_core::scene::{generate, SceneConfig};

fn dext(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dext"))
        .args(args)
        .current_dir(dir)
        .env("DEXT_DATA_DIR", dir.join("data"))
        .output()
        .expect("binary runs")
}

fn write_scene(dir: &Path, seed: u64) -> String {
    let name = format!("scene{seed}.png");
    std::fs::write(dir.join(&name), generate(&SceneConfig::default(), seed).image.to_png().unwrap()).unwrap();
    name
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).to_string()
}

#[test]
fn detect_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_scene(dir.path(), 3);
    let o = dext(dir.path(), &["detect", "--image", &img]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(!v.as_array().unwrap().is_empty());
}

#[test]
fn explain_writes_grid_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_scene(dir.path(), 3);
    let o = dext(
        dir.path(),
        &[
            "explain",
            "--image",
            &img,
            "--detection",
            "0",
            "--decision",
            "class",
            "--method",
            "sgbp",
            "--sg-samples",
            "3",
            "--out",
            "a.dxts",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let grid = std::fs::read(dir.path().join("a.dxts")).unwrap();
    let sidecar = std::fs::read_to_string(dir.path().join("a.json")).unwrap();
    let (map, params) = formats::read_saliency(&grid, &sidecar).unwrap();
    assert_eq!((map.height, map.width), (32, 32));
    assert_eq!(params.sg_samples, 3);
    assert_eq!(map.method.name(), "SGBP");
}

#[test]
fn validation_errors_exit_2_and_name_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_scene(dir.path(), 3);
    let o = dext(dir.path(), &["explain", "--image", &img, "--method", "lime", "--out", "a.dxts"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--method"));

    let o = dext(
        dir.path(),
        &["evaluate", "--image", &img, "--method", "gbp", "--cause", "deletion", "--effect", "Z", "--setting", "S"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--effect"));

    let o = dext(dir.path(), &["detect", "--image", "missing.png"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--image"));

    let o = dext(dir.path(), &["explain", "--image", &img, "--method", "ig", "--ig-steps", "0", "--out", "a.dxts"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_scene(dir.path(), 3);
    let o = dext(dir.path(), &["explain", "--image", &img, "--detection", "999", "--method", "gbp", "--out", "a.dxts"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn evaluate_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_scene(dir.path(), 3);
    let o = dext(
        dir.path(),
        &[
            "evaluate",
            "--image",
            &img,
            "--method",
            "gbp",
            "--cause",
            "deletion",
            "--effect",
            "C",
            "--setting",
            "S",
            "--out",
            "c.csv",
            "--summary",
            "s.json",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("c.csv")).unwrap();
    assert!(csv.starts_with("fraction,value\n0,"));
    assert_eq!(csv.lines().count(), 102);
    let s: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
    assert_eq!(s["code"], "DCS");
    assert_eq!(s["method"], "GBP");
    assert!(s["auc"].as_f64().unwrap() > 0.0);
    assert!(s["detector_config"]["num_classes"].is_number());
}

#[test]
fn movis_writes_overlay_and_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_scene(dir.path(), 3);
    let o = dext(
        dir.path(),
        &["movis", "--image", &img, "--movis", "principal_components", "--out", "o.png", "--shapes", "s.json"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let shapes: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
    for (i, s) in shapes.as_array().unwrap().iter().enumerate() {
        assert_eq!(s["detection_ref"], i);
        assert!(s["variant"].is_string());
    }
}

#[test]
fn rank_published_table() {
    let dir = tempfile::tempdir().unwrap();
    let table = "subject,DCS,ICS,DBS,IBS,DCR,ICR,DBR,IBR\nGBP,4,3,1,2,4,3,3,1\nSGBP,1,2,2,4,1,2,2,2\nIG,3,4,4,3,3,4,4,4\nSIG,2,1,3,1,2,1,1,3\n";
    std::fs::write(dir.path().join("ranks.csv"), table).unwrap();
    let o = dext(dir.path(), &["rank", "--ranks", "ranks.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let overall: Vec<&str> = out.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(overall, vec!["3", "2", "4", "1"]);

    let aauc = "subject,DCS,ICS\nA,0.1,0.9\nB,0.2,0.8\n";
    std::fs::write(dir.path().join("aauc.csv"), aauc).unwrap();
    let o = dext(dir.path(), &["rank", "--aauc", "aauc.csv"]);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), "subject,DCS,ICS,Overall\nA,1,1,1\nB,2,2,2\n");

    std::fs::write(dir.path().join("bad.csv"), "subject,DCS,XYZ\nA,0.1,0.2\n").unwrap();
    assert_eq!(dext(dir.path(), &["rank", "--aauc", "bad.csv"]).status.code(), Some(2));
}

#[test]
fn study_through_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = dext(dir.path(), &["study", "next"]);
    assert_eq!(o.status.code(), Some(1));

    let o = dext(dir.path(), &["study", "vote", "--option", "contours"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = dext(dir.path(), &["study", "ranking"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["votes"]["counts"]["contours"], 1);
    assert_eq!(v["games"], 0);

    let games = "{\"a\":\"GBP\",\"b\":\"IG\",\"score\":2,\"ts\":0}\n";
    std::fs::write(dir.path().join("games.jsonl"), games).unwrap();
    let o = dext(dir.path(), &["rank", "--games", "games.jsonl"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v[0]["method"], "GBP");
    assert_eq!(v[0]["rating"], 1016.0);
}
