use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gazekit::ingest::{read_predictions, write_depth_pfm};
use gazekit::model::ImageSize;

fn gazekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gazekit"))
        .args(args)
        .env_remove("GAZEKIT_CONFIG")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_annotations(dir: &Path) -> PathBuf {
    let lines = [
        r#"{"sample_id":"a","image":"a.jpg","width":100,"height":100,"head_box":[10,10,20,20],"eye":[0.15,0.15],"gaze_points":[[0.5005,0.5005]],"in_frame":true,"gazed_object":{"bbox":[40,40,60,60],"class":"cup"}}"#,
        r#"{"sample_id":"b","image":"b.jpg","width":200,"height":100,"head_box":[0,0,30,30],"eye":[0.05,0.1],"gaze_points":[[0.8005,0.2005],[0.8205,0.2505]],"in_frame":true}"#,
        r#"{"sample_id":"c","image":"b.jpg","width":200,"height":100,"head_box":[100,10,130,40],"eye":[0.6,0.2],"in_frame":false}"#,
    ];
    let path = dir.join("ann.jsonl");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(gazekit(&["--help"]).status.code(), Some(0));
    assert_eq!(gazekit(&["--version"]).status.code(), Some(0));
    assert_eq!(gazekit(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn hha_directory_with_one_bad_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("depth");
    std::fs::create_dir(&input).unwrap();
    let size = ImageSize::new(8, 6).unwrap();
    for i in 0..9 {
        let vals: Vec<f32> = (0..48).map(|k| 1.0 + (k * (i + 1)) as f32 * 0.1).collect();
        write_depth_pfm(&input.join(format!("d{i}.pfm")), size, &vals).unwrap();
    }
    std::fs::write(input.join("broken.pfm"), b"Pf\n8 6\n-1.0\nshort").unwrap();
    let out = dir.path().join("hha");

    let o = gazekit(&["hha", "--depth", p(&input), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("9 ok, 1 failed"));
    let pngs = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .to_string_lossy()
                .ends_with(".hha.png")
        })
        .count();
    assert_eq!(pngs, 9);
    assert!(out.join("hha.meta.json").exists());

    std::fs::remove_file(input.join("broken.pfm")).unwrap();
    let o = gazekit(&["hha", "--depth", p(&input), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0));

    let o = gazekit(&[
        "hha",
        "--depth",
        p(&input),
        "--out",
        p(&out),
        "--scale",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn build_counts_and_skips() {
    let dir = tempfile::tempdir().unwrap();
    let ann = write_annotations(dir.path());
    let out = dir.path().join("rec.jsonl");
    let o = gazekit(&[
        "build",
        "--annotations",
        p(&ann),
        "--tasks",
        "gaze_target,gaze_inout",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 6);

    // b has no gazed object and no detections: skipped for gaze_object
    let o = gazekit(&[
        "build",
        "--annotations",
        p(&ann),
        "--tasks",
        "gaze_object,person_detection",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&out).unwrap();
    // a and c for gaze_object, two images for person_detection
    assert_eq!(text.lines().count(), 4);
    assert!(text.contains("<ref_start>cup<ref_end>"));

    let dets = dir.path().join("dets.json");
    std::fs::write(
        &dets,
        r#"{"b":[{"bbox":[150,10,170,30],"class":"lamp","score":0.7}]}"#,
    )
    .unwrap();
    let o = gazekit(&[
        "build",
        "--annotations",
        p(&ann),
        "--detections",
        p(&dets),
        "--tasks",
        "gaze_object",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("<ref_start>lamp<ref_end>"));

    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("rec.jsonl.meta.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(meta["tool"], "gazekit");
    assert_eq!(meta["config"]["prompt"]["lambda_margin"], 20);
}

#[test]
fn predict_center_and_seed_rules() {
    let dir = tempfile::tempdir().unwrap();
    let ann = write_annotations(dir.path());
    let out = dir.path().join("center.jsonl");
    let o = gazekit(&[
        "predict",
        "--annotations",
        p(&ann),
        "--kind",
        "center",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let (preds, errors) = read_predictions(&out).unwrap();
    assert!(errors.is_empty());
    assert_eq!(preds.len(), 3);
    for pr in &preds {
        let b: [u32; 4] = pr.boxes[0].into();
        assert_eq!(b, [480, 480, 520, 520]);
    }

    let o = gazekit(&[
        "predict",
        "--annotations",
        p(&ann),
        "--kind",
        "random",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));

    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[predictor]\nkind = \"random\"\nseed = 5\n").unwrap();
    let o = gazekit(&[
        "--config",
        p(&cfg),
        "predict",
        "--annotations",
        p(&ann),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));

    // GAZEKIT_CONFIG supplies the default config path
    let o = Command::new(env!("CARGO_BIN_EXE_gazekit"))
        .args(["predict", "--annotations", p(&ann), "--out", p(&out)])
        .env("GAZEKIT_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));

    std::fs::write(&cfg, "[predictor]\nkindd = \"random\"\n").unwrap();
    let o = gazekit(&[
        "--config",
        p(&cfg),
        "predict",
        "--annotations",
        p(&ann),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn parse_responses() {
    let dir = tempfile::tempdir().unwrap();
    let resp = dir.path().join("resp.jsonl");
    let out = dir.path().join("parsed.jsonl");

    std::fs::write(&resp, "").unwrap();
    let o = gazekit(&["parse", "--responses", p(&resp), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "");

    std::fs::write(
        &resp,
        concat!(
            r#"{"sample_id":"a","text":"<box_start>(480,480),(520,520)<box_end><ref_start>cup<ref_end><box_start>(400,400),(600,600)<box_end>"}"#,
            "\n",
            r#"{"sample_id":"b","text":"looking out of the image"}"#,
            "\n",
            r#"{"sample_id":"c","text":"abc<box_end>"}"#,
            "\n",
        ),
    )
    .unwrap();
    let o = gazekit(&["parse", "--responses", p(&resp), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let (preds, _) = read_predictions(&out).unwrap();
    assert_eq!(preds.len(), 2);
    assert_eq!(preds[0].class_label.as_deref(), Some("cup"));
    assert!(preds[1].out_of_frame);
    let errs = std::fs::read_to_string(dir.path().join("parsed.jsonl.errors.jsonl")).unwrap();
    let e: serde_json::Value = serde_json::from_str(errs.lines().next().unwrap()).unwrap();
    assert_eq!(e["sample_id"], "c");
    assert_eq!(e["offset"], 3);
    assert_eq!(e["line"], 3);
}

#[test]
fn evaluate_reports_agree() {
    let dir = tempfile::tempdir().unwrap();
    let ann = write_annotations(dir.path());
    let preds = dir.path().join("oracle.jsonl");
    let o = gazekit(&[
        "predict",
        "--annotations",
        p(&ann),
        "--kind",
        "oracle",
        "--out",
        p(&preds),
    ]);
    assert_eq!(o.status.code(), Some(0));

    // a prediction for a sample the annotations do not know
    let mut text = std::fs::read_to_string(&preds).unwrap();
    text.push_str(r#"{"sample_id":"zzz","task":"gaze_target","boxes":[[1,1,2,2]]}"#);
    text.push('\n');
    std::fs::write(&preds, text).unwrap();

    let table = gazekit(&[
        "evaluate",
        "--predictions",
        p(&preds),
        "--annotations",
        p(&ann),
    ]);
    assert_eq!(table.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&table.stderr).contains("unknown sample_id 'zzz'"));
    let t = String::from_utf8(table.stdout).unwrap();
    let header: Vec<&str> = t.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(
        header,
        [
            "Dataset",
            "Predictor",
            "AUC",
            "Dist.",
            "M.",
            "Dist.",
            "Angle",
            "AP_ob",
            "AP"
        ]
    );
    let row: Vec<&str> = t.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(row[3], "0.000");

    let json = gazekit(&[
        "evaluate",
        "--predictions",
        p(&preds),
        "--annotations",
        p(&ann),
        "--report",
        "json",
    ]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    let r = &v["report"];
    assert_eq!(r["dist"], 0.0);
    assert_eq!(r["counts"]["unknown_sample_ids"], 1);
    assert_eq!(format!("{:.3}", r["auc"].as_f64().unwrap()), row[2]);
    assert_eq!(format!("{:.3}", r["ap_ob"].as_f64().unwrap()), row[6]);
    assert_eq!(format!("{:.3}", r["ap_inout"].as_f64().unwrap()), row[7]);

    let csv = gazekit(&[
        "evaluate",
        "--predictions",
        p(&preds),
        "--annotations",
        p(&ann),
        "--report",
        "csv",
    ]);
    let c = String::from_utf8(csv.stdout).unwrap();
    assert!(c.starts_with("dataset,predictor,auc,dist"));
    assert_eq!(c.lines().nth(1).unwrap().split(',').nth(3), Some("0"));
}
