use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use gazekit_ffi::*;

fn last_error() -> String {
    let p = gk_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn hha_round_trip() {
    // 3x3 ramp; the same map the core unit tests freeze
    let depth: Vec<f64> = (1..=9).map(f64::from).collect();
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(gk_hha_encode(depth.as_ptr(), 3, 3, &mut h), GkStatus::Ok);
        assert_eq!((gk_hha_width(h), gk_hha_height(h)), (3, 3));
        let mut rgb = vec![0u8; 27];
        assert_eq!(gk_hha_rgb(h, rgb.as_mut_ptr(), 26), GkStatus::OutOfRange);
        assert_eq!(gk_hha_rgb(h, rgb.as_mut_ptr(), rgb.len()), GkStatus::Ok);
        let disparity: Vec<u8> = rgb.iter().step_by(3).copied().collect();
        assert_eq!(disparity, [255, 105, 59, 36, 23, 14, 8, 4, 0]);
        gk_hha_free(h);

        let mut h = ptr::null_mut();
        assert_eq!(
            gk_hha_encode(depth.as_ptr(), 2, 2, &mut h),
            GkStatus::InvalidInput
        );
        assert!(h.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(
            gk_hha_encode(ptr::null(), 3, 3, &mut h),
            GkStatus::NullPointer
        );
    }
}

#[test]
fn parse_and_inspect() {
    let text = CString::new("<box_start>(480,480),(520,520)<box_end><ref_start>cup<ref_end><box_start>(1,2),(3,4)<box_end>").unwrap();
    let mut p = ptr::null_mut();
    unsafe {
        assert_eq!(
            gk_parse_response(text.as_ptr(), &mut p, ptr::null_mut()),
            GkStatus::Ok
        );
        assert_eq!(gk_prediction_box_count(p), 2);
        let mut b = GkNormBox {
            x1: 0,
            y1: 0,
            x2: 0,
            y2: 0,
        };
        assert_eq!(gk_prediction_box(p, 1, &mut b), GkStatus::Ok);
        assert_eq!(
            b,
            GkNormBox {
                x1: 1,
                y1: 2,
                x2: 3,
                y2: 4
            }
        );
        assert_eq!(gk_prediction_box(p, 2, &mut b), GkStatus::OutOfRange);
        assert!(!gk_prediction_out_of_frame(p));
        let c = gk_prediction_class(p);
        assert_eq!(CStr::from_ptr(c).to_str().unwrap(), "cup");
        gk_string_free(c);
        let mut json = ptr::null_mut();
        assert_eq!(gk_prediction_to_json(p, &mut json), GkStatus::Ok);
        assert!(CStr::from_ptr(json)
            .to_str()
            .unwrap()
            .contains("\"task\":\"gaze_object\""));
        gk_string_free(json);
        gk_prediction_free(p);

        let bad = CString::new("abc<box_end>").unwrap();
        let mut off = usize::MAX;
        let mut p = ptr::null_mut();
        assert_eq!(
            gk_parse_response(bad.as_ptr(), &mut p, &mut off),
            GkStatus::MalformedResponse
        );
        assert_eq!(off, 3);
        assert!(p.is_null());

        let out = CString::new("looking out of the image").unwrap();
        assert_eq!(
            gk_parse_response(out.as_ptr(), &mut p, ptr::null_mut()),
            GkStatus::Ok
        );
        assert!(gk_prediction_out_of_frame(p));
        assert!(gk_prediction_class(p).is_null());
        gk_prediction_free(p);
    }
}

#[test]
fn serialize_iou_auc() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(
            gk_serialize_box(
                GkNormBox {
                    x1: 480,
                    y1: 480,
                    x2: 520,
                    y2: 520
                },
                &mut s
            ),
            GkStatus::Ok
        );
        assert_eq!(
            CStr::from_ptr(s).to_str().unwrap(),
            "<box_start>(480,480),(520,520)<box_end>"
        );
        gk_string_free(s);
        assert_eq!(
            gk_serialize_box(
                GkNormBox {
                    x1: 0,
                    y1: 0,
                    x2: 1000,
                    y2: 5
                },
                &mut s
            ),
            GkStatus::InvalidInput
        );
    }
    let a = GkPixelBox {
        x1: 0.0,
        y1: 0.0,
        x2: 10.0,
        y2: 10.0,
    };
    let b = GkPixelBox {
        x1: 5.0,
        y1: 5.0,
        x2: 15.0,
        y2: 15.0,
    };
    assert!((gk_iou(a, b) - 1.0 / 7.0).abs() < 1e-12);
    assert!(gk_iou(GkPixelBox { x1: 3.0, ..a }, GkPixelBox { x1: 20.0, ..b }) < 0.0);

    let heat = [0.25f64; 64];
    let pts = [0.1, 0.9];
    let mut v = 0.0;
    unsafe {
        assert_eq!(
            gk_auc(heat.as_ptr(), 8, pts.as_ptr(), 1, &mut v),
            GkStatus::Ok
        );
        assert_eq!(v, 0.5);
        let all = [1.0f64; 1];
        let p = [0.0, 0.0];
        // a 1x1 grid has no negatives
        assert_eq!(
            gk_auc(all.as_ptr(), 1, p.as_ptr(), 1, &mut v),
            GkStatus::UndefinedMetric
        );
    }
}

#[test]
fn evaluate_files() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("a.jsonl");
    let pred = dir.path().join("p.jsonl");
    std::fs::write(&ann, r#"{"sample_id":"a","image":"a.jpg","width":100,"height":100,"head_box":[10,10,20,20],"eye":[0.15,0.15],"gaze_points":[[0.5005,0.5005]],"in_frame":true}"#).unwrap();
    std::fs::write(
        &pred,
        r#"{"sample_id":"a","task":"gaze_target","boxes":[[480,480,520,520]]}"#,
    )
    .unwrap();
    let (a, p) = (
        CString::new(ann.to_str().unwrap()).unwrap(),
        CString::new(pred.to_str().unwrap()).unwrap(),
    );
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(
            gk_evaluate_files(p.as_ptr(), a.as_ptr(), &mut out),
            GkStatus::Ok
        );
        let v: serde_json::Value =
            serde_json::from_str(CStr::from_ptr(out).to_str().unwrap()).unwrap();
        assert_eq!(v["dist"], 0.0);
        gk_string_free(out);
        let missing = CString::new("/nonexistent/x.jsonl").unwrap();
        assert_eq!(
            gk_evaluate_files(missing.as_ptr(), a.as_ptr(), &mut out),
            GkStatus::Io
        );
        assert!(out.is_null());
    }
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(gk_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn c_compiler() -> Option<&'static str> {
    ["cc", "gcc", "clang"].into_iter().find(|c| {
        Command::new(c)
            .arg("--version")
            .output()
            .is_ok_and(|o| o.status.success())
    })
}

/// Compile and run a C program against the generated header and the static
/// library. Skipped when no C compiler is installed.
#[test]
fn c_program_links_and_runs() {
    let Some(cc) = c_compiler() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test binary> -> target/<profile>
    let profile_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = profile_dir.join("libgazekit_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "gazekit.h"

int main(void) {
    GkNormBox b = {480, 480, 520, 520};
    char *s = NULL;
    if (gk_serialize_box(b, &s) != GK_STATUS_OK) return 1;
    if (strcmp(s, "<box_start>(480,480),(520,520)<box_end>") != 0) return 2;
    gk_string_free(s);

    GkPrediction *p = NULL;
    size_t off = 0;
    if (gk_parse_response("x<ref_end>", &p, &off) != GK_STATUS_MALFORMED_RESPONSE) return 3;
    if (off != 1 || gk_last_error_message() == NULL) return 4;

    double depth[9] = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    GkHha *h = NULL;
    if (gk_hha_encode(depth, 3, 3, &h) != GK_STATUS_OK) return 5;
    unsigned char rgb[27];
    if (gk_hha_rgb(h, rgb, sizeof rgb) != GK_STATUS_OK) return 6;
    gk_hha_free(h);
    printf("%u %u\n", rgb[0], rgb[26]);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "255 0");
}
