use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn feddbl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_feddbl"))
        .args(args)
        .output()
        .expect("spawn feddbl")
}

fn ok_json(args: &[&str]) -> Value {
    let out = feddbl(args);
    assert!(
        out.status.success(),
        "feddbl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_small(dir: &Path) {
    ok_json(&[
        "gen", "--out-dir", s(dir), "--seed", "4", "--dim", "8", "--classes", "3", "--sizes", "300,200",
        "--separation", "5",
    ]);
}

#[test]
fn federate_then_eval() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    gen_small(d);
    let report = ok_json(&[
        "federate",
        "--bank", s(&d.join("client-00.fbnk")),
        "--bank", s(&d.join("client-01.fbnk")),
        "--out", s(&d.join("global.blwt")),
        "--personalize", "0.5",
        "--personalized-dir", s(&d.join("pers")),
    ]);
    assert_eq!(report["rounds"], 1);
    // 8×3 f64 weights plus the header
    let up = report["per_round_bytes_per_client"].as_u64().unwrap();
    assert_eq!(up, fs::metadata(d.join("global.blwt")).unwrap().len());
    assert!(up >= 8 * 3 * 8);
    assert!(d.join("pers/client-00.personalized.blwt").exists());
    assert!(d.join("pers/client-01.personalized.blwt").exists());

    let eval = ok_json(&["eval", "--weights", s(&d.join("global.blwt")), "--bank", s(&d.join("test.fbnk"))]);
    let acc = eval["accuracy"].as_f64().unwrap();
    assert!(acc > 0.8, "accuracy {acc}");
    assert!(eval["mcc"].as_f64().unwrap() <= 1.0);
    assert!(eval.get("micro_f1").is_none());
}

#[test]
fn overhead_numbers() {
    let v = ok_json(&[
        "overhead", "--d", "3840", "--classes", "9", "--baseline-bytes", "94400000", "--baseline-rounds", "50",
    ]);
    assert_eq!(v["weight_bytes"], 276480);
    assert_eq!(v["human"], "276.5KB");
    assert!((v["ratio"].as_f64().unwrap() - 17071.759259).abs() < 1e-5);

    let v = ok_json(&["overhead", "--d", "768", "--classes", "9"]);
    assert_eq!(v["weight_bytes"], 55296);
}

#[test]
fn overhead_rejects_zero_dim() {
    let out = feddbl(&["overhead", "--d", "0", "--classes", "2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn keygen_and_encrypt_weights() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    gen_small(d);
    ok_json(&["solve-local", "--bank", s(&d.join("client-00.fbnk")), "--out", s(&d.join("w.blwt"))]);
    let k = ok_json(&[
        "keygen", "--bits", "512", "--seed", "9", "--public", s(&d.join("pk.json")), "--secret",
        s(&d.join("sk.json")),
    ]);
    let enc = ok_json(&[
        "encrypt-weights",
        "--weights", s(&d.join("w.blwt")),
        "--public", s(&d.join("pk.json")),
        "--n-k", "300",
        "--client-id", "client-00",
        "--out", s(&d.join("c.fdbe")),
        "--seed", "1",
    ]);
    assert_eq!(enc["key_fingerprint"], k["fingerprint"]);
    let bytes = fs::read(d.join("c.fdbe")).unwrap();
    assert_eq!(bytes.len() as u64, enc["bytes"].as_u64().unwrap());
    assert_eq!(&bytes[..4], b"FDBE");

    // same seeds, same ciphertext
    ok_json(&[
        "encrypt-weights",
        "--weights", s(&d.join("w.blwt")),
        "--public", s(&d.join("pk.json")),
        "--n-k", "300",
        "--client-id", "client-00",
        "--out", s(&d.join("c2.fdbe")),
        "--seed", "1",
    ]);
    assert_eq!(bytes, fs::read(d.join("c2.fdbe")).unwrap());
}

#[test]
fn encrypted_federate_matches_plain() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    gen_small(d);
    let banks = [s(&d.join("client-00.fbnk")).to_owned(), s(&d.join("client-01.fbnk")).to_owned()];
    ok_json(&["federate", "--bank", &banks[0], "--bank", &banks[1], "--out", s(&d.join("plain.blwt"))]);
    let r = ok_json(&[
        "federate", "--bank", &banks[0], "--bank", &banks[1], "--out", s(&d.join("enc.blwt")), "--encrypted",
        "--key-bits", "512", "--seed", "5",
    ]);
    assert!(r["encrypted_upload_bytes_per_client"].as_u64().unwrap() > 0);
    let test = s(&d.join("test.fbnk")).to_owned();
    let a = ok_json(&["eval", "--weights", s(&d.join("plain.blwt")), "--bank", &test]);
    let b = ok_json(&["eval", "--weights", s(&d.join("enc.blwt")), "--bank", &test]);
    for key in ["accuracy", "macro_f1", "mcc"] {
        let (x, y) = (a[key].as_f64().unwrap(), b[key].as_f64().unwrap());
        assert!((x - y).abs() < 1e-4, "{key}: {x} vs {y}");
    }
}

#[test]
fn sweep_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let cfg = r#"{
        "synthetic": {"seed": 2, "dim": 8, "classes": 3, "sizes": [200, 150], "test_size": 60, "separation": 5.0},
        "folds": 2,
        "proportions": [0.2, 1.0],
        "output": "run.json",
        "csv": "run.csv"
    }"#;
    fs::write(d.join("cfg.json"), cfg).unwrap();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let out = feddbl(&["sweep", "--config", s(&d.join("cfg.json"))]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        runs.push((fs::read(d.join("run.json")).unwrap(), fs::read(d.join("run.csv")).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
    let csv = String::from_utf8(runs[0].1.clone()).unwrap();
    assert!(csv.starts_with("proportion,variant,metric,folds,mean,min,max"));
    assert!(csv.contains("1,global,mcc,2,"));
}

#[test]
fn bad_config_exits_one() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path().join("cfg.json");
    fs::write(&p, r#"{"synthetic": {"seed": 1, "dim": 4, "classes": 2, "sizes": [10], "test_size": 4, "separation": 3.0}, "foldz": 2}"#).unwrap();
    let out = feddbl(&["sweep", "--config", s(&p)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    let out = feddbl(&["sweep", "--config", s(&t.path().join("missing.json"))]);
    assert_eq!(out.status.code(), Some(1));
}
