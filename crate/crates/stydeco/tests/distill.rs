mod common;

use std::sync::atomic::Ordering;

use base64::Engine;
use common::{corpus, serve, tiny_config};
use stydeco::core::config::ClientKind;
use stydeco::distill::{client_from_config, distill, StubClient, MANIFEST_FILE, SKIPS_FILE};
use stydeco::imageio::{encode_png, load_image};
use stydeco::manifest::{read_manifest, DatasetManifest};
use stydeco::Error;

fn read_tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "pseudo"] {
        let d = dir.join(sub);
        let mut names: Vec<_> = std::fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
        names.sort();
        for p in names {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn stub_distill_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    corpus(&src, 5);
    let cfg = tiny_config();
    let a = distill(&StubClient, &src, &tmp.path().join("a"), &cfg).unwrap();
    let b = distill(&StubClient, &src, &tmp.path().join("b"), &cfg).unwrap();
    assert_eq!((a.pairs, a.skipped, a.source_count), (5, 0, 5));
    assert_eq!(b.pairs, 5);
    assert_eq!(read_tree(&tmp.path().join("a")), read_tree(&tmp.path().join("b")));

    let m = read_manifest(&a.manifest).unwrap();
    assert_eq!(m.pairs.len(), 5);
    let names: Vec<_> = m.pairs.iter().map(|p| p.pseudo_path.clone()).collect();
    assert_eq!(names[0], "pseudo/scene_00.png");
    let p = DatasetManifest::resolve(&a.manifest, &m.pairs[0].pseudo_path);
    assert_eq!(load_image(&p, 16).unwrap().height(), 16);
}

#[test]
fn unreadable_sources_are_skipped_and_counted() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    corpus(&src, 3);
    std::fs::write(src.join("broken.png"), b"not a png").unwrap();
    let out = tmp.path().join("out");
    let s = distill(&StubClient, &src, &out, &tiny_config()).unwrap();
    assert_eq!((s.pairs, s.skipped, s.source_count), (3, 1, 4));
    let skips = std::fs::read_to_string(out.join(SKIPS_FILE)).unwrap();
    assert_eq!(skips.lines().count(), 1);
    assert!(skips.contains("broken.png"));
}

#[test]
fn empty_source_dir_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let e = distill(&StubClient, tmp.path(), &tmp.path().join("o"), &tiny_config()).unwrap_err();
    assert!(matches!(e, Error::Distill(_)), "{e}");
    assert!(!tmp.path().join("o").join(MANIFEST_FILE).exists());
}

fn remote_cfg(url: String) -> stydeco::core::config::ExperimentConfig {
    let mut cfg = tiny_config();
    cfg.distill.client = ClientKind::Remote;
    cfg.distill.endpoint = Some(url);
    cfg.distill.backoff_ms = 1;
    cfg.distill.concurrency = 1;
    cfg
}

fn echo(body: &[u8]) -> Vec<u8> {
    let v: serde_json::Value = serde_json::from_slice(body).unwrap();
    assert!(v["prompt"].is_string() && v["seed"].is_u64());
    serde_json::json!({"image": v["image"]}).to_string().into_bytes()
}

#[test]
fn remote_echo_round_trip_with_retries() {
    // The first two requests fail transiently; the third attempt succeeds.
    let (url, count) = serve(|req, n| if n < 2 { (503, b"{}".to_vec()) } else { (200, echo(&req.body)) });
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    corpus(&src, 2);
    let cfg = remote_cfg(url);
    let client = client_from_config(&cfg.distill).unwrap();
    let s = distill(client.as_ref(), &src, &tmp.path().join("out"), &cfg).unwrap();
    assert_eq!((s.pairs, s.skipped), (2, 0));
    assert_eq!(count.load(Ordering::SeqCst), 4);
    // Echo returns the input, so the pseudo image equals the resized source.
    let m = read_manifest(&s.manifest).unwrap();
    let a = load_image(&DatasetManifest::resolve(&s.manifest, &m.pairs[0].source_path), 16).unwrap();
    let b = load_image(&DatasetManifest::resolve(&s.manifest, &m.pairs[0].pseudo_path), 16).unwrap();
    assert_eq!(a, b);
}

#[test]
fn exhausted_retries_fail_the_item() {
    let (url, count) = serve(|_, _| (500, b"{}".to_vec()));
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    corpus(&src, 1);
    let cfg = remote_cfg(url);
    let client = client_from_config(&cfg.distill).unwrap();
    let e = distill(client.as_ref(), &src, &tmp.path().join("out"), &cfg).unwrap_err();
    assert!(e.to_string().contains("3 attempts"), "{e}");
    assert_eq!(count.load(Ordering::SeqCst), 3);
}

#[test]
fn malformed_and_wrong_size_responses_fail_without_retry() {
    let small = base64::engine::general_purpose::STANDARD
        .encode(encode_png(&stydeco::core::ImageTensor::filled(8, 8, 0.0)));
    let (url, count) = serve(move |_, n| {
        if n == 0 {
            (200, b"{\"image\": \"###\"}".to_vec())
        } else {
            (200, serde_json::json!({"image": small}).to_string().into_bytes())
        }
    });
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    corpus(&src, 2);
    let cfg = remote_cfg(url);
    let client = client_from_config(&cfg.distill).unwrap();
    let e = distill(client.as_ref(), &src, &tmp.path().join("out"), &cfg).unwrap_err();
    assert!(matches!(e, Error::Distill(_)));
    assert_eq!(count.load(Ordering::SeqCst), 2);
    let skips = std::fs::read_to_string(tmp.path().join("out").join(SKIPS_FILE));
    assert!(skips.is_err(), "no sidecar when nothing succeeded");
}
