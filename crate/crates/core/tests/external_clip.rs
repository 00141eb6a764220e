//! The subprocess CLIP bridge against a small stand-in helper.

use std::path::Path;
use std::process::Command;

use lcco::clip::{record_fixtures, ClipBackend, ExternalBackend, ExternalConfig, FixtureBackend, CLIP_INPUT_SIZE};
use lcco::types::Image;
use lcco::Error;

const HELPER: &str = r#"
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    op = req["op"]
    if op == "info":
        out = {"dim": 4, "model": "stand-in"}
    elif op == "encode_images":
        s = req["size"]
        rows = []
        for px in req["pixels"]:
            n = s * s
            rows.append([sum(px[c * n:(c + 1) * n]) / n for c in range(3)] + [1.0])
        out = {"embeddings": rows}
    elif op == "encode_texts":
        if any(t == "boom" for t in req["texts"]):
            out = {"error": "cannot encode boom"}
        else:
            out = {"embeddings": [[len(t), t.count("a"), 1.0, 0.5] for t in req["texts"]]}
    elif op == "checksum":
        out = {"checksum": "abc123"}
    elif op == "quit":
        sys.exit(0)
    sys.stdout.write(json.dumps(out) + "\n")
    sys.stdout.flush()
"#;

fn python() -> Option<&'static str> {
    Command::new("python3").arg("--version").output().ok().filter(|o| o.status.success()).map(|_| "python3")
}

fn spawn(dir: &Path) -> Option<ExternalBackend> {
    let py = python()?;
    let script = dir.join("helper.py");
    std::fs::write(&script, HELPER).unwrap();
    let cfg = ExternalConfig {
        command: vec![py.to_string(), script.to_str().unwrap().to_string()],
    };
    Some(ExternalBackend::spawn(&cfg).unwrap())
}

#[test]
fn bridge_round_trips_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let Some(clip) = spawn(dir.path()) else {
        eprintln!("python3 unavailable; skipping");
        return;
    };
    assert_eq!(clip.dim(), 4);
    assert_eq!(clip.identity(), "stand-in");
    assert_eq!(clip.parameter_checksum().unwrap(), "abc123");

    let txt = clip.encode_texts(&["a cat".to_string(), "dog".to_string()]).unwrap();
    assert_eq!(txt.shape(), &[2, 4]);
    for row in txt.data().chunks(4) {
        assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let raw = [5.0, 2.0, 1.0, 0.5];
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (got, want) in txt.data()[..4].iter().zip(raw) {
        assert!((got - want / n).abs() < 1e-12);
    }

    // A constant image reaches the helper as its normalised channel values.
    let img = Image::filled(40, 30, [0.48145466, 0.4578275, 0.40821073]);
    let emb = clip.encode_images(std::slice::from_ref(&img)).unwrap();
    let row = emb.data();
    assert!(row[0].abs() < 1e-4 && row[1].abs() < 1e-4 && row[2].abs() < 1e-4);
    assert!((row[3] - 1.0).abs() < 1e-4);
    assert_eq!(CLIP_INPUT_SIZE, 224);
}

#[test]
fn helper_errors_surface_as_encoder_errors() {
    let dir = tempfile::tempdir().unwrap();
    let Some(clip) = spawn(dir.path()) else {
        return;
    };
    let err = clip.encode_texts(&["boom".to_string()]).unwrap_err();
    assert!(matches!(err, Error::Encoder(ref m) if m.contains("boom")), "{err}");
    assert!(clip.encode_texts(&["fine".to_string()]).is_ok());
}

#[test]
fn recorded_fixtures_replay_the_helper_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let Some(clip) = spawn(dir.path()) else {
        return;
    };
    let images = vec![Image::filled(8, 8, [0.9, 0.1, 0.2]), Image::filled(8, 8, [0.2, 0.6, 0.3])];
    let prompts = vec!["A photo of a cow".to_string(), "A photo of a car".to_string()];
    let store = record_fixtures(&clip, &images, &prompts).unwrap();
    let path = dir.path().join("rec.fix");
    store.save(&path).unwrap();
    let replay = FixtureBackend::strict(lcco::clip::FixtureStore::load(&path).unwrap());
    assert_eq!(
        replay.encode_images(&images).unwrap().data(),
        clip.encode_images(&images).unwrap().data()
    );
    assert_eq!(
        replay.encode_texts(&prompts).unwrap().data(),
        clip.encode_texts(&prompts).unwrap().data()
    );
    assert!(matches!(
        replay.encode_texts(&["unseen".to_string()]),
        Err(Error::FixtureMiss { .. })
    ));
}

#[test]
fn missing_program_is_an_encoder_error() {
    let cfg = ExternalConfig {
        command: vec!["/nonexistent/clip-helper".into()],
    };
    assert!(matches!(ExternalBackend::spawn(&cfg), Err(Error::Encoder(_))));
}
