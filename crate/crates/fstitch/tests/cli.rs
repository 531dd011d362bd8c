use std::path::Path;
use std::process::{Command, Output};

use fstitch::formats::{save_key, save_model};
use fstitch::idx::{encode_images, encode_labels, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use fstitch_core::rng::seeded;
use fstitch_core::{model_digest, AdvKind, KeyBaseSet, KeyEntry, Model, Norm, Tensor, WatermarkKey};
use rand::Rng;
use tempfile::TempDir;

fn fstitch(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fstitch"))
        .args(args)
        .current_dir(dir)
        .env_remove("FSTITCH_DATA")
        .env_remove("FSTITCH_BIND")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Writes a tiny IDX data set where the class is encoded in pixel brightness.
fn synthetic_mnist(dir: &Path) {
    let mut rng = seeded(11);
    let mut write = |images: &str, labels: &str, n: usize| {
        let ys: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let px: Vec<u8> = ys
            .iter()
            .flat_map(|&y| (0..784).map(move |p| (y as usize * 25 + p % 3) as u8))
            .map(|v| v.saturating_add(rng.random_range(0..4)))
            .collect();
        std::fs::write(dir.join(images), encode_images(n, &px)).unwrap();
        std::fs::write(dir.join(labels), encode_labels(&ys)).unwrap();
    };
    write(TRAIN_IMAGES, TRAIN_LABELS, 200);
    write(TEST_IMAGES, TEST_LABELS, 50);
}

/// A model plus a 20-entry key whose labels are either the model's own
/// answers or all shifted by one class.
fn model_and_key(dir: &Path, agree: bool) {
    let model = Model::mlp(784, &[8], 10, 2).unwrap();
    let mut rng = seeded(5);
    let entries = (0..20)
        .map(|i| {
            let x: Vec<f64> = (0..784).map(|_| rng.random_range(0.0..=1.0)).collect();
            let y = model.predict(&x).unwrap();
            KeyEntry {
                input: Tensor::vector(&x),
                label: if agree { y } else { (y + 1) % 10 },
                kind: if i % 2 == 0 { AdvKind::TrueAdv } else { AdvKind::FalseAdv },
                base_source_id: i,
            }
        })
        .collect();
    let key = WatermarkKey::new(entries, 0.25, Norm::Linf, model_digest(&model), 5, KeyBaseSet::Test).unwrap();
    save_model(dir.join("m.fsm"), &model).unwrap();
    save_key(dir.join("k.fsk"), &key).unwrap();
}

#[test]
fn usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    assert_eq!(code(&fstitch(p, &[])), 2);
    assert_eq!(code(&fstitch(p, &["frobnicate"])), 2);
    assert_eq!(code(&fstitch(p, &["nullsim", "--classes", "1"])), 2);
    assert_eq!(code(&fstitch(p, &["train", "--out", "x.fsm", "--data-dir", "missing"])), 2);
    assert_eq!(code(&fstitch(p, &["extract", "--key", "k.fsk"])), 2);
    assert_eq!(
        code(&fstitch(p, &["extract", "--key", "k", "--model", "m", "--endpoint", "http://x"])),
        2
    );
    assert_eq!(code(&fstitch(p, &["extract", "--key", "absent.fsk", "--model", "absent.fsm"])), 2);
    assert_eq!(code(&fstitch(p, &["--help"])), 0);
}

#[test]
fn nullsim_reports_expected_matches() {
    let dir = TempDir::new().unwrap();
    let out = fstitch(dir.path(), &["nullsim", "--key-size", "100", "--classes", "10", "--trials", "2000"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("θ=42"), "{text}");
    let mean: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("mean matches "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((mean - 10.0).abs() < 0.5);

    let small = fstitch(dir.path(), &["nullsim", "--key-size", "4", "--trials", "10"]);
    assert_eq!(code(&small), 0);
    assert!(stdout(&small).contains("key too small to ever verify (θ=0)"));
}

#[test]
fn extract_exit_codes_follow_the_verdict() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    model_and_key(p, true);
    let hit = fstitch(p, &["extract", "--key", "k.fsk", "--model", "m.fsm"]);
    assert_eq!(code(&hit), 0);
    assert!(stdout(&hit).starts_with("MATCH m_K=0 θ=6 |K|=20"), "{}", stdout(&hit));

    model_and_key(p, false);
    let miss = fstitch(p, &["extract", "--key", "k.fsk", "--model", "m.fsm"]);
    assert_eq!(code(&miss), 1);
    assert!(stdout(&miss).starts_with("NO MATCH m_K=20"));

    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let endpoint = format!("http://127.0.0.1:{port}");
    let down = fstitch(p, &["extract", "--key", "k.fsk", "--endpoint", &endpoint, "--timeout-secs", "2"]);
    assert_eq!(code(&down), 3);
}

#[test]
fn corrupt_model_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    model_and_key(p, true);
    std::fs::write(p.join("m.fsm"), b"FSMODEL9garbage").unwrap();
    assert_eq!(code(&fstitch(p, &["extract", "--key", "k.fsk", "--model", "m.fsm"])), 3);
}

#[test]
fn train_then_replay_reproduces_the_model() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    synthetic_mnist(p);
    std::fs::write(p.join("train.conf"), "# small run\narch = mlp-8\nepochs = 5\nbatch_size = 16\n").unwrap();
    let out = fstitch(
        p,
        &["train", "--data-dir", ".", "--config", "train.conf", "--epochs", "2", "--out", "a.fsm", "--seed", "4"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    // the explicit flag beats the config file
    assert_eq!(text.lines().filter(|l| l.starts_with("epoch")).count(), 2);

    let manifest = p.join("a.fsm.manifest.json");
    let recorded: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(recorded["command"], "train");
    let first = std::fs::read(p.join("a.fsm")).unwrap();
    std::fs::remove_file(p.join("a.fsm")).unwrap();

    let replay = fstitch(p, &["replay", "a.fsm.manifest.json"]);
    assert_eq!(code(&replay), 0, "{}", String::from_utf8_lossy(&replay.stderr));
    assert_eq!(std::fs::read(p.join("a.fsm")).unwrap(), first);
}

#[test]
fn untrained_model_is_near_chance() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    synthetic_mnist(p);
    let out = fstitch(p, &["train", "--data-dir", ".", "--arch", "mlp-8", "--epochs", "0", "--out", "z.fsm"]);
    assert_eq!(code(&out), 0);
    let acc: f64 = stdout(&out)
        .lines()
        .find_map(|l| l.strip_prefix("test accuracy "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(acc <= 0.3, "{acc}");
}
