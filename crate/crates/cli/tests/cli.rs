use std::path::Path;
use std::process::Command;

fn saformer(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_saformer"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "saformer {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_command_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("world.json"), r#"{"num_scenes": 5, "seed": 3}"#).unwrap();
    std::fs::write(
        d.join("train.json"),
        r#"{"sim_epochs": 1, "sim_batch": 8, "real_epochs": 1, "real_batch": 4}"#,
    )
    .unwrap();
    saformer(d, &["synth", "--config", "world.json", "--out", "scenes"]);
    assert_eq!(std::fs::read_dir(d.join("scenes")).unwrap().count(), 5);
    saformer(d, &["extract", "--scene-dir", "scenes", "--out", "real"]);
    saformer(
        d,
        &["harvest", "--sample-dir", "real", "--scene-dir", "scenes", "--stats", "stats.json", "--bank", "bank.safetensors"],
    );
    let sim = saformer(
        d,
        &["gen-sim", "--stats", "stats.json", "--bank", "bank.safetensors", "--count", "12", "--seed", "2", "--out", "sim", "--no-background"],
    );
    assert!(sim.contains("accepted 12 of 12"), "{sim}");
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("sim/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["accepted"], 12);
    assert_eq!(manifest["config"]["background"], false);

    saformer(d, &["pretrain", "--sim-dir", "sim", "--out", "pre.safetensors", "--config", "train.json", "--plot", "pre.svg"]);
    assert!(d.join("pre.metrics.jsonl").exists());
    assert!(std::fs::read_to_string(d.join("pre.svg")).unwrap().starts_with("<svg"));
    saformer(d, &["finetune", "--ckpt", "pre.safetensors", "--real-dir", "real", "--out", "ft.safetensors", "--config", "train.json"]);
    saformer(d, &["finetune", "--ckpt", "pre.safetensors", "--real-dir", "real", "--out", "scratch.safetensors", "--config", "train.json", "--no-ssg-init"]);

    let table = saformer(
        d,
        &["eval", "--ckpt", "ft.safetensors", "--dataset", "real", "--methods", "smaller-box,majority-class,saformer", "--sim-dir", "sim", "--out", "report", "--plot", "macc.svg"],
    );
    assert!(table.contains("smaller-box") && table.contains("saformer"), "{table}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report/benchmark.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 3);
    assert!(d.join("macc.svg").exists());

    saformer(d, &["label", "--ckpt", "ft.safetensors", "--scene-dir", "scenes", "--out", "labels"]);
    assert_eq!(std::fs::read_dir(d.join("labels")).unwrap().count(), 5);
}

#[test]
fn unknown_method_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_saformer"))
        .args(["eval", "--dataset", tmp.path().to_str().unwrap(), "--methods", "nope"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
