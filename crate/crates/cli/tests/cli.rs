use std::path::Path;
use std::process::{Command, Output};

use cimark::data::synth_textures;
use cimark::distortions::DistortionSpec;
use cimark::image_io::{load_image, save_image};
use cimark::rng::seeded_rng;
use cimark::training::Trainer;
use cimark::{BitMessage, Model, RunConfig};

fn cimark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cimark"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config() -> RunConfig {
    RunConfig {
        image_size: [32, 32],
        message_length: 8,
        embedder_widths: [8, 8, 8, 8],
        front_channels: 4,
        message_channels: 4,
        extractor_width: 4,
        batch_size: 2,
        epochs: 1,
        dataset_size: 4,
        seed: 3,
        ..RunConfig::desk()
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_an_argument_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = cimark(&["train", "--config", s(&dir.path().join("nope.json")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn malformed_arguments_exit_with_two() {
    assert_eq!(cimark(&["fly"]).status.code(), Some(2));
    assert_eq!(cimark(&["embed", "--input", "x.png"]).status.code(), Some(2));
    assert_eq!(cimark(&["gradcheck", "--only", "nope"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"image_size": [30, 30]}"#).unwrap();
    let o = cimark(&["train", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = cimark(&["ablate", "--variants", "full,no-such", "--report", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("r").exists());
}

#[test]
fn gradcheck_prints_a_passing_table() {
    let o = cimark(&["gradcheck", "--only", "afmm,bce,cim-fused"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.ends_with("pass")).count(), 6);
    assert!(text.contains("all 6 checks passed"));
}

#[test]
fn train_writes_checkpoint_log_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let out = dir.path().join("run");
    let o = cimark(&["train", "--config", &cfg, "--out", s(&out), "--seed", "11"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("seed: 11"));
    assert!(text.lines().any(|l| l.starts_with("config: {")));
    assert!(out.join("final.ckpt").exists());
    assert_eq!(std::fs::read_to_string(out.join("loss.jsonl")).unwrap().lines().count(), 2);
    let saved = RunConfig::load(out.join("config.json")).unwrap();
    assert_eq!(saved.seed, 11);

    // resuming with more epochs continues the step count
    let o = cimark(&["train", "--resume", s(&out.join("final.ckpt")), "--out", s(&out), "--epochs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("steps: 4"));

    // an untrained checkpoint has no guidance to embed with
    let zero = write_config(dir.path(), &RunConfig { epochs: 0, ..tiny_config() });
    let z = dir.path().join("zero");
    assert_eq!(cimark(&["train", "--config", &zero, "--out", s(&z)]).status.code(), Some(0));
    let img = dir.path().join("in.png");
    save_image(&synth_textures(&mut seeded_rng(1), 1, 32, 32)[0], &img).unwrap();
    let o = cimark(&[
        "embed", "--checkpoint", s(&z.join("final.ckpt")), "--input", s(&img), "--message", "a5", "--output",
        s(&dir.path().join("wm.png")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("wm.png").exists());
}

#[test]
fn embed_then_extract_recovers_an_overfit_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        distortions: cimark::config::DistortionToggles {
            affine: false,
            noise: false,
            ..Default::default()
        },
        learning_rate: 1e-3,
        ..tiny_config()
    };
    let image = synth_textures(&mut seeded_rng(5), 1, 32, 32).remove(0);
    let message = BitMessage::from_hex("c3", 8).unwrap();
    let mut trainer = Trainer::new(&cfg).unwrap();
    let mut rng = seeded_rng(6);
    let model = Model::new(&cfg).unwrap();
    let mut converged = false;
    for step in 0..1500 {
        trainer
            .train_step_with(&[image.clone()], &[message.clone()], &[DistortionSpec::IDENTITY], &mut rng)
            .unwrap();
        if step % 50 == 49 {
            // judge on the 8-bit round trip the CLI goes through
            let ck = trainer.checkpoint().unwrap();
            let g = ck.guidance.as_ref().unwrap();
            let wm = model.embed(&ck.params, &[image.clone()], &[message.clone()], g).unwrap();
            let path = dir.path().join("probe.png");
            save_image(&wm[0], &path).unwrap();
            let p = model.extract(&ck.params, &[load_image(&path).unwrap()], g).unwrap();
            if p[0].iter().zip(message.bits()).all(|(p, &b)| (*p - b as f64).abs() < 0.3) {
                converged = true;
                break;
            }
        }
    }
    assert!(converged, "tiny overfit did not converge");
    let ck = dir.path().join("overfit.ckpt");
    trainer.checkpoint().unwrap().save(&ck).unwrap();

    let cover = dir.path().join("cover.png");
    save_image(&image, &cover).unwrap();
    let before = std::fs::read(&cover).unwrap();
    let wm = dir.path().join("wm.png");
    let o = cimark(&["embed", "--checkpoint", s(&ck), "--input", s(&cover), "--message", "c3", "--output", s(&wm)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&cover).unwrap(), before, "input was modified");

    let o = cimark(&["extract", "--checkpoint", s(&ck), "--input", s(&wm)]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.eq_ignore_ascii_case("message: c3")), "{text}");
    let probs = text.lines().find_map(|l| l.strip_prefix("probabilities: ")).unwrap();
    assert_eq!(probs.split(' ').count(), 8);

    let o = cimark(&["embed", "--checkpoint", s(&ck), "--input", s(&cover), "--message", "xyz", "--output", s(&wm)]);
    assert_eq!(o.status.code(), Some(2));

    let report = dir.path().join("report.json");
    let csv = dir.path().join("per_image.csv");
    let o = cimark(&[
        "evaluate", "--checkpoint", s(&ck), "--images", "3", "--distortions", "original,flip-h,gaussian-noise=0.1",
        "--report", s(&report), "--csv", s(&csv),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["distortions"].as_array().unwrap().len(), 3);
    assert_eq!(json["images"], 3);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);

    let o = cimark(&["evaluate", "--checkpoint", s(&ck), "--distortions", "warp", "--report", s(&report)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let report = dir.path().join("ablation.jsonl");
    let o = cimark(&[
        "ablate", "--config", &cfg, "--variants", "full,no-cim:none", "--images", "2", "--report", s(&report),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&report)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["variant"], "no-cim:none");
}
