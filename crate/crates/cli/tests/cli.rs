use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vitprune::checkpoint::Checkpoint;

const DATA: &str = r#"
[data.synthetic]
classes = 4
train = 128
test = 64
noise = 0.8
seed = 1
"#;

fn vitprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitprune"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Writes `body` plus the shared data section to `<dir>/<name>.toml` and runs
/// `command` with it, expecting success.
fn stage(dir: &Path, name: &str, command: &str, body: &str) -> PathBuf {
    let out = dir.join(name);
    let cfg = dir.join(format!("{name}.toml"));
    std::fs::write(&cfg, format!("[run]\nout = {:?}\n{body}\n{DATA}", out)).unwrap();
    let o = vitprune(&[command, "--config", cfg.to_str().unwrap(), "--threads", "1"]);
    assert!(
        o.status.success(),
        "{command} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    out
}

fn input(path: &Path) -> String {
    format!("input = {path:?}")
}

/// Loads a checkpoint and checks that saving it again reproduces the file.
fn round_trip(path: &Path) -> Checkpoint {
    let bytes = std::fs::read(path).unwrap();
    let ck = Checkpoint::load(path).unwrap();
    assert_eq!(
        ck.to_bytes().unwrap(),
        bytes,
        "{} does not round-trip",
        path.display()
    );
    ck
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn train(dir: &Path) -> PathBuf {
    let out = stage(
        dir,
        "train",
        "train",
        "seed = 3\n[train.optim]\nepochs = 2\nwarmup_epochs = 1\nbatch_size = 32\nlr_base = 2e-2\n",
    );
    out.join("model.ckpt")
}

fn prune_body(from: &Path, target: f64) -> String {
    format!(
        "{}\n[prune.schedule]\ninterval_steps = 2\ntarget_speedup = {target}\n[prune.optim]\nbatch_size = 32\nlr_base = 1e-3\n",
        input(from)
    )
}

#[test]
fn full_pipeline_round_trips_every_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = train(d);
    let trained = round_trip(&model);
    assert!(trained.optimizer.is_some());
    assert_eq!(trained.counters.epoch, 2);
    assert!(d.join("train/metrics.jsonl").exists());
    assert!(d.join("train/config.toml").exists());

    let p1 = stage(d, "prune1", "prune", &prune_body(&model, 1.3)).join("pruned.ckpt");
    let first = round_trip(&p1);
    let summary = json(&p1.with_file_name("prune.json"));
    assert!(summary["speedup"].as_f64().unwrap() >= 1.3);
    assert!(first.model.num_params() < trained.model.num_params());

    let p2 = stage(d, "prune2", "prune", &prune_body(&p1, 1.3)).join("pruned.ckpt");
    let second = round_trip(&p2);
    assert!(second.model.num_params() < first.model.num_params());

    let ft = stage(
        d,
        "finetune",
        "finetune",
        &format!(
            "{}\n[loss]\nfull_teacher = {model:?}\n[finetune.optim]\nepochs = 1\nbatch_size = 32\nlr_base = 1e-3\n",
            input(&p2)
        ),
    )
    .join("finetuned.ckpt");
    let tuned = round_trip(&ft);
    assert_eq!(tuned.model.spec(), second.model.spec());

    let sp = stage(
        d,
        "sparsify",
        "sparsify",
        &format!("{}\n[sparsify]\nfinetune_epochs = 1\n[finetune.optim]\nbatch_size = 32\nlr_base = 1e-3\n", input(&ft)),
    )
    .join("sparse.ckpt");
    let sparse = round_trip(&sp);
    assert!(sparse.sparsity.is_some());
    assert_eq!(
        json(&sp.with_file_name("sparsity.json"))["pattern_ok"],
        true
    );

    let ev = stage(d, "eval", "eval", &input(&sp)).join("eval.json");
    let acc = json(&ev)["top1_test"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(
        json(&ev)["params"].as_u64().unwrap() as usize,
        sparse.model.num_params()
    );

    let events = p1.with_file_name("events.jsonl");
    let an = stage(
        d,
        "analyze",
        "analyze",
        &format!(
            "{}\n[analyze]\nevents = {events:?}\ndiversity_images = 8\n",
            input(&p1)
        ),
    );
    for f in [
        "dims.tsv",
        "avg_dims.tsv",
        "trace.tsv",
        "report.json",
        "replay.json",
        "trend.json",
        "diversity.tsv",
    ] {
        assert!(an.join(f).exists(), "analyze did not write {f}");
    }
    let rp = json(&an.join("replay.json"));
    assert_eq!(rp["decisions_matched"], rp["removals"]);
    assert_eq!(rp["mismatches"].as_array().unwrap().len(), 0);

    // Re-running analyze on the same log writes identical reports.
    let again = stage(
        d,
        "analyze2",
        "analyze",
        &format!("[analyze]\nevents = {events:?}\n"),
    );
    for f in ["trace.tsv", "report.json", "replay.json"] {
        assert_eq!(
            std::fs::read(an.join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn unit_target_keeps_the_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let model = train(dir.path());
    let out = stage(dir.path(), "prune", "prune", &prune_body(&model, 1.0)).join("pruned.ckpt");
    let before = round_trip(&model);
    let after = round_trip(&out);
    assert_eq!(after.model.spec(), before.model.spec());
    assert_eq!(json(&out.with_file_name("prune.json"))["removals"], 0);
}

#[test]
fn same_seed_trains_bit_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    // Same config file, output directory included, so the config hash matches too.
    let a = std::fs::read(train(dir.path())).unwrap();
    std::fs::remove_dir_all(dir.path().join("train")).unwrap();
    let b = std::fs::read(train(dir.path())).unwrap();
    assert!(a == b, "checkpoints differ");
}

#[test]
fn generate_and_profile_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let g = stage(dir.path(), "gen", "generate", "[nvit]\nemb = 384\n");
    let summary = json(&g.join("generate.json"));
    let params = summary["params"].as_f64().unwrap();
    assert!((params - 23e6).abs() < 0.15 * 23e6, "{params}");
    assert!(g.join("arch.toml").exists());

    let p = stage(dir.path(), "lut", "profile", "[lut]\ngrid = \"desk\"\n");
    let text = std::fs::read_to_string(p.join("lut.txt")).unwrap();
    assert!(text.lines().count() > 8);
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (
            "[prune.schedule]\ninterval_steps = 0\n",
            "prune",
            "prune.schedule.interval_steps",
        ),
        (
            "[train.optim]\nbatch_size = 0\n",
            "train",
            "train.optim.batch_size",
        ),
        ("[model]\npreset = \"huge\"\n", "train", "model.preset"),
        ("[run]\nbogus = 1\n", "train", "bogus"),
    ];
    for (i, (body, command, field)) in cases.iter().enumerate() {
        let cfg = dir.path().join(format!("bad{i}.toml"));
        let extra = if *command == "prune" {
            "[run]\ninput = \"missing.ckpt\"\n"
        } else {
            ""
        };
        std::fs::write(&cfg, format!("{extra}{body}")).unwrap();
        let o = vitprune(&[
            command,
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ]);
        let err = String::from_utf8_lossy(&o.stderr);
        assert_eq!(o.status.code(), Some(2), "case {i}: {err}");
        assert!(err.contains(field), "case {i}: {err}");
    }
    let o = vitprune(&[
        "train",
        "--config",
        dir.path().join("absent.toml").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("eval.toml");
    let missing = dir.path().join("nothing.ckpt");
    std::fs::write(
        &cfg,
        format!(
            "[run]\nout = {:?}\n{}\n{DATA}",
            dir.path().join("o"),
            input(&missing)
        ),
    )
    .unwrap();
    let o = vitprune(&["eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}
