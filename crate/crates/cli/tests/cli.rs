use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

fn t2f(args: &[&str]) -> Output {
    t2f_env(args, &[])
}

fn t2f_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_t2f"));
    cmd.args(args).env_remove("T2F_PRECISION");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("train.cfg");
    fs::write(
        &path,
        format!(
            "batch_size = 8\nnoise_dim = 6\nreduced_text_dim = 8\ng_channels = 8\nd_channels = 4\n\
             joint_channels = 4\nseed = 5\nmax_iters = 12\n{extra}"
        ),
    )
    .unwrap();
    path
}

fn synth(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = t2f(&["synth", "--n", "64", "--classes", "4", "--seed", "2", "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_one() {
    let out = t2f(&["paint"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&t2f(&[])), 1);
    assert_eq!(code(&t2f(&["--help"])), 0);
}

#[test]
fn caption_matches_the_golden_tsv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("captions.tsv");
    let attrs = format!("{FIXTURES}/two_records.txt");
    let run = t2f(&["caption", "--attrs", &attrs, "--out", s(&out)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let golden = fs::read(format!("{FIXTURES}/two_records.tsv")).unwrap();
    assert_eq!(fs::read(&out).unwrap(), golden);

    let m = manifest(&dir.path().join("captions.tsv.manifest.json"));
    assert_eq!(m["command"], "caption");
    assert_eq!(m["artifacts"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 1);
}

#[test]
fn caption_ids_select_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("one.tsv");
    let attrs = format!("{FIXTURES}/two_records.txt");
    assert_eq!(code(&t2f(&["caption", "--attrs", &attrs, "--out", s(&out), "--ids", "000002.jpg"])), 0);
    assert_eq!(
        fs::read_to_string(&out).unwrap(),
        "000002.jpg\tThe woman has high cheekbones. She has wavy hair.\n"
    );
    assert_eq!(code(&t2f(&["caption", "--attrs", &attrs, "--out", s(&out), "--ids", "9.jpg"])), 1);
}

#[test]
fn caption_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.tsv");
    let missing = dir.path().join("nope.txt");
    assert_eq!(code(&t2f(&["caption", "--attrs", s(&missing), "--out", s(&out)])), 2);
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "two\n").unwrap();
    let run = t2f(&["caption", "--attrs", s(&bad), "--out", s(&out)]);
    assert_eq!(code(&run), 1);
    assert!(String::from_utf8_lossy(&run.stderr).contains("bad.txt:1:"));
}

#[test]
fn embed_writes_a_unit_vector() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v.json");
    assert_eq!(code(&t2f(&["embed", "--text", "He has sideburns.", "--dim", "32", "--out", s(&out)])), 0);
    let v: Vec<f64> = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v.len(), 32);
    assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-6);

    let raw = dir.path().join("v.f32");
    assert_eq!(code(&t2f(&["embed", "--text", "He has sideburns.", "--dim", "32", "--out", s(&raw)])), 0);
    let bytes = fs::read(&raw).unwrap();
    assert_eq!(bytes.len(), 32 * 4);
    for (k, chunk) in bytes.chunks(4).enumerate() {
        assert_eq!(f32::from_le_bytes(chunk.try_into().unwrap()), v[k] as f32);
    }
}

#[test]
fn gradcheck_passes() {
    let out = t2f(&["gradcheck"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{stdout}");
    assert!(!stdout.contains("FAIL"));
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 20);
}

#[test]
fn critique_writes_rows_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.json");
    assert_eq!(code(&t2f(&["critique", "--out", s(&out)])), 0);
    let rows: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(rows.len(), 18);
    assert!((rows[0]["score_mean"].as_f64().unwrap() - 10.0).abs() < 1e-9);
    assert!(dir.path().join("sweep.json.manifest.json").exists());
}

#[test]
fn synth_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let m = manifest(&data.join("manifest.json"));
    assert_eq!(m["seeds"]["synth"], 2);
    assert!(data.join("eval_captions.jsonl").exists());
    let again = dir.path().join("again");
    assert_eq!(code(&t2f(&["synth", "--n", "64", "--classes", "4", "--seed", "2", "--out", s(&again)])), 0);
    let digests = |m: &serde_json::Value| -> Vec<String> {
        m["artifacts"].as_array().unwrap().iter().map(|a| a["sha256"].as_str().unwrap().to_string()).collect()
    };
    assert_eq!(digests(&m), digests(&manifest(&again.join("manifest.json"))));
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let run = t2f(&[
        "train",
        "--dataset",
        s(&dir.path().join("absent")),
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(code(&run), 2);
}

#[test]
fn unknown_config_key_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = small_config(dir.path(), "learning_rate = 1\n");
    let run = t2f(&["train", "--dataset", s(&data), "--config", s(&cfg), "--out", s(&dir.path().join("m.ckpt"))]);
    assert_eq!(code(&run), 1);
    assert!(String::from_utf8_lossy(&run.stderr).contains("learning_rate"));
}

#[test]
fn repeated_training_and_resume_are_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = small_config(dir.path(), "");
    let f64_env = [("T2F_PRECISION", "64")];
    let train = |name: &str, cfg: &Path, resume: Option<&Path>| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--dataset", s(&data), "--config", s(cfg), "--out", s(&out)];
        if let Some(r) = resume {
            args.extend(["--resume", s(r)]);
        }
        let run = t2f_env(&args, &f64_env);
        assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
        out
    };
    let a = train("a.ckpt", &cfg, None);
    let b = train("b.ckpt", &cfg, None);
    let report = |p: &Path| fs::read(format!("{}.reports.jsonl", p.display())).unwrap();
    assert_eq!(report(&a), report(&b));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(manifest(&dir.path().join("a.ckpt.manifest.json"))["precision"], "F64");

    // 12 iterations, then 12 more from the checkpoint, against 24 straight.
    let long_cfg = dir.path().join("long.cfg");
    fs::write(&long_cfg, fs::read_to_string(&cfg).unwrap().replace("max_iters = 12", "max_iters = 24")).unwrap();
    let straight = train("straight.ckpt", &long_cfg, None);
    let resumed_from = dir.path().join("resumed.ckpt");
    fs::copy(&a, &resumed_from).unwrap();
    fs::copy(
        format!("{}.reports.jsonl", a.display()),
        format!("{}.reports.jsonl", resumed_from.display()),
    )
    .unwrap();
    let resumed = train("resumed.ckpt", &long_cfg, Some(&resumed_from));
    assert_eq!(fs::read(&resumed).unwrap(), fs::read(&straight).unwrap());
    assert_eq!(report(&resumed), report(&straight));

    // Changing anything besides the run length is refused.
    let other = dir.path().join("other.cfg");
    fs::write(&other, fs::read_to_string(&long_cfg).unwrap() + "lr_g = 0.001\n").unwrap();
    let mut args = vec!["train", "--dataset", s(&data), "--config", s(&other)];
    let out = dir.path().join("x.ckpt");
    args.extend(["--out", s(&out), "--resume", s(&a)]);
    assert_eq!(code(&t2f_env(&args, &f64_env)), 1);
}

#[test]
fn generate_and_evaluate_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = small_config(dir.path(), "");
    let ckpt = dir.path().join("m.ckpt");
    assert_eq!(
        code(&t2f(&["train", "--dataset", s(&data), "--config", s(&cfg), "--out", s(&ckpt)])),
        0
    );

    let grid = dir.path().join("grid.png");
    let run = t2f(&["generate", "--ckpt", s(&ckpt), "--caption", "He has sideburns.", "--n", "4", "--grid", s(&grid)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert!(fs::metadata(&grid).unwrap().len() > 0);
    assert!(dir.path().join("grid.png.manifest.json").exists());

    let clf = dir.path().join("probe.t2fc");
    assert_eq!(
        code(&t2f(&["classifier", "--dataset", s(&data), "--out", s(&clf), "--epochs", "1"])),
        0
    );
    let report = dir.path().join("is.json");
    let captions = data.join("eval_captions.jsonl");
    let lines = fs::read_to_string(&captions).unwrap().lines().count();
    // A balanced subset: the first caption of each class.
    let mut seen = std::collections::BTreeSet::new();
    let balanced: String = fs::read_to_string(&captions)
        .unwrap()
        .lines()
        .filter(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            seen.insert(v["identity_class"].as_u64().unwrap())
        })
        .map(|l| format!("{l}\n"))
        .collect();
    assert!(lines >= 4);
    let subset = dir.path().join("balanced.jsonl");
    fs::write(&subset, balanced).unwrap();
    let run = t2f(&[
        "evaluate",
        "--ckpt",
        s(&ckpt),
        "--captions",
        s(&subset),
        "--classifier",
        s(&clf),
        "--samples",
        "40",
        "--splits",
        "2",
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["samples"], 40);
    let score = r["score_exp"].as_f64().unwrap();
    assert!((1.0..=4.0).contains(&score));
}
