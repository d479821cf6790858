use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "sites.0.n_patients=60",
    "--set",
    "sites.1.n_patients=60",
    "--set",
    "ood.n_patients=60",
    "--set",
    "train.epochs=1",
    "--set",
    "train.warmup_epochs=0",
    "--set",
    "rare_threshold=5",
    "--set",
    "ig_steps=8",
];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_modaltune"));
    c.env_remove("MODALTUNE_SEED");
    c
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn ok(args: &[&str], out: &Path) -> String {
    let o = run(args, out);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn exit_code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn error_line(o: &Output) -> String {
    let err = String::from_utf8_lossy(&o.stderr);
    err.lines().last().unwrap_or_default().to_string()
}

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gen-data"];
    args.extend_from_slice(SMALL);
    ok(&args, dir.path());
    ok(&["train"], dir.path());
    ok(&["extract"], dir.path());
    dir
}

fn walk(dir: &Path, root: &Path, out: &mut BTreeSet<String>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            walk(&p, root, out);
        } else {
            out.insert(p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
        }
    }
}

#[test]
fn smoke_path_lists_every_output() {
    let dir = prepared();
    let r = dir.path();
    let f = r.join("features/BRCA.csv");
    let l = r.join("features/BRCA_labels.csv");
    let stdout = ok(&["probe", "--features", f.to_str().unwrap(), "--labels", l.to_str().unwrap()], r);
    assert!(stdout.starts_with("balanced_accuracy="), "{stdout}");

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(r.join("manifest.json")).unwrap()).unwrap();
    let mut listed = BTreeSet::new();
    for stage in manifest["stages"].as_object().unwrap().values() {
        for o in stage["outputs"].as_array().unwrap() {
            listed.insert(o.as_str().unwrap().to_string());
        }
    }
    let mut present = BTreeSet::new();
    walk(r, r, &mut present);
    present.remove("manifest.json");
    let missing: Vec<_> = present.difference(&listed).collect();
    assert!(missing.is_empty(), "unlisted outputs: {missing:?}");
    for stage in ["gen-data", "train", "extract", "probe:BRCA"] {
        assert!(manifest["stages"].get(stage).is_some(), "{stage}");
    }
    let cfg_text = std::fs::read_to_string(r.join("config.json")).unwrap();
    assert!(cfg_text.contains("\"n_patients\": 60"));
}

#[test]
fn report_is_idempotent_and_has_csv_twins() {
    let dir = prepared();
    let r = dir.path();
    let f = r.join("features/NSCLC.csv");
    let s = r.join("features/NSCLC_survival.csv");
    ok(&["eval-surv", "--features", f.to_str().unwrap(), "--survival", s.to_str().unwrap()], r);
    ok(&["attribute", "--site", "NSCLC", "--patient", "NSCLC-0001"], r);
    ok(&["report"], r);
    let first: Vec<Vec<u8>> = ["report/summary.csv", "report/summary.svg"]
        .iter()
        .map(|p| std::fs::read(r.join(p)).unwrap())
        .collect();
    ok(&["report"], r);
    let second: Vec<Vec<u8>> = ["report/summary.csv", "report/summary.svg"]
        .iter()
        .map(|p| std::fs::read(r.join(p)).unwrap())
        .collect();
    assert_eq!(first, second);

    let mut files = BTreeSet::new();
    walk(r, r, &mut files);
    for svg in files.iter().filter(|f| f.ends_with(".svg")) {
        let twin = svg.trim_end_matches(".svg").to_string() + ".csv";
        assert!(files.contains(&twin), "{svg} has no csv twin");
    }
}

#[test]
fn single_class_labels_exit_degenerate() {
    let dir = prepared();
    let r = dir.path();
    let labels = r.join("one_class.csv");
    let ids = std::fs::read_to_string(r.join("features/BRCA_labels.csv")).unwrap();
    let body: String = std::iter::once("patient_id,split,label".to_string())
        .chain(ids.lines().skip(1).map(|l| {
            let mut p = l.split(',');
            format!("{},{},0", p.next().unwrap(), p.next().unwrap())
        }))
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(&labels, body + "\n").unwrap();
    let f = r.join("features/BRCA.csv");
    let o = run(&["probe", "--features", f.to_str().unwrap(), "--labels", labels.to_str().unwrap()], r);
    assert_eq!(exit_code(&o), 6, "{}", error_line(&o));
    assert!(error_line(&o).starts_with("error code=6 kind=degenerate"));
}

#[test]
fn distinct_codes_for_missing_schema_and_digest() {
    let dir = prepared();
    let r = dir.path();
    let f = r.join("features/BRCA.csv");

    let o = run(&["probe", "--features", "/nonexistent/x.csv", "--labels", "/nonexistent/y.csv"], r);
    assert_eq!(exit_code(&o), 3, "{}", error_line(&o));

    let bad = r.join("bad_labels.csv");
    std::fs::write(&bad, "who,what\na,b\n").unwrap();
    let o = run(&["probe", "--features", f.to_str().unwrap(), "--labels", bad.to_str().unwrap()], r);
    assert_eq!(exit_code(&o), 4, "{}", error_line(&o));

    let o = run(&["extract", "--set", "train.epochs=2"], r);
    assert_eq!(exit_code(&o), 5, "{}", error_line(&o));
    assert!(error_line(&o).contains("kind=digest_mismatch"));

    let o = run(&["train", "--set", "train.no_such_key=1"], r);
    assert_eq!(exit_code(&o), 4, "{}", error_line(&o));
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gen-data"];
    args.extend_from_slice(SMALL);
    let o = bin()
        .args(&args)
        .arg("--out")
        .arg(dir.path())
        .env("MODALTUNE_SEED", "99")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 99);
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 99);
    assert_eq!(cfg["train"]["seed"], 99);
}

#[test]
fn explicit_config_file_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path: PathBuf = dir.path().join("my.json");
    let o = bin().args(["gen-data", "--out"]).arg(dir.path().join("a")).args(SMALL).output().unwrap();
    assert!(o.status.success());
    let text = std::fs::read_to_string(dir.path().join("a/config.json")).unwrap();
    std::fs::write(&cfg_path, text.replace("\"n_patients\": 60", "\"n_patients\": 50")).unwrap();
    let o = bin()
        .args(["gen-data", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("b"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = std::fs::read_to_string(dir.path().join("b/data/BRCA/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 51);
}
