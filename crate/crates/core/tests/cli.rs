mod common;

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use cirloop::engine::write_triplets;
use cirloop::gallery::{write_gallery, GalleryFormat};
use cirloop::metrics::EvalReport;
use serde_json::{json, Value};

use common::*;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cirloop"));
    c.env("RUST_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a toy gallery, triplets and config into `dir`; returns the config path.
fn toy_fixture(dir: &Path, extra: &str) -> PathBuf {
    write_gallery(&random_gallery(5, 80, 8), &dir.join("gallery.cirv"), GalleryFormat::Binary).unwrap();
    write_triplets(&dir.join("triplets.jsonl"), &random_triplets(2, 12, 80)).unwrap();
    let config = format!(
        r#"
triplets = "triplets.jsonl"
out = "out"
workers = 2
ks = [1, 5, 10]
{extra}
[[galleries]]
path = "gallery.cirv"

[eval]
m = 20

[composer]
kind = "toy"
seed = 3

[simulator]
kind = "oracle"
alpha = 0.5
"#
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    path
}

#[test]
fn eval_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_fixture(dir.path(), "");
    let o = run(&["eval", "--config", p(&config)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    for f in ["traces.jsonl", "report.json", "report.csv", "run.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let report = EvalReport::read_json(&out.join("report.json")).unwrap();
    assert_eq!(report.trace_count, 12);
    assert_eq!(report.ks, vec![1, 5, 10]);
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(meta["meta"]["workers"], 2);

    let flagged = run(&["eval", "--config", p(&config), "--rmax", "3", "--workers", "1", "--out", p(&dir.path().join("o2"))]);
    assert_eq!(code(&flagged), 0);
    let short = EvalReport::read_json(&dir.path().join("o2/report.json")).unwrap();
    assert_eq!(short.rounds, vec![1, 2, 3]);
}

#[test]
fn eval_is_reproducible_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_fixture(dir.path(), "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&run(&["eval", "--config", p(&config), "--workers", "1", "--out", p(&a)])), 0);
    assert_eq!(code(&run(&["eval", "--config", p(&config), "--workers", "4", "--out", p(&b)])), 0);
    for f in ["traces.jsonl", "report.json", "report.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let diff = run(&["report", "diff", p(&a.join("report.json")), p(&b.join("report.json"))]);
    assert_eq!(code(&diff), 0);
}

#[test]
fn eval_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_fixture(dir.path(), "");
    std::fs::remove_file(dir.path().join("gallery.cirv")).unwrap();
    assert_eq!(code(&run(&["eval", "--config", p(&config)])), 1);

    let dir = tempfile::tempdir().unwrap();
    let config = toy_fixture(dir.path(), "");
    let mut triplets = random_triplets(2, 12, 80);
    triplets[4].reference_id = "not-there".into();
    write_triplets(&dir.path().join("triplets.jsonl"), &triplets).unwrap();
    let o = run(&["eval", "--config", p(&config)]);
    assert_eq!(code(&o), 2);
    let report = EvalReport::read_json(&dir.path().join("out/report.json")).unwrap();
    assert_eq!(report.failure_count, 1);
    assert_eq!(report.trace_count, 11);

    assert_eq!(code(&run(&["eval", "--config", p(&dir.path().join("nope.toml"))])), 1);
    assert_eq!(code(&run(&["eval", "--bogus"])), 1);
}

#[test]
fn report_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_fixture(dir.path(), "");
    assert_eq!(code(&run(&["eval", "--config", p(&config)])), 0);
    let report = dir.path().join("out/report.json");

    let show = run(&["report", "show", p(&report)]);
    assert_eq!(code(&show), 0);
    assert!(!show.stdout.is_empty());

    let mut edited: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let v = edited["cells"][0]["value"].as_f64().unwrap();
    edited["cells"][0]["value"] = json!(v + 0.5);
    let edited_path = dir.path().join("edited.json");
    std::fs::write(&edited_path, edited.to_string()).unwrap();
    let d = run(&["report", "diff", p(&report), p(&edited_path), "--tolerance", "0.01"]);
    assert_eq!(code(&d), 3);
    assert!(String::from_utf8_lossy(&d.stdout).contains("1 cells differ"));
    assert_eq!(code(&run(&["report", "diff", p(&report), p(&edited_path), "--tolerance", "1"])), 0);

    edited["schema"] = json!("cirloop.report/999");
    std::fs::write(&edited_path, edited.to_string()).unwrap();
    assert_eq!(code(&run(&["report", "diff", p(&report), p(&edited_path)])), 1);

    let plot = dir.path().join("plot.csv");
    assert_eq!(code(&run(&["report", "plot", p(&report), "--metric", "recall", "--out", p(&plot)])), 0);
    assert!(std::fs::read_to_string(&plot).unwrap().lines().count() > 1);

    let rebuilt = dir.path().join("rebuilt.json");
    let b = run(&[
        "report",
        "build",
        "--traces",
        p(&dir.path().join("out/traces.jsonl")),
        "--ks",
        "1,5,10",
        "--out",
        p(&rebuilt),
    ]);
    assert_eq!(code(&b), 0);
    let original = EvalReport::read_json(&report).unwrap();
    let again = EvalReport::read_json(&rebuilt).unwrap();
    assert_eq!(original.cells, again.cells);
}

#[test]
fn forge_validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (mut manifest, set, generation) = compliant_benchmark(2);
    let mut args: Vec<String> = Vec::new();
    for g in set.iter() {
        let path = dir.path().join(format!("{}.cirv", g.gallery_id()));
        write_gallery(g, &path, GalleryFormat::Binary).unwrap();
        args.push("--gallery".into());
        args.push(format!("{}={}", g.gallery_id(), path.display()));
    }
    let mpath = dir.path().join("bench.jsonl");
    let gpath = dir.path().join("gen.jsonl");
    manifest.write(&mpath).unwrap();
    generation.write(&gpath).unwrap();
    let rpath = dir.path().join("validation.json");
    let mut base: Vec<String> = vec![
        "forge".into(),
        "validate".into(),
        "--manifest".into(),
        mpath.display().to_string(),
        "--generation".into(),
        gpath.display().to_string(),
        "--report".into(),
        rpath.display().to_string(),
    ];
    base.extend(args);
    let o = bin().args(&base).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&rpath).unwrap()).unwrap();
    assert_eq!(report["passed"], true);

    let idx = manifest.triplets.iter().position(|t| t.category.as_deref() == Some("addition")).unwrap();
    manifest.triplets.remove(idx);
    manifest.write(&mpath).unwrap();
    let o = bin().args(&base).output().unwrap();
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("CategoryCount"));
}

#[test]
fn forge_generators_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("sources.jsonl");
    std::fs::write(
        &input,
        "{\"category\":\"addition\",\"reference_caption\":\"a cat on a sofa\",\"source_dataset\":\"coco\"}\n\
         {\"category\":\"background\",\"reference_caption\":\"a bus in the city\"}\n",
    )
    .unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    assert_eq!(code(&run(&["forge", "prompts", "--input", p(&input), "--out", p(&a)])), 0);
    assert_eq!(code(&run(&["forge", "prompts", "--input", p(&input), "--out", p(&b)])), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read_to_string(&a).unwrap().lines().count(), 2);

    let nouns = dir.path().join("nouns.txt");
    std::fs::write(&nouns, "apples\ncups\n").unwrap();
    let card = dir.path().join("card.jsonl");
    assert_eq!(code(&run(&["forge", "cardinality", "--nouns", p(&nouns), "--out", p(&card)])), 0);
    assert_eq!(std::fs::read_to_string(&card).unwrap().lines().count(), 20);

    let caps = dir.path().join("caps.jsonl");
    std::fs::write(
        &caps,
        "{\"triplet_id\":\"t1\",\"category\":\"change\",\"reference_caption\":\"a red car\",\"relative_caption\":\"make it blue\",\"target_caption\":\"a blue car\"}\n",
    )
    .unwrap();
    let m1 = dir.path().join("m1.jsonl");
    let m2 = dir.path().join("m2.jsonl");
    for m in [&m1, &m2] {
        assert_eq!(code(&run(&["forge", "manifest", "--captions", p(&caps), "--seed", "9", "--model-id", "sd", "--out", p(m)])), 0);
    }
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());

    let complex = dir.path().join("complex.jsonl");
    let long = vec!["word"; 30].join(" ");
    std::fs::write(&complex, format!("{{\"caption\":\"{long}\"}}\n{{\"caption\":\"short\"}}\n")).unwrap();
    let kept = dir.path().join("kept.jsonl");
    assert_eq!(code(&run(&["forge", "filter-complex", "--input", p(&complex), "--out", p(&kept)])), 0);
    assert_eq!(std::fs::read_to_string(&kept).unwrap().lines().count(), 1);
}

struct Served {
    child: Child,
    base: String,
}

impl Served {
    fn start(config: &Path, port: &str) -> Self {
        let mut child = bin()
            .args(["serve", "--config", p(config), "--port", port])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let base = line.trim().strip_prefix("listening on ").unwrap().to_string();
        Self { child, base }
    }

    fn terminate(mut self) -> i32 {
        Command::new("kill").args(["-TERM", &self.child.id().to_string()]).status().unwrap();
        self.child.wait().unwrap().code().unwrap_or(-1)
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

#[test]
fn serve_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_fixture(dir.path(), "");
    let server = Served::start(&config, "0");
    let mut r = agent().get(&format!("{}/v1/galleries", server.base)).call().unwrap();
    assert_eq!(r.status().as_u16(), 200);
    let listing: Value = r.body_mut().read_json().unwrap();
    assert_eq!(listing["galleries"][0]["size"], 80);

    let mut created = agent()
        .post(&format!("{}/v1/sessions", server.base))
        .send_json(json!({"triplet_id": "q0003"}))
        .unwrap();
    assert_eq!(created.status().as_u16(), 201);
    let v: Value = created.body_mut().read_json().unwrap();
    let id = v["session_id"].as_str().unwrap().to_string();
    let step = agent()
        .post(&format!("{}/v1/sessions/{id}/auto-step", server.base))
        .send_empty()
        .unwrap();
    assert_eq!(step.status().as_u16(), 200);
    assert_eq!(server.terminate(), 0);

    let server = Served::start(&config, "0");
    let mut r = agent().get(&format!("{}/v1/sessions/{id}", server.base)).call().unwrap();
    assert_eq!(r.status().as_u16(), 200);
    let v: Value = r.body_mut().read_json().unwrap();
    assert_eq!(v["round"], 2);
    assert_eq!(server.terminate(), 0);
}

#[test]
fn serve_fails_on_busy_port() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_fixture(dir.path(), "");
    let holder = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = holder.local_addr().unwrap().port().to_string();
    let o = run(&["serve", "--config", p(&config), "--port", &port]);
    assert_eq!(code(&o), 1);
}
