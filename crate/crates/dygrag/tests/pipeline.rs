use std::path::Path;
use std::process::Command;

use dygrag::pipeline::{matrix_cells, read_manifest};
use dygrag::{run_matrix, Error, Pipeline, PipelineConfig, Stage};

fn fast(out: &Path, extra: &[&str]) -> PipelineConfig {
    let mut sets: Vec<String> = [
        "data.communities=2",
        "backbone.layers=1",
        "backbone.hidden_dim=16",
        "backbone.max_len=0",
        "backbone.epochs=1",
        "retriever.epochs=1",
        "fusion.epochs=1",
        "fusion.max_new=10",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    sets.push(format!("run.out_dir={:?}", out.display().to_string()));
    sets.extend(extra.iter().map(|s| s.to_string()));
    PipelineConfig::load(None, Vec::new(), &sets).unwrap()
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(fast(dir.path(), &[])).unwrap();
    let err = p.run_stage(Stage::Retrieve, 0).unwrap_err();
    assert!(matches!(err, Error::MissingPrerequisite { needs: "preprocess", .. }), "{err}");
    p.run_stage(Stage::Preprocess, 0).unwrap();
    let err = p.run_stage(Stage::Retrieve, 0).unwrap_err();
    assert!(matches!(err, Error::MissingPrerequisite { stage: "retrieve", needs: "train-retriever" }));
    assert!(err.to_string().contains("run `train-retriever` first"));
}

#[test]
fn rerun_is_cached_and_manifest_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(fast(dir.path(), &[])).unwrap();
    let first = p.run_stage(Stage::Preprocess, 0).unwrap();
    assert!(!first.cached);
    let again = p.run_stage(Stage::Preprocess, 0).unwrap();
    assert!(again.cached);
    assert!(again.notice().ends_with("cached"));
    assert_eq!(first.dir, again.dir);
    let m = read_manifest(&first.dir).unwrap();
    for key in ["stage", "config_hash", "seed", "wall_time_ms", "inputs"] {
        assert!(m.contains_key(key), "manifest lacks {key}");
    }
    assert_eq!(m["stage"], "preprocess");
    assert_eq!(m["config_hash"], first.hash);
    assert_eq!(m["seed"], "none");
}

#[test]
fn hashes_track_meaningful_fields_only() {
    let a = Pipeline::new(fast(Path::new("/tmp/a"), &[])).unwrap();
    let moved = Pipeline::new(fast(Path::new("/tmp/b"), &["run.seeds=[0, 5]"])).unwrap();
    let k3 = Pipeline::new(fast(Path::new("/tmp/a"), &["fusion.k=3"])).unwrap();
    let theta = Pipeline::new(fast(Path::new("/tmp/a"), &["retriever.threshold=0.5"])).unwrap();
    for s in Stage::ALL {
        assert_eq!(a.hash(s, 0).unwrap(), moved.hash(s, 0).unwrap(), "{s:?}");
    }
    let same = |p: &Pipeline, s: Stage| a.hash(s, 0).unwrap() == p.hash(s, 0).unwrap();
    assert!(same(&k3, Stage::Pretrain) && same(&k3, Stage::TrainRetriever));
    assert!(!same(&k3, Stage::Retrieve) && !same(&k3, Stage::Finetune) && !same(&k3, Stage::Evaluate));
    assert!(same(&theta, Stage::Pretrain) && !same(&theta, Stage::Annotate) && !same(&theta, Stage::TrainRetriever));
    assert_eq!(a.hash(Stage::Preprocess, 0).unwrap(), a.hash(Stage::Preprocess, 1).unwrap());
    assert_ne!(a.hash(Stage::Pretrain, 0).unwrap(), a.hash(Stage::Pretrain, 1).unwrap());
}

#[test]
fn full_run_reports_and_is_reproducible() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let r1 = Pipeline::new(fast(d1.path(), &[])).unwrap().run_all().unwrap();
    let r2 = Pipeline::new(fast(d2.path(), &[])).unwrap().run_all().unwrap();
    assert_eq!(r1, r2);
    let p = Pipeline::new(fast(d1.path(), &[])).unwrap();
    assert!(r1.contains(&p.hash(Stage::Evaluate, 0).unwrap()));
    assert!(r1.contains("rag.recall@5=") && r1.contains("backbone.recall@5=") && r1.contains("retrieval.hr@1="));
    assert_eq!(std::fs::read_to_string(d1.path().join("report.txt")).unwrap(), r1);
    for s in Stage::ALL {
        assert!(p.is_complete(s, 0).unwrap(), "{s:?}");
    }
    let ckpt = |d: &Path| std::fs::read(Pipeline::new(fast(d, &[])).unwrap().stage_dir(Stage::Finetune, 0).unwrap().join("generator.ckpt")).unwrap();
    assert_eq!(ckpt(d1.path()), ckpt(d2.path()));
}

#[test]
fn lexical_run_skips_retriever_training() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(fast(dir.path(), &["retriever.method=jaccard"])).unwrap();
    assert!(!Stage::plan(&p.config).contains(&Stage::TrainRetriever));
    let report = p.run_all().unwrap();
    assert!(report.contains("retriever=jaccard"));
    assert!(!dir.path().join("train-retriever").exists());
}

#[test]
fn degenerate_matrix_equals_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = fast(dir.path(), &["retriever.method=bm25", "matrix.k=[3]", "matrix.strategies=[\"graph\"]"]);
    let matrix = run_matrix(&base, false).unwrap();
    let single = Pipeline::new(fast(dir.path(), &["retriever.method=bm25", "fusion.k=3"])).unwrap().run_all().unwrap();
    assert_eq!(matrix, single);
}

#[test]
fn k_sweep_has_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let base = fast(dir.path(), &["retriever.method=groundtruth", "matrix.k=[1, 3, 5, 7, 9]"]);
    assert_eq!(matrix_cells(&base).len(), 5);
    let report = run_matrix(&base, false).unwrap();
    let rows = report.lines().filter(|l| l.starts_with("k=")).count();
    assert_eq!(rows, 5, "{report}");
    assert_eq!(report.matches("evaluate.seed0=").count(), 5);
}

#[test]
fn matrix_axes_multiply() {
    let base = fast(
        Path::new("/tmp/unused"),
        &[
            "matrix.ablations=[\"full\", \"no-ccl\", \"no-decay\"]",
            "matrix.strategies=[\"graph\", \"concat\", \"mlp\"]",
            "matrix.retrievers=[\"trained\", \"bm25\", \"jaccard\", \"groundtruth\"]",
        ],
    );
    let cells = matrix_cells(&base);
    assert_eq!(cells.len(), 36);
    assert!(cells.iter().any(|c| !c.retriever.use_ccl && c.fusion.strategy == "mlp" && c.retriever.method == "bm25"));
}

#[test]
fn cli_reports_errors_and_prints_config() {
    let bin = env!("CARGO_BIN_EXE_dygrag");
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin).args(["show-config", "--set", "fusion.k=4"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(PipelineConfig::from_toml(&text).unwrap().fusion.k, 4);

    let out = Command::new(bin)
        .args(["finetune", "--set", &format!("run.out_dir={:?}", dir.path().display().to_string())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `preprocess` first"));

    let out = Command::new(bin).args(["bogus"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown command"));

    let out = Command::new(bin).args(["show-config"]).env("DYGRAG__EVAL__K", "3").output().unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains("k = 3"));
}

#[test]
fn edge_list_input_and_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("edges.txt");
    let mut text = String::from("# u v t\n");
    for i in 0..60 {
        text.push_str(&format!("user{} item{} {}\n", i % 7, (i * 3) % 5, i * 10));
    }
    std::fs::write(&data, &text).unwrap();
    let path_set = format!("data.path={:?}", data.display().to_string());
    let p = Pipeline::new(fast(&dir.path().join("out"), &[&path_set, "data.steps=5"])).unwrap();
    let o = p.run_stage(Stage::Preprocess, 0).unwrap();
    let m = read_manifest(&o.dir).unwrap();
    assert_eq!(m["steps"], "5");
    assert_eq!(m["nodes"], "12");
    assert!(std::fs::read_to_string(o.dir.join("node_map.txt")).unwrap().starts_with("user0 0\n"));

    let before = p.hash(Stage::Preprocess, 0).unwrap();
    std::fs::write(&data, format!("{text}user1 item9 1000\n")).unwrap();
    assert_ne!(p.hash(Stage::Preprocess, 0).unwrap(), before);

    std::fs::write(&data, "a b 1\nc d later\n").unwrap();
    let err = p.run_stage(Stage::Preprocess, 0).unwrap_err().to_string();
    assert!(err.contains("edges.txt:2"), "{err}");
}
