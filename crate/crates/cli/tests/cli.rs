use std::path::Path;
use std::process::{Command, Output};

use funcspace::persist::{load_dataset, RunManifest};

fn funcspace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_funcspace"))
        .args(args)
        .env_remove("FUNCSPACE_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = funcspace(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    funcspace(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn digests(manifest: &Path) -> Vec<(String, String)> {
    RunManifest::load(manifest)
        .unwrap()
        .outputs
        .into_iter()
        .map(|d| (Path::new(&d.path).file_name().unwrap().to_string_lossy().into_owned(), d.sha256))
        .collect()
}

fn small_corpus(dir: &Path, seed: &str) {
    ok(&[
        "gen-mlps", "--activation", "linear", "--count", "6", "--out", s(dir), "--seed", seed, "--desk", "--l-max", "2",
    ]);
}

#[test]
fn gen_mlps_writes_one_file_per_network_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-mlps", "--activation", "sigmoid", "--count", "3", "--out", s(d), "--seed", "9"]);
    }
    let specs = std::fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("mlp_"))
        .count();
    assert_eq!(specs, 3);
    let da = digests(&a.join("run_manifest.json"));
    assert_eq!(da.len(), 5);
    assert_eq!(da, digests(&b.join("run_manifest.json")));
    ok(&["audit", "--data", s(&a)]);
}

#[test]
fn usage_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(code(&["gen-mlps", "--activation", "tanh", "--count", "1", "--out", s(&out)]), 2);
    assert_eq!(code(&["gen-mlps", "--count", "1", "--out", s(&out)]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[gen]\nactivation = \"linear\"\nbogus = 1\n").unwrap();
    assert_eq!(code(&["gen-mlps", "--config", s(&cfg), "--count", "1", "--out", s(&out)]), 2);
    let bad = Command::new(env!("CARGO_BIN_EXE_funcspace"))
        .args(["gen-mlps", "--activation", "linear", "--count", "1", "--out", s(&out)])
        .env("FUNCSPACE_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn config_file_supplies_defaults_that_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[gen]\nactivation = \"leaky-relu\"\nl_max = 2\nseed = 4\n").unwrap();
    let out = tmp.path().join("g");
    ok(&["gen-mlps", "--config", s(&cfg), "--count", "2", "--out", s(&out), "--seed", "5"]);
    let index: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("corpus.json")).unwrap()).unwrap();
    assert_eq!(index["generator"]["activation"], "leaky-relu");
    assert_eq!(index["generator"]["l_max"], 2);
    assert_eq!(index["generator"]["seed"], 5);
}

#[test]
fn missing_inputs_exit_with_4() {
    let tmp = tempfile::tempdir().unwrap();
    let nowhere = tmp.path().join("nowhere");
    assert_eq!(code(&["audit", "--data", s(&nowhere)]), 4);
    assert_eq!(
        code(&["eval-ae", "--ckpt", s(&nowhere), "--out", s(&tmp.path().join("m.csv"))]),
        4
    );
}

#[test]
fn train_eval_and_search_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    small_corpus(&corpus, "1");
    let ckpt = tmp.path().join("ckpt");
    let train = |extra: &[&str]| {
        let mut args = vec![
            "train-ae", "--data", s(&corpus), "--out", s(&ckpt), "--d-z", "4", "--batch", "3", "--seed", "2",
        ];
        args.extend_from_slice(extra);
        funcspace(&args)
    };
    assert_eq!(train(&["--epochs", "0"]).status.code(), Some(2));
    assert_eq!(train(&["--loss", "p:0"]).status.code(), Some(2));
    assert!(train(&["--epochs", "2", "--loss", "p:-2"]).status.success());
    let losses = std::fs::read_to_string(ckpt.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 3);
    assert!(losses.starts_with("epoch,mean_loss\n1,"));
    let first = digests(&ckpt.join("run_manifest.json"));
    assert!(train(&["--epochs", "2", "--loss", "p:-2"]).status.success());
    assert_eq!(first, digests(&ckpt.join("run_manifest.json")));

    let mpe = tmp.path().join("mpe.csv");
    let out = ok(&["eval-ae", "--ckpt", s(&ckpt), "--count", "20", "--out", s(&mpe), "--seed", "3"]);
    let text = std::fs::read_to_string(&mpe).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, {
        let mut l = vec!["decoder,E1,E2"];
        l.extend(lines[1..].iter().copied());
        l
    });
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("D1,") && lines[2].starts_with("D2,"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("best-decoder median MPE"));
    let again = tmp.path().join("mpe2.csv");
    ok(&["eval-ae", "--ckpt", s(&ckpt), "--count", "20", "--out", s(&again), "--seed", "3"]);
    assert_eq!(std::fs::read(&mpe).unwrap(), std::fs::read(&again).unwrap());
    ok(&["eval-ae", "--ckpt", s(&ckpt), "--count", "20", "--out", s(&again), "--seed", "3", "--untrained"]);

    let data = tmp.path().join("data");
    ok(&["make-dataset", "--rows", "100", "--out", s(&data), "--seed", "4"]);
    let ds = load_dataset::<f64>(&data.join("data.fds")).unwrap();
    let sp = ds.splits.unwrap();
    assert_eq!((sp.train, sp.val, sp.test), (50, 30, 20));

    assert_eq!(
        code(&["make-dataset", "--rows", "10", "--out", s(&data), "--removal", "0.9"]),
        2
    );
    assert_eq!(code(&["make-dataset", "--rows", "10", "--out", s(&data), "--split", "5:3"]), 2);
    let fds = data.join("data.fds");
    let res = tmp.path().join("res");
    ok(&[
        "search", "--ckpt", s(&ckpt), "--data", s(&fds), "--alpha", "0", "--iters", "4", "--minibatch", "16", "--out", s(&res),
    ]);
    let summary = std::fs::read_to_string(res.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows[0], "decoder,result");
    assert!(rows[1].starts_with("D1,") && rows[2].starts_with("D2,"));
    assert!(rows[1].ends_with(')'));
    assert!(res.join("D1.json").exists() && res.join("D2.json").exists());
    let res2 = tmp.path().join("res2");
    ok(&[
        "search", "--ckpt", s(&ckpt), "--data", s(&fds), "--alpha", "0", "--iters", "4", "--minibatch", "16", "--out", s(&res2),
    ]);
    let strip = |v: Vec<(String, String)>| v.into_iter().filter(|(n, _)| n != "run_manifest.json").collect::<Vec<_>>();
    assert_eq!(strip(digests(&res.join("run_manifest.json"))), strip(digests(&res2.join("run_manifest.json"))));

    let scan = tmp.path().join("scan");
    ok(&[
        "scan-alpha", "--ckpt", s(&ckpt), "--data", s(&fds), "--alphas", "0,0.1,1", "--decoder", "1", "--iters", "3", "--out",
        s(&scan),
    ]);
    let curve = std::fs::read_to_string(scan.join("tradeoff_D1.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
    assert!(curve.starts_with("alpha,nonzero,mpe\n"));
    assert_eq!(
        code(&["scan-alpha", "--ckpt", s(&ckpt), "--data", s(&fds), "--alphas", "0.1,0", "--out", s(&scan)]),
        2
    );
    let unsplit = tmp.path().join("grid.fds");
    std::fs::copy(corpus.join("grid.fds"), &unsplit).unwrap();
    assert_eq!(
        code(&["search", "--ckpt", s(&ckpt), "--data", s(&unsplit), "--iters", "1", "--out", s(&res)]),
        2
    );
}

#[test]
fn export_surface_rows_and_bad_dims() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    small_corpus(&corpus, "6");
    let a = corpus.join("mlp_000000.json");
    let b = corpus.join("mlp_000001.json");
    let out = tmp.path().join("surf.csv");
    ok(&[
        "export-surface", "--mlp", s(&a), "--mlp", s(&b), "--fix", "dim=3,value=0.5", "--grid", "5", "--out", s(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 26);
    assert!(text.starts_with("x1,x2,ya,yb\n-1,-1,"));
    assert!(tmp.path().join("surf.csv.manifest.json").exists());
    for fix in ["dim=4,value=0.5", "dim=0,value=0.5", "value=0.5", "dim=2,value=x"] {
        assert_eq!(
            code(&["export-surface", "--mlp", s(&a), "--mlp", s(&b), "--fix", fix, "--out", s(&out)]),
            2,
            "{fix}"
        );
    }
    assert_eq!(code(&["export-surface", "--mlp", s(&a), "--out", s(&out)]), 2);
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    small_corpus(&corpus, "8");
    let mut seen = Vec::new();
    for threads in ["1", "3"] {
        let ckpt = tmp.path().join(format!("ckpt{threads}"));
        ok(&[
            "--threads", threads, "train-ae", "--data", s(&corpus), "--out", s(&ckpt), "--d-z", "4", "--batch", "4", "--chunk", "2",
        ]);
        seen.push(std::fs::read(ckpt.join("tensors.bin")).unwrap());
    }
    assert_eq!(seen[0], seen[1]);
}
