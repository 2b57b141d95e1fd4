use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use funcspace::diffcore::Tensor;
use funcspace::embsearch::{
    constant_baseline_mpe, search_optimal, tradeoff_scan, Optimizer, SearchConfig, SearchResult, SoftCountForm,
};
use funcspace::funcae::{self, best_decoder_mpe, eval_mpe_grid, train_autoencoder, AeConfig, AutoencoderParams, LossKind, TrainConfig};
use funcspace::genlab::{corpus_vec, gen_corpus, grid_inputs, make_search_dataset, random_mlp_matching, FunctionalDataset, GenConfig, Splits};
use funcspace::netrep::MlpSpec;
use funcspace::persist::{
    load_checkpoint, load_dataset, load_spec, save_checkpoint, save_dataset, save_spec, save_table, write_atomic, RunManifest,
    Table, CHECKPOINT_MANIFEST, CHECKPOINT_TENSORS, RUN_MANIFEST,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{self, pick};
use crate::error::{usage, CliError};
use crate::{AuditArgs, DatasetArgs, EvalArgs, GenArgs, OptimizerArg, ScanArgs, SearchArgs, SearchOpts, SoftCountArg, SurfaceArgs, TrainArgs};

/// Grid values per input axis, on `[-1, 1]`.
const GRID_PER_DIM: usize = 10;
/// Evaluation networks are drawn from `seed + EVAL_SEED_OFFSET`, so they never
/// coincide with a corpus generated from a seed below it.
const EVAL_SEED_OFFSET: u64 = 1 << 32;
const CORPUS_INDEX: &str = "corpus.json";
const CORPUS_FORMAT: &str = "funcspace-corpus";
const GENERATOR_FILE: &str = "generator.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusIndex {
    format: String,
    version: u32,
    generator: GenConfig,
    count: usize,
    grid_per_dim: usize,
}

fn spec_name(j: usize) -> String {
    format!("mlp_{j:06}.json")
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn finish(mut manifest: RunManifest, path: &Path, start: Instant) -> Result<(), CliError> {
    manifest.timings.insert("total_seconds".into(), start.elapsed().as_secs_f64());
    Ok(manifest.save(path)?)
}

fn grid_for(g: &GenConfig, per_dim: usize) -> Tensor<f64> {
    grid_inputs(g.input_dim, per_dim, -1.0, 1.0)
}

fn load_corpus(dir: &Path) -> Result<(CorpusIndex, Vec<MlpSpec<f64>>), CliError> {
    let index: CorpusIndex = read_json(&dir.join(CORPUS_INDEX))?;
    if index.format != CORPUS_FORMAT || index.version != 1 {
        return Err(CliError::Io(format!(
            "{}: not a version-1 corpus index",
            dir.join(CORPUS_INDEX).display()
        )));
    }
    let specs = (0..index.count)
        .into_par_iter()
        .map(|j| Ok(load_spec(&dir.join(spec_name(j)))?))
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok((index, specs))
}

pub fn gen_mlps(a: GenArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let file = config::load(a.config.as_deref())?;
    let act = pick(a.activation, file.gen.activation).ok_or_else(|| usage("--activation is required"))?;
    let mut g = if a.desk {
        GenConfig::desk(act, 4, 0)
    } else {
        GenConfig::new(act, 0)
    };
    file.gen.apply(&mut g);
    g.seed = pick(a.seed, file.gen.seed).unwrap_or(0);
    if let Some(v) = a.n_max {
        g.n_max = v;
    }
    if let Some(v) = a.l_max {
        g.l_max = v;
    }
    if let Some(v) = a.hidden_min {
        g.hidden_min = v;
    }
    if let Some(v) = a.hidden_max {
        g.hidden_max = v;
    }
    g.validate()?;
    create_dir(&a.out)?;
    let grid = grid_for(&g, GRID_PER_DIM);
    let mut paths = Vec::with_capacity(a.count);
    let out = a.out.clone();
    gen_corpus(&g, a.count, &grid, |j, spec, _| {
        let p = out.join(spec_name(j));
        save_spec(&p, &spec).map_err(std::io::Error::other)?;
        paths.push(p);
        Ok(())
    })?;
    let n = grid.shape()[0];
    let grid_data = FunctionalDataset::new(grid, Tensor::zeros(&[n, 0]), None).expect("grid shapes agree");
    let grid_path = a.out.join("grid.fds");
    save_dataset(&grid_path, &grid_data)?;
    let index_path = a.out.join(CORPUS_INDEX);
    write_json(
        &index_path,
        &CorpusIndex {
            format: CORPUS_FORMAT.into(),
            version: 1,
            generator: g.clone(),
            count: a.count,
            grid_per_dim: GRID_PER_DIM,
        },
    )?;
    let mut m = RunManifest::new("gen-mlps", json!({ "generator": g, "count": a.count }));
    m.seeds.insert("seed".into(), g.seed);
    m.output(&index_path)?;
    m.output(&grid_path)?;
    for p in &paths {
        m.output(p)?;
    }
    finish(m, &a.out.join(RUN_MANIFEST), start)?;
    println!("wrote {} networks to {}", a.count, a.out.display());
    Ok(())
}

pub fn train_ae(a: TrainArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let file = config::load(a.config.as_deref())?;
    let tr = &file.train;
    let loss: LossKind = pick(a.loss, tr.loss.clone())
        .unwrap_or_else(|| "min".into())
        .parse()
        .map_err(usage)?;
    let seed = pick(a.seed, tr.seed).unwrap_or(0);
    let mut tc = TrainConfig::new(loss, seed);
    tc.epochs = pick(a.epochs, tr.epochs).unwrap_or(tc.epochs);
    tc.batch = pick(a.batch, tr.batch).unwrap_or(tc.batch);
    tc.lr = pick(a.lr, tr.lr).unwrap_or(tc.lr);
    tc.chunk = pick(a.chunk, tr.chunk).unwrap_or(tc.chunk);
    tc.gates = pick(a.gates.map(Into::into), tr.gates).unwrap_or(tc.gates);
    tc.validate()?;

    let (index, specs) = load_corpus(&a.data)?;
    if specs.is_empty() {
        return Err(usage("corpus is empty"));
    }
    let g = &index.generator;
    let mut ac = AeConfig::new(g.activation, g.n_max, g.l_max, pick(a.d_z, tr.d_z).unwrap_or(32));
    ac.input_dim = g.input_dim;
    ac.output_dim = g.output_dim;
    if let Some(v) = tr.out_init_scale {
        ac.out_init_scale = v;
    }
    let params = AutoencoderParams::<f64>::init(ac.clone(), seed)?;
    let grid = grid_for(g, index.grid_per_dim);
    let corpus = specs
        .into_par_iter()
        .map(|s| {
            let y = s.forward_batch(&grid).map_err(|e| usage(e.to_string()))?;
            Ok((s, y))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    create_dir(&a.out)?;
    let gen_path = a.out.join(GENERATOR_FILE);
    write_json(&gen_path, g)?;
    let loss_path = a.out.join("losses.csv");
    let mut rows = Vec::new();
    let out = a.out.clone();
    let (_, logs) = train_autoencoder(&tc, &corpus, &grid, params, |log, p| {
        save_checkpoint(&out, p).map_err(std::io::Error::other)?;
        rows.push(vec![(log.epoch + 1).to_string(), log.mean_loss.to_string()]);
        let table = Table {
            header: vec!["epoch".into(), "mean_loss".into()],
            rows: rows.clone(),
        };
        save_table(&loss_path, &table).map_err(std::io::Error::other)?;
        eprintln!("epoch {} mean loss {:.6}", log.epoch + 1, log.mean_loss);
        Ok(())
    })?;

    let mut m = RunManifest::new(
        "train-ae",
        json!({
            "model": ac,
            "train": {
                "loss": loss.to_string(),
                "epochs": tc.epochs,
                "batch": tc.batch,
                "lr": tc.lr,
                "chunk": tc.chunk,
                "gates": tc.gates,
            },
            "corpus": { "count": index.count, "generator": g },
        }),
    );
    m.seeds.insert("seed".into(), seed);
    m.input(&a.data.join(CORPUS_INDEX))?;
    for name in [CHECKPOINT_MANIFEST, CHECKPOINT_TENSORS, "losses.csv", GENERATOR_FILE] {
        m.output(&a.out.join(name))?;
    }
    finish(m, &a.out.join(RUN_MANIFEST), start)?;
    println!(
        "trained {} epochs; final mean loss {:.6}",
        logs.len(),
        logs.last().map_or(f64::NAN, |l| l.mean_loss)
    );
    Ok(())
}

fn checkpoint_generator(ckpt: &Path, cfg: &AeConfig) -> Result<GenConfig, CliError> {
    let path = ckpt.join(GENERATOR_FILE);
    if path.exists() {
        return read_json(&path);
    }
    let mut g = GenConfig::new(cfg.activation, 0);
    g.input_dim = cfg.input_dim;
    g.output_dim = cfg.output_dim;
    g.n_max = cfg.n_max;
    g.l_max = cfg.l_max;
    g.hidden_max = g.hidden_max.min(cfg.n_max);
    g.hidden_min = g.hidden_min.min(g.hidden_max);
    Ok(g)
}

pub fn eval_ae(a: EvalArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let file = config::load(a.config.as_deref())?;
    let trained: AutoencoderParams<f64> = load_checkpoint(&a.ckpt)?;
    let cfg = trained.config.clone();
    let params = if a.untrained {
        AutoencoderParams::init(cfg.clone(), a.seed)?
    } else {
        trained
    };
    let mut g = checkpoint_generator(&a.ckpt, &cfg)?;
    file.gen.apply(&mut g);
    g.seed = a.seed.wrapping_add(EVAL_SEED_OFFSET);
    if (g.activation, g.n_max, g.l_max, g.input_dim, g.output_dim)
        != (cfg.activation, cfg.n_max, cfg.l_max, cfg.input_dim, cfg.output_dim)
    {
        return Err(usage(format!(
            "generator ({} n_max {} l_max {}) does not match the checkpoint ({} n_max {} l_max {})",
            g.activation, g.n_max, g.l_max, cfg.activation, cfg.n_max, cfg.l_max
        )));
    }
    g.validate()?;
    let grid = grid_for(&g, GRID_PER_DIM);
    let nets = corpus_vec(&g, a.count, &grid)?;
    let mut by_depth: Vec<Vec<_>> = vec![Vec::new(); cfg.l_max];
    for (s, y) in &nets {
        by_depth[s.depth() - 1].push((s.clone(), y.clone()));
    }
    if let Some(j) = by_depth.iter().position(|c| c.is_empty()) {
        return Err(usage(format!("no depth-{} networks among {}; raise --count", j + 1, a.count)));
    }
    let table = eval_mpe_grid(&params, &by_depth, &grid)?;
    let best = best_decoder_mpe(&params, &nets, &grid)?;
    write_atomic(&a.out, table.to_csv().as_bytes())?;
    let mut m = RunManifest::new(
        "eval-ae",
        json!({ "count": a.count, "untrained": a.untrained, "generator": g, "best_decoder_mpe": best }),
    );
    m.seeds.insert("seed".into(), a.seed);
    m.input(&a.ckpt.join(CHECKPOINT_MANIFEST))?;
    m.input(&a.ckpt.join(CHECKPOINT_TENSORS))?;
    m.output(&a.out)?;
    finish(m, &sidecar(&a.out), start)?;
    print!("{}", table.to_csv());
    println!("best-decoder median MPE {best:.6}");
    Ok(())
}

fn search_config(opts: &SearchOpts, file: &config::FileConfig) -> SearchConfig {
    let mut c = SearchConfig::default();
    file.search.apply(&mut c);
    if let Some(v) = opts.iters {
        c.iterations = v;
    }
    if let Some(v) = opts.lr_z {
        c.lr_z = v;
    }
    if let Some(v) = opts.lr_t {
        c.lr_t = v;
    }
    if let Some(v) = opts.minibatch {
        c.minibatch = (v > 0).then_some(v);
    }
    if let Some(v) = opts.restarts {
        c.restarts = v;
    }
    if let Some(v) = opts.seed {
        c.seed = v;
    }
    if let Some(v) = opts.soft_count {
        c.soft_count = match v {
            SoftCountArg::PerElement => SoftCountForm::PerElement,
            SoftCountArg::Literal => SoftCountForm::Literal,
        };
    }
    if let Some(v) = opts.gates {
        c.gates = v.into();
    }
    if let Some(v) = opts.optimizer {
        c.optimizer = match v {
            OptimizerArg::Gd => Optimizer::Gd,
            OptimizerArg::Adam => Optimizer::Adam,
        };
    }
    c
}

fn search_inputs(opts: &SearchOpts) -> Result<(AutoencoderParams<f64>, FunctionalDataset<f64>), CliError> {
    Ok((load_checkpoint(&opts.ckpt)?, load_dataset(&opts.data)?))
}

fn record_search_inputs(m: &mut RunManifest, opts: &SearchOpts) -> Result<(), CliError> {
    m.input(&opts.ckpt.join(CHECKPOINT_MANIFEST))?;
    m.input(&opts.ckpt.join(CHECKPOINT_TENSORS))?;
    m.input(&opts.data)?;
    Ok(())
}

fn result_json(r: &SearchResult<f64>, baseline: f64) -> serde_json::Value {
    let decoders: Vec<_> = r
        .decoders
        .iter()
        .map(|d| {
            json!({
                "decoder": d.decoder,
                "restart": d.restart,
                "test_mpe": d.test_mpe,
                "val_mpe": d.val_mpe,
                "non_zero_count": d.non_zero_count,
                "threshold": d.t,
                "diverged": d.diverged,
                "z": d.z,
                "z0": d.z0,
                "train_loss": d.train_loss,
            })
        })
        .collect();
    json!({
        "best_decoder": r.best().decoder,
        "constant_baseline_mpe": baseline,
        "decoders": decoders,
    })
}

pub fn search(a: SearchArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let file = config::load(a.opts.config.as_deref())?;
    let mut cfg = search_config(&a.opts, &file);
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.decoders {
        cfg.decoders = v;
    }
    let (params, data) = search_inputs(&a.opts)?;
    let r = search_optimal(&params, &data, &cfg)?;
    let baseline = constant_baseline_mpe(&data)?;
    let out = &a.opts.out;
    create_dir(out)?;
    let mut m = RunManifest::new("search", json!({ "search": cfg }));
    m.seeds.insert("seed".into(), cfg.seed);
    record_search_inputs(&mut m, &a.opts)?;
    for d in &r.decoders {
        let p = out.join(format!("D{}.json", d.decoder));
        save_spec(&p, &d.spec)?;
        m.output(&p)?;
    }
    let summary = out.join("summary.csv");
    write_atomic(&summary, r.summary_csv().as_bytes())?;
    let details = out.join("search.json");
    write_json(&details, &result_json(&r, baseline))?;
    m.output(&summary)?;
    m.output(&details)?;
    finish(m, &out.join(RUN_MANIFEST), start)?;
    print!("{}", r.summary_csv());
    println!("constant-predictor baseline MPE {baseline:.4}");
    Ok(())
}

pub fn scan_alpha(a: ScanArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let file = config::load(a.opts.config.as_deref())?;
    let cfg = search_config(&a.opts, &file);
    let (params, data) = search_inputs(&a.opts)?;
    let decoders: Vec<usize> = match a.decoder {
        Some(i) => vec![i],
        None => (1..=params.config.l_max).collect(),
    };
    let name = a
        .opts
        .data
        .file_stem()
        .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
    let out = &a.opts.out;
    create_dir(out)?;
    let mut m = RunManifest::new("scan-alpha", json!({ "search": cfg, "alphas": a.alphas, "decoders": decoders }));
    m.seeds.insert("seed".into(), cfg.seed);
    record_search_inputs(&mut m, &a.opts)?;
    for i in decoders {
        let curve = tradeoff_scan(&params, &data, &name, i, &a.alphas, &cfg)?;
        let p = out.join(format!("tradeoff_D{i}.csv"));
        write_atomic(&p, curve.to_csv().as_bytes())?;
        m.output(&p)?;
        println!("D{i}");
        print!("{}", curve.to_csv());
    }
    finish(m, &out.join(RUN_MANIFEST), start)
}

fn parse_fix(s: &str) -> Result<(usize, f64), CliError> {
    let mut dim = None;
    let mut value = None;
    for part in s.split(',') {
        match part.split_once('=') {
            Some(("dim", v)) => dim = v.trim().parse::<usize>().ok(),
            Some(("value", v)) => value = v.trim().parse::<f64>().ok(),
            _ => return Err(usage(format!("--fix expects dim=<n>,value=<x>, got `{s}`"))),
        }
    }
    match (dim, value) {
        (Some(d), Some(v)) if (1..=3).contains(&d) && v.is_finite() => Ok((d, v)),
        (Some(d), Some(_)) if !(1..=3).contains(&d) => Err(usage(format!("--fix dim must be 1, 2 or 3, got {d}"))),
        _ => Err(usage(format!("--fix expects dim=<n>,value=<x>, got `{s}`"))),
    }
}

pub fn export_surface(a: SurfaceArgs) -> Result<(), CliError> {
    let start = Instant::now();
    if a.mlps.len() != 2 {
        return Err(usage(format!("export-surface needs exactly two --mlp files, got {}", a.mlps.len())));
    }
    let (dim, value) = parse_fix(&a.fix)?;
    let sa: MlpSpec<f64> = load_spec(&a.mlps[0])?;
    let sb: MlpSpec<f64> = load_spec(&a.mlps[1])?;
    let rows = funcae::export_surface(&sa, &sb, dim - 1, value, a.grid)?;
    let table = Table {
        header: ["x1", "x2", "ya", "yb"].map(String::from).to_vec(),
        rows: rows
            .iter()
            .map(|r| [r.x1, r.x2, r.ya, r.yb].iter().map(|v| v.to_string()).collect())
            .collect(),
    };
    save_table(&a.out, &table)?;
    let mut m = RunManifest::new("export-surface", json!({ "fix_dim": dim, "fix_value": value, "grid": a.grid }));
    for p in &a.mlps {
        m.input(p)?;
    }
    m.output(&a.out)?;
    finish(m, &sidecar(&a.out), start)?;
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

pub fn audit(a: AuditArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let (index, specs) = load_corpus(&a.data)?;
    let g = &index.generator;
    let mut depths = vec![0usize; g.l_max];
    let mut failures = Vec::new();
    for (j, s) in specs.iter().enumerate() {
        let mut why = Vec::new();
        if !s.inputs_reach_output() {
            why.push("an input does not reach the output".to_string());
        }
        if !s.has_hard_masks() {
            why.push("masks are not all 0/1".to_string());
        }
        if s.weights().iter().flat_map(|w| w.data()).any(|w| w.abs() > g.weight_range) {
            why.push(format!("weight outside [-{r}, {r}]", r = g.weight_range));
        }
        match depths.get_mut(s.depth().wrapping_sub(1)) {
            Some(c) => *c += 1,
            None => why.push(format!("depth {} outside 1..={}", s.depth(), g.l_max)),
        }
        if !why.is_empty() {
            failures.push(json!({ "file": spec_name(j), "problems": why }));
        }
    }
    let report = json!({
        "networks": specs.len(),
        "failed": failures.len(),
        "depth_counts": depths,
        "failures": failures,
    });
    if let Some(out) = &a.out {
        write_json(out, &report)?;
        let mut m = RunManifest::new("audit", json!({ "data": a.data }));
        m.input(&a.data.join(CORPUS_INDEX))?;
        m.output(out)?;
        finish(m, &sidecar(out), start)?;
    }
    println!("audited {} networks: {} failed; depth counts {:?}", specs.len(), failures.len(), depths);
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("{} networks failed the audit", failures.len())))
    }
}

fn parse_pair(s: &str, sep: char, what: &str) -> Result<Vec<usize>, CliError> {
    s.split(sep)
        .map(|v| v.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| usage(format!("cannot parse {what} `{s}`")))
}

pub fn make_dataset(a: DatasetArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let ratio = parse_pair(&a.split, ':', "--split")?;
    let [tr, va, te] = ratio[..] else {
        return Err(usage("--split expects train:val:test"));
    };
    if tr + va + te == 0 {
        return Err(usage("--split ratios must not all be zero"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (spec, source) = match &a.mlp {
        Some(p) => (load_spec::<f64>(p)?, json!({ "mlp": p })),
        None => {
            let nz = parse_pair(&a.nonzero, ':', "--nonzero")?;
            let [lo, hi] = nz[..] else {
                return Err(usage("--nonzero expects lo:hi"));
            };
            let g = GenConfig {
                n_max: a.n_max,
                hidden_max: a.n_max,
                hidden_min: 2.min(a.n_max),
                removal_fractions: a.removal.clone(),
                ..GenConfig::desk(a.activation, a.depth, a.seed)
            };
            let spec = random_mlp_matching::<f64, _>(&g, a.depth, lo..=hi, 100_000, &mut rng)?;
            (spec, json!({ "generator": g, "nonzero": [lo, hi] }))
        }
    };
    let data = make_search_dataset(&spec, a.rows, (tr, va, te), &mut rng)?;
    create_dir(&a.out)?;
    let data_path = a.out.join("data.fds");
    let gen_path = a.out.join(GENERATOR_FILE);
    save_dataset(&data_path, &data)?;
    save_spec(&gen_path, &spec)?;
    let s = data.splits.unwrap_or(Splits { train: 0, val: 0, test: 0 });
    let mut m = RunManifest::new("make-dataset", json!({ "rows": a.rows, "split": ratio, "source": source }));
    m.seeds.insert("seed".into(), a.seed);
    if let Some(p) = &a.mlp {
        m.input(p)?;
    }
    m.output(&data_path)?;
    m.output(&gen_path)?;
    finish(m, &a.out.join(RUN_MANIFEST), start)?;
    println!(
        "wrote {} rows ({}/{}/{}) from a network with {} non-zero weights",
        a.rows,
        s.train,
        s.val,
        s.test,
        spec.non_zero_count()
    );
    Ok(())
}
