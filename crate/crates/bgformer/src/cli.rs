//! Command-line pipeline: preprocess counts into a bundle, train, evaluate,
//! export attention summaries, benchmark the attention paths, and run the
//! numerical checks. Every run is seeded; each command writes a manifest
//! naming its inputs by digest.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchors::{encode, nearest_anchor};
use crate::attention::class_attention_summary;
use crate::error::{BgError, Result};
use crate::ingest::{
    self, ExpressionMatrix, InputFormat, ProcessedBundle,
};
use crate::tape::ParamStore;
use crate::tensor::Tensor2;
use crate::theory::{
    self, EquivalenceConfig, JlTrialConfig, ScalingConfig,
};
use crate::trainer::{
    self, evaluate, resolve_ids, EpochStats, ModelIds, TrainConfig, TrainData,
};

#[derive(Parser)]
#[command(
    name = "bgformer",
    version,
    about = "Anchor-attention clustering for single-cell count matrices"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load counts, apply QC, pick variable genes, normalize, write a bundle.
    Preprocess(PreprocessArgs),
    /// Train on a preprocessed bundle and write all run outputs.
    Train(TrainArgs),
    /// Recompute labels and metrics from a saved model.
    Evaluate(EvaluateArgs),
    /// Write per-cluster attention summaries and anchor assignments.
    ExportAttention(ExportArgs),
    /// Time both attention paths over a size sweep.
    Bench(BenchArgs),
    /// Numerical checks behind the model design.
    #[command(subcommand)]
    Theory(TheoryCmd),
    /// Generate a seeded synthetic count matrix with known clusters.
    Synth(SynthArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FormatArg {
    Csv,
    Mtx,
}

impl From<FormatArg> for InputFormat {
    fn from(f: FormatArg) -> InputFormat {
        match f {
            FormatArg::Csv => InputFormat::DenseCsv,
            FormatArg::Mtx => InputFormat::MatrixMarket,
        }
    }
}

#[derive(Args)]
struct PreprocessArgs {
    /// Counts file, cells as rows.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    /// Number of highly variable genes to keep.
    #[arg(long, default_value_t = 500)]
    hvg: usize,
    /// Drop cells expressing fewer genes than this.
    #[arg(long, default_value_t = 1)]
    min_genes: usize,
    /// Drop genes expressed in fewer cells than this.
    #[arg(long, default_value_t = 1)]
    min_cells: usize,
    /// Output bundle path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Preprocessed bundle.
    #[arg(long)]
    input: PathBuf,
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Reference labels, one per line in cell order.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long = "disable-L-a")]
    disable_l_a: bool,
    #[arg(long = "disable-L-s")]
    disable_l_s: bool,
    /// Anchor count m.
    #[arg(long)]
    anchors: Option<usize>,
    /// Attention heads l.
    #[arg(long)]
    heads: Option<usize>,
    /// Cluster count K.
    #[arg(long)]
    clusters: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Preprocessed bundle.
    #[arg(long)]
    input: PathBuf,
    /// Directory holding checkpoint.bgf and model.json.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Cell counts, ascending.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Skip full attention above this size.
    #[arg(long, default_value_t = 8000)]
    full_cap: usize,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum TheoryCmd {
    /// Random-projection recovery trials for batched attention.
    Jl(JlArgs),
    /// Anchor-side evaluation of softmax-free attention.
    Equivalence(EquivalenceArgs),
}

#[derive(Args)]
struct JlArgs {
    #[arg(long, default_value_t = 1024)]
    n: usize,
    #[arg(long, default_value_t = 256)]
    n_prime: usize,
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EquivalenceArgs {
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    m: usize,
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    d_k: usize,
    #[arg(long, default_value_t = 3)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    clusters: usize,
    #[arg(long, default_value_t = 500)]
    genes: usize,
    /// Upregulated marker genes per cluster.
    #[arg(long, default_value_t = 20)]
    de: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory for counts.csv and labels.csv.
    #[arg(long)]
    out: PathBuf,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Preprocess(a) => cmd_preprocess(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::ExportAttention(a) => cmd_export_attention(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Theory(t) => match t {
            TheoryCmd::Jl(a) => cmd_theory_jl(a),
            TheoryCmd::Equivalence(a) => cmd_theory_equivalence(a),
        },
        Cmd::Synth(a) => cmd_synth(a),
    }
}

/// 6 significant digits, for human-readable lines only.
fn fmt6(x: f64) -> String {
    format!("{x:.5e}")
}

fn eval_threads() -> usize {
    std::env::var("BGF_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&t| t >= 1)
        .unwrap_or(1)
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| BgError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| BgError::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| BgError::io(path, e))
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| BgError::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn modified_unix(path: &Path) -> Result<u64> {
    let meta = std::fs::metadata(path).map_err(|e| BgError::io(path, e))?;
    let modified = meta.modified().map_err(|e| BgError::io(path, e))?;
    Ok(modified
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0))
}

#[derive(Serialize)]
struct ManifestInput {
    path: String,
    sha256: String,
    modified_unix: u64,
}

/// Provenance record for one invocation: what ran, with which seed and
/// config, on which input bytes. Input timestamps stand in for a wall
/// clock so reruns on identical inputs rewrite identical bytes.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    artifact_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: Vec<ManifestInput>,
}

fn build_manifest(
    command: &str,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: &[&Path],
) -> Result<RunManifest> {
    let mut entries = Vec::with_capacity(inputs.len());
    for p in inputs {
        entries.push(ManifestInput {
            path: p.display().to_string(),
            sha256: sha256_hex(p)?,
            modified_unix: modified_unix(p)?,
        });
    }
    Ok(RunManifest {
        command: command.to_string(),
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config,
        inputs: entries,
    })
}

fn matrix_csv(t: &Tensor2) -> String {
    let mut out = String::new();
    for i in 0..t.rows() {
        let row: Vec<String> = t.row(i).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn labels_csv(labels: &[usize]) -> String {
    let mut out = String::from("cell_id,label\n");
    for (i, l) in labels.iter().enumerate() {
        out.push_str(&format!("cell_{i},{l}\n"));
    }
    out
}

#[derive(Serialize)]
struct MetricsJson {
    n: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ari: Option<f64>,
    cluster_sizes: Vec<usize>,
}

/// Dimensions needed to rebuild the model around a checkpoint.
#[derive(Serialize, Deserialize)]
struct ModelMeta {
    d: usize,
    config: TrainConfig,
}

fn load_model(dir: &Path) -> Result<(ParamStore, ModelIds, ModelMeta)> {
    let meta: ModelMeta = serde_json::from_str(&read_to_string(&dir.join("model.json"))?)?;
    let store = ParamStore::load(&dir.join("checkpoint.bgf"))?;
    let ids = resolve_ids(&store)?;
    Ok((store, ids, meta))
}

fn read_truth(path: &Path, n: usize) -> Result<Vec<usize>> {
    let raw = ingest::read_labels(path)?;
    if raw.len() != n {
        return Err(BgError::Config(format!(
            "{} labels in {} but {n} cells",
            raw.len(),
            path.display()
        )));
    }
    Ok(ingest::encode_labels(&raw).0)
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let manifest = build_manifest(
        "preprocess",
        None,
        serde_json::json!({
            "format": match a.format { FormatArg::Csv => "csv", FormatArg::Mtx => "mtx" },
            "hvg": a.hvg,
            "min_genes": a.min_genes,
            "min_cells": a.min_cells,
        }),
        &[a.input.as_path()],
    )?;
    let em = ingest::load_counts(&a.input, a.format.into())?;
    let em = ingest::filter_qc(&em, a.min_genes, a.min_cells)?;
    let em = ingest::select_hvg(&em, a.hvg)?;
    let em = ingest::normalize_log(&em)?;
    let bundle = ProcessedBundle::from_processed(&em);
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    write_json(
        &PathBuf::from(format!("{}.manifest.json", a.out.display())),
        &manifest,
    )?;
    bundle.save(&a.out)?;
    println!(
        "preprocessed {} cells x {} genes -> {} variable genes, wrote {}",
        bundle.n_cells(),
        bundle.d_prime,
        bundle.n_genes(),
        a.out.display()
    );
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => trainer::parse_config(&read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(m) = a.anchors {
        cfg.m = m;
    }
    if let Some(l) = a.heads {
        cfg.l = l;
    }
    if let Some(k) = a.clusters {
        cfg.k = k;
    }
    if a.disable_l_a {
        cfg.disable_l_a = true;
    }
    if a.disable_l_s {
        cfg.disable_l_s = true;
    }
    Ok(cfg)
}

fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,L,L_s,L_c,L_a\n");
    for s in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.epoch, s.total, s.l_s, s.l_c, s.l_a
        ));
    }
    out
}

fn codebook_csv(u: &Tensor2, usage: &[u64]) -> String {
    let mut out = String::from("anchor,usage,values\n");
    for j in 0..u.rows() {
        let vals: Vec<String> = u.row(j).iter().map(|v| format!("{v}")).collect();
        out.push_str(&format!("{j},{},{}\n", usage[j], vals.join(",")));
    }
    out
}

fn write_eval_outputs(
    out: &Path,
    labels: &[usize],
    z: &Tensor2,
    metrics: &MetricsJson,
) -> Result<()> {
    write_text(&out.join("labels.csv"), &labels_csv(labels))?;
    write_json(&out.join("metrics.json"), metrics)?;
    write_text(&out.join("embeddings.csv"), &matrix_csv(z))?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&a)?;
    cfg.validate()?;
    ensure_dir(&a.out)?;
    let mut inputs: Vec<&Path> = vec![a.input.as_path()];
    if let Some(c) = &a.config {
        inputs.push(c.as_path());
    }
    if let Some(l) = &a.labels {
        inputs.push(l.as_path());
    }
    let manifest = build_manifest("train", Some(cfg.seed), serde_json::to_value(&cfg)?, &inputs)?;
    write_json(&a.out.join("manifest.json"), &manifest)?;

    let bundle = ProcessedBundle::load(&a.input)?;
    let data = TrainData::from_bundle(&bundle);
    let truth = match &a.labels {
        Some(path) => Some(read_truth(path, data.n())?),
        None => None,
    };

    let checkpoint = a.out.join("checkpoint.bgf");
    let outcome = trainer::train_data(&data, &cfg, |stats, store| {
        println!(
            "epoch {}  L={} L_s={} L_c={} L_a={}",
            stats.epoch,
            fmt6(stats.total),
            fmt6(stats.l_s),
            fmt6(stats.l_c),
            fmt6(stats.l_a)
        );
        store.save(&checkpoint)
    })?;

    write_json(
        &a.out.join("model.json"),
        &ModelMeta {
            d: data.d(),
            config: cfg.clone(),
        },
    )?;
    outcome.store.save(&checkpoint)?;
    let report = evaluate(
        &outcome.store,
        &outcome.ids,
        cfg.scale_scores,
        &data.x,
        truth.as_deref(),
        cfg.batch_size,
        eval_threads(),
    )?;
    let metrics = MetricsJson {
        n: data.n(),
        k: cfg.k,
        acc: report.acc,
        ari: report.ari,
        cluster_sizes: report.cluster_sizes.clone(),
    };
    write_eval_outputs(&a.out, &report.labels, &report.z, &metrics)?;
    write_text(&a.out.join("loss_history.csv"), &history_csv(&outcome.history))?;
    write_text(
        &a.out.join("codebook.csv"),
        &codebook_csv(outcome.store.value(outcome.ids.anchor.u), &outcome.anchor_usage),
    )?;
    match (report.acc, report.ari) {
        (Some(acc), Some(ari)) => println!("acc={} ari={}", fmt6(acc), fmt6(ari)),
        _ => println!("cluster sizes: {:?}", report.cluster_sizes),
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    ensure_dir(&a.out)?;
    let (store, ids, meta) = load_model(&a.model)?;
    let bundle = ProcessedBundle::load(&a.input)?;
    let data = TrainData::from_bundle(&bundle);
    if data.d() != meta.d {
        return Err(BgError::ShapeMismatch {
            op: "evaluate",
            detail: format!("bundle has {} genes, model expects {}", data.d(), meta.d),
        });
    }
    let mut inputs: Vec<&Path> = vec![a.input.as_path()];
    if let Some(l) = &a.labels {
        inputs.push(l.as_path());
    }
    let manifest = build_manifest(
        "evaluate",
        Some(meta.config.seed),
        serde_json::to_value(&meta.config)?,
        &inputs,
    )?;
    write_json(&a.out.join("manifest.json"), &manifest)?;
    let truth = match &a.labels {
        Some(path) => Some(read_truth(path, data.n())?),
        None => None,
    };
    let report = evaluate(
        &store,
        &ids,
        meta.config.scale_scores,
        &data.x,
        truth.as_deref(),
        meta.config.batch_size,
        eval_threads(),
    )?;
    let metrics = MetricsJson {
        n: data.n(),
        k: meta.config.k,
        acc: report.acc,
        ari: report.ari,
        cluster_sizes: report.cluster_sizes.clone(),
    };
    write_eval_outputs(&a.out, &report.labels, &report.z, &metrics)?;
    match (report.acc, report.ari) {
        (Some(acc), Some(ari)) => println!("acc={} ari={}", fmt6(acc), fmt6(ari)),
        _ => println!("cluster sizes: {:?}", report.cluster_sizes),
    }
    Ok(())
}

fn cmd_export_attention(a: ExportArgs) -> Result<()> {
    ensure_dir(&a.out)?;
    let (store, ids, meta) = load_model(&a.model)?;
    let bundle = ProcessedBundle::load(&a.input)?;
    let data = TrainData::from_bundle(&bundle);
    if data.d() != meta.d {
        return Err(BgError::ShapeMismatch {
            op: "export-attention",
            detail: format!("bundle has {} genes, model expects {}", data.d(), meta.d),
        });
    }
    let manifest = build_manifest(
        "export-attention",
        Some(meta.config.seed),
        serde_json::to_value(&meta.config)?,
        &[a.input.as_path()],
    )?;
    write_json(&a.out.join("manifest.json"), &manifest)?;

    let report = evaluate(
        &store,
        &ids,
        meta.config.scale_scores,
        &data.x,
        None,
        meta.config.batch_size,
        eval_threads(),
    )?;
    let params = trainer::attention_params(&store, &ids, meta.config.scale_scores);
    let (bs, _) = crate::attention::multi_head_bipartite(
        &data.x,
        store.value(ids.anchor.u),
        &params,
    )?;
    for (h, b) in bs.iter().enumerate() {
        let summary = class_attention_summary(b, &report.labels, meta.config.k)?;
        write_text(
            &a.out.join(format!("attention_head{h}.csv")),
            &matrix_csv(&summary),
        )?;
    }
    let h = encode(
        &data.x,
        store.value(ids.anchor.w_e),
        store.value(ids.anchor.b_e),
    )?;
    let (cell_anchors, _) = nearest_anchor(&h, store.value(ids.anchor.u))?;
    let mut csv = String::from("cell_id,anchor\n");
    for (i, ai) in cell_anchors.iter().enumerate() {
        csv.push_str(&format!("cell_{i},{ai}\n"));
    }
    write_text(&a.out.join("cell_anchors.csv"), &csv)?;
    println!(
        "wrote {} per-head summaries and anchor assignments to {}",
        bs.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct BenchJson {
    full_cap: usize,
    rows: Vec<theory::BenchRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    slope_bipartite: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    slope_full: Option<f64>,
}

fn bench_csv(report: &theory::BenchReport, sizes: &[usize], full_cap: usize) -> String {
    let mut out = String::from("n,method,mean_ms,std_ms,flops\n");
    for &n in sizes {
        for row in report.rows.iter().filter(|r| r.n == n) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.n, row.method, row.mean_ms, row.std_ms, row.flops
            ));
        }
        if n > full_cap {
            out.push_str(&format!("{n},full,skipped,skipped,skipped\n"));
        }
    }
    out
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    ensure_dir(&a.out)?;
    let mut cfg = ScalingConfig::standard(a.sizes.clone());
    cfg.reps = a.reps;
    cfg.full_cap = a.full_cap;
    cfg.seed = a.seed;
    let manifest = build_manifest(
        "bench",
        Some(a.seed),
        serde_json::json!({
            "sizes": a.sizes,
            "reps": a.reps,
            "full_cap": a.full_cap,
            "d": cfg.d, "m": cfg.m, "l": cfg.l,
            "d_k": cfg.d_k, "d_h": cfg.d_h, "d_u": cfg.d_u,
        }),
        &[],
    )?;
    write_json(&a.out.join("manifest.json"), &manifest)?;
    let report = theory::scaling_benchmark(&cfg)?;
    write_text(&a.out.join("bench.csv"), &bench_csv(&report, &a.sizes, a.full_cap))?;
    write_json(
        &a.out.join("bench.json"),
        &BenchJson {
            full_cap: a.full_cap,
            rows: report.rows.clone(),
            slope_bipartite: report.slope_bipartite,
            slope_full: report.slope_full,
        },
    )?;
    for row in &report.rows {
        println!(
            "n={} {} mean_ms={} flops={}",
            row.n,
            row.method,
            fmt6(row.mean_ms),
            row.flops
        );
    }
    if let Some(s) = report.slope_bipartite {
        println!("slope_bipartite={}", fmt6(s));
    }
    if let Some(s) = report.slope_full {
        println!("slope_full={}", fmt6(s));
    }
    Ok(())
}

fn cmd_theory_jl(a: JlArgs) -> Result<()> {
    let cfg = JlTrialConfig {
        n: a.n,
        n_prime: a.n_prime,
        epsilon: a.epsilon,
        trials: a.trials,
        seed: a.seed,
    };
    let m = theory::m_jl(a.n_prime, a.epsilon);
    let rate = theory::jl_experiment(&cfg)?;
    println!("m_jl={m}");
    println!("success_rate={}", fmt6(rate));
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        write_json(
            &out.join("jl.json"),
            &serde_json::json!({
                "n": a.n, "n_prime": a.n_prime, "epsilon": a.epsilon,
                "trials": a.trials, "seed": a.seed,
                "m_jl": m, "success_rate": rate,
            }),
        )?;
    }
    Ok(())
}

fn cmd_theory_equivalence(a: EquivalenceArgs) -> Result<()> {
    let cfg = EquivalenceConfig {
        n: a.n,
        m: a.m,
        d: a.d,
        d_k: a.d_k,
        seed: a.seed,
    };
    let report = theory::equivalence_report(&cfg, 0.0)?;
    println!("max_abs_diff={}", fmt6(report.max_abs_diff));
    println!("softmax_gap={}", fmt6(report.softmax_gap));
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        write_json(
            &out.join("equivalence.json"),
            &serde_json::json!({
                "n": a.n, "m": a.m, "d": a.d, "d_k": a.d_k, "seed": a.seed,
                "max_abs_diff": report.max_abs_diff,
                "softmax_gap": report.softmax_gap,
            }),
        )?;
    }
    Ok(())
}

fn counts_csv(em: &ExpressionMatrix) -> String {
    let mut out = String::new();
    out.push_str(&em.gene_names.join(","));
    out.push('\n');
    for i in 0..em.n_cells() {
        let row: Vec<String> = em
            .raw_counts
            .row(i)
            .iter()
            .map(|v| format!("{}", *v as u64))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    ensure_dir(&a.out)?;
    let (em, labels) = theory::synth_generate(a.n, a.clusters, a.genes, a.de, a.seed)?;
    let manifest = build_manifest(
        "synth",
        Some(a.seed),
        serde_json::json!({
            "n": a.n, "clusters": a.clusters, "genes": a.genes, "de": a.de,
        }),
        &[],
    )?;
    write_json(&a.out.join("manifest.json"), &manifest)?;
    write_text(&a.out.join("counts.csv"), &counts_csv(&em))?;
    let mut truth = String::new();
    for l in &labels {
        truth.push_str(&format!("{l}\n"));
    }
    write_text(&a.out.join("labels.csv"), &truth)?;
    println!(
        "wrote {} cells x {} genes with {} clusters to {}",
        a.n,
        a.genes,
        a.clusters,
        a.out.display()
    );
    Ok(())
}
