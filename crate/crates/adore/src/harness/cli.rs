//! Command-line interface: train the LM, collect traces, train the
//! controller, generate, benchmark, evaluate perplexity, analyze.
//!
//! Every run resolves one seed (flag, then the ADORE_SEED environment
//! variable, then 42) and prints the resolved configuration before doing
//! anything. Reports land in the output directory as CSV plus a plain-text
//! table, with a gnuplot script alongside.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::controller::{
    dataset_from_traces, train_controller, ControllerParams, ControllerSchedule,
    ControllerVariant,
};
use crate::engine::generate;
use crate::error::{Error, Result};
use crate::harness::{analyze, bench, corpus, ppl, report};
use crate::io;
use crate::kvcache::{PolicyConfig, PolicyKind, SliceMode};
use crate::model::{
    collect_traces, topk_masked_train, ModelConfig, Token, TrainSchedule, TransformerParams,
};

pub const SEED_ENV: &str = "ADORE_SEED";

#[derive(Parser, Debug)]
#[command(name = "adore", version, about = "Fixed-size KV-cache decoding with adaptive token release and rebuild")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the byte-level LM, optionally with top-K attention masking
    TrainLm(TrainLmArgs),
    /// Record per-layer top attention sets over a corpus
    CollectTraces(CollectTracesArgs),
    /// Train the eviction scorer from recorded traces
    TrainController(TrainControllerArgs),
    /// Greedy generation under a cache policy
    Generate(GenerateArgs),
    /// Tokens-per-second across policies and generation lengths
    Bench(BenchArgs),
    /// Teacher-forced perplexity per length bucket and policy
    EvalPpl(EvalPplArgs),
    /// Uniform-set coverage and attention long-tail report
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Random seed; falls back to ADORE_SEED, then 42
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for all emitted files
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

impl CommonArgs {
    fn resolved_seed(&self) -> u64 {
        self.seed
            .or_else(|| std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok()))
            .unwrap_or(42)
    }
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    model_dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2048)]
    max_position: usize,
    #[arg(long, default_value_t = 256)]
    train_context: usize,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.layers,
            model_dim: self.model_dim,
            n_heads: self.heads,
            vocab: 256,
            max_position: self.max_position,
            train_context: self.train_context,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct PolicyArgs {
    /// full | window | strided | sink | h2o | adore
    #[arg(long, default_value = "adore")]
    policy: String,
    /// Cache capacity m; defaults to 2*top_k
    #[arg(long)]
    cache_size: Option<usize>,
    #[arg(long, default_value_t = 16)]
    top_k: usize,
    /// Released tokens rebuilt per step; defaults to 4 for adore/h2o
    #[arg(long)]
    rebuild: Option<usize>,
    #[arg(long, default_value_t = 8)]
    stride: usize,
    #[arg(long, default_value_t = 4)]
    n_sink: usize,
    /// matmul | direct row removal
    #[arg(long, default_value = "matmul")]
    slice_mode: String,
    /// Drop rebuilt rows after their step instead of caching them
    #[arg(long)]
    discard_rebuilt: bool,
}

impl PolicyArgs {
    fn build(&self, kind_name: &str) -> Result<PolicyConfig> {
        let kind = match kind_name {
            "full" => PolicyKind::Full,
            "window" => PolicyKind::Window,
            "strided" => PolicyKind::Strided { stride: self.stride },
            "sink" => PolicyKind::Sink { n_sink: self.n_sink },
            "h2o" => PolicyKind::H2o,
            "adore" => PolicyKind::Adore,
            other => return Err(Error::Config(format!("unknown policy '{other}'"))),
        };
        let capacity = self.cache_size.unwrap_or(2 * self.top_k);
        let rebuild = self.rebuild.unwrap_or(match kind {
            PolicyKind::Adore | PolicyKind::H2o => 4,
            _ => 0,
        });
        let mut cfg = PolicyConfig::new(kind, capacity, self.top_k).with_rebuild(rebuild);
        cfg.slice_mode = match self.slice_mode.as_str() {
            "matmul" => SliceMode::Matmul,
            "direct" => SliceMode::Direct,
            other => return Err(Error::Config(format!("unknown slice mode '{other}'"))),
        };
        cfg.insert_rebuilt = !self.discard_rebuilt;
        cfg.validate()?;
        Ok(cfg)
    }

    fn kind_list(&self, csv: &str) -> Result<Vec<PolicyConfig>> {
        csv.split(',')
            .map(|name| self.build(name.trim()))
            .collect()
    }
}

#[derive(Args, Debug)]
struct TrainLmArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    corpus: PathBuf,
    /// 0 trains plain full attention
    #[arg(long, default_value_t = 16)]
    top_k: usize,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 200)]
    decay_every: usize,
    /// Checkpoint path; defaults to <out-dir>/model.adck
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CollectTracesArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    lm: PathBuf,
    #[arg(long, default_value_t = 16)]
    top_k: usize,
    #[arg(long, default_value_t = 400)]
    max_sequences: usize,
    #[arg(long, default_value_t = 8)]
    threads: usize,
}

#[derive(Args, Debug)]
struct TrainControllerArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    lm: PathBuf,
    /// Directory of .adtr files from collect-traces
    #[arg(long)]
    traces_dir: PathBuf,
    #[arg(long, default_value_t = 32)]
    hidden_dim: usize,
    /// unidirectional | bidirectional | mlp-only
    #[arg(long, default_value = "unidirectional")]
    variant: String,
    #[arg(long, default_value_t = 16)]
    top_k: usize,
    #[arg(long, default_value_t = 8)]
    epochs: usize,
    #[arg(long, default_value_t = 5e-3)]
    lr: f32,
    #[arg(long, default_value_t = 200)]
    decay_every: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    controller: Option<PathBuf>,
    #[arg(long)]
    prompt_text: Option<String>,
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    controller: Option<PathBuf>,
    /// Prompt source corpus; synthetic text when omitted
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "full,window,strided,sink,h2o,adore")]
    policies: String,
    #[arg(long, default_value = "128,256,512,960")]
    lengths: String,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 128)]
    prompt_len: usize,
}

#[derive(Args, Debug)]
struct EvalPplArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    controller: Option<PathBuf>,
    /// Held-out corpus; synthetic held-out text when omitted
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "full,window,strided,sink,h2o,adore")]
    policies: String,
    #[arg(long, default_value_t = 512)]
    eval_window: usize,
    #[arg(long, default_value_t = 128)]
    bucket: usize,
    #[arg(long, default_value_t = 16)]
    n_windows: usize,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    top_k: usize,
    #[arg(long, default_value_t = 8)]
    n_windows: usize,
    #[arg(long, default_value_t = 256)]
    eval_window: usize,
}

/// Entry point used by the binary; argv[0] is the program name.
pub fn run(argv: &[String]) -> ExitCode {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // help/version are successful exits; anything else is usage
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainLm(a) => cmd_train_lm(a),
        Command::CollectTraces(a) => cmd_collect_traces(a),
        Command::TrainController(a) => cmd_train_controller(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::EvalPpl(a) => cmd_eval_ppl(a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn banner(what: &str, seed: u64, detail: &str) {
    println!("[adore] {what}");
    println!("[adore] seed = {seed}");
    println!("[adore] {detail}");
}

fn load_lm(path: &Path) -> Result<TransformerParams> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing LM checkpoint {}",
            path.display()
        )));
    }
    io::read_model_checkpoint(path)
}

fn load_controller(path: Option<&PathBuf>, needed: bool) -> Result<Option<ControllerParams>> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "missing controller checkpoint {}",
                    p.display()
                )));
            }
            Ok(Some(io::read_controller_checkpoint(p)?.0))
        }
        None if needed => Err(Error::Config(
            "policy 'adore' requires --controller".into(),
        )),
        None => Ok(None),
    }
}

fn cmd_train_lm(a: TrainLmArgs) -> Result<()> {
    let seed = a.common.resolved_seed();
    let config = a.model.config();
    config.validate()?;
    ensure_out_dir(&a.common.out_dir)?;
    banner(
        "train-lm",
        seed,
        &format!(
            "config = {config:?}, top_k = {}, epochs = {}, lr = {}, corpus = {}",
            a.top_k,
            a.epochs,
            a.lr,
            a.corpus.display()
        ),
    );
    let windows = corpus::ingest_corpus(&a.corpus, config.train_context)?;
    if windows.is_empty() {
        return Err(Error::Config("corpus is empty".into()));
    }
    let schedule = TrainSchedule {
        epochs: a.epochs,
        lr: a.lr,
        lr_decay: 0.98,
        decay_every: a.decay_every,
        seed,
    };
    let top_k = (a.top_k > 0).then_some(a.top_k);
    let (params, report) = topk_masked_train(&windows, config, top_k, &schedule)?;
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        println!("[adore] epoch {i}: mean loss {loss:.4}");
    }
    let out = a
        .out
        .unwrap_or_else(|| a.common.out_dir.join("model.adck"));
    io::write_model_checkpoint(&out, &params)?;
    println!("[adore] wrote {}", out.display());
    Ok(())
}

fn cmd_collect_traces(a: CollectTracesArgs) -> Result<()> {
    let seed = a.common.resolved_seed();
    let lm = load_lm(&a.lm)?;
    ensure_out_dir(&a.common.out_dir)?;
    let trace_dir = a.common.out_dir.join("traces");
    ensure_out_dir(&trace_dir)?;
    banner(
        "collect-traces",
        seed,
        &format!(
            "top_k = {}, max_sequences = {}, corpus = {}",
            a.top_k,
            a.max_sequences,
            a.corpus.display()
        ),
    );
    let mut windows = corpus::ingest_corpus(&a.corpus, lm.config.train_context)?;
    windows.truncate(a.max_sequences);
    let traces = collect_traces(&lm, &windows, a.top_k, a.threads)?;
    for (i, t) in traces.iter().enumerate() {
        let path = trace_dir.join(format!("seq_{i:05}.adtr"));
        io::write_traces(&path, t)?;
    }
    println!(
        "[adore] wrote {} trace files to {}",
        traces.len(),
        trace_dir.display()
    );
    Ok(())
}

fn read_trace_dir(dir: &Path) -> Result<Vec<Vec<crate::model::TraceRecord>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "adtr"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no .adtr files in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| io::read_traces(p)).collect()
}

fn cmd_train_controller(a: TrainControllerArgs) -> Result<()> {
    let seed = a.common.resolved_seed();
    let lm = load_lm(&a.lm)?;
    ensure_out_dir(&a.common.out_dir)?;
    let variant = match a.variant.as_str() {
        "unidirectional" => ControllerVariant::Unidirectional,
        "bidirectional" => ControllerVariant::Bidirectional,
        "mlp-only" => ControllerVariant::MlpOnly,
        other => return Err(Error::Config(format!("unknown variant '{other}'"))),
    };
    banner(
        "train-controller",
        seed,
        &format!(
            "variant = {}, hidden_dim = {}, top_k = {}, epochs = {}, lr = {}",
            variant.name(),
            a.hidden_dim,
            a.top_k,
            a.epochs,
            a.lr
        ),
    );
    let traces = read_trace_dir(&a.traces_dir)?;
    // sequences are reconstructable from the per-step token ids
    let sequences: Vec<Vec<Token>> = traces
        .iter()
        .map(|t| t.iter().map(|r| r.token).collect())
        .collect();
    let dataset = dataset_from_traces(&lm, &sequences, &traces, a.top_k);
    let init = ControllerParams::random(
        variant,
        lm.config.model_dim,
        a.hidden_dim,
        lm.config.max_position,
        seed,
    );
    let schedule = ControllerSchedule {
        epochs: a.epochs,
        lr: a.lr,
        decay_every: a.decay_every,
        seed,
        ..Default::default()
    };
    let (params, metrics) = train_controller(&dataset, init, &schedule)?;
    for (i, e) in metrics.epochs.iter().enumerate() {
        println!(
            "[adore] epoch {i}: loss {:.4}, val acc {:.3}, val F1 {:.3}",
            e.train_loss, e.val_accuracy, e.val_f1
        );
    }
    println!(
        "[adore] best epoch {}: acc {:.3}, F1 {:.3}",
        metrics.best_epoch, metrics.best_accuracy, metrics.best_f1
    );
    let out = a
        .out
        .unwrap_or_else(|| a.common.out_dir.join("controller.adck"));
    io::write_controller_checkpoint(&out, &params, &lm.config)?;
    println!("[adore] wrote {}", out.display());
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let seed = a.common.resolved_seed();
    let lm = load_lm(&a.lm)?;
    let policy = a.policy.build(&a.policy.policy)?;
    let controller = load_controller(
        a.controller.as_ref(),
        policy.kind == PolicyKind::Adore,
    )?;
    ensure_out_dir(&a.common.out_dir)?;
    banner("generate", seed, &format!("policy = {policy:?}"));

    let prompt_bytes: Vec<u8> = match (&a.prompt_text, &a.prompt_file) {
        (Some(t), _) => t.as_bytes().to_vec(),
        (None, Some(f)) => std::fs::read(f).map_err(|e| Error::io(f, e))?,
        (None, None) => {
            // deterministic default prompt from the synthetic corpus
            corpus::synth_corpus(seed, 160).into_bytes()
        }
    };
    if prompt_bytes.is_empty() {
        return Err(Error::Config("prompt is empty".into()));
    }
    let prompt: Vec<Token> = prompt_bytes.iter().map(|&b| b as Token).collect();
    let out = generate(&lm, controller.as_ref(), policy, &prompt, a.max_new)?;

    let text: Vec<u8> = out.tokens.iter().map(|&t| t as u8).collect();
    let gen_path = a.common.out_dir.join("generated.txt");
    std::fs::write(&gen_path, &text).map_err(|e| Error::io(&gen_path, e))?;
    let meta = format!(
        "policy = {}\nseed = {}\nprompt_tokens = {}\nnew_tokens = {}\n",
        policy.kind.name(),
        seed,
        prompt.len(),
        out.new_tokens.len(),
    );
    let meta_path = a.common.out_dir.join("generated_meta.txt");
    report::write_text(&meta_path, &meta)?;
    println!(
        "[adore] generated {} tokens in {:.3}s ({:.1} tok/s) -> {}",
        out.new_tokens.len(),
        out.generate_seconds,
        out.new_tokens.len() as f64 / out.generate_seconds.max(1e-12),
        gen_path.display()
    );
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let seed = a.common.resolved_seed();
    let lm = load_lm(&a.lm)?;
    let policies = a.policy.kind_list(&a.policies)?;
    let needs_controller = policies.iter().any(|p| p.kind == PolicyKind::Adore);
    let controller = load_controller(a.controller.as_ref(), needs_controller)?;
    ensure_out_dir(&a.common.out_dir)?;
    let lengths: Vec<usize> = a
        .lengths
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad length '{s}'"))))
        .collect::<Result<_>>()?;
    banner(
        "bench",
        seed,
        &format!(
            "policies = {}, lengths = {lengths:?}, trials = {}, prompt_len = {}",
            a.policies, a.trials, a.prompt_len
        ),
    );
    let corpus_bytes = match &a.corpus {
        Some(p) => std::fs::read(p).map_err(|e| Error::io(p, e))?,
        None => corpus::synth_corpus(seed ^ 0xBE9C, 1 << 16).into_bytes(),
    };
    let rep = bench::bench_throughput(
        &lm,
        controller.as_ref(),
        &policies,
        &lengths,
        a.trials,
        a.prompt_len,
        &corpus_bytes,
        seed,
    )?;

    let rows: Vec<String> = rep
        .rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{:.3}",
                r.policy, r.length, r.trial, r.tokens_per_sec
            )
        })
        .collect();
    report::write_csv(
        &a.common.out_dir.join("bench.csv"),
        "policy,length_bucket,trial,tokens_per_sec",
        &rows,
    )?;
    let ctrl_rows: Vec<String> = rep
        .rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{:.6},{:.6}",
                r.policy, r.length, r.trial, r.controller_seconds, r.generate_seconds
            )
        })
        .collect();
    report::write_csv(
        &a.common.out_dir.join("bench_controller.csv"),
        "policy,length_bucket,trial,controller_seconds,total_seconds",
        &ctrl_rows,
    )?;
    let table_rows: Vec<Vec<String>> = rep
        .summaries
        .iter()
        .map(|s| {
            vec![
                s.policy.clone(),
                s.length.to_string(),
                format!("{:.1}", s.mean_tps),
                format!("{:.1}", s.stdev_tps),
                format!("{:.2}%", s.controller_share * 100.0),
            ]
        })
        .collect();
    let table = report::render_table(
        "throughput (tokens/sec)",
        &["policy", "length", "mean", "stdev", "controller"],
        &table_rows,
    );
    report::write_text(&a.common.out_dir.join("bench.txt"), &table)?;
    report::write_text(&a.common.out_dir.join("plots.gp"), &report::gnuplot_script())?;
    print!("{table}");
    Ok(())
}

fn cmd_eval_ppl(a: EvalPplArgs) -> Result<()> {
    let seed = a.common.resolved_seed();
    let lm = load_lm(&a.lm)?;
    let policies = a.policy.kind_list(&a.policies)?;
    let needs_controller = policies.iter().any(|p| p.kind == PolicyKind::Adore);
    let controller = load_controller(a.controller.as_ref(), needs_controller)?;
    ensure_out_dir(&a.common.out_dir)?;
    banner(
        "eval-ppl",
        seed,
        &format!(
            "policies = {}, eval_window = {}, bucket = {}, windows = {}, seeds = {}",
            a.policies, a.eval_window, a.bucket, a.n_windows, a.seeds
        ),
    );

    let mut csv_rows: Vec<String> = Vec::new();
    let mut table_rows: Vec<Vec<String>> = Vec::new();
    for s in 0..a.seeds.max(1) {
        let held_out_seed = seed.wrapping_add(1000 + s as u64);
        let windows: Vec<Vec<Token>> = match &a.corpus {
            Some(p) => {
                let mut w = corpus::ingest_corpus(p, a.eval_window)?;
                w.truncate(a.n_windows);
                w
            }
            None => {
                let text = corpus::synth_corpus(held_out_seed, a.eval_window * a.n_windows);
                corpus::bytes_to_windows(text.as_bytes(), a.eval_window)
            }
        };
        let evals = ppl::eval_policies_ppl(&lm, controller.as_ref(), &policies, &windows, a.bucket)?;
        for e in &evals {
            for b in &e.buckets {
                if b.tokens == 0 {
                    continue;
                }
                csv_rows.push(format!(
                    "{},{},{},{:.4},{}",
                    e.policy,
                    b.bucket * a.bucket,
                    held_out_seed,
                    b.ppl(),
                    b.tokens
                ));
                table_rows.push(vec![
                    e.policy.clone(),
                    (b.bucket * a.bucket).to_string(),
                    held_out_seed.to_string(),
                    format!("{:.3}", b.ppl()),
                ]);
            }
        }
    }
    report::write_csv(
        &a.common.out_dir.join("ppl.csv"),
        "policy,length_bucket,seed,ppl,tokens",
        &csv_rows,
    )?;
    let table = report::render_table(
        "held-out perplexity",
        &["policy", "bucket_end", "seed", "ppl"],
        &table_rows,
    );
    report::write_text(&a.common.out_dir.join("ppl.txt"), &table)?;
    report::write_text(&a.common.out_dir.join("plots.gp"), &report::gnuplot_script())?;
    print!("{table}");
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let seed = a.common.resolved_seed();
    let lm = load_lm(&a.lm)?;
    ensure_out_dir(&a.common.out_dir)?;
    banner(
        "analyze",
        seed,
        &format!(
            "top_k = {}, windows = {} x {}",
            a.top_k, a.n_windows, a.eval_window
        ),
    );
    let windows: Vec<Vec<Token>> = match &a.corpus {
        Some(p) => {
            let mut w = corpus::ingest_corpus(p, a.eval_window)?;
            w.truncate(a.n_windows);
            w
        }
        None => {
            let text = corpus::synth_corpus(seed ^ 0xA11A, a.eval_window * a.n_windows);
            corpus::bytes_to_windows(text.as_bytes(), a.eval_window)
        }
    };
    let rep = analyze::analyze_uniform_policy(&lm, &windows, a.top_k, seed)?;

    let rows: Vec<String> = rep
        .layers
        .iter()
        .map(|l| {
            format!(
                "{},{:.4},{:.4},{:.4}",
                l.layer, l.overlap, l.uniform_mass, l.random_mass
            )
        })
        .collect();
    report::write_csv(
        &a.common.out_dir.join("analyze.csv"),
        "layer,overlap,uniform_mass,random_mass",
        &rows,
    )?;
    let curve_rows: Vec<String> = rep
        .curve
        .iter()
        .enumerate()
        .map(|(i, w)| format!("{},{:.6}", i + 1, w))
        .collect();
    report::write_csv(
        &a.common.out_dir.join("analyze_curve.csv"),
        "rank,weight",
        &curve_rows,
    )?;
    let table_rows: Vec<Vec<String>> = rep
        .layers
        .iter()
        .map(|l| {
            vec![
                l.layer.to_string(),
                format!("{:.3}", l.overlap),
                format!("{:.3}", l.uniform_mass),
                format!("{:.3}", l.random_mass),
            ]
        })
        .collect();
    let table = report::render_table(
        &format!("uniform-set coverage ({} positions)", rep.positions_probed),
        &["layer", "overlap", "uniform_mass", "random_mass"],
        &table_rows,
    );
    report::write_text(&a.common.out_dir.join("analyze.txt"), &table)?;
    report::write_text(&a.common.out_dir.join("plots.gp"), &report::gnuplot_script())?;
    print!("{table}");
    Ok(())
}
