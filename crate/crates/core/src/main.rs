use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wpgrec::bench::{bench, check_linearity};
use wpgrec::config::{digest, Config};
use wpgrec::data::{self, read_prepared, write_prepared, LogFormat, Phase};
use wpgrec::eval::{evaluate_popularity, write_metrics, MetricsReport, DEFAULT_KS};
use wpgrec::model::check::{end_to_end_check, micro_config, GRADCHECK_TOLERANCE};
use wpgrec::sweep::{best_by_validation, format_table, parse_grid, sweep_ablations, sweep_grid, sweep_param};
use wpgrec::train::{evaluate_model, load_checkpoint, model_for_checkpoint, save_checkpoint, train};
use wpgrec::{synth, Error, Result};

/// Name of the per-dataset config fragment written by `prepare`.
const DATA_CONFIG: &str = "run.conf";

#[derive(Parser)]
#[command(name = "wpgrec", version, about = "Wavelet-packet graph recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, filter and split an interaction log into a prepared directory.
    Prepare(PrepareArgs),
    /// Train one model per seed and keep the best checkpoint.
    Train(TrainArgs),
    /// Full-ranking evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of every gradient on a built-in micro dataset.
    Gradcheck(GradcheckArgs),
    /// Dump per-subband energy, flatness and gate weights for some users.
    Inspect(InspectArgs),
    /// Train over values of one key, a grid file, or the ablations.
    Sweep(SweepArgs),
    /// Count graph-propagation work against the analytic cost terms.
    Bench(BenchArgs),
}

#[derive(Args)]
struct Overrides {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` assignments applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long, required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    #[arg(long, default_value = "tsv")]
    format: LogFormat,
    /// Generate a log instead: micro, overfit, planted or standin.
    #[arg(long, conflicts_with = "input")]
    synthetic: Option<String>,
    /// Generator seed for --synthetic.
    #[arg(long, default_value_t = 0)]
    synthetic_seed: u64,
    #[arg(long, default_value_t = 5)]
    kcore: usize,
    /// Recorded as `model.max_len` for later commands on this directory.
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Train only this seed instead of every seed in `train.seeds`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// valid, test or both.
    #[arg(long, default_value = "test")]
    phase: String,
    /// Keep the validation target among test candidates.
    #[arg(long)]
    include_valid_at_test: bool,
    /// Directory for metrics.csv and metrics.json; defaults to the
    /// checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Config file applied on top of the micro configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, default_value_t = 11)]
    data_seed: u64,
    /// Perturb this parameter's analytic gradient before comparing.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated raw user ids.
    #[arg(long, value_delimiter = ',')]
    users: Vec<String>,
    #[arg(long, default_value = "test")]
    phase: Phase,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Key to vary; `lambda1` is short for `model.lambda1`.
    #[arg(long, required_unless_present_any = ["ablations", "grid"])]
    param: Option<String>,
    #[arg(long, value_delimiter = ',', requires = "param")]
    values: Vec<String>,
    /// Sweep the full model and the five single-component ablations.
    #[arg(long, conflicts_with_all = ["param", "grid"])]
    ablations: bool,
    /// Grid file of `key = v1, v2, ...` lines; every combination is trained
    /// and the best one on validation NDCG@10 is reported.
    #[arg(long, conflicts_with = "param")]
    grid: Option<PathBuf>,
    /// Write the table here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value_t = 2)]
    level: usize,
    #[arg(long = "K", default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Run every level in 1..=3 and order in 1..=3 and check linearity.
    #[arg(long)]
    grid: bool,
}

/// Defaults, then the dataset's fragment, then the file, then `--set`.
fn load_config(data: Option<&Path>, overrides: &Overrides) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(dir) = data {
        let p = dir.join(DATA_CONFIG);
        if p.exists() {
            cfg.apply_str(&std::fs::read_to_string(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?)?;
        }
    }
    if let Some(p) = &overrides.config {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        cfg.apply_str(&text)?;
    }
    apply_sets(&mut cfg, &overrides.set)?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_sets(cfg: &mut Config, sets: &[String]) -> Result<()> {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn print_report(r: &MetricsReport) {
    println!(
        "{:<5} HR@10 {:.4}  NDCG@10 {:.4}  HR@20 {:.4}  NDCG@20 {:.4}  ({} users)",
        r.phase,
        r.hr(10),
        r.ndcg(10),
        r.hr(20),
        r.ndcg(20),
        r.num_users
    );
}

fn cmd_prepare(a: PrepareArgs) -> Result<()> {
    let log = match (&a.synthetic, &a.input) {
        (Some(name), _) => match name.as_str() {
            "micro" => synth::micro_log(a.synthetic_seed),
            "overfit" => synth::overfit_log(a.synthetic_seed),
            "planted" => synth::planted_log(&synth::PlantedConfig::default(), a.synthetic_seed),
            "standin" => synth::standin_log(&synth::StandInConfig::default(), a.synthetic_seed),
            other => return Err(Error::Config(format!("unknown synthetic corpus '{other}'"))),
        },
        (None, Some(path)) => data::parse_interactions(path, a.format)?,
        (None, None) => return Err(Error::Config("--input or --synthetic is required".into())),
    };
    for r in log.rejected.iter().take(10) {
        eprintln!("rejected line {}: {}", r.line, r.reason);
    }
    if log.rejected.len() > 10 {
        eprintln!("... {} rejected lines in total", log.rejected.len());
    }
    let mut probe = Config::default();
    probe.set("model.max_len", &a.max_len.to_string())?;
    probe.validate()?;
    let ds = data::prepare(&log, a.kcore)?;
    write_prepared(&a.out, &ds)?;
    write(&a.out.join(DATA_CONFIG), &format!("model.max_len = {}\n", a.max_len))?;
    let s = &ds.stats;
    println!(
        "users {}  items {}  interactions {}  sparsity {:.4}%  avg length {:.1}  dropped users {}",
        s.num_users,
        s.num_items,
        s.num_interactions,
        100.0 * s.sparsity,
        s.avg_length,
        s.dropped_users
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let ds = read_prepared(&a.data)?;
    let cfg = load_config(Some(&a.data), &a.overrides)?;
    let text = cfg.to_text();
    let cdigest = digest(&text);
    let seeds = a.seed.map_or_else(|| cfg.train.seeds.clone(), |s| vec![s]);
    let pop = evaluate_popularity(&ds, Phase::Test, &DEFAULT_KS, cfg.eval)?;
    if !a.quiet {
        print!("popularity ");
        print_report(&pop);
    }
    let mut all_reports = Vec::new();
    let mut best_overall: Option<(f64, u64)> = None;
    for seed in seeds {
        let quiet = a.quiet;
        let out = train(&ds, &cfg.model, &cfg.train, cfg.eval, seed, &text, |e| {
            if !quiet {
                println!(
                    "seed {seed} epoch {:>3}  loss {:.5}  ce {:.5}  valid NDCG@10 {:.5}  ({:.1}s)",
                    e.epoch, e.train_loss, e.train_ce, e.valid_ndcg10, e.seconds
                );
            }
        })?;
        let dir = a.out.join(format!("seed{seed}"));
        save_checkpoint(&dir.join("checkpoint.bin"), &out.model, &out.best)?;
        let manifest = serde_json::to_string_pretty(&out.manifest).map_err(|e| Error::Format(e.to_string()))? + "\n";
        write(&dir.join("manifest.json"), &manifest)?;
        let reports: Vec<MetricsReport> = [Phase::Valid, Phase::Test]
            .into_iter()
            .map(|p| evaluate_model(&out.model, &out.best, &ds, p, &DEFAULT_KS, cfg.eval, &cdigest))
            .collect::<Result<_>>()?;
        write_metrics(&dir, &reports)?;
        println!("seed {seed}: best epoch {} of {}", out.manifest.best_epoch, out.manifest.epochs.len());
        reports.iter().for_each(print_report);
        if best_overall.is_none_or(|(v, _)| out.manifest.best_valid_ndcg10 > v) {
            best_overall = Some((out.manifest.best_valid_ndcg10, seed));
        }
        all_reports.extend(reports);
    }
    write(&a.out.join("config.conf"), &text)?;
    if let Some((_, seed)) = best_overall {
        let from = a.out.join(format!("seed{seed}"));
        for f in ["checkpoint.bin", "checkpoint.bin.json"] {
            std::fs::copy(from.join(f), a.out.join(f)).map_err(|e| Error::Data(format!("{}: {e}", f)))?;
        }
    }
    write_metrics(&a.out, &all_reports)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ds = read_prepared(&a.data)?;
    let (meta, store) = load_checkpoint(&a.checkpoint)?;
    let model = model_for_checkpoint(&meta, &store, &ds)?;
    let phases = match a.phase.as_str() {
        "both" => vec![Phase::Valid, Phase::Test],
        p => vec![p.parse()?],
    };
    let opts = wpgrec::eval::EvalOptions {
        exclude_valid_at_test: !a.include_valid_at_test,
    };
    let cdigest = digest(&serde_json::to_string(&meta.model).map_err(|e| Error::Format(e.to_string()))?);
    let reports: Vec<MetricsReport> = phases
        .into_iter()
        .map(|p| evaluate_model(&model, &store, &ds, p, &DEFAULT_KS, opts, &cdigest))
        .collect::<Result<_>>()?;
    reports.iter().for_each(print_report);
    let out = a.out.unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    write_metrics(&out, &reports)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let mut cfg = Config {
        model: micro_config(),
        ..Config::default()
    };
    if let Some(p) = &a.config {
        cfg.apply_str(&std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)?;
    }
    apply_sets(&mut cfg, &a.set)?;
    cfg.validate()?;
    let ds = synth::micro_dataset(a.data_seed)?;
    let t0 = std::time::Instant::now();
    let report = end_to_end_check(&cfg.model, &ds, a.corrupt.as_deref())?;
    for (group, worst) in report.by_group() {
        match worst {
            Some(e) => println!("{group:<10} {e:.3e}"),
            None => println!("{group:<10} absent"),
        }
    }
    let failed = report.failures(GRADCHECK_TOLERANCE);
    println!("worst relative error {:.3e} over {} tensors in {:.1}s", report.worst(), report.params.len(), t0.elapsed().as_secs_f64());
    if failed.is_empty() {
        println!("PASS");
        Ok(true)
    } else {
        println!("FAIL: {}", failed.join(", "));
        Ok(false)
    }
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let ds = read_prepared(&a.data)?;
    let (meta, store) = load_checkpoint(&a.checkpoint)?;
    let model = model_for_checkpoint(&meta, &store, &ds)?;
    let users: Vec<usize> = a
        .users
        .iter()
        .map(|raw| {
            ds.user_ids
                .iter()
                .position(|u| u == raw)
                .ok_or_else(|| Error::Data(format!("unknown user id '{raw}'")))
        })
        .collect::<Result<_>>()?;
    let out = model.forward_all(&store, &ds.inputs(a.phase))?;
    let mut csv = String::from("user_id,subband,energy,sfm,gate\n");
    for &u in &users {
        for b in 0..model.num_subbands() {
            csv.push_str(&format!(
                "{},{},{:.17e},{:.17e},{:.17e}\n",
                ds.user_ids[u],
                b,
                out.energy.get2(u, b),
                out.sfm.get2(u, b),
                out.gates.get2(u, b)
            ));
        }
    }
    match &a.out {
        Some(p) => write(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let ds = read_prepared(&a.data)?;
    let cfg = load_config(Some(&a.data), &a.overrides)?;
    let seeds = cfg.train.seeds.clone();
    let log = |r: &wpgrec::sweep::RunResult| {
        eprintln!(
            "{} seed {}: HR@10 {:.4} NDCG@10 {:.4} (best epoch {})",
            r.label,
            r.seed,
            r.test.hr(10),
            r.test.ndcg(10),
            r.best_epoch
        )
    };
    let rows = if a.ablations {
        sweep_ablations(&ds, &cfg, &seeds, log)?
    } else if let Some(p) = &a.grid {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        let rows = sweep_grid(&ds, &cfg, &parse_grid(&text)?, &seeds, log)?;
        if let Some(best) = best_by_validation(&rows) {
            eprintln!("best on validation NDCG@10 ({:.4}): {}", best.valid_ndcg10, best.value);
        }
        rows
    } else {
        let param = a.param.unwrap_or_default();
        let key = match param.as_str() {
            "lambda1" => "model.lambda1".to_string(),
            _ if param.contains('.') => param,
            _ => return Err(Error::Config(format!("unknown sweep parameter '{param}'"))),
        };
        if a.values.is_empty() {
            return Err(Error::Config("--values is required with --param".into()));
        }
        sweep_param(&ds, &cfg, &key, &a.values, &seeds, log)?
    };
    let table = format_table(&rows);
    print!("{table}");
    if let Some(p) = &a.out {
        write(p, &table)?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<bool> {
    let ds = read_prepared(&a.data)?;
    let cfg = load_config(Some(&a.data), &a.overrides)?;
    let grid: Vec<(usize, usize)> = if a.grid {
        (1..=3).flat_map(|l| (1..=3).map(move |k| (l, k))).collect()
    } else {
        vec![(a.level, a.k)]
    };
    println!("level\tB\tK\tL_g\t|E|\tproducts\tsparse_madds\tpredicted\tratio\tnode_bytes\tpredicted_bytes\tpeak_bytes\tseconds");
    let mut reports = Vec::new();
    let mut ok = true;
    for (level, k) in grid {
        let r = bench(&ds, &cfg.model, level, k, a.layers)?;
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}\t{}\t{}\t{}\t{:.3}",
            r.level,
            r.subbands,
            r.cheby_order,
            r.layers,
            r.num_edges,
            r.sparse_products,
            r.sparse_madds,
            r.predicted_madds,
            r.madd_ratio(),
            r.node_buffer_bytes,
            r.predicted_node_bytes,
            r.peak_value_bytes,
            r.seconds
        );
        ok &= r.within_factor_two();
        reports.push(r);
    }
    let linear = check_linearity(&reports);
    match &linear {
        Ok(()) => println!("sparse work linear in B and K: yes"),
        Err(e) => println!("sparse work linear in B and K: no ({e})"),
    }
    println!("measured within factor 2 of B*L_g*K*|E|*d: {}", if ok { "yes" } else { "no" });
    Ok(ok && linear.is_ok())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Prepare(a) => cmd_prepare(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Inspect(a) => cmd_inspect(a).map(|_| true),
        Command::Sweep(a) => cmd_sweep(a).map(|_| true),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
