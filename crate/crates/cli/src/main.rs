use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vads::adversarial::{Fusion, OptimizerKind};
use vads::checks::{gradient_suite, SuiteOptions, GRAD_TOLERANCE};
use vads::data::{
    generate_dataset, held_out, load_dataset, save_dataset, CrossViewDataset, GenerationParams,
};
use vads::eval::{
    evaluate_model, fusion_ablation, variable_length_ablation, CmcCurve, DEFAULT_ABLATION_LENGTHS,
};
use vads::training::{
    default_lambda_grid, load_checkpoint, model_config_for, report_csv, save_checkpoint,
    select_lambda, EvalSet, TrainConfig, Trainer, HELD_OUT_IDENTITIES,
};
use vads::vrnn::FrameSequence;
use vads::Error;

const CHECKPOINT_FILE: &str = "checkpoint.vack";
const REPORT_FILE: &str = "train_report.csv";

/// Cross-view sequence embeddings: data generation, training, evaluation.
///
/// Training settings resolve as: command-line flag, then `--config` file
/// (flat `key=value` lines, `#` comments), then built-in defaults.
///
/// Exit codes: 0 success, 1 check failure, 2 usage error, 3 I/O or file
/// format error.
#[derive(Parser)]
#[command(name = "vads", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-camera dataset.
    GenData(GenDataArgs),
    /// Train a model; writes checkpoint.vack and train_report.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint; writes metrics.csv and cmc.csv.
    Eval(EvalArgs),
    /// Sequence-length grid or early/late fusion comparison.
    Ablate(AblateArgs),
    /// Choose λ by reverse validation; writes lambda_risk.csv.
    SelectLambda(SelectLambdaArgs),
    /// Finite-difference check of every analytic gradient.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    identities: usize,
    /// Frame dimension.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    min_len: usize,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
    /// Strength of the camera transforms; 0 makes the views identical.
    #[arg(long, default_value_t = GenerationParams::default().view_gap)]
    view_gap: f64,
    #[arg(long, default_value_t = GenerationParams::default().noise_std)]
    noise: f64,
    /// First identity id; use disjoint ranges for held-out people.
    #[arg(long, default_value_t = 0)]
    first_id: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Training settings. Unset flags fall back to the config file, then to
/// the defaults shown.
#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// Flat key=value file with any of: epochs, lr, patience, batch_size,
    /// lambda, fusion, seed, optimizer, train_fraction.
    #[arg(long)]
    config: Option<PathBuf>,
    /// [default: 50]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Epochs without validation improvement before stopping [default: 10].
    #[arg(long)]
    patience: Option<usize>,
    /// Identity pairs per update [default: 8].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adversarial weight λ [default: 0.6].
    #[arg(long)]
    lambda: Option<f64>,
    /// early | late [default: early].
    #[arg(long)]
    fusion: Option<Fusion>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// adam | sgd [default: adam].
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// Fraction of identities used for training [default: 0.9].
    #[arg(long)]
    train_fraction: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    /// Continue from a checkpoint; training flags are taken from it.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many epochs in this invocation (the checkpoint can be
    /// resumed).
    #[arg(long)]
    halt_after: Option<usize>,
}

#[derive(Args)]
struct TestSetArgs {
    /// Test dataset; defaults to held-out identities regenerated from the
    /// training dataset's seed and cameras.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = HELD_OUT_IDENTITIES)]
    test_identities: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training dataset the checkpoint belongs to.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    test: TestSetArgs,
    #[arg(long)]
    out_dir: PathBuf,
    /// Use only the first N probe frames.
    #[arg(long)]
    probe_len: Option<usize>,
    /// Use only the first N gallery frames.
    #[arg(long)]
    gallery_len: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateMode {
    Length,
    Fusion,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    mode: AblateMode,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    test: TestSetArgs,
    #[arg(long)]
    out_dir: PathBuf,
    /// Trained model (length mode).
    #[arg(long, required_if_eq("mode", "length"))]
    checkpoint: Option<PathBuf>,
    /// Comma-separated seeds (fusion mode).
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct SelectLambdaArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated candidates [default: 10^(-2+k/4), k = 0..8].
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_sign_error: bool,
}

enum Failure {
    Usage(String),
    Io(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) => Failure::Usage(e.to_string()),
            Error::Io(_)
            | Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated
            | Error::ChecksumMismatch { .. }
            | Error::Format(_)
            | Error::StateMismatch(_) => Failure::Io(e.to_string()),
            _ => Failure::Check(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::SelectLambda(a) => cmd_select_lambda(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn parse_config_file(path: &Path) -> std::result::Result<BTreeMap<String, String>, Failure> {
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Failure::Usage(format!("{}:{}: expected key=value", path.display(), n + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, Failure> {
    v.parse()
        .map_err(|_| Failure::Usage(format!("bad value for {key}: {v:?}")))
}

impl TrainFlags {
    fn resolve(&self) -> std::result::Result<TrainConfig, Failure> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            for (k, v) in parse_config_file(path)? {
                match k.as_str() {
                    "epochs" => cfg.epochs = parse_value(&k, &v)?,
                    "lr" | "learning_rate" => cfg.learning_rate = parse_value(&k, &v)?,
                    "patience" => cfg.patience = parse_value(&k, &v)?,
                    "batch_size" => cfg.batch_size = parse_value(&k, &v)?,
                    "lambda" => cfg.lambda = parse_value(&k, &v)?,
                    "fusion" => cfg.fusion = parse_value(&k, &v)?,
                    "seed" => cfg.seed = parse_value(&k, &v)?,
                    "optimizer" => cfg.optimizer = parse_value(&k, &v)?,
                    "train_fraction" => cfg.train_fraction = parse_value(&k, &v)?,
                    _ => return Err(Failure::Usage(format!("unknown config key {k:?}"))),
                }
            }
        }
        macro_rules! set {
            ($($f:ident => $t:ident),*) => {$(if let Some(v) = self.$f { cfg.$t = v; })*};
        }
        set!(epochs => epochs, lr => learning_rate, patience => patience, batch_size => batch_size,
             lambda => lambda, fusion => fusion, seed => seed, optimizer => optimizer,
             train_fraction => train_fraction);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> std::result::Result<PathBuf, Failure> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn test_set(args: &TestSetArgs, train: &CrossViewDataset) -> std::result::Result<EvalSet, Failure> {
    let ds = match &args.test {
        Some(p) => load_dataset(p)?,
        None => held_out(train, args.test_identities)?,
    };
    Ok(EvalSet::from_dataset(&ds))
}

fn cmd_gen_data(a: GenDataArgs) -> CmdResult {
    let params = GenerationParams {
        identities: a.identities,
        min_len: a.min_len,
        max_len: a.max_len,
        frame_dim: a.dim,
        view_gap: a.view_gap,
        noise_std: a.noise,
        first_id: a.first_id,
    };
    let ds = generate_dataset(&params, a.seed)?;
    save_dataset(&ds, &a.out)?;
    let lens: Vec<usize> = ds
        .probe
        .iter()
        .chain(&ds.gallery)
        .map(FrameSequence::len)
        .collect();
    let mean = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
    println!(
        "wrote {}: L={} D={} length min={} mean={:.1} max={}",
        a.out.display(),
        ds.len(),
        ds.frame_dim(),
        lens.iter().min().unwrap_or(&0),
        mean,
        lens.iter().max().unwrap_or(&0)
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let ds = load_dataset(&a.data)?;
    let monitor = EvalSet::from_dataset(&held_out(&ds, HELD_OUT_IDENTITIES)?);
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(&ds, &load_checkpoint(path)?)?,
        None => Trainer::new(&ds, model_config_for(&ds), a.train.resolve()?)?,
    }
    .with_monitor(monitor);
    let mut ran = 0;
    while a.halt_after.is_none_or(|h| ran < h) {
        match trainer.run_epoch()? {
            Some(r) => {
                ran += 1;
                println!(
                    "epoch {:3}  E_train {:.4}  E_val {}  kl {}",
                    r.epoch,
                    r.train.total,
                    r.val
                        .map(|v| format!("{:.4}", v.total))
                        .unwrap_or_else(|| "-".into()),
                    r.monitor
                        .map(|m| format!("{:.4}", m.kl))
                        .unwrap_or_else(|| "-".into())
                );
            }
            None => break,
        }
    }
    fs::create_dir_all(&a.out_dir)?;
    save_checkpoint(&trainer.checkpoint(), a.out_dir.join(CHECKPOINT_FILE))?;
    let report = write_file(&a.out_dir, REPORT_FILE, &report_csv(trainer.records()))?;
    println!(
        "wrote {} and {}",
        a.out_dir.join(CHECKPOINT_FILE).display(),
        report.display()
    );
    Ok(())
}

fn truncate_all(seqs: &[FrameSequence], len: Option<usize>) -> Vec<FrameSequence> {
    match len {
        Some(l) => seqs.iter().map(|s| s.truncated(l)).collect(),
        None => seqs.to_vec(),
    }
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    if a.probe_len == Some(0) || a.gallery_len == Some(0) {
        return Err(Failure::Usage("lengths must be positive".into()));
    }
    let ds = load_dataset(&a.data)?;
    let model = load_checkpoint(&a.checkpoint)?.best_model()?;
    let set = test_set(&a.test, &ds)?;
    let probes = truncate_all(&set.probe, a.probe_len);
    let gallery = truncate_all(&set.gallery, a.gallery_len);
    let e = evaluate_model(&model, &probes, &gallery)?;
    let cmc = CmcCurve::from_ranks(&e.ranks, gallery.len())?;
    let mut metrics = String::from("metric,value\n");
    for r in [1, 5, 10, 20] {
        let _ = writeln!(metrics, "rank{r},{}", cmc.at(r));
        println!("rank-{r:<3} {:.4}", cmc.at(r));
    }
    let _ = writeln!(metrics, "mAP,{}\nkl,{}", e.mean_ap, e.kl);
    println!("mAP     {:.4}\nKL      {:.4}", e.mean_ap, e.kl);
    write_file(&a.out_dir, "metrics.csv", &metrics)?;
    let mut curve = String::from("rank,rate\n");
    for (i, v) in cmc.values().iter().enumerate() {
        let _ = writeln!(curve, "{},{v}", i + 1);
    }
    write_file(&a.out_dir, "cmc.csv", &curve)?;
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CmdResult {
    let ds = load_dataset(&a.data)?;
    let set = test_set(&a.test, &ds)?;
    match a.mode {
        AblateMode::Length => {
            let path = a.checkpoint.as_ref().expect("required by clap");
            let model = load_checkpoint(path)?.best_model()?;
            let grid = variable_length_ablation(
                &model,
                &set.probe,
                &set.gallery,
                &DEFAULT_ABLATION_LENGTHS,
            )?;
            let mut out = String::from(
                "probe_len,gallery_len,rank1,effective_probe_len,effective_gallery_len\n",
            );
            for (i, &pl) in grid.lengths.iter().enumerate() {
                for (j, &gl) in grid.lengths.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{pl},{gl},{},{},{}",
                        grid.rank1[i][j],
                        grid.effective_probe_len[i][j],
                        grid.effective_gallery_len[i][j]
                    );
                }
            }
            let p = write_file(&a.out_dir, "length_grid.csv", &out)?;
            println!("wrote {}", p.display());
        }
        AblateMode::Fusion => {
            if a.seeds.is_empty() {
                return Err(Failure::Usage("no seeds".into()));
            }
            let cfg = a.train.resolve()?;
            let runs = fusion_ablation(&cfg, &ds, &set, &a.seeds)?;
            let mut out = String::from("seed,fusion,epoch,rank1,kl,E_train\n");
            for run in &runs {
                for (m, r) in run.curve.iter().zip(&run.records) {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        run.seed, run.fusion, r.epoch, m.rank1, m.kl, r.train.total
                    );
                }
            }
            for pair in runs.chunks(2) {
                println!(
                    "seed {}: rank-1 early {:.4} late {:.4}",
                    pair[0].seed,
                    pair[0].final_rank1().unwrap_or(f64::NAN),
                    pair[1].final_rank1().unwrap_or(f64::NAN)
                );
            }
            let p = write_file(&a.out_dir, "fusion.csv", &out)?;
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn cmd_select_lambda(a: SelectLambdaArgs) -> CmdResult {
    let ds = load_dataset(&a.data)?;
    let cfg = a.train.resolve()?;
    let grid = a.grid.clone().unwrap_or_else(default_lambda_grid);
    let sel = select_lambda(&ds, &grid, &cfg)?;
    let mut out = String::from("lambda,risk\n");
    for (l, r) in &sel.risks {
        let _ = writeln!(out, "{l},{r}");
        println!("lambda {l:.5}  risk {r:.4}");
    }
    write_file(&a.out_dir, "lambda_risk.csv", &out)?;
    println!("selected lambda {}", sel.best);
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> CmdResult {
    let checks = gradient_suite(SuiteOptions {
        inject_sign_error: a.inject_sign_error,
        seed: a.seed,
    })?;
    let mut failed = Vec::new();
    for c in &checks {
        let status = if c.passes() { "PASS" } else { "FAIL" };
        println!(
            "{status} {}  max rel error {:.3e}  ({} entries)",
            c.name, c.report.max_rel_error, c.report.checked
        );
        for (group, err) in &c.report.per_group {
            println!("    {group:<10} {err:.3e}");
        }
        if !c.passes() {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check above {GRAD_TOLERANCE:e}: {}",
            failed.join(", ")
        )))
    }
}
