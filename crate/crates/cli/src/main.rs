use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowid::detect::{detect, write_detections_jsonl, WindowSpec};
use flowid::eval::evaluate;
use flowid::ingest::{
    generate_synthetic_flows, parse_capture, read_flows_jsonl, write_flows_jsonl, FlowRecord, ParseLimits, SynthSpec,
};
use flowid::trainer::{fit, stratified_split, Dataset, LabelSet, TrainConfig};
use flowid::{AugmentationPipeline, ContrastConfig, Error, Model, Rng};

#[derive(Parser, Debug)]
#[command(name = "flowid", version, about = "Flow hypergraph traffic classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Reassemble flows from a capture (or re-truncate a flow file) into JSONL.
    Extract(ExtractArgs),
    /// Train a model and write a checkpoint plus training history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled flow file.
    Eval(EvalArgs),
    /// Classify the flows of a capture in tumbling time windows.
    Detect(DetectArgs),
    /// Train and evaluate over a grid of one setting; writes CSV.
    Sweep(SweepArgs),
    /// Write a synthetic labeled flow file.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long, conflicts_with = "flows", required_unless_present = "flows")]
    pcap: Option<PathBuf>,
    #[arg(long)]
    flows: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Packets kept per flow.
    #[arg(long, default_value_t = 40)]
    n: usize,
    /// Payload bytes kept per packet.
    #[arg(long, default_value_t = 16)]
    m: usize,
    /// Idle timeout in seconds that splits a flow.
    #[arg(long, default_value_t = 64.0)]
    timeout: f64,
    /// Class index attached to every extracted flow.
    #[arg(long)]
    label: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, alias = "lr", default_value_t = 0.002)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1e-3)]
    weight_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    omega_n: f64,
    #[arg(long, default_value_t = 1.0)]
    omega_g: f64,
    #[arg(long, default_value_t = 0.5)]
    tau_n: f64,
    #[arg(long, default_value_t = 0.5)]
    tau_g: f64,
    /// Added to row norms before cosine similarity; 0 rejects zero rows.
    #[arg(long, default_value_t = 0.0)]
    cosine_eps: f64,
    /// First view pipeline, e.g. `ed:0.4` or `nf:0.2,ew:0.4`.
    #[arg(long, default_value = "ew:0.4")]
    aug1: AugmentationPipeline,
    #[arg(long, default_value = "ew:0.4")]
    aug2: AugmentationPipeline,
    /// Hypergraph convolution layers.
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 512)]
    extractor_dim: usize,
    #[arg(long, default_value_t = 40)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    m: usize,
    /// Neighbours per hyperedge.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Leave a flow out of its own hyperedge.
    #[arg(long)]
    no_self: bool,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[arg(long, default_value_t = 30)]
    patience: usize,
    #[arg(long)]
    freeze_extractor: bool,
    /// Fraction of training labels used, drawn per class.
    #[arg(long, default_value_t = 1.0)]
    label_fraction: f64,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            omega_n: self.omega_n,
            omega_g: self.omega_g,
            contrast: ContrastConfig {
                tau_n: self.tau_n,
                tau_g: self.tau_g,
                cosine_eps: self.cosine_eps,
            },
            aug1: self.aug1.clone(),
            aug2: self.aug2.clone(),
            depth: self.depth,
            hidden: self.hidden,
            extractor_dim: self.extractor_dim,
            n: self.n,
            m: self.m,
            k: self.k,
            include_self: !self.no_self,
            dropout: self.dropout,
            seed: self.seed,
            patience: self.patience,
            freeze_extractor: self.freeze_extractor,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    flows: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch losses and validation scores; defaults to `<out>.history.json`.
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    flows: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long, conflicts_with = "flows", required_unless_present = "flows")]
    pcap: Option<PathBuf>,
    #[arg(long)]
    flows: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    /// Window length in seconds.
    #[arg(long, default_value_t = 60.0)]
    window: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64.0)]
    timeout: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SweepParam {
    N,
    M,
    K,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_enum)]
    param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    /// Training flows; synthetic data is generated when absent.
    #[arg(long, requires_all = ["val", "test"])]
    flows: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: SynthFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Preset {
    Separable,
    Overlapping,
}

#[derive(Args, Debug, Clone)]
struct SynthFlags {
    #[arg(long, value_enum, default_value = "separable")]
    preset: Preset,
    #[arg(long, default_value_t = 250)]
    per_class: usize,
    /// Number of classes (overlapping preset only).
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// How much the class laws coincide, in [0, 1] (overlapping preset only).
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

impl SynthFlags {
    fn spec(&self) -> SynthSpec {
        match self.preset {
            Preset::Separable => SynthSpec::separable(self.per_class, self.data_seed),
            Preset::Overlapping => SynthSpec::overlapping(self.classes, self.per_class, self.overlap, self.data_seed),
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: SynthFlags,
    /// Also write `<stem>.train/.val/.test.jsonl` with these fractions.
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Extract(a) => cmd_extract(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 1,
        Error::Parse { .. } | Error::Format(_) | Error::Checkpoint { .. } => 2,
        Error::Config(_) | Error::Shape(_) | Error::DegenerateEmbedding { .. } | Error::NonFinite(_) => 3,
    }
}

fn with_path(path: &Path, e: io::Error) -> Error {
    Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> flowid::Result<File> {
    File::open(path).map_err(|e| with_path(path, e))
}

fn create(path: &Path) -> flowid::Result<File> {
    File::create(path).map_err(|e| with_path(path, e))
}

fn load_model(path: &Path) -> flowid::Result<Model> {
    Model::load(path).map_err(|e| match e {
        Error::Io(e) => with_path(path, e),
        other => other,
    })
}

fn read_flows(path: &Path) -> flowid::Result<Vec<FlowRecord>> {
    let (flows, stats) = read_flows_jsonl(BufReader::new(open(path)?))?;
    if stats.empty_dropped > 0 {
        log::warn!("{}: dropped {} flows without packets", path.display(), stats.empty_dropped);
    }
    Ok(flows)
}

fn write_flows(path: &Path, flows: &[FlowRecord]) -> flowid::Result<()> {
    write_flows_jsonl(BufWriter::new(create(path)?), flows)
}

fn load_flows(pcap: Option<&Path>, flows: Option<&Path>, limits: ParseLimits) -> flowid::Result<Vec<FlowRecord>> {
    match (pcap, flows) {
        (Some(p), _) => {
            let parsed = parse_capture(p, &limits)?;
            let s = parsed.stats;
            println!(
                "flows {} packets {} skipped_frames {} truncated_records {}",
                parsed.flows.len(),
                s.packets,
                s.skipped_frames,
                s.truncated_records
            );
            Ok(parsed.flows)
        }
        (None, Some(f)) => {
            let flows = read_flows(f)?;
            let flows: Vec<FlowRecord> = flows.iter().map(|f| f.truncated(limits.n, limits.m)).collect();
            let packets: usize = flows.iter().map(|f| f.packets.len()).sum();
            println!("flows {} packets {packets}", flows.len());
            Ok(flows)
        }
        (None, None) => Err(Error::Config("either --pcap or --flows is required".into())),
    }
}

fn cmd_extract(a: ExtractArgs) -> flowid::Result<()> {
    let limits = ParseLimits {
        n: a.n,
        m: a.m,
        idle_timeout: a.timeout,
    };
    let mut flows = load_flows(a.pcap.as_deref(), a.flows.as_deref(), limits)?;
    if let Some(label) = a.label {
        flows.iter_mut().for_each(|f| f.label = Some(label));
    }
    write_flows(&a.out, &flows)
}

fn dataset(flows: &[FlowRecord], cfg: &TrainConfig) -> flowid::Result<Dataset> {
    Dataset::from_flows(flows, cfg.n, cfg.m)
}

/// Trains on `train`, selecting on `val`; returns the fit and the label set
/// actually used.
fn train_model(
    train: &[FlowRecord],
    val: Option<&[FlowRecord]>,
    flags: &TrainFlags,
    cfg: &TrainConfig,
) -> flowid::Result<flowid::FitResult> {
    let mut train = dataset(train, cfg)?;
    if flags.label_fraction < 1.0 {
        let mut rng = Rng::new(cfg.seed ^ 0x5eed_1abe);
        train.labels = train.labels.subsample(flags.label_fraction, &mut rng)?;
    }
    let val = val.map(|v| dataset(v, cfg)).transpose()?;
    fit(&train, val.as_ref(), cfg)
}

fn cmd_train(a: TrainArgs) -> flowid::Result<()> {
    let cfg = a.train.config();
    cfg.validate()?;
    println!("{}", cfg.echo());
    let train = read_flows(&a.flows)?;
    let val = a.val.as_deref().map(read_flows).transpose()?;
    let result = train_model(&train, val.as_deref(), &a.train, &cfg)?;
    result.model.save(&a.out)?;
    let history = a.history.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".history.json");
        PathBuf::from(p)
    });
    let doc = serde_json::json!({
        "config": cfg,
        "best_epoch": result.best_epoch,
        "best_val_macro_f1": result.best_val_macro_f1,
        "epochs": result.history,
    });
    let mut out = BufWriter::new(create(&history)?);
    serde_json::to_writer_pretty(&mut out, &doc)?;
    out.write_all(b"\n")?;
    out.flush()?;
    let last = result.history.last().expect("at least one epoch");
    println!(
        "trained {} epochs; best epoch {} val macro-F1 {}; final loss {:.6}",
        result.history.len(),
        result.best_epoch,
        result.best_val_macro_f1.map_or("n/a".to_string(), |f| format!("{f:.4}")),
        last.losses.total
    );
    Ok(())
}

fn labels_of(flows: &[FlowRecord]) -> flowid::Result<Vec<usize>> {
    Ok(LabelSet::from_flows(flows)?.y)
}

fn evaluate_flows(model: &Model, flows: &[FlowRecord]) -> flowid::Result<flowid::MetricsReport> {
    let truth = labels_of(flows)?;
    let pred = model.predict_flows(flows)?.argmax_rows();
    let classes = model.classes().max(truth.iter().max().map_or(0, |c| c + 1));
    evaluate(&pred, &truth, classes)
}

fn cmd_eval(a: EvalArgs) -> flowid::Result<()> {
    let model = load_model(&a.model)?;
    let flows = read_flows(&a.flows)?;
    let report = evaluate_flows(&model, &flows)?;
    print!("{}", report.to_text(None));
    if let Some(path) = a.report {
        std::fs::write(&path, report.to_json()? + "\n").map_err(|e| with_path(&path, e))?;
    }
    Ok(())
}

fn cmd_detect(a: DetectArgs) -> flowid::Result<()> {
    let spec = WindowSpec::new(a.window)?;
    let model = load_model(&a.model)?;
    let limits = ParseLimits {
        n: model.config.extractor.n,
        m: model.config.extractor.m,
        idle_timeout: a.timeout,
    };
    let flows = load_flows(a.pcap.as_deref(), a.flows.as_deref(), limits)?;
    let records = detect(&model, &flows, &spec)?;
    let skipped = records
        .iter()
        .filter(|r| matches!(r, flowid::DetectionRecord::Skipped(_)))
        .count();
    write_detections_jsonl(BufWriter::new(create(&a.out)?), &records)?;
    println!("detections {} skipped_windows {skipped}", records.len() - skipped);
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> flowid::Result<()> {
    let (train, val, test) = match (&a.flows, &a.val, &a.test) {
        (Some(t), Some(v), Some(s)) => (read_flows(t)?, read_flows(v)?, read_flows(s)?),
        _ => {
            let flows = generate_synthetic_flows(&a.data.spec())?;
            let [t, v, s] = stratified_split(&flows, [0.6, 0.2, 0.2], &mut Rng::new(a.data.data_seed))?;
            (t, v, s)
        }
    };
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    let name = match a.param {
        SweepParam::N => "n",
        SweepParam::M => "m",
        SweepParam::K => "k",
    };
    writeln!(out, "param,value,seed,macro_f1,accuracy,macro_precision,macro_recall,epochs,best_epoch")?;
    for &v in &a.values {
        let mut flags = a.train.clone();
        match a.param {
            SweepParam::N => flags.n = v,
            SweepParam::M => flags.m = v,
            SweepParam::K => flags.k = v,
        }
        let cfg = flags.config();
        cfg.validate()?;
        let result = train_model(&train, Some(&val), &flags, &cfg)?;
        let report = evaluate_flows(&result.model, &test)?;
        writeln!(
            out,
            "{name},{v},{},{},{},{},{},{},{}",
            cfg.seed,
            report.macro_f1,
            report.accuracy,
            report.macro_precision,
            report.macro_recall,
            result.history.len(),
            result.best_epoch
        )?;
        out.flush()?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> flowid::Result<()> {
    let flows = generate_synthetic_flows(&a.data.spec())?;
    write_flows(&a.out, &flows)?;
    println!("flows {}", flows.len());
    if let Some(fr) = a.split {
        let [train, val, test] = fr[..] else {
            return Err(Error::Config(format!("--split takes three fractions, got {}", fr.len())));
        };
        let parts = stratified_split(&flows, [train, val, test], &mut Rng::new(a.data.data_seed))?;
        let stem = a.out.with_extension("");
        for (suffix, part) in ["train", "val", "test"].iter().zip(&parts) {
            let mut p = stem.clone().into_os_string();
            p.push(format!(".{suffix}.jsonl"));
            write_flows(Path::new(&p), part)?;
            println!("{suffix} {}", part.len());
        }
    }
    Ok(())
}
