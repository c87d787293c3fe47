use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tokentrack::checkpoint::{Checkpoint, ScalarWidth};
use tokentrack::config::KeyValues;
use tokentrack::data::io::{list_sequences, read_sequence, write_suite};
use tokentrack::data::SuiteSpec;
use tokentrack::eval::evaluate_ope;
use tokentrack::model::AttentionVariant;
use tokentrack::tracker::{track_sequence, TrackResult, TrackerOptions};
use tokentrack::train::{train_one_shot, TrainConfig};
use tokentrack::{verify, Error, Model, ModelConfig, Result, Task};

#[derive(Parser)]
#[command(name = "tokentrack", version, about = "Temporal-token visual object tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence suite to PNG frames plus manifests.
    GenerateData {
        /// key=value suite description
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one checkpoint over one or more tasks.
    Train(TrainArgs),
    /// Track a sequence (or every sequence under a suite root).
    Track(TrackArgs),
    /// Score trackfiles against ground truth.
    Eval {
        /// Trackfile, or a directory of `<sequence>.txt` files
        #[arg(long)]
        tracks: PathBuf,
        /// Manifest, sequence directory, or suite root
        #[arg(long)]
        seqs: PathBuf,
        /// Write the JSON report here
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the success curve as CSV here
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Finite-difference gradient check of every parameter family.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Compare the attention layer against a naive dense reference.
    OracleAttn {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Count multiplies of one encoder layer, concat vs separate.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Only report this variant
        #[arg(long)]
        attn: Option<Attn>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Attn {
    Concat,
    Separate,
}

impl From<Attn> for AttentionVariant {
    fn from(a: Attn) -> Self {
        match a {
            Attn::Concat => AttentionVariant::Concat,
            Attn::Separate => AttentionVariant::Separate,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Rgb,
    Rgbd,
    Rgbt,
    Rgbe,
}

impl From<Mode> for Task {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Rgb => Task::Rgb,
            Mode::Rgbd => Task::Rgbd,
            Mode::Rgbt => Task::Rgbt,
            Mode::Rgbe => Task::Rgbe,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Prec {
    F32,
    F64,
}

#[derive(Args)]
struct TrainArgs {
    /// Suite roots or sequence directories (repeatable)
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Comma-separated task list, e.g. rgbd,rgbt,rgbe
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// key=value file with training and model keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    attn: Option<Attn>,
    /// Print a progress line every N steps (0 = silent)
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Manifest, sequence directory, or suite root
    #[arg(long)]
    seq: PathBuf,
    #[arg(long, value_enum, default_value = "rgb")]
    mode: Mode,
    /// Trackfile, or a directory when `--seq` is a suite root
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "on")]
    token_prop: OnOff,
    #[arg(long)]
    cosine_window: bool,
    #[arg(long, default_value_t = 16)]
    memory: usize,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Prec,
    #[arg(long)]
    attn: Option<Attn>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn model_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::parse(&read_text(p)?),
        None => Ok(ModelConfig::default()),
    }
}

fn seq_name(dir: &Path) -> String {
    let dir = if dir.is_file() { dir.parent().unwrap_or(dir) } else { dir };
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "sequence".into())
}

fn generate(spec: &Path, out: &Path, seed: u64) -> Result<()> {
    let suite = SuiteSpec::parse(&read_text(spec)?)?;
    let seqs = suite.generate(seed)?;
    write_suite(&seqs, out)?;
    println!("wrote {} sequences to {}", seqs.len(), out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut kv = match &a.config {
        Some(p) => KeyValues::parse(&read_text(p)?)?,
        None => KeyValues::default(),
    };
    if let Some(t) = &a.tasks {
        kv.set("tasks", t);
    }
    if let Some(s) = a.seed {
        kv.set("seed", s);
    }
    if let Some(v) = a.attn {
        kv.set("attention", AttentionVariant::from(v));
    }
    let cfg = TrainConfig::take_from(&mut kv)?;
    kv.finish()?;

    let mut seqs = Vec::new();
    for root in &a.data {
        for dir in list_sequences(root)? {
            seqs.push(read_sequence(&dir)?);
        }
    }
    let start = std::time::Instant::now();
    let out = train_one_shot(&cfg, &seqs, |l| {
        if a.log_every > 0 && (l.step % a.log_every == 0 || l.step + 1 == l.total_steps) {
            eprintln!(
                "step {}/{} loss {:.4} cls {:.4} l1 {:.4} giou {:.4} |g| {:.3} ({:.0?})",
                l.step + 1,
                l.total_steps,
                l.loss,
                l.cls,
                l.l1,
                l.giou,
                l.grad_norm,
                start.elapsed()
            );
        }
    })?;
    let ckpt = out.model.to_checkpoint(ScalarWidth::F64, Some(&cfg.train_key_values()));
    ckpt.save(&a.out)?;
    println!("saved {} ({} parameters)", a.out.display(), out.model.store.scalar_count());
    Ok(())
}

fn track(a: TrackArgs) -> Result<()> {
    let mut model = Model::from_checkpoint(&Checkpoint::load(&a.ckpt)?)?;
    if let Some(v) = a.attn {
        model.config.attention = v.into();
    }
    let task = Task::from(a.mode);
    let opts = TrackerOptions {
        memory_capacity: a.memory,
        token_propagation: matches!(a.token_prop, OnOff::On),
        cosine_window: a.cosine_window,
    };
    let dirs = list_sequences(&a.seq)?;
    let single = dirs.len() == 1 && a.seq.is_file() || tokentrack::data::io::manifest_path(&a.seq).is_file();
    for dir in &dirs {
        let seq = read_sequence(dir)?;
        let aux = task.aux();
        if aux.is_some() && seq.aux != aux {
            return Err(Error::Track(format!(
                "mode {task} needs a {} stream but {} has {}",
                aux.map(|m| m.to_string()).unwrap_or_default(),
                dir.display(),
                seq.aux.map(|m| m.to_string()).unwrap_or_else(|| "none".into())
            )));
        }
        let init = *seq.boxes.first().ok_or_else(|| Error::Track("sequence has no frames".into()))?;
        let r = match a.precision {
            Prec::F32 => track_sequence::<f32>(&model, task, &opts, &seq.frames, aux, init)?,
            Prec::F64 => track_sequence::<f64>(&model, task, &opts, &seq.frames, aux, init)?,
        };
        let out = if single { a.out.clone() } else { a.out.join(format!("{}.txt", seq_name(dir))) };
        write_text(&out, &r.to_text())?;
    }
    println!("tracked {} sequence(s)", dirs.len());
    Ok(())
}

fn eval(tracks: &Path, seqs: &Path, report: Option<&Path>, curve: Option<&Path>) -> Result<()> {
    let dirs = list_sequences(seqs)?;
    let mut runs = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let seq = read_sequence(dir)?;
        let name = seq_name(dir);
        let file = if tracks.is_dir() { tracks.join(format!("{name}.txt")) } else { tracks.to_path_buf() };
        let pred = TrackResult::parse(&read_text(&file)?)?;
        runs.push((name, pred.boxes, seq.boxes));
    }
    let rep = evaluate_ope(&runs)?;
    if let Some(p) = report {
        write_text(p, &rep.to_json()?)?;
    }
    if let Some(p) = curve {
        write_text(p, &rep.curve_csv())?;
    }
    println!(
        "AUC={:.3} P={:.3} Pnorm={:.3} mIoU={:.3} sequences={}",
        rep.auc,
        rep.precision,
        rep.norm_precision,
        rep.mean_iou,
        rep.sequences.len()
    );
    Ok(())
}

fn gradcheck(config: Option<&Path>, seed: u64, samples: usize, eps: f64, tol: f64) -> Result<()> {
    let cfg = model_config(config)?;
    let checks = verify::gradcheck_model(&cfg, seed, samples, eps)?;
    let mut worst = 0.0f64;
    for c in &checks {
        println!(
            "{:<11} coords={:<4} max_rel_err={:.3e}",
            c.family, c.report.coordinates.len(), c.report.max_rel_error
        );
        worst = worst.max(c.report.max_rel_error);
    }
    if !(worst < tol) {
        return Err(Error::Check(format!("max relative error {worst:.3e} exceeds {tol:e}")));
    }
    println!("ok max_rel_err={worst:.3e}");
    Ok(())
}

fn oracle(cases: usize, max_len: usize, seed: u64, tol: f64) -> Result<()> {
    let s = verify::attention_oracle_suite(cases, max_len, seed)?;
    println!(
        "cases={} concat_max_diff={:.3e} separate_max_diff={:.3e} reference_subpass_max_diff={:.3e}",
        s.cases, s.max_concat, s.max_separate, s.max_subpass
    );
    let worst = s.max_concat.max(s.max_separate).max(s.max_subpass);
    if !(worst <= tol) {
        return Err(Error::Check(format!("attention differs from the dense reference by {worst:.3e}")));
    }
    Ok(())
}

fn bench(config: Option<&Path>, only: Option<Attn>, seed: u64) -> Result<()> {
    let cfg = model_config(config)?;
    let model = Model::new(cfg.clone())?;
    let seg = model.segments();
    let variants = match only {
        Some(v) => vec![AttentionVariant::from(v)],
        None => vec![AttentionVariant::Concat, AttentionVariant::Separate],
    };
    let mut counts = Vec::new();
    for v in variants {
        let measured = verify::measured_layer_multiplies(&model, v, seed)?;
        let closed = verify::layer_multiplies(cfg.dim, cfg.mlp_ratio, seg, v);
        println!(
            "{v:<8} refs={} search={} token={} measured={measured} closed_form={closed}",
            seg.refs, seg.search, seg.token
        );
        if measured != closed {
            return Err(Error::Check(format!("{v}: counted {measured} multiplies, expected {closed}")));
        }
        counts.push(measured);
    }
    if let [c, s] = counts[..] {
        println!("separate/concat={:.4}", s as f64 / c as f64);
        if s >= c {
            return Err(Error::Check("separated attention is not cheaper than concatenated".into()));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { spec, out, seed } => generate(&spec, &out, seed),
        Command::Train(a) => train(a),
        Command::Track(a) => track(a),
        Command::Eval { tracks, seqs, report, curve } => eval(&tracks, &seqs, report.as_deref(), curve.as_deref()),
        Command::Gradcheck { config, seed, samples, eps, tol } => gradcheck(config.as_deref(), seed, samples, eps, tol),
        Command::OracleAttn { cases, max_len, seed, tol } => oracle(cases, max_len, seed, tol),
        Command::Bench { config, attn, seed } => bench(config.as_deref(), attn, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
