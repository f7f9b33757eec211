use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tumorseg::attention::{attention_cost, loglog_slope, AttentionKind};
use tumorseg::checkpoint;
use tumorseg::data::{
    load_label_volume, load_volume, make_folds, preprocess, save_label_volume, save_volume, synth_phantom, LabelVolume,
    VolumeCase,
};
use tumorseg::inference::{
    binarize, ensemble, load_prob3, postprocess_et, predict_case, read_manifest, regions_to_labels, save_prob3,
    write_manifest, ProbDump, WindowConfig, MIN_ET_VOXELS,
};
use tumorseg::io::write_atomic;
use tumorseg::metrics::{aggregate_report, evaluate_case};
use tumorseg::trainer::{train, FoldPlan, TrainConfig};
use tumorseg::unet::{build_network, network_gradcheck, Network, NetworkSpec, Preset, ScaleConfig};
use tumorseg::DType;

const DATA_ENV: &str = "TUMORSEG_DATA_DIR";

#[derive(Parser, Debug)]
#[command(name = "tumorseg", version, about = "Brain tumor region segmentation with 3D U-Net variants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic phantom cases as .vol4 files.
    GenData(GenData),
    /// Train one model per fold (or one on all cases).
    Train(Train),
    /// Predict label maps with one or more checkpoints.
    Infer(Infer),
    /// Average probability dumps listed in a manifest into label maps.
    Ensemble(Ensemble),
    /// Relabel small enhancing-tumor predictions as necrosis.
    Postprocess(Postprocess),
    /// Dice and HD95 of predictions against ground truth.
    Eval(Eval),
    /// Finite-difference check of a full network.
    GradCheck(GradCheck),
    /// Attention MAC counts versus input side length.
    BenchAttention(BenchAttention),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Scale {
    Desk,
    Paper,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Norm {
    Batch,
    Group,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// BL, BL+L, BL+GN, BL+AA or BL+L+GN.
    #[arg(long, default_value = "BL+L+GN")]
    preset: Preset,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
    /// Cubic patch side; overrides the scale default.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    channel_start: Option<usize>,
    #[arg(long)]
    channel_cap: Option<usize>,
    /// Must agree with the preset when given.
    #[arg(long, value_enum)]
    norm: Option<Norm>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<NetworkSpec, CliError> {
        if let Some(n) = self.norm {
            if (n == Norm::Group) != self.preset.group_norm() {
                return Err(CliError::usage(format!(
                    "preset {} uses {} normalization; --norm {} contradicts it",
                    self.preset,
                    if self.preset.group_norm() { "group" } else { "batch" },
                    if n == Norm::Group { "group" } else { "batch" },
                )));
            }
        }
        let mut scale = match self.scale {
            Scale::Desk => ScaleConfig::desk(),
            Scale::Paper => ScaleConfig::paper(),
        };
        if let Some(p) = self.patch {
            scale.patch = p;
        }
        if let Some(l) = self.levels {
            scale.levels = l;
        }
        if let Some(c) = self.channel_start {
            scale.channel_start = c;
        }
        if let Some(c) = self.channel_cap {
            scale.channel_cap = c;
        }
        build_network(self.preset, &scale).map_err(|e| CliError::usage(e.to_string()))
    }
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, default_value_t = 4)]
    cases: usize,
    /// Cubic volume side in voxels (at least 16).
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = DATA_ENV, default_value = "data")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Train {
    #[command(flatten)]
    model: ModelArgs,
    /// Directory of .vol4 cases.
    #[arg(long, env = DATA_ENV, default_value = "data")]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    minibatches: usize,
    /// Defaults to the preset's batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Train only this fold.
    #[arg(long)]
    fold: Option<usize>,
    /// Train a single model on every case.
    #[arg(long, conflicts_with = "fold")]
    no_folds: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// 64-bit arithmetic throughout.
    #[arg(long)]
    f64: bool,
    /// Validate every n epochs (0 disables).
    #[arg(long, default_value_t = 1)]
    validate_every: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug)]
struct Infer {
    /// Checkpoint file; repeat to ensemble several.
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    /// Use every `*/model.ckpt` below this directory.
    #[arg(long)]
    model_dir: Option<PathBuf>,
    /// Directory of .vol4 cases.
    #[arg(long, env = DATA_ENV, default_value = "data")]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    step: f64,
    /// Also write one .prob3 dump per model and case plus a manifest per case.
    #[arg(long)]
    save_probs: bool,
    #[arg(long)]
    f64: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug)]
struct Ensemble {
    /// Manifest file; repeat for several cases.
    #[arg(long = "manifest", required = true)]
    manifests: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Postprocess {
    /// A label .vol4 file or a directory of them.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = MIN_ET_VOXELS)]
    min_et: usize,
}

#[derive(Args, Debug)]
struct Eval {
    /// Directory of predicted label .vol4 files.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth .vol4 files.
    #[arg(long, env = DATA_ENV, default_value = "data")]
    gt: PathBuf,
    /// Writes <out>.txt and <out>.csv when given.
    #[arg(long)]
    out: Option<PathBuf>,
    /// HD95 when exactly one mask is empty; defaults to the image diagonal.
    #[arg(long)]
    sentinel: Option<f64>,
}

#[derive(Args, Debug)]
struct GradCheck {
    #[arg(long, default_value = "BL+AA")]
    preset: Preset,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Coordinates sampled per tensor.
    #[arg(long, default_value_t = 3)]
    per_tensor: usize,
    #[arg(long, default_value_t = 5)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct BenchAttention {
    #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
    sides: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(tumorseg::Error),
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

impl From<tumorseg::Error> for CliError {
    fn from(e: tumorseg::Error) -> Self {
        match e {
            tumorseg::Error::Config(m) => CliError::Usage(m),
            e => CliError::Run(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

fn print_config(command: &str, items: &[(&str, String)]) {
    println!("[config] command={command}");
    for (k, v) in items {
        println!("[config] {k}={v}");
    }
}

fn vol4_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if dir.is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Run(tumorseg::Error::Format(format!("cannot read {}: {e}", dir.display()))))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vol4"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Run(tumorseg::Error::Empty(format!("no .vol4 files in {}", dir.display()))));
    }
    Ok(files)
}

fn load_cases(dir: &Path) -> Result<Vec<VolumeCase>, CliError> {
    vol4_files(dir)?.iter().map(|p| load_volume(p).map_err(CliError::from)).collect()
}

fn gen_data(a: &GenData) -> Result<(), CliError> {
    let out = a.out.clone();
    print_config(
        "gen-data",
        &[
            ("cases", a.cases.to_string()),
            ("size", a.size.to_string()),
            ("seed", a.seed.to_string()),
            ("out", out.display().to_string()),
        ],
    );
    if a.cases == 0 {
        return Err(CliError::usage("--cases must be at least 1"));
    }
    for i in 0..a.cases {
        let case_seed = a.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let mut case = synth_phantom(case_seed, [a.size; 3])?;
        case.case_id = format!("case_{i:03}");
        let path = out.join(format!("{}.vol4", case.case_id));
        save_volume(&case, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run_train(a: &Train) -> Result<(), CliError> {
    let spec = a.model.resolve()?;
    let data = a.data.clone();
    let batch = a.batch_size.unwrap_or(spec.preset.batch_size());
    let mut cfg = TrainConfig::desk(a.epochs, a.minibatches, batch, a.seed);
    cfg.dtype = if a.f64 { DType::F64 } else { DType::F32 };
    cfg.validate_every = a.validate_every;
    cfg.window.workers = a.workers;
    print_config(
        "train",
        &[
            ("preset", spec.preset.to_string()),
            ("patch", format!("{:?}", spec.patch_size)),
            ("levels", spec.levels.to_string()),
            ("encoder_channels", format!("{:?}", spec.encoder_channels)),
            ("decoder_channels", format!("{:?}", spec.decoder_channels)),
            ("norm", format!("{:?}", spec.norm)),
            ("attention", format!("{:?}", spec.attention)),
            ("deep_supervision_levels", format!("{:?}", spec.deep_supervision_levels)),
            ("parameters", spec.parameter_count()?.to_string()),
            ("data", data.display().to_string()),
            ("out", a.out.display().to_string()),
            ("epochs", cfg.epochs.to_string()),
            ("minibatches", cfg.minibatches_per_epoch.to_string()),
            ("batch_size", cfg.batch_size.to_string()),
            ("initial_lr", cfg.initial_lr.to_string()),
            ("momentum", cfg.momentum.to_string()),
            ("clip_norm", format!("{:?}", cfg.clip_norm)),
            ("foreground_prob", cfg.foreground_prob.to_string()),
            ("augment", format!("{:?}", cfg.augment)),
            ("folds", if a.no_folds { "none".into() } else { a.folds.to_string() }),
            ("fold", format!("{:?}", a.fold)),
            ("seed", a.seed.to_string()),
            ("dtype", format!("{:?}", cfg.dtype)),
            ("validate_every", cfg.validate_every.to_string()),
            ("workers", a.workers.to_string()),
        ],
    );
    if a.workers == 0 {
        return Err(CliError::usage("--workers must be at least 1"));
    }
    let raw = load_cases(&data)?;
    let cases = raw
        .iter()
        .map(|c| preprocess(c).map(|(p, _)| p))
        .collect::<tumorseg::Result<Vec<_>>>()?;
    let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    let mut runs: Vec<(String, FoldPlan)> = Vec::new();
    if a.no_folds {
        runs.push(("all".into(), FoldPlan::AllCases));
    } else {
        let split = make_folds(&ids, a.folds, a.seed).map_err(|e| CliError::usage(e.to_string()))?;
        let mut text = String::new();
        for (i, f) in split.folds.iter().enumerate() {
            text.push_str(&format!("fold{i}: {}\n", f.join(",")));
        }
        write_atomic(&a.out.join("folds.txt"), text.as_bytes())?;
        let chosen: Vec<usize> = match a.fold {
            Some(f) if f >= a.folds => return Err(CliError::usage(format!("--fold {f} out of range for {} folds", a.folds))),
            Some(f) => vec![f],
            None => (0..a.folds).collect(),
        };
        for f in chosen {
            runs.push((
                format!("fold{f}"),
                FoldPlan::CrossValidation {
                    folds: split.folds.clone(),
                    fold: f,
                },
            ));
        }
    }
    for (name, plan) in runs {
        let dir = a.out.join(&name);
        let mut log = String::new();
        let outcome = train(&spec, &cases, &plan, &cfg, |r| {
            println!("{name} {r}");
            log.push_str(&format!("{r}\n"));
        })?;
        write_atomic(&dir.join("train.log"), log.as_bytes())?;
        checkpoint::save(&outcome.network, &dir.join("model.ckpt"))?;
        println!("wrote {}", dir.join("model.ckpt").display());
    }
    Ok(())
}

fn model_paths(a: &Infer) -> Result<Vec<PathBuf>, CliError> {
    let mut paths = a.models.clone();
    if let Some(dir) = &a.model_dir {
        let mut found: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path().join("model.ckpt")))
            .filter(|p| p.is_file())
            .collect();
        found.sort();
        paths.extend(found);
    }
    if paths.is_empty() {
        return Err(CliError::usage("give at least one --model or a --model-dir containing */model.ckpt"));
    }
    Ok(paths)
}

fn run_infer(a: &Infer) -> Result<(), CliError> {
    let data = a.data.clone();
    let window = WindowConfig {
        step_fraction: a.step,
        workers: a.workers,
        ..WindowConfig::default()
    };
    let paths = model_paths(a)?;
    print_config(
        "infer",
        &[
            ("models", format!("{paths:?}")),
            ("data", data.display().to_string()),
            ("out", a.out.display().to_string()),
            ("step", window.step_fraction.to_string()),
            ("sigma_fraction", window.sigma_fraction.to_string()),
            ("threshold", "0.5".into()),
            ("save_probs", a.save_probs.to_string()),
            ("dtype", if a.f64 { "F64" } else { "F32" }.into()),
            ("workers", a.workers.to_string()),
        ],
    );
    window.validate()?;
    let dtype = if a.f64 { DType::F64 } else { DType::F32 };
    let nets: Vec<Network> = paths.iter().map(|p| checkpoint::load(p, dtype)).collect::<tumorseg::Result<_>>()?;
    for path in vol4_files(&data)? {
        let case = load_volume(&path)?;
        let probs = if a.save_probs {
            let mut dumps = Vec::new();
            let mut maps = Vec::new();
            for (k, net) in nets.iter().enumerate() {
                let m = predict_case(std::slice::from_ref(net), &case, &window)?;
                let dump_path = a.out.join("probs").join(format!("model{k}")).join(format!("{}.prob3", case.case_id));
                save_prob3(
                    &ProbDump {
                        case_id: case.case_id.clone(),
                        spacing: case.spacing,
                        maps: m.clone(),
                    },
                    &dump_path,
                )?;
                dumps.push(dump_path);
                maps.push(m);
            }
            write_manifest(&a.out.join("probs").join(format!("{}.manifest", case.case_id)), &dumps)?;
            ensemble(&maps)?
        } else {
            predict_case(&nets, &case, &window)?
        };
        let labels = regions_to_labels(&binarize(&probs, 0.5));
        let out = a.out.join(format!("{}.vol4", case.case_id));
        save_label_volume(
            &LabelVolume {
                case_id: case.case_id.clone(),
                labels,
                spacing: case.spacing,
            },
            &out,
        )?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn run_ensemble(a: &Ensemble) -> Result<(), CliError> {
    print_config(
        "ensemble",
        &[
            ("manifests", format!("{:?}", a.manifests)),
            ("out", a.out.display().to_string()),
            ("threshold", "0.5".into()),
        ],
    );
    let mut by_case: BTreeMap<String, (Vec<ProbDump>, [f64; 3])> = BTreeMap::new();
    for m in &a.manifests {
        for p in read_manifest(m)? {
            let d = load_prob3(&p)?;
            let entry = by_case.entry(d.case_id.clone()).or_insert_with(|| (Vec::new(), d.spacing));
            entry.0.push(d);
        }
    }
    for (case_id, (dumps, spacing)) in by_case {
        let maps: Vec<_> = dumps.into_iter().map(|d| d.maps).collect();
        let labels = regions_to_labels(&binarize(&ensemble(&maps)?, 0.5));
        let out = a.out.join(format!("{case_id}.vol4"));
        save_label_volume(&LabelVolume { case_id, labels, spacing }, &out)?;
        println!("wrote {} from {} models", out.display(), maps.len());
    }
    Ok(())
}

fn run_postprocess(a: &Postprocess) -> Result<(), CliError> {
    print_config(
        "postprocess",
        &[
            ("input", a.input.display().to_string()),
            ("out", a.out.display().to_string()),
            ("min_et", a.min_et.to_string()),
        ],
    );
    for path in vol4_files(&a.input)? {
        let mut v = load_label_volume(&path)?;
        let before = v.labels.count(4);
        v.labels = postprocess_et(&v.labels, a.min_et);
        let out = a.out.join(format!("{}.vol4", v.case_id));
        save_label_volume(&v, &out)?;
        println!("{}: ET voxels {} -> {}", v.case_id, before, v.labels.count(4));
    }
    Ok(())
}

fn run_eval(a: &Eval) -> Result<(), CliError> {
    let gt_dir = a.gt.clone();
    print_config(
        "eval",
        &[
            ("pred", a.pred.display().to_string()),
            ("gt", gt_dir.display().to_string()),
            ("out", format!("{:?}", a.out)),
            ("sentinel", a.sentinel.map_or("diagonal".into(), |s| s.to_string())),
            ("surface", "6-connected".into()),
            ("percentile", "95 nearest-rank".into()),
        ],
    );
    let mut gts = BTreeMap::new();
    for p in vol4_files(&gt_dir)? {
        let v = load_label_volume(&p)?;
        gts.insert(v.case_id.clone(), v);
    }
    let mut cases = Vec::new();
    for p in vol4_files(&a.pred)? {
        let pred = load_label_volume(&p)?;
        let gt = gts
            .get(&pred.case_id)
            .ok_or_else(|| CliError::Run(tumorseg::Error::Format(format!("no ground truth for {}", pred.case_id))))?;
        cases.push(evaluate_case(&pred.case_id, &pred.labels, &gt.labels, gt.spacing, a.sentinel)?);
    }
    let report = aggregate_report(&cases)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        write_atomic(&out.with_extension("txt"), report.to_table().as_bytes())?;
        write_atomic(&out.with_extension("csv"), report.to_csv().as_bytes())?;
        println!("wrote {} and {}", out.with_extension("txt").display(), out.with_extension("csv").display());
    }
    Ok(())
}

fn run_grad_check(a: &GradCheck) -> Result<bool, CliError> {
    let scale = ScaleConfig {
        patch: a.patch,
        levels: a.levels,
        ..ScaleConfig::desk()
    };
    let spec = build_network(a.preset, &scale).map_err(|e| CliError::usage(e.to_string()))?;
    print_config(
        "grad-check",
        &[
            ("preset", a.preset.to_string()),
            ("levels", a.levels.to_string()),
            ("patch", a.patch.to_string()),
            ("batch", a.batch.to_string()),
            ("per_tensor", a.per_tensor.to_string()),
            ("seed", a.seed.to_string()),
            ("step", "1e-5".into()),
            ("dtype", "F64".into()),
            ("tolerance", a.tolerance.to_string()),
        ],
    );
    let report = network_gradcheck(&spec, a.batch, a.seed, a.per_tensor)?;
    println!("checked={} kinks={}", report.checked, report.kinks);
    if let Some(w) = &report.worst {
        println!("worst={w:?}");
    }
    println!("max_rel_error={:e}", report.max_rel_error);
    let ok = report.max_rel_error < a.tolerance;
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn run_bench(a: &BenchAttention) -> Result<(), CliError> {
    print_config(
        "bench-attention",
        &[
            ("sides", format!("{:?}", a.sides)),
            ("channels", a.channels.to_string()),
            ("heads", a.heads.to_string()),
            ("head_dim", a.head_dim.to_string()),
            ("input", "cubic, batch 1".into()),
        ],
    );
    if a.sides.len() < 2 || a.sides.contains(&0) {
        return Err(CliError::usage("--sides needs at least two positive values"));
    }
    println!(
        "{:>6} {:>10} {:>16} {:>16} {:>16} {:>16}",
        "side", "tokens", "axial_score", "axial_total", "full_score", "full_total"
    );
    let mut xs = Vec::new();
    let (mut ax, mut fu) = (Vec::new(), Vec::new());
    for &s in &a.sides {
        let shape = [s; 3];
        let axial = attention_cost(shape, a.channels, a.heads, a.head_dim, AttentionKind::Axial);
        let full = attention_cost(shape, a.channels, a.heads, a.head_dim, AttentionKind::Full);
        println!(
            "{:>6} {:>10} {:>16} {:>16} {:>16} {:>16}",
            s,
            s * s * s,
            axial.score,
            axial.total(),
            full.score,
            full.total()
        );
        xs.push(s as f64);
        ax.push(axial.score as f64);
        fu.push(full.score as f64);
    }
    println!("axial_score_slope={:.4}", loglog_slope(&xs, &ax));
    println!("full_score_slope={:.4}", loglog_slope(&xs, &fu));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Infer(a) => run_infer(a).map(|_| true),
        Command::Ensemble(a) => run_ensemble(a).map(|_| true),
        Command::Postprocess(a) => run_postprocess(a).map(|_| true),
        Command::Eval(a) => run_eval(a).map(|_| true),
        Command::GradCheck(a) => run_grad_check(a),
        Command::BenchAttention(a) => run_bench(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
