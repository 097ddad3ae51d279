use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sigverify::backbone::{
    build_backbone, extract_batch, finetune, Arch, BackboneModel, FeatureCache, InputVariant, TrainConfig,
};
use sigverify::cleaner::{clean, train_cleaner, CleanerModel};
use sigverify::dataset::{
    build_manifest, generate_pairs, generate_reference_pairs, read_pairs_csv, split_representation,
    split_verification_users, write_pairs_csv, DatasetManifest, Label, Layout, SplitSpec, SplitUnit,
};
use sigverify::harness::config::{env_data_root, Config, DATA_ROOT_ENV};
use sigverify::harness::experiments::{
    run_separable_experiment, run_stamp_experiment, SeparableExperimentConfig, StampExperimentConfig,
};
use sigverify::harness::humaneval::read_votes_csv;
use sigverify::harness::service::serve_humaneval;
use sigverify::harness::{humaneval_report, plan_humaneval, run_grid, HumanEvalPlan};
use sigverify::imaging::{augment_user, load_signature, save_signature, Polarity, SignatureImage, Source};
use sigverify::synth::{write_writer_corpus, WriterCorpusConfig};
use sigverify::verifier::read_scores_csv;

#[derive(Parser)]
#[command(name = "sigverify", version, about = "Offline signature verification with stamp cleaning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index a dataset directory into a manifest CSV.
    MakeManifest(MakeManifest),
    /// Write a representation or verification split.
    MakeSplits(MakeSplits),
    /// Generate labeled verification pairs.
    MakePairs(MakePairs),
    /// Train the unpaired stamped-to-clean translator.
    TrainCleaner(TrainCleanerArgs),
    /// Clean images with a trained cleaner.
    Clean(CleanArgs),
    /// Fine-tune a backbone on writer classification.
    TrainBackbone(TrainBackboneArgs),
    /// Extract features for every manifest image.
    Extract(ExtractArgs),
    /// Run a setup-by-model evaluation grid.
    Evaluate(EvaluateArgs),
    /// Subjective evaluation protocol.
    #[command(subcommand)]
    Humaneval(Humaneval),
    /// Write a synthetic writer corpus.
    Synth(SynthArgs),
    /// Desk-scale synthetic experiments.
    #[command(subcommand)]
    Experiment(Experiment),
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutKind {
    UserDirs,
    Tobacco800,
}

#[derive(Args)]
struct MakeManifest {
    /// Dataset root; defaults to $SIGVERIFY_DATA_ROOT.
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "user-dirs")]
    layout: LayoutKind,
    /// Annotation list for the Tobacco-800 layout.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    exclusions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitMode {
    Representation,
    Verification,
}

#[derive(Args)]
struct MakeSplits {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    mode: SplitMode,
    /// Train/val/test ratios for representation splits.
    #[arg(long, value_delimiter = ',', default_values_t = [0.7, 0.15, 0.15])]
    ratios: Vec<f64>,
    #[arg(long, value_enum, default_value = "image")]
    unit: UnitKind,
    /// Training writers for verification splits.
    #[arg(long)]
    n_train_users: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnitKind {
    Image,
    User,
}

#[derive(Clone, Copy, ValueEnum)]
enum PairKind {
    /// Every same-writer pair plus as many random cross-writer pairs.
    All,
    /// Reference vs unstamped target.
    Unstamped,
    /// Reference vs stamped target.
    Stamped,
}

#[derive(Args)]
struct MakePairs {
    #[arg(long)]
    manifest: PathBuf,
    /// Verification split whose test writers are paired.
    #[arg(long)]
    split: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    kind: PairKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCleanerArgs {
    #[arg(long)]
    stamped: PathBuf,
    #[arg(long)]
    clean: PathBuf,
    /// TOML file with a [cleaner] section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CleanArgs {
    #[arg(long)]
    model: PathBuf,
    /// Glob of input images.
    #[arg(long = "in")]
    input: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainBackboneArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Image-level representation split.
    #[arg(long)]
    split: PathBuf,
    /// Verification split whose test writers must not be trained on.
    #[arg(long)]
    verification_split: Option<PathBuf>,
    #[arg(long, default_value = "tiny")]
    arch: String,
    #[arg(long, default_value = "raw")]
    variant: String,
    /// TOML file with [backbone] and optional [augmentation] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weights to initialize from (matching leading tensors only).
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    input_height: Option<usize>,
    #[arg(long)]
    input_width: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// TOML file with a [grid] section.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    cleaner: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Humaneval {
    Plan(HePlan),
    Serve(HeServe),
    Report(HeReport),
}

#[derive(Args)]
struct HePlan {
    #[arg(long)]
    pairs_stamped: PathBuf,
    #[arg(long)]
    pairs_unstamped: PathBuf,
    #[arg(long, default_value_t = 18)]
    raters: usize,
    /// TOML file with a [humaneval] section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HeServe {
    #[arg(long)]
    plan: PathBuf,
    /// Append-only vote log.
    #[arg(long)]
    votes: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Directory with the web front end.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
}

#[derive(Args)]
struct HeReport {
    #[arg(long)]
    plan: PathBuf,
    /// Votes CSV as exported by the service.
    #[arg(long)]
    votes: PathBuf,
    /// Pair files carrying the ground-truth labels.
    #[arg(long, required = true)]
    pairs: Vec<PathBuf>,
    /// Model scores as NAME=FILE.csv.
    #[arg(long)]
    scores: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    writers: usize,
    #[arg(long, default_value_t = 6)]
    references: usize,
    #[arg(long, default_value_t = 2)]
    targets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Experiment {
    /// Stamp removal against paired ground truth.
    Stamp {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Cleaner plus tiny backbone over separable synthetic writers.
    Separable {
        #[arg(long)]
        out: PathBuf,
        /// Existing cleaner checkpoint; trained from scratch when absent.
        #[arg(long)]
        cleaner: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

fn load_dir_images(dir: &Path) -> Result<Vec<SignatureImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| sigverify::dataset::IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no images in {}", dir.display());
    }
    paths.iter().map(|p| Ok(load_signature(p, Polarity::Original)?)).collect()
}

fn make_manifest(a: MakeManifest) -> Result<()> {
    let root = a
        .root
        .or_else(env_data_root)
        .with_context(|| format!("pass --root or set {DATA_ROOT_ENV}"))?;
    let layout = match a.layout {
        LayoutKind::UserDirs => Layout::UserDirs,
        LayoutKind::Tobacco800 => Layout::Tobacco800 {
            annotations: a.annotations.context("--annotations is required for tobacco800")?,
            exclusions: a.exclusions,
        },
    };
    let m = build_manifest(&root, &layout)?;
    m.write_csv(&a.out)?;
    println!("{} signatures from {} writers -> {}", m.entries.len(), m.users().len(), a.out.display());
    Ok(())
}

fn make_splits(a: MakeSplits) -> Result<()> {
    let m = DatasetManifest::read_csv(&a.manifest)?;
    let split = match a.mode {
        SplitMode::Representation => {
            let [tr, va, te] = a.ratios[..] else {
                bail!("--ratios takes exactly three values");
            };
            let unit = match a.unit {
                UnitKind::Image => SplitUnit::Image,
                UnitKind::User => SplitUnit::User,
            };
            split_representation(&m, (tr, va, te), a.seed, unit)?
        }
        SplitMode::Verification => {
            let n = a.n_train_users.context("--n-train-users is required for verification splits")?;
            split_verification_users(&m, n, a.seed)?
        }
    };
    split.write_json(&a.out)?;
    println!("train {} / val {} / test {} -> {}", split.train.len(), split.val.len(), split.test.len(), a.out.display());
    Ok(())
}

fn make_pairs(a: MakePairs) -> Result<()> {
    let m = DatasetManifest::read_csv(&a.manifest)?;
    let split = SplitSpec::read_json(&a.split)?;
    let pairs = match a.kind {
        PairKind::All => generate_pairs(&m, &split.test, a.seed)?,
        PairKind::Unstamped => generate_reference_pairs(&m, &split.test, Source::TargetUnstamped, None, a.seed)?,
        PairKind::Stamped => generate_reference_pairs(&m, &split.test, Source::TargetStamped, None, a.seed)?,
    };
    write_pairs_csv(&a.out, &pairs)?;
    let pos = pairs.iter().filter(|p| p.label == Label::Match).count();
    println!("{} pairs ({pos} match) -> {}", pairs.len(), a.out.display());
    Ok(())
}

fn train_cleaner_cmd(a: TrainCleanerArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?.cleaner.unwrap_or_default();
    let stamped = load_dir_images(&a.stamped)?;
    let clean_set = load_dir_images(&a.clean)?;
    let m = train_cleaner(&stamped, &clean_set, &cfg, Some(&a.out))?;
    println!("trained {} epochs -> {}", m.meta.history.len(), a.out.display());
    Ok(())
}

fn clean_cmd(a: CleanArgs) -> Result<()> {
    let model = CleanerModel::load(&a.model)?;
    std::fs::create_dir_all(&a.out)?;
    let mut n = 0;
    for entry in glob::glob(&a.input).context("bad --in pattern")? {
        let path = entry?;
        let img = load_signature(&path, Polarity::Original)?;
        let out = clean(&model, &img)?;
        let name = path.file_stem().context("input without a file name")?;
        save_signature(&out, &a.out.join(Path::new(name).with_extension("png")))?;
        n += 1;
    }
    println!("cleaned {n} images -> {}", a.out.display());
    Ok(())
}

fn train_backbone_cmd(a: TrainBackboneArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let arch: Arch = a.arch.parse()?;
    let variant: InputVariant = a.variant.parse()?;
    let train_cfg = cfg.backbone.clone().unwrap_or_else(|| TrainConfig::for_arch(&arch));
    let m = DatasetManifest::read_csv(&a.manifest)?;
    let split = SplitSpec::read_json(&a.split)?;
    if split.unit != SplitUnit::Image {
        bail!("backbone training needs an image-level split");
    }
    let lookup = m.lookup();
    let load = |paths: &[String]| -> Result<Vec<SignatureImage>> {
        paths
            .iter()
            .map(|p| {
                let e = lookup.get(p.as_str()).with_context(|| format!("{p} not in manifest"))?;
                Ok(load_signature(Path::new(p), Polarity::Original)?.with_user(&e.user_id))
            })
            .collect()
    };
    let mut train = load(&split.train)?;
    let val = load(&split.val)?;
    if let Some(aug) = &cfg.augmentation {
        let mut by_user: BTreeMap<String, Vec<SignatureImage>> = BTreeMap::new();
        for img in train {
            by_user.entry(img.user_id.clone()).or_default().push(img);
        }
        train = Vec::new();
        for imgs in by_user.values() {
            train.extend(augment_user(imgs, aug)?);
        }
    }
    let forbidden = match &a.verification_split {
        Some(p) => SplitSpec::read_json(p)?.test,
        None => Vec::new(),
    };
    let mut input = arch.default_input();
    if let Some(h) = a.input_height {
        input.height = h;
    }
    if let Some(w) = a.input_width {
        input.width = w;
    }
    let n_classes = train.iter().map(|i| i.user_id.as_str()).collect::<std::collections::BTreeSet<_>>().len();
    let mut model = build_backbone(&arch, n_classes, input, variant, train_cfg.seed)?;
    if let Some(p) = &a.pretrained {
        let n = model.load_pretrained(p)?;
        log::info!("initialized {n} tensors from {}", p.display());
    }
    let model = finetune(model, &train, &val, &forbidden, &train_cfg)?;
    model.save(&a.out)?;
    println!(
        "best epoch {:?} of {} -> {}",
        model.meta.best_epoch,
        model.meta.history.len(),
        a.out.display()
    );
    Ok(())
}

fn extract_cmd(a: ExtractArgs) -> Result<()> {
    let model = BackboneModel::load(&a.model)?;
    let m = DatasetManifest::read_csv(&a.manifest)?;
    let images = m
        .entries
        .iter()
        .map(|e| load_signature(Path::new(&e.path), Polarity::Original))
        .collect::<sigverify::Result<Vec<_>>>()?;
    let feats = extract_batch(&model, &images)
        .into_iter()
        .zip(&m.entries)
        .map(|(f, e)| Ok((e.path.clone(), f?)))
        .collect::<sigverify::Result<Vec<_>>>()?;
    let cache = FeatureCache::from_features(&model.meta.model_id, feats)?;
    cache.write(&a.out)?;
    println!("{} features of dim {} -> {}", cache.paths.len(), cache.dim, a.out.display());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let cfg = Config::load(&a.grid)?;
    let grid = cfg.grid.clone().context("config has no [grid] section")?;
    let manifest = DatasetManifest::read_csv(&a.manifest)?;
    let cleaner = a.cleaner.as_deref().map(CleanerModel::load).transpose()?;
    let mut backbones = BTreeMap::new();
    for m in &grid.models {
        if let Some(dir) = &m.checkpoint {
            backbones.insert(m.name.clone(), BackboneModel::load(dir)?);
        }
    }
    let report = run_grid(
        &grid,
        &manifest,
        cleaner.as_ref().map(|c| c as &dyn sigverify::dataset::ImageCleaner),
        &backbones,
    )?;
    for (setup, row) in &report.table {
        let cells: Vec<String> = row.iter().map(|(m, e)| format!("{m}={e:.4}")).collect();
        println!("{setup}: {}", cells.join("  "));
    }
    println!("-> {}", grid.output_dir.display());
    Ok(())
}

fn humaneval_cmd(h: Humaneval) -> Result<()> {
    match h {
        Humaneval::Plan(a) => {
            let cfg = load_config(a.config.as_deref())?.humaneval.unwrap_or_default();
            let stamped = read_pairs_csv(&a.pairs_stamped)?;
            let unstamped = read_pairs_csv(&a.pairs_unstamped)?;
            let raters: Vec<String> = (0..a.raters).map(|i| format!("rater{i:02}")).collect();
            let plan = plan_humaneval(&stamped, &unstamped, &raters, &cfg)?;
            plan.write_json(&a.out)?;
            println!(
                "{} pairs, {} subsets, {} raters x {} pairs -> {}",
                plan.items.len(),
                plan.n_subsets,
                raters.len(),
                plan.expected_votes() / raters.len(),
                a.out.display()
            );
        }
        Humaneval::Serve(a) => {
            let plan = HumanEvalPlan::read_json(&a.plan)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve_humaneval(plan, &a.votes, a.addr, a.static_dir.as_deref(), |addr| {
                println!("serving on http://{addr}")
            }))?;
        }
        Humaneval::Report(a) => {
            let plan = HumanEvalPlan::read_json(&a.plan)?;
            let votes = read_votes_csv(&a.votes)?;
            let mut truth = HashMap::new();
            for p in &a.pairs {
                for r in read_pairs_csv(p)? {
                    truth.insert(r.pair_id, r.label);
                }
            }
            let mut scores = BTreeMap::new();
            for s in &a.scores {
                let (name, file) = s.split_once('=').context("--scores takes NAME=FILE")?;
                scores.insert(name.to_string(), read_scores_csv(Path::new(file))?);
            }
            let report = humaneval_report(&plan, &votes, &truth, &scores)?;
            let text = serde_json::to_string_pretty(&report)?;
            match a.out {
                Some(p) => std::fs::write(&p, text)?,
                None => println!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::MakeManifest(a) => make_manifest(a),
        Command::MakeSplits(a) => make_splits(a),
        Command::MakePairs(a) => make_pairs(a),
        Command::TrainCleaner(a) => train_cleaner_cmd(a),
        Command::Clean(a) => clean_cmd(a),
        Command::TrainBackbone(a) => train_backbone_cmd(a),
        Command::Extract(a) => extract_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Humaneval(h) => humaneval_cmd(h),
        Command::Synth(a) => {
            let cfg = WriterCorpusConfig {
                writers: a.writers,
                references_per_writer: a.references,
                targets_per_writer: a.targets,
                seed: a.seed,
                ..WriterCorpusConfig::default()
            };
            let n = write_writer_corpus(&a.out, &cfg)?;
            println!("{n} images -> {}", a.out.display());
            Ok(())
        }
        Command::Experiment(Experiment::Stamp { out, epochs }) => {
            let mut cfg = StampExperimentConfig::default();
            if let Some(e) = epochs {
                cfg.cleaner.epochs = e;
            }
            std::fs::create_dir_all(&out)?;
            let (_, r) = run_stamp_experiment(&cfg, Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(())
        }
        Command::Experiment(Experiment::Separable { out, cleaner }) => {
            std::fs::create_dir_all(&out)?;
            let cleaner = match cleaner {
                Some(dir) => CleanerModel::load(&dir)?,
                None => run_stamp_experiment(&StampExperimentConfig::default(), Some(&out.join("cleaner")))?.0,
            };
            let r = run_separable_experiment(&SeparableExperimentConfig::default(), &cleaner, &out)?;
            println!("{}", serde_json::to_string_pretty(&r.eer)?);
            Ok(())
        }
    }
}

