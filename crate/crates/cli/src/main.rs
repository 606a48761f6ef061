//! Pipeline driver. Six subcommands cover the full run: render a synthetic
//! corpus, train the letter network, calibrate saliency, train the writer
//! models, identify, and run the varying-evidence sweep. One JSON config
//! drives everything; every artifact embeds it for provenance.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scriptid_core::classify::bundle::{load_bundle, save_bundle, ModelBundle};
use scriptid_core::classify::{self, ScoreVector};
use scriptid_core::config::{ConfigError, PipelineConfig};
use scriptid_core::convnet::io::{load_weights, save_weights};
use scriptid_core::convnet::train::{train_emnist, ImageSet, NetWeights};
use scriptid_core::data::{self, Split};
use scriptid_core::pipeline::{self, PipelineError};
use scriptid_core::pooling::Pooling;
use scriptid_core::saliency::SaliencyProfile;
use scriptid_core::util;

#[derive(Parser)]
#[command(name = "scriptid", version, about = "Offline writer identification from word images")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// worker threads; results match the serial run bitwise
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// override pooling: average | pre | post
    #[arg(long, global = true)]
    pooling: Option<String>,
    /// override scored stream: conv1 | conv2 | conv3 | fused
    #[arg(long, global = true)]
    layer: Option<String>,
    /// override the master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// proceed despite config-digest mismatches
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic word corpus and its manifest
    SynthCorpus,
    /// Train the letter network and write the weight file
    TrainCnn,
    /// Calibrate per-filter saliency profiles from the corpus train split
    Calibrate,
    /// Train per-writer models and write the model bundle
    TrainWriters,
    /// Score the corpus test split (or one image) and write the reports
    Identify {
        /// score a single word image instead of the corpus test split
        #[arg(long)]
        image: Option<PathBuf>,
        /// additionally report accuracy over fixed-size word groups
        #[arg(long)]
        words_per_writer: Option<usize>,
    },
    /// Sweep words-per-group 1..=N and report the accuracy trend
    Evaluate {
        #[arg(long, default_value_t = 5)]
        max_group: usize,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn config(msg: impl Into<String>) -> Self {
        Failure { code: 2, msg: msg.into() }
    }
    fn data(msg: impl Into<String>) -> Self {
        Failure { code: 3, msg: msg.into() }
    }
    fn model(msg: impl Into<String>) -> Self {
        Failure { code: 4, msg: msg.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(e.to_string())
    }
}

impl From<data::DataError> for Failure {
    fn from(e: data::DataError) -> Self {
        Failure::data(e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::Config(_) => Failure::config(e.to_string()),
            PipelineError::Data(_) | PipelineError::Imaging(_) => Failure::data(e.to_string()),
            _ => Failure::model(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::config(format!("--jobs: {e}")))?;
    }
    let cfg = effective_config(&cli)?;
    match cli.command {
        Command::SynthCorpus => cmd_synth_corpus(&cfg),
        Command::TrainCnn => cmd_train_cnn(&cfg),
        Command::Calibrate => cmd_calibrate(&cfg),
        Command::TrainWriters => cmd_train_writers(&cfg),
        Command::Identify { ref image, words_per_writer } => {
            cmd_identify(&cfg, cli.force, image.as_deref(), words_per_writer)
        }
        Command::Evaluate { max_group } => cmd_evaluate(&cfg, cli.force, max_group),
    }
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &cli.pooling {
        cfg.pooling = p.parse::<Pooling>().map_err(Failure::config)?;
    }
    if let Some(l) = &cli.layer {
        cfg.layer = l.parse().map_err(Failure::config)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| Failure::model(format!("create {}: {e}", dir.display())))?;
        }
    }
    Ok(())
}

fn cmd_synth_corpus(cfg: &PipelineConfig) -> Result<(), Failure> {
    let manifest = &cfg.paths.manifest;
    let out_dir = manifest.parent().filter(|p| !p.as_os_str().is_empty()).ok_or_else(|| {
        Failure::config(format!("manifest path {} has no directory", manifest.display()))
    })?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Failure::data(format!("create {}: {e}", out_dir.display())))?;
    let glyphs = data::builtin_glyphs(
        cfg.corpus.glyphs_per_class,
        util::derive_seed(cfg.seed, "glyph-pool"),
    );
    let corpus = data::generate_synthetic_corpus(
        out_dir,
        cfg.corpus.num_writers,
        cfg.corpus.words_per_writer,
        &glyphs,
        util::derive_seed(cfg.seed, "corpus"),
    )?;
    // the generator names its manifest manifest.csv; honor other configured names
    if manifest.file_name().is_some_and(|n| n != "manifest.csv") {
        data::write_manifest(&corpus, manifest)?;
    }
    let train = corpus.entries.iter().filter(|e| e.split == Split::Train).count();
    let test = corpus.entries.len() - train;
    println!(
        "synthetic corpus: {} writers, {} words ({} train / {} test) -> {}",
        corpus.writers().len(),
        corpus.entries.len(),
        train,
        test,
        manifest.display()
    );
    Ok(())
}

struct EmnistPaths {
    train_images: PathBuf,
    train_labels: PathBuf,
    test_images: PathBuf,
    test_labels: PathBuf,
}

/// IDX locations from the config, or from SCRIPTID_EMNIST_DIR using the
/// distribution's file names; None falls back to the built-in glyphs.
fn resolve_emnist(cfg: &PipelineConfig) -> Option<EmnistPaths> {
    let p = &cfg.paths;
    if let (Some(ti), Some(tl), Some(vi), Some(vl)) = (
        &p.emnist_train_images,
        &p.emnist_train_labels,
        &p.emnist_test_images,
        &p.emnist_test_labels,
    ) {
        return Some(EmnistPaths {
            train_images: ti.clone(),
            train_labels: tl.clone(),
            test_images: vi.clone(),
            test_labels: vl.clone(),
        });
    }
    let dir = PathBuf::from(std::env::var_os("SCRIPTID_EMNIST_DIR")?);
    Some(EmnistPaths {
        train_images: dir.join("emnist-letters-train-images-idx3-ubyte"),
        train_labels: dir.join("emnist-letters-train-labels-idx1-ubyte"),
        test_images: dir.join("emnist-letters-test-images-idx3-ubyte"),
        test_labels: dir.join("emnist-letters-test-labels-idx1-ubyte"),
    })
}

fn cmd_train_cnn(cfg: &PipelineConfig) -> Result<(), Failure> {
    let (train, val): (ImageSet, ImageSet) = match resolve_emnist(cfg) {
        Some(p) => {
            log::info!("loading IDX letters from {}", p.train_images.display());
            let mut train = data::load_emnist(&p.train_images, &p.train_labels, true)?
                .dark_on_white();
            let mut val =
                data::load_emnist(&p.test_images, &p.test_labels, true)?.dark_on_white();
            if let Some(n) = cfg.cnn.subset_per_class {
                train =
                    data::subset_per_class(&train, n, util::derive_seed(cfg.seed, "sub-train"));
                val = data::subset_per_class(&val, n, util::derive_seed(cfg.seed, "sub-val"));
            }
            (train, val)
        }
        None => {
            log::info!("no IDX dataset configured; rendering the built-in glyph set");
            (
                data::builtin_glyphs(
                    cfg.cnn.builtin_train_per_class,
                    util::derive_seed(cfg.seed, "glyphs-train"),
                ),
                data::builtin_glyphs(
                    cfg.cnn.builtin_val_per_class,
                    util::derive_seed(cfg.seed, "glyphs-val"),
                ),
            )
        }
    };
    log::info!("training on {} images, validating on {}", train.len(), val.len());
    let spec = cfg.cnn.conv_spec();
    let opts = cfg.cnn.train_options(util::derive_seed(cfg.seed, "cnn"));
    let mut weights: NetWeights =
        train_emnist(&train, &val, &spec, &opts).map_err(|e| Failure::model(e.to_string()))?;
    weights.meta.config_json = cfg.to_json();
    ensure_parent(&cfg.paths.weights)?;
    save_weights(&cfg.paths.weights, &weights).map_err(|e| Failure::model(e.to_string()))?;
    println!(
        "best epoch {} at val accuracy {:.4} -> {}",
        weights.meta.best_epoch,
        weights.meta.best_val_acc,
        cfg.paths.weights.display()
    );
    Ok(())
}

fn load_net(cfg: &PipelineConfig) -> Result<NetWeights, Failure> {
    let weights = load_weights(&cfg.paths.weights).map_err(|e| {
        Failure::model(format!(
            "load weights {}: {e} (run train-cnn first)",
            cfg.paths.weights.display()
        ))
    })?;
    if !weights.meta.config_json.is_empty()
        && util::digest_hex(weights.meta.config_json.as_bytes()) != cfg.digest()
    {
        log::warn!("weights were trained under a different config");
    }
    Ok(weights)
}

fn cmd_calibrate(cfg: &PipelineConfig) -> Result<(), Failure> {
    let weights = load_net(cfg)?;
    let corpus = data::load_corpus(&cfg.paths.manifest)?;
    let profiles = pipeline::calibrate_profiles(&weights.net, &corpus, cfg)?;
    std::fs::create_dir_all(&cfg.paths.profiles_dir)
        .map_err(|e| Failure::model(format!("create {}: {e}", cfg.paths.profiles_dir.display())))?;
    for p in &profiles {
        let path = cfg.paths.profile_path(p.layer);
        p.save(&path)
            .map_err(|e| Failure::model(format!("write {}: {e}", path.display())))?;
        println!("conv{} saliency profile -> {}", p.layer, path.display());
    }
    Ok(())
}

fn load_profiles(cfg: &PipelineConfig, pooling: Pooling, layers: &[usize]) -> Result<Vec<SaliencyProfile>, Failure> {
    if pooling == Pooling::Average {
        return Ok(Vec::new());
    }
    layers
        .iter()
        .map(|&layer| {
            let path = cfg.paths.profile_path(layer);
            SaliencyProfile::load(&path).map_err(|e| {
                Failure::model(format!("load {}: {e} (run calibrate first)", path.display()))
            })
        })
        .collect()
}

fn cmd_train_writers(cfg: &PipelineConfig) -> Result<(), Failure> {
    let weights = load_net(cfg)?;
    let corpus = data::load_corpus(&cfg.paths.manifest)?;
    let profiles = load_profiles(cfg, cfg.pooling, &cfg.layer.layers())?;
    let bundle = pipeline::train_writer_models(&weights.net, &corpus, profiles, cfg)?;
    ensure_parent(&cfg.paths.bundle)?;
    save_bundle(&cfg.paths.bundle, &bundle).map_err(|e| Failure::model(e.to_string()))?;
    let mut summary = String::new();
    for lm in &bundle.layers {
        let _ = write!(summary, "conv{} (C {}, gamma {}) ", lm.layer, lm.c, lm.gamma);
    }
    if let Some(a) = bundle.alpha {
        let _ = write!(summary, "alpha {a}");
    }
    println!(
        "{} writers, {} pooling, {summary}-> {}",
        bundle.layers[0].models.len(),
        bundle.pooling,
        cfg.paths.bundle.display()
    );
    Ok(())
}

fn load_bundle_checked(
    cfg: &PipelineConfig,
    force: bool,
) -> Result<(NetWeights, ModelBundle, Vec<SaliencyProfile>), Failure> {
    let weights = load_net(cfg)?;
    let bundle = load_bundle(&cfg.paths.bundle).map_err(|e| {
        Failure::model(format!(
            "load bundle {}: {e} (run train-writers first)",
            cfg.paths.bundle.display()
        ))
    })?;
    let layers: Vec<usize> = bundle.layers.iter().map(|lm| lm.layer).collect();
    let profiles = load_profiles(cfg, bundle.pooling, &layers)?;
    match pipeline::check_bundle(&bundle, &profiles, cfg) {
        Ok(()) => {}
        Err(e) if force => log::warn!("--force: {e}"),
        Err(e) => {
            return Err(Failure::model(format!("{e} (pass --force to score anyway)")))
        }
    }
    Ok((weights, bundle, profiles))
}

fn provenance_name(bundle: &ModelBundle) -> String {
    if bundle.layers.len() > 1 {
        "fused".into()
    } else {
        format!("conv{}", bundle.layers[0].layer)
    }
}

fn print_ranking(score: &ScoreVector) {
    for (rank, id) in classify::top_ids(score, 5).iter().enumerate() {
        let idx = score.writers.iter().position(|w| w == id).unwrap();
        println!("  {}. writer {:>4}  score {:.4}", rank + 1, id, score.scores[idx]);
    }
}

fn opt_cell<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

fn top_cells(top5: &[u32]) -> [String; 5] {
    std::array::from_fn(|i| top5.get(i).map(|w| w.to_string()).unwrap_or_default())
}

fn write_word_csv(path: &Path, rows: &[pipeline::WordReportRow]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Failure::model(format!("write {}: {e}", path.display())))?;
    let io_err = |e: csv::Error| Failure::model(format!("write {}: {e}", path.display()));
    w.write_record([
        "word_path",
        "true_writer",
        "predicted",
        "rank_of_truth",
        "top1",
        "top2",
        "top3",
        "top4",
        "top5",
    ])
    .map_err(io_err)?;
    for r in rows {
        let top = top_cells(&r.top5);
        w.write_record([
            r.path.as_str(),
            &r.true_writer.to_string(),
            &opt_cell(&r.predicted),
            &opt_cell(&r.rank_of_truth),
            &top[0],
            &top[1],
            &top[2],
            &top[3],
            &top[4],
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|e| Failure::model(format!("write {}: {e}", path.display())))
}

fn write_page_csv(path: &Path, rows: &[pipeline::PageReportRow]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Failure::model(format!("write {}: {e}", path.display())))?;
    let io_err = |e: csv::Error| Failure::model(format!("write {}: {e}", path.display()));
    w.write_record([
        "page",
        "true_writer",
        "words",
        "predicted",
        "rank_of_truth",
        "top1",
        "top2",
        "top3",
        "top4",
        "top5",
    ])
    .map_err(io_err)?;
    for r in rows {
        let top = top_cells(&r.top5);
        w.write_record([
            r.page.as_str(),
            &r.true_writer.to_string(),
            &r.words.to_string(),
            &opt_cell(&r.predicted),
            &opt_cell(&r.rank_of_truth),
            &top[0],
            &top[1],
            &top[2],
            &top[3],
            &top[4],
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|e| Failure::model(format!("write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text)
        .map_err(|e| Failure::model(format!("write {}: {e}", path.display())))
}

fn cmd_identify(
    cfg: &PipelineConfig,
    force: bool,
    image: Option<&Path>,
    words_per_writer: Option<usize>,
) -> Result<(), Failure> {
    let (weights, bundle, profiles) = load_bundle_checked(cfg, force)?;

    if let Some(img_path) = image {
        let img = pipeline::load_word_image(img_path)?;
        let score = pipeline::score_image(&weights.net, &img, &bundle, profiles, cfg)?;
        println!("{} ({} scores):", img_path.display(), provenance_name(&bundle));
        print_ranking(&score);
        return Ok(());
    }

    let corpus = data::load_corpus(&cfg.paths.manifest)?;
    let sc =
        pipeline::score_split(&weights.net, &corpus, Split::Test, &bundle, profiles, cfg)?;
    let words = pipeline::word_rows(&sc);
    let pages = pipeline::page_rows(&sc);
    let summary = pipeline::summarize(&sc, words_per_writer)?;

    std::fs::create_dir_all(&cfg.paths.out_dir)
        .map_err(|e| Failure::model(format!("create {}: {e}", cfg.paths.out_dir.display())))?;
    let word_csv = cfg.paths.out_dir.join("identify-words.csv");
    let page_csv = cfg.paths.out_dir.join("identify-pages.csv");
    let summary_path = cfg.paths.out_dir.join("identify-summary.json");
    write_word_csv(&word_csv, &words)?;
    write_page_csv(&page_csv, &pages)?;
    write_json(
        &summary_path,
        &serde_json::json!({
            "config_digest": cfg.digest(),
            "provenance": provenance_name(&bundle),
            "pooling": bundle.pooling.to_string(),
            "alpha": bundle.alpha,
            "summary": summary,
            "config": serde_json::from_str::<serde_json::Value>(&cfg.to_json()).unwrap(),
        }),
    )?;

    println!(
        "words: top-1 {:.4}, top-5 {:.4} over {} ({} scored)",
        summary.word_top1, summary.word_top5, summary.words_total, summary.words_scored
    );
    println!(
        "pages: top-1 {:.4}, top-5 {:.4} over {}",
        summary.page_top1, summary.page_top5, summary.pages_total
    );
    if let Some(g) = &summary.groups {
        println!(
            "groups of {}: top-1 {:.4}, top-5 {:.4} over {}",
            g.words_per_group, g.top1, g.top5, g.groups
        );
    }
    println!(
        "reports: {}, {}, {}",
        word_csv.display(),
        page_csv.display(),
        summary_path.display()
    );
    Ok(())
}

fn cmd_evaluate(cfg: &PipelineConfig, force: bool, max_group: usize) -> Result<(), Failure> {
    if max_group == 0 {
        return Err(Failure::config("--max-group must be positive"));
    }
    let (weights, bundle, profiles) = load_bundle_checked(cfg, force)?;
    let corpus = data::load_corpus(&cfg.paths.manifest)?;
    let sc =
        pipeline::score_split(&weights.net, &corpus, Split::Test, &bundle, profiles, cfg)?;
    let summary = pipeline::summarize(&sc, None)?;
    let mut trend = Vec::with_capacity(max_group);
    println!("words/group  groups  top-1   top-5");
    for n in 1..=max_group {
        let g = pipeline::group_result(&sc, n)?;
        println!("{:>11}  {:>6}  {:.4}  {:.4}", g.words_per_group, g.groups, g.top1, g.top5);
        trend.push(g);
    }
    std::fs::create_dir_all(&cfg.paths.out_dir)
        .map_err(|e| Failure::model(format!("create {}: {e}", cfg.paths.out_dir.display())))?;
    let path = cfg.paths.out_dir.join("evaluate-summary.json");
    write_json(
        &path,
        &serde_json::json!({
            "config_digest": cfg.digest(),
            "provenance": provenance_name(&bundle),
            "pooling": bundle.pooling.to_string(),
            "alpha": bundle.alpha,
            "summary": summary,
            "trend": trend,
            "config": serde_json::from_str::<serde_json::Value>(&cfg.to_json()).unwrap(),
        }),
    )?;
    println!("trend report -> {}", path.display());
    Ok(())
}
