//! `prelabel` command dispatch, kept in a library so tests can drive it
//! in-process with captured output.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use prelabel_core::formats::{self, ExportOptions, Format, FormatError, GeometryPolicy};
use prelabel_core::model::{Project, ProjectMode};
use prelabel_core::preannotator::batch::{preannotate_batch, BatchError, ProgressEvent};
use prelabel_core::preannotator::{PipelineError, PipelineSettings};
use prelabel_core::providers::{ProviderError, Providers};
use prelabel_core::store::{Store, StoreError};
use prelabel_core::synth::{write_folder, SceneSpec};
use prelabel_service::{bundle, ConfigError, ServiceConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "prelabel", version, about = "Image pre-annotation: service, headless runs and dataset conversion")]
pub struct Cli {
    /// Store directory [env: PRELABEL_DATA_DIR]
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Fixes every mock-provider random draw [env: PRELABEL_SEED]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Machine-readable output on stdout
    #[arg(long, global = true)]
    pub json: bool,
    /// More log output on stderr (repeat for more)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Start the HTTP service
    Serve {
        #[arg(long)]
        bind: Option<SocketAddr>,
        /// Built web UI to serve at /
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Run pre-annotation without the service
    Preannotate(PreannotateArgs),
    /// Write a project's annotations as a dataset bundle
    Export(ExportArgs),
    /// Merge a dataset bundle into a project
    Import(ImportArgs),
    /// Print project statistics
    Stats {
        #[arg(long)]
        project: String,
    },
    /// List projects
    Projects,
    /// Write a folder of synthetic scenes with ground truth
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
    },
}

#[derive(Debug, Args)]
pub struct PreannotateArgs {
    /// Project name or id; created when missing (defaults to the folder name)
    #[arg(long)]
    pub project: Option<String>,
    /// Folder of images to add before the run
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Comma-separated class names, required when creating a project
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
    /// Detection score threshold in [0, 1]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// detection, obb or segmentation (new projects only)
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ProjectMode>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub project: String,
    #[arg(long, value_parser = parse_format)]
    pub format: Format,
    /// A directory, or a `.zip` file
    #[arg(long)]
    pub out: PathBuf,
    /// Write every shape as its axis-aligned box
    #[arg(long)]
    pub boxes_only: bool,
    /// Also export annotations still awaiting review
    #[arg(long)]
    pub include_pending: bool,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    #[arg(long)]
    pub project: String,
    #[arg(long, value_parser = parse_format)]
    pub format: Format,
    /// Files, directories (walked recursively) or `.zip` bundles
    #[arg(long, num_args = 1.., required = true)]
    pub files: Vec<PathBuf>,
}

fn parse_mode(s: &str) -> Result<ProjectMode, String> {
    ProjectMode::parse(s).ok_or_else(|| format!("{s:?} is not detection, obb or segmentation"))
}

fn parse_format(s: &str) -> Result<Format, String> {
    Format::parse(s).ok_or_else(|| format!("{s:?} is not coco, yolo, voc or csv"))
}

/// A mistake on the caller's side: bad flags, missing inputs, unknown names.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UserError(pub String);

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

fn store_is_user(e: &StoreError) -> bool {
    matches!(e, StoreError::NotFound(_) | StoreError::Conflict(_) | StoreError::Input(_) | StoreError::Rejected(_))
}

/// Exit code for an error: 1 when the input was at fault, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UserError>() || cause.is::<ConfigError>() {
            return EXIT_USER;
        }
        if let Some(e) = cause.downcast_ref::<StoreError>() {
            return if store_is_user(e) { EXIT_USER } else { EXIT_INTERNAL };
        }
        if let Some(e) = cause.downcast_ref::<FormatError>() {
            return match e {
                FormatError::Store(s) if !store_is_user(s) => EXIT_INTERNAL,
                _ => EXIT_USER,
            };
        }
        let provider_input = |e: &ProviderError| matches!(e, ProviderError::Input(_));
        if let Some(e) = cause.downcast_ref::<BatchError>() {
            return match e {
                BatchError::Input(_) | BatchError::Pipeline(PipelineError::Input(_)) => EXIT_USER,
                BatchError::Pipeline(PipelineError::Provider(p)) if provider_input(p) => EXIT_USER,
                BatchError::Store(s) if store_is_user(s) => EXIT_USER,
                _ => EXIT_INTERNAL,
            };
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return match e {
                PipelineError::Input(_) => EXIT_USER,
                PipelineError::Provider(p) if provider_input(p) => EXIT_USER,
                _ => EXIT_INTERNAL,
            };
        }
        if let Some(e) = cause.downcast_ref::<ProviderError>() {
            return if provider_input(e) { EXIT_USER } else { EXIT_INTERNAL };
        }
    }
    EXIT_INTERNAL
}

/// Parses `args` (program name first) and runs the command. Settings come
/// from `env` first, then flags.
pub fn dispatch<I, S>(args: I, env: impl Fn(&str) -> Option<String>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USER
                }
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    // a second call in the same process (tests) keeps the first logger
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli, env, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}

fn config(cli: &Cli, env: impl Fn(&str) -> Option<String>) -> anyhow::Result<ServiceConfig> {
    let mut cfg = ServiceConfig::from_lookup(env)?;
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(s) = cli.seed {
        cfg.provider.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: Cli, env: impl Fn(&str) -> Option<String>, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut cfg = config(&cli, env)?;
    match cli.command {
        Command::Serve { bind, static_dir } => {
            if let Some(b) = bind {
                cfg.bind = b;
            }
            if static_dir.is_some() {
                cfg.static_dir = static_dir;
            }
            let rt = tokio::runtime::Runtime::new().context("starting the async runtime")?;
            rt.block_on(prelabel_service::serve(cfg))
        }
        Command::Preannotate(args) => preannotate(&cfg, args, cli.json, out),
        Command::Export(args) => export(&cfg, args, cli.json, out),
        Command::Import(args) => import(&cfg, args, cli.json, out),
        Command::Stats { project } => {
            let store = open(&cfg)?;
            let p = find_project(&store, &project)?;
            let stats = store.compute_stats(p.id)?;
            if cli.json {
                writeln!(out, "{}", serde_json::to_string(&stats)?)?;
            } else {
                let c = &stats.completion;
                writeln!(
                    out,
                    "project={} images={} annotations={} processed={}",
                    p.name, stats.image_count, stats.annotation_count, stats.processed
                )?;
                writeln!(
                    out,
                    "unannotated={:.3} pending_review={:.3} annotated={:.3} failed={:.3}",
                    c.unannotated, c.pending_review, c.annotated, c.failed
                )?;
                for (class, n) in &stats.class_counts {
                    writeln!(out, "class {class}: {n}")?;
                }
            }
            Ok(())
        }
        Command::Projects => {
            let store = open(&cfg)?;
            let projects = store.projects()?;
            if cli.json {
                writeln!(out, "{}", serde_json::to_string(&projects)?)?;
            } else {
                for p in projects {
                    writeln!(out, "{}\t{}\t{}", p.id, p.name, p.mode)?;
                }
            }
            Ok(())
        }
        Command::Synth { out: dir, count, classes } => {
            let mut spec = SceneSpec::default();
            if !classes.is_empty() {
                spec.classes = classes;
            }
            let paths = write_folder(&dir, &spec, count, cfg.provider.seed)?;
            if cli.json {
                writeln!(out, "{}", serde_json::json!({ "dir": dir, "images": paths.len(), "classes": spec.classes }))?;
            } else {
                writeln!(out, "wrote {} images to {}", paths.len(), dir.display())?;
            }
            Ok(())
        }
    }
}

fn open(cfg: &ServiceConfig) -> anyhow::Result<Store> {
    Store::open(&cfg.data_dir).with_context(|| format!("opening store at {}", cfg.data_dir.display()))
}

/// By exact name, then by numeric id.
fn find_project(store: &Store, key: &str) -> anyhow::Result<Project> {
    match store.project_by_name(key) {
        Ok(p) => Ok(p),
        Err(StoreError::NotFound(_)) => match key.parse() {
            Ok(id) => Ok(store.project(id)?),
            Err(_) => Err(user(format!("no project named {key:?}"))),
        },
        Err(e) => Err(e.into()),
    }
}

fn preannotate(cfg: &ServiceConfig, args: PreannotateArgs, json: bool, out: &mut dyn Write) -> anyhow::Result<()> {
    let folder = match &args.images {
        Some(dir) if !dir.is_dir() => return Err(user(format!("{} is not a directory", dir.display()))),
        Some(dir) => Some(dir.canonicalize()?),
        None => None,
    };
    let name = match (&args.project, &folder) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "headless".into()),
        (None, None) => return Err(user("give --project, --images or both")),
    };
    if let Some(t) = args.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(user(format!("--threshold {t} is outside [0, 1]")));
        }
    }
    let store = open(cfg)?;
    let project = match find_project(&store, &name) {
        Ok(p) => {
            if args.mode.is_some_and(|m| m != p.mode) {
                bail!(UserError(format!("project {:?} is a {} project; --mode cannot change it", p.name, p.mode)));
            }
            for class in &args.classes {
                store.ensure_class(p.id, class)?;
            }
            p
        }
        Err(e) if exit_code(&e) == EXIT_USER && folder.is_some() => {
            if args.classes.is_empty() {
                return Err(user(format!("project {name:?} does not exist; --classes is needed to create it")));
            }
            let mode = args.mode.unwrap_or(ProjectMode::Detection);
            let p = store.create_project(&name, mode, &args.classes, PipelineSettings::default())?;
            log::info!("created {mode} project {name:?}");
            p
        }
        Err(e) => return Err(e),
    };
    if let Some(t) = args.threshold {
        let settings = PipelineSettings { detection_threshold: t, ..project.settings };
        store.update_settings(project.id, &settings)?;
    }
    if let Some(dir) = &folder {
        add_new_images(&store, project.id, dir)?;
    }

    let names: Vec<String> = store.classes(project.id)?.into_iter().map(|c| c.name).collect();
    let providers = Providers::from_config(&cfg.provider, &names)?;
    let sink = |e: &ProgressEvent| log::info!("{}/{} image {}", e.completed, e.total, e.image_id);
    let report = preannotate_batch(&store, project.id, providers, Some(&sink))?;
    if json {
        writeln!(out, "{}", serde_json::to_string(&report)?)?;
    } else {
        writeln!(
            out,
            "processed={} failures={} needs_manual={} annotations={} project={}",
            report.processed, report.failures, report.needs_manual, report.annotations, project.name
        )?;
        for img in report.images.iter().filter(|i| i.error.is_some()) {
            writeln!(out, "failed image {}: {}", img.image_id, img.error.as_deref().unwrap_or_default())?;
        }
    }
    Ok(())
}

/// Ingests the folder's images that the project does not already hold.
fn add_new_images(store: &Store, project: i64, dir: &Path) -> anyhow::Result<()> {
    let known: BTreeSet<String> = store.images(project)?.into_iter().map(|i| i.path).collect();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && prelabel_core::store::has_image_extension(p))
        .filter(|p| !known.contains(&p.to_string_lossy().into_owned()))
        .collect();
    paths.sort();
    let mut added = 0;
    for path in &paths {
        match store.ingest_image(project, path) {
            Ok(_) => added += 1,
            Err(StoreError::Input(reason)) => log::warn!("skipped {}: {reason}", path.display()),
            Err(e) => return Err(e.into()),
        }
    }
    log::info!("added {added} images from {}", dir.display());
    Ok(())
}

fn export(cfg: &ServiceConfig, args: ExportArgs, json: bool, out: &mut dyn Write) -> anyhow::Result<()> {
    let store = open(cfg)?;
    let project = find_project(&store, &args.project)?;
    let policy = if args.boxes_only { GeometryPolicy::BoxesOnly } else { GeometryPolicy::AsStored };
    let bundle = formats::export_project(&store, project.id, args.format, ExportOptions { policy, include_pending: args.include_pending })?;
    let is_zip = args.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("zip"));
    if is_zip {
        if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&args.out, bundle::zip_bundle(&bundle)?)?;
    } else {
        for (name, bytes) in &bundle.files {
            let path = args.out.join(name);
            std::fs::create_dir_all(path.parent().expect("joined path has a parent"))?;
            std::fs::write(&path, bytes)?;
        }
    }
    if json {
        let names: Vec<&String> = bundle.files.keys().collect();
        writeln!(out, "{}", serde_json::json!({ "format": args.format, "out": args.out, "files": names }))?;
    } else {
        writeln!(out, "wrote {} {} file(s) to {}", bundle.files.len(), args.format, args.out.display())?;
    }
    Ok(())
}

/// Collects bundle files keyed by their path relative to the given root.
fn gather(paths: &[PathBuf]) -> anyhow::Result<BTreeMap<String, Vec<u8>>> {
    fn walk(root: &Path, dir: &Path, files: &mut BTreeMap<String, Vec<u8>>) -> anyhow::Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, files)?;
            } else {
                let rel = p.strip_prefix(root).expect("walked under root");
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                files.insert(key, std::fs::read(&p)?);
            }
        }
        Ok(())
    }
    let mut files = BTreeMap::new();
    for p in paths {
        if p.is_dir() {
            walk(p, p, &mut files)?;
        } else if p.is_file() {
            let bytes = std::fs::read(p)?;
            if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("zip")) {
                let unzipped = bundle::unzip_files(&bytes).map_err(|e| user(format!("{}: {e}", p.display())))?;
                files.extend(unzipped);
            } else {
                let name = p.file_name().expect("a file has a name").to_string_lossy().into_owned();
                files.insert(name, bytes);
            }
        } else {
            return Err(user(format!("{} does not exist", p.display())));
        }
    }
    Ok(files)
}

fn import(cfg: &ServiceConfig, args: ImportArgs, json: bool, out: &mut dyn Write) -> anyhow::Result<()> {
    let files = gather(&args.files)?;
    let store = open(cfg)?;
    let project = find_project(&store, &args.project)?;
    let report = formats::import_annotations(&store, project.id, args.format, &files)?;
    if json {
        writeln!(out, "{}", serde_json::to_string(&report)?)?;
    } else {
        writeln!(
            out,
            "matched_images={} added={} skipped={} duplicates={} converted={}",
            report.matched_images,
            report.annotations_added,
            report.skipped.len(),
            report.duplicates,
            report.converted
        )?;
        if !report.created_classes.is_empty() {
            writeln!(out, "created classes: {}", report.created_classes.join(", "))?;
        }
        for s in &report.skipped {
            let at = s.location.as_deref().map(|l| format!(" ({l})")).unwrap_or_default();
            writeln!(out, "skipped {}{at}: {}", s.file, s.reason)?;
        }
        for w in &report.warnings {
            writeln!(out, "warning: {w}")?;
        }
    }
    Ok(())
}
