//! Command-line front end. `dispatch` maps argv to an exit code: 0 on
//! success, 1 on a domain error, 2 on a usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::classes::ClassSet;
use crate::error::{Error, Result};
use crate::fusion::{majority_vote, merge_organ_tumor, merge_partial, PartialLabel};
use crate::metrics::{aggregate_cohort, evaluate_case};
use crate::monitor::{efficiency_report, sample_run, Probe};
use crate::nifti::{list_dir, load_nifti, save_nifti, stem};
use crate::pipeline::config::ResampleTarget;
use crate::pipeline::fixture::write_fixture;
use crate::pipeline::mock;
use crate::pipeline::runner::{read_labels, write_labels};
use crate::pipeline::{load_manifest, OutputMode, Phase, Pipeline, PipelineConfig};
use crate::postprocess::keep_largest;
use crate::preprocess::{clip_normalize, resample_image, resample_labels, ResampleSpec};
use crate::tta::{aggregate, argmax_labels, enumerate_flips};
use crate::volume::{LabelMap, ProbMap, Spacing, Volume};

#[derive(Debug, Parser)]
#[command(name = "iterseg", version, about = "Iterative pseudo-labeling toolkit for 3D CT segmentation")]
pub struct Cli {
    /// JSON config file; values not given fall back to defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dataset manifest (JSON array of case records).
    #[arg(long, global = true, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Pipeline state file; work files are written next to it.
    #[arg(long, global = true, value_name = "FILE")]
    pub state: Option<PathBuf>,
    /// Override a config value by dotted key, e.g. `fusion.min_votes=2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every remaining phase and the final merge, resuming from the
    /// state file.
    Run,
    /// Run one round of a single phase.
    Phase {
        #[arg(long, value_enum)]
        phase: PhaseArg,
    },
    /// Combine label maps.
    #[command(subcommand)]
    Fuse(FuseCommand),
    /// Score predicted label maps against ground truth (DSC and NSD).
    Evaluate(EvaluateArgs),
    /// Clip, normalize and resample an image, or resample a label map.
    Preprocess(PreprocessArgs),
    /// Average flipped probability maps and take the argmax.
    Tta(TtaArgs),
    /// Keep the largest connected component of each configured class.
    Postprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run a command while sampling its memory; report runtime and the
    /// memory-time area above the floor.
    Monitor(MonitorArgs),
    /// Built-in intensity-band segmenter for tests and demos.
    #[command(subcommand)]
    MockSegmenter(MockCommand),
    /// Write the synthetic demo dataset with its manifest and config.
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PhaseArg {
    Tumor,
    Organ,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Phase {
        match p {
            PhaseArg::Tumor => Phase::Tumor,
            PhaseArg::Organ => Phase::Organ,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum FuseCommand {
    /// Voxelwise majority vote; ties follow `fusion.source_priority`.
    Vote {
        /// Source as `id=path`; repeat for each source.
        #[arg(long = "source", required = true, value_name = "ID=PATH")]
        sources: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill a partial annotation from a pseudo label.
    Partial {
        #[arg(long)]
        gt: PathBuf,
        /// Annotated classes of `--gt`, comma separated (default: all).
        #[arg(long, value_delimiter = ',')]
        annotated: Vec<u8>,
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlay a tumor map onto an organ map.
    OrganTumor {
        #[arg(long)]
        organ: PathBuf,
        #[arg(long)]
        tumor: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of predicted label maps.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth label maps with matching names.
    #[arg(long)]
    pub gt: PathBuf,
    /// CSV output; a JSON copy is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Treat the input as a label map (nearest-neighbour resampling, no
    /// intensity normalization).
    #[arg(long)]
    pub labels: bool,
    /// Target spacing `dx,dy,dz` in mm; defaults to an explicit
    /// `resample_target` from the config, else the input spacing.
    #[arg(long, value_parser = parse_spacing)]
    pub target: Option<Spacing>,
}

#[derive(Debug, Args)]
pub struct TtaArgs {
    /// Directory holding `<name>__flip<i>_prob_<k>.nii.gz` files.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub name: String,
    /// Output label map.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional directory for the averaged `<name>_prob_<k>.nii.gz` maps.
    #[arg(long)]
    pub prob_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    /// Sampling period in seconds (default from `efficiency.period_s`).
    #[arg(long)]
    pub period: Option<f64>,
    /// Memory probe command printing bytes; `{pid}` is substituted. Without
    /// it the resident set size of the command is sampled.
    #[arg(long)]
    pub probe: Option<String>,
    /// Write the report JSON here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Command to run.
    #[arg(required = true, last = true)]
    pub cmd: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum MockCommand {
    Train {
        #[arg(long)]
        train_dir: PathBuf,
        #[arg(long)]
        label_dir: PathBuf,
        #[arg(long)]
        model_dir: PathBuf,
    },
    Predict {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, value_enum, default_value = "probabilities")]
        output_mode: ModeArg,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Labels,
    Probabilities,
}

/// Parses `argv` (program name first) and runs the command.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn require<'a>(flag: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    flag.as_deref()
        .ok_or_else(|| Error::InvalidParams(format!("--{name} is required")))
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    PipelineConfig::load(cli.config.as_deref(), &cli.overrides)
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run => {
            let pipeline = build_pipeline(cli)?;
            let report = pipeline.run()?;
            print_history(&report.history);
            for c in &report.cases {
                println!("{}: classes {:?} -> {}", c.case_id, c.classes_present, c.path.display());
            }
            Ok(())
        }
        Command::Phase { phase } => {
            let pipeline = build_pipeline(cli)?;
            let mut state = pipeline.load_state()?;
            pipeline.run_phase(&mut state, (*phase).into())?;
            print_history(&state.history);
            Ok(())
        }
        Command::Fuse(f) => fuse(cli, f),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Preprocess(a) => preprocess(cli, a),
        Command::Tta(a) => tta(a),
        Command::Postprocess { input, output } => {
            let cfg = load_config(cli)?;
            let map = read_labels(input)?;
            let out = keep_largest(&map, cfg.postprocess.classes, cfg.postprocess.connectivity);
            write_labels(&out, output)?;
            Ok(())
        }
        Command::Monitor(a) => monitor(cli, a),
        Command::MockSegmenter(m) => match m {
            MockCommand::Train {
                train_dir,
                label_dir,
                model_dir,
            } => {
                let model = mock::train(train_dir, label_dir, model_dir)?;
                info!("mock model: {} classes from {} cases", model.classes.len(), model.n_train);
                Ok(())
            }
            MockCommand::Predict {
                model_dir,
                input_dir,
                output_dir,
                output_mode,
            } => {
                let mode = match output_mode {
                    ModeArg::Labels => OutputMode::Labels,
                    ModeArg::Probabilities => OutputMode::Probabilities,
                };
                mock::predict(model_dir, input_dir, output_dir, mode)?;
                Ok(())
            }
        },
        Command::MakeFixture { out, seed } => {
            let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
            let paths = write_fixture(out, &exe, *seed)?;
            println!("manifest: {}", paths.manifest.display());
            println!("config:   {}", paths.config.display());
            Ok(())
        }
    }
}

fn build_pipeline(cli: &Cli) -> Result<Pipeline> {
    let config = load_config(cli)?;
    let manifest = load_manifest(require(&cli.manifest, "manifest")?)?;
    let state = require(&cli.state, "state")?;
    Pipeline::new(manifest, config, state)
}

fn print_history(history: &[crate::pipeline::RoundSummary]) {
    println!(
        "{:<6} {:>5} {:>6} {:>6} {:>9} {:>8} {:>12}",
        "phase", "round", "fused", "failed", "coverage", "changed", "heldout DSC"
    );
    for s in history {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{:<6} {:>5} {:>6} {:>6} {:>9.4} {:>8} {:>12}",
            s.phase.name(),
            s.round,
            s.fused.len(),
            s.failed.len(),
            s.coverage(),
            opt(s.changed_fraction),
            opt(s.heldout_mean_dsc)
        );
    }
}

fn fuse(cli: &Cli, cmd: &FuseCommand) -> Result<()> {
    let cfg = load_config(cli)?;
    match cmd {
        FuseCommand::Vote { sources, out } => {
            let mut maps = Vec::with_capacity(sources.len());
            for s in sources {
                let (id, path) = s
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidParams(format!("source {s:?} is not id=path")))?;
                maps.push((id.to_string(), read_labels(Path::new(path))?));
            }
            let mut policy = cfg.fusion.clone();
            for (id, _) in &maps {
                if !policy.source_priority.contains(id) {
                    policy.source_priority.push(id.clone());
                }
            }
            let refs: Vec<(&str, &LabelMap)> = maps.iter().map(|(id, m)| (id.as_str(), m)).collect();
            write_labels(&majority_vote(&refs, &policy)?, out)?;
        }
        FuseCommand::Partial {
            gt,
            annotated,
            pseudo,
            out,
        } => {
            let classes = if annotated.is_empty() {
                ClassSet::ALL
            } else {
                ClassSet::from_classes(annotated.iter().copied())?
            };
            let gt = PartialLabel::new(read_labels(gt)?, classes)?;
            write_labels(&merge_partial(&gt, &read_labels(pseudo)?, &cfg.fusion)?, out)?;
        }
        FuseCommand::OrganTumor { organ, tumor, out } => {
            let merged = merge_organ_tumor(&read_labels(organ)?, &read_labels(tumor)?, cfg.fusion.tumor_overrides_organ)?;
            write_labels(&merged, out)?;
        }
    }
    Ok(())
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let gts = list_dir(&a.gt)?;
    if gts.is_empty() {
        return Err(Error::EmptyInput("no ground-truth files"));
    }
    let preds = list_dir(&a.pred)?;
    let mut reports = Vec::with_capacity(gts.len());
    for g in &gts {
        let name = stem(g).expect("listed files have a stem");
        let p = preds
            .iter()
            .find(|p| stem(p) == Some(name))
            .ok_or_else(|| Error::MissingFile {
                case: name.to_string(),
                path: a.pred.join(format!("{name}.nii.gz")),
            })?;
        reports.push(evaluate_case(name, &read_labels(p)?, &read_labels(g)?, &cfg.nsd)?);
    }
    let summary = aggregate_cohort(&reports)?;
    write_text(&a.out, &summary.to_csv())?;
    write_text(&a.out.with_extension("json"), &summary.to_json())?;
    print!("{}", summary.display_table());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn preprocess(cli: &Cli, a: &PreprocessArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let vol = load_nifti(&a.input)?;
    let target = match (&a.target, cfg.resample_target) {
        (Some(t), _) => *t,
        (None, ResampleTarget::Explicit(s)) => s,
        (None, ResampleTarget::Median) => vol.spacing(),
    };
    let spec = ResampleSpec::new(target);
    if a.labels {
        write_labels(&resample_labels(&vol.into_labels()?, &spec)?, &a.output)?;
    } else {
        let img = clip_normalize(&vol.to_real::<f32>(), &cfg.normalization)?;
        save_nifti(&resample_image(&img, &spec)?, &a.output, is_gz(&a.output))?;
    }
    Ok(())
}

fn parse_spacing(s: &str) -> std::result::Result<Spacing, String> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    match parts[..] {
        [dx, dy, dz] => Spacing::new(dx, dy, dz).map_err(|e| e.to_string()),
        _ => Err(format!("expected dx,dy,dz, got {s:?}")),
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn tta(a: &TtaArgs) -> Result<()> {
    let mut entries = Vec::new();
    for f in enumerate_flips() {
        let name = format!("{}__flip{}", a.name, f.index());
        let mut channels: Vec<Volume<f32>> = Vec::new();
        for k in 0..crate::classes::NUM_CLASSES {
            let p = a.dir.join(format!("{name}_prob_{k}.nii.gz"));
            if !p.is_file() {
                break;
            }
            channels.push(load_nifti(&p)?.to_real::<f32>());
        }
        if !channels.is_empty() {
            entries.push((f, ProbMap::new(channels)?));
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyInput("no flipped probability maps found"));
    }
    let avg = aggregate(&entries)?;
    write_labels(&argmax_labels(&avg)?, &a.out)?;
    if let Some(dir) = &a.prob_out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, ch) in avg.channels().iter().enumerate() {
            save_nifti(ch, dir.join(format!("{}_prob_{k}.nii.gz", a.name)), true)?;
        }
    }
    Ok(())
}

fn monitor(cli: &Cli, a: &MonitorArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let period = a.period.unwrap_or(cfg.efficiency.period_s);
    let probe = match &a.probe {
        Some(p) => Probe::Command(p.split_whitespace().map(String::from).collect()),
        None => Probe::ProcessRss,
    };
    let start = Instant::now();
    let (status, trace) = sample_run(&a.cmd, &probe, period)?;
    let runtime = start.elapsed().as_secs_f64();
    let report = efficiency_report(&trace, runtime, &cfg.efficiency);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(out) = &a.out {
        write_text(out, &json)?;
    }
    if !status.success() {
        return Err(Error::Segmenter {
            command: a.cmd.join(" "),
            status: status.to_string(),
        });
    }
    Ok(())
}
