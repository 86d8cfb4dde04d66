use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use layerdiff::backend::{load_checkpoint, save_checkpoint, train_base, TrainConfig};
use layerdiff::error::{Error, Result};
use layerdiff::eval::{self, AblationRow, ExpectedFactors, ALL_ROWS};
use layerdiff::io;
use layerdiff::pipeline::{self, Manifest};
use layerdiff::synthdata::{export_corpus, sample_corpus};
use layerdiff::types::{
    EditSpec, GuidanceMode, MaskSource, OptMode, SampleMethod, SubjectSource, DEFAULT_ALPHA,
    DEFAULT_EMBED_LR, DEFAULT_EMBED_STEPS, DEFAULT_FINETUNE_LR, DEFAULT_FINETUNE_STEPS,
    DEFAULT_LAMBDA_BG, DEFAULT_LAMBDA_OBJ, DEFAULT_N_SAMPLES, DEFAULT_SAMPLE_STEPS,
};

#[derive(Parser)]
#[command(
    name = "layerdiff",
    about = "Layered text-driven image editing on a compact trainable diffusion model",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic scene corpus to a directory of PNGs + manifest.
    MakeCorpus {
        /// Number of scenes.
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base denoiser on a freshly sampled corpus.
    TrainBase {
        /// Corpus size (regenerated deterministically from the seed).
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        epochs: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample an image from a checkpoint conditioned on a caption.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run (or resume) a full edit job.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        /// Job directory (defaults under $LAYERDIFF_JOBROOT).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Run the configuration-grid ablation.
    Ablate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated row ids a..k (default: all).
        #[arg(long, default_value = "a,b,c,d,e,f,g,h,i,j,k")]
        rows: String,
        #[arg(long, default_value_t = 20)]
        n_seeds: usize,
        #[arg(long)]
        jobroot: Option<PathBuf>,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Success counts across interpolation weights.
    AlphaSweep {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated alpha values.
        #[arg(long, default_value = "0,0.3,0.7,1.0")]
        alphas: String,
        #[arg(long, default_value_t = 20)]
        n_seeds: usize,
        #[arg(long)]
        jobroot: Option<PathBuf>,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Score an image against a caption's scene factors.
    Eval {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        caption: String,
        /// Optional external scorer executable (line protocol).
        #[arg(long)]
        scorer: Option<PathBuf>,
    },
    /// Summarize a job directory's manifest.
    Inspect {
        #[arg(long)]
        job: PathBuf,
    },
}

/// Edit-spec flags. Every default equals the library default; a config
/// file (JSON EditSpec schema) may supply any field, and explicit flags
/// override it.
#[derive(Args)]
struct SpecArgs {
    /// JSON config file with the same fields as the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    target_text: Option<String>,
    #[arg(long)]
    object_text: Option<String>,
    #[arg(long)]
    background_text: Option<String>,
    /// Interpolation weight toward the object embedding [default: 0.7]
    #[arg(long)]
    alpha: Option<f64>,
    /// Object-loss weight [default: 2]
    #[arg(long)]
    lambda_obj: Option<f64>,
    /// Background-loss weight [default: 1]
    #[arg(long)]
    lambda_bg: Option<f64>,
    /// Embedding-optimization steps [default: 500]
    #[arg(long)]
    embed_steps: Option<usize>,
    /// Embedding-optimization learning rate [default: 0.001]
    #[arg(long)]
    embed_lr: Option<f64>,
    /// Fine-tune steps [default: 250]
    #[arg(long)]
    finetune_steps: Option<usize>,
    /// Fine-tune learning rate [default: 0.0001]
    #[arg(long)]
    finetune_lr: Option<f64>,
    /// Sampler steps [default: 50]
    #[arg(long)]
    sample_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Object mask source: "oracle" or a PNG path.
    #[arg(long)]
    mask: Option<String>,
    /// Embedding optimization mode: joint | per-stream [default: joint]
    #[arg(long)]
    opt_mode: Option<String>,
    /// Subject source for fine-tuning: target | input [default: target]
    #[arg(long)]
    subject_source: Option<String>,
    /// Guidance: iterative | plain [default: iterative]
    #[arg(long)]
    guidance: Option<String>,
    /// Sampling method: ancestral | ddim [default: ancestral]
    #[arg(long)]
    method: Option<String>,
    /// Output images per job [default: 4]
    #[arg(long)]
    n_samples: Option<usize>,
    /// Mask dilation radius in pixels [default: 0]
    #[arg(long)]
    dilate_radius: Option<usize>,
    /// Skip embedding optimization (use raw embeddings).
    #[arg(long)]
    skip_embed_opt: bool,
}

impl SpecArgs {
    fn resolve(&self) -> Result<EditSpec> {
        let mut spec = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path.clone(), e))?;
                serde_json::from_str::<EditSpec>(&text).map_err(|e| Error::Format {
                    path: path.clone(),
                    reason: e.to_string(),
                })?
            }
            None => {
                let need = |flag: &str, ok: bool| {
                    if ok {
                        Ok(())
                    } else {
                        Err(Error::Config(format!("missing required flag --{flag}")))
                    }
                };
                need("input", self.input.is_some())?;
                need("target-text", self.target_text.is_some())?;
                need("object-text", self.object_text.is_some())?;
                need("background-text", self.background_text.is_some())?;
                EditSpec {
                    input_image: self.input.clone().unwrap(),
                    reference_image: None,
                    target_text: self.target_text.clone().unwrap(),
                    object_text: self.object_text.clone().unwrap(),
                    background_text: self.background_text.clone().unwrap(),
                    alpha: DEFAULT_ALPHA,
                    lambda_obj: DEFAULT_LAMBDA_OBJ,
                    lambda_bg: DEFAULT_LAMBDA_BG,
                    embed_steps: DEFAULT_EMBED_STEPS,
                    embed_lr: DEFAULT_EMBED_LR,
                    finetune_steps: DEFAULT_FINETUNE_STEPS,
                    finetune_lr: DEFAULT_FINETUNE_LR,
                    sample_steps: DEFAULT_SAMPLE_STEPS,
                    seed: 0,
                    object_mask_source: MaskSource::SyntheticOracle,
                    opt_mode: OptMode::default(),
                    subject_source: SubjectSource::default(),
                    guidance: GuidanceMode::default(),
                    method: SampleMethod::default(),
                    n_samples: DEFAULT_N_SAMPLES,
                    dilate_radius: 0,
                    skip_embed_opt: false,
                }
            }
        };

        // Explicit flags override the config file.
        macro_rules! put {
            ($field:ident, $flag:ident) => {
                if let Some(v) = &self.$flag {
                    spec.$field = v.clone();
                }
            };
        }
        put!(input_image, input);
        if self.reference.is_some() {
            spec.reference_image = self.reference.clone();
        }
        put!(target_text, target_text);
        put!(object_text, object_text);
        put!(background_text, background_text);
        put!(alpha, alpha);
        put!(lambda_obj, lambda_obj);
        put!(lambda_bg, lambda_bg);
        put!(embed_steps, embed_steps);
        put!(embed_lr, embed_lr);
        put!(finetune_steps, finetune_steps);
        put!(finetune_lr, finetune_lr);
        put!(sample_steps, sample_steps);
        put!(seed, seed);
        put!(n_samples, n_samples);
        put!(dilate_radius, dilate_radius);
        if self.skip_embed_opt {
            spec.skip_embed_opt = true;
        }
        if let Some(m) = &self.mask {
            spec.object_mask_source = if m == "oracle" {
                MaskSource::SyntheticOracle
            } else {
                MaskSource::File(PathBuf::from(m))
            };
        }
        if let Some(v) = &self.opt_mode {
            spec.opt_mode = match v.as_str() {
                "joint" => OptMode::Joint,
                "per-stream" => OptMode::PerStream,
                other => return Err(Error::Config(format!("unknown --opt-mode {other}"))),
            };
        }
        if let Some(v) = &self.subject_source {
            spec.subject_source = match v.as_str() {
                "target" => SubjectSource::Target,
                "input" => SubjectSource::Input,
                other => return Err(Error::Config(format!("unknown --subject-source {other}"))),
            };
        }
        if let Some(v) = &self.guidance {
            spec.guidance = match v.as_str() {
                "iterative" => GuidanceMode::Iterative,
                "plain" => GuidanceMode::Plain,
                other => return Err(Error::Config(format!("unknown --guidance {other}"))),
            };
        }
        if let Some(v) = &self.method {
            spec.method = match v.as_str() {
                "ancestral" => SampleMethod::Ancestral,
                "ddim" => SampleMethod::DeterministicDdim,
                other => return Err(Error::Config(format!("unknown --method {other}"))),
            };
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn jobroot_default(explicit: Option<PathBuf>, leaf: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let root = std::env::var_os("LAYERDIFF_JOBROOT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("jobs"));
        root.join(leaf)
    })
}

fn parse_rows(rows: &str) -> Result<Vec<AblationRow>> {
    rows.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|id| {
            ALL_ROWS
                .iter()
                .copied()
                .find(|r| r.id() == id)
                .ok_or_else(|| Error::Config(format!("unknown ablation row {id:?}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::MakeCorpus { n, seed, out } => {
            let corpus = sample_corpus(n, seed)?;
            export_corpus(&corpus, &out)?;
            println!("wrote {} scenes to {}", corpus.len(), out.display());
        }
        Cmd::TrainBase {
            n,
            seed,
            epochs,
            lr,
            batch,
            out,
        } => {
            let corpus = sample_corpus(n, seed)?;
            let cfg = TrainConfig {
                epochs,
                lr,
                batch,
                seed,
            };
            let (model, report) = train_base(&corpus, &cfg)?;
            save_checkpoint(&model, &out)?;
            let last = report.epoch_means.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} epochs on {} scenes, final epoch mean loss {last:.6}; checkpoint {}",
                epochs,
                n,
                out.display()
            );
        }
        Cmd::Generate {
            ckpt,
            text,
            seed,
            out,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let img = pipeline::generate_target_image(&model, &text, seed)?;
            io::image_to_png(&img, &out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Edit { ckpt, out, spec } => {
            let spec = spec.resolve()?;
            let job_dir = jobroot_default(out, &format!("edit-{}", spec.seed));
            let result = pipeline::run_edit(&ckpt, &spec, &job_dir)?;
            println!("job {} complete, {} outputs", job_dir.display(), result.images.len());
            for m in &result.metrics.outputs {
                println!(
                    "  out_{:03}: inside_mse {} outside_mse {}",
                    m.index,
                    m.inside_mse.map(|v| format!("{v:.5}")).unwrap_or_else(|| "n/a".into()),
                    m.outside_mse.map(|v| format!("{v:.5}")).unwrap_or_else(|| "n/a".into()),
                );
            }
        }
        Cmd::Ablate {
            ckpt,
            rows,
            n_seeds,
            jobroot,
            spec,
        } => {
            let spec = spec.resolve()?;
            let rows = parse_rows(&rows)?;
            let jobroot = jobroot_default(jobroot, "ablation");
            let table = eval::ablation_run(&ckpt, &spec, &rows, n_seeds, &jobroot)?;
            println!("row  label                success  med_inside_mse  med_outside_mse  failures");
            for r in &table {
                println!(
                    "{:<4} {:<20} {:>6.1}%  {:>14}  {:>15}  {:>8}",
                    r.row,
                    r.label,
                    100.0 * r.success_rate,
                    r.median_inside_mse.map(|v| format!("{v:.5}")).unwrap_or_else(|| "n/a".into()),
                    r.median_outside_mse.map(|v| format!("{v:.5}")).unwrap_or_else(|| "n/a".into()),
                    r.failures
                );
            }
            println!("table written to {}", jobroot.join("ablation.csv").display());
        }
        Cmd::AlphaSweep {
            ckpt,
            alphas,
            n_seeds,
            jobroot,
            spec,
        } => {
            let spec = spec.resolve()?;
            let alphas: Vec<f64> = alphas
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad alpha value {s:?}")))
                })
                .collect::<Result<_>>()?;
            let jobroot = jobroot_default(jobroot, "alpha-sweep");
            let table = eval::alpha_sweep(&ckpt, &spec, &alphas, n_seeds, &jobroot)?;
            for r in &table {
                println!("alpha {:.2}: {}/{} successes", r.alpha, r.successes, r.n_seeds);
            }
            println!("table written to {}", jobroot.join("alpha_sweep.csv").display());
        }
        Cmd::Eval {
            image,
            caption,
            scorer,
        } => {
            let img = io::image_from_png(&image)?;
            let expected = ExpectedFactors::from_caption(&caption)?;
            let report = eval::edit_success(&img, &expected)?;
            println!("success: {}", report.success);
            println!(
                "oracle: {}",
                serde_json::to_string(&report.oracle).expect("report serializes")
            );
            match eval::external_score_hook(scorer.as_deref(), &[(image, caption)]) {
                eval::ScoreOutcome::Absent => println!("clip_score: n/a"),
                eval::ScoreOutcome::Failed(e) => println!("clip_score: failed ({e})"),
                eval::ScoreOutcome::Scores(s) => println!("clip_score: {:.4}", s[0]),
            }
        }
        Cmd::Inspect { job } => {
            inspect_job(&job)?;
        }
    }
    Ok(())
}

fn inspect_job(job: &Path) -> Result<()> {
    if !job.join("manifest.txt").exists() {
        return Err(Error::Config(format!(
            "{} has no manifest.txt",
            job.display()
        )));
    }
    let manifest = Manifest::load_or_empty(job)?;
    println!("job {}", job.display());
    if let Ok(spec) = fs::read_to_string(job.join("spec.json")) {
        if let Ok(spec) = serde_json::from_str::<EditSpec>(&spec) {
            println!("  target text: {:?}", spec.target_text);
            println!("  seed: {}", spec.seed);
        }
    }
    for stage in pipeline::STAGE_ORDER {
        match manifest.stage_draws(stage) {
            Some(draws) => {
                let ok = manifest.stage_verified(job, stage);
                println!(
                    "  {stage:<11} {}  rng draws {draws}",
                    if ok { "done    " } else { "stale   " }
                );
            }
            None => println!("  {stage:<11} pending"),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
