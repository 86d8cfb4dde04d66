//! End-to-end edit jobs: target generation, mask acquisition, embedding
//! optimization, fine-tuning, and guided sampling, persisted under a job
//! directory with a hash-verified manifest so a rerun skips every stage
//! whose artifacts are intact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{load_checkpoint, save_checkpoint, DenoiserModel};
use crate::embedopt::{self, EmbedOptConfig};
use crate::error::{Error, Result};
use crate::eval;
use crate::finetune::{self, FinetuneConfig};
use crate::io;
use crate::masks::{self, MaskProvider};
use crate::rng::derive_seed_u64;
use crate::sampler::{self, SamplerConfig};
use crate::synthdata::{factor_oracle, OracleReport};
use crate::types::{
    EditSpec, GuidanceMode, ImageTensor, Latent, LossWeights, Mask, MaskSource, SubjectSource,
};

pub const STAGE_ORDER: [&str; 5] = ["target-gen", "masks", "embed-opt", "finetune", "sample"];

/// Per-output measurements recorded by the sample stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputMetrics {
    pub index: usize,
    pub oracle: OracleReport,
    /// MSE inside the object mask against the subject-source image;
    /// absent when the mask region is empty.
    pub inside_mse: Option<f64>,
    /// MSE outside the reference object mask against the reference image.
    pub outside_mse: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub outputs: Vec<OutputMetrics>,
}

#[derive(Debug)]
pub struct EditResult {
    pub images: Vec<ImageTensor>,
    pub metrics: MetricsRecord,
}

#[derive(Debug, Default, Clone)]
struct StageEntry {
    draws: u64,
    artifacts: Vec<(String, String)>,
}

/// Plain-text artifact ledger, one record per stage and per file.
#[derive(Debug, Default)]
pub struct Manifest {
    spec_hash: String,
    stages: BTreeMap<String, StageEntry>,
}

impl Manifest {
    fn path(job_dir: &Path) -> PathBuf {
        job_dir.join("manifest.txt")
    }

    pub fn load_or_empty(job_dir: &Path) -> Result<Self> {
        let path = Self::path(job_dir);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path)?;
        let mut lines = text.lines();
        if lines.next() != Some("MANIFEST v1") {
            return Err(Error::Format {
                path: path.clone(),
                reason: "missing MANIFEST v1 header".into(),
            });
        }
        let mut m = Self::default();
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["spec", h] => m.spec_hash = h.to_string(),
                ["stage", name, draws] => {
                    let entry = m.stages.entry(name.to_string()).or_default();
                    entry.draws = draws.parse().map_err(|_| Error::Format {
                        path: path.clone(),
                        reason: format!("bad draw count in line: {line}"),
                    })?;
                }
                ["artifact", stage, rel, hash] => {
                    m.stages
                        .entry(stage.to_string())
                        .or_default()
                        .artifacts
                        .push((rel.to_string(), hash.to_string()));
                }
                [] => {}
                _ => {
                    return Err(Error::Format {
                        path: path.clone(),
                        reason: format!("unrecognized line: {line}"),
                    })
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, job_dir: &Path) -> Result<()> {
        let mut out = String::from("MANIFEST v1\n");
        out.push_str(&format!("spec {}\n", self.spec_hash));
        for name in STAGE_ORDER {
            if let Some(e) = self.stages.get(name) {
                out.push_str(&format!("stage {name} {}\n", e.draws));
                for (rel, hash) in &e.artifacts {
                    out.push_str(&format!("artifact {name} {rel} {hash}\n"));
                }
            }
        }
        fs::write(Self::path(job_dir), out)?;
        Ok(())
    }

    /// A stage is skippable when recorded and every artifact still hashes
    /// to its recorded value.
    pub fn stage_verified(&self, job_dir: &Path, stage: &str) -> bool {
        let Some(e) = self.stages.get(stage) else {
            return false;
        };
        e.artifacts.iter().all(|(rel, hash)| {
            let p = job_dir.join(rel);
            p.exists() && io::file_hash(&p).map(|h| h == *hash).unwrap_or(false)
        })
    }

    pub fn stage_draws(&self, stage: &str) -> Option<u64> {
        self.stages.get(stage).map(|e| e.draws)
    }

    fn record(&mut self, job_dir: &Path, stage: &str, draws: u64, rels: &[String]) -> Result<()> {
        let mut artifacts = Vec::with_capacity(rels.len());
        for rel in rels {
            artifacts.push((rel.clone(), io::file_hash(&job_dir.join(rel))?));
        }
        self.stages.insert(stage.to_string(), StageEntry { draws, artifacts });
        self.save(job_dir)
    }
}

fn stage_err(stage: &str, e: Error) -> Error {
    match e {
        already @ Error::Stage { .. } => already,
        other => Error::Stage {
            stage: stage.to_string(),
            source: Box::new(other),
        },
    }
}

/// Plain sample from the base model conditioned on the full target text.
pub fn generate_target_image(model: &DenoiserModel, text: &str, seed: u64) -> Result<ImageTensor> {
    if text.trim().is_empty() {
        return Err(Error::Config("target text must be non-empty".into()));
    }
    let e = model.encode_text(text)?;
    let cfg = SamplerConfig::new(
        crate::types::DEFAULT_SAMPLE_STEPS,
        crate::types::SampleMethod::Ancestral,
        GuidanceMode::Plain,
        seed,
    );
    let out = sampler::sample(model, &e, &e, &cfg)?;
    model.codec().decode(&out.latent)
}

struct Job<'a> {
    spec: &'a EditSpec,
    job_dir: &'a Path,
    base_ckpt: &'a Path,
}

impl Job<'_> {
    fn rel(&self, rel: &str) -> PathBuf {
        self.job_dir.join(rel)
    }

    fn save_image_pair(&self, img: &ImageTensor, stem: &str, rels: &mut Vec<String>) -> Result<()> {
        let tns = format!("{stem}.tns");
        let png = format!("{stem}.png");
        io::save_image(img, &self.rel(&tns))?;
        io::image_to_png(img, &self.rel(&png))?;
        rels.push(tns);
        rels.push(png);
        Ok(())
    }

    fn load_image(&self, stem: &str) -> Result<ImageTensor> {
        io::load_image(&self.rel(&format!("{stem}.tns")))
    }

    fn input_image(&self) -> Result<ImageTensor> {
        io::image_from_png(&self.spec.input_image)
    }

    fn model(&self) -> Result<DenoiserModel> {
        load_checkpoint(self.base_ckpt)
    }

    fn encode(&self, model: &DenoiserModel, img: &ImageTensor) -> Result<Latent> {
        model.codec().encode(img)
    }

    fn run_target_gen(&self) -> Result<(u64, Vec<String>)> {
        let model = self.model()?;
        let mut rels = Vec::new();
        let mut draws = 0u64;

        let e_t = model.encode_text(&self.spec.target_text)?;
        let cfg = SamplerConfig::new(
            self.spec.sample_steps,
            self.spec.method,
            GuidanceMode::Plain,
            derive_seed_u64(self.spec.seed, "target-gen"),
        );
        let out = sampler::sample(&model, &e_t, &e_t, &cfg)?;
        draws += out.draw_count;
        let o_t = model.codec().decode(&out.latent)?;
        self.save_image_pair(&o_t, "target/o_t", &mut rels)?;

        let o_r = match &self.spec.reference_image {
            Some(path) => io::image_from_png(path)?,
            None => {
                let e_b = model.encode_text(&self.spec.background_text)?;
                let cfg = SamplerConfig::new(
                    self.spec.sample_steps,
                    self.spec.method,
                    GuidanceMode::Plain,
                    derive_seed_u64(self.spec.seed, "ref-gen"),
                );
                let out = sampler::sample(&model, &e_b, &e_b, &cfg)?;
                draws += out.draw_count;
                model.codec().decode(&out.latent)?
            }
        };
        self.save_image_pair(&o_r, "target/o_r", &mut rels)?;
        Ok((draws, rels))
    }

    fn run_masks(&self) -> Result<(u64, Vec<String>)> {
        let model = self.model()?;
        let (lh, lw, _) = model.codec().latent_shape();
        let mut rels = Vec::new();

        let provider = match &self.spec.object_mask_source {
            MaskSource::SyntheticOracle => MaskProvider::SyntheticOracle,
            MaskSource::File(p) => MaskProvider::File(p.clone()),
        };
        let prep = |m: Mask| -> Result<Mask> {
            let m = masks::dilate(&m, self.spec.dilate_radius);
            masks::to_latent_res(&m, lh, lw)
        };

        let m_input = prep(masks::get_mask(&provider, &self.input_image()?)?)?;
        let m_target = prep(masks::oracle_foreground(&self.load_image("target/o_t")?)?)?;
        let m_ref = prep(masks::oracle_foreground(&self.load_image("target/o_r")?)?)?;

        for (m, stem) in [
            (&m_input, "masks/m_input"),
            (&m_target, "masks/m_target"),
            (&m_ref, "masks/m_ref"),
        ] {
            let tns = format!("{stem}.tns");
            let png = format!("{stem}.png");
            io::save_mask(m, &self.rel(&tns))?;
            io::mask_to_png(m, &self.rel(&png))?;
            rels.push(tns);
            rels.push(png);
        }
        Ok((0, rels))
    }

    fn run_embed_opt(&self) -> Result<(u64, Vec<String>)> {
        let model = self.model()?;
        let mut rels = Vec::new();
        let (e_a, e_b) = embedopt::decompose_target_text(&model, self.spec)?;

        let input_latent = self.encode(&model, &self.input_image()?)?;
        let ref_latent = self.encode(&model, &self.load_image("target/o_r")?)?;
        let m_input = io::load_mask(&self.rel("masks/m_input.tns"))?;

        let (e_a_hat, e_b_hat, trace, draws) = if self.spec.skip_embed_opt {
            (e_a.clone(), e_b.clone(), Vec::new(), 0)
        } else {
            let res = embedopt::optimize_embeddings(
                &model,
                &input_latent,
                Some(&ref_latent),
                &m_input,
                &e_a,
                &e_b,
                &EmbedOptConfig {
                    steps: self.spec.embed_steps,
                    lr: self.spec.embed_lr,
                    seed: self.spec.seed,
                    mode: self.spec.opt_mode,
                },
            )?;
            (res.e_a_hat, res.e_b_hat, res.trace, res.draw_count)
        };
        let e_opt = embedopt::interpolate(&e_a_hat, &e_b_hat, self.spec.alpha)?;

        for (e, stem) in [
            (&e_a, "embed/e_a"),
            (&e_b, "embed/e_b"),
            (&e_a_hat, "embed/e_a_hat"),
            (&e_b_hat, "embed/e_b_hat"),
            (&e_opt, "embed/e_opt"),
        ] {
            let rel = format!("{stem}.tns");
            io::save_embedding(&e.into(), &self.rel(&rel))?;
            rels.push(rel);
        }
        fs::write(
            self.rel("embed/trace.json"),
            serde_json::to_string_pretty(&trace).expect("trace serializes"),
        )?;
        rels.push("embed/trace.json".into());
        Ok((draws, rels))
    }

    fn run_finetune(&self) -> Result<(u64, Vec<String>)> {
        let mut model = self.model()?;
        let mut rels = Vec::new();

        let target = self.encode(&model, &self.load_image("target/o_t")?)?;
        let input = self.encode(&model, &self.input_image()?)?;
        let reference = self.encode(&model, &self.load_image("target/o_r")?)?;
        let mask_subject = match self.spec.subject_source {
            SubjectSource::Target => io::load_mask(&self.rel("masks/m_target.tns"))?,
            SubjectSource::Input => io::load_mask(&self.rel("masks/m_input.tns"))?,
        };
        let mask_ref = io::load_mask(&self.rel("masks/m_ref.tns"))?;
        let e_opt = io::load_embedding(&self.rel("embed/e_opt.tns"))?;

        let report = finetune::finetune(
            &mut model,
            &target,
            &input,
            &reference,
            &mask_subject,
            &mask_ref,
            &e_opt,
            &FinetuneConfig {
                steps: self.spec.finetune_steps,
                lr: self.spec.finetune_lr,
                seed: self.spec.seed,
                weights: LossWeights::new(self.spec.lambda_obj, self.spec.lambda_bg)?,
                subject_source: self.spec.subject_source,
            },
        )?;

        save_checkpoint(&model, &self.rel("finetune/model.tns"))?;
        rels.push("finetune/model.tns".into());
        fs::write(
            self.rel("finetune/trace.json"),
            serde_json::to_string_pretty(
                &report
                    .trace
                    .iter()
                    .map(|s| (s.obj, s.bg, s.total))
                    .collect::<Vec<_>>(),
            )
            .expect("trace serializes"),
        )?;
        rels.push("finetune/trace.json".into());
        Ok((report.draw_count, rels))
    }

    fn run_sample(&self) -> Result<(u64, Vec<String>)> {
        let model = load_checkpoint(&self.rel("finetune/model.tns"))?;
        let mut rels = Vec::new();
        let mut draws = 0u64;

        let e_a_hat = io::load_embedding(&self.rel("embed/e_a_hat.tns"))?;
        let e_opt = io::load_embedding(&self.rel("embed/e_opt.tns"))?;
        let subject_img = match self.spec.subject_source {
            SubjectSource::Target => self.load_image("target/o_t")?,
            SubjectSource::Input => self.input_image()?,
        };
        let mask_subject = match self.spec.subject_source {
            SubjectSource::Target => io::load_mask(&self.rel("masks/m_target.tns"))?,
            SubjectSource::Input => io::load_mask(&self.rel("masks/m_input.tns"))?,
        };
        let o_r = self.load_image("target/o_r")?;
        let mask_ref = io::load_mask(&self.rel("masks/m_ref.tns"))?;

        let mut outputs = Vec::with_capacity(self.spec.n_samples);
        for k in 0..self.spec.n_samples {
            let cfg = SamplerConfig::new(
                self.spec.sample_steps,
                self.spec.method,
                self.spec.guidance,
                derive_seed_u64(self.spec.seed, &format!("sample-{k}")),
            );
            let out = sampler::sample(&model, &e_a_hat, &e_opt, &cfg)?;
            draws += out.draw_count;
            let img = model.codec().decode(&out.latent)?;
            self.save_image_pair(&img, &format!("sample/out_{k:03}"), &mut rels)?;

            let oracle = factor_oracle(&img)?;
            let inside_mse =
                eval::masked_similarity(&img, &subject_img, &mask_subject, eval::Region::Inside)
                    .ok();
            let outside_mse =
                eval::masked_similarity(&img, &o_r, &mask_ref, eval::Region::Outside).ok();
            outputs.push(OutputMetrics {
                index: k,
                oracle,
                inside_mse,
                outside_mse,
            });
        }

        let metrics = MetricsRecord { outputs };
        fs::write(
            self.rel("sample/metrics.json"),
            serde_json::to_string_pretty(&metrics).expect("metrics serialize"),
        )?;
        rels.push("sample/metrics.json".into());
        Ok((draws, rels))
    }

    fn run_stage(&self, stage: &str) -> Result<(u64, Vec<String>)> {
        match stage {
            "target-gen" => self.run_target_gen(),
            "masks" => self.run_masks(),
            "embed-opt" => self.run_embed_opt(),
            "finetune" => self.run_finetune(),
            "sample" => self.run_sample(),
            other => Err(Error::Contract(format!("unknown stage {other}"))),
        }
    }
}

/// Copies the named completed stages (artifacts plus manifest records)
/// from one job directory into another, so a new job whose spec agrees on
/// everything those stages depend on can skip straight past them. The
/// caller is responsible for that agreement; hashes only guard integrity.
pub fn copy_stages(src_job: &Path, dst_job: &Path, stages: &[&str]) -> Result<()> {
    fs::create_dir_all(dst_job)?;
    let src = Manifest::load_or_empty(src_job)?;
    let mut dst = Manifest::load_or_empty(dst_job)?;
    for &stage in stages {
        if !src.stage_verified(src_job, stage) {
            return Err(Error::Contract(format!(
                "source job has no verified {stage} stage"
            )));
        }
        let entry = src.stages[stage].clone();
        for (rel, _) in &entry.artifacts {
            let to = dst_job.join(rel);
            if let Some(parent) = to.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::copy(src_job.join(rel), to)?;
        }
        dst.stages.insert(stage.to_string(), entry);
    }
    dst.save(dst_job)
}

/// Runs (or resumes) a full edit job. Every stage persists its artifacts
/// and records them in the manifest; a stage whose artifacts all verify
/// against their recorded hashes is skipped entirely.
pub fn run_edit(base_ckpt: &Path, spec: &EditSpec, job_dir: &Path) -> Result<EditResult> {
    spec.validate()?;
    for sub in ["target", "masks", "embed", "finetune", "sample"] {
        fs::create_dir_all(job_dir.join(sub))?;
    }

    // A job directory is bound to one spec; resuming under a different
    // one would silently mix artifacts.
    let spec_json = serde_json::to_string_pretty(spec).expect("spec serializes");
    let spec_path = job_dir.join("spec.json");
    if spec_path.exists() {
        let existing = fs::read_to_string(&spec_path)?;
        if existing != spec_json {
            return Err(Error::Contract(
                "job directory was created for a different spec".into(),
            ));
        }
    } else {
        fs::write(&spec_path, &spec_json)?;
    }

    let mut manifest = Manifest::load_or_empty(job_dir)?;
    manifest.spec_hash = io::file_hash(&spec_path)?;

    for stage in STAGE_ORDER {
        if manifest.stage_verified(job_dir, stage) {
            continue;
        }
        let job = Job {
            spec,
            job_dir,
            base_ckpt,
        };
        let (draws, rels) = job.run_stage(stage).map_err(|e| stage_err(stage, e))?;
        manifest
            .record(job_dir, stage, draws, &rels)
            .map_err(|e| stage_err(stage, e))?;
    }

    let mut images = Vec::with_capacity(spec.n_samples);
    for k in 0..spec.n_samples {
        images.push(io::load_image(&job_dir.join(format!("sample/out_{k:03}.tns")))?);
    }
    let metrics: MetricsRecord =
        serde_json::from_str(&fs::read_to_string(job_dir.join("sample/metrics.json"))?)
            .map_err(|e| Error::Format {
                path: job_dir.join("sample/metrics.json"),
                reason: e.to_string(),
            })?;
    Ok(EditResult { images, metrics })
}
