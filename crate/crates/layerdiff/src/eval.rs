//! Scoring and ablation harness: analytic edit success, masked MSE
//! similarity, the configuration-grid ablation table, the alpha sweep,
//! and an optional external scorer hook.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pipeline::{self};
use crate::rng::derive_seed_u64;
use crate::synthdata::{factor_oracle, OracleReport, BGS, COLORS, SHAPES, SIZES};
use crate::types::{EditSpec, GuidanceMode, ImageTensor, Mask};

/// Expected scene factors with wildcards; `None` fields are not scored.
/// Captions never state a position, so `from_caption` leaves it open.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpectedFactors {
    pub fg_shape: Option<crate::synthdata::FgShape>,
    pub fg_color: Option<crate::synthdata::FgColor>,
    pub fg_size: Option<crate::synthdata::FgSize>,
    pub fg_position: Option<crate::synthdata::FgPosition>,
    pub bg_style: Option<crate::synthdata::BgStyle>,
}

impl ExpectedFactors {
    /// Reads the grammar words out of a caption like
    /// "a large red square on a blue background". Unknown or missing
    /// factor words simply stay wildcards; an entirely factor-free
    /// caption is rejected.
    pub fn from_caption(caption: &str) -> Result<Self> {
        let mut out = Self::default();
        let words: Vec<String> = caption.split_whitespace().map(|w| w.to_lowercase()).collect();
        // "on a X background": the bg color word directly precedes "background".
        let bg_idx = words.iter().position(|w| w == "background");
        for (i, w) in words.iter().enumerate() {
            let is_bg_word = bg_idx == Some(i + 1);
            if let Some(&s) = SHAPES.iter().find(|s| s.word() == w) {
                out.fg_shape = Some(s);
            } else if let Some(&s) = SIZES.iter().find(|s| s.word() == w) {
                out.fg_size = Some(s);
            } else if is_bg_word {
                if let Some(&b) = BGS.iter().find(|b| b.word() == w) {
                    out.bg_style = Some(b);
                }
            } else if let Some(&c) = COLORS.iter().find(|c| c.word() == w) {
                out.fg_color = Some(c);
            }
        }
        if out == Self::default() {
            return Err(Error::Config(format!(
                "caption {caption:?} names no scene factors"
            )));
        }
        Ok(out)
    }

    pub fn matches(&self, report: &OracleReport) -> bool {
        if let Some(bg) = self.bg_style {
            if report.bg != bg {
                return false;
            }
        }
        let wants_fg = self.fg_shape.is_some()
            || self.fg_color.is_some()
            || self.fg_size.is_some()
            || self.fg_position.is_some();
        if !wants_fg {
            return true;
        }
        let Some(fg) = &report.fg else {
            return false;
        };
        self.fg_shape.is_none_or(|v| fg.shape == v)
            && self.fg_color.is_none_or(|v| fg.color == v)
            && self.fg_size.is_none_or(|v| fg.size == v)
            && self.fg_position.is_none_or(|v| fg.position == v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuccessReport {
    pub success: bool,
    pub oracle: OracleReport,
}

/// Deterministic pass/fail: the oracle's reading must agree with every
/// non-wildcard expected factor.
pub fn edit_success(image: &ImageTensor, expected: &ExpectedFactors) -> Result<SuccessReport> {
    let oracle = factor_oracle(image)?;
    Ok(SuccessReport {
        success: expected.matches(&oracle),
        oracle,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Inside,
    Outside,
}

/// Mean squared error over the selected mask region, across all channels.
pub fn masked_similarity(
    img: &ImageTensor,
    other: &ImageTensor,
    mask: &Mask,
    region: Region,
) -> Result<f64> {
    if img.height() != other.height() || img.width() != other.width() {
        return Err(Error::shape(
            format!("{}x{}", img.height(), img.width()),
            format!("{}x{}", other.height(), other.width()),
        ));
    }
    if mask.height() != img.height() || mask.width() != img.width() {
        return Err(Error::shape(
            format!("{}x{} mask", img.height(), img.width()),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let inside = mask.get(y, x) == 1.0;
            let selected = match region {
                Region::Inside => inside,
                Region::Outside => !inside,
            };
            if !selected {
                continue;
            }
            let (pa, pb) = (img.pixel(y, x), other.pixel(y, x));
            for c in 0..3 {
                let d = pa[c] - pb[c];
                sum += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::DegenerateRegion(format!(
            "{region:?} region of the mask is empty"
        )));
    }
    Ok(sum / count as f64)
}

/// One row of the configuration grid. Labels follow the usual ablation
/// convention: each row switches off or rescales exactly one ingredient
/// relative to the full configuration (f).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationRow {
    /// (a) drop the object loss term.
    DropObjLoss,
    /// (b) drop the background loss term.
    DropBgLoss,
    /// (c) equal weights 1/1.
    EqualWeights,
    /// (d) heavier object weight 4/1.
    HeavyObj,
    /// (e) doubled background weight 2/2.
    HeavyBg,
    /// (f) full configuration.
    Full,
    /// (g) skip the embedding-optimization stage.
    DropEmbedOpt,
    /// (h) skip fine-tuning.
    DropFinetune,
    /// (i) plain instead of alternating guidance.
    DropIterativeGuidance,
    /// (j) alpha = 1 (object embedding only).
    AlphaOne,
    /// (k) alpha = 0 (background embedding only).
    AlphaZero,
}

pub const ALL_ROWS: [AblationRow; 11] = [
    AblationRow::DropObjLoss,
    AblationRow::DropBgLoss,
    AblationRow::EqualWeights,
    AblationRow::HeavyObj,
    AblationRow::HeavyBg,
    AblationRow::Full,
    AblationRow::DropEmbedOpt,
    AblationRow::DropFinetune,
    AblationRow::DropIterativeGuidance,
    AblationRow::AlphaOne,
    AblationRow::AlphaZero,
];

impl AblationRow {
    pub fn id(self) -> &'static str {
        match self {
            Self::DropObjLoss => "a",
            Self::DropBgLoss => "b",
            Self::EqualWeights => "c",
            Self::HeavyObj => "d",
            Self::HeavyBg => "e",
            Self::Full => "f",
            Self::DropEmbedOpt => "g",
            Self::DropFinetune => "h",
            Self::DropIterativeGuidance => "i",
            Self::AlphaOne => "j",
            Self::AlphaZero => "k",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::DropObjLoss => "no object loss",
            Self::DropBgLoss => "no background loss",
            Self::EqualWeights => "weights 1/1",
            Self::HeavyObj => "weights 4/1",
            Self::HeavyBg => "weights 2/2",
            Self::Full => "full",
            Self::DropEmbedOpt => "no embedding opt",
            Self::DropFinetune => "no fine-tune",
            Self::DropIterativeGuidance => "plain guidance",
            Self::AlphaOne => "alpha=1",
            Self::AlphaZero => "alpha=0",
        }
    }

    pub fn apply(self, base: &EditSpec) -> EditSpec {
        let mut s = base.clone();
        match self {
            Self::DropObjLoss => s.lambda_obj = 0.0,
            Self::DropBgLoss => s.lambda_bg = 0.0,
            Self::EqualWeights => {
                s.lambda_obj = 1.0;
                s.lambda_bg = 1.0;
            }
            Self::HeavyObj => s.lambda_obj = 4.0,
            Self::HeavyBg => s.lambda_bg = 2.0,
            Self::Full => {}
            Self::DropEmbedOpt => s.skip_embed_opt = true,
            Self::DropFinetune => s.finetune_steps = 0,
            Self::DropIterativeGuidance => s.guidance = GuidanceMode::Plain,
            Self::AlphaOne => s.alpha = 1.0,
            Self::AlphaZero => s.alpha = 0.0,
        }
        s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowResult {
    pub row: String,
    pub label: String,
    pub n_seeds: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub median_inside_mse: Option<f64>,
    pub median_outside_mse: Option<f64>,
    pub failures: usize,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Hash of the spec fields a stage prefix depends on, used to reuse
/// completed prefix stages across grid rows that agree on them.
fn prefix_sig(spec: &EditSpec, depth: usize) -> String {
    let mut h = Sha256::new();
    let mut feed = |s: String| h.update(s.as_bytes());
    // Depth 1: target-gen + masks.
    feed(format!(
        "{:?}|{:?}|{}|{}|{}|{:?}|{:?}|{}|{}",
        spec.input_image,
        spec.reference_image,
        spec.target_text,
        spec.background_text,
        spec.sample_steps,
        spec.method,
        spec.object_mask_source,
        spec.dilate_radius,
        spec.seed,
    ));
    if depth >= 2 {
        // Embed-opt additionally depends on the decomposition and alpha.
        feed(format!(
            "|{}|{}|{}|{:?}|{}|{}",
            spec.object_text, spec.embed_steps, spec.embed_lr, spec.opt_mode, spec.skip_embed_opt, spec.alpha,
        ));
    }
    if depth >= 3 {
        feed(format!(
            "|{}|{}|{}|{}|{:?}",
            spec.finetune_steps, spec.finetune_lr, spec.lambda_obj, spec.lambda_bg, spec.subject_source,
        ));
    }
    format!("{:x}", h.finalize())
}

const DEPTH_STAGES: [&[&str]; 3] = [
    &["target-gen", "masks"],
    &["target-gen", "masks", "embed-opt"],
    &["target-gen", "masks", "embed-opt", "finetune"],
];

/// Tracks completed jobs by prefix signature so later jobs start from the
/// deepest shared prefix instead of recomputing it.
#[derive(Default)]
pub struct PrefixCache {
    by_sig: HashMap<String, PathBuf>,
}

impl PrefixCache {
    pub fn warm_start(&self, spec: &EditSpec, job_dir: &Path) -> Result<()> {
        for depth in (1..=3).rev() {
            if let Some(src) = self.by_sig.get(&prefix_sig(spec, depth)) {
                if src != job_dir {
                    pipeline::copy_stages(src, job_dir, DEPTH_STAGES[depth - 1])?;
                }
                return Ok(());
            }
        }
        Ok(())
    }

    pub fn register(&mut self, spec: &EditSpec, job_dir: &Path) {
        for depth in 1..=3 {
            self.by_sig
                .entry(prefix_sig(spec, depth))
                .or_insert_with(|| job_dir.to_path_buf());
        }
    }
}

/// Runs one edit job per (row, seed); a seed counts as a success when any
/// of its output images satisfies the expected factors of the target
/// text. Per-row failures are recorded and the run continues.
pub fn ablation_run(
    base_ckpt: &Path,
    base_spec: &EditSpec,
    rows: &[AblationRow],
    n_seeds: usize,
    jobroot: &Path,
) -> Result<Vec<RowResult>> {
    if n_seeds == 0 {
        return Err(Error::Config("ablation needs n_seeds >= 1".into()));
    }
    let expected = ExpectedFactors::from_caption(&base_spec.target_text)?;
    fs::create_dir_all(jobroot)?;
    let mut cache = PrefixCache::default();
    let mut results = Vec::with_capacity(rows.len());

    for &row in rows {
        let mut successes = 0usize;
        let mut failures = 0usize;
        let mut inside = Vec::new();
        let mut outside = Vec::new();
        for k in 0..n_seeds {
            let mut spec = row.apply(base_spec);
            spec.seed = derive_seed_u64(base_spec.seed, &format!("grid-seed-{k}"));
            let job_dir = jobroot.join(format!("row-{}-seed-{k}", row.id()));
            cache.warm_start(&spec, &job_dir)?;
            match pipeline::run_edit(base_ckpt, &spec, &job_dir) {
                Ok(res) => {
                    cache.register(&spec, &job_dir);
                    let mut any = false;
                    for (img, m) in res.images.iter().zip(&res.metrics.outputs) {
                        if edit_success(img, &expected)?.success {
                            any = true;
                        }
                        if let Some(v) = m.inside_mse {
                            inside.push(v);
                        }
                        if let Some(v) = m.outside_mse {
                            outside.push(v);
                        }
                    }
                    if any {
                        successes += 1;
                    }
                }
                Err(_) => failures += 1,
            }
        }
        results.push(RowResult {
            row: row.id().to_string(),
            label: row.label().to_string(),
            n_seeds,
            successes,
            success_rate: successes as f64 / n_seeds as f64,
            median_inside_mse: median(inside),
            median_outside_mse: median(outside),
            failures,
        });
    }

    write_row_csv(&results, &jobroot.join("ablation.csv"))?;
    Ok(results)
}

pub fn write_row_csv(rows: &[RowResult], path: &Path) -> Result<()> {
    let mut out = String::from(
        "row,label,n_seeds,successes,success_rate,median_inside_mse,median_outside_mse,failures\n",
    );
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "n/a".into());
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.3},{},{},{}\n",
            r.row,
            r.label,
            r.n_seeds,
            r.successes,
            r.success_rate,
            opt(r.median_inside_mse),
            opt(r.median_outside_mse),
            r.failures
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaResult {
    pub alpha: f64,
    pub n_seeds: usize,
    pub successes: usize,
}

/// Success counts per interpolation weight, sharing prefix stages across
/// the grid (alphas only diverge from the embed-opt stage onward).
pub fn alpha_sweep(
    base_ckpt: &Path,
    base_spec: &EditSpec,
    alphas: &[f64],
    n_seeds: usize,
    jobroot: &Path,
) -> Result<Vec<AlphaResult>> {
    if alphas.is_empty() || n_seeds == 0 {
        return Err(Error::Config("alpha sweep needs alphas and n_seeds >= 1".into()));
    }
    let expected = ExpectedFactors::from_caption(&base_spec.target_text)?;
    fs::create_dir_all(jobroot)?;
    let mut cache = PrefixCache::default();
    let mut results = Vec::with_capacity(alphas.len());

    for (ai, &alpha) in alphas.iter().enumerate() {
        let mut successes = 0usize;
        for k in 0..n_seeds {
            let mut spec = base_spec.clone();
            spec.alpha = alpha;
            spec.seed = derive_seed_u64(base_spec.seed, &format!("grid-seed-{k}"));
            let job_dir = jobroot.join(format!("alpha-{ai}-seed-{k}"));
            cache.warm_start(&spec, &job_dir)?;
            let res = pipeline::run_edit(base_ckpt, &spec, &job_dir)?;
            cache.register(&spec, &job_dir);
            if res
                .images
                .iter()
                .any(|img| edit_success(img, &expected).map(|r| r.success).unwrap_or(false))
            {
                successes += 1;
            }
        }
        results.push(AlphaResult {
            alpha,
            n_seeds,
            successes,
        });
    }

    let mut out = String::from("alpha,n_seeds,successes\n");
    for r in &results {
        out.push_str(&format!("{},{},{}\n", r.alpha, r.n_seeds, r.successes));
    }
    fs::write(jobroot.join("alpha_sweep.csv"), out)?;
    Ok(results)
}

/// Outcome of forwarding a batch to an external scorer.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreOutcome {
    /// No scorer registered; tables report "n/a".
    Absent,
    /// Scorer ran but transport or parsing failed; non-fatal.
    Failed(String),
    Scores(Vec<f64>),
}

/// Line protocol: one `<image path>\t<text>` pair per stdin line, one
/// float per stdout line, order-preserving.
pub fn external_score_hook(scorer: Option<&Path>, pairs: &[(PathBuf, String)]) -> ScoreOutcome {
    let Some(cmd) = scorer else {
        return ScoreOutcome::Absent;
    };
    let run = || -> std::result::Result<Vec<f64>, String> {
        let mut child = Command::new(cmd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| format!("spawn failed: {e}"))?;
        {
            let stdin = child.stdin.as_mut().ok_or("no stdin")?;
            for (path, text) in pairs {
                writeln!(stdin, "{}\t{}", path.display(), text)
                    .map_err(|e| format!("write failed: {e}"))?;
            }
        }
        let out = child
            .wait_with_output()
            .map_err(|e| format!("wait failed: {e}"))?;
        if !out.status.success() {
            return Err(format!("scorer exited with {}", out.status));
        }
        let scores: Vec<f64> = String::from_utf8_lossy(&out.stdout)
            .lines()
            .map(|l| l.trim().parse::<f64>().map_err(|e| format!("bad score line {l:?}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        if scores.len() != pairs.len() {
            return Err(format!(
                "scorer returned {} scores for {} pairs",
                scores.len(),
                pairs.len()
            ));
        }
        Ok(scores)
    };
    match run() {
        Ok(s) => ScoreOutcome::Scores(s),
        Err(e) => ScoreOutcome::Failed(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{render_scene, BgStyle, FgColor, FgPosition, FgShape, FgSize, SceneFactors};
    use crate::types::ResolutionTag;

    fn scene() -> SceneFactors {
        SceneFactors {
            fg_shape: FgShape::Square,
            fg_color: FgColor::Red,
            fg_size: FgSize::Large,
            fg_position: FgPosition::Center,
            bg_style: BgStyle::Blue,
        }
    }

    #[test]
    fn caption_parsing_extracts_factors_with_position_wildcard() {
        let e = ExpectedFactors::from_caption("a large red square on a blue background").unwrap();
        assert_eq!(e.fg_shape, Some(FgShape::Square));
        assert_eq!(e.fg_color, Some(FgColor::Red));
        assert_eq!(e.fg_size, Some(FgSize::Large));
        assert_eq!(e.bg_style, Some(BgStyle::Blue));
        assert_eq!(e.fg_position, None);
        // "green" appears both as fg color and bg style; position decides.
        let g = ExpectedFactors::from_caption("a small green circle on a green background").unwrap();
        assert_eq!(g.fg_color, Some(FgColor::Green));
        assert_eq!(g.bg_style, Some(BgStyle::Green));
        assert!(ExpectedFactors::from_caption("sphinx of quartz").is_err());
    }

    #[test]
    fn clean_render_succeeds_and_gray_fails() {
        let sample = render_scene(scene(), 0);
        let expected = ExpectedFactors::from_caption(&sample.caption).unwrap();
        let rep = edit_success(&sample.image, &expected).unwrap();
        assert!(rep.success);

        let gray = ImageTensor::new(vec![0.6; 32 * 32 * 3], 32, 32).unwrap();
        let rep = edit_success(&gray, &expected).unwrap();
        assert!(!rep.success);
        assert!(rep.oracle.fg.is_none());
    }

    #[test]
    fn masked_similarity_identity_symmetry_and_full_mask() {
        let a = render_scene(scene(), 0).image;
        let mut f2 = scene();
        f2.bg_style = BgStyle::Sand;
        let b = render_scene(f2, 0).image;
        let ones = Mask::ones(32, 32, ResolutionTag::Image);

        assert_eq!(masked_similarity(&a, &a, &ones, Region::Inside).unwrap(), 0.0);
        let ab = masked_similarity(&a, &b, &ones, Region::Inside).unwrap();
        let ba = masked_similarity(&b, &a, &ones, Region::Inside).unwrap();
        assert_eq!(ab, ba);
        // Full mask inside = plain MSE.
        let plain: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / (32.0 * 32.0 * 3.0);
        assert!((ab - plain).abs() < 1e-12);
        // Empty region errors.
        let err = masked_similarity(&a, &b, &ones, Region::Outside).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn ablation_rows_modify_exactly_one_ingredient() {
        let base = crate::types::EditSpec {
            input_image: "x.png".into(),
            reference_image: None,
            target_text: "a large red square on a green background".into(),
            object_text: "a large red square".into(),
            background_text: "on a green background".into(),
            alpha: 0.7,
            lambda_obj: 2.0,
            lambda_bg: 1.0,
            embed_steps: 10,
            embed_lr: 1e-3,
            finetune_steps: 10,
            finetune_lr: 1e-4,
            sample_steps: 10,
            seed: 0,
            object_mask_source: crate::types::MaskSource::SyntheticOracle,
            opt_mode: crate::types::OptMode::Joint,
            subject_source: crate::types::SubjectSource::Target,
            guidance: GuidanceMode::Iterative,
            method: crate::types::SampleMethod::Ancestral,
            n_samples: 1,
            dilate_radius: 0,
            skip_embed_opt: false,
        };
        assert_eq!(AblationRow::DropObjLoss.apply(&base).lambda_obj, 0.0);
        assert_eq!(AblationRow::DropBgLoss.apply(&base).lambda_bg, 0.0);
        assert_eq!(AblationRow::Full.apply(&base), base);
        assert!(AblationRow::DropEmbedOpt.apply(&base).skip_embed_opt);
        assert_eq!(AblationRow::DropFinetune.apply(&base).finetune_steps, 0);
        assert_eq!(
            AblationRow::DropIterativeGuidance.apply(&base).guidance,
            GuidanceMode::Plain
        );
        assert_eq!(AblationRow::AlphaOne.apply(&base).alpha, 1.0);
        assert_eq!(AblationRow::AlphaZero.apply(&base).alpha, 0.0);
        let ids: Vec<&str> = ALL_ROWS.iter().map(|r| r.id()).collect();
        assert_eq!(ids, ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k"]);

        // Rows sharing target/mask settings share the depth-1 signature
        // but split once their deeper settings differ.
        let f = AblationRow::Full.apply(&base);
        let a = AblationRow::DropObjLoss.apply(&base);
        let i = AblationRow::DropIterativeGuidance.apply(&base);
        assert_eq!(prefix_sig(&f, 1), prefix_sig(&a, 1));
        assert_eq!(prefix_sig(&f, 2), prefix_sig(&a, 2));
        assert_ne!(prefix_sig(&f, 3), prefix_sig(&a, 3));
        assert_eq!(prefix_sig(&f, 3), prefix_sig(&i, 3));
        let j = AblationRow::AlphaOne.apply(&base);
        assert_eq!(prefix_sig(&f, 1), prefix_sig(&j, 1));
        assert_ne!(prefix_sig(&f, 2), prefix_sig(&j, 2));
    }

    #[test]
    fn median_odd_even_empty() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![1.0, 2.0, 3.0, 4.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }

    #[test]
    fn score_hook_absent_mock_and_order() {
        let pairs = vec![
            (PathBuf::from("a.png"), "a red square".to_string()),
            (PathBuf::from("b.png"), "a blue circle".to_string()),
        ];
        assert_eq!(external_score_hook(None, &pairs), ScoreOutcome::Absent);

        let tmp = tempfile::tempdir().unwrap();
        let script = tmp.path().join("scorer.sh");
        fs::write(&script, "#!/bin/sh\nwhile read -r _line; do echo 0.5; done\n").unwrap();
        let mut perm = fs::metadata(&script).unwrap().permissions();
        use std::os::unix::fs::PermissionsExt;
        perm.set_mode(0o755);
        fs::set_permissions(&script, perm).unwrap();
        match external_score_hook(Some(&script), &pairs) {
            ScoreOutcome::Scores(s) => assert_eq!(s, vec![0.5, 0.5]),
            other => panic!("unexpected outcome {other:?}"),
        }

        // Transport failure is recorded, not fatal.
        match external_score_hook(Some(Path::new("/nonexistent/scorer")), &pairs) {
            ScoreOutcome::Failed(_) => {}
            other => panic!("unexpected outcome {other:?}"),
        }
    }
}
