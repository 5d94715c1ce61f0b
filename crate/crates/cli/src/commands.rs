//! One function per subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use ndarray::Array3;
use serde::Serialize;

use ksdiff::config::ExperimentConfig;
use ksdiff::container::{Array, Container};
use ksdiff::data::{bicubic_upsample, image_from_tensor, tensor_from_image, Dataset, Image};
use ksdiff::infer::{fuse, SamplerSettings};
use ksdiff::diffusion::SigmaPolicy;
use ksdiff::metrics::{self, MetricsReport};
use ksdiff::training::{Checkpoint, KsDiff, LogRow, Stage, Trainer};
use ksdiff::Error;

use crate::error::{CliError, CliResult};
use crate::pca::Pca2;
use crate::render;

pub const OUTPUT_ROOT_ENV: &str = "KSDIFF_OUTPUT_ROOT";
/// Offset between the train and test synthesis seeds.
const TEST_SEED_OFFSET: u64 = 0x7E57;

/// Resolved configuration and output location for one invocation.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

/// `--output` wins; otherwise a relative `output_dir` is placed under the
/// environment root when one is set.
pub fn resolve_output(flag: Option<PathBuf>, cfg_dir: &Path, env_root: Option<PathBuf>) -> PathBuf {
    if let Some(p) = flag {
        return p;
    }
    match env_root {
        Some(root) if cfg_dir.is_relative() => root.join(cfg_dir),
        _ => cfg_dir.to_path_buf(),
    }
}

impl Context {
    pub fn new(cfg: ExperimentConfig, out: PathBuf) -> Self {
        Self { cfg, out }
    }

    pub fn data_root(&self) -> PathBuf {
        if self.cfg.data.root.is_relative() {
            self.out.join(&self.cfg.data.root)
        } else {
            self.cfg.data.root.clone()
        }
    }

    pub fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        self.out.join("checkpoints").join(format!("{}.safetensors", stage.as_str()))
    }

    pub fn log_path(&self, stage: Stage) -> PathBuf {
        self.out.join("logs").join(format!("{}.csv", stage.as_str()))
    }

    /// Writes the fully resolved config next to the command's outputs.
    pub fn echo_config(&self, command: &str) -> CliResult<()> {
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join(format!("{command}.config.toml")), self.cfg.to_toml()?)?;
        Ok(())
    }

    fn sampler(&self, seed_offset: u64) -> SamplerSettings {
        SamplerSettings {
            steps: self.cfg.infer.sampling_steps,
            sigma: SigmaPolicy { eta: self.cfg.infer.eta },
            seed: self.cfg.infer.seed.wrapping_add(seed_offset),
        }
    }

    fn inference_model(&self, checkpoint: Option<PathBuf>) -> CliResult<KsDiff> {
        let path = checkpoint.unwrap_or_else(|| self.checkpoint_path(Stage::Diffusion));
        let ck = Checkpoint::load_compatible(&path, &self.cfg.model)?;
        if ck.stage != Stage::Diffusion {
            return Err(Error::Checkpoint(format!("{} is not a diffusion-stage checkpoint", path.display())).into());
        }
        let model = ck.build_model(DType::F32)?;
        if self.cfg.infer.use_ema {
            ck.apply_ema(&model)?;
        }
        Ok(model)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn image_array(img: &Image) -> Array {
    let (h, w, c) = img.dim();
    Array::F32 {
        shape: vec![h, w, c],
        data: img.iter().copied().collect(),
    }
}

fn array_image(a: &Array, name: &str) -> CliResult<Image> {
    let shape: [usize; 3] = a
        .shape()
        .try_into()
        .map_err(|_| Error::Data(format!("{name} must be (H, W, C), got {:?}", a.shape())))?;
    Ok(Array3::from_shape_vec(shape, a.to_f32()).map_err(|e| Error::Data(e.to_string()))?)
}

fn sample_name(i: usize) -> String {
    format!("sample_{i:04}")
}

fn parse_sample_index(path: &Path) -> Option<usize> {
    path.file_stem()?.to_str()?.strip_prefix("sample_")?.parse().ok()
}

fn select(indices: &[usize], n: usize) -> CliResult<Vec<usize>> {
    if indices.is_empty() {
        return Ok((0..n).collect());
    }
    if let Some(bad) = indices.iter().find(|i| **i >= n) {
        return Err(Error::Data(format!("sample {bad} out of range ({n} samples)")).into());
    }
    Ok(indices.to_vec())
}

#[derive(Debug, Serialize)]
pub struct SynthSummary {
    pub splits: BTreeMap<String, usize>,
    pub root: PathBuf,
}

pub fn synth(ctx: &Context, overwrite: bool) -> CliResult<SynthSummary> {
    ctx.echo_config("synth")?;
    let s = &ctx.cfg.data.synth;
    let bands = ctx.cfg.model.bands;
    let root = ctx.data_root();
    let jobs = [
        (&ctx.cfg.data.train_split, s.seed, s.train_samples, s.size),
        (&ctx.cfg.data.test_split, s.seed.wrapping_add(TEST_SEED_OFFSET), s.test_samples, s.test_size),
    ];
    for (split, ..) in &jobs {
        let dir = Dataset::split_dir(&root, split);
        if dir.exists() && !overwrite {
            return Err(Error::config(format!("{} already exists; pass --overwrite to replace it", dir.display())).into());
        }
    }
    let mut splits = BTreeMap::new();
    for (split, seed, n, size) in jobs {
        let dir = Dataset::split_dir(&root, split);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        Dataset::synthetic(split, seed, n, size, bands, s.ratio)?.save(&root)?;
        splits.insert(split.clone(), n);
        log::info!("wrote {n} samples to {}", dir.display());
    }
    Ok(SynthSummary { splits, root })
}

/// Writes the loss log: rows kept from before a resume, then this run's rows.
fn write_log(ctx: &Context, trainer: &Trainer, earlier: &[String]) -> CliResult<()> {
    let path = ctx.log_path(trainer.stage);
    trainer.write_log(&path)?;
    if earlier.is_empty() {
        return Ok(());
    }
    let text = std::fs::read_to_string(&path)?;
    let mut lines = text.lines();
    let mut out = vec![lines.next().unwrap_or_default().to_string()];
    out.extend(earlier.iter().cloned());
    out.extend(lines.map(str::to_string));
    std::fs::write(&path, out.join("\n") + "\n")?;
    Ok(())
}

fn train_loop(
    ctx: &Context,
    trainer: &mut Trainer,
    data: &Dataset,
    batch: usize,
    iterations: u64,
    earlier: &[String],
) -> CliResult<()> {
    let train = &ctx.cfg.train;
    let every = train.checkpoint_every;
    let log_every = train.log_every.max(1);
    let stage = trainer.stage;
    loop {
        let left = iterations.saturating_sub(trainer.step());
        let chunk = if every > 0 { (every - trainer.step() % every).min(left) } else { left };
        trainer.run(data, batch, chunk, train.seed, |step, loss| {
            if step % log_every == 0 {
                log::info!("{} step {step}: loss {loss:.6}", stage.as_str());
            }
            false
        })?;
        trainer.checkpoint()?.save(&ctx.checkpoint_path(stage))?;
        write_log(ctx, trainer, earlier)?;
        if trainer.step() >= iterations {
            return Ok(());
        }
    }
}

/// Rows of an earlier log up to the resume point.
fn earlier_rows(path: &Path, resumed_at: u64) -> Vec<String> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= resumed_at))
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub stage: String,
    pub iterations: u64,
    pub last: Option<String>,
    pub checkpoint: PathBuf,
}

fn summary(ctx: &Context, t: &Trainer) -> TrainSummary {
    TrainSummary {
        stage: t.stage.as_str().into(),
        iterations: t.step(),
        last: t.log().last().map(LogRow::csv),
        checkpoint: ctx.checkpoint_path(t.stage),
    }
}

pub fn pretrain(ctx: &Context, resume: bool) -> CliResult<TrainSummary> {
    ctx.echo_config("pretrain")?;
    let data = Dataset::load(&ctx.data_root(), &ctx.cfg.data.train_split)?;
    let model = KsDiff::new(ctx.cfg.model.clone(), DType::F32, ctx.cfg.train.seed)?;
    let s1 = &ctx.cfg.train.stage1;
    let mut trainer = Trainer::pretrain(model, s1, ctx.cfg.train.seed)?;
    let mut earlier = Vec::new();
    if resume {
        let ck = Checkpoint::load_compatible(&ctx.checkpoint_path(Stage::Pretrain), &ctx.cfg.model)?;
        trainer.resume(&ck)?;
        earlier = earlier_rows(&ctx.log_path(Stage::Pretrain), ck.iteration);
    }
    train_loop(ctx, &mut trainer, &data, s1.batch_size, s1.iterations, &earlier)?;
    Ok(summary(ctx, &trainer))
}

pub fn traindiff(ctx: &Context, stage1: Option<PathBuf>, resume: bool) -> CliResult<TrainSummary> {
    ctx.echo_config("traindiff")?;
    let s1_path = stage1.unwrap_or_else(|| ctx.checkpoint_path(Stage::Pretrain));
    if !s1_path.exists() {
        return Err(Error::config(format!(
            "stage-1 checkpoint {} not found; run `ksdiff pretrain` first",
            s1_path.display()
        ))
        .into());
    }
    let s1 = Checkpoint::load_compatible(&s1_path, &ctx.cfg.model)?;
    if s1.stage != Stage::Pretrain {
        return Err(Error::Checkpoint(format!("{} is not a stage-1 checkpoint", s1_path.display())).into());
    }
    let data = Dataset::load(&ctx.data_root(), &ctx.cfg.data.train_split)?;
    let model = s1.build_model(DType::F32)?;
    let mut trainer = Trainer::diffusion(model, &ctx.cfg.train)?;
    let mut earlier = Vec::new();
    if resume {
        let ck = Checkpoint::load_compatible(&ctx.checkpoint_path(Stage::Diffusion), &ctx.cfg.model)?;
        trainer.resume(&ck)?;
        earlier = earlier_rows(&ctx.log_path(Stage::Diffusion), ck.iteration);
    }
    let s2 = &ctx.cfg.train.stage2;
    train_loop(ctx, &mut trainer, &data, s2.batch_size, s2.iterations, &earlier)?;
    Ok(summary(ctx, &trainer))
}

#[derive(Debug, Serialize)]
pub struct InferRecord {
    pub name: String,
    pub denoiser_calls: usize,
    pub backbone_forwards: usize,
    pub latent_shape: Vec<usize>,
    pub encode_s: f64,
    pub sample_s: f64,
    pub fuse_s: f64,
}

#[derive(Debug, Serialize)]
pub struct InferSummary {
    pub output: PathBuf,
    pub records: Vec<InferRecord>,
}

pub enum InferInput {
    Split { split: String, indices: Vec<usize> },
    /// A container with `pan` `(H, W, 1)` and `lrms` `(h, w, C)` arrays.
    File(PathBuf),
}

fn fuse_one(ctx: &Context, model: &KsDiff, pan: &Image, lrms_up: &Image, seed_offset: u64, name: &str, dir: &Path) -> CliResult<InferRecord> {
    let p = tensor_from_image(pan, model.dtype())?;
    let m = tensor_from_image(lrms_up, model.dtype())?;
    let out = fuse(model, &p, &m, &ctx.sampler(seed_offset))?;
    let img = image_from_tensor(&out.image, 0)?;
    let mut c = Container::default();
    c.insert("fused", image_array(&img));
    c.insert("latent", Array::from_tensor(&out.latent.get(0)?)?);
    c.save(&dir.join(format!("{name}.safetensors")))?;
    render::save_rgb(&render::rgb(img.view()), &dir.join(format!("{name}.png")))?;
    Ok(InferRecord {
        name: name.to_string(),
        denoiser_calls: out.denoiser_calls,
        backbone_forwards: out.backbone_calls,
        latent_shape: out.latent.dims()[1..].to_vec(),
        encode_s: out.timing.encode.as_secs_f64(),
        sample_s: out.timing.sample.as_secs_f64(),
        fuse_s: out.timing.fuse.as_secs_f64(),
    })
}

pub fn infer(ctx: &Context, checkpoint: Option<PathBuf>, input: InferInput) -> CliResult<InferSummary> {
    ctx.echo_config("infer")?;
    let model = ctx.inference_model(checkpoint)?;
    let mut records = Vec::new();
    let dir = match input {
        InferInput::Split { split, indices } => {
            let data = Dataset::load(&ctx.data_root(), &split)?;
            let dir = ctx.out.join("fused").join(&split);
            std::fs::create_dir_all(&dir)?;
            for i in select(&indices, data.len())? {
                let t = data.triplet(i)?;
                records.push(fuse_one(ctx, &model, &t.pan, &t.lrms_up, i as u64, &sample_name(i), &dir)?);
            }
            dir
        }
        InferInput::File(path) => {
            let c = Container::load(&path)?;
            let pan = array_image(c.get("pan")?, "pan")?;
            let lrms = array_image(c.get("lrms")?, "lrms")?;
            let ratio = ctx.cfg.data.synth.ratio;
            if pan.dim().0 != lrms.dim().0 * ratio || pan.dim().1 != lrms.dim().1 * ratio {
                return Err(Error::Data(format!(
                    "pan {:?} is not {ratio}x the lrms {:?}",
                    pan.dim(),
                    lrms.dim()
                ))
                .into());
            }
            let up = bicubic_upsample(&lrms.mapv(|v| v as f64), ratio).mapv(|v| v as f32);
            let dir = ctx.out.join("fused").join("input");
            std::fs::create_dir_all(&dir)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_string();
            records.push(fuse_one(ctx, &model, &pan, &up, 0, &stem, &dir)?);
            dir
        }
    };
    write_json(&dir.join("timing.json"), &records)?;
    Ok(InferSummary { output: dir, records })
}

pub fn eval(ctx: &Context, fused: Option<PathBuf>, split: &str) -> CliResult<MetricsReport> {
    ctx.echo_config("eval")?;
    let data = Dataset::load(&ctx.data_root(), split)?;
    let fused_dir = fused.unwrap_or_else(|| ctx.out.join("fused").join(split));
    let mut files: Vec<(usize, PathBuf)> = std::fs::read_dir(&fused_dir)
        .map_err(|e| Error::Data(format!("cannot list {}: {e}", fused_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
        .filter_map(|p| parse_sample_index(&p).map(|i| (i, p)))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no sample_XXXX.safetensors files in {}", fused_dir.display())).into());
    }
    let out_dir = ctx.out.join("eval").join(split);
    std::fs::create_dir_all(&out_dir)?;
    let mcfg = &ctx.cfg.metrics;
    let mut samples = Vec::new();
    for (i, path) in &files {
        let t = data.triplet(*i)?;
        let f = array_image(Container::load(path)?.get("fused")?, "fused")?.mapv(|v| v as f64);
        let mut row = metrics::full_resolution(
            f.view(),
            t.lrms.mapv(|v| v as f64).view(),
            t.pan.mapv(|v| v as f64).view(),
            &mcfg.no_ref,
        )?;
        if let Some(gt) = &t.gt {
            let g = gt.mapv(|v| v as f64);
            row.extend(metrics::reduced_resolution(f.view(), g.view(), mcfg)?);
            let (_, shown) = metrics::error_map(f.view(), g.view())?;
            render::gray(shown.view()).save(out_dir.join(format!("{}_error.png", sample_name(*i))))?;
        }
        samples.push(row);
    }
    let report = MetricsReport::new(mcfg.ratio, samples);
    std::fs::write(out_dir.join("metrics.json"), report.to_json()?)?;
    std::fs::write(out_dir.join("metrics.txt"), report.to_table())?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct BenchRow {
    pub size: usize,
    pub denoiser_calls: usize,
    pub encode_s: f64,
    pub sample_s: f64,
    pub fuse_s: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub steps: usize,
    pub rows: Vec<BenchRow>,
    /// Median sampling time of the largest size over the smallest.
    pub sample_ratio: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

pub fn bench(ctx: &Context, checkpoint: Option<PathBuf>, sizes: &[usize], repeats: usize) -> CliResult<BenchReport> {
    ctx.echo_config("bench")?;
    if sizes.is_empty() || repeats == 0 {
        return Err(CliError::Usage("bench needs at least one size and one repeat".into()));
    }
    let model = match checkpoint {
        Some(p) => ctx.inference_model(Some(p))?,
        None => KsDiff::new(ctx.cfg.model.clone(), DType::F32, ctx.cfg.train.seed)?,
    };
    let bands = ctx.cfg.model.bands;
    let ratio = ctx.cfg.data.synth.ratio;
    let mut rows = Vec::new();
    for &size in sizes {
        let data = Dataset::synthetic("bench", 0, 1, size, bands, ratio)?;
        let b = data.batch(&[0], model.dtype())?;
        let mut runs = Vec::new();
        for r in 0..repeats + 1 {
            let out = fuse(&model, &b.pan, &b.lrms, &ctx.sampler(0))?;
            // The first run warms allocations and is discarded.
            if r > 0 {
                runs.push(out);
            }
        }
        rows.push(BenchRow {
            size,
            denoiser_calls: runs[0].denoiser_calls,
            encode_s: median(runs.iter().map(|o| o.timing.encode.as_secs_f64()).collect()),
            sample_s: median(runs.iter().map(|o| o.timing.sample.as_secs_f64()).collect()),
            fuse_s: median(runs.iter().map(|o| o.timing.fuse.as_secs_f64()).collect()),
        });
    }
    let first = rows.iter().min_by_key(|r| r.size).map(|r| r.sample_s).unwrap_or(1.0);
    let last = rows.iter().max_by_key(|r| r.size).map(|r| r.sample_s).unwrap_or(1.0);
    let report = BenchReport {
        steps: ctx.cfg.infer.sampling_steps,
        rows,
        sample_ratio: last / first,
    };
    write_json(&ctx.out.join("bench").join("bench.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct LatentScene {
    pub index: usize,
    pub points: Vec<[f64; 2]>,
    pub image: PathBuf,
}

pub fn viz_latent(ctx: &Context, checkpoint: Option<PathBuf>, split: &str, indices: &[usize]) -> CliResult<Vec<LatentScene>> {
    ctx.echo_config("viz-latent")?;
    let model = ctx.inference_model(checkpoint)?;
    let data = Dataset::load(&ctx.data_root(), split)?;
    let picked = select(indices, data.len())?;
    let started = Instant::now();
    let mut tokens: Vec<Vec<Vec<f64>>> = Vec::new();
    for &i in &picked {
        let b = data.batch(&[i], model.dtype())?;
        let out = fuse(&model, &b.pan, &b.lrms, &ctx.sampler(0))?;
        let z = out.latent.get(0)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        tokens.push(z);
    }
    log::info!("sampled {} latents in {:.2?}", picked.len(), started.elapsed());
    let all: Vec<Vec<f64>> = tokens.iter().flatten().cloned().collect();
    let pca = Pca2::fit(&all);
    let projected: Vec<Vec<[f64; 2]>> = tokens.iter().map(|s| s.iter().map(|t| pca.project(t)).collect()).collect();
    let flat = projected.iter().flatten();
    let lo = flat.clone().fold([f64::INFINITY; 2], |a, p| [a[0].min(p[0]), a[1].min(p[1])]);
    let hi = flat.fold([f64::NEG_INFINITY; 2], |a, p| [a[0].max(p[0]), a[1].max(p[1])]);
    let dir = ctx.out.join("viz").join(split);
    std::fs::create_dir_all(&dir)?;
    let mut scenes = Vec::new();
    for (&i, points) in picked.iter().zip(projected) {
        let image = dir.join(format!("scene_{i:04}.png"));
        render::save_rgb(&render::scatter(&points, lo, hi), &image)?;
        scenes.push(LatentScene { index: i, points, image });
    }
    write_json(&dir.join("points.json"), &scenes)?;
    Ok(scenes)
}
