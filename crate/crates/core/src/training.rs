//! Model bundle, the two training stages and checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::UNet;
use crate::config::{ModelConfig, Stage2Mode, StageConfig, TrainConfig};
use crate::container::{Array, Container};
use crate::data::{Batch, Dataset};
use crate::diffusion::{q_sample, Denoiser, Schedule};
use crate::error::{Error, Result};
use crate::kernelgen::Modulation;
use crate::nn::ema::Ema;
use crate::nn::optim::AdamW;
use crate::nn::{self, ParamStore};
use crate::plfe::{ConditionEncoder, PriorEncoder};

pub const PRIOR: &str = "prior.";
pub const CONDITION: &str = "cond.";
pub const DENOISER: &str = "denoiser.";
pub const BACKBONE: &str = "backbone.";

pub const CHECKPOINT_FORMAT: &str = "ksdiff-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";

/// Every network of the system on one parameter store.
#[derive(Debug, Clone)]
pub struct KsDiff {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub prior: Option<PriorEncoder>,
    pub condition: ConditionEncoder,
    pub denoiser: Denoiser,
    pub backbone: UNet,
    pub schedule: Schedule,
}

impl KsDiff {
    pub fn new(cfg: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(dtype, seed);
        let root = store.root();
        let prior = if cfg.use_prior {
            Some(PriorEncoder::new(&root.pp(PRIOR.trim_end_matches('.')), cfg.plfe())?)
        } else {
            None
        };
        let condition = ConditionEncoder::new(&root.pp(CONDITION.trim_end_matches('.')), cfg.plfe())?;
        let denoiser = Denoiser::new(&root.pp(DENOISER.trim_end_matches('.')), cfg.denoiser())?;
        let backbone = UNet::new(&root.pp(BACKBONE.trim_end_matches('.')), cfg.backbone())?;
        Ok(Self {
            schedule: Schedule::cosine(cfg.diffusion_steps)?,
            cfg,
            store,
            prior,
            condition,
            denoiser,
            backbone,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn prior(&self) -> Result<&PriorEncoder> {
        self.prior
            .as_ref()
            .ok_or_else(|| Error::config("this model was built without the prior branch"))
    }

    /// Reconstruction with the prior computed from the reference.
    pub fn reconstruct(&self, pan: &Tensor, lrms: &Tensor, gt: &Tensor) -> Result<Tensor> {
        match &self.prior {
            Some(p) => {
                let z = p.forward(pan, lrms, gt)?;
                self.backbone.forward(pan, lrms, Some(&z), Modulation::Generated)
            }
            None => self.backbone.forward(pan, lrms, None, Modulation::Generated),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Diffusion,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Diffusion => "diffusion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Loss {
    pub l1: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Loss {
    pub diff: f32,
    pub reg: f32,
    /// The objective that was minimized.
    pub total: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogRow {
    Stage1 { step: u64, l1: f32 },
    Stage2 { step: u64, diff: f32, reg: f32, total: f32 },
}

impl LogRow {
    pub fn csv(&self) -> String {
        match self {
            LogRow::Stage1 { step, l1 } => format!("{step},{l1}"),
            LogRow::Stage2 { step, diff, reg, total } => format!("{step},{diff},{reg},{total}"),
        }
    }
}

fn scalar(t: &Tensor) -> Result<f32> {
    Ok(t.to_dtype(DType::F32)?.to_scalar::<f32>()?)
}

fn check_finite(what: &'static str, step: u64, v: f32) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::NonFinite {
            what,
            step,
            value: v as f64,
        });
    }
    Ok(())
}

/// Single-writer optimization loop for one stage.
pub struct Trainer {
    pub model: KsDiff,
    pub stage: Stage,
    pub mode: Stage2Mode,
    pub lambda: f64,
    opt: AdamW,
    ema: Option<Ema>,
    step: u64,
    rng: ChaCha8Rng,
    log: Vec<LogRow>,
}

fn vars_for(store: &ParamStore, prefixes: &[&str]) -> Vec<(String, candle_core::Var)> {
    prefixes.iter().flat_map(|p| store.vars(p)).collect()
}

impl Trainer {
    /// Stage 1: prior encoder, kernel generators and backbone under L1.
    pub fn pretrain(model: KsDiff, stage: &StageConfig, seed: u64) -> Result<Self> {
        let opt = AdamW::new(vars_for(&model.store, &[PRIOR, BACKBONE]), stage.optimizer())?;
        Ok(Self {
            model,
            stage: Stage::Pretrain,
            mode: Stage2Mode::Joint,
            lambda: 0.0,
            opt,
            ema: None,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            log: Vec::new(),
        })
    }

    /// Stage 2 from a pretrained model. The prior encoder stays frozen.
    pub fn diffusion(model: KsDiff, cfg: &TrainConfig) -> Result<Self> {
        model.prior()?;
        let mut prefixes = vec![DENOISER, CONDITION];
        if cfg.mode == Stage2Mode::Joint {
            prefixes.push(BACKBONE);
        }
        let opt = AdamW::new(vars_for(&model.store, &prefixes), cfg.stage2.optimizer())?;
        let ema = Ema::new(&model.store, &[DENOISER, CONDITION], cfg.ema_decay)?;
        Ok(Self {
            model,
            stage: Stage::Diffusion,
            mode: cfg.mode,
            lambda: cfg.lambda,
            opt,
            ema: Some(ema),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0002),
            log: Vec::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn ema(&self) -> Option<&Ema> {
        self.ema.as_ref()
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    /// Runs `f` with EMA weights swapped in, restoring the live weights after.
    pub fn with_ema<R>(&self, f: impl FnOnce(&KsDiff) -> Result<R>) -> Result<R> {
        let Some(ema) = &self.ema else {
            return f(&self.model);
        };
        let live: BTreeMap<String, Tensor> = ema
            .shadow()
            .keys()
            .map(|k| {
                let v = self.model.store.get(k).ok_or_else(|| Error::Checkpoint(format!("no parameter {k}")))?;
                Ok((k.clone(), v.as_detached_tensor().copy()?))
            })
            .collect::<Result<_>>()?;
        self.model.store.set_values(ema.shadow())?;
        let out = f(&self.model);
        self.model.store.set_values(&live)?;
        out
    }

    fn gt<'a>(&self, batch: &'a Batch) -> Result<&'a Tensor> {
        batch
            .gt
            .as_ref()
            .ok_or_else(|| Error::Data("training needs reference images".into()))
    }

    pub fn stage1_loss(&self, batch: &Batch) -> Result<Tensor> {
        let gt = self.gt(batch)?;
        let h = self.model.reconstruct(&batch.pan, &batch.lrms, gt)?;
        nn::l1_loss(&h, gt)
    }

    pub fn stage1_step(&mut self, batch: &Batch) -> Result<Stage1Loss> {
        if self.stage != Stage::Pretrain {
            return Err(Error::config("stage1_step called on a stage-2 trainer"));
        }
        let loss = self.stage1_loss(batch)?;
        let l1 = scalar(&loss)?;
        check_finite("stage-1 loss", self.step + 1, l1)?;
        let grads = loss.backward()?;
        self.opt.step(&grads)?;
        self.step += 1;
        self.log.push(LogRow::Stage1 { step: self.step, l1 });
        Ok(Stage1Loss { l1 })
    }

    /// Stage-2 losses for a batch with explicit timesteps and noise.
    pub fn stage2_losses(&self, batch: &Batch, ts: &[usize], eps: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let gt = self.gt(batch)?;
        let m = &self.model;
        let z0 = m.prior()?.forward(&batch.pan, &batch.lrms, gt)?.detach();
        let zt = q_sample(&m.schedule, &z0, ts, eps)?;
        let c = m.condition.forward(&batch.pan, &batch.lrms)?;
        let z0_hat = m.denoiser.forward(&zt, ts, &c)?;
        let diff = nn::l1_loss(&z0_hat, &z0)?;
        let h2 = m.backbone.forward(&batch.pan, &batch.lrms, Some(&z0_hat), Modulation::Generated)?;
        let reg = nn::l1_loss(&h2, gt)?;
        let total = match self.mode {
            Stage2Mode::Joint => (&diff + (&reg * self.lambda)?)?,
            Stage2Mode::Separate => diff.clone(),
        };
        Ok((diff, reg, total))
    }

    pub fn stage2_step(&mut self, batch: &Batch) -> Result<Stage2Loss> {
        if self.stage != Stage::Diffusion {
            return Err(Error::config("stage2_step called on a stage-1 trainer"));
        }
        let b = batch.pan.dim(0)?;
        let steps = self.model.schedule.steps();
        let ts: Vec<usize> = (0..b).map(|_| self.rng.random_range(1..=steps)).collect();
        let (_, n, cz) = (b, self.model.cfg.tokens, self.model.cfg.latent_dim);
        let eps = nn::randn(&mut self.rng, &[b, n, cz], self.model.dtype())?;
        let (diff, reg, total) = self.stage2_losses(batch, &ts, &eps)?;
        let out = Stage2Loss {
            diff: scalar(&diff)?,
            reg: scalar(&reg)?,
            total: scalar(&total)?,
        };
        check_finite("stage-2 loss", self.step + 1, out.total)?;
        let grads = total.backward()?;
        self.opt.step(&grads)?;
        if let Some(e) = self.ema.as_mut() {
            e.update(&self.model.store)?;
        }
        self.step += 1;
        self.log.push(LogRow::Stage2 {
            step: self.step,
            diff: out.diff,
            reg: out.reg,
            total: out.total,
        });
        Ok(out)
    }

    /// Runs `iterations` steps over seeded epochs, stopping early once
    /// `stop` returns true for the step's loss.
    pub fn run(
        &mut self,
        data: &Dataset,
        batch_size: usize,
        iterations: u64,
        seed: u64,
        mut stop: impl FnMut(u64, f32) -> bool,
    ) -> Result<u64> {
        let per_epoch = data.len().div_ceil(batch_size.max(1)) as u64;
        let end = self.step + iterations;
        while self.step < end {
            let epoch = self.step / per_epoch;
            let within = (self.step % per_epoch) as usize;
            let batches = data.epoch_batches(batch_size, seed, epoch);
            let batch = data.batch(&batches[within], self.model.dtype())?;
            let value = match self.stage {
                Stage::Pretrain => self.stage1_step(&batch)?.l1,
                Stage::Diffusion => self.stage2_step(&batch)?.total,
            };
            if stop(self.step, value) {
                break;
            }
        }
        Ok(self.step)
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        let header = match self.stage {
            Stage::Pretrain => "step,l1",
            Stage::Diffusion => "step,l_diff,l_reg,l_s2",
        };
        writeln!(f, "{header}")?;
        for row in &self.log {
            writeln!(f, "{}", row.csv())?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let (moments, opt_steps) = self.opt.state();
        Ok(Checkpoint {
            stage: self.stage,
            iteration: self.step,
            config: self.model.cfg.clone(),
            params: self.model.store.snapshot(""),
            ema: self.ema.as_ref().map(|e| e.shadow().clone()).unwrap_or_default(),
            optimizer: moments,
            optimizer_steps: opt_steps,
            schedule: self.model.schedule.clone(),
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
            rng_stream: self.rng.get_stream(),
        })
    }

    /// Restores parameters, EMA, optimizer moments and the iteration counter
    /// from a checkpoint of the same stage.
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.stage != self.stage {
            return Err(Error::Checkpoint(format!(
                "cannot resume a {} trainer from a {} checkpoint",
                self.stage.as_str(),
                ck.stage.as_str()
            )));
        }
        ck.restore_into(&self.model)?;
        if let Some(e) = self.ema.as_mut() {
            e.set_shadow(ck.ema.clone())?;
        }
        self.opt.load_state(&ck.optimizer, ck.optimizer_steps)?;
        self.step = ck.iteration;
        self.rng = ChaCha8Rng::from_seed(ck.rng_seed);
        self.rng.set_stream(ck.rng_stream);
        self.rng.set_word_pos(ck.rng_word_pos);
        Ok(())
    }
}

/// Everything needed to continue training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub iteration: u64,
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub ema: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
    pub optimizer_steps: u64,
    pub schedule: Schedule,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub rng_stream: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    dtype: String,
}

impl Checkpoint {
    pub fn restore_into(&self, model: &KsDiff) -> Result<()> {
        if self.config.hash() != model.cfg.hash() {
            return Err(Error::Checkpoint("checkpoint was written for a different model config".into()));
        }
        model.store.assign("", &self.params)
    }

    /// Copies the EMA shadow over the live parameters it tracks.
    pub fn apply_ema(&self, model: &KsDiff) -> Result<()> {
        model.store.set_values(&self.ema)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::default();
        for (k, v) in &self.params {
            c.insert(format!("param/{k}"), Array::from_tensor(v)?);
        }
        for (k, v) in &self.ema {
            c.insert(format!("ema/{k}"), Array::from_tensor(v)?);
        }
        for (k, v) in &self.optimizer {
            c.insert(format!("opt/{k}"), Array::from_tensor(v)?);
        }
        let manifest = Manifest {
            names: self.params.keys().cloned().collect(),
            shapes: self.params.values().map(|t| t.dims().to_vec()).collect(),
            dtype: format!("{:?}", self.params.values().next().map(|t| t.dtype()).unwrap_or(DType::F32)),
        };
        let md = &mut c.metadata;
        md.insert("format".into(), CHECKPOINT_FORMAT.into());
        md.insert("version".into(), CHECKPOINT_VERSION.into());
        md.insert("stage".into(), self.stage.as_str().into());
        md.insert("iteration".into(), self.iteration.to_string());
        md.insert("config_hash".into(), self.config.hash());
        md.insert("model_config".into(), serde_json::to_string(&self.config)?);
        md.insert("schedule".into(), serde_json::to_string(&self.schedule)?);
        md.insert("optimizer_steps".into(), self.optimizer_steps.to_string());
        md.insert("rng_seed".into(), hex::encode(self.rng_seed));
        md.insert("rng_word_pos".into(), self.rng_word_pos.to_string());
        md.insert("rng_stream".into(), self.rng_stream.to_string());
        md.insert("manifest".into(), serde_json::to_string(&manifest)?);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let md = |k: &str| -> Result<&String> {
            c.metadata
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint header lacks {k:?}")))
        };
        if md("format")? != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint("not a ksdiff checkpoint".into()));
        }
        if md("version")? != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", md("version")?)));
        }
        let config: ModelConfig = serde_json::from_str(md("model_config")?)
            .map_err(|e| Error::Checkpoint(format!("bad model config in header: {e}")))?;
        if &config.hash() != md("config_hash")? {
            return Err(Error::Checkpoint("config hash does not match the stored model config".into()));
        }
        let stage = match md("stage")?.as_str() {
            "pretrain" => Stage::Pretrain,
            "diffusion" => Stage::Diffusion,
            s => return Err(Error::Checkpoint(format!("unknown stage {s:?}"))),
        };
        let num = |k: &str| -> Result<u64> {
            md(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("header field {k:?} is not an integer")))
        };
        let seed_vec = hex::decode(md("rng_seed")?).map_err(|_| Error::Checkpoint("bad rng seed".into()))?;
        let rng_seed: [u8; 32] = seed_vec
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let mut params = BTreeMap::new();
        let mut ema = BTreeMap::new();
        let mut optimizer = BTreeMap::new();
        for (k, a) in &c.arrays {
            let t = a.to_tensor()?;
            if let Some(n) = k.strip_prefix("param/") {
                params.insert(n.to_string(), t);
            } else if let Some(n) = k.strip_prefix("ema/") {
                ema.insert(n.to_string(), t);
            } else if let Some(n) = k.strip_prefix("opt/") {
                optimizer.insert(n.to_string(), t);
            }
        }
        let manifest: Manifest = serde_json::from_str(md("manifest")?)
            .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        if manifest.names.iter().ne(params.keys()) {
            return Err(Error::Checkpoint("parameter arrays disagree with the manifest".into()));
        }
        Ok(Self {
            stage,
            iteration: num("iteration")?,
            schedule: serde_json::from_str(md("schedule")?)
                .map_err(|e| Error::Checkpoint(format!("bad schedule: {e}")))?,
            optimizer_steps: num("optimizer_steps")?,
            rng_word_pos: md("rng_word_pos")?
                .parse()
                .map_err(|_| Error::Checkpoint("bad rng position".into()))?,
            rng_stream: num("rng_stream")?,
            rng_seed,
            config,
            params,
            ema,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path).map_err(|e| match e {
            Error::Data(m) => Error::Checkpoint(m),
            other => other,
        })?;
        Self::from_container(&c)
    }

    /// Loads and refuses a checkpoint written for another model config.
    pub fn load_compatible(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config.hash() != expected.hash() {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {} does not match the requested config {}",
                &ck.config.hash()[..12],
                &expected.hash()[..12]
            )));
        }
        Ok(ck)
    }

    /// Rebuilds the model and loads the raw parameters.
    pub fn build_model(&self, dtype: DType) -> Result<KsDiff> {
        let model = KsDiff::new(self.config.clone(), dtype, 0)?;
        self.restore_into(&model)?;
        Ok(model)
    }
}

/// Mean L1 between reconstructions (prior path) and references over a dataset.
pub fn prior_path_l1(model: &KsDiff, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = data.batch(chunk, model.dtype())?;
        let gt = b.gt.as_ref().ok_or_else(|| Error::Data("dataset has no references".into()))?;
        let h = model.reconstruct(&b.pan, &b.lrms, gt)?;
        total += scalar(&nn::l1_loss(&h, gt)?)? as f64 * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}
