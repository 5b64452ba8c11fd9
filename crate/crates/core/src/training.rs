//! Maximum-likelihood training loop: seeded epoch shuffling, fresh
//! dequantization noise per visit, AdamW with clipping, JSON-lines logs and
//! resumable checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{bits_per_dim, Dequantizer, ImageSet, Noise};
use crate::error::{Error, Result};
use crate::model::FlowModel;
use crate::nn::{AdamW, AdamWConfig, Binding, Checkpoint, Real, Tape};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const EVAL_LOG: &str = "eval_log.jsonl";

const NOISE_SALT: u64 = 0x6e6f_6973_6521;
const SHUFFLE_SALT: u64 = 0x7368_7566_666c;

/// A dataset as the trainer sees it: rows in model space plus the
/// log-determinant of the map from raw data to model space.
pub trait TrainData<T: Real> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dim(&self) -> usize;

    /// Rows `rows` in model space. `noise` of `None` uses a deterministic
    /// representative (midpoint dequantization for images).
    fn fetch(&self, rows: &[usize], noise: Option<&mut ChaCha8Rng>) -> (Array2<T>, Array1<f64>);
}

/// 8-bit images, dequantized and logit-transformed on the fly.
pub struct ImageData<'a> {
    pub set: &'a ImageSet,
    pub dequantizer: Dequantizer,
}

impl<'a> ImageData<'a> {
    pub fn new(set: &'a ImageSet) -> Self {
        Self {
            set,
            dequantizer: Dequantizer::default(),
        }
    }
}

impl<T: Real> TrainData<T> for ImageData<'_> {
    fn len(&self) -> usize {
        self.set.len()
    }

    fn dim(&self) -> usize {
        self.set.dim()
    }

    fn fetch(&self, rows: &[usize], noise: Option<&mut ChaCha8Rng>) -> (Array2<T>, Array1<f64>) {
        let x8 = self.set.pixels.select(Axis(0), rows);
        match noise {
            Some(rng) => self.dequantizer.preprocess(x8.view(), Noise::Uniform(rng)),
            None => self.dequantizer.preprocess::<T, ChaCha8Rng>(x8.view(), Noise::Midpoint),
        }
    }
}

/// Continuous points used as they are.
pub struct PointData<'a> {
    pub points: &'a Array2<f64>,
}

impl<T: Real> TrainData<T> for PointData<'_> {
    fn len(&self) -> usize {
        self.points.nrows()
    }

    fn dim(&self) -> usize {
        self.points.ncols()
    }

    fn fetch(&self, rows: &[usize], _noise: Option<&mut ChaCha8Rng>) -> (Array2<T>, Array1<f64>) {
        let x = self.points.select(Axis(0), rows).mapv(T::of);
        (x, Array1::zeros(rows.len()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Rows per forward pass; gradients are accumulated over the batch.
    /// `0` processes the whole batch at once.
    pub micro_batch: usize,
    pub optimizer: AdamWConfig,
    /// Learning-rate factor per parameter group (the RG level for the
    /// hierarchical model). Missing entries count as 1.
    pub lr_multipliers: Vec<f64>,
    pub seed: u64,
    pub log_every: u64,
    /// `0` only writes a checkpoint at the end.
    pub checkpoint_every: u64,
    /// `0` disables periodic evaluation.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 64,
            micro_batch: 0,
            optimizer: AdamWConfig::default(),
            lr_multipliers: Vec::new(),
            seed: 0,
            log_every: 1,
            checkpoint_every: 500,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.optimizer.lr)));
        }
        if self.lr_multipliers.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::InvalidArgument("learning-rate multipliers must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    /// Mean negative log-likelihood in model space (nats per image).
    pub loss: f64,
    /// Batch estimate of bits per dimension on the raw-data scale.
    pub bpd: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub lr: f64,
    /// Seconds of training so far, summed across resumed runs.
    pub wall: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub nll: f64,
    pub bpd: f64,
    pub n: usize,
}

/// Row order for every step, derived from `(seed, epoch)` alone so a
/// resumed run visits the same rows.
struct EpochSampler {
    seed: u64,
    n: usize,
    epoch: Option<u64>,
    perm: Vec<usize>,
}

impl EpochSampler {
    fn new(seed: u64, n: usize) -> Self {
        Self {
            seed,
            n,
            epoch: None,
            perm: Vec::new(),
        }
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.epoch != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ SHUFFLE_SALT);
            rng.set_stream(epoch);
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut rng);
            self.epoch = Some(epoch);
        }
        &self.perm
    }

    fn batch(&mut self, step: u64, size: usize) -> Vec<usize> {
        let n = self.n as u64;
        (0..size as u64)
            .map(|k| {
                let pos = step * size as u64 + k;
                self.permutation(pos / n)[(pos % n) as usize]
            })
            .collect()
    }
}

fn step_noise(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_SALT);
    rng.set_stream(step);
    rng
}

/// Mean log-likelihood terms over `rows`: returns per-row model-space
/// `log p` without recording gradients.
pub fn log_prob_rows<T: Real, M: FlowModel<T>>(model: &M, x: &Array2<T>, chunk: usize) -> Result<Array1<f64>> {
    let mut out = Vec::with_capacity(x.nrows());
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + chunk).min(x.nrows());
        let tape = Tape::no_grad();
        let b = Binding::frozen(&tape, model.store());
        let xv = tape.constant(x.slice(s![start..end, ..]).to_owned());
        let lp = model.log_prob_var(&b, &xv)?;
        out.extend(lp.value().iter().map(|v| v.as_f64()));
        start = end;
    }
    Ok(Array1::from(out))
}

/// Negative log-likelihood and bits per dimension over a whole dataset,
/// with dequantization noise drawn from `seed`.
pub fn evaluate<T: Real, M: FlowModel<T>, D: TrainData<T>>(model: &M, data: &D, seed: u64, chunk: usize) -> Result<EvalReport> {
    let n = data.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot evaluate on an empty set".into()));
    }
    let mut rng = step_noise(seed, u64::MAX);
    let (mut nll, mut bpd) = (0.0, 0.0);
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < n {
        let rows: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let (x, ld) = data.fetch(&rows, Some(&mut rng));
        let lp = log_prob_rows(model, &x, chunk)?;
        for (&l, &d) in lp.iter().zip(&ld) {
            if !l.is_finite() {
                return Err(Error::NonFinite("evaluation log-likelihood"));
            }
            nll -= l;
            bpd += bits_per_dim(l, d, data.dim());
        }
        start += rows.len();
    }
    Ok(EvalReport {
        step: 0,
        nll: nll / n as f64,
        bpd: bpd / n as f64,
        n,
    })
}

pub struct Trainer<T: Real> {
    pub config: TrainConfig,
    pub optimizer: AdamW<T>,
    elapsed: f64,
}

impl<T: Real> Trainer<T> {
    pub fn new<M: FlowModel<T>>(model: &M, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: AdamW::new(model.store(), config.optimizer.clone()),
            config,
            elapsed: 0.0,
        })
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Loss and parameter gradients for one batch, without updating.
    pub fn loss_and_grads<M: FlowModel<T>>(model: &M, x: &Array2<T>, micro: usize) -> Result<(f64, Array1<f64>, Vec<Array2<T>>)> {
        let n = x.nrows();
        let micro = if micro == 0 { n } else { micro };
        let mut grads: Option<Vec<Array2<T>>> = None;
        let mut lps = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + micro).min(n);
            let tape = Tape::new();
            let b = Binding::new(&tape, model.store());
            let xv = tape.constant(x.slice(s![start..end, ..]).to_owned());
            let lp = model.log_prob_var(&b, &xv)?;
            lps.extend(lp.value().iter().map(|v| v.as_f64()));
            let total = tape.sum_all(&lp);
            let loss = tape.scale(&total, T::of(-1.0 / n as f64));
            let g = b.param_grads(&tape.backward(&loss)?);
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(g) {
                        a.zip_mut_with(&g, |x, &y| *x = *x + y);
                    }
                }
            }
            start = end;
        }
        let lps = Array1::from(lps);
        let loss = -lps.mean().unwrap_or(0.0);
        Ok((loss, lps, grads.unwrap_or_else(|| model.store().zeros_like())))
    }

    fn train_step<M: FlowModel<T>, D: TrainData<T>>(&mut self, model: &mut M, data: &D, sampler: &mut EpochSampler) -> Result<LogEntry> {
        let started = Instant::now();
        let step = self.step();
        let rows = sampler.batch(step, self.config.batch_size);
        let mut noise = step_noise(self.config.seed, step);
        let (x, ld) = data.fetch(&rows, Some(&mut noise));
        let (loss, lps, mut grads) = Self::loss_and_grads(model, &x, self.config.micro_batch)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        let stats = self.optimizer.step(model.store_mut(), &mut grads, &self.config.lr_multipliers)?;
        if model.store().values().iter().any(|v| v.iter().any(|p| !p.is_finite())) {
            return Err(Error::TrainingDiverged {
                step,
                reason: "non-finite parameter after update".into(),
            });
        }
        let bpd = lps.iter().zip(&ld).map(|(&l, &d)| bits_per_dim(l, d, data.dim())).sum::<f64>() / lps.len() as f64;
        self.elapsed += started.elapsed().as_secs_f64();
        Ok(LogEntry {
            step: self.step(),
            loss,
            bpd,
            grad_norm: stats.grad_norm,
            clipped: stats.clipped,
            lr: self.config.optimizer.lr,
            wall: self.elapsed,
        })
    }

    /// Model parameters, optimizer moments and progress in one file.
    pub fn checkpoint<M: FlowModel<T>>(&self, model: &M) -> Checkpoint {
        let mut ck = model.to_checkpoint();
        let names = model.store().names();
        for (name, m) in names.iter().zip(&self.optimizer.first_moment) {
            ck.push(format!("adam.m/{name}"), m);
        }
        for (name, v) in names.iter().zip(&self.optimizer.second_moment) {
            ck.push(format!("adam.v/{name}"), v);
        }
        ck.meta["train"] = serde_json::json!({
            "step": self.step(),
            "elapsed": self.elapsed,
            "config": self.config,
        });
        ck
    }

    /// Restores parameters into `model` and the optimizer state from a
    /// training checkpoint. The stored configuration is used unless
    /// `config` is given, in which case only `steps` and logging
    /// intervals may differ.
    pub fn resume<M: FlowModel<T>>(model: &mut M, ck: &Checkpoint, config: Option<TrainConfig>) -> Result<Self> {
        let train = ck.meta.get("train").ok_or_else(|| Error::Checkpoint("no training state".into()))?;
        let stored: TrainConfig = serde_json::from_value(train["config"].clone())?;
        let config = match config {
            Some(c) => {
                let same = TrainConfig {
                    steps: stored.steps,
                    log_every: stored.log_every,
                    checkpoint_every: stored.checkpoint_every,
                    eval_every: stored.eval_every,
                    ..c.clone()
                };
                if same != stored {
                    return Err(Error::Checkpoint("resume configuration differs from the stored one".into()));
                }
                c
            }
            None => stored,
        };
        model.load_params(ck)?;
        let mut trainer = Self::new(model, config)?;
        let names: Vec<String> = model.store().names().to_vec();
        for (k, name) in names.iter().enumerate() {
            for (prefix, dst) in [("adam.m", &mut trainer.optimizer.first_moment[k]), ("adam.v", &mut trainer.optimizer.second_moment[k])] {
                let t: Array2<T> = ck
                    .get(&format!("{prefix}/{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}/{name}")))?;
                if t.dim() != dst.dim() {
                    return Err(Error::Checkpoint(format!("{prefix}/{name} has shape {:?}", t.dim())));
                }
                *dst = t;
            }
        }
        trainer.optimizer.step = train["step"].as_u64().ok_or_else(|| Error::Checkpoint("missing step".into()))?;
        trainer.elapsed = train["elapsed"].as_f64().unwrap_or(0.0);
        Ok(trainer)
    }

    /// Trains until `config.steps`. With `out`, appends JSON lines to the
    /// train and eval logs and writes checkpoints there; a diverging step
    /// aborts the run and leaves the last good checkpoint in place.
    pub fn run<M, D>(&mut self, model: &mut M, data: &D, eval: Option<&D>, out: Option<&Path>) -> Result<Vec<LogEntry>>
    where
        M: FlowModel<T>,
        D: TrainData<T>,
    {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        if data.dim() != model.dim() {
            return Err(Error::shape(format!("{} values per row", model.dim()), format!("{}", data.dim())));
        }
        let mut logs = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some((append(&dir.join(TRAIN_LOG))?, append(&dir.join(EVAL_LOG))?))
            }
            None => None,
        };
        let mut sampler = EpochSampler::new(self.config.seed, data.len());
        let mut history = Vec::new();
        while self.step() < self.config.steps {
            let entry = match self.train_step(model, data, &mut sampler) {
                Ok(e) => e,
                Err(e) => {
                    if let Some((train_log, _)) = logs.as_mut() {
                        writeln!(train_log, "{}", serde_json::json!({ "step": self.step() + 1, "error": e.to_string() }))?;
                        train_log.flush()?;
                    }
                    return Err(e);
                }
            };
            let step = entry.step;
            if let Some((train_log, eval_log)) = logs.as_mut() {
                if step % self.config.log_every.max(1) == 0 || step == self.config.steps {
                    writeln!(train_log, "{}", serde_json::to_string(&entry)?)?;
                    train_log.flush()?;
                }
                if let Some(ev) = eval {
                    if self.config.eval_every > 0 && (step % self.config.eval_every == 0 || step == self.config.steps) {
                        let mut report = evaluate(model, ev, self.config.seed, self.config.batch_size)?;
                        report.step = step;
                        writeln!(eval_log, "{}", serde_json::to_string(&report)?)?;
                        eval_log.flush()?;
                    }
                }
                let dir = out.expect("logs imply an output directory");
                if (self.config.checkpoint_every > 0 && step % self.config.checkpoint_every == 0) || step == self.config.steps {
                    save_atomic(&self.checkpoint(model), &dir.join(CHECKPOINT_FILE))?;
                }
            }
            history.push(entry);
        }
        if let Some(dir) = out {
            save_atomic(&model.to_checkpoint(), &dir.join(MODEL_FILE))?;
        }
        Ok(history)
    }
}

fn append(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?))
}

fn save_atomic(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = PathBuf::from(format!("{}.tmp", path.display()));
    ck.save(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a JSON-lines training log, skipping error records.
pub fn read_train_log(path: &Path) -> Result<Vec<LogEntry>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
}

pub fn read_eval_log(path: &Path) -> Result<Vec<EvalReport>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
}
