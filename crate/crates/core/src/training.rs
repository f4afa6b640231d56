//! Optimization of one ensemble member.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::als::{Variable, NODATA};
use crate::dataset::{Dataset, SceneData, Split, OPTICAL_BANDS, SAR_BANDS_PER_ORBIT};
use crate::error::{Error, Result};
use crate::model::{
    build_model, Ablation, Activation, BnMode, ForwardOptions, InputNorm, ModelConfig, ModelParameters,
    OptimizerState, LOG_VAR_CLAMP, N_OUTPUTS,
};
use crate::synthetic::sub_seed;
use crate::tensor::{GradStore, Graph, ParamStore, Scalar, Tensor};

const HEAD_WEIGHT_SCALE: f32 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patch_size: usize,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; plays the role of the L2 penalty.
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Batches per epoch; `None` means eligible training pixels / (B·patch²).
    pub batches_per_epoch: Option<usize>,
    /// Fixed validation patches evaluated after every epoch.
    pub val_patches: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub member: usize,
    /// Start the output biases at the training-target mean and log-variance.
    pub warm_start_heads: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            patch_size: 15,
            base_lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
            plateau_factor: 0.1,
            patience: 15,
            max_epochs: 100,
            batches_per_epoch: Some(50),
            val_patches: 64,
            seed: 0,
            ablation: Ablation::S2S1,
            member: 0,
            warm_start_heads: true,
        }
    }
}

impl TrainConfig {
    /// Full-size optimizer settings; epochs sized from the data.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 64,
            base_lr: 1e-4,
            batches_per_epoch: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.batch_size > 0
            && self.patch_size % 2 == 1
            && self.base_lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.plateau_factor > 0.0
            && self.plateau_factor < 1.0
            && self.patience >= 1
            && self.val_patches > 0
            && self.batches_per_epoch != Some(0);
        if !positive {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }

    /// Seed of this member's parameter initialization and batch sampling.
    pub fn member_seed(&self) -> u64 {
        sub_seed(self.seed, self.member as u64)
    }
}

/// Mean over masked `(pixel, variable)` terms of `s + exp(−s)·(μ − y)²`.
pub fn gaussian_nll_loss<T: Scalar>(
    means: &Tensor<T>,
    log_vars: &Tensor<T>,
    targets: &Tensor<T>,
    mask: &[bool],
) -> Result<T> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let m = g.input(means.clone());
    let s = g.input(log_vars.clone());
    let l = g.gaussian_nll(m, s, targets.clone(), mask.to_vec(), T::from_f64(LOG_VAR_CLAMP))?;
    Ok(g.value(l).data()[0])
}

/// Model inputs, targets and loss mask of a batch of patches.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub optical: Option<Tensor<f32>>,
    pub sar: Option<Tensor<f32>>,
    /// `[B, 5, p, p]`, zero where not forested.
    pub targets: Tensor<f32>,
    /// `[B, p, p]` forested flags.
    pub mask: Vec<bool>,
    /// `(scene, row, col)` of each patch center.
    pub centers: Vec<(usize, usize, usize)>,
}

/// Which acquisitions a patch is cut from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Acquisitions {
    pub optical: usize,
    pub asc: usize,
    pub desc: usize,
    /// For single-orbit inputs: take the descending pass instead of the ascending one.
    pub use_desc: bool,
}

/// Channel stack `[C, h, w]` for the given inputs over the window with
/// top-left `(r0, c0)`; `None` for an absent branch.
pub fn cut_inputs(
    scene: &SceneData,
    ablation: Ablation,
    acq: Acquisitions,
    r0: usize,
    c0: usize,
    h: usize,
    w: usize,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let cut = |t: &Tensor<f32>, out: &mut Vec<f32>| {
        let (ch, sh, sw) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        for c in 0..ch {
            for r in r0..r0 + h {
                let base = (c * sh + r) * sw + c0;
                out.extend_from_slice(&t.data()[base..base + w]);
            }
        }
    };
    let optical = (ablation.optical_channels() > 0).then(|| {
        let mut v = Vec::with_capacity(OPTICAL_BANDS * h * w);
        cut(&scene.optical[acq.optical], &mut v);
        v
    });
    let sar = match ablation.sar_channels() {
        0 => None,
        n => {
            let mut v = Vec::with_capacity(n * h * w);
            if n == SAR_BANDS_PER_ORBIT {
                let t = if acq.use_desc {
                    &scene.sar_desc[acq.desc]
                } else {
                    &scene.sar_asc[acq.asc]
                };
                cut(t, &mut v);
            } else {
                cut(&scene.sar_asc[acq.asc], &mut v);
                cut(&scene.sar_desc[acq.desc], &mut v);
            }
            Some(v)
        }
    };
    (optical, sar)
}

/// Uniform sampler over forested patch centers whose whole patch lies in
/// the rows of one split.
#[derive(Clone, Debug)]
pub struct PatchSampler<'a> {
    dataset: &'a Dataset,
    patch: usize,
    ablation: Ablation,
    centers: Vec<(usize, usize, usize)>,
}

impl<'a> PatchSampler<'a> {
    pub fn new(dataset: &'a Dataset, split: Split, patch: usize, ablation: Ablation) -> Result<Self> {
        let half = patch / 2;
        let mut centers = Vec::new();
        for (si, scene) in dataset.scenes.iter().enumerate() {
            scene.validate()?;
            let w = scene.width();
            if w < patch {
                continue;
            }
            for range in dataset.row_splits(si)?.ranges(split) {
                if range.len() < patch {
                    continue;
                }
                for r in range.start + half..range.end - half {
                    for c in half..w - half {
                        if scene.reference.forested[r * w + c] {
                            centers.push((si, r, c));
                        }
                    }
                }
            }
        }
        if centers.is_empty() {
            return Err(Error::Empty(format!("no forested {patch}x{patch} patch centers in the {split:?} split")));
        }
        Ok(Self {
            dataset,
            patch,
            ablation,
            centers,
        })
    }

    pub fn centers(&self) -> &[(usize, usize, usize)] {
        &self.centers
    }

    /// Number of eligible centers.
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// `b` uniformly drawn centers, each with a random optical acquisition,
    /// ascending and descending SAR acquisitions and orbit choice.
    pub fn draw(&self, b: usize, rng: &mut impl Rng) -> Vec<((usize, usize, usize), Acquisitions)> {
        (0..b)
            .map(|_| {
                let center = self.centers[rng.random_range(0..self.centers.len())];
                let scene = &self.dataset.scenes[center.0];
                let acq = Acquisitions {
                    optical: rng.random_range(0..scene.optical.len()),
                    asc: rng.random_range(0..scene.sar_asc.len()),
                    desc: rng.random_range(0..scene.sar_desc.len()),
                    use_desc: rng.random_bool(0.5),
                };
                (center, acq)
            })
            .collect()
    }

    /// `b` patches with uniformly drawn centers and acquisitions.
    pub fn sample(&self, b: usize, rng: &mut impl Rng) -> Batch {
        self.assemble(&self.draw(b, rng))
    }

    pub fn assemble(&self, picks: &[((usize, usize, usize), Acquisitions)]) -> Batch {
        let p = self.patch;
        let half = p / 2;
        let b = picks.len();
        let mut optical = Vec::new();
        let mut sar = Vec::new();
        let mut targets = vec![0.0f32; b * N_OUTPUTS * p * p];
        let mut mask = vec![false; b * p * p];
        for (bi, &((si, r, c), acq)) in picks.iter().enumerate() {
            let scene = &self.dataset.scenes[si];
            let (r0, c0) = (r - half, c - half);
            let (o, s) = cut_inputs(scene, self.ablation, acq, r0, c0, p, p);
            optical.extend(o.unwrap_or_default());
            sar.extend(s.unwrap_or_default());
            let w = scene.width();
            for dr in 0..p {
                for dc in 0..p {
                    let cell = (r0 + dr) * w + c0 + dc;
                    if !scene.reference.forested[cell] {
                        continue;
                    }
                    mask[(bi * p + dr) * p + dc] = true;
                    for v in 0..N_OUTPUTS {
                        targets[((bi * N_OUTPUTS + v) * p + dr) * p + dc] = scene.reference.bands[v][cell] as f32;
                    }
                }
            }
        }
        let opt_c = self.ablation.optical_channels();
        let sar_c = self.ablation.sar_channels();
        Batch {
            optical: (opt_c > 0).then(|| Tensor::new(vec![b, opt_c, p, p], optical).expect("optical batch")),
            sar: (sar_c > 0).then(|| Tensor::new(vec![b, sar_c, p, p], sar).expect("SAR batch")),
            targets: Tensor::new(vec![b, N_OUTPUTS, p, p], targets).expect("target batch"),
            mask,
            centers: picks.iter().map(|&(c, _)| c).collect(),
        }
    }
}

/// Per-channel mean and standard deviation over the rows of `split`, in the
/// input layout of `ablation` (single-orbit inputs pool both orbits).
pub fn input_statistics(dataset: &Dataset, split: Split, ablation: Ablation) -> Result<InputNorm> {
    let opt_c = ablation.optical_channels();
    let sar_c = ablation.sar_channels();
    let n_ch = opt_c + sar_c;
    let mut sum = vec![0.0f64; n_ch];
    let mut sq = vec![0.0f64; n_ch];
    let mut count = vec![0usize; n_ch];
    let mut add = |ch: usize, t: &Tensor<f32>, band: usize, rows: &std::ops::Range<usize>, w: usize| {
        let h = t.shape()[1];
        let plane = &t.data()[band * h * w..(band + 1) * h * w];
        for &v in &plane[rows.start * w..rows.end * w] {
            sum[ch] += v as f64;
            sq[ch] += (v as f64) * (v as f64);
        }
        count[ch] += rows.len() * w;
    };
    for (si, scene) in dataset.scenes.iter().enumerate() {
        let w = scene.width();
        for rows in dataset.row_splits(si)?.ranges(split) {
            if opt_c > 0 {
                for t in &scene.optical {
                    for b in 0..OPTICAL_BANDS {
                        add(b, t, b, rows, w);
                    }
                }
            }
            for b in 0..SAR_BANDS_PER_ORBIT {
                if sar_c == SAR_BANDS_PER_ORBIT {
                    for t in scene.sar_asc.iter().chain(&scene.sar_desc) {
                        add(opt_c + b, t, b, rows, w);
                    }
                } else if sar_c > 0 {
                    for t in &scene.sar_asc {
                        add(opt_c + b, t, b, rows, w);
                    }
                    for t in &scene.sar_desc {
                        add(opt_c + SAR_BANDS_PER_ORBIT + b, t, b, rows, w);
                    }
                }
            }
        }
    }
    if count.iter().any(|&c| c == 0) {
        return Err(Error::Empty(format!("the {split:?} split holds no pixels")));
    }
    let mut norm = InputNorm::identity(n_ch);
    for ch in 0..n_ch {
        let n = count[ch] as f64;
        let mean = sum[ch] / n;
        let var = (sq[ch] / n - mean * mean).max(0.0);
        norm.mean[ch] = mean as f32;
        norm.std[ch] = var.sqrt().max(1e-6) as f32;
    }
    Ok(norm)
}

/// Adam with bias correction. Weight decay is decoupled: every parameter
/// first shrinks by `lr·wd·θ`, then takes the Adam step. Non-finite
/// gradients leave the parameters untouched and return an error.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &GradStore<f32>,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape("optimizer state does not match the parameters".into()));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!("gradient at step {}", state.step + 1)));
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = state.lr;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let decay = (1.0 - lr * cfg.weight_decay) as f32;
    let step_size = (lr / bc1) as f32;
    let inv_bc2 = (1.0 / bc2) as f32;
    let eps = cfg.eps as f32;
    for id in params.ids().collect::<Vec<_>>() {
        let g = grads.get(id).data();
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        for (((theta, &gi), mi), vi) in params.get_mut(id).data_mut().iter_mut().zip(g).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *theta *= decay;
            *theta -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

pub fn new_optimizer_state(params: &ParamStore<f32>, lr: f64) -> OptimizerState {
    let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
    OptimizerState {
        step: 0,
        lr,
        m: zeros(),
        v: zeros(),
    }
}

/// Reduce the learning rate by `factor` once the validation loss has not
/// strictly improved for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Record one epoch's validation loss; returns true when the rate drops.
    pub fn update(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss; `None` for the pre-training evaluation.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,train_loss,val_loss,lr")?;
    for r in history {
        let tl = r.train_loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(f, "{},{},{},{}", r.epoch, tl, r.val_loss, r.lr)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen.
    pub params: ModelParameters<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub optimizer: OptimizerState,
}

/// Masked NLL of a batch in eval mode.
fn eval_batch(params: &ModelParameters<f32>, batch: &Batch) -> Result<(f64, usize)> {
    let (m, s) = params.predict(batch.optical.clone(), batch.sar.clone())?;
    let terms = batch.mask.iter().filter(|&&v| v).count() * N_OUTPUTS;
    if terms == 0 {
        return Ok((0.0, 0));
    }
    let loss = gaussian_nll_loss(&m, &s, &batch.targets, &batch.mask)?;
    Ok((loss as f64 * terms as f64, terms))
}

/// Mean masked NLL over a fixed set of batches.
pub fn validation_loss(params: &ModelParameters<f32>, batches: &[Batch]) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0);
    for b in batches {
        let (l, t) = eval_batch(params, b)?;
        total += l;
        n += t;
    }
    if n == 0 {
        return Err(Error::Empty("validation batches hold no forested pixels".into()));
    }
    Ok(total / n as f64)
}

/// Set batch-norm running statistics to the statistics of one batch.
pub fn prime_batch_norm(params: &mut ModelParameters<f32>, batch: &Batch) -> Result<()> {
    let momentum = params.network.config.bn_momentum;
    params.network.config.bn_momentum = 1.0;
    let out = params.run(batch.optical.clone(), batch.sar.clone(), true);
    params.network.config.bn_momentum = momentum;
    out.map(|_| ())
}

/// Output-layer warm start: the biases start at the inverse activation of
/// the training-target mean and at the log of the target variance, and the
/// output weights shrink by `HEAD_WEIGHT_SCALE` so those biases dominate.
fn warm_start(params: &mut ModelParameters<f32>, dataset: &Dataset) -> Result<()> {
    let mut sum = [0.0f64; N_OUTPUTS];
    let mut sq = [0.0f64; N_OUTPUTS];
    let mut n = 0usize;
    for (si, scene) in dataset.scenes.iter().enumerate() {
        let w = scene.width();
        for rows in &dataset.row_splits(si)?.train {
            for cell in rows.start * w..rows.end * w {
                if !scene.reference.forested[cell] {
                    continue;
                }
                n += 1;
                for v in 0..N_OUTPUTS {
                    let x = scene.reference.bands[v][cell];
                    sum[v] += x;
                    sq[v] += x * x;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::Empty("no forested training pixels".into()));
    }
    for name in ["head.mean.conv2.weight", "head.log_var.conv2.weight"] {
        let id = params
            .store
            .id(name)
            .ok_or_else(|| Error::Config(format!("model lacks {name}")))?;
        for w in params.store.get_mut(id).data_mut() {
            *w *= HEAD_WEIGHT_SCALE;
        }
    }
    let (mean_b, var_b) = params.output_biases();
    for v in 0..N_OUTPUTS {
        let mean = sum[v] / n as f64;
        let var = (sq[v] / n as f64 - mean * mean).max(1e-8);
        let bias = match params.config().activations[v] {
            Activation::Exp => mean.max(1e-6).ln(),
            Activation::Sigmoid => {
                let p = mean.clamp(1e-4, 1.0 - 1e-4);
                (p / (1.0 - p)).ln()
            }
        };
        params.store.get_mut(mean_b).data_mut()[v] = bias as f32;
        params.store.get_mut(var_b).data_mut()[v] = var.ln().clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP) as f32;
    }
    Ok(())
}

/// Parameters a training run starts from: seeded initialization, input
/// standardization from the training rows, optional head warm start.
pub fn initialize_member(
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
) -> Result<ModelParameters<f32>> {
    let config = model_config.select_inputs(cfg.ablation);
    let mut params = build_model::<f32>(&config, cfg.member_seed())?;
    params.input_norm = input_statistics(dataset, Split::Train, cfg.ablation)?;
    if cfg.warm_start_heads {
        warm_start(&mut params, dataset)?;
    }
    Ok(params)
}

/// Train one member on the training split, selecting the parameters with
/// the lowest validation NLL (pre-training parameters included).
pub fn train(model_config: &ModelConfig, cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    train_with_progress(model_config, cfg, dataset, |_| {})
}

pub fn train_with_progress(
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_sampler = PatchSampler::new(dataset, Split::Train, cfg.patch_size, cfg.ablation)?;
    let val_sampler = PatchSampler::new(dataset, Split::Val, cfg.patch_size, cfg.ablation)?;
    let seed = cfg.member_seed();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1));
    let mut val_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 2));
    let val_batches: Vec<Batch> = {
        let mut left = cfg.val_patches;
        let mut out = Vec::new();
        while left > 0 {
            let b = left.min(cfg.batch_size);
            out.push(val_sampler.sample(b, &mut val_rng));
            left -= b;
        }
        out
    };

    let mut params = initialize_member(model_config, cfg, dataset)?;
    prime_batch_norm(&mut params, &train_sampler.sample(cfg.batch_size, &mut rng))?;
    let mut optimizer = new_optimizer_state(&params.store, cfg.base_lr);
    let mut scheduler = PlateauScheduler::new(cfg.base_lr, cfg.plateau_factor, cfg.patience);

    let initial = validation_loss(&params, &val_batches)?;
    if !initial.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            step: 0,
            reason: "initial validation loss is not finite".into(),
        });
    }
    scheduler.update(initial);
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss: initial,
        lr: cfg.base_lr,
    }];
    progress(&history[0]);
    let mut best = (initial, 0, params.clone());

    let per_epoch = cfg.batches_per_epoch.unwrap_or_else(|| {
        (train_sampler.len() / (cfg.batch_size * cfg.patch_size * cfg.patch_size)).max(1)
    });
    let mut grads = GradStore::zeros_like(&params.store);
    let clamp = LOG_VAR_CLAMP as f32;
    for epoch in 1..=cfg.max_epochs {
        let mut total = 0.0;
        for step in 0..per_epoch {
            let batch = train_sampler.sample(cfg.batch_size, &mut rng);
            let inputs = params.standardize(batch.optical, batch.sar)?;
            grads.reset();
            let loss = {
                let ModelParameters {
                    network,
                    store,
                    running,
                    ..
                } = &mut params;
                let mut g = Graph::new(store);
                let (m, s) = network.forward(
                    &mut g,
                    inputs,
                    BnMode::Train(Some(running.as_mut_slice())),
                    ForwardOptions::default(),
                )?;
                let l = g.gaussian_nll(m, s, batch.targets, batch.mask, clamp)?;
                let value = g.value(l).data()[0] as f64;
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        reason: format!("training loss {value}"),
                    });
                }
                g.backward(l, &mut grads)?;
                value
            };
            optimizer.lr = scheduler.lr;
            adam_step(&mut params.store, &grads, &mut optimizer, cfg).map_err(|e| Error::Diverged {
                epoch,
                step,
                reason: e.to_string(),
            })?;
            total += loss;
        }
        let val = validation_loss(&params, &val_batches)?;
        if !val.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: per_epoch,
                reason: format!("validation loss {val}"),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: Some(total / per_epoch as f64),
            val_loss: val,
            lr: scheduler.lr,
        };
        progress(&record);
        history.push(record);
        if val < best.0 {
            best = (val, epoch, params.clone());
        }
        scheduler.update(val);
    }
    optimizer.lr = scheduler.lr;
    Ok(TrainOutcome {
        params: best.2,
        best_epoch: best.1,
        history,
        optimizer,
    })
}

/// Reference value of `v` at a cell, `None` when not forested.
pub fn reference_value(scene: &SceneData, v: Variable, cell: usize) -> Option<f64> {
    let x = scene.reference.bands[v.index()][cell];
    (scene.reference.forested[cell] && x != NODATA).then_some(x)
}
