//! Dual-branch probabilistic CNN.
//!
//! An optical entry block (1×1 conv) and a SAR entry block (5×5 conv) feed
//! stages of ResNeXt bottleneck blocks at constant resolution. The raw
//! input pixels are concatenated onto the final feature map, and two
//! 1×1-conv heads emit per-pixel means and log-variances for the five
//! structural variables.

mod checkpoint;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, Checkpoint, OptimizerState,
    FORMAT_VERSION,
};

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{OPTICAL_BANDS, SAR_BANDS_PER_ORBIT};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, Graph, ParamId, ParamStore, RunningStats, Scalar, Tensor, Var};

/// Number of regressed variables.
pub const N_OUTPUTS: usize = 5;
/// Bound applied to predicted log-variances before exponentiation.
pub const LOG_VAR_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Exp,
    Sigmoid,
}

/// What the global pixel shortcut re-injects before the heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutSource {
    Raw,
    EntryFeatures,
}

/// Sensor configuration of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "S2+S1")]
    S2S1,
    #[serde(rename = "S2+S1Rand")]
    S2S1Rand,
    #[serde(rename = "S2")]
    S2,
    #[serde(rename = "S1")]
    S1,
    #[serde(rename = "S1Rand")]
    S1Rand,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::S2S1,
        Ablation::S2S1Rand,
        Ablation::S2,
        Ablation::S1,
        Ablation::S1Rand,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Ablation::S2S1 => "S2+S1",
            Ablation::S2S1Rand => "S2+S1Rand",
            Ablation::S2 => "S2",
            Ablation::S1 => "S1",
            Ablation::S1Rand => "S1Rand",
        }
    }

    pub fn optical_channels(self) -> usize {
        match self {
            Ablation::S2S1 | Ablation::S2S1Rand | Ablation::S2 => OPTICAL_BANDS,
            Ablation::S1 | Ablation::S1Rand => 0,
        }
    }

    /// Both orbits, one random orbit, or none.
    pub fn sar_channels(self) -> usize {
        match self {
            Ablation::S2S1 | Ablation::S1 => 2 * SAR_BANDS_PER_ORBIT,
            Ablation::S2S1Rand | Ablation::S1Rand => SAR_BANDS_PER_ORBIT,
            Ablation::S2 => 0,
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
            .collect::<String>()
            .to_ascii_lowercase();
        let norm = norm.strip_suffix("only").unwrap_or(&norm);
        Ok(match norm {
            "s2+s1" | "s2s1" | "both" => Ablation::S2S1,
            "s2+s1rand" | "s2s1rand" => Ablation::S2S1Rand,
            "s2" | "optical" => Ablation::S2,
            "s1" | "sar" => Ablation::S1,
            "s1rand" => Ablation::S1Rand,
            _ => return Err(Error::InvalidInput(format!("unknown input configuration {s}"))),
        })
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub optical_channels: usize,
    pub sar_channels: usize,
    /// Blocks per stage.
    pub n_blocks: Vec<usize>,
    /// Output channels per stage.
    pub n_channels: Vec<usize>,
    /// Groups of the 3×3 bottleneck convolutions.
    pub n_groups: usize,
    /// Bottleneck width is the stage width divided by this.
    pub bottleneck_divisor: usize,
    pub head_hidden_channels: usize,
    pub sar_kernel: usize,
    pub shortcut: ShortcutSource,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Mean-head activation, in [`crate::Variable::ALL`] order.
    pub activations: [Activation; N_OUTPUTS],
}

impl ModelConfig {
    /// Full-size architecture.
    pub fn full_scale() -> Self {
        Self {
            n_blocks: vec![2, 3, 5, 3],
            n_channels: vec![256, 512, 1024, 2048],
            n_groups: 32,
            head_hidden_channels: 256,
            ..Self::desk()
        }
    }

    /// Small CPU-sized architecture.
    pub fn desk() -> Self {
        Self {
            optical_channels: OPTICAL_BANDS,
            sar_channels: 2 * SAR_BANDS_PER_ORBIT,
            n_blocks: vec![1, 1],
            n_channels: vec![32, 64],
            n_groups: 4,
            bottleneck_divisor: 2,
            head_hidden_channels: 32,
            sar_kernel: 5,
            shortcut: ShortcutSource::Raw,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            activations: [
                Activation::Exp,
                Activation::Exp,
                Activation::Sigmoid,
                Activation::Sigmoid,
                Activation::Sigmoid,
            ],
        }
    }

    pub fn n_stages(&self) -> usize {
        self.n_channels.len()
    }

    pub fn raw_channels(&self) -> usize {
        self.optical_channels + self.sar_channels
    }

    /// `(optical, sar)` entry-block widths; zero for an absent branch.
    pub fn entry_channels(&self) -> (usize, usize) {
        let c0 = self.n_channels.first().copied().unwrap_or(0);
        match (self.optical_channels > 0, self.sar_channels > 0) {
            (true, true) => (c0 / 2, c0 / 2),
            (true, false) => (c0, 0),
            (false, true) => (0, c0),
            (false, false) => (0, 0),
        }
    }

    pub fn bottleneck_width(&self, stage: usize) -> usize {
        self.n_channels[stage] / self.bottleneck_divisor
    }

    /// Channels entering the heads.
    pub fn head_in_channels(&self) -> usize {
        let last = self.n_channels.last().copied().unwrap_or(0);
        last + match self.shortcut {
            ShortcutSource::Raw => self.raw_channels(),
            ShortcutSource::EntryFeatures => self.n_channels[0],
        }
    }

    /// The configuration restricted to the inputs of `ablation`.
    pub fn select_inputs(&self, ablation: Ablation) -> ModelConfig {
        ModelConfig {
            optical_channels: ablation.optical_channels(),
            sar_channels: ablation.sar_channels(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_channels.is_empty() || self.n_blocks.len() != self.n_channels.len() {
            return bad(format!(
                "need one block count per stage, got {:?} blocks for {:?} channels",
                self.n_blocks, self.n_channels
            ));
        }
        if self.n_blocks.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if self.raw_channels() == 0 {
            return bad("at least one input branch is required".into());
        }
        if self.optical_channels > 0 && self.sar_channels > 0 && self.n_channels[0] % 2 != 0 {
            return bad("first stage width must be even to split over two entry blocks".into());
        }
        if self.n_groups == 0 || self.bottleneck_divisor == 0 || self.head_hidden_channels == 0 {
            return bad("groups, bottleneck divisor and head width must be positive".into());
        }
        for (i, &c) in self.n_channels.iter().enumerate() {
            let bw = c / self.bottleneck_divisor;
            if c == 0 || c % self.bottleneck_divisor != 0 || bw % self.n_groups != 0 {
                return bad(format!(
                    "stage {i}: width {c} / {} = {bw} is not divisible into {} groups",
                    self.bottleneck_divisor, self.n_groups
                ));
            }
        }
        if self.sar_kernel % 2 == 0 {
            return bad(format!("SAR kernel {} is not odd", self.sar_kernel));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0 && self.bn_eps > 0.0) {
            return bad("batch-norm momentum must lie in (0, 1] and epsilon be positive".into());
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Conv without bias followed by batch norm.
#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvBn {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    bn: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    conv1: ConvBn,
    conv2: ConvBn,
    conv3: ConvBn,
    /// 1×1 projection (weight, bias) on the skip path.
    projection: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Head {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    optical_entry: Option<ConvBn>,
    sar_entry: Option<ConvBn>,
    stages: Vec<Vec<Block>>,
    mean_head: Head,
    log_var_head: Head,
}

/// Per-channel input standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl InputNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Standardize a `[B, C, H, W]` tensor in place.
    pub fn apply<T: Scalar>(&self, x: &mut Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.mean.len() {
            return Err(Error::Shape(format!(
                "normalizer has {} channels, input {c}",
                self.mean.len()
            )));
        }
        for (i, chunk) in x.data_mut().chunks_mut(h * w).enumerate() {
            let ch = i % c;
            let (m, s) = (T::from_f64(self.mean[ch] as f64), T::from_f64(self.std[ch] as f64));
            for v in chunk {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }
}

/// Batch-norm behavior of a forward pass.
pub enum BnMode<'a, T> {
    /// Batch statistics; running statistics updated when given.
    Train(Option<&'a mut [RunningStats<T>]>),
    /// Running statistics.
    Eval(&'a [RunningStats<T>]),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Feed zeros through the pixel shortcut instead of the real source.
    pub zero_shortcut: bool,
}

/// Network inputs, already standardized. Either may be absent according to
/// the configuration.
pub struct ModelInputs<T> {
    pub optical: Option<Tensor<T>>,
    pub sar: Option<Tensor<T>>,
}

/// Architecture: configuration plus the parameter ids of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    layout: Layout,
}

/// All learnable tensors, batch-norm statistics and input standardization.
#[derive(Clone, Debug)]
pub struct ModelParameters<T = f32> {
    pub network: Network,
    pub store: ParamStore<T>,
    pub running: Vec<RunningStats<T>>,
    /// Layer path of each entry of `running`.
    pub bn_names: Vec<String>,
    pub input_norm: InputNorm,
}

struct Builder<'a, T: Scalar> {
    store: ParamStore<T>,
    bn_names: Vec<String>,
    running: Vec<RunningStats<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)));
        self.store.add(name, t)
    }

    fn conv(&mut self, name: &str, c_out: usize, c_in_per_group: usize, k: usize) -> Result<ParamId> {
        self.uniform(format!("{name}.weight"), &[c_out, c_in_per_group, k, k], c_in_per_group * k * k)
    }

    fn bias(&mut self, name: &str, c: usize) -> Result<ParamId> {
        self.store.add(format!("{name}.bias"), Tensor::zeros(&[c]))
    }

    fn conv_bn(&mut self, conv: &str, bn: &str, c_out: usize, c_in_per_group: usize, k: usize) -> Result<ConvBn> {
        let weight = self.conv(conv, c_out, c_in_per_group, k)?;
        let gamma = self.store.add(format!("{bn}.gamma"), Tensor::full(&[c_out], T::one()))?;
        let beta = self.store.add(format!("{bn}.beta"), Tensor::zeros(&[c_out]))?;
        self.bn_names.push(bn.to_string());
        self.running.push(RunningStats::uninitialized(c_out));
        Ok(ConvBn {
            weight,
            gamma,
            beta,
            bn: self.running.len() - 1,
        })
    }

    fn head(&mut self, name: &str, c_in: usize, hidden: usize) -> Result<Head> {
        let w1 = self.conv(&format!("{name}.conv1"), hidden, c_in, 1)?;
        let b1 = self.bias(&format!("{name}.conv1"), hidden)?;
        let w2 = self.conv(&format!("{name}.conv2"), N_OUTPUTS, hidden, 1)?;
        let b2 = self.bias(&format!("{name}.conv2"), N_OUTPUTS)?;
        Ok(Head { w1, b1, w2, b2 })
    }
}

/// Randomly initialized parameters: He-uniform conv weights, zero biases
/// and shifts, unit scales. Deterministic in `seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParameters<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        store: ParamStore::new(),
        bn_names: Vec::new(),
        running: Vec::new(),
        rng: &mut rng,
    };
    let (e_opt, e_sar) = config.entry_channels();
    let optical_entry = (e_opt > 0)
        .then(|| b.conv_bn("entry.optical.conv", "entry.optical.bn", e_opt, config.optical_channels, 1))
        .transpose()?;
    let sar_entry = (e_sar > 0)
        .then(|| {
            b.conv_bn(
                "entry.sar.conv",
                "entry.sar.bn",
                e_sar,
                config.sar_channels,
                config.sar_kernel,
            )
        })
        .transpose()?;
    let mut stages = Vec::new();
    let mut c_in = config.n_channels[0];
    for (s, (&n, &c_out)) in config.n_blocks.iter().zip(&config.n_channels).enumerate() {
        let bw = config.bottleneck_width(s);
        let mut blocks = Vec::new();
        for j in 0..n {
            let p = format!("stage{s}.block{j}");
            let conv1 = b.conv_bn(&format!("{p}.conv1"), &format!("{p}.bn1"), bw, c_in, 1)?;
            let conv2 = b.conv_bn(&format!("{p}.conv2"), &format!("{p}.bn2"), bw, bw / config.n_groups, 3)?;
            let conv3 = b.conv_bn(&format!("{p}.conv3"), &format!("{p}.bn3"), c_out, bw, 1)?;
            let projection = if c_in != c_out {
                let name = format!("{p}.projection");
                Some((b.conv(&name, c_out, c_in, 1)?, b.bias(&name, c_out)?))
            } else {
                None
            };
            blocks.push(Block {
                conv1,
                conv2,
                conv3,
                projection,
            });
            c_in = c_out;
        }
        stages.push(blocks);
    }
    let head_in = config.head_in_channels();
    let mean_head = b.head("head.mean", head_in, config.head_hidden_channels)?;
    let log_var_head = b.head("head.log_var", head_in, config.head_hidden_channels)?;
    let Builder {
        store,
        bn_names,
        running,
        ..
    } = b;
    Ok(ModelParameters {
        network: Network {
            config: config.clone(),
            layout: Layout {
                optical_entry,
                sar_entry,
                stages,
                mean_head,
                log_var_head,
            },
        },
        store,
        running,
        bn_names,
        input_norm: InputNorm::identity(config.raw_channels()),
    })
}

struct Pass<'a, 'g, 'p, T: Scalar> {
    g: &'a mut Graph<'g, T>,
    bn: BnMode<'p, T>,
    config: &'a ModelConfig,
}

impl<T: Scalar> Pass<'_, '_, '_, T> {
    fn conv_bn(&mut self, x: Var, l: &ConvBn, groups: usize, pad: usize, relu: bool) -> Result<Var> {
        let w = self.g.param(l.weight);
        let y = self.g.conv2d(x, w, None, groups, pad)?;
        let (gamma, beta) = (self.g.param(l.gamma), self.g.param(l.beta));
        let mode = match &mut self.bn {
            BnMode::Train(running) => BatchNormMode::Train {
                running: running.as_deref_mut().map(|r| &mut r[l.bn]),
                momentum: T::from_f64(self.config.bn_momentum),
            },
            BnMode::Eval(running) => BatchNormMode::Eval { running: &running[l.bn] },
        };
        let y = self.g.batch_norm(y, gamma, beta, mode, T::from_f64(self.config.bn_eps))?;
        Ok(if relu { self.g.relu(y) } else { y })
    }

    fn head(&mut self, x: Var, h: &Head) -> Result<Var> {
        let (w1, b1) = (self.g.param(h.w1), self.g.param(h.b1));
        let y = self.g.conv2d(x, w1, Some(b1), 1, 0)?;
        let y = self.g.relu(y);
        let (w2, b2) = (self.g.param(h.w2), self.g.param(h.b2));
        self.g.conv2d(y, w2, Some(b2), 1, 0)
    }
}

impl Network {
    /// Record the network on `g`, whose parameter store must come from
    /// [`build_model`] with the same configuration. Returns
    /// `(means, log_vars)`.
    pub fn forward<'g, T: Scalar>(
        &self,
        g: &mut Graph<'g, T>,
        inputs: ModelInputs<T>,
        bn: BnMode<'_, T>,
        opts: ForwardOptions,
    ) -> Result<(Var, Var)> {
        let (config, layout) = (&self.config, &self.layout);
        let (b, h, w) = check_inputs(config, &inputs)?;
        let mut pass = Pass { g, bn, config };
        let mut raw = Vec::new();
        let mut entries = Vec::new();
        if let (Some(x), Some(l)) = (inputs.optical, &layout.optical_entry) {
            let xv = pass.g.input(x);
            raw.push(xv);
            entries.push(pass.conv_bn(xv, l, 1, 0, true)?);
        }
        if let (Some(x), Some(l)) = (inputs.sar, &layout.sar_entry) {
            let xv = pass.g.input(x);
            raw.push(xv);
            entries.push(pass.conv_bn(xv, l, 1, (config.sar_kernel - 1) / 2, true)?);
        }
        let entry = if entries.len() == 1 {
            entries[0]
        } else {
            pass.g.concat_channels(&entries)?
        };
        let mut x = entry;
        for block in layout.stages.iter().flatten() {
            let y = pass.conv_bn(x, &block.conv1, 1, 0, true)?;
            let y = pass.conv_bn(y, &block.conv2, config.n_groups, 1, true)?;
            let y = pass.conv_bn(y, &block.conv3, 1, 0, false)?;
            let skip = match block.projection {
                Some((pw, pb)) => {
                    let (w, b) = (pass.g.param(pw), pass.g.param(pb));
                    pass.g.conv2d(x, w, Some(b), 1, 0)?
                }
                None => x,
            };
            let sum = pass.g.add(y, skip)?;
            x = pass.g.relu(sum);
        }
        let shortcut = match config.shortcut {
            ShortcutSource::Raw if raw.len() == 1 => raw[0],
            ShortcutSource::Raw => pass.g.concat_channels(&raw)?,
            ShortcutSource::EntryFeatures => entry,
        };
        let shortcut = if opts.zero_shortcut {
            let c = pass.g.value(shortcut).shape()[1];
            pass.g.input(Tensor::zeros(&[b, c, h, w]))
        } else {
            shortcut
        };
        let features = pass.g.concat_channels(&[x, shortcut])?;
        let mean_raw = pass.head(features, &layout.mean_head)?;
        let log_vars = pass.head(features, &layout.log_var_head)?;
        let mut outs = Vec::with_capacity(N_OUTPUTS);
        for (j, act) in config.activations.iter().enumerate() {
            let s = pass.g.slice_channels(mean_raw, j, 1)?;
            outs.push(match act {
                Activation::Exp => pass.g.exp(s),
                Activation::Sigmoid => pass.g.sigmoid(s),
            });
        }
        let means = pass.g.concat_channels(&outs)?;
        Ok((means, log_vars))
    }
}

impl<T: Scalar> ModelParameters<T> {
    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        ModelParameters {
            network: self.network.clone(),
            store: self.store.cast(),
            running: self.running.iter().map(RunningStats::cast).collect(),
            bn_names: self.bn_names.clone(),
            input_norm: self.input_norm.clone(),
        }
    }

    /// Ids of the two output-layer biases: `(mean, log_var)`.
    pub fn output_biases(&self) -> (ParamId, ParamId) {
        (self.network.layout.mean_head.b2, self.network.layout.log_var_head.b2)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }

    pub fn stats_initialized(&self) -> bool {
        self.running.iter().all(|r| r.mean().is_some())
    }

    /// Forward pass with this model's own parameters, recording on a fresh
    /// graph. Inputs are standardized with `input_norm` first.
    pub fn run(
        &mut self,
        optical: Option<Tensor<T>>,
        sar: Option<Tensor<T>>,
        train: bool,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let inputs = self.standardize(optical, sar)?;
        let ModelParameters {
            network,
            store,
            running,
            ..
        } = self;
        let mut g = Graph::new(store);
        let bn = if train {
            BnMode::Train(Some(running.as_mut_slice()))
        } else {
            BnMode::Eval(running.as_slice())
        };
        let (m, s) = network.forward(&mut g, inputs, bn, ForwardOptions::default())?;
        Ok((g.value(m).clone(), g.value(s).clone()))
    }

    /// Eval-mode prediction `(means, log_vars)` for raw inputs.
    pub fn predict(&self, optical: Option<Tensor<T>>, sar: Option<Tensor<T>>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.predict_with(optical, sar, ForwardOptions::default())
    }

    pub fn predict_with(
        &self,
        optical: Option<Tensor<T>>,
        sar: Option<Tensor<T>>,
        opts: ForwardOptions,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let inputs = self.standardize(optical, sar)?;
        let mut g = Graph::new(&self.store);
        let (m, s) = self.network.forward(&mut g, inputs, BnMode::Eval(&self.running), opts)?;
        Ok((g.value(m).clone(), g.value(s).clone()))
    }

    /// Apply `input_norm` to raw inputs (optical channels first, then SAR).
    pub fn standardize(&self, optical: Option<Tensor<T>>, sar: Option<Tensor<T>>) -> Result<ModelInputs<T>> {
        let co = self.config().optical_channels;
        let split = |n: &InputNorm, start: usize, len: usize| InputNorm {
            mean: n.mean[start..start + len].to_vec(),
            std: n.std[start..start + len].to_vec(),
        };
        let optical = optical
            .map(|mut x| {
                split(&self.input_norm, 0, co).apply(&mut x)?;
                Ok::<_, Error>(x)
            })
            .transpose()?;
        let sar = sar
            .map(|mut x| {
                split(&self.input_norm, co, self.config().sar_channels).apply(&mut x)?;
                Ok::<_, Error>(x)
            })
            .transpose()?;
        Ok(ModelInputs { optical, sar })
    }
}

fn check_inputs<T: Scalar>(config: &ModelConfig, inputs: &ModelInputs<T>) -> Result<(usize, usize, usize)> {
    let mut dims = None;
    for (x, c, what) in [
        (&inputs.optical, config.optical_channels, "optical"),
        (&inputs.sar, config.sar_channels, "SAR"),
    ] {
        match (x, c) {
            (None, 0) => {}
            (None, _) => return Err(Error::InvalidInput(format!("model expects {what} input"))),
            (Some(_), 0) => return Err(Error::InvalidInput(format!("model takes no {what} input"))),
            (Some(t), c) => {
                let (b, ci, h, w) = t.dims4()?;
                if ci != c {
                    return Err(Error::Shape(format!("{what} input has {ci} channels, model expects {c}")));
                }
                if dims.is_some_and(|d| d != (b, h, w)) {
                    return Err(Error::Shape("optical and SAR inputs differ in batch or spatial extent".into()));
                }
                dims = Some((b, h, w));
            }
        }
    }
    dims.ok_or_else(|| Error::InvalidInput("no inputs".into()))
}

/// Parameter count of a configuration, layer by layer.
pub fn parameter_count(config: &ModelConfig) -> usize {
    let (e_opt, e_sar) = config.entry_channels();
    let mut n = 0;
    if e_opt > 0 {
        n += e_opt * config.optical_channels + 2 * e_opt;
    }
    if e_sar > 0 {
        n += e_sar * config.sar_channels * config.sar_kernel * config.sar_kernel + 2 * e_sar;
    }
    let mut c_in = config.n_channels[0];
    for (s, (&blocks, &c_out)) in config.n_blocks.iter().zip(&config.n_channels).enumerate() {
        let bw = config.bottleneck_width(s);
        for _ in 0..blocks {
            n += c_in * bw + 2 * bw;
            n += bw * (bw / config.n_groups) * 9 + 2 * bw;
            n += bw * c_out + 2 * c_out;
            if c_in != c_out {
                n += c_in * c_out + c_out;
            }
            c_in = c_out;
        }
    }
    let hh = config.head_hidden_channels;
    n + 2 * (config.head_in_channels() * hh + hh + hh * N_OUTPUTS + N_OUTPUTS)
}

/// Finite-difference check of every network parameter: random inputs,
/// training-mode batch norm, and a random linear functional of both output
/// tensors as the scalar (a full vector-Jacobian probe).
pub fn network_grad_check(
    config: &ModelConfig,
    seed: u64,
    batch: usize,
    size: usize,
    opts: &crate::tensor::gradcheck::GradCheckOptions,
) -> Result<crate::tensor::gradcheck::GradCheckReport> {
    let params = build_model::<f64>(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut input = |c: usize| {
        (c > 0).then(|| Tensor::from_fn(&[batch, c, size, size], |_| rng.random_range(-1.5..1.5)))
    };
    let optical = input(config.optical_channels);
    let sar = input(config.sar_channels);
    let shape = [batch, N_OUTPUTS, size, size];
    let r_mean = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let r_var = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let network = &params.network;
    crate::tensor::gradcheck::grad_check(
        &params.store,
        |g| {
            let inputs = ModelInputs {
                optical: optical.clone(),
                sar: sar.clone(),
            };
            let (m, s) = network.forward(g, inputs, BnMode::Train(None), ForwardOptions::default())?;
            let rm = g.input(r_mean.clone());
            let rv = g.input(r_var.clone());
            let pm = g.mul(m, rm)?;
            let pv = g.mul(s, rv)?;
            let both = g.add(pm, pv)?;
            Ok(g.sum(both))
        },
        opts,
    )
}
