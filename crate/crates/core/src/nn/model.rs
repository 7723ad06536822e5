use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    normal_init, sinusoidal_encoding, BatchNorm, Conv1d, EncoderLayer, LayerNorm, Linear,
    LstmCell,
};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Mlp,
    Cnn,
    Lstm,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Cls,
    Last,
    Max,
}

fn default_family() -> Family {
    Family::Transformer
}
fn default_input_dim() -> usize {
    6
}
fn default_latent() -> usize {
    256
}
fn default_layers() -> usize {
    4
}
fn default_heads() -> usize {
    8
}
fn default_true() -> bool {
    true
}
fn default_cnn_channels() -> Vec<usize> {
    vec![64, 128, 256]
}
fn default_cnn_kernel() -> usize {
    5
}
fn default_mlp_hidden() -> Vec<usize> {
    vec![256, 256]
}
fn default_lstm_hidden() -> usize {
    128
}
fn default_lstm_layers() -> usize {
    1
}
fn default_classes() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_family")]
    pub family: Family,
    /// Sensor channels per time step; filled from the dataset schema by the runner.
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Falls back to the family default when absent.
    #[serde(default)]
    pub dropout: Option<f64>,
    #[serde(default)]
    pub pooling: Option<Pooling>,
    #[serde(default = "default_true")]
    pub use_positional: bool,
    #[serde(default)]
    pub use_cls: bool,
    #[serde(default = "default_cnn_channels")]
    pub cnn_channels: Vec<usize>,
    #[serde(default = "default_cnn_kernel")]
    pub cnn_kernel: usize,
    #[serde(default = "default_mlp_hidden")]
    pub mlp_hidden: Vec<usize>,
    /// Hidden size per direction.
    #[serde(default = "default_lstm_hidden")]
    pub lstm_hidden: usize,
    #[serde(default = "default_lstm_layers")]
    pub lstm_layers: usize,
    #[serde(default = "default_true")]
    pub lstm_bidirectional: bool,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Number of mixture components; zero disables the presence/proportion heads.
    #[serde(default)]
    pub mixture_outputs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_family(Family::Transformer)
    }
}

impl ModelConfig {
    pub fn for_family(family: Family) -> Self {
        ModelConfig {
            family,
            input_dim: default_input_dim(),
            latent_dim: default_latent(),
            layers: default_layers(),
            heads: default_heads(),
            dropout: None,
            pooling: None,
            use_positional: true,
            use_cls: false,
            cnn_channels: default_cnn_channels(),
            cnn_kernel: default_cnn_kernel(),
            mlp_hidden: default_mlp_hidden(),
            lstm_hidden: default_lstm_hidden(),
            lstm_layers: default_lstm_layers(),
            lstm_bidirectional: true,
            num_classes: default_classes(),
            mixture_outputs: 0,
        }
    }

    pub fn dropout(&self) -> f64 {
        self.dropout.unwrap_or(match self.family {
            Family::Transformer | Family::Lstm => 0.1,
            Family::Cnn | Family::Mlp => 0.2,
        })
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling.unwrap_or(Pooling::Mean)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::config(format!("model.{field}"), msg));
        if self.input_dim == 0 {
            return err("input_dim", "must be positive".into());
        }
        if self.num_classes == 0 {
            return err("num_classes", "must be positive".into());
        }
        let p = self.dropout();
        if !(0.0..1.0).contains(&p) {
            return err("dropout", format!("{p} is outside [0, 1)"));
        }
        let pooling = self.pooling();
        let allowed: &[Pooling] = match self.family {
            Family::Transformer => &[Pooling::Mean, Pooling::Cls],
            Family::Lstm => &[Pooling::Mean, Pooling::Last, Pooling::Max],
            Family::Cnn | Family::Mlp => &[Pooling::Mean, Pooling::Max],
        };
        if !allowed.contains(&pooling) {
            return err(
                "pooling",
                format!("{pooling:?} is not available for {:?}", self.family),
            );
        }
        match self.family {
            Family::Transformer => {
                if self.latent_dim == 0 || self.heads == 0 || !self.latent_dim.is_multiple_of(self.heads) {
                    return err(
                        "heads",
                        format!("latent_dim {} must be a positive multiple of heads {}", self.latent_dim, self.heads),
                    );
                }
                if !self.latent_dim.is_multiple_of(2) {
                    return err("latent_dim", "must be even".into());
                }
                if pooling == Pooling::Cls && !self.use_cls {
                    return err("pooling", "cls pooling requires use_cls = true".into());
                }
            }
            Family::Cnn => {
                if self.cnn_channels.is_empty() || self.cnn_channels.contains(&0) {
                    return err("cnn_channels", "need at least one positive width".into());
                }
                if self.cnn_kernel.is_multiple_of(2) {
                    return err("cnn_kernel", "same padding k/2 needs an odd kernel".into());
                }
            }
            Family::Mlp => {
                if self.mlp_hidden.is_empty() || self.mlp_hidden.contains(&0) {
                    return err("mlp_hidden", "need at least one positive width".into());
                }
            }
            Family::Lstm => {
                if self.lstm_hidden == 0 || self.lstm_layers == 0 || self.latent_dim == 0 {
                    return err("lstm_hidden", "sizes must be positive".into());
                }
            }
        }
        Ok(())
    }
}

/// Valid lengths per example; step `t` of example `b` is padding iff `t >= lengths[b]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchMask {
    lengths: Vec<usize>,
    steps: usize,
}

impl BatchMask {
    pub fn new(lengths: Vec<usize>, steps: usize) -> Result<Self> {
        if let Some(b) = lengths.iter().position(|&l| l == 0) {
            return Err(Error::InvalidArgument(format!(
                "example {b} is entirely padding; pooling is undefined"
            )));
        }
        if let Some(&l) = lengths.iter().find(|&&l| l > steps) {
            return Err(Error::Shape(format!("length {l} exceeds {steps} steps")));
        }
        Ok(BatchMask { lengths, steps })
    }

    /// Every example uses all `steps` positions.
    pub fn full(batch: usize, steps: usize) -> Self {
        BatchMask {
            lengths: vec![steps; batch],
            steps,
        }
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn is_padding(&self, b: usize, t: usize) -> bool {
        t >= self.lengths[b]
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Backbone {
    Transformer {
        stem: Linear,
        stem_norm: LayerNorm,
        cls: Option<ParamId>,
        layers: Vec<EncoderLayer>,
    },
    Lstm {
        layers: Vec<(LstmCell, Option<LstmCell>)>,
        proj: Linear,
    },
    Cnn {
        blocks: Vec<(Conv1d, BatchNorm)>,
    },
    Mlp {
        blocks: Vec<(Linear, BatchNorm)>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum ClassHead {
    TwoLayer { fc1: Linear, fc2: Linear },
    Single(Linear),
}

fn default_gcms_hidden() -> Vec<usize> {
    vec![512, 256]
}

fn default_gcms_dropout() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcmsEncoderConfig {
    #[serde(default = "default_gcms_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_gcms_dropout")]
    pub dropout: f64,
    #[serde(default = "default_true")]
    pub layer_norm: bool,
    #[serde(default)]
    pub l2_normalize: bool,
}

impl Default for GcmsEncoderConfig {
    fn default() -> Self {
        GcmsEncoderConfig {
            hidden: default_gcms_hidden(),
            dropout: default_gcms_dropout(),
            layer_norm: true,
            l2_normalize: false,
        }
    }
}

/// MLP that maps a fixed GC-MS descriptor into the sensor embedding space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GcmsEncoder {
    config: GcmsEncoderConfig,
    norm: Option<LayerNorm>,
    layers: Vec<Linear>,
}

impl GcmsEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        input_dim: usize,
        output_dim: usize,
        config: &GcmsEncoderConfig,
    ) -> Self {
        let norm = config
            .layer_norm
            .then(|| LayerNorm::new(store, "gcms.norm", input_dim));
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for (i, &h) in config.hidden.iter().chain([output_dim].iter()).enumerate() {
            layers.push(Linear::new(store, rng, &format!("gcms.fc{i}"), prev, h));
            prev = h;
        }
        GcmsEncoder {
            config: config.clone(),
            norm,
            layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    /// `[N, G] -> [N, D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = match &self.norm {
            Some(n) => n.forward(g, store, x),
            None => x,
        };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i < last {
                h = g.relu(h);
                h = g.dropout(h, self.config.dropout);
            }
        }
        if self.config.l2_normalize {
            h = g.l2_normalize_rows(h)?;
        }
        Ok(h)
    }
}

/// A sensor encoder with its classification, mixture and optional GC-MS heads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
    class_head: ClassHead,
    presence_head: Option<Linear>,
    proportion_head: Option<Linear>,
    gcms: Option<GcmsEncoder>,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d_in = config.input_dim;
        let p = config.dropout();
        let (backbone, embed) = match config.family {
            Family::Transformer => {
                let d = config.latent_dim;
                let stem = Linear::new(&mut store, &mut rng, "stem", d_in, d);
                let stem_norm = LayerNorm::new(&mut store, "stem_norm", d);
                let cls = config
                    .use_cls
                    .then(|| store.add("cls", normal_init(&mut rng, &[d], 0.02)));
                let layers = (0..config.layers)
                    .map(|i| {
                        EncoderLayer::new(&mut store, &mut rng, &format!("enc{i}"), d, config.heads, p)
                    })
                    .collect();
                (
                    Backbone::Transformer {
                        stem,
                        stem_norm,
                        cls,
                        layers,
                    },
                    d,
                )
            }
            Family::Lstm => {
                let hs = config.lstm_hidden;
                let dirs = if config.lstm_bidirectional { 2 } else { 1 };
                let mut prev = d_in;
                let mut layers = Vec::new();
                for i in 0..config.lstm_layers {
                    let fwd = LstmCell::new(&mut store, &mut rng, &format!("lstm{i}.fwd"), prev, hs);
                    let bwd = config
                        .lstm_bidirectional
                        .then(|| LstmCell::new(&mut store, &mut rng, &format!("lstm{i}.bwd"), prev, hs));
                    layers.push((fwd, bwd));
                    prev = dirs * hs;
                }
                let proj = Linear::new(&mut store, &mut rng, "lstm.proj", prev, config.latent_dim);
                (Backbone::Lstm { layers, proj }, config.latent_dim)
            }
            Family::Cnn => {
                let mut prev = d_in;
                let mut blocks = Vec::new();
                for (i, &c) in config.cnn_channels.iter().enumerate() {
                    let conv = Conv1d::new(&mut store, &mut rng, &format!("conv{i}"), prev, c, config.cnn_kernel);
                    let bn = BatchNorm::new(&mut store, &format!("conv{i}.bn"), c);
                    blocks.push((conv, bn));
                    prev = c;
                }
                (Backbone::Cnn { blocks }, prev)
            }
            Family::Mlp => {
                let mut prev = d_in;
                let mut blocks = Vec::new();
                for (i, &h) in config.mlp_hidden.iter().enumerate() {
                    let fc = Linear::new(&mut store, &mut rng, &format!("mlp{i}"), prev, h);
                    let bn = BatchNorm::new(&mut store, &format!("mlp{i}.bn"), h);
                    blocks.push((fc, bn));
                    prev = h;
                }
                (Backbone::Mlp { blocks }, prev)
            }
        };
        let class_head = if config.family == Family::Transformer {
            ClassHead::TwoLayer {
                fc1: Linear::new(&mut store, &mut rng, "head.fc1", embed, embed / 2),
                fc2: Linear::new(&mut store, &mut rng, "head.fc2", embed / 2, config.num_classes),
            }
        } else {
            ClassHead::Single(Linear::new(&mut store, &mut rng, "head", embed, config.num_classes))
        };
        let (presence_head, proportion_head) = if config.mixture_outputs > 0 {
            let k = config.mixture_outputs;
            (
                Some(Linear::new(&mut store, &mut rng, "presence", embed, k)),
                Some(Linear::new(&mut store, &mut rng, "proportion", embed, k)),
            )
        } else {
            (None, None)
        };
        Ok(Model {
            config: config.clone(),
            store,
            backbone,
            class_head,
            presence_head,
            proportion_head,
            gcms: None,
        })
    }

    /// Adds a GC-MS encoder whose output width matches the sensor embedding.
    pub fn attach_gcms_encoder(&mut self, input_dim: usize, config: &GcmsEncoderConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c35_e1b7);
        let out = self.embed_dim();
        self.gcms = Some(GcmsEncoder::new(&mut self.store, &mut rng, input_dim, out, config));
    }

    pub fn gcms_encoder(&self) -> Option<&GcmsEncoder> {
        self.gcms.as_ref()
    }

    pub fn embed_dim(&self) -> usize {
        match &self.backbone {
            Backbone::Transformer { .. } | Backbone::Lstm { .. } => self.config.latent_dim,
            Backbone::Cnn { .. } => *self.config.cnn_channels.last().unwrap(),
            Backbone::Mlp { .. } => *self.config.mlp_hidden.last().unwrap(),
        }
    }

    fn check_input(&self, x: &Tensor, mask: &BatchMask) -> Result<()> {
        if x.ndim() != 3 {
            return Err(Error::Shape(format!("expected [B, T, d], got {:?}", x.shape())));
        }
        let (b, t, d) = (x.dim(0), x.dim(1), x.dim(2));
        if t == 0 {
            return Err(Error::Shape("sequence length T = 0".into()));
        }
        if d != self.config.input_dim {
            return Err(Error::Shape(format!(
                "model expects {} channels, got {d}",
                self.config.input_dim
            )));
        }
        if mask.batch() != b || mask.steps != t {
            return Err(Error::Shape(format!(
                "mask covers {}x{}, batch is {b}x{t}",
                mask.batch(),
                mask.steps
            )));
        }
        if !x.all_finite() {
            return Err(Error::InvalidArgument("non-finite input".into()));
        }
        Ok(())
    }

    /// Pooled sensor embedding `h: [B, D]`.
    pub fn forward_embed(&self, g: &mut Graph, x: &Tensor, mask: &BatchMask) -> Result<Var> {
        self.check_input(x, mask)?;
        let (b, t, d) = (x.dim(0), x.dim(1), x.dim(2));
        // Padded steps never reach the computation, whatever they contain.
        let mut clean = x.clone();
        for bi in 0..b {
            let start = (bi * t + mask.lengths[bi]) * d;
            clean.data_mut()[start..(bi + 1) * t * d].fill(0.0);
        }
        let lengths = mask.lengths();
        let store = &self.store;
        let pooling = self.config.pooling();
        let input = g.input(clean);
        let h = match &self.backbone {
            Backbone::Transformer {
                stem,
                stem_norm,
                cls,
                layers,
            } => {
                let dm = self.config.latent_dim;
                let mut h = stem.forward(g, store, input);
                h = stem_norm.forward(g, store, h);
                if self.config.use_positional {
                    let pe = sinusoidal_encoding(t, dm);
                    let tiled: Vec<f64> = (0..b).flat_map(|_| pe.iter().copied()).collect();
                    let pe = g.input(Tensor::from_parts(vec![b, t, dm], tiled));
                    h = g.add(h, pe);
                }
                let mut lens: Vec<usize> = lengths.to_vec();
                if let Some(cls) = cls {
                    let c = g.param(store, *cls);
                    let c = g.reshape(c, &[1, 1, dm]);
                    let tok = g.concat(&vec![c; b], 0);
                    h = g.concat(&[tok, h], 1);
                    lens.iter_mut().for_each(|l| *l += 1);
                }
                for layer in layers {
                    h = layer.forward(g, store, h, &lens);
                }
                match (pooling, cls.is_some()) {
                    (Pooling::Cls, _) => {
                        let first = g.narrow(h, 1, 0, 1);
                        g.reshape(first, &[b, dm])
                    }
                    (_, true) => {
                        let body = g.narrow(h, 1, 1, t);
                        g.masked_mean_time(body, lengths)
                    }
                    (_, false) => g.masked_mean_time(h, lengths),
                }
            }
            Backbone::Lstm { layers, proj } => {
                let mut seq = input;
                let mut last = input;
                let n = layers.len();
                for (i, (fwd, bwd)) in layers.iter().enumerate() {
                    let (fs, fh) = fwd.run(g, store, seq, lengths, false);
                    (seq, last) = match bwd {
                        Some(bwd) => {
                            let (bs, bh) = bwd.run(g, store, seq, lengths, true);
                            (g.concat(&[fs, bs], 2), g.concat(&[fh, bh], 1))
                        }
                        None => (fs, fh),
                    };
                    if i + 1 < n {
                        seq = g.dropout(seq, self.config.dropout());
                    }
                }
                let pooled = match pooling {
                    Pooling::Last => last,
                    other => pool_time(g, seq, lengths, other),
                };
                let pooled = g.dropout(pooled, self.config.dropout());
                proj.forward(g, store, pooled)
            }
            Backbone::Cnn { blocks } => {
                let mut h = g.permute(input, &[0, 2, 1]);
                let valid = time_mask(lengths, t);
                for (conv, bn) in blocks {
                    h = conv.forward(g, store, h);
                    let c = g.shape(h)[1];
                    let flat = g.permute(h, &[0, 2, 1]);
                    let flat = g.reshape(flat, &[b * t, c]);
                    let flat = bn.forward(g, store, flat);
                    let flat = g.relu(flat);
                    let flat = g.dropout(flat, self.config.dropout());
                    let seq = g.reshape(flat, &[b, t, c]);
                    let m = g.input(expand_mask(&valid, b, t, c));
                    let seq = g.mul(seq, m);
                    h = g.permute(seq, &[0, 2, 1]);
                }
                let seq = g.permute(h, &[0, 2, 1]);
                pool_time(g, seq, lengths, pooling)
            }
            Backbone::Mlp { blocks } => {
                let mut h = pool_time(g, input, lengths, pooling);
                for (fc, bn) in blocks {
                    h = fc.forward(g, store, h);
                    h = bn.forward(g, store, h);
                    h = g.relu(h);
                    h = g.dropout(h, self.config.dropout());
                }
                h
            }
        };
        Ok(h)
    }

    /// Class logits from a pooled embedding.
    pub fn class_logits(&self, g: &mut Graph, h: Var) -> Var {
        match &self.class_head {
            ClassHead::TwoLayer { fc1, fc2 } => {
                let z = fc1.forward(g, &self.store, h);
                let z = g.gelu(z);
                let z = g.dropout(z, self.config.dropout());
                fc2.forward(g, &self.store, z)
            }
            ClassHead::Single(fc) => fc.forward(g, &self.store, h),
        }
    }

    /// Logits `[B, num_classes]`.
    pub fn classify(&self, g: &mut Graph, x: &Tensor, mask: &BatchMask) -> Result<Var> {
        let h = self.forward_embed(g, x, mask)?;
        Ok(self.class_logits(g, h))
    }

    /// Presence logits and proportion logits from a pooled embedding (shared trunk).
    pub fn mixture_logits(&self, g: &mut Graph, h: Var) -> Result<(Var, Var)> {
        let (Some(pres), Some(prop)) = (&self.presence_head, &self.proportion_head) else {
            return Err(Error::config(
                "model.mixture_outputs",
                "model was built without mixture heads",
            ));
        };
        Ok((pres.forward(g, &self.store, h), prop.forward(g, &self.store, h)))
    }

    /// Presence logits `û` and simplex proportions `ẑ = softmax(W h + b)`.
    pub fn mixture_heads(&self, g: &mut Graph, x: &Tensor, mask: &BatchMask) -> Result<(Var, Var)> {
        let h = self.forward_embed(g, x, mask)?;
        let (u, z) = self.mixture_logits(g, h)?;
        let z = g.softmax(z, None);
        Ok((u, z))
    }

    pub fn encode_gcms(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let enc = self
            .gcms
            .as_ref()
            .ok_or_else(|| Error::config("objective", "model has no GC-MS encoder"))?;
        enc.forward(g, &self.store, x)
    }
}

fn time_mask(lengths: &[usize], t: usize) -> Vec<bool> {
    lengths
        .iter()
        .flat_map(|&l| (0..t).map(move |ti| ti < l))
        .collect()
}

fn expand_mask(valid: &[bool], b: usize, t: usize, c: usize) -> Tensor {
    let mut data = Vec::with_capacity(b * t * c);
    for &ok in valid {
        data.extend(std::iter::repeat_n(if ok { 1.0 } else { 0.0 }, c));
    }
    Tensor::from_parts(vec![b, t, c], data)
}

fn pool_time(g: &mut Graph, seq: Var, lengths: &[usize], pooling: Pooling) -> Var {
    match pooling {
        Pooling::Max => g.masked_max_time(seq, lengths),
        _ => g.masked_mean_time(seq, lengths),
    }
}
