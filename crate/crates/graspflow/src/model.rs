//! Grasp-quality classifier: an image tower over the depth crop, the grasp
//! depth tiled into extra channels and merged by convolution, two more conv
//! blocks, and a dense head producing two logits.
//!
//! Every conv is followed by batch norm then ReLU; the tower ends with a
//! max-pool. All counts live in `ModelConfig`, so architecture variants are
//! data, not code. Building is deterministic from `init_seed`: two builds
//! from the same config are bit-identical, which is what makes end-to-end
//! training runs reproducible.

use std::io::{ErrorKind, Read};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::ops::{
    add_channel_bias, batchnorm, concat_channels, conv2d, dense, flatten, maxpool2d, relu,
    softmax, tile_scalar,
};
use crate::tensor::{read_tensor, write_tensor, BatchNormState, Mode, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GFM1";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Batch norm running-average retention and variance floor, fixed for every
/// layer.
const BN_MOMENTUM: f64 = 0.9;
const BN_EPSILON: f64 = 1e-5;

/// Init stream tag ("INI").
const TAG_INIT: u64 = 0x494e49;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn new(filters: usize, kernel: usize) -> ConvSpec {
        ConvSpec { filters, kernel, stride: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    MaxPool { window: usize, stride: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_tower: Vec<LayerSpec>,
    /// Channel count the tiled grasp depth occupies at the merge point.
    pub merge_channels: usize,
    pub merge_conv: ConvSpec,
    /// Exactly two conv blocks after the merge.
    pub post_merge: Vec<ConvSpec>,
    /// Dense widths; the last entry is the two logits.
    pub head: Vec<usize>,
    /// Input images are `input_size`×`input_size`, one channel.
    pub input_size: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    /// The full-size architecture: 64/64-pool-128/128 tower, 16 depth
    /// channels, 128-filter merge and post-merge convs, 1024-wide head.
    fn default() -> ModelConfig {
        ModelConfig {
            image_tower: vec![
                LayerSpec::Conv(ConvSpec::new(64, 7)),
                LayerSpec::Conv(ConvSpec::new(64, 5)),
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::Conv(ConvSpec::new(128, 3)),
                LayerSpec::Conv(ConvSpec::new(128, 3)),
                LayerSpec::MaxPool { window: 2, stride: 2 },
            ],
            merge_channels: 16,
            merge_conv: ConvSpec::new(128, 3),
            post_merge: vec![ConvSpec::new(128, 3), ConvSpec::new(128, 3)],
            head: vec![1024, 2],
            input_size: 32,
            init_seed: 0,
        }
    }
}

/// How a parameter tensor is initialized at build time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// Zero-mean normal with std sqrt(2 / fan_in).
    FanIn(usize),
    Zero,
    One,
}

impl ModelConfig {
    /// Scaled-down analog of the default (2-filter convs on a 4×4 input)
    /// used for full-model gradient checks and fast tests.
    pub fn tiny(init_seed: u64) -> ModelConfig {
        ModelConfig {
            image_tower: vec![
                LayerSpec::Conv(ConvSpec::new(2, 3)),
                LayerSpec::MaxPool { window: 2, stride: 2 },
            ],
            merge_channels: 2,
            merge_conv: ConvSpec::new(2, 3),
            post_merge: vec![ConvSpec::new(2, 3), ConvSpec::new(2, 3)],
            head: vec![4, 2],
            input_size: 4,
            init_seed,
        }
    }

    fn check_conv(spec: &ConvSpec, at: &str) -> Result<()> {
        if spec.filters == 0 {
            return Err(Error::Config(format!("{at}: conv needs at least one filter")));
        }
        if spec.kernel == 0 || spec.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "{at}: conv kernel must be odd for same padding, got {}",
                spec.kernel
            )));
        }
        if spec.stride != 1 {
            return Err(Error::Config(format!(
                "{at}: conv stride must be 1, got {}",
                spec.stride
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        if self.image_tower.is_empty() {
            return Err(Error::Config("image tower must not be empty".into()));
        }
        if !matches!(self.image_tower.last(), Some(LayerSpec::MaxPool { .. })) {
            return Err(Error::Config(
                "image tower must end with a max-pool after its last conv".into(),
            ));
        }
        if !self.image_tower.iter().any(|l| matches!(l, LayerSpec::Conv(_))) {
            return Err(Error::Config("image tower needs at least one conv".into()));
        }
        let mut spatial = self.input_size;
        for (i, layer) in self.image_tower.iter().enumerate() {
            match layer {
                LayerSpec::Conv(c) => Self::check_conv(c, &format!("tower layer {i}"))?,
                LayerSpec::MaxPool { window, stride } => {
                    if *window == 0 || stride != window {
                        return Err(Error::Config(format!(
                            "tower layer {i}: max-pool stride must equal its window, got {window}/{stride}"
                        )));
                    }
                    if spatial % window != 0 {
                        return Err(Error::Config(format!(
                            "tower layer {i}: pool window {window} does not divide spatial size {spatial}"
                        )));
                    }
                    spatial /= window;
                }
            }
        }
        if self.merge_channels == 0 {
            return Err(Error::Config("merge needs at least one depth channel".into()));
        }
        Self::check_conv(&self.merge_conv, "merge conv")?;
        if self.post_merge.len() != 2 {
            return Err(Error::Config(format!(
                "exactly two post-merge convs required, got {}",
                self.post_merge.len()
            )));
        }
        for (i, c) in self.post_merge.iter().enumerate() {
            Self::check_conv(c, &format!("post-merge conv {i}"))?;
        }
        if self.head.is_empty() || *self.head.last().unwrap() != 2 {
            return Err(Error::Config("head must end in exactly 2 logits".into()));
        }
        if self.head.iter().any(|&w| w == 0) {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }

    /// Spatial side length at the image tower's output.
    fn tower_spatial(&self) -> usize {
        let mut s = self.input_size;
        for layer in &self.image_tower {
            if let LayerSpec::MaxPool { window, .. } = layer {
                s /= window;
            }
        }
        s
    }

    /// Conv block prefixes with their output channel counts, in forward
    /// order; one batch norm state per entry.
    fn conv_prefixes(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (i, layer) in self.image_tower.iter().enumerate() {
            if let LayerSpec::Conv(c) = layer {
                out.push((format!("tower.{i}"), c.filters));
            }
        }
        out.push(("merge".into(), self.merge_conv.filters));
        for (i, c) in self.post_merge.iter().enumerate() {
            out.push((format!("post.{i}"), c.filters));
        }
        out
    }

    /// Every trainable tensor: name, shape, and init rule, in the fixed
    /// forward-walk order that all serialization and optimization follows.
    fn trainable_manifest(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let push_conv = |name: &str, c: &ConvSpec, in_ch: usize, out: &mut Vec<_>| {
            let fan_in = in_ch * c.kernel * c.kernel;
            out.push((format!("{name}.weight"), vec![c.filters, in_ch, c.kernel, c.kernel], Init::FanIn(fan_in)));
            out.push((format!("{name}.bias"), vec![c.filters], Init::Zero));
            out.push((format!("{name}.bn.scale"), vec![c.filters], Init::One));
            out.push((format!("{name}.bn.shift"), vec![c.filters], Init::Zero));
        };
        let mut channels = 1;
        for (i, layer) in self.image_tower.iter().enumerate() {
            if let LayerSpec::Conv(c) = layer {
                push_conv(&format!("tower.{i}"), c, channels, &mut out);
                channels = c.filters;
            }
        }
        push_conv("merge", &self.merge_conv, channels + self.merge_channels, &mut out);
        channels = self.merge_conv.filters;
        for (i, c) in self.post_merge.iter().enumerate() {
            push_conv(&format!("post.{i}"), c, channels, &mut out);
            channels = c.filters;
        }
        let s = self.tower_spatial();
        let mut width = channels * s * s;
        for (i, &w) in self.head.iter().enumerate() {
            out.push((format!("head.{i}.weight"), vec![w, width], Init::FanIn(width)));
            out.push((format!("head.{i}.bias"), vec![w], Init::Zero));
            width = w;
        }
        out
    }

    /// Total trainable parameter count; a pure function of the config.
    pub fn param_count(&self) -> usize {
        self.trainable_manifest().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }

    pub fn to_text(&self) -> String {
        let layer = |l: &LayerSpec| match l {
            LayerSpec::Conv(c) => format!("conv:{}:{}:{}", c.filters, c.kernel, c.stride),
            LayerSpec::MaxPool { window, stride } => format!("pool:{window}:{stride}"),
        };
        let convs = |cs: &[ConvSpec]| {
            cs.iter().map(|c| layer(&LayerSpec::Conv(*c))).collect::<Vec<_>>().join(",")
        };
        let tower = self.image_tower.iter().map(layer).collect::<Vec<_>>().join(",");
        let head = self.head.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "input_size={}\ninit_seed={}\nmerge_channels={}\ntower={}\nmerge={}\npost={}\nhead={}\n",
            self.input_size, self.init_seed, self.merge_channels, tower,
            layer(&LayerSpec::Conv(self.merge_conv)), convs(&self.post_merge), head
        )
    }

    pub fn from_text(text: &str) -> Result<ModelConfig> {
        fn bad(detail: String) -> Error {
            Error::Config(detail)
        }
        fn parse_layer(tok: &str) -> Result<LayerSpec> {
            let parts: Vec<&str> = tok.split(':').collect();
            let num = |s: &str| {
                s.parse::<usize>().map_err(|_| bad(format!("bad layer field {s:?} in {tok:?}")))
            };
            match parts.as_slice() {
                ["conv", f, k, s] => Ok(LayerSpec::Conv(ConvSpec {
                    filters: num(f)?,
                    kernel: num(k)?,
                    stride: num(s)?,
                })),
                ["pool", w, s] => Ok(LayerSpec::MaxPool { window: num(w)?, stride: num(s)? }),
                _ => Err(bad(format!("unrecognized layer spec {tok:?}"))),
            }
        }
        fn parse_convs(v: &str) -> Result<Vec<ConvSpec>> {
            v.split(',')
                .map(|tok| match parse_layer(tok)? {
                    LayerSpec::Conv(c) => Ok(c),
                    _ => Err(bad(format!("expected a conv spec, got {tok:?}"))),
                })
                .collect()
        }
        let mut kv = IndexMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |k: &str| {
            kv.shift_remove(k).ok_or_else(|| bad(format!("missing config key {k:?}")))
        };
        let input_size = take("input_size")?
            .parse::<usize>()
            .map_err(|_| bad("input_size must be an integer".into()))?;
        let init_seed = take("init_seed")?
            .parse::<u64>()
            .map_err(|_| bad("init_seed must be an integer".into()))?;
        let merge_channels = take("merge_channels")?
            .parse::<usize>()
            .map_err(|_| bad("merge_channels must be an integer".into()))?;
        let image_tower =
            take("tower")?.split(',').map(parse_layer).collect::<Result<Vec<_>>>()?;
        let merge_conv = match parse_layer(&take("merge")?)? {
            LayerSpec::Conv(c) => c,
            _ => return Err(bad("merge must be a conv spec".into())),
        };
        let post_merge = parse_convs(&take("post")?)?;
        let head = take("head")?
            .split(',')
            .map(|w| w.parse::<usize>().map_err(|_| bad(format!("bad head width {w:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(k) = kv.keys().next() {
            return Err(bad(format!("unknown config key {k:?}")));
        }
        let cfg = ModelConfig {
            image_tower,
            merge_channels,
            merge_conv,
            post_merge,
            head,
            input_size,
            init_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub struct Model<T: Scalar> {
    config: ModelConfig,
    /// Conv/dense weights and biases; batch norm scale/shift live in `bn`.
    params: IndexMap<String, Tensor<T>>,
    bn: IndexMap<String, BatchNormState<T>>,
}

fn init_tensor<T: Scalar>(seed: u64, index: u64, shape: &[usize], init: Init) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data = match init {
        Init::Zero => vec![T::zero(); numel],
        Init::One => vec![T::one(); numel],
        Init::FanIn(fan_in) => {
            // Draws happen in f64 so f32 and f64 builds share the same
            // underlying values.
            let std = (2.0 / fan_in as f64).sqrt();
            let mut rng = stream(seed, index, 0, TAG_INIT);
            (0..numel)
                .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
                .collect()
        }
    };
    Tensor::param(shape, data)
}

impl<T: Scalar> Model<T> {
    pub fn build(config: &ModelConfig) -> Result<Model<T>> {
        config.validate()?;
        let mut params = IndexMap::new();
        let mut bn = IndexMap::new();
        for (prefix, channels) in config.conv_prefixes() {
            bn.insert(prefix, BatchNormState::new(channels, BN_MOMENTUM, BN_EPSILON)?);
        }
        for (index, (name, shape, init)) in config.trainable_manifest().into_iter().enumerate() {
            let t = init_tensor::<T>(config.init_seed, index as u64, &shape, init);
            match split_bn_name(&name) {
                Some((prefix, which)) => {
                    let state = bn.get_mut(prefix).expect("manifest and prefixes agree");
                    match which {
                        BnPart::Scale => state.scale = t,
                        BnPart::Shift => state.shift = t,
                    }
                }
                None => {
                    params.insert(name, t);
                }
            }
        }
        Ok(Model { config: config.clone(), params, bn })
    }

    /// Same structure but every trainable tensor taken from `point`, in
    /// manifest order; running stats start fresh. Backbone of the
    /// full-model gradient check.
    pub fn from_flat(config: &ModelConfig, point: &[f64]) -> Result<Model<T>> {
        let mut model = Model::build(config)?;
        let manifest = config.trainable_manifest();
        let total: usize = manifest.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
        if point.len() != total {
            return Err(Error::dimension(
                "from_flat",
                format!("{} values for {} parameters", point.len(), total),
            ));
        }
        let mut at = 0;
        for (name, shape, _) in &manifest {
            let numel: usize = shape.iter().product();
            let data: Vec<T> = point[at..at + numel].iter().map(|&v| T::from_f64(v)).collect();
            model.replace_trainable(name, Tensor::param(shape, data))?;
            at += numel;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    /// Trainable tensor names in the fixed manifest order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.config.trainable_manifest().into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn get_trainable(&self, name: &str) -> Option<&Tensor<T>> {
        match split_bn_name(name) {
            Some((prefix, BnPart::Scale)) => self.bn.get(prefix).map(|s| &s.scale),
            Some((prefix, BnPart::Shift)) => self.bn.get(prefix).map(|s| &s.shift),
            None => self.params.get(name),
        }
    }

    pub fn replace_trainable(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let current = self
            .get_trainable(name)
            .ok_or_else(|| Error::contract("replace_trainable", format!("no parameter {name:?}")))?;
        if current.shape() != t.shape() {
            return Err(Error::dimension(
                "replace_trainable",
                format!("{name}: shape {:?} cannot replace {:?}", t.shape(), current.shape()),
            ));
        }
        match split_bn_name(name) {
            Some((prefix, BnPart::Scale)) => self.bn.get_mut(prefix).unwrap().scale = t,
            Some((prefix, BnPart::Shift)) => self.bn.get_mut(prefix).unwrap().shift = t,
            None => {
                self.params.insert(name.to_string(), t);
            }
        }
        Ok(())
    }

    /// Trainable tensors in manifest order (graph handles, not copies).
    pub fn trainable_tensors(&self) -> Vec<Tensor<T>> {
        self.trainable_names()
            .iter()
            .map(|n| self.get_trainable(n).expect("manifest names exist").clone())
            .collect()
    }

    /// All trainable values flattened in manifest order.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.trainable_tensors() {
            out.extend(t.data().iter().map(|v| Scalar::to_f64(*v)));
        }
        out
    }

    /// Raw two-logit output; training losses consume this.
    pub fn forward_logits(
        &mut self,
        images: &Tensor<T>,
        z: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let s = self.config.input_size;
        let ishape = images.shape();
        if ishape.len() != 4 || ishape[1] != 1 || ishape[2] != s || ishape[3] != s {
            return Err(Error::dimension(
                "forward",
                format!("images shape {ishape:?}, want [N, 1, {s}, {s}]"),
            ));
        }
        let n = ishape[0];
        if z.shape() != [n] {
            return Err(Error::dimension(
                "forward",
                format!("z shape {:?} does not match batch size {n}", z.shape()),
            ));
        }
        let params = &self.params;
        let bn = &mut self.bn;
        // conv → bias → batch norm → relu, the block shape behind every conv.
        let mut conv_block = |x: &Tensor<T>, prefix: &str| -> Result<Tensor<T>> {
            let get = |suffix: &str| {
                params.get(&format!("{prefix}.{suffix}")).ok_or_else(|| {
                    Error::contract("forward", format!("missing parameter {prefix}.{suffix}"))
                })
            };
            let y = conv2d(x, get("weight")?)?;
            let y = add_channel_bias(&y, get("bias")?)?;
            let state = bn
                .get_mut(prefix)
                .ok_or_else(|| Error::contract("forward", format!("missing norm state {prefix}")))?;
            Ok(relu(&batchnorm(&y, state, mode)?))
        };
        let mut x = images.clone();
        for (i, layer) in self.config.image_tower.clone().iter().enumerate() {
            x = match layer {
                LayerSpec::Conv(_) => conv_block(&x, &format!("tower.{i}"))?,
                LayerSpec::MaxPool { window, .. } => maxpool2d(&x, *window)?,
            };
        }
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let depth_block = tile_scalar(z, self.config.merge_channels, h, w)?;
        x = concat_channels(&x, &depth_block)?;
        x = conv_block(&x, "merge")?;
        for i in 0..self.config.post_merge.len() {
            x = conv_block(&x, &format!("post.{i}"))?;
        }
        let mut x = flatten(&x)?;
        let n_dense = self.config.head.len();
        for i in 0..n_dense {
            let get = |suffix: &str| {
                self.params.get(&format!("head.{i}.{suffix}")).ok_or_else(|| {
                    Error::contract("forward", format!("missing parameter head.{i}.{suffix}"))
                })
            };
            x = dense(&x, get("weight")?, get("bias")?)?;
            if i + 1 < n_dense {
                x = relu(&x);
            }
        }
        Ok(x)
    }

    /// Success probability per example (softmax positive class). Detached
    /// from the graph; training goes through `forward_logits`.
    pub fn forward(&mut self, images: &Tensor<T>, z: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let logits = self.forward_logits(images, z, mode)?;
        let probs = softmax(&logits)?;
        let n = probs.shape()[0];
        let data = probs.data();
        Ok(Tensor::from_vec(&[n], (0..n).map(|i| data[2 * i + 1]).collect()))
    }

    /// Hard labels; probability one-half rounds up to success.
    pub fn predict(&mut self, images: &Tensor<T>, z: &Tensor<T>) -> Result<Vec<u8>> {
        let half = T::from_f64(0.5);
        let probs = self.forward(images, z, Mode::Eval)?;
        Ok(probs.data().iter().map(|&p| u8::from(p >= half)).collect())
    }

    /// Tensors in the checkpoint, in order: trainables, then per-conv
    /// running statistics.
    fn checkpoint_manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = self
            .config
            .trainable_manifest()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        for (prefix, channels) in self.config.conv_prefixes() {
            out.push((format!("{prefix}.bn.running_mean"), vec![channels]));
            out.push((format!("{prefix}.bn.running_var"), vec![channels]));
        }
        out
    }

    fn checkpoint_tensor(&self, name: &str) -> Tensor<T> {
        if let Some(t) = self.get_trainable(name) {
            return t.clone();
        }
        let (prefix, which) = name
            .rsplit_once(".bn.")
            .expect("checkpoint manifest names are trainables or running stats");
        let state = &self.bn[prefix];
        let data = match which {
            "running_mean" => state.running_mean.clone(),
            _ => state.running_var.clone(),
        };
        Tensor::from_vec(&[data.len()], data)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let manifest = self.checkpoint_manifest();
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        for (name, _) in &manifest {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor(&mut out, &self.checkpoint_tensor(name))?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Model<T>> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        // A file too short to hold the magic is not a checkpoint at all.
        file.read_exact(&mut magic).map_err(|e| {
            if e.kind() == ErrorKind::UnexpectedEof {
                Error::format(0, "file too short to hold a checkpoint magic")
            } else {
                Error::Io(e)
            }
        })?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, format!("bad checkpoint magic {magic:02x?}")));
        }
        let mut buf2 = [0u8; 2];
        file.read_exact(&mut buf2)?;
        let version = u16::from_le_bytes(buf2);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                4,
                format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"),
            ));
        }
        let mut buf4 = [0u8; 4];
        file.read_exact(&mut buf4)?;
        let text_len = u32::from_le_bytes(buf4) as usize;
        let mut text = vec![0u8; text_len];
        file.read_exact(&mut text)?;
        let text = String::from_utf8(text)
            .map_err(|_| Error::format(10, "config block is not UTF-8"))?;
        let config = match ModelConfig::from_text(&text) {
            Ok(c) => c,
            Err(Error::Config(detail)) => return Err(Error::format(10, detail)),
            Err(e) => return Err(e),
        };
        let mut model = Model::build(&config)?;
        let manifest = model.checkpoint_manifest();
        file.read_exact(&mut buf4)?;
        let count = u32::from_le_bytes(buf4) as usize;
        if count != manifest.len() {
            return Err(Error::format(
                0,
                format!("checkpoint holds {count} tensors, config implies {}", manifest.len()),
            ));
        }
        for (name, shape) in &manifest {
            file.read_exact(&mut buf4)?;
            let name_len = u32::from_le_bytes(buf4) as usize;
            let mut name_bytes = vec![0u8; name_len];
            file.read_exact(&mut name_bytes)?;
            if name_bytes != name.as_bytes() {
                return Err(Error::format(
                    0,
                    format!("tensor name {:?} where {name:?} expected", String::from_utf8_lossy(&name_bytes)),
                ));
            }
            // Tensor-level truncation is an I/O failure of the container,
            // not a format defect of the embedded tensor.
            let t: Tensor<T> = match read_tensor(&mut file) {
                Ok(t) => t,
                Err(Error::Format { detail, .. }) if detail.contains("unexpected end") => {
                    return Err(std::io::Error::new(
                        ErrorKind::UnexpectedEof,
                        format!("checkpoint truncated inside tensor {name:?}"),
                    )
                    .into());
                }
                Err(e) => return Err(e),
            };
            if t.shape() != shape.as_slice() {
                return Err(Error::dimension(
                    "load",
                    format!("tensor {name:?} has shape {:?}, config implies {shape:?}", t.shape()),
                ));
            }
            match name.rsplit_once(".bn.") {
                Some((prefix, "running_mean")) => {
                    model.bn.get_mut(prefix).unwrap().running_mean = t.data().to_vec();
                }
                Some((prefix, "running_var")) => {
                    model.bn.get_mut(prefix).unwrap().running_var = t.data().to_vec();
                }
                _ => model.replace_trainable(name, t.to_param())?,
            }
        }
        let mut trailing = [0u8; 1];
        if file.read(&mut trailing)? != 0 {
            return Err(Error::format(0, "trailing bytes after last tensor"));
        }
        for state in model.bn.values() {
            state.check()?;
        }
        Ok(model)
    }
}

enum BnPart {
    Scale,
    Shift,
}

fn split_bn_name(name: &str) -> Option<(&str, BnPart)> {
    if let Some(prefix) = name.strip_suffix(".bn.scale") {
        Some((prefix, BnPart::Scale))
    } else {
        name.strip_suffix(".bn.shift").map(|prefix| (prefix, BnPart::Shift))
    }
}
