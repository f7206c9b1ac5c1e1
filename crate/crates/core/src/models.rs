//! The three classifier variants: ViT (patches + class token), LVT (patches +
//! sequence pooling) and LCT (convolutional tokenizer + sequence pooling).
//!
//! All three share the same pipeline:
//!
//! ```text
//! segment [B x N x L] -> tokens [B x n x d] -> (+ class token) (+ positional table)
//!     -> encoder stack -> class-token row | SeqPool -> MLP head -> logits [B x 2]
//! ```

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{resolve_key_dim, Dense, EncoderStack, INIT_STD};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::init::truncated_normal;
use crate::tensor::{
    conv2d_output_shape, maxpool_same_output_shape, Graph, ParamId, ParamStore, Tensor, Var,
};

/// Convolution kernel of every tokenizer stage.
pub const CONV_KERNEL: usize = 3;
/// Pooling window and stride of every tokenizer stage.
pub const POOL_KERNEL: usize = 3;
pub const POOL_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vit,
    Lvt,
    Lct,
}

impl Variant {
    pub fn uses_class_token(self) -> bool {
        self == Variant::Vit
    }

    pub fn uses_patches(self) -> bool {
        self != Variant::Lct
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Vit => "vit",
            Variant::Lvt => "lvt",
            Variant::Lct => "lct",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vit" => Ok(Variant::Vit),
            "lvt" => Ok(Variant::Lvt),
            "lct" => Ok(Variant::Lct),
            other => Err(Error::config(
                "variant",
                format!("unknown variant `{other}` (expected vit, lvt or lct)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub dropout_rate: f64,
    pub patch_h: usize,
    pub patch_w: usize,
    pub conv_filters: Vec<usize>,
    pub projection_dim: usize,
    /// Per-head query/key width; `None` means `d_model / heads`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_dim: Option<usize>,
    pub use_positional_embedding: bool,
    pub num_classes: usize,
    /// EEG channels per segment (image height).
    pub input_channels: usize,
    /// Samples per segment (image width).
    pub input_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Configuration for `variant` with `layers` encoder layers and `heads`
    /// heads (the "L/h" naming), sized for `channels x len` segments.
    pub fn preset(
        variant: Variant,
        layers: usize,
        heads: usize,
        channels: usize,
        len: usize,
    ) -> Self {
        let conv_filters = vec![32, 128];
        let projection_dim = 529;
        let d_model = match variant {
            Variant::Lct => *conv_filters.last().unwrap(),
            _ => projection_dim,
        };
        Self {
            variant,
            encoder_layers: layers,
            heads,
            d_model,
            d_mlp: 2 * d_model,
            dropout_rate: 0.1,
            patch_h: 18,
            patch_w: 18,
            conv_filters,
            projection_dim,
            key_dim: (heads > 0 && d_model % heads != 0).then(|| d_model / heads),
            use_positional_embedding: true,
            num_classes: 2,
            input_channels: channels,
            input_len: len,
            seed: 0,
        }
    }

    /// Variant label in `LCT-1/2` form.
    pub fn name(&self) -> String {
        format!(
            "{}-{}/{}",
            self.variant.to_string().to_uppercase(),
            self.encoder_layers,
            self.heads
        )
    }

    /// Shrink the widths, keeping the variant's structure. Used for fast
    /// checks: `d_model` becomes `width` and every derived width follows.
    pub fn with_width(mut self, width: usize) -> Self {
        self.d_model = width;
        self.d_mlp = 2 * width;
        self.projection_dim = width;
        if let Some(last) = self.conv_filters.last_mut() {
            *last = width;
        }
        self.key_dim =
            (self.heads > 0 && !width.is_multiple_of(self.heads)).then(|| width / self.heads);
        self
    }

    /// Sequence length actually fed to the tokenizer. Patch variants drop the
    /// trailing columns that do not fill a whole patch.
    pub fn effective_len(&self) -> usize {
        if self.variant.uses_patches() && self.patch_w > 0 {
            (self.input_len / self.patch_w) * self.patch_w
        } else {
            self.input_len
        }
    }

    /// Number of tokens produced by the tokenizer (before any class token).
    pub fn token_count(&self) -> Result<usize> {
        match self.variant {
            Variant::Vit | Variant::Lvt => {
                Ok((self.input_channels / self.patch_h) * (self.input_len / self.patch_w))
            }
            Variant::Lct => {
                let stages =
                    conv_stage_shapes(self.input_channels, self.input_len, &self.conv_filters)?;
                let &(h, w, _) = stages.last().expect("at least one stage");
                Ok(h * w)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_layers == 0 {
            return Err(Error::config("encoder_layers", "must be at least 1"));
        }
        resolve_key_dim(self.d_model, self.heads, self.key_dim)?;
        if self.d_model == 0 {
            return Err(Error::config("d_model", "must be positive"));
        }
        if self.d_mlp < self.d_model {
            return Err(Error::config("d_mlp", "must be at least d_model"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        if self.num_classes != 2 {
            return Err(Error::config(
                "num_classes",
                "only binary classification is supported",
            ));
        }
        if self.input_channels == 0 || self.input_len == 0 {
            return Err(Error::config(
                "input_channels/input_len",
                "must be positive",
            ));
        }
        match self.variant {
            Variant::Vit | Variant::Lvt => {
                if self.patch_h == 0 || self.patch_w == 0 {
                    return Err(Error::config("patch_h/patch_w", "must be positive"));
                }
                if !self.input_channels.is_multiple_of(self.patch_h) {
                    return Err(Error::config(
                        "patch_h",
                        format!(
                            "{} channels are not divisible by patch height {}",
                            self.input_channels, self.patch_h
                        ),
                    ));
                }
                if self.input_len < self.patch_w {
                    return Err(Error::config("patch_w", "wider than the segment"));
                }
                if self.d_model != self.projection_dim {
                    return Err(Error::config(
                        "d_model",
                        "must equal projection_dim for patch variants",
                    ));
                }
            }
            Variant::Lct => {
                if self.conv_filters.is_empty() || self.conv_filters.contains(&0) {
                    return Err(Error::config(
                        "conv_filters",
                        "need at least one stage with positive filters",
                    ));
                }
                if self.conv_filters.last() != Some(&self.d_model) {
                    return Err(Error::config(
                        "d_model",
                        "must equal the last conv_filters entry",
                    ));
                }
                conv_stage_shapes(self.input_channels, self.input_len, &self.conv_filters)?;
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| Error::config("model config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `(H, W, C)` after each conv + pool stage.
pub fn conv_stage_shapes(
    h: usize,
    w: usize,
    filters: &[usize],
) -> Result<Vec<(usize, usize, usize)>> {
    let mut out = Vec::with_capacity(filters.len());
    let (mut h, mut w) = (h, w);
    for (i, &c) in filters.iter().enumerate() {
        let (ch, cw) = conv2d_output_shape(h, w, CONV_KERNEL, CONV_KERNEL).ok_or_else(|| {
            Error::config(
                "input_channels/input_len",
                format!("input too small for conv stage {i}: {h}x{w}"),
            )
        })?;
        (h, w) = maxpool_same_output_shape(ch, cw, POOL_STRIDE);
        out.push((h, w, c));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct ConvStage {
    pub filters: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub enum Tokenizer {
    Patches { projection: Dense },
    Conv { stages: Vec<ConvStage> },
}

/// A classifier and all of its parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub tokenizer: Tokenizer,
    pub class_token: Option<ParamId>,
    pub pos_embedding: Option<ParamId>,
    pub encoder: EncoderStack,
    /// SeqPool scoring vector `[d x 1]`.
    pub pool: Option<ParamId>,
    pub head_hidden: Dense,
    pub head_out: Dense,
}

/// Initialize a model deterministically from `seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let d = config.d_model;

    let tokenizer = match config.variant {
        Variant::Vit | Variant::Lvt => Tokenizer::Patches {
            projection: Dense::new(
                &mut store,
                "patch_projection",
                config.patch_h * config.patch_w,
                config.projection_dim,
                &mut rng,
            ),
        },
        Variant::Lct => {
            let mut c_in = 1;
            let stages = config
                .conv_filters
                .iter()
                .enumerate()
                .map(|(i, &c_out)| {
                    let stage = ConvStage {
                        filters: store.add(
                            format!("tokenizer.conv{i}.filters"),
                            truncated_normal(
                                &[CONV_KERNEL, CONV_KERNEL, c_in, c_out],
                                INIT_STD,
                                &mut rng,
                            ),
                        ),
                        bias: store.add(format!("tokenizer.conv{i}.bias"), Tensor::zeros(&[c_out])),
                    };
                    c_in = c_out;
                    stage
                })
                .collect();
            Tokenizer::Conv { stages }
        }
    };
    let n_tokens = config.token_count()? + usize::from(config.variant.uses_class_token());
    let class_token = config
        .variant
        .uses_class_token()
        .then(|| store.add("class_token", truncated_normal(&[1, d], INIT_STD, &mut rng)));
    let pos_embedding = config.use_positional_embedding.then(|| {
        store.add(
            "pos_embedding",
            truncated_normal(&[n_tokens, d], INIT_STD, &mut rng),
        )
    });
    let encoder = EncoderStack::new(
        &mut store,
        config.encoder_layers,
        d,
        config.heads,
        config.key_dim,
        config.d_mlp,
        config.dropout_rate,
        &mut rng,
    )?;
    let pool = (!config.variant.uses_class_token())
        .then(|| store.add("seq_pool", truncated_normal(&[d, 1], INIT_STD, &mut rng)));
    let head_hidden = Dense::new(&mut store, "head.hidden", d, d, &mut rng);
    let head_out = Dense::new(&mut store, "head.out", d, config.num_classes, &mut rng);

    Ok(Model {
        config: config.clone(),
        store,
        tokenizer,
        class_token,
        pos_embedding,
        encoder,
        pool,
        head_hidden,
        head_out,
    })
}

/// Keep the first `len` samples of every channel: `[B x N x L] -> [B x N x len]`.
pub fn truncate_columns<T: Scalar>(x: &Tensor<T>, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || len == 0 || len > s[2] {
        return Err(Error::shape(format!(
            "cannot truncate {s:?} to {len} columns"
        )));
    }
    if len == s[2] {
        return Ok(x.clone());
    }
    let mut data = Vec::with_capacity(s[0] * s[1] * len);
    for row in x.data().chunks(s[2]) {
        data.extend_from_slice(&row[..len]);
    }
    Tensor::new(&[s[0], s[1], len], data)
}

/// Cut `x [B x N x L]` into non-overlapping `ph x pw` patches, scanned
/// row-major over the patch grid and flattened row-major:
/// `[B x (N/ph)(L/pw) x ph*pw]`.
pub fn extract_patches<T: Scalar>(g: &mut Graph<T>, x: Var, ph: usize, pw: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || ph == 0 || pw == 0 || !s[1].is_multiple_of(ph) || !s[2].is_multiple_of(pw) {
        return Err(Error::shape(format!(
            "{s:?} does not tile into {ph}x{pw} patches"
        )));
    }
    let (b, gh, gw) = (s[0], s[1] / ph, s[2] / pw);
    let y = g.reshape(x, &[b, gh, ph, gw, pw])?;
    let y = g.permute(y, &[0, 1, 3, 2, 4])?;
    g.reshape(y, &[b, gh * gw, ph * pw])
}

/// Patches followed by a learned linear projection.
pub fn patch_embed<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    ph: usize,
    pw: usize,
    projection: &Dense,
) -> Result<Var> {
    let patches = extract_patches(g, x, ph, pw)?;
    projection.forward(g, store, patches)
}

/// Prepend the class token (row 0) then add the positional table.
pub fn add_class_token_and_pe<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    class_token: Var,
    pe: Option<Var>,
) -> Result<Var> {
    let with_cls = g.prepend_token(tokens, class_token)?;
    match pe {
        Some(pe) => g.add_broadcast(with_cls, pe),
        None => Ok(with_cls),
    }
}

/// Stacked `maxpool(relu(conv2d(x) + b))` stages over `x [B x H x W x 1]`,
/// flattened row-major over spatial positions: `[B x (h*w) x C_last]`.
pub fn conv_tokenize<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    stages: &[ConvStage],
) -> Result<Var> {
    let mut y = x;
    for stage in stages {
        let f = g.param(store, stage.filters);
        let b = g.param(store, stage.bias);
        y = g.conv2d(y, f)?;
        y = g.add_bias(y, b)?;
        y = g.relu(y);
        y = g.maxpool_same(y, POOL_KERNEL, POOL_STRIDE)?;
    }
    let s = g.shape(y).to_vec();
    g.reshape(y, &[s[0], s[1] * s[2], s[3]])
}

/// Attention pooling over tokens: weights `softmax_n(Y g)` per item, output
/// their weighted sum. Returns `(pooled [B x d], weights [B x n])`.
pub fn seq_pool<T: Scalar>(g: &mut Graph<T>, y: Var, score: Var) -> Result<(Var, Var)> {
    let s = g.shape(y).to_vec();
    if s.len() != 3 || g.shape(score) != [s[2], 1] {
        return Err(Error::shape(format!(
            "seq_pool tokens {s:?} with scorer {:?}",
            g.shape(score)
        )));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let logits = g.matmul(y, score)?;
    let logits = g.reshape(logits, &[b, n])?;
    let weights = g.softmax(logits)?;
    let w3 = g.reshape(weights, &[b, 1, n])?;
    let pooled = g.batch_matmul(w3, y, false)?;
    let pooled = g.reshape(pooled, &[b, d])?;
    Ok((pooled, weights))
}

impl<T: Scalar> Model<T> {
    pub fn num_weights(&self) -> usize {
        self.store.num_weights()
    }

    /// Token sequence `[B x n x d]` for a batch `[B x N x L]`.
    pub fn tokenize(&self, g: &mut Graph<T>, batch: Var) -> Result<Var> {
        let s = g.shape(batch).to_vec();
        let cfg = &self.config;
        if s.len() != 3 || s[1] != cfg.input_channels || s[2] != cfg.effective_len() {
            return Err(Error::shape(format!(
                "batch {s:?} does not match model input {}x{}",
                cfg.input_channels,
                cfg.effective_len()
            )));
        }
        match &self.tokenizer {
            Tokenizer::Patches { projection } => {
                patch_embed(g, &self.store, batch, cfg.patch_h, cfg.patch_w, projection)
            }
            Tokenizer::Conv { stages } => {
                let img = g.reshape(batch, &[s[0], s[1], s[2], 1])?;
                conv_tokenize(g, &self.store, img, stages)
            }
        }
    }

    /// Everything after tokenization: class token and positional table,
    /// encoder, pooling and head.
    pub fn classify_tokens(&self, g: &mut Graph<T>, tokens: Var) -> Result<Var> {
        let pe = self.pos_embedding.map(|id| g.param(&self.store, id));
        let seq = match self.class_token {
            Some(id) => {
                let cls = g.param(&self.store, id);
                add_class_token_and_pe(g, tokens, cls, pe)?
            }
            None => match pe {
                Some(pe) => g.add_broadcast(tokens, pe)?,
                None => tokens,
            },
        };
        let y = self.encoder.forward(g, &self.store, seq)?;
        let pooled = match self.pool {
            Some(id) => {
                let score = g.param(&self.store, id);
                seq_pool(g, y, score)?.0
            }
            None => g.select_token(y, 0)?,
        };
        let h = self.head_hidden.forward(g, &self.store, pooled)?;
        let h = g.relu(h);
        self.head_out.forward(g, &self.store, h)
    }

    /// Logits `[B x 2]` for `batch [B x N x L]` already on the graph.
    /// `L` must equal [`ModelConfig::effective_len`].
    pub fn forward(&self, g: &mut Graph<T>, batch: Var) -> Result<Var> {
        let tokens = self.tokenize(g, batch)?;
        self.classify_tokens(g, tokens)
    }

    /// Put a `[B x N x L]` batch on the graph, truncating `L` for patch
    /// variants.
    pub fn input(&self, g: &mut Graph<T>, batch: &Tensor<T>) -> Result<Var> {
        let len = self.config.effective_len();
        if batch.rank() == 3 && batch.shape()[2] != len {
            return Ok(g.input(truncate_columns(batch, len)?));
        }
        Ok(g.input(batch.clone()))
    }

    /// Inference-mode logits.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = self.input(&mut g, batch)?;
        let out = self.forward(&mut g, x)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_token_shapes() {
        let s = conv_stage_shapes(18, 256, &[32, 128]).unwrap();
        assert_eq!(s, vec![(8, 127, 32), (3, 63, 128)]);
        let s = conv_stage_shapes(18, 128, &[32, 128]).unwrap();
        assert_eq!(s.last(), Some(&(3, 31, 128)));
        assert!(conv_stage_shapes(6, 100, &[32, 128]).is_err());
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("LCT".parse::<Variant>().unwrap(), Variant::Lct);
        let err = "cnn".parse::<Variant>().unwrap_err();
        assert!(err.to_string().contains("variant"));
    }

    #[test]
    fn vit_preset_resolves_head_width() {
        let cfg = ModelConfig::preset(Variant::Vit, 1, 2, 18, 256);
        assert_eq!(cfg.key_dim, Some(264));
        assert_eq!(cfg.effective_len(), 252);
        assert_eq!(cfg.token_count().unwrap(), 14);
        cfg.validate().unwrap();
        let lct = ModelConfig::preset(Variant::Lct, 3, 2, 18, 256);
        assert_eq!(lct.key_dim, None);
        assert_eq!(lct.name(), "LCT-3/2");
        assert_eq!(lct.token_count().unwrap(), 189);
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ModelConfig::preset(Variant::Lvt, 2, 2, 18, 128);
        let text = cfg.to_toml();
        assert!(text.contains("use_positional_embedding = true"));
        assert_eq!(ModelConfig::from_toml(&text).unwrap(), cfg);
        let bad = text.replace("variant = \"lvt\"", "variant = \"cnn\"");
        assert!(ModelConfig::from_toml(&bad)
            .unwrap_err()
            .to_string()
            .contains("variant"));
    }

    #[test]
    fn structure_by_variant() {
        let vit: Model<f64> = build_model(
            &ModelConfig::preset(Variant::Vit, 1, 2, 18, 36).with_width(16),
            0,
        )
        .unwrap();
        assert!(vit.class_token.is_some() && vit.pool.is_none());
        let lct: Model<f64> = build_model(
            &ModelConfig::preset(Variant::Lct, 1, 2, 18, 36).with_width(16),
            0,
        )
        .unwrap();
        assert!(lct.class_token.is_none() && lct.pool.is_some());
        assert!(lct.store.find("class_token").is_none());
    }
}
