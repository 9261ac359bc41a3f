//! Vision Transformer classifier.
//!
//! Images are cut into non-overlapping square patches, each patch is
//! flattened and linearly projected to the hidden size, a learned CLS token is
//! prepended and learned position embeddings are added. The sequence then
//! passes through pre-norm encoder blocks (multi-head self-attention and a GELU
//! MLP, each wrapped in a residual connection), and the final CLS
//! representation is layer-normalized and mapped to class logits.
//!
//! Weight matrices are stored `[in × out]`, so every linear map is `x·W + b`.

use crate::error::{Error, Result};
use crate::rng::{Rng, INIT_STREAM};
use crate::tensor::{Graph, Param, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    pub attn_dropout: f64,
    pub hidden_dropout: f64,
    pub ln_eps: f64,
    pub freeze_encoder: bool,
}

impl ViTConfig {
    /// ViT-Base/16 at 224 pixels with a fresh `num_classes` head.
    pub fn base(num_classes: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            hidden_size: 768,
            intermediate_size: 3072,
            num_layers: 12,
            num_heads: 12,
            num_classes,
            attn_dropout: 0.0,
            hidden_dropout: 0.0,
            ln_eps: 1e-12,
            freeze_encoder: false,
        }
    }

    /// Small configuration used for desk-scale runs.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            in_channels: 1,
            hidden_size: 64,
            intermediate_size: 128,
            num_layers: 2,
            num_heads: 4,
            num_classes,
            ..Self::base(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("hidden_size", self.hidden_size),
            ("intermediate_size", self.intermediate_size),
            ("num_heads", self.num_heads),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        for (name, p) in [
            ("attn_dropout", self.attn_dropout),
            ("hidden_dropout", self.hidden_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {p}")));
            }
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::Config(format!("ln_eps must be positive, got {}", self.ln_eps)));
        }
        Ok(())
    }

    /// Patches per image, `N`.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Sequence length including the CLS token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Length of a flattened patch, `P²·C_in`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    /// Name, shape and flags of every parameter, in storage order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.hidden_size;
        let mut specs = vec![
            ParamSpec::new(
                "embeddings.patch.weight",
                vec![self.patch_dim(), d],
                Init::Normal,
                true,
                false,
            ),
            ParamSpec::new("embeddings.patch.bias", vec![d], Init::Zeros, false, false),
            ParamSpec::new("embeddings.cls_token", vec![1, d], Init::Normal, false, false),
            ParamSpec::new(
                "embeddings.position",
                vec![self.seq_len(), d],
                Init::Normal,
                false,
                false,
            ),
        ];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("encoder.{l}.{s}");
            let enc = |name: String, shape: Vec<usize>, init: Init, decay: bool| ParamSpec {
                name,
                shape,
                init,
                decay,
                encoder: true,
            };
            specs.push(enc(p("ln1.gamma"), vec![d], Init::Ones, false));
            specs.push(enc(p("ln1.beta"), vec![d], Init::Zeros, false));
            for proj in ["query", "key", "value", "output"] {
                specs.push(enc(p(&format!("attn.{proj}.weight")), vec![d, d], Init::Normal, true));
                specs.push(enc(p(&format!("attn.{proj}.bias")), vec![d], Init::Zeros, false));
            }
            specs.push(enc(p("ln2.gamma"), vec![d], Init::Ones, false));
            specs.push(enc(p("ln2.beta"), vec![d], Init::Zeros, false));
            specs.push(enc(
                p("mlp.fc1.weight"),
                vec![d, self.intermediate_size],
                Init::Normal,
                true,
            ));
            specs.push(enc(p("mlp.fc1.bias"), vec![self.intermediate_size], Init::Zeros, false));
            specs.push(enc(
                p("mlp.fc2.weight"),
                vec![self.intermediate_size, d],
                Init::Normal,
                true,
            ));
            specs.push(enc(p("mlp.fc2.bias"), vec![d], Init::Zeros, false));
        }
        specs.extend([
            ParamSpec::new("final_norm.gamma", vec![d], Init::Ones, false, false),
            ParamSpec::new("final_norm.beta", vec![d], Init::Zeros, false, false),
            ParamSpec::new("head.weight", vec![d, self.num_classes], Init::Normal, true, false),
            ParamSpec::new("head.bias", vec![self.num_classes], Init::Zeros, false, false),
        ]);
        specs
    }

    /// Exact parameter count over `scope`, computed from shapes alone.
    pub fn parameter_count(&self, scope: ParamScope) -> usize {
        self.param_specs()
            .iter()
            .filter(|s| scope.includes(&s.name, s.encoder, self.freeze_encoder))
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Zeros,
    Ones,
    /// Truncated normal, std 0.02.
    Normal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub decay: bool,
    pub encoder: bool,
}

impl ParamSpec {
    fn new(name: &str, shape: Vec<usize>, init: Init, decay: bool, encoder: bool) -> Self {
        Self {
            name: name.to_string(),
            shape,
            init,
            decay,
            encoder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    All,
    PatchEmbed,
    Head,
    /// Everything except encoder blocks when the encoder is frozen.
    Trainable,
}

impl ParamScope {
    fn includes(self, name: &str, encoder: bool, frozen: bool) -> bool {
        match self {
            ParamScope::All => true,
            ParamScope::PatchEmbed => name.starts_with("embeddings.patch."),
            ParamScope::Head => name.starts_with("head."),
            ParamScope::Trainable => !(frozen && encoder),
        }
    }
}

const INIT_STD: f64 = 0.02;

/// Cuts a `[C×H×W]` image into `[N × P²·C]` flattened patches.
///
/// Patches are taken in row-major grid order; within a patch the layout is
/// channel, then row, then column.
pub fn patchify(image: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    let (c, s, p) = (cfg.in_channels, cfg.image_size, cfg.patch_size);
    if image.shape() != [c, s, s] {
        return Err(Error::dim(
            "patchify",
            format!("image {:?}, expected [{c}, {s}, {s}]", image.shape()),
        ));
    }
    let grid = s / p;
    let px = image.data();
    let mut out = Vec::with_capacity(px.len());
    for gy in 0..grid {
        for gx in 0..grid {
            for ch in 0..c {
                for y in 0..p {
                    let row = (ch * s + gy * p + y) * s + gx * p;
                    out.extend_from_slice(&px[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![grid * grid, cfg.patch_dim()], out)
}

/// Graph handles for the embedding parameters.
#[derive(Debug, Clone, Copy)]
pub struct EmbedVars {
    pub patch_weight: Var,
    pub patch_bias: Var,
    pub cls: Var,
    pub position: Var,
}

/// Graph handles for one encoder block.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1: (Var, Var),
    pub query: (Var, Var),
    pub key: (Var, Var),
    pub value: (Var, Var),
    pub output: (Var, Var),
    pub ln2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

/// All model parameters bound onto one graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    /// One handle per parameter, in [`ViTModel::params`] order.
    pub vars: Vec<Var>,
    pub embed: EmbedVars,
    pub blocks: Vec<BlockVars>,
    pub final_norm: (Var, Var),
    pub head: (Var, Var),
}

/// Dropout source; `None` means evaluation mode.
pub type Dropout<'a> = Option<&'a mut Rng>;

fn dropout(g: &mut Graph, x: Var, p: f64, rng: &mut Dropout<'_>) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask = Tensor::from_fn(g.shape(x).to_vec(), || if rng.uniform() < p { 0.0 } else { keep });
    let m = g.constant(mask);
    g.mul(x, m)
}

fn linear(g: &mut Graph, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_broadcast(y, b)
}

/// Embeds `batch` images whose patches are stacked as `[batch·N × P²·C]`,
/// giving `[batch·(N+1) × D]` with each image's CLS row first.
pub fn embed_batch(g: &mut Graph, patches: Var, batch: usize, vars: &EmbedVars, cfg: &ViTConfig) -> Result<Var> {
    let n = cfg.num_patches();
    let shape = g.shape(patches).to_vec();
    if shape != [batch * n, cfg.patch_dim()] {
        return Err(Error::dim(
            "embed",
            format!("patches {shape:?}, expected [{}, {}]", batch * n, cfg.patch_dim()),
        ));
    }
    let proj = linear(g, patches, (vars.patch_weight, vars.patch_bias))?;
    let mut seqs = Vec::with_capacity(2 * batch);
    for b in 0..batch {
        seqs.push(vars.cls);
        seqs.push(g.slice(proj, 0, b * n, (b + 1) * n)?);
    }
    let tokens = g.concat(&seqs, 0)?;
    let d = cfg.hidden_size;
    let t = cfg.seq_len();
    let tokens = g.reshape(tokens, vec![batch, t, d])?;
    let tokens = g.add_broadcast(tokens, vars.position)?;
    g.reshape(tokens, vec![batch * t, d])
}

/// Embeds one image's `[N × P²·C]` patches into `[(N+1) × D]`.
pub fn embed(g: &mut Graph, patches: Var, vars: &EmbedVars, cfg: &ViTConfig) -> Result<Var> {
    embed_batch(g, patches, 1, vars, cfg)
}

/// Row-wise `softmax(Q·Kᵀ/√d_k)`.
pub fn attention_probs(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::dim("attention", format!("Q {sq:?} vs K {sk:?}")));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (sq[1] as f64).sqrt());
    g.softmax(scores, 1)
}

/// Scaled dot-product attention `softmax(Q·Kᵀ/√d_k)·V`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    attention_with_dropout(g, q, k, v, 0.0, &mut None)
}

fn attention_with_dropout(g: &mut Graph, q: Var, k: Var, v: Var, p: f64, rng: &mut Dropout<'_>) -> Result<Var> {
    let (sk, sv) = (g.shape(k).to_vec(), g.shape(v).to_vec());
    if sv.len() != 2 || sk.first() != sv.first() {
        return Err(Error::dim("attention", format!("K {sk:?} vs V {sv:?}")));
    }
    let probs = attention_probs(g, q, k)?;
    let probs = dropout(g, probs, p, rng)?;
    g.matmul(probs, v)
}

/// Multi-head self-attention over `batch` stacked sequences `x`
/// (`[batch·T × D]`), including the output projection.
pub fn multi_head_attention(
    g: &mut Graph,
    x: Var,
    batch: usize,
    w: &BlockVars,
    cfg: &ViTConfig,
    rng: &mut Dropout<'_>,
) -> Result<Var> {
    let q = linear(g, x, w.query)?;
    let k = linear(g, x, w.key)?;
    let v = linear(g, x, w.value)?;
    let rows = g.shape(x)[0];
    if !rows.is_multiple_of(batch) {
        return Err(Error::dim("attention", format!("{rows} rows for batch {batch}")));
    }
    let t = rows / batch;
    let dk = cfg.head_dim();
    let mut samples = Vec::with_capacity(batch);
    for b in 0..batch {
        let (qb, kb, vb) = (
            g.slice(q, 0, b * t, (b + 1) * t)?,
            g.slice(k, 0, b * t, (b + 1) * t)?,
            g.slice(v, 0, b * t, (b + 1) * t)?,
        );
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let cols = (h * dk, (h + 1) * dk);
            let qh = g.slice(qb, 1, cols.0, cols.1)?;
            let kh = g.slice(kb, 1, cols.0, cols.1)?;
            let vh = g.slice(vb, 1, cols.0, cols.1)?;
            heads.push(attention_with_dropout(g, qh, kh, vh, cfg.attn_dropout, rng)?);
        }
        samples.push(g.concat(&heads, 1)?);
    }
    let merged = g.concat(&samples, 0)?;
    linear(g, merged, w.output)
}

/// Pre-norm block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
pub fn encoder_block(
    g: &mut Graph,
    x: Var,
    batch: usize,
    w: &BlockVars,
    cfg: &ViTConfig,
    rng: &mut Dropout<'_>,
) -> Result<Var> {
    let h = g.layer_norm(x, w.ln1.0, w.ln1.1, cfg.ln_eps)?;
    let a = multi_head_attention(g, h, batch, w, cfg, rng)?;
    let a = dropout(g, a, cfg.hidden_dropout, rng)?;
    let x = g.add(x, a)?;
    let h = g.layer_norm(x, w.ln2.0, w.ln2.1, cfg.ln_eps)?;
    let h = linear(g, h, w.fc1)?;
    let h = g.gelu(h);
    let h = linear(g, h, w.fc2)?;
    let h = dropout(g, h, cfg.hidden_dropout, rng)?;
    g.add(x, h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTModel {
    config: ViTConfig,
    params: Vec<Param>,
}

impl ViTModel {
    /// Freshly initialized model; weights are a deterministic function of `seed`.
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::stream(seed, INIT_STREAM);
        let params = config
            .param_specs()
            .into_iter()
            .map(|s| {
                let value = match s.init {
                    Init::Zeros => Tensor::zeros(s.shape),
                    Init::Ones => Tensor::full(s.shape, 1.0),
                    Init::Normal => Tensor::from_fn(s.shape, || rng.truncated_normal(INIT_STD)),
                };
                Param {
                    name: s.name,
                    value,
                    decay: s.decay,
                    encoder: s.encoder,
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Rebuilds a model from named tensors, checking names and shapes
    /// against the configuration.
    pub fn from_tensors(config: ViTConfig, mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        let mut params = Vec::with_capacity(specs.len());
        for s in specs {
            let pos = tensors
                .iter()
                .position(|(n, _)| *n == s.name)
                .ok_or_else(|| Error::data(format!("missing parameter {}", s.name)))?;
            let (_, value) = tensors.swap_remove(pos);
            if value.shape() != s.shape.as_slice() {
                return Err(Error::data(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    value.shape(),
                    s.shape
                )));
            }
            params.push(Param {
                name: s.name,
                value,
                decay: s.decay,
                encoder: s.encoder,
            });
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Whether `param` receives gradients under the current configuration.
    pub fn is_trainable(&self, param: &Param) -> bool {
        !(self.config.freeze_encoder && param.encoder)
    }

    pub fn parameter_count(&self, scope: ParamScope) -> usize {
        let frozen = self.config.freeze_encoder;
        self.params
            .iter()
            .filter(|p| scope.includes(&p.name, p.encoder, frozen))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Registers every parameter on `g`; frozen parameters become constants.
    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if self.is_trainable(p) {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        let embed = EmbedVars {
            patch_weight: vars[0],
            patch_bias: vars[1],
            cls: vars[2],
            position: vars[3],
        };
        const PER_BLOCK: usize = 16;
        let blocks = (0..self.config.num_layers)
            .map(|l| {
                let v = &vars[4 + l * PER_BLOCK..4 + (l + 1) * PER_BLOCK];
                BlockVars {
                    ln1: (v[0], v[1]),
                    query: (v[2], v[3]),
                    key: (v[4], v[5]),
                    value: (v[6], v[7]),
                    output: (v[8], v[9]),
                    ln2: (v[10], v[11]),
                    fc1: (v[12], v[13]),
                    fc2: (v[14], v[15]),
                }
            })
            .collect();
        let tail = &vars[vars.len() - 4..];
        BoundModel {
            final_norm: (tail[0], tail[1]),
            head: (tail[2], tail[3]),
            embed,
            blocks,
            vars,
        }
    }

    /// Logits `[B×C]` for a `[B×C_in×H×W]` image batch, with the model bound
    /// onto `g`. Pass a generator to enable dropout (training mode).
    pub fn forward(&self, g: &mut Graph, images: &Tensor, mut rng: Dropout<'_>) -> Result<(Var, BoundModel)> {
        let cfg = &self.config;
        let s = cfg.image_size;
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != [cfg.in_channels, s, s] {
            return Err(Error::dim(
                "forward",
                format!("images {shape:?}, expected [B, {}, {s}, {s}]", cfg.in_channels),
            ));
        }
        let batch = shape[0];
        let per_image = cfg.in_channels * s * s;
        let mut patches = Vec::with_capacity(images.numel());
        for b in 0..batch {
            let img = Tensor::new(
                vec![cfg.in_channels, s, s],
                images.data()[b * per_image..(b + 1) * per_image].to_vec(),
            )?;
            patches.extend(patchify(&img, cfg)?.into_data());
        }
        let patches = g.constant(Tensor::new(vec![batch * cfg.num_patches(), cfg.patch_dim()], patches)?);
        let bound = self.bind(g);
        let mut x = embed_batch(g, patches, batch, &bound.embed, cfg)?;
        x = dropout(g, x, cfg.hidden_dropout, &mut rng)?;
        for block in &bound.blocks {
            x = encoder_block(g, x, batch, block, cfg, &mut rng)?;
        }
        let t = cfg.seq_len();
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * t).collect();
        let cls = g.select_rows(x, &cls_rows)?;
        let cls = g.layer_norm(cls, bound.final_norm.0, bound.final_norm.1, cfg.ln_eps)?;
        let logits = linear(g, cls, bound.head)?;
        Ok((logits, bound))
    }

    /// Softmax class probabilities `[B×C]` in evaluation mode.
    pub fn predict_proba(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (logits, _) = self.forward(&mut g, images, None)?;
        let p = g.softmax(logits, 1)?;
        Ok(g.value(p).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn micro() -> ViTConfig {
        ViTConfig {
            image_size: 16,
            patch_size: 8,
            in_channels: 1,
            hidden_size: 8,
            intermediate_size: 16,
            num_layers: 2,
            num_heads: 2,
            num_classes: 3,
            ..ViTConfig::base(3)
        }
    }

    fn images(batch: usize, cfg: &ViTConfig, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(vec![batch, cfg.in_channels, cfg.image_size, cfg.image_size], || {
            rng.uniform_range(-1.0, 1.0)
        })
    }

    #[test]
    fn config_validation() {
        assert!(ViTConfig::base(7).validate().is_ok());
        let mut c = micro();
        c.patch_size = 5;
        assert!(c.validate().is_err());
        let mut c = micro();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = micro();
        c.attn_dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn patch_grid_sizes() {
        assert_eq!(ViTConfig::base(7).num_patches(), 196);
        assert_eq!(ViTConfig::base(7).seq_len(), 197);
        let c = ViTConfig {
            image_size: 32,
            patch_size: 8,
            ..micro()
        };
        let img = Tensor::from_fn(vec![1, 32, 32], || 1.0);
        assert_eq!(patchify(&img, &c).unwrap().shape(), &[16, 64]);
    }

    #[test]
    fn patchify_partitions_pixels() {
        let c = ViTConfig {
            in_channels: 2,
            ..micro()
        };
        let mut k = 0.0;
        let img = Tensor::from_fn(vec![2, 16, 16], || {
            k += 1.0;
            k
        });
        let p = patchify(&img, &c).unwrap();
        assert_eq!(p.data().iter().sum::<f64>(), img.data().iter().sum::<f64>());
        let mut sorted = p.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, img.data());
        // second patch of the first row starts at column 8 of channel 0
        assert_eq!(p.row(1)[0], img.data()[8]);
    }

    #[test]
    fn patchify_rejects_wrong_size() {
        let img = Tensor::zeros(vec![1, 15, 16]);
        assert!(matches!(patchify(&img, &micro()), Err(Error::Dimension { .. })));
    }

    #[test]
    fn parameter_counts() {
        let base = ViTConfig::base(7);
        assert_eq!(base.parameter_count(ParamScope::PatchEmbed), 590_592);
        assert_eq!(base.parameter_count(ParamScope::Head), 5_383);
        assert_eq!(ViTConfig::base(2).parameter_count(ParamScope::Head), 1_538);
        assert_eq!(
            base.parameter_count(ParamScope::PatchEmbed) + base.parameter_count(ParamScope::Head),
            595_975
        );
        let frozen = ViTConfig {
            freeze_encoder: true,
            ..base.clone()
        };
        let d = 768;
        let embeddings = 590_592 + d + 197 * d;
        assert_eq!(
            frozen.parameter_count(ParamScope::Trainable),
            embeddings + 2 * d + 5_383
        );
        assert_eq!(
            base.parameter_count(ParamScope::Trainable),
            base.parameter_count(ParamScope::All)
        );
    }

    #[test]
    fn model_counts_match_config_counts() {
        let c = micro();
        let m = ViTModel::new(c.clone(), 0).unwrap();
        for scope in [
            ParamScope::All,
            ParamScope::PatchEmbed,
            ParamScope::Head,
            ParamScope::Trainable,
        ] {
            assert_eq!(m.parameter_count(scope), c.parameter_count(scope));
        }
    }

    #[test]
    fn embed_of_zero_image_is_position() {
        let c = micro();
        let mut m = ViTModel::new(c.clone(), 1).unwrap();
        m.param_mut("embeddings.cls_token").unwrap().value = Tensor::zeros(vec![1, 8]);
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let patches = g.constant(Tensor::zeros(vec![4, 64]));
        let e = embed(&mut g, patches, &bound.embed, &c).unwrap();
        assert_eq!(g.shape(e), &[5, 8]);
        assert_eq!(
            g.value(e),
            &m.param("embeddings.position")
                .unwrap()
                .value
                .reshape(vec![5, 8])
                .unwrap()
        );
    }

    #[test]
    fn attention_single_token_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(vec![1, 2], vec![0.3, -1.0]).unwrap());
        let k = g.constant(Tensor::new(vec![1, 2], vec![2.0, 0.5]).unwrap());
        let v = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let out = attention(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn attention_uniform_keys_average_values() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0]).unwrap());
        let k = g.constant(Tensor::new(vec![3, 2], vec![0.4, 0.1, 0.4, 0.1, 0.4, 0.1]).unwrap());
        let v = g.constant(Tensor::new(vec![3, 2], vec![1.0, 0.0, 2.0, 6.0, 3.0, 3.0]).unwrap());
        let out = attention(&mut g, q, k, v).unwrap();
        for r in 0..3 {
            assert_abs_diff_eq!(g.value(out).row(r)[0], 2.0, epsilon = 1e-12);
            assert_abs_diff_eq!(g.value(out).row(r)[1], 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_two_token_example() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap());
        let k = g.constant(Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap());
        let v = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let out = attention(&mut g, q, k, v).unwrap();
        let sigma = 0.7310585786300049;
        assert_abs_diff_eq!(g.value(out).row(0)[0], sigma, epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(out).row(0)[1], 1.0 - sigma, epsilon = 1e-12);
    }

    #[test]
    fn attention_shape_errors() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(vec![2, 3]));
        let k = g.constant(Tensor::zeros(vec![2, 4]));
        let v = g.constant(Tensor::zeros(vec![2, 2]));
        assert!(attention(&mut g, q, k, v).is_err());
        let k = g.constant(Tensor::zeros(vec![2, 3]));
        let v = g.constant(Tensor::zeros(vec![3, 2]));
        assert!(attention(&mut g, q, k, v).is_err());
    }

    #[test]
    fn encoder_block_zero_weights_is_identity() {
        let c = micro();
        let mut m = ViTModel::new(c.clone(), 2).unwrap();
        for p in m.params_mut() {
            if p.name.starts_with("encoder.0.attn") || p.name.starts_with("encoder.0.mlp") {
                p.value = Tensor::zeros(p.value.shape().to_vec());
            }
        }
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let mut rng = Rng::new(4);
        let x = g.constant(Tensor::from_fn(vec![10, 8], || rng.uniform_range(-2.0, 2.0)));
        let y = encoder_block(&mut g, x, 2, &bound.blocks[0], &c, &mut None).unwrap();
        assert_eq!(g.shape(y), g.shape(x));
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn multi_head_equals_sum_of_single_heads() {
        let c = ViTConfig {
            num_heads: 4,
            ..micro()
        };
        let m = ViTModel::new(c.clone(), 3).unwrap();
        let mut rng = Rng::new(8);
        let xt = Tensor::from_fn(vec![5, 8], || rng.uniform_range(-2.0, 2.0));
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let w = bound.blocks[0];
        let x = g.constant(xt);
        let fused = multi_head_attention(&mut g, x, 1, &w, &c, &mut None).unwrap();

        // Head h only sees columns h·d_k..(h+1)·d_k of W_Q, W_K, W_V and the
        // matching rows of W_O; concatenation then projection equals the sum of
        // per-head projections.
        let dk = c.head_dim();
        let q = linear(&mut g, x, w.query).unwrap();
        let k = linear(&mut g, x, w.key).unwrap();
        let v = linear(&mut g, x, w.value).unwrap();
        let mut total = None;
        for h in 0..c.num_heads {
            let qh = g.slice(q, 1, h * dk, (h + 1) * dk).unwrap();
            let kh = g.slice(k, 1, h * dk, (h + 1) * dk).unwrap();
            let vh = g.slice(v, 1, h * dk, (h + 1) * dk).unwrap();
            let head = attention(&mut g, qh, kh, vh).unwrap();
            let wo = g.slice(w.output.0, 0, h * dk, (h + 1) * dk).unwrap();
            let part = g.matmul(head, wo).unwrap();
            total = Some(match total {
                None => part,
                Some(t) => g.add(t, part).unwrap(),
            });
        }
        let reference = g.add_broadcast(total.unwrap(), w.output.1).unwrap();
        for (a, b) in g.value(fused).data().iter().zip(g.value(reference).data()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
        }
    }

    #[test]
    fn forward_shapes_and_batch_independence() {
        let c = ViTConfig {
            num_classes: 7,
            ..micro()
        };
        let m = ViTModel::new(c.clone(), 5).unwrap();
        let imgs = images(3, &c, 6);
        let mut g = Graph::new();
        let (logits, _) = m.forward(&mut g, &imgs, None).unwrap();
        assert_eq!(g.shape(logits), &[3, 7]);
        let lg = g.value(logits).clone();

        let per = c.image_size * c.image_size;
        let order = [2, 0, 1];
        let mut permuted = Vec::new();
        for &b in &order {
            permuted.extend_from_slice(&imgs.data()[b * per..(b + 1) * per]);
        }
        let permuted = Tensor::new(imgs.shape().to_vec(), permuted).unwrap();
        let mut g = Graph::new();
        let (pl, _) = m.forward(&mut g, &permuted, None).unwrap();
        for (i, &b) in order.iter().enumerate() {
            assert_eq!(g.value(pl).row(i), lg.row(b));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let c = micro();
        let run = || {
            let m = ViTModel::new(c.clone(), 9).unwrap();
            m.predict_proba(&images(2, &c, 1)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_encoder_is_not_tracked() {
        let c = ViTConfig {
            freeze_encoder: true,
            ..micro()
        };
        let m = ViTModel::new(c, 0).unwrap();
        let mut g = Graph::new();
        let (logits, bound) = m.forward(&mut g, &images(1, m.config(), 0), None).unwrap();
        let s = g.sum(logits);
        g.backward(s).unwrap();
        for (p, v) in m.params().iter().zip(&bound.vars) {
            assert_eq!(g.grad(*v).is_some(), !p.encoder, "{}", p.name);
        }
    }

    #[test]
    fn dropout_changes_training_output_only() {
        let c = ViTConfig {
            hidden_dropout: 0.5,
            attn_dropout: 0.5,
            ..micro()
        };
        let m = ViTModel::new(c.clone(), 0).unwrap();
        let imgs = images(1, &c, 0);
        let eval = |m: &ViTModel| {
            let mut g = Graph::new();
            let (l, _) = m.forward(&mut g, &imgs, None).unwrap();
            g.value(l).clone()
        };
        let mut rng = Rng::new(1);
        let mut g = Graph::new();
        let (l, _) = m.forward(&mut g, &imgs, Some(&mut rng)).unwrap();
        assert_ne!(g.value(l), &eval(&m));
        assert_eq!(eval(&m), eval(&m));
    }
}
