//! Miniature vision transformer backbone.
//!
//! Images enter as flattened patches: a batch of `B` images is a
//! `[B*L, patch_dim]` matrix where image `b` owns rows `b*L..(b+1)*L` in
//! raster order of patches. Inside the network a batch is a
//! `[B*(L+1), d]` matrix where row `b*(L+1)` is the class token of image `b`.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            depth: 3,
            dim: 32,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| Err(Error::Config {
            key: format!("backbone.{key}"),
            detail: detail.into(),
        });
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("patch_size", "must be positive and divide image_size");
        }
        if self.channels == 0 {
            return bad("channels", "must be positive");
        }
        if self.depth == 0 {
            return bad("depth", "must be positive");
        }
        if self.dim < 2 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad("heads", "dim must be at least 2 and divisible by heads");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio", "must be positive");
        }
        Ok(())
    }

    /// Patch tokens per image, `L`.
    pub fn patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Sequence length `L + 1`.
    pub fn seq_len(&self) -> usize {
        self.patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

/// Cuts an `H×W×C` image (row-major, channels last) into `L` flattened
/// patches in raster order.
pub fn patchify(config: &BackboneConfig, image: &[f64]) -> Result<Vec<f64>> {
    if image.len() != config.image_len() {
        return Err(Error::dim("patchify", config.image_len(), image.len()));
    }
    let (s, p, c) = (config.image_size, config.patch_size, config.channels);
    let per_side = s / p;
    let mut out = Vec::with_capacity(image.len());
    for py in 0..per_side {
        for px in 0..per_side {
            for y in 0..p {
                let row = (py * p + y) * s + px * p;
                out.extend_from_slice(&image[row * c..(row + p) * c]);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

const BLOCK_FIELDS: [&str; 12] = [
    "ln1_gamma", "ln1_beta", "qkv_w", "qkv_b", "proj_w", "proj_b", "ln2_gamma", "ln2_beta", "fc1_w", "fc1_b",
    "fc2_w", "fc2_b",
];

impl BlockParams {
    fn fields(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gamma, &self.ln1_beta, &self.qkv_w, &self.qkv_b, &self.proj_w, &self.proj_b,
            &self.ln2_gamma, &self.ln2_beta, &self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gamma, &mut self.ln1_beta, &mut self.qkv_w, &mut self.qkv_b, &mut self.proj_w,
            &mut self.proj_b, &mut self.ln2_gamma, &mut self.ln2_beta, &mut self.fc1_w, &mut self.fc1_b,
            &mut self.fc2_w, &mut self.fc2_b,
        ]
    }
}

/// Backbone weights. `frozen` marks the pre-trained state that incremental
/// training must never modify.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub frozen: bool,
}

fn uniform<R: Rng>(rng: &mut R, shape: [usize; 2], fan_in: usize) -> Tensor {
    let a = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("valid range");
    let data = (0..shape[0] * shape[1]).map(|_| dist.sample(rng)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn gaussian<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::from_parts(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

impl BackboneParams {
    pub fn init<R: Rng>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, h, p) = (config.dim, config.hidden(), config.patch_dim());
        let ones = || Tensor::filled([d], 1.0);
        let zeros = |n: usize| Tensor::zeros([n]);
        let patch_w = uniform(rng, [p, d], p);
        let cls = gaussian(rng, vec![d], 0.02);
        let pos = gaussian(rng, vec![config.seq_len(), d], 0.02);
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                ln1_gamma: ones(),
                ln1_beta: zeros(d),
                qkv_w: uniform(rng, [d, 3 * d], d),
                qkv_b: zeros(3 * d),
                proj_w: uniform(rng, [d, d], d),
                proj_b: zeros(d),
                ln2_gamma: ones(),
                ln2_beta: zeros(d),
                fc1_w: uniform(rng, [d, h], d),
                fc1_b: zeros(h),
                fc2_w: uniform(rng, [h, d], h),
                fc2_b: zeros(d),
            })
            .collect();
        Ok(Self {
            config,
            patch_w,
            patch_b: zeros(d),
            cls,
            pos,
            blocks,
            norm_gamma: ones(),
            norm_beta: zeros(d),
            frozen: false,
        })
    }

    /// Every buffer with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_w".to_string(), &self.patch_w),
            ("patch_b".to_string(), &self.patch_b),
            ("cls".to_string(), &self.cls),
            ("pos".to_string(), &self.pos),
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(block.fields()) {
                out.push((format!("block{b}/{name}"), t));
            }
        }
        out.push(("norm_gamma".to_string(), &self.norm_gamma));
        out.push(("norm_beta".to_string(), &self.norm_beta));
        out
    }

    /// Mutable buffers in the order of [`BackboneParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.cls, &mut self.pos];
        for block in &mut self.blocks {
            out.extend(block.fields_mut());
        }
        out.push(&mut self.norm_gamma);
        out.push(&mut self.norm_beta);
        out
    }

    /// Places the buffers on `tape`, as trainable leaves when `trainable` is
    /// set and the backbone is not frozen, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BackboneVars {
        let trainable = trainable && !self.frozen;
        let mut put = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let patch_w = put(&self.patch_w);
        let patch_b = put(&self.patch_b);
        let cls = put(&self.cls);
        let pos = put(&self.pos);
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let f = b.fields().map(&mut put);
                BlockVars {
                    ln1_gamma: f[0],
                    ln1_beta: f[1],
                    qkv_w: f[2],
                    qkv_b: f[3],
                    proj_w: f[4],
                    proj_b: f[5],
                    ln2_gamma: f[6],
                    ln2_beta: f[7],
                    fc1_w: f[8],
                    fc1_b: f[9],
                    fc2_w: f[10],
                    fc2_b: f[11],
                }
            })
            .collect();
        let norm_gamma = put(&self.norm_gamma);
        let norm_beta = put(&self.norm_beta);
        BackboneVars {
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            norm_gamma,
            norm_beta,
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        for (name, t) in self.named_tensors() {
            c.insert(name, t.clone())?;
        }
        c.set_meta("config", serde_json::to_string(&self.config)?);
        c.set_meta("frozen", self.frozen.to_string());
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config: BackboneConfig = serde_json::from_str(c.meta("config")?)?;
        let mut params = Self::init(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = c.get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::dim("backbone checkpoint", format!("{name} {:?}", slot.shape()), format!("{:?}", t.shape())));
            }
            *slot = t.clone();
        }
        params.frozen = c.meta("frozen")? == "true";
        Ok(params)
    }
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// Tape handles for a bound [`BackboneParams`], same order as
/// [`BackboneParams::tensors_mut`] via [`BackboneVars::all`].
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub cls: Var,
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
    pub norm_gamma: Var,
    pub norm_beta: Var,
}

impl BackboneVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.patch_w, self.patch_b, self.cls, self.pos];
        for b in &self.blocks {
            out.extend([
                b.ln1_gamma, b.ln1_beta, b.qkv_w, b.qkv_b, b.proj_w, b.proj_b, b.ln2_gamma, b.ln2_beta, b.fc1_w,
                b.fc1_b, b.fc2_w, b.fc2_b,
            ]);
        }
        out.push(self.norm_gamma);
        out.push(self.norm_beta);
        out
    }
}

/// Residual branch added in parallel with a block's MLP.
pub trait TokenHook {
    /// Receives the post-norm MLP input `[B*(L+1), d]` of `block` and returns
    /// the term to add to the block output, or `None` for no contribution.
    fn apply(&mut self, tape: &mut Tape, block: usize, normed: Var) -> Result<Option<Var>>;
}

/// A hook that never contributes.
pub struct NoHook;

impl TokenHook for NoHook {
    fn apply(&mut self, _: &mut Tape, _: usize, _: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// Projects `[B*L, patch_dim]` patches and prepends class tokens; adds
/// positional embeddings.
pub fn patch_embed(tape: &mut Tape, vars: &BackboneVars, patches: Var, batch: usize) -> Result<Var> {
    let proj = tape.matmul(patches, vars.patch_w)?;
    let proj = tape.add_row_bias(proj, vars.patch_b)?;
    tape.assemble_tokens(proj, vars.cls, vars.pos, batch)
}

/// Pre-norm transformer block with the hook in parallel to the MLP.
pub fn block_forward(
    tape: &mut Tape,
    config: &BackboneConfig,
    vars: &BlockVars,
    x: Var,
    batch: usize,
    block: usize,
    hook: &mut dyn TokenHook,
) -> Result<Var> {
    let h = tape.layer_norm(x, vars.ln1_gamma, vars.ln1_beta)?;
    let qkv = tape.matmul(h, vars.qkv_w)?;
    let qkv = tape.add_row_bias(qkv, vars.qkv_b)?;
    let att = tape.attention(qkv, batch, config.seq_len(), config.heads)?;
    let att = tape.matmul(att, vars.proj_w)?;
    let att = tape.add_row_bias(att, vars.proj_b)?;
    let x = tape.add(x, att)?;

    let h = tape.layer_norm(x, vars.ln2_gamma, vars.ln2_beta)?;
    let m = tape.matmul(h, vars.fc1_w)?;
    let m = tape.add_row_bias(m, vars.fc1_b)?;
    let m = tape.gelu(m)?;
    let m = tape.matmul(m, vars.fc2_w)?;
    let m = tape.add_row_bias(m, vars.fc2_b)?;
    let mut out = tape.add(x, m)?;
    if let Some(extra) = hook.apply(tape, block, h)? {
        out = tape.add(out, extra)?;
    }
    Ok(out)
}

/// Full forward pass; returns the final-norm tokens `[B*(L+1), d]`.
pub fn forward(
    tape: &mut Tape,
    config: &BackboneConfig,
    vars: &BackboneVars,
    patches: Var,
    batch: usize,
    hook: &mut dyn TokenHook,
) -> Result<Var> {
    let expect = [batch * config.patches(), config.patch_dim()];
    if tape.value(patches).shape() != expect {
        return Err(Error::dim("forward", format!("{expect:?}"), format!("{:?}", tape.value(patches).shape())));
    }
    let mut x = patch_embed(tape, vars, patches, batch)?;
    for (b, bv) in vars.blocks.iter().enumerate() {
        x = block_forward(tape, config, bv, x, batch, b, hook)?;
    }
    tape.layer_norm(x, vars.norm_gamma, vars.norm_beta)
}

/// Rows of class tokens in a `[B*(L+1), d]` token matrix.
pub fn class_rows(batch: usize, seq_len: usize) -> Vec<usize> {
    (0..batch).map(|b| b * seq_len).collect()
}

/// Rows of patch tokens in a `[B*(L+1), d]` token matrix.
pub fn patch_rows(batch: usize, seq_len: usize) -> Vec<usize> {
    (0..batch).flat_map(|b| (1..seq_len).map(move |j| b * seq_len + j)).collect()
}

/// The `(L+1)×d` tokens of one image; row 0 is the class token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    tokens: Tensor,
}

impl TokenBatch {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() < 2 {
            return Err(Error::dim("TokenBatch", "[(L+1), d] with L >= 1", format!("{:?}", tokens.shape())));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn class_token(&self) -> &[f64] {
        self.tokens.row(0)
    }

    pub fn patch_token(&self, j: usize) -> &[f64] {
        self.tokens.row(j + 1)
    }

    /// Number of patch tokens `L`.
    pub fn patch_count(&self) -> usize {
        self.tokens.rows() - 1
    }

    pub fn patch_tokens(&self) -> Tensor {
        let d = self.tokens.cols();
        Tensor::from_parts(vec![self.patch_count(), d], self.tokens.data()[d..].to_vec())
    }

    /// Splits a `[B*(L+1), d]` matrix into per-image batches.
    pub fn split(all: &Tensor, seq_len: usize) -> Result<Vec<TokenBatch>> {
        let d = all.cols();
        if all.rows() % seq_len != 0 {
            return Err(Error::dim("TokenBatch::split", format!("multiple of {seq_len} rows"), all.rows()));
        }
        all.data()
            .chunks(seq_len * d)
            .map(|c| TokenBatch::new(Tensor::from_parts(vec![seq_len, d], c.to_vec())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> BackboneConfig {
        BackboneConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    fn run(params: &BackboneParams, images: &[Vec<f64>], hook: &mut dyn TokenHook) -> Tensor {
        let cfg = &params.config;
        let patches: Vec<f64> = images.iter().flat_map(|im| patchify(cfg, im).unwrap()).collect();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let p = tape.constant(Tensor::new([images.len() * cfg.patches(), cfg.patch_dim()], patches).unwrap());
        let out = forward(&mut tape, cfg, &vars, p, images.len(), hook).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn config_validation_names_the_key() {
        let mut c = small();
        c.patch_size = 3;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("backbone.patch_size"), "{err}");
        let d = BackboneConfig::default();
        assert_eq!((d.patches(), d.seq_len(), d.patch_dim()), (16, 17, 16));
    }

    #[test]
    fn patchify_uses_raster_order() {
        let cfg = small();
        let img: Vec<f64> = (0..64).map(f64::from).collect();
        let p = patchify(&cfg, &img).unwrap();
        assert_eq!(&p[..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&p[4..8], &[8.0, 9.0, 10.0, 11.0]);
        // second patch starts at column 4 of row 0
        assert_eq!(p[16], 4.0);
        // third patch starts at row 4
        assert_eq!(p[32], 32.0);
        assert!(patchify(&cfg, &img[..10]).is_err());
    }

    #[test]
    fn patch_embed_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small();
        let mut params = BackboneParams::init(cfg.clone(), &mut rng).unwrap();
        params.patch_b = random_tensor(&mut rng, &[8]);
        let img = random_tensor(&mut rng, &[64]);
        let patches = patchify(&cfg, img.data()).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let p = tape.constant(Tensor::new([4, 16], patches.clone()).unwrap());
        let tokens = patch_embed(&mut tape, &vars, p, 1).unwrap();
        let tokens = tape.value(tokens);
        assert_eq!(tokens.shape(), &[5, 8]);
        for i in 0..8 {
            assert!((tokens.row(0)[i] - params.cls.data()[i] - params.pos.row(0)[i]).abs() < 1e-15);
        }
        for l in 0..4 {
            for i in 0..8 {
                let mut v = params.patch_b.data()[i] + params.pos.row(l + 1)[i];
                for k in 0..16 {
                    v += patches[l * 16 + k] * params.patch_w.row(k)[i];
                }
                assert!((tokens.row(l + 1)[i] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_image_gives_positional_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small();
        let params = BackboneParams::init(cfg.clone(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let p = tape.constant(Tensor::zeros([4, 16]));
        let tokens = patch_embed(&mut tape, &vars, p, 1).unwrap();
        for l in 1..5 {
            assert_eq!(tape.value(tokens).row(l), params.pos.row(l));
        }
    }

    struct ConstHook(f64);

    impl TokenHook for ConstHook {
        fn apply(&mut self, tape: &mut Tape, _: usize, normed: Var) -> Result<Option<Var>> {
            let shape = tape.value(normed).shape().to_vec();
            Ok(Some(tape.constant(Tensor::filled(shape, self.0))))
        }
    }

    #[test]
    fn hook_contributions_are_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = small();
        cfg.depth = 1;
        let params = BackboneParams::init(cfg.clone(), &mut rng).unwrap();
        let img = random_tensor(&mut rng, &[64]);
        let patches = patchify(&cfg, img.data()).unwrap();
        let block_out = |hook: &mut dyn TokenHook| {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, false);
            let p = tape.constant(Tensor::new([4, 16], patches.clone()).unwrap());
            let x = patch_embed(&mut tape, &vars, p, 1).unwrap();
            let y = block_forward(&mut tape, &cfg, &vars.blocks[0], x, 1, 0, hook).unwrap();
            tape.value(y).clone()
        };
        let plain = block_out(&mut NoHook);
        assert_eq!(block_out(&mut ConstHook(0.0)), plain);
        let shifted = block_out(&mut ConstHook(0.25));
        for (a, b) in shifted.data().iter().zip(plain.data()) {
            assert!((a - b - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_forward_matches_single_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = BackboneParams::init(small(), &mut rng).unwrap();
        let a = random_tensor(&mut rng, &[64]).into_data();
        let b = random_tensor(&mut rng, &[64]).into_data();
        let both = run(&params, &[a.clone(), b.clone()], &mut NoHook);
        let sa = run(&params, &[a], &mut NoHook);
        let sb = run(&params, &[b], &mut NoHook);
        assert!(Tensor::new([5, 8], both.data()[..40].to_vec()).unwrap().max_abs_diff(&sa) < 1e-12);
        assert!(Tensor::new([5, 8], both.data()[40..].to_vec()).unwrap().max_abs_diff(&sb) < 1e-12);
        assert_eq!(run(&params, &[random_tensor(&mut ChaCha8Rng::seed_from_u64(9), &[64]).into_data()], &mut NoHook).shape(), &[5, 8]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = BackboneParams::init(small(), &mut rng).unwrap();
        params.frozen = true;
        let back = BackboneParams::from_checkpoint(&params.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn token_batch_split() {
        let t = Tensor::new([6, 2], (0..12).map(f64::from).collect()).unwrap();
        let parts = TokenBatch::split(&t, 3).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[1].class_token(), &[6.0, 7.0]);
        assert_eq!(parts[1].patch_token(1), &[10.0, 11.0]);
        assert_eq!(parts[0].patch_count(), 2);
        assert_eq!(class_rows(2, 3), vec![0, 3]);
        assert_eq!(patch_rows(2, 3), vec![1, 2, 4, 5]);
    }
}
