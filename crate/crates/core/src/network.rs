//! The desk-scale heatmap network: an anti-aliased front end bringing the
//! image to quarter resolution, an hourglass encoder-decoder below it with a
//! multi-head-attention bottleneck, spectral filtering after each
//! upsample+concat, and a 1x1 head emitting per-landmark logits at
//! input/4. The global-average-pooled bottleneck map doubles as the feature
//! vector for the correlation loss.
//!
//! Layout (defaults, 64 px input):
//!   blurpool, stem conv, blurpool   64 -> 32 -> 16  (= heatmap resolution)
//!   depth x [RB -> conv+blurpool]   16 -> 8 -> 4
//!   tokens + position embeddings -> MHA -> MLP (residuals)
//!   depth x [bilinear up -> concat skip -> spectral filter -> RB]  4 -> 16
//!   1x1 conv -> K logit maps at 16x16

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netops::{
    bilinear_upsample, blurpool2d, conv2d, ff_parser, mha, AttentionParams, BlurKernel, ConvParams,
    SpectralFilter,
};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Landmark count (output channels of the head).
    pub landmarks: usize,
    pub base_channels: usize,
    /// Downsampling stages of the hourglass below heatmap resolution.
    pub hourglass_depth: usize,
    pub attention_heads: usize,
    /// Bottleneck channel count; also the pooled feature width.
    pub feature_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_h: 64,
            input_w: 64,
            landmarks: 12,
            base_channels: 16,
            hourglass_depth: 2,
            attention_heads: 2,
            feature_dim: 32,
        }
    }
}

impl NetworkConfig {
    pub fn heatmap_h(&self) -> usize {
        self.input_h / 4
    }

    pub fn heatmap_w(&self) -> usize {
        self.input_w / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_h % 4 != 0 || self.input_w % 4 != 0 {
            return Err(Error::Config {
                path: "network.input".into(),
                msg: format!("input dims {}x{} must be divisible by 4", self.input_h, self.input_w),
            });
        }
        let pow = 1usize << self.hourglass_depth;
        if self.heatmap_h() % pow != 0 || self.heatmap_w() % pow != 0 {
            return Err(Error::Config {
                path: "network.hourglass_depth".into(),
                msg: format!(
                    "heatmap dims {}x{} must be divisible by 2^depth = {pow}",
                    self.heatmap_h(),
                    self.heatmap_w()
                ),
            });
        }
        if self.feature_dim % self.attention_heads != 0 {
            return Err(Error::Config {
                path: "network.attention_heads".into(),
                msg: format!(
                    "feature_dim {} must be divisible by head count {}",
                    self.feature_dim, self.attention_heads
                ),
            });
        }
        if self.landmarks == 0 || self.base_channels == 0 || self.feature_dim == 0 {
            return Err(Error::Config {
                path: "network".into(),
                msg: "landmarks, base_channels and feature_dim must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Named parameter store. Iteration order is creation order and is part of
/// the checkpoint/optimizer contract.
#[derive(Clone, Debug, Default)]
pub struct NetworkParams {
    entries: Vec<(String, Tensor)>,
}

impl NetworkParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => {
                slot.1 = t;
                Ok(())
            }
            None => Err(Error::contract("params", format!("unknown parameter {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every parameter as a leaf on `tape`, returning tracked handles
    /// under the same names. Both Siamese views must use one bound set so the
    /// branches share weights by identity.
    pub fn bind(&self, tape: &mut Tape) -> NetworkParams {
        NetworkParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), tape.leaf(t)))
                .collect(),
        }
    }

    fn req(&self, name: &str) -> &Tensor {
        self.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

fn he_conv(rng: &mut Rng, out_ch: usize, in_ch: usize, k: usize) -> Tensor {
    let std = (2.0 / (in_ch * k * k) as f64).sqrt();
    let n = out_ch * in_ch * k * k;
    Tensor::new(
        [out_ch, in_ch, k, k],
        (0..n).map(|_| std * rng.normal()).collect(),
    )
    .expect("sized")
}

fn he_linear(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let std = (2.0 / rows as f64).sqrt();
    Tensor::new([rows, cols], (0..rows * cols).map(|_| std * rng.normal()).collect()).expect("sized")
}

/// Channel count entering decoder stage `i` (deepest first) after the concat.
fn decoder_concat_channels(cfg: &NetworkConfig, i: usize) -> usize {
    let up = if i == 0 { cfg.feature_dim } else { cfg.base_channels };
    up + cfg.base_channels
}

/// He-initialized parameters, deterministic per seed.
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<NetworkParams> {
    cfg.validate()?;
    let mut rng = Rng::derive(seed, 0x1217);
    let base = cfg.base_channels;
    let d = cfg.feature_dim;
    let mut p = NetworkParams::new();

    p.insert("stem.w", he_conv(&mut rng, base, 3, 3));
    p.insert("stem.b", Tensor::zeros([base]));

    for i in 0..cfg.hourglass_depth {
        p.insert(format!("enc{i}.rb.c1.w"), he_conv(&mut rng, base, base, 3));
        p.insert(format!("enc{i}.rb.c1.b"), Tensor::zeros([base]));
        p.insert(format!("enc{i}.rb.c2.w"), he_conv(&mut rng, base, base, 3));
        p.insert(format!("enc{i}.rb.c2.b"), Tensor::zeros([base]));
        let out = if i == cfg.hourglass_depth - 1 { d } else { base };
        p.insert(format!("enc{i}.cbp.w"), he_conv(&mut rng, out, base, 3));
        p.insert(format!("enc{i}.cbp.b"), Tensor::zeros([out]));
    }

    let n = cfg.heatmap_h() >> cfg.hourglass_depth;
    let m = cfg.heatmap_w() >> cfg.hourglass_depth;
    let tokens = n * m;
    p.insert(
        "bott.pos",
        Tensor::new([tokens, d], (0..tokens * d).map(|_| 0.02 * rng.normal()).collect())
            .expect("sized"),
    );
    for name in ["wq", "wk", "wv", "wo"] {
        p.insert(format!("bott.mha.{name}"), he_linear(&mut rng, d, d));
    }
    for name in ["bq", "bk", "bv", "bo"] {
        p.insert(format!("bott.mha.{name}"), Tensor::zeros([d]));
    }
    p.insert("bott.mlp.w1", he_linear(&mut rng, d, 2 * d));
    p.insert("bott.mlp.b1", Tensor::zeros([2 * d]));
    p.insert("bott.mlp.w2", he_linear(&mut rng, 2 * d, d));
    p.insert("bott.mlp.b2", Tensor::zeros([d]));

    for i in 0..cfg.hourglass_depth {
        let cin = decoder_concat_channels(cfg, i);
        let level = cfg.hourglass_depth - 1 - i; // spatial level of this stage's output
        let h = cfg.heatmap_h() >> level;
        let w = cfg.heatmap_w() >> level;
        p.insert(
            format!("dec{i}.ffp.w"),
            SpectralFilter::identity(cin, h, w).weights,
        );
        p.insert(format!("dec{i}.rb.c1.w"), he_conv(&mut rng, base, cin, 3));
        p.insert(format!("dec{i}.rb.c1.b"), Tensor::zeros([base]));
        p.insert(format!("dec{i}.rb.c2.w"), he_conv(&mut rng, base, base, 3));
        p.insert(format!("dec{i}.rb.c2.b"), Tensor::zeros([base]));
        p.insert(format!("dec{i}.rb.proj.w"), he_conv(&mut rng, base, cin, 1));
        p.insert(format!("dec{i}.rb.proj.b"), Tensor::zeros([base]));
    }

    p.insert("head.w", he_conv(&mut rng, cfg.landmarks, base, 1));
    p.insert("head.b", Tensor::zeros([cfg.landmarks]));
    Ok(p)
}

fn conv(tape: &mut Tape, x: &Tensor, w: &Tensor, b: &Tensor, padding: usize) -> Result<Tensor> {
    let p = ConvParams::new(w.clone(), b.clone(), 1, padding)?;
    conv2d(tape, x, &p)
}

/// Two 3x3 convs with an identity (or 1x1-projected) skip.
fn residual_block(
    tape: &mut Tape,
    x: &Tensor,
    p: &NetworkParams,
    prefix: &str,
    projected: bool,
) -> Result<Tensor> {
    let y = conv(tape, x, p.req(&format!("{prefix}.c1.w")), p.req(&format!("{prefix}.c1.b")), 1)?;
    let y = tape.relu(&y);
    let y = conv(tape, &y, p.req(&format!("{prefix}.c2.w")), p.req(&format!("{prefix}.c2.b")), 1)?;
    let skip = if projected {
        conv(tape, x, p.req(&format!("{prefix}.proj.w")), p.req(&format!("{prefix}.proj.b")), 0)?
    } else {
        x.clone()
    };
    let s = tape.add(&y, &skip)?;
    Ok(tape.relu(&s))
}

/// Forward pass: heatmap logits at input/4 and the pooled bottleneck features.
pub fn forward(
    tape: &mut Tape,
    img: &Tensor,
    params: &NetworkParams,
    cfg: &NetworkConfig,
) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = match *img.shape() {
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(Error::shapes("forward", "rank-4 image", format!("{:?}", img.shape()))),
    };
    if c != 3 || h != cfg.input_h || w != cfg.input_w {
        return Err(Error::shapes(
            "forward",
            format!("[B, 3, {}, {}]", cfg.input_h, cfg.input_w),
            format!("{:?}", img.shape()),
        ));
    }
    let blur = BlurKernel::default();

    // front end: anti-aliased drop to input/4, stem conv at half resolution
    let x = blurpool2d(tape, img, &blur, 2)?;
    let x = conv(tape, &x, params.req("stem.w"), params.req("stem.b"), 1)?;
    let x = tape.relu(&x);
    let mut x = blurpool2d(tape, &x, &blur, 2)?;

    // hourglass encoder below heatmap resolution
    let mut skips = Vec::with_capacity(cfg.hourglass_depth);
    for i in 0..cfg.hourglass_depth {
        let r = residual_block(tape, &x, params, &format!("enc{i}.rb"), false)?;
        skips.push(r.clone());
        let y = conv(tape, &r, params.req(&format!("enc{i}.cbp.w")), params.req(&format!("enc{i}.cbp.b")), 1)?;
        let y = tape.relu(&y);
        x = blurpool2d(tape, &y, &blur, 2)?;
    }

    // attention bottleneck over spatial tokens
    let (bn, bm) = (x.shape()[2], x.shape()[3]);
    let d = cfg.feature_dim;
    let tokens = tape.nchw_to_tokens(&x)?;
    let tokens = tape.add_rows(&tokens, params.req("bott.pos"))?;
    let attn = {
        let p = AttentionParams::new(
            params.req("bott.mha.wq").clone(),
            params.req("bott.mha.wk").clone(),
            params.req("bott.mha.wv").clone(),
            params.req("bott.mha.wo").clone(),
            params.req("bott.mha.bq").clone(),
            params.req("bott.mha.bk").clone(),
            params.req("bott.mha.bv").clone(),
            params.req("bott.mha.bo").clone(),
            cfg.attention_heads,
        )?;
        mha(tape, &tokens, &p)?
    };
    let tokens = tape.add(&tokens, &attn)?;
    let mlp = {
        let flat = tokens.reshaped([b * bn * bm, d])?;
        let h1 = tape.linear(&flat, params.req("bott.mlp.w1"), params.req("bott.mlp.b1"))?;
        let h1 = tape.gelu(&h1);
        let h2 = tape.linear(&h1, params.req("bott.mlp.w2"), params.req("bott.mlp.b2"))?;
        h2.reshaped([b, bn * bm, d])?
    };
    let tokens = tape.add(&tokens, &mlp)?;
    let mut x = tape.tokens_to_nchw(&tokens, bn, bm)?;
    let pooled = tape.global_avg_pool(&x)?;

    // decoder: upsample, fuse the skip, filter in the spectral domain, refine
    for i in 0..cfg.hourglass_depth {
        let up = bilinear_upsample(tape, &x, 2)?;
        let skip = skips.pop().expect("one skip per stage");
        let cat = tape.concat_channels(&up, &skip)?;
        let filter = SpectralFilter {
            weights: params.req(&format!("dec{i}.ffp.w")).clone(),
        };
        let filtered = ff_parser(tape, &cat, &filter)?;
        x = residual_block(tape, &filtered, params, &format!("dec{i}.rb"), true)?;
    }

    let logits = conv(tape, &x, params.req("head.w"), params.req("head.b"), 0)?;
    Ok((logits, pooled))
}
