//! Miniature UNet producing the pre-sigmoid feature map `x`.
//!
//! Encoder levels are `conv3x3-BN-ReLU` twice followed by 2x2 max pooling;
//! the decoder upsamples by nearest neighbour, applies a 3x3 conv, and
//! concatenates the matching encoder features before two more conv blocks.
//! A final 1x1 conv maps to `feature_channels` without any activation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Var;
use crate::params::{ForwardPass, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub feature_channels: usize,
    /// `[height, width]`
    pub input_size: [usize; 2],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 8,
            depth: 3,
            feature_channels: 4,
            input_size: [32, 32],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.feature_channels == 0 {
            return Err(Error::Config("backbone channel counts must be at least 1".into()));
        }
        let f = 1usize << self.depth;
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be divisible by 2^depth = {f}"
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

fn init_block<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, cin: usize, cout: usize) -> Result<()> {
    for (i, c_in) in [(1, cin), (2, cout)] {
        store.init_uniform(rng, &format!("{prefix}.conv{i}.weight"), &[cout, c_in, 3, 3], c_in * 9)?;
        store.init_batch_norm(&format!("{prefix}.bn{i}"), cout)?;
    }
    Ok(())
}

pub fn init_params<R: Rng>(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let mut cin = cfg.in_channels;
    for d in 0..cfg.depth {
        init_block(store, rng, &format!("backbone.enc{d}"), cin, cfg.width(d))?;
        cin = cfg.width(d);
    }
    init_block(store, rng, "backbone.bottleneck", cin, cfg.width(cfg.depth))?;
    for d in (0..cfg.depth).rev() {
        let (wide, narrow) = (cfg.width(d + 1), cfg.width(d));
        store.init_uniform(rng, &format!("backbone.dec{d}.up.weight"), &[narrow, wide, 3, 3], wide * 9)?;
        store.init_uniform(rng, &format!("backbone.dec{d}.up.bias"), &[narrow], wide * 9)?;
        init_block(store, rng, &format!("backbone.dec{d}"), 2 * narrow, narrow)?;
    }
    let b = cfg.base_channels;
    store.init_uniform(rng, "backbone.out.weight", &[cfg.feature_channels, b, 1, 1], b)?;
    store.init_uniform(rng, "backbone.out.bias", &[cfg.feature_channels], b)
}

fn conv_block(pass: &mut ForwardPass<'_>, x: Var, prefix: &str) -> Result<Var> {
    let mut h = x;
    for i in 1..=2 {
        h = pass.conv(h, &format!("{prefix}.conv{i}"), 1)?;
        h = pass.batch_norm(h, &format!("{prefix}.bn{i}"))?;
        h = pass.tape.relu(h)?;
    }
    Ok(h)
}

/// `[N, in_channels, H, W] -> [N, feature_channels, H, W]`, pre-activation.
pub fn forward(pass: &mut ForwardPass<'_>, cfg: &BackboneConfig, image: Var) -> Result<Var> {
    let s = pass.tape.shape(image).to_vec();
    if s.len() != 4 || s[1] != cfg.in_channels {
        return Err(Error::shape(
            "backbone",
            format!("expected [N,{},H,W], got {:?}", cfg.in_channels, s),
        ));
    }
    let f = 1usize << cfg.depth;
    if s[2] % f != 0 || s[3] % f != 0 {
        return Err(Error::shape(
            "backbone",
            format!("spatial extents {}x{} not divisible by {}", s[2], s[3], f),
        ));
    }
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut h = image;
    for d in 0..cfg.depth {
        h = conv_block(pass, h, &format!("backbone.enc{d}"))?;
        skips.push(h);
        h = pass.tape.max_pool2d(h, 2)?;
    }
    h = conv_block(pass, h, "backbone.bottleneck")?;
    for d in (0..cfg.depth).rev() {
        h = pass.tape.upsample2d(h, 2)?;
        h = pass.conv(h, &format!("backbone.dec{d}.up"), 1)?;
        h = pass.tape.concat(&[skips[d], h], 1)?;
        h = conv_block(pass, h, &format!("backbone.dec{d}"))?;
    }
    pass.conv(h, "backbone.out", 0)
}
