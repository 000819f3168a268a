//! The full segmentation model: backbone, optional channel, output head.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig};
use crate::channel::{self, ChannelConfig, SenderOutput};
use crate::error::{Error, Result};
use crate::checkpoint;
use crate::grad::{Tensor, Var};
use crate::params::{ForwardPass, ParamStore};
use crate::synthdata::SegmentationSample;

/// File names inside a model directory.
pub const MODEL_CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// `channel: None` is the ablated baseline: a 1x1 conv on `x` then sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub channel: Option<ChannelConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if let Some(c) = &self.channel {
            c.validate()?;
        }
        Ok(())
    }
}

pub struct ModelOutput {
    pub x: Var,
    pub sender: Option<SenderOutput>,
    pub x_prime: Option<Var>,
    /// `[N, 1, H, W]` foreground probabilities.
    pub mask_prob: Var,
}

#[derive(Debug, Clone)]
pub struct SunetModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl SunetModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        backbone::init_params(&config.backbone, &mut params, rng)?;
        let cx = config.backbone.feature_channels;
        match &config.channel {
            Some(ch) => channel::init_params(ch, cx, config.backbone.input_size, &mut params, rng)?,
            None => {
                params.init_uniform(rng, "baseline.conv.weight", &[1, cx, 1, 1], cx)?;
                params.init_uniform(rng, "baseline.conv.bias", &[1], cx)?;
            }
        }
        Ok(Self { config, params })
    }

    /// Pairs a config with loaded parameters after checking that every
    /// parameter the config needs is present with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                None => return Err(Error::Config(format!("checkpoint lacks parameter {name}"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, config expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.params.contains(n)) {
            return Err(Error::Config(format!("checkpoint has unexpected parameter {extra}")));
        }
        Ok(Self { config, params })
    }

    /// Writes `config.json` and `model.ckpt` into `dir`, creating it.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MODEL_CONFIG_FILE);
        let text = serde_json::to_string_pretty(&self.config).expect("config serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))?;
        checkpoint::save(&self.params, &dir.join(CHECKPOINT_FILE))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: ModelConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let params = checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
        Self::from_params(config, params)
    }

    pub fn has_channel(&self) -> bool {
        self.config.channel.is_some()
    }

    /// Runs the model on `images` (`[N, in_channels, H, W]`) inside `pass`,
    /// which must have been created over `self.params`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        pass: &mut ForwardPass<'_>,
        images: Var,
        tau: f64,
        rng: Option<&mut R>,
    ) -> Result<ModelOutput> {
        let x = backbone::forward(pass, &self.config.backbone, images)?;
        match &self.config.channel {
            Some(ch) => {
                let sender = channel::sender_forward(pass, ch, x, tau, rng)?;
                let x_prime = channel::receiver_forward(pass, ch, &sender.symbols)?;
                let mask_prob = channel::fuse(pass, x, x_prime)?;
                Ok(ModelOutput {
                    x,
                    sender: Some(sender),
                    x_prime: Some(x_prime),
                    mask_prob,
                })
            }
            None => {
                let y = pass.conv(x, "baseline.conv", 0)?;
                let mask_prob = pass.tape.sigmoid(y)?;
                Ok(ModelOutput {
                    x,
                    sender: None,
                    x_prime: None,
                    mask_prob,
                })
            }
        }
    }
}

/// Stacks sample images into `[N, 1, H, W]`.
pub fn image_batch(samples: &[&SegmentationSample]) -> Result<Tensor> {
    let Some(first) = samples.first() else {
        return Err(Error::InvalidArgument("empty batch".into()));
    };
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::shape("batch", format!("{} is {}x{}, expected {h}x{w}", s.key(), s.height, s.width)));
        }
        data.extend_from_slice(&s.image);
    }
    Tensor::new([samples.len(), 1, h, w], data)
}

/// Stacks sample masks into `[N, 1, H, W]` of 0/1 values.
pub fn mask_batch(samples: &[&SegmentationSample]) -> Result<Tensor> {
    let Some(first) = samples.first() else {
        return Err(Error::InvalidArgument("empty batch".into()));
    };
    let (h, w) = (first.height, first.width);
    let data = samples.iter().flat_map(|s| s.mask.iter().map(|&m| m as f64)).collect();
    Tensor::new([samples.len(), 1, h, w], data)
}
