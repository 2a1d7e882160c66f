//! Analytic multiply-accumulate counts for dataset-creation pipelines.
//!
//! A network is described as an ordered list of weighted operations. Only
//! multiplies inside convolutions, matrix products and attention are counted;
//! bias adds, normalizations and activations are excluded.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDesc {
    /// Output side is `floor((in + 2·pad − k) / stride) + 1`.
    Conv {
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        #[serde(default)]
        pad: usize,
        in_h: usize,
        in_w: usize,
    },
    Linear {
        in_dim: usize,
        out_dim: usize,
        #[serde(default = "one")]
        tokens: usize,
    },
    /// Multi-head self-attention including the four `dim×dim` projections.
    Attention { dim: usize, heads: usize, tokens: usize },
}

fn one() -> usize {
    1
}

fn one_u64() -> u64 {
    1
}

/// How the token-mixing products of self-attention are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionCounting {
    /// `QKᵀ` and `softmax(·)V` each cost `tokens²·dim`: `2·t²·d + 4·t·d²`.
    #[default]
    Full,
    /// A single `t²·d` term for both products: `t²·d + 4·t·d²`.
    SingleProduct,
}

impl LayerDesc {
    pub fn conv_same(in_c: usize, out_c: usize, k: usize, in_h: usize, in_w: usize) -> Self {
        LayerDesc::Conv {
            in_c,
            out_c,
            k,
            stride: 1,
            pad: (k - 1) / 2,
            in_h,
            in_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidArgument(msg));
        match *self {
            LayerDesc::Conv {
                in_c,
                out_c,
                k,
                stride,
                pad,
                in_h,
                in_w,
            } => {
                if [in_c, out_c, k, stride, in_h, in_w].contains(&0) {
                    return invalid(format!("conv dimensions must be positive: {self:?}"));
                }
                if in_h + 2 * pad < k || in_w + 2 * pad < k {
                    return invalid(format!("conv kernel exceeds padded input: {self:?}"));
                }
            }
            LayerDesc::Linear {
                in_dim,
                out_dim,
                tokens,
            } => {
                if [in_dim, out_dim, tokens].contains(&0) {
                    return invalid(format!("linear dimensions must be positive: {self:?}"));
                }
            }
            LayerDesc::Attention { dim, heads, tokens } => {
                if [dim, heads, tokens].contains(&0) || dim % heads != 0 {
                    return invalid(format!("attention needs positive dims and heads | dim: {self:?}"));
                }
            }
        }
        Ok(())
    }

    /// Spatial output `(h, w)` of a convolution.
    pub fn conv_output(&self) -> Option<(usize, usize)> {
        match *self {
            LayerDesc::Conv {
                k,
                stride,
                pad,
                in_h,
                in_w,
                ..
            } => Some(((in_h + 2 * pad - k) / stride + 1, (in_w + 2 * pad - k) / stride + 1)),
            _ => None,
        }
    }
}

pub fn macs_for_layer(d: &LayerDesc) -> Result<u128> {
    macs_for_layer_with(d, AttentionCounting::default())
}

pub fn macs_for_layer_with(d: &LayerDesc, attention: AttentionCounting) -> Result<u128> {
    d.validate()?;
    let m = match *d {
        LayerDesc::Conv { in_c, out_c, k, .. } => {
            let (oh, ow) = d.conv_output().expect("conv");
            oh as u128 * ow as u128 * out_c as u128 * in_c as u128 * (k * k) as u128
        }
        LayerDesc::Linear {
            in_dim,
            out_dim,
            tokens,
        } => tokens as u128 * in_dim as u128 * out_dim as u128,
        LayerDesc::Attention { dim, tokens, .. } => {
            let (t, dm) = (tokens as u128, dim as u128);
            let mixing = match attention {
                AttentionCounting::Full => 2 * t * t * dm,
                AttentionCounting::SingleProduct => t * t * dm,
            };
            mixing + 4 * t * dm * dm
        }
    };
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    #[serde(flatten)]
    pub layer: LayerDesc,
    #[serde(default = "one_u64", skip_serializing_if = "is_one")]
    pub repeat: u64,
}

fn is_one(v: &u64) -> bool {
    *v == 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCostConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
    pub layers: Vec<LayerEntry>,
}

impl NetworkCostConfig {
    pub fn from_layers(name: impl Into<String>, layers: impl IntoIterator<Item = LayerDesc>) -> Self {
        NetworkCostConfig {
            name: name.into(),
            note: String::new(),
            layers: layers.into_iter().map(|layer| LayerEntry { layer, repeat: 1 }).collect(),
        }
    }

    pub fn total_macs(&self, attention: AttentionCounting) -> Result<u128> {
        self.layers.iter().try_fold(0u128, |acc, e| {
            Ok(acc + e.repeat as u128 * macs_for_layer_with(&e.layer, attention)?)
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("network cost config", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_json(&text)
    }
}

/// Cost models for the networks involved in producing fake images.
#[derive(Debug, Clone)]
pub struct PipelineConfigs {
    pub encoder: NetworkCostConfig,
    pub decoder: NetworkCostConfig,
    pub unet: Option<NetworkCostConfig>,
    pub text_encoder: Option<NetworkCostConfig>,
}

impl PipelineConfigs {
    /// Bundled approximations of the latent-diffusion family at 512×512.
    pub fn reference() -> Self {
        let parse = |s: &str| NetworkCostConfig::from_json(s).expect("bundled config parses");
        PipelineConfigs {
            encoder: parse(include_str!("../configs/ldm/encoder.json")),
            decoder: parse(include_str!("../configs/ldm/decoder.json")),
            unet: Some(parse(include_str!("../configs/ldm/unet.json"))),
            text_encoder: Some(parse(include_str!("../configs/ldm/text_encoder.json"))),
        }
    }

    /// Reads `encoder.json`, `decoder.json` and, when present, `unet.json`
    /// and `text_encoder.json` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let required = |name: &str| {
            let p = dir.join(name);
            if !p.exists() {
                return Err(Error::NotFound(p.display().to_string()));
            }
            NetworkCostConfig::load(&p)
        };
        let optional = |name: &str| {
            let p = dir.join(name);
            p.exists().then(|| NetworkCostConfig::load(&p)).transpose()
        };
        Ok(PipelineConfigs {
            encoder: required("encoder.json")?,
            decoder: required("decoder.json")?,
            unet: optional("unet.json")?,
            text_encoder: optional("text_encoder.json")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Denoise,
    Reconstruct,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacReport {
    pub n_images: u64,
    pub steps: u64,
    pub attention_counting: AttentionCounting,
    /// Per-image cost of each network.
    pub components: BTreeMap<String, u128>,
    pub denoise_total: Option<u128>,
    pub reconstruct_total: Option<u128>,
    /// `denoise_total / reconstruct_total`, present when both were computed.
    pub ratio: Option<f64>,
    /// Text-encoder cost as a fraction of the `steps · unet` term.
    pub text_share_of_unet: Option<f64>,
}

/// Denoising pipeline: `n·(text + T·unet + dec)`. Reconstruction: `n·(enc + dec)`.
pub fn pipeline_macs(
    configs: &PipelineConfigs,
    steps: u64,
    n_images: u64,
    mode: PipelineMode,
    attention: AttentionCounting,
) -> Result<MacReport> {
    let enc = configs.encoder.total_macs(attention)?;
    let dec = configs.decoder.total_macs(attention)?;
    let mut components = BTreeMap::new();
    components.insert("encoder".to_string(), enc);
    components.insert("decoder".to_string(), dec);

    let n = n_images as u128;
    let mut report = MacReport {
        n_images,
        steps,
        attention_counting: attention,
        components,
        denoise_total: None,
        reconstruct_total: None,
        ratio: None,
        text_share_of_unet: None,
    };

    if matches!(mode, PipelineMode::Denoise | PipelineMode::Both) {
        let unet_cfg = configs
            .unet
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("denoise mode needs a U-Net cost config".into()))?;
        if steps == 0 {
            return Err(Error::InvalidArgument("denoise mode needs at least one step".into()));
        }
        let unet = unet_cfg.total_macs(attention)?;
        let text = match &configs.text_encoder {
            Some(t) => t.total_macs(attention)?,
            None => 0,
        };
        report.components.insert("unet".to_string(), unet);
        report.components.insert("text_encoder".to_string(), text);
        let unet_term = steps as u128 * unet;
        report.denoise_total = Some(n * (text + unet_term + dec));
        if unet_term > 0 {
            report.text_share_of_unet = Some(text as f64 / unet_term as f64);
        }
    }
    if matches!(mode, PipelineMode::Reconstruct | PipelineMode::Both) {
        report.reconstruct_total = Some(n * (enc + dec));
    }
    if let (Some(d), Some(r)) = (report.denoise_total, report.reconstruct_total) {
        if r > 0 {
            report.ratio = Some(d as f64 / r as f64);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        assert_eq!(macs_for_layer(&LayerDesc::conv_same(1, 1, 1, 8, 8)).unwrap(), 64);
        assert_eq!(macs_for_layer(&LayerDesc::conv_same(64, 64, 3, 56, 56)).unwrap(), 115_605_504);
        let lin = LayerDesc::Linear {
            in_dim: 512,
            out_dim: 512,
            tokens: 77,
        };
        assert_eq!(macs_for_layer(&lin).unwrap(), 20_185_088);
    }

    #[test]
    fn attention_conventions() {
        let a = LayerDesc::Attention {
            dim: 8,
            heads: 2,
            tokens: 5,
        };
        assert_eq!(macs_for_layer_with(&a, AttentionCounting::Full).unwrap(), 2 * 25 * 8 + 4 * 5 * 64);
        assert_eq!(macs_for_layer_with(&a, AttentionCounting::SingleProduct).unwrap(), 25 * 8 + 4 * 5 * 64);
    }

    #[test]
    fn invalid_layers_are_rejected() {
        assert!(macs_for_layer(&LayerDesc::conv_same(0, 1, 3, 8, 8)).is_err());
        let too_small = LayerDesc::Conv {
            in_c: 1,
            out_c: 1,
            k: 5,
            stride: 1,
            pad: 0,
            in_h: 3,
            in_w: 3,
        };
        assert!(macs_for_layer(&too_small).is_err());
        let heads = LayerDesc::Attention {
            dim: 10,
            heads: 3,
            tokens: 4,
        };
        assert!(macs_for_layer(&heads).is_err());
    }

    #[test]
    fn linear_in_images_and_steps() {
        let cfg = PipelineConfigs::reference();
        let at = AttentionCounting::Full;
        let one = pipeline_macs(&cfg, 50, 1, PipelineMode::Reconstruct, at).unwrap();
        let two = pipeline_macs(&cfg, 50, 2, PipelineMode::Reconstruct, at).unwrap();
        assert_eq!(two.reconstruct_total.unwrap(), 2 * one.reconstruct_total.unwrap());

        let n = 3;
        let t1 = pipeline_macs(&cfg, 1, n, PipelineMode::Denoise, at).unwrap();
        let t2 = pipeline_macs(&cfg, 2, n, PipelineMode::Denoise, at).unwrap();
        let unet = t1.components["unet"];
        assert_eq!(t2.denoise_total.unwrap() - t1.denoise_total.unwrap(), n as u128 * unet);
    }

    #[test]
    fn denoise_without_unet_fails() {
        let mut cfg = PipelineConfigs::reference();
        cfg.unet = None;
        assert!(pipeline_macs(&cfg, 50, 1, PipelineMode::Denoise, AttentionCounting::Full).is_err());
        assert!(pipeline_macs(&cfg, 50, 1, PipelineMode::Reconstruct, AttentionCounting::Full).is_ok());
    }

    #[test]
    fn reference_ratio_exceeds_ten() {
        let r = pipeline_macs(&PipelineConfigs::reference(), 50, 179_257, PipelineMode::Both, AttentionCounting::Full)
            .unwrap();
        assert!(r.ratio.unwrap() > 10.0);
        assert!(r.text_share_of_unet.unwrap() < 0.05);
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = PipelineConfigs::reference().unet.unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(NetworkCostConfig::from_json(&text).unwrap(), cfg);
    }
}
