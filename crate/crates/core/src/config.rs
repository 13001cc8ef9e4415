//! Run-config files: UTF-8 `key=value` lines mirroring `TrainConfig`, with
//! `#` comments, unknown keys rejected, and errors carrying line numbers.

use crate::error::{CdmError, Result};
use crate::pipeline::{ConditionSource, TrainConfig};

/// Fixed-order serialization so identical configs produce identical bytes.
pub fn serialize_train_config(c: &TrainConfig) -> String {
    let source = match c.condition_source {
        ConditionSource::Encoder => "encoder",
        ConditionSource::MdnSample => "mdn",
    };
    format!(
        "image_size={}\n\
         latent_dim={}\n\
         t_max={}\n\
         beta_start={}\n\
         beta_end={}\n\
         n_sampling={}\n\
         mask_ratio={}\n\
         mrm_epochs={}\n\
         mrm_lr={}\n\
         mrm_base_width={}\n\
         mrm_n_stages={}\n\
         mdn_epochs={}\n\
         mdn_lr={}\n\
         mdn_blocks={}\n\
         cunet_epochs={}\n\
         cunet_lr={}\n\
         cunet_base_width={}\n\
         cunet_n_scales={}\n\
         weight_decay={}\n\
         batch_size={}\n\
         seed={}\n\
         condition_source={}\n",
        c.image_size,
        c.latent_dim,
        c.t_max,
        c.beta_start,
        c.beta_end,
        c.n_sampling,
        c.mask_ratio,
        c.mrm_epochs,
        c.mrm_lr,
        c.mrm_base_width,
        c.mrm_n_stages,
        c.mdn_epochs,
        c.mdn_lr,
        c.mdn_blocks,
        c.cunet_epochs,
        c.cunet_lr,
        c.cunet_base_width,
        c.cunet_n_scales,
        c.weight_decay,
        c.batch_size,
        c.seed,
        source,
    )
}

fn config_err(line: usize, detail: impl Into<String>) -> CdmError {
    CdmError::Config {
        line,
        detail: detail.into(),
    }
}

/// Parse a config file; unspecified keys keep their defaults.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| config_err(line_no, format!("expected key=value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        macro_rules! parse {
            ($ty:ty) => {
                value
                    .parse::<$ty>()
                    .map_err(|e| config_err(line_no, format!("bad value for {key}: {e}")))?
            };
        }
        match key {
            "image_size" => c.image_size = parse!(usize),
            "latent_dim" => c.latent_dim = parse!(usize),
            "t_max" => c.t_max = parse!(usize),
            "beta_start" => c.beta_start = parse!(f64),
            "beta_end" => c.beta_end = parse!(f64),
            "n_sampling" => c.n_sampling = parse!(usize),
            "mask_ratio" => c.mask_ratio = parse!(f64),
            "mrm_epochs" => c.mrm_epochs = parse!(usize),
            "mrm_lr" => c.mrm_lr = parse!(f64),
            "mrm_base_width" => c.mrm_base_width = parse!(usize),
            "mrm_n_stages" => c.mrm_n_stages = parse!(usize),
            "mdn_epochs" => c.mdn_epochs = parse!(usize),
            "mdn_lr" => c.mdn_lr = parse!(f64),
            "mdn_blocks" => c.mdn_blocks = parse!(usize),
            "cunet_epochs" => c.cunet_epochs = parse!(usize),
            "cunet_lr" => c.cunet_lr = parse!(f64),
            "cunet_base_width" => c.cunet_base_width = parse!(usize),
            "cunet_n_scales" => c.cunet_n_scales = parse!(usize),
            "weight_decay" => c.weight_decay = parse!(f64),
            "batch_size" => c.batch_size = parse!(usize),
            "seed" => c.seed = parse!(u64),
            "condition_source" => {
                c.condition_source = match value {
                    "encoder" => ConditionSource::Encoder,
                    "mdn" => ConditionSource::MdnSample,
                    other => {
                        return Err(config_err(
                            line_no,
                            format!("condition_source must be encoder or mdn, got {other:?}"),
                        ))
                    }
                }
            }
            other => return Err(config_err(line_no, format!("unknown key {other:?}"))),
        }
    }
    Ok(c)
}
