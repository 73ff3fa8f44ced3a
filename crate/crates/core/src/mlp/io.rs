//! `RSNM` model files.
//!
//! Layout (little-endian): magic `RSNM`, u32 format version, u32 length of a
//! UTF-8 `key=value` config block, the block itself, then for every layer
//! the `fan_out x fan_in` weights row-major followed by the bias, all f32.

use std::fs;
use std::path::Path;

use super::{Layer, MlpConfig, MlpError, MlpModel, Result};
use crate::taxonomy::WeightScheme;

pub const MODEL_MAGIC: [u8; 4] = *b"RSNM";
pub const MODEL_VERSION: u32 = 1;

fn config_text(c: &MlpConfig) -> String {
    let hidden = c.hidden_layers.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
    let threshold = c.stop_loss_threshold.map_or("none".to_string(), |t| t.to_string());
    let patience = c.patience.map_or("none".to_string(), |p| p.to_string());
    format!(
        "input_dim={}\nhidden_layers={}\nnum_classes={}\ndropout_rate={}\ndropout_after_layer={}\n\
         learning_rate={}\nbatch_size={}\nmax_epochs={}\nstop_loss_threshold={}\npatience={}\n\
         weight_scheme={}\ninit_gain={}\nseed={}\ninit=he_normal\n",
        c.input_dim,
        hidden,
        c.num_classes,
        c.dropout_rate,
        c.dropout_after_layer,
        c.learning_rate,
        c.batch_size,
        c.max_epochs,
        threshold,
        patience,
        c.weight_scheme,
        c.init_gain,
        c.seed,
    )
}

fn parse_config(text: &str) -> Result<MlpConfig> {
    let bad = |m: String| MlpError::ShapeMismatch(format!("config block: {m}"));
    let mut c = MlpConfig::full_size(1, 1);
    let mut seen = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("line {line:?}")))?;
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("{key}={v}")));
        let int = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("{key}={v}")));
        let opt = |v: &str| -> Result<Option<f64>> { if v == "none" { Ok(None) } else { num(v).map(Some) } };
        match key {
            "input_dim" => c.input_dim = int(value)? as usize,
            "hidden_layers" => {
                c.hidden_layers = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| int(s).map(|w| w as usize))
                    .collect::<Result<_>>()?
            }
            "num_classes" => c.num_classes = int(value)? as usize,
            "dropout_rate" => c.dropout_rate = num(value)?,
            "dropout_after_layer" => c.dropout_after_layer = int(value)? as usize,
            "learning_rate" => c.learning_rate = num(value)?,
            "batch_size" => c.batch_size = int(value)? as usize,
            "max_epochs" => c.max_epochs = int(value)? as usize,
            "stop_loss_threshold" => c.stop_loss_threshold = opt(value)?,
            "patience" => c.patience = opt(value)?.map(|p| p as usize),
            "weight_scheme" => c.weight_scheme = value.parse::<WeightScheme>().map_err(bad)?,
            "init_gain" => c.init_gain = num(value)?,
            "seed" => c.seed = int(value)?,
            "init" if value == "he_normal" => {}
            _ => return Err(bad(format!("unknown entry {line:?}"))),
        }
        seen += 1;
    }
    if seen < 14 {
        return Err(bad(format!("only {seen} entries")));
    }
    c.validate().map_err(|e| bad(e.to_string()))?;
    Ok(c)
}

pub fn model_to_bytes(m: &MlpModel) -> Vec<u8> {
    let text = config_text(&m.config);
    let mut out = Vec::with_capacity(12 + text.len() + 4 * m.param_count());
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for layer in &m.layers {
        for v in layer.weights.iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(MlpError::TruncatedFile)?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn floats(raw: &[u8]) -> Vec<f32> {
    raw.chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect()
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<MlpModel> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != MODEL_MAGIC {
        return Err(MlpError::BadMagic);
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(MlpError::VersionMismatch(version));
    }
    let len = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
    let text = std::str::from_utf8(take(bytes, &mut pos, len)?)
        .map_err(|e| MlpError::ShapeMismatch(format!("config block is not UTF-8: {e}")))?;
    let config = parse_config(text)?;
    let layers = config
        .widths()
        .windows(2)
        .map(|p| {
            let (fan_in, fan_out) = (p[0], p[1]);
            let weights = floats(take(bytes, &mut pos, 4 * fan_in * fan_out)?);
            let bias = floats(take(bytes, &mut pos, 4 * fan_out)?);
            Ok(Layer {
                fan_in,
                fan_out,
                weights,
                bias,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if pos != bytes.len() {
        return Err(MlpError::ShapeMismatch(format!(
            "{} bytes beyond the parameters the config describes",
            bytes.len() - pos
        )));
    }
    Ok(MlpModel { config, layers })
}

pub fn save_model(m: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(m))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpModel> {
    model_from_bytes(&fs::read(path)?)
}
