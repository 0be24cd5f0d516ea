//! Checkpoint directory: one `ALTS` container per weight tensor plus a
//! `model.meta` key=value file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Architecture, ConvParams, SegModel};
use crate::container::{self, Metadata, Tensor, TensorData};
use crate::error::{Error, Result};

pub const MODEL_META: &str = "model.meta";

fn weight_file(i: usize) -> String {
    format!("conv{i}.weight.alts")
}

fn bias_file(i: usize) -> String {
    format!("conv{i}.bias.alts")
}

/// Writes `model` (rounded to f32) and `extra` metadata under `dir`.
pub fn save_checkpoint(model: &SegModel, dir: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    for (i, c) in model.convs.iter().enumerate() {
        let w = Tensor::f32(
            vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
            c.weight.iter().map(|&v| v as f32).collect(),
        )?;
        let b = Tensor::f32(vec![c.out_channels], c.bias.iter().map(|&v| v as f32).collect())?;
        container::write_container(&dir.join(weight_file(i)), &w, &Metadata::new())?;
        container::write_container(&dir.join(bias_file(i)), &b, &Metadata::new())?;
    }
    let mut meta = extra.clone();
    meta.insert("arch".into(), model.arch.to_string());
    meta.insert("classes".into(), model.classes().to_string());
    meta.insert("convs".into(), model.convs.len().to_string());
    let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let path = dir.join(MODEL_META);
    container::write_atomic(&path, text.as_bytes()).map_err(|e| Error::file(&path, e))?;
    Ok(())
}

fn read_f32(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let (t, _) = container::read_container(path)
        .map_err(|e| Error::from(e).context(path.display().to_string()))?;
    let (dims, data) = t.into_parts();
    match data {
        TensorData::F32(v) => Ok((dims, v.into_iter().map(f64::from).collect())),
        TensorData::U8(_) => Err(Error::InvalidArchitecture(format!(
            "{} holds u8 data",
            path.display()
        ))),
    }
}

/// Loads a checkpoint written by [`save_checkpoint`]; returns the model and
/// the full `model.meta` map.
pub fn load_checkpoint(dir: &Path) -> Result<(SegModel, BTreeMap<String, String>)> {
    let path = dir.join(MODEL_META);
    let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    let meta: BTreeMap<String, String> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let arch: Architecture = meta
        .get("arch")
        .ok_or_else(|| Error::InvalidArchitecture("model.meta lacks `arch`".into()))?
        .parse()?;
    let n_convs = arch
        .layers()
        .iter()
        .filter(|l| matches!(l, super::Layer::Conv { .. }))
        .count();
    let mut convs = Vec::with_capacity(n_convs);
    for i in 0..n_convs {
        let (wd, weight) = read_f32(&dir.join(weight_file(i)))?;
        let (_, bias) = read_f32(&dir.join(bias_file(i)))?;
        if wd.len() != 4 || wd[2] != wd[3] {
            return Err(Error::InvalidArchitecture(format!("bad weight dims {wd:?}")));
        }
        convs.push(ConvParams {
            in_channels: wd[1],
            out_channels: wd[0],
            kernel: wd[2],
            weight,
            bias,
        });
    }
    Ok((SegModel::from_parts(arch, convs)?, meta))
}
