//! Checkpoint directories: `config` (key=value text), `weights/` with one
//! tensor snapshot per named parameter plus `sheet`, and `disabled` with
//! one prototype id per line.

use std::fs;
use std::path::Path;

use super::{ConvLayer, ModelConfig, ProtoModel, ScoringSheet};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::numerics::{snapshot, Tensor};

const SHEET: &str = "sheet";

fn weight_path(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join("weights").join(format!("{name}.ptns"))
}

pub fn save_checkpoint(model: &ProtoModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("weights")).map_err(|e| Error::io(dir, e))?;
    let write = |path: std::path::PathBuf, bytes: &[u8]| {
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))
    };
    write(dir.join("config"), model.config().to_kv().to_text().as_bytes())?;
    for (name, t) in model.named_params() {
        write(weight_path(dir, &name), &snapshot::encode(t))?;
    }
    write(weight_path(dir, SHEET), &snapshot::encode(model.sheet().raw()))?;
    let disabled: String = model
        .sheet()
        .disabled()
        .iter()
        .map(|i| format!("{i}\n"))
        .collect();
    write(dir.join("disabled"), disabled.as_bytes())
}

fn read_tensor(dir: &Path, name: &str, shape: &[usize]) -> Result<Tensor> {
    let path = weight_path(dir, name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let t = snapshot::decode(&bytes).map_err(|e| Error::Format {
        what: "tensor snapshot",
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if t.shape() != shape {
        return Err(Error::Format {
            what: "checkpoint weight",
            path,
            detail: format!("shape {:?}, config implies {shape:?}", t.shape()),
        });
    }
    Ok(t)
}

pub fn load_checkpoint(dir: &Path) -> Result<ProtoModel> {
    let cfg_path = dir.join("config");
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let config = ModelConfig::from_kv(&KvMap::parse(&text)?)?;
    // a freshly built model supplies the expected names and shapes
    let template = ProtoModel::new(config.clone(), 0)?;
    let (tb, th) = template.layers();
    let mut backbone = Vec::with_capacity(tb.len());
    for (i, l) in tb.iter().enumerate() {
        backbone.push(ConvLayer {
            kernel: read_tensor(dir, &format!("stage{i}.kernel"), l.kernel.shape())?.with_grad(),
            bias: read_tensor(dir, &format!("stage{i}.bias"), l.bias.shape())?.with_grad(),
            stride: l.stride,
            padding: l.padding,
        });
    }
    let head = ConvLayer {
        kernel: read_tensor(dir, "head.kernel", th.kernel.shape())?.with_grad(),
        bias: read_tensor(dir, "head.bias", th.bias.shape())?.with_grad(),
        stride: th.stride,
        padding: th.padding,
    };
    let weights = read_tensor(
        dir,
        SHEET,
        &[config.num_prototypes, config.num_classes],
    )?;
    let mut sheet = ScoringSheet::from_weights(weights, config.relevance_epsilon)?;
    let dis_path = dir.join("disabled");
    let dis_text = fs::read_to_string(&dis_path).map_err(|e| Error::io(&dis_path, e))?;
    let ids = dis_text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<usize>().map_err(|e| Error::Format {
                what: "disabled list",
                path: dis_path.clone(),
                detail: format!("{l:?}: {e}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    sheet.set_disabled(ids)?;
    Ok(ProtoModel::from_parts(config, backbone, head, sheet))
}
