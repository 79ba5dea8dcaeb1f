use std::path::{Path, PathBuf};

use super::{gated_attention, GpsaLayer};
use crate::error::{Error, Result};
use crate::io::pgm::write_pgm;
use crate::tensor::{Element, Tensor};

/// Attention of one query pixel over the key grid, for one head.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub head: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major height×width weights, summing to 1.
    pub weights: Vec<f64>,
}

/// Per-head maps for the query at (`row`, `col`) of an L×D_in token matrix
/// on a `height`×`width` grid.
pub fn query_attention_maps<T: Element>(
    tokens: &Tensor<T>,
    layer: &GpsaLayer<T>,
    height: usize,
    width: usize,
    row: usize,
    col: usize,
) -> Result<Vec<AttentionMap>> {
    if row >= height || col >= width {
        return Err(Error::Usage(format!(
            "query ({row},{col}) outside {height}×{width} grid"
        )));
    }
    let pl = layer.positional_logits(height, width)?;
    let maps = gated_attention(tokens, layer, &pl)?;
    let l = height * width;
    let q = row * width + col;
    Ok(maps
        .iter()
        .enumerate()
        .map(|(head, m)| AttentionMap {
            head,
            height,
            width,
            weights: m.data()[q * l..(q + 1) * l].iter().map(|v| v.f64()).collect(),
        })
        .collect())
}

/// Writes one `attn_L{layer}_H{head}.pgm` per map into `dir`.
pub fn export_attention_maps(dir: &Path, layer_index: usize, maps: &[AttentionMap]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    maps.iter()
        .map(|m| {
            let path = dir.join(format!("attn_L{layer_index}_H{}.pgm", m.head));
            write_pgm(&path, m.width, m.height, &m.weights)?;
            Ok(path)
        })
        .collect()
}
