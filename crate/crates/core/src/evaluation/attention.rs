//! Class-token attention maps over image patches.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, IndexOp, D};
use serde::Serialize;

use crate::dataset::{encode_pgm, ViewImage};
use crate::encoders::VisionEncoder;
use crate::error::{Error, Result};

/// Patch-level attention of the class token, head-averaged and min-max
/// normalized, plus its nearest-neighbour upsampling to the image size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionHeatmap {
    pub layer: usize,
    pub grid_side: usize,
    /// Row-major `grid_side²` values in `[0, 1]`.
    pub grid: Vec<f64>,
    pub image_size: usize,
    /// Row-major `image_size²` values in `[0, 1]`.
    pub raster: Vec<f64>,
}

impl AttentionHeatmap {
    pub fn to_gray(&self) -> Vec<u8> {
        self.raster.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        encode_pgm(self.image_size, self.image_size, &self.to_gray())
    }

    /// Blue (low) to red (high).
    pub fn to_color(&self) -> Result<ViewImage> {
        let px = self
            .raster
            .iter()
            .flat_map(|&v| {
                let t = (v * 255.0).round() as u8;
                [t, 0, 255 - t]
            })
            .collect();
        ViewImage::new(self.image_size, self.image_size, px)
    }
}

/// Attention map of `encoder` on `view` at `layer` (default: last block).
pub fn extract_attention(encoder: &VisionEncoder, view: &ViewImage, layer: Option<usize>) -> Result<AttentionHeatmap> {
    let n_layers = encoder.config().n_layers;
    let layer = layer.unwrap_or(n_layers - 1);
    if layer >= n_layers {
        return Err(Error::Argument(format!(
            "layer {layer} out of range for an encoder with {n_layers} blocks"
        )));
    }
    let (_, trace) = encoder.forward_patches(&encoder.patchify(&[view])?)?;
    // (heads, queries, keys) → class-token query over patch keys, mean over heads
    let w = trace.layers[layer].i(0)?.to_dtype(DType::F64)?;
    let cls = w.i((.., 0, 1..))?.mean(D::Minus2)?.to_vec1::<f64>()?;
    let (lo, hi) = cls.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let grid: Vec<f64> = if hi > lo {
        cls.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; cls.len()]
    };
    let side = encoder.grid_side();
    let size = encoder.image_size();
    let patch = encoder.patch_size();
    let raster = (0..size * size)
        .map(|i| grid[(i / size / patch) * side + (i % size) / patch])
        .collect();
    Ok(AttentionHeatmap {
        layer,
        grid_side: side,
        grid,
        image_size: size,
        raster,
    })
}

/// Maps with adapters active and with adapters zeroed, for one view.
pub fn attention_pair(
    domain: &VisionEncoder,
    view: &ViewImage,
    layer: Option<usize>,
) -> Result<(AttentionHeatmap, AttentionHeatmap)> {
    if domain.adapters().is_none() {
        return Err(Error::State(
            "attention comparison needs an adapter-bearing encoder".into(),
        ));
    }
    let with = extract_attention(domain, view, layer)?;
    let without = extract_attention(&domain.with_zeroed_adapters()?, view, layer)?;
    Ok((with, without))
}

/// Writes `<object>_<view>_<layer>_<tag>.pgm` and the colorized `.ppm`;
/// returns both paths.
pub fn write_heatmap(
    map: &AttentionHeatmap,
    dir: &Path,
    object_id: &str,
    view: usize,
    tag: &str,
) -> Result<[PathBuf; 2]> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = format!("{object_id}_{view}_{}_{tag}", map.layer);
    let pgm = dir.join(format!("{stem}.pgm"));
    let ppm = dir.join(format!("{stem}.ppm"));
    fs::write(&pgm, map.to_pgm()).map_err(|e| Error::io(&pgm, e))?;
    map.to_color()?.write_ppm(&ppm)?;
    Ok([pgm, ppm])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use candle_core::{Device, Tensor};

    fn encoders() -> (VisionEncoder, VisionEncoder) {
        let v = VisionEncoder::new(EncoderConfig::desk_vision(32), "vision", 1, DType::F32).unwrap();
        let d = v.clone_as_domain_encoder(4, 4.0, 2).unwrap();
        for layer in &d.adapters().unwrap().layers {
            let b = Tensor::randn(0f32, 0.5, (64, 4), &Device::Cpu).unwrap();
            layer.q.b.set(&b).unwrap();
            layer.k.b.set(&b).unwrap();
        }
        (v, d)
    }

    fn view() -> ViewImage {
        let mut img = ViewImage::filled(32, 32, [10, 20, 30]).unwrap();
        for y in 4..14 {
            for x in 8..20 {
                img.put(x, y, [250, 40, 40]);
            }
        }
        img
    }

    #[test]
    fn grid_shape_and_range() {
        let (_, d) = encoders();
        let m = extract_attention(&d, &view(), None).unwrap();
        assert_eq!(m.grid.len(), 16);
        assert_eq!(m.layer, 3);
        assert_eq!(m.raster.len(), 32 * 32);
        assert!(m.grid.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(m.grid.iter().cloned().fold(0.0, f64::max), 1.0);
        assert!(matches!(
            extract_attention(&d, &view(), Some(4)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zeroed_adapters_match_frozen_source() {
        let (v, d) = encoders();
        let (with, without) = attention_pair(&d, &view(), Some(2)).unwrap();
        let frozen = extract_attention(&v, &view(), Some(2)).unwrap();
        assert_eq!(without, frozen);
        assert_ne!(with, without);
    }

    #[test]
    fn files_are_named_by_object_view_layer() {
        let (_, d) = encoders();
        let dir = tempfile::tempdir().unwrap();
        let m = extract_attention(&d, &view(), None).unwrap();
        let [pgm, ppm] = write_heatmap(&m, dir.path(), "obj0001", 2, "with").unwrap();
        assert!(pgm.ends_with("obj0001_2_3_with.pgm"));
        assert!(ppm.ends_with("obj0001_2_3_with.ppm"));
        let (w, h, px) = crate::dataset::decode_pgm(&fs::read(pgm).unwrap()).unwrap();
        assert_eq!((w, h, px.len()), (32, 32, 1024));
    }
}
