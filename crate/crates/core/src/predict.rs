//! Prediction from image files, with optional per-layer masks.

use std::path::{Path, PathBuf};

use crate::episodes::io::{image_to_tensor, read_mask_file, read_rgb};
use crate::error::{config_err, Error, Result};
use crate::evaluation::kshot_merge;
use crate::mask::BinaryMask;
use crate::model::TbtModel;
use crate::ops;
use crate::ttl::Mode;

/// Layers with an intermediate prediction, in the order they are computed.
pub const INTERMEDIATE_LAYERS: [usize; 3] = [4, 3, 2];

/// Binary masks at the query's native resolution.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub final_mask: BinaryMask,
    /// `(layer, mask)` for layers 4, 3, 2.
    pub intermediates: Vec<(usize, BinaryMask)>,
}

/// Segment `query` given `(image, mask)` support files. Each level's K
/// predictions are merged the same way as the final one.
pub fn predict_files(
    model: &TbtModel,
    image_size: usize,
    query: &Path,
    supports: &[(PathBuf, PathBuf)],
) -> Result<Prediction> {
    if supports.is_empty() {
        return Err(config_err!("at least one support image and mask are required"));
    }
    let query_img = read_rgb(query)?;
    let (w, h) = (query_img.width() as usize, query_img.height() as usize);
    let q = model.pyramid(&image_to_tensor(&query_img, image_size)?)?;
    let mut finals = Vec::with_capacity(supports.len());
    let mut levels: Vec<Vec<_>> = vec![Vec::new(); INTERMEDIATE_LAYERS.len()];
    for (img_path, mask_path) in supports {
        let image = image_to_tensor(&read_rgb(img_path)?, image_size)?;
        let mask = read_mask_file(mask_path)?.resize_nearest(image_size, image_size);
        let s = model.pyramid(&image)?;
        let out = model.net().forward(&q, &s, &mask, &mut Mode::Eval)?;
        finals.push(ops::resize_bilinear(&out.final_logits, h, w)?);
        for (slot, layer) in levels.iter_mut().zip(INTERMEDIATE_LAYERS) {
            let logits = &out.level(layer).output.prediction.logits;
            slot.push(ops::resize_bilinear(logits, h, w)?);
        }
    }
    let intermediates = INTERMEDIATE_LAYERS
        .iter()
        .zip(&levels)
        .map(|(&layer, maps)| Ok((layer, kshot_merge(maps)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prediction {
        final_mask: kshot_merge(&finals)?,
        intermediates,
    })
}

/// Write `<stem>.png` and, when requested, `<stem>_layer{4,3,2}.png`.
pub fn write_prediction(
    prediction: &Prediction,
    dir: &Path,
    stem: &str,
    intermediates: bool,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = vec![dir.join(format!("{stem}.png"))];
    crate::episodes::io::write_mask_png(&written[0], &prediction.final_mask)?;
    if intermediates {
        for (layer, mask) in &prediction.intermediates {
            let p = dir.join(format!("{stem}_layer{layer}.png"));
            crate::episodes::io::write_mask_png(&p, mask)?;
            written.push(p);
        }
    }
    Ok(written)
}
