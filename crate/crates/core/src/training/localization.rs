use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alignment::{concept_heatmaps, render_saliency};
use crate::dataset::{Dataset, Region};
use crate::encoder::Model;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    /// (example, active concept) pairs with a recorded region.
    pub pairs: usize,
    /// Pairs whose saliency argmax falls inside the region.
    pub hits: usize,
    pub rate: f64,
    /// Expected rate for a uniformly random argmax: mean region area over
    /// image area.
    pub chance: f64,
}

/// How often the saliency peak of an active concept lands inside the pixel
/// region that realises it.
pub fn saliency_localization(
    model: &Model,
    dataset: &Dataset,
    regions: &BTreeMap<String, Vec<Option<Region>>>,
) -> Result<LocalizationReport> {
    let [_, h, w] = model.config.input_shape;
    let (mut pairs, mut hits, mut area) = (0usize, 0usize, 0.0f64);
    for ex in &dataset.examples {
        let Some(truth) = ex.concepts.as_deref() else {
            continue;
        };
        let ex_regions = regions
            .get(&ex.id)
            .ok_or_else(|| Error::UnknownExample(ex.id.clone()))?;
        let out = model.forward(&ex.input)?;
        let stack = concept_heatmaps(&out.feature_map, &model.heatmap_vectors(&out))?;
        for (i, (&c, region)) in truth.iter().zip(ex_regions).enumerate() {
            let (1, Some(region)) = (c, region) else {
                continue;
            };
            let sal = render_saliency(&stack, i, h, w)?;
            let (y, x) = sal.argmax();
            pairs += 1;
            hits += usize::from(region.contains(x, y));
            area += region.area() as f64 / (h * w) as f64;
        }
    }
    let n = pairs.max(1) as f64;
    Ok(LocalizationReport {
        pairs,
        hits,
        rate: hits as f64 / n,
        chance: area / n,
    })
}
