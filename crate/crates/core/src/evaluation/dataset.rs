//! Loader for MVTec-style trees:
//!
//! ```text
//! <root>/<category>/test/good/*.png
//! <root>/<category>/test/<defect>/*.png
//! <root>/<category>/ground_truth/<defect>/<stem>_mask.png   (optional)
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CategoryNormalizer, EvalError};
use crate::imaging::{BBox, RasterImage};
use crate::trajectory::BinaryLabel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `<dataset>/<category>/<defect-or-good>/<file>`.
    pub id: String,
    pub dataset: String,
    pub path: PathBuf,
    pub category: String,
    #[serde(default = "default_view")]
    pub view: String,
    pub label: BinaryLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_box: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_type: Option<String>,
}

fn default_view() -> String {
    crate::priors::WILDCARD_VIEW.to_string()
}

#[derive(Clone, Debug, Default)]
pub struct LoadedDataset {
    pub name: String,
    pub samples: Vec<Sample>,
    pub warnings: Vec<String>,
}

fn sorted_entries(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    v.sort();
    Ok(v)
}

fn is_png(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Tightest box around the non-zero pixels of a mask, if any.
pub fn mask_to_bbox(mask: &RasterImage) -> Option<BBox> {
    let gray = mask.to_gray();
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for y in 0..gray.height() {
        for x in 0..gray.width() {
            if gray.get(x, y, 0) > 0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x1 > 0).then_some(BBox { x0, y0, x1, y1 })
}

pub fn load_dataset(root: impl AsRef<Path>, normalizer: &CategoryNormalizer) -> Result<LoadedDataset, EvalError> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(EvalError::MissingRoot(root.to_path_buf()));
    }
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut out = LoadedDataset {
        name: name.clone(),
        ..Default::default()
    };
    for cat_dir in sorted_entries(root)? {
        let test_dir = cat_dir.join("test");
        if !test_dir.is_dir() {
            continue;
        }
        let raw_cat = cat_dir.file_name().unwrap().to_string_lossy().into_owned();
        let category = match normalizer.normalize(&raw_cat) {
            Ok(c) => c,
            Err(_) => continue,
        };
        for defect_dir in sorted_entries(&test_dir)? {
            if !defect_dir.is_dir() {
                continue;
            }
            let defect = defect_dir.file_name().unwrap().to_string_lossy().into_owned();
            let label = BinaryLabel::from_anomalous(defect != "good");
            for img in sorted_entries(&defect_dir)?.into_iter().filter(|p| is_png(p)) {
                if let Err(e) = image::image_dimensions(&img) {
                    out.warnings
                        .push(format!("skipping unreadable image {}: {e}", img.display()));
                    continue;
                }
                let file = img.file_name().unwrap().to_string_lossy().into_owned();
                let gt_box = if label.is_anomalous() {
                    let stem = img.file_stem().unwrap().to_string_lossy();
                    let mask = cat_dir
                        .join("ground_truth")
                        .join(&defect)
                        .join(format!("{stem}_mask.png"));
                    if mask.is_file() {
                        match RasterImage::load_png(&mask) {
                            Ok(m) => mask_to_bbox(&m),
                            Err(e) => {
                                out.warnings
                                    .push(format!("unreadable mask {}: {e}", mask.display()));
                                None
                            }
                        }
                    } else {
                        None
                    }
                } else {
                    None
                };
                out.samples.push(Sample {
                    id: format!("{name}/{raw_cat}/{defect}/{file}"),
                    dataset: name.clone(),
                    path: img,
                    category: category.clone(),
                    view: default_view(),
                    label,
                    gt_box,
                    gt_type: label.is_anomalous().then(|| defect.clone()),
                });
            }
        }
    }
    for w in &out.warnings {
        log::warn!("{w}");
    }
    if out.samples.is_empty() {
        return Err(EvalError::EmptyDataset(root.to_path_buf()));
    }
    Ok(out)
}
