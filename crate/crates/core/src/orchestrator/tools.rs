use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::imaging::{
    clahe, crop, edge_map, foreground_extract, measure_angle, measure_distance, BBox, ImagingError,
    Measurement, Point, RasterImage, CANNY_HIGH, CANNY_LOW, CLAHE_CLIP_LIMIT, CLAHE_TILES,
};
use crate::priors::{PriorError, PriorSource};
use crate::trajectory::{ToolCall, ToolName};

#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("bad argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error("no prior for {category}/{view}")]
    NoPrior { category: String, view: String },
    #[error("no prior source configured")]
    NoPriorSource,
}

/// Defaults applied when a call leaves an argument out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolSettings {
    pub enhance_mode: String,
    pub clahe_clip: f64,
    pub clahe_tiles: [u32; 2],
    pub canny_low: f64,
    pub canny_high: f64,
    /// Physical size of one pixel; measurements stay in `px` when unset.
    pub units_per_pixel: Option<f64>,
    pub units: String,
}

impl Default for ToolSettings {
    fn default() -> Self {
        ToolSettings {
            enhance_mode: "clahe".into(),
            clahe_clip: CLAHE_CLIP_LIMIT,
            clahe_tiles: [CLAHE_TILES.0, CLAHE_TILES.1],
            canny_low: CANNY_LOW,
            canny_high: CANNY_HIGH,
            units_per_pixel: None,
            units: "mm".into(),
        }
    }
}

/// Per-sample inputs the tools may consult.
#[derive(Clone, Copy)]
pub struct ToolEnv<'a> {
    pub category: &'a str,
    pub view: &'a str,
    pub priors: Option<&'a dyn PriorSource>,
    pub background: Option<&'a RasterImage>,
    pub settings: &'a ToolSettings,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Observation {
    Image {
        tool: ToolName,
        width: u32,
        height: u32,
        sha256: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        region: Option<BBox>,
        #[serde(skip)]
        image: Option<Arc<RasterImage>>,
    },
    Text {
        tool: ToolName,
        text: String,
    },
    Measurement {
        tool: ToolName,
        #[serde(flatten)]
        measurement: Measurement,
    },
}

impl PartialEq for Observation {
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_value(self).ok() == serde_json::to_value(other).ok()
    }
}

impl Observation {
    pub fn image(tool: ToolName, image: RasterImage, region: Option<BBox>) -> Self {
        let digest = hex::encode(&Sha256::digest(image.data())[..8]);
        Observation::Image {
            tool,
            width: image.width(),
            height: image.height(),
            sha256: digest,
            region,
            image: Some(Arc::new(image)),
        }
    }

    pub fn tool(&self) -> ToolName {
        match self {
            Observation::Image { tool, .. }
            | Observation::Text { tool, .. }
            | Observation::Measurement { tool, .. } => *tool,
        }
    }

    pub fn raster(&self) -> Option<&RasterImage> {
        match self {
            Observation::Image { image: Some(i), .. } => Some(i),
            _ => None,
        }
    }
}

fn num_arg(call: &ToolCall, key: &str) -> Result<Option<f64>, ToolError> {
    match call.arg(key) {
        None => Ok(None),
        Some(v) => v
            .as_f64()
            .map(Some)
            .ok_or_else(|| ToolError::Argument(format!("{key} must be a number, got {:?}", v.as_text()))),
    }
}

fn box_arg(call: &ToolCall) -> Result<Option<BBox>, ToolError> {
    let keys = ["x0", "y0", "x1", "y1"];
    let nums: Vec<Option<f64>> = keys.iter().map(|k| num_arg(call, k)).collect::<Result<_, _>>()?;
    if nums.iter().all(Option::is_some) {
        let v: Vec<f64> = nums.into_iter().flatten().collect();
        if v.iter().any(|x| *x < 0.0 || x.fract() != 0.0 || *x > u32::MAX as f64) {
            return Err(ToolError::Argument(format!("box coordinates must be non-negative integers: {v:?}")));
        }
        let b = BBox::new(v[0] as u32, v[1] as u32, v[2] as u32, v[3] as u32)?;
        return Ok(Some(b));
    }
    if nums.iter().any(Option::is_some) {
        return Err(ToolError::Argument("box needs all of x0, y0, x1, y1".into()));
    }
    for key in ["region", "bbox", "box"] {
        if let Some(v) = call.arg(key) {
            let text = v.as_text();
            return BBox::find_in_text(&text)
                .map(Some)
                .ok_or_else(|| ToolError::Argument(format!("malformed region {text:?}")));
        }
    }
    Ok(None)
}

/// Crop region: explicit box, else the foreground estimate.
fn crop_region(call: &ToolCall, image: &RasterImage, env: &ToolEnv<'_>) -> Result<BBox, ToolError> {
    match box_arg(call)? {
        Some(b) => Ok(b),
        None => Ok(foreground_extract(image, env.background)?),
    }
}

fn point_args(call: &ToolCall) -> Result<Vec<Point>, ToolError> {
    let mut pts = Vec::new();
    for key in ["p1", "p2", "p3"] {
        if let Some(v) = call.arg(key) {
            let text = v.as_text();
            pts.push(Point::parse(&text).ok_or_else(|| ToolError::Argument(format!("bad point {key}={text:?}")))?);
        }
    }
    if pts.is_empty() {
        if let Some(q) = call.arg("query").or_else(|| call.arg("points")) {
            pts = points_in_text(&q.as_text());
        }
    }
    Ok(pts)
}

/// Every `(x, y)` pair of numbers written in parentheses.
pub fn points_in_text(text: &str) -> Vec<Point> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('(') {
        let after = &rest[open + 1..];
        let Some(close) = after.find(')') else { break };
        if let Some(p) = Point::parse(&after[..close]) {
            out.push(p);
        }
        rest = &after[close + 1..];
    }
    out
}

/// Runs one tool against `image`. Crop and enhance return images, measure
/// returns a measurement, prior returns text.
///
/// Measure without points reports the diagonal of the foreground box.
pub fn dispatch_tool(call: &ToolCall, image: &RasterImage, env: &ToolEnv<'_>) -> Result<Observation, ToolError> {
    let s = env.settings;
    match call.tool {
        ToolName::Crop => {
            let region = crop_region(call, image, env)?;
            Ok(Observation::image(ToolName::Crop, crop(image, &region)?, Some(region)))
        }
        ToolName::Enhance => {
            let mode = call.text("mode").unwrap_or_else(|| s.enhance_mode.clone()).to_lowercase();
            let out = match mode.as_str() {
                "clahe" | "contrast" => {
                    let clip = num_arg(call, "clip")?.unwrap_or(s.clahe_clip);
                    let tiles = num_arg(call, "tiles")?.map_or((s.clahe_tiles[0], s.clahe_tiles[1]), |t| {
                        (t.max(1.0) as u32, t.max(1.0) as u32)
                    });
                    clahe(image, clip, tiles)?
                }
                "edge" | "edges" | "canny" => {
                    let low = num_arg(call, "low")?.unwrap_or(s.canny_low);
                    let high = num_arg(call, "high")?.unwrap_or(s.canny_high);
                    edge_map(image, low, high)?
                }
                other => return Err(ToolError::Argument(format!("unknown enhance mode {other:?}"))),
            };
            Ok(Observation::image(ToolName::Enhance, out, None))
        }
        ToolName::Measure => {
            let scale = s.units_per_pixel.map(|u| (u, s.units.as_str()));
            let pts = point_args(call)?;
            let kind = call.text("kind").map(|k| k.to_lowercase());
            let measurement = match (kind.as_deref(), pts.len()) {
                (Some("angle"), 3) | (None, 3) => measure_angle(pts[0], pts[1], pts[2])?,
                (Some("distance") | None, 2) => measure_distance(pts[0], pts[1], scale)?,
                (_, 0) if kind.as_deref() != Some("angle") => {
                    let b = foreground_extract(image, env.background)?;
                    measure_distance(
                        Point::new(b.x0 as f64, b.y0 as f64),
                        Point::new(b.x1 as f64, b.y1 as f64),
                        scale,
                    )?
                }
                (k, n) => {
                    return Err(ToolError::Argument(format!(
                        "measure {} needs {} points, got {n}",
                        k.unwrap_or("distance"),
                        if k == Some("angle") { 3 } else { 2 }
                    )))
                }
            };
            Ok(Observation::Measurement { tool: ToolName::Measure, measurement })
        }
        ToolName::Prior => {
            let category = call.text("category").unwrap_or_else(|| env.category.to_string());
            let view = call.text("view").unwrap_or_else(|| env.view.to_string());
            let source = env.priors.ok_or(ToolError::NoPriorSource)?;
            match source.get_prior(&category, &view)? {
                Some(text) => Ok(Observation::Text { tool: ToolName::Prior, text }),
                None => Err(ToolError::NoPrior { category, view }),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::PriorStore;
    use crate::trajectory::ArgValue;

    fn env<'a>(settings: &'a ToolSettings, priors: Option<&'a dyn PriorSource>) -> ToolEnv<'a> {
        ToolEnv { category: "capacitor", view: "top", priors, background: None, settings }
    }

    #[test]
    fn measure_distance_call() {
        let s = ToolSettings::default();
        let img = RasterImage::filled(8, 8, 1, 0).unwrap();
        let call = ToolCall::new(ToolName::Measure)
            .with_arg("p1", ArgValue::Text("0,0".into()))
            .with_arg("p2", ArgValue::Text("3,4".into()));
        let obs = dispatch_tool(&call, &img, &env(&s, None)).unwrap();
        match obs {
            Observation::Measurement { measurement, .. } => assert_eq!(measurement.to_string(), "5.0 px"),
            o => panic!("{o:?}"),
        }
        let q = ToolCall::new(ToolName::Measure).with_arg("query", ArgValue::Text("from (0,0) to (3,4)".into()));
        assert!(matches!(dispatch_tool(&q, &img, &env(&s, None)).unwrap(), Observation::Measurement { .. }));
    }

    #[test]
    fn prior_call() {
        let s = ToolSettings::default();
        let store = PriorStore::new();
        store.put_prior("capacitor", "top", "smooth metallic sheen").unwrap();
        let img = RasterImage::filled(8, 8, 1, 0).unwrap();
        let obs = dispatch_tool(&ToolCall::new(ToolName::Prior), &img, &env(&s, Some(&store))).unwrap();
        assert_eq!(obs, Observation::Text { tool: ToolName::Prior, text: "smooth metallic sheen".into() });
        let other = ToolCall::new(ToolName::Prior).with_arg("category", ArgValue::Text("bolt".into()));
        assert!(matches!(dispatch_tool(&other, &img, &env(&s, Some(&store))), Err(ToolError::NoPrior { .. })));
    }

    #[test]
    fn edge_enhance_on_constant_image() {
        let s = ToolSettings::default();
        let img = RasterImage::filled(16, 16, 1, 128).unwrap();
        let call = ToolCall::new(ToolName::Enhance).with_arg("mode", ArgValue::Text("edge".into()));
        let obs = dispatch_tool(&call, &img, &env(&s, None)).unwrap();
        assert!(obs.raster().unwrap().data().iter().all(|&v| v == 0));
    }

    #[test]
    fn crop_errors() {
        let s = ToolSettings::default();
        let img = RasterImage::filled(16, 16, 1, 128).unwrap();
        let bad = ToolCall::new(ToolName::Crop).with_arg("region", ArgValue::Text("upper left".into()));
        assert!(matches!(dispatch_tool(&bad, &img, &env(&s, None)), Err(ToolError::Argument(_))));
        let oob = ToolCall::new(ToolName::Crop)
            .with_arg("x0", ArgValue::Number(0.0))
            .with_arg("y0", ArgValue::Number(0.0))
            .with_arg("x1", ArgValue::Number(40.0))
            .with_arg("y1", ArgValue::Number(4.0));
        assert!(matches!(dispatch_tool(&oob, &img, &env(&s, None)), Err(ToolError::Imaging(_))));
        let fg = dispatch_tool(&ToolCall::new(ToolName::Crop), &img, &env(&s, None)).unwrap();
        assert!(matches!(fg, Observation::Image { width: 8, height: 8, .. }));
    }
}
