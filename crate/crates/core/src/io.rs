//! JSON-lines inputs: annotation files and prediction/ground-truth pair files.
//!
//! A pair line looks like
//!
//! ```json
//! {"pred": {"quat_wxyz": [1,0,0,0], "t_m": [0,0,2], "focal_px": 600},
//!  "gt":   {"quat_wxyz": [1,0,0,0], "t_m": [0,0,2], "focal_px": 600},
//!  "model": "chair.obj", "gt_bbox": [10,10,90,120], "img_wh": [640,480],
//!  "pred_bbox": [12,8,95,118]}
//! ```
//!
//! `pred_bbox` is optional. `model` names a point set resolved by the caller;
//! `points` may be given inline instead.

use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geometry::{BBox, ModelPoints, ParamState};
use crate::metrics::EvalPair;
use crate::sampling::AnnotationRecord;

/// Parses one JSON value per non-blank line; errors carry 1-based line numbers.
pub fn parse_json_lines<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    let records: Vec<AnnotationRecord> = parse_json_lines(text)?;
    if records.is_empty() {
        return Err(Error::EmptyInput("annotation file has no records"));
    }
    Ok(records)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairLine {
    pub pred: ParamState,
    pub gt: ParamState,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub points: Option<Vec<[f64; 3]>>,
    pub gt_bbox: BBox,
    pub img_wh: [f64; 2],
    #[serde(default)]
    pub pred_bbox: Option<BBox>,
}

/// Parses a pairs file, resolving `model` references through `resolve`.
/// `resolve` returns `Ok(None)` for an unknown reference.
pub fn parse_pairs<F>(text: &str, mut resolve: F) -> Result<Vec<EvalPair>>
where
    F: FnMut(&str) -> Result<Option<ModelPoints>>,
{
    let lines: Vec<PairLine> = parse_json_lines(text)?;
    if lines.is_empty() {
        return Err(Error::EmptyInput("pairs file has no records"));
    }
    lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let points = match (l.points, l.model) {
                (Some(p), _) => ModelPoints::new(p.into_iter().map(Into::into).collect())?,
                (None, Some(m)) => resolve(&m)?.ok_or(Error::MissingModel { pair: i, model: m })?,
                (None, None) => {
                    return Err(Error::MissingModel {
                        pair: i,
                        model: String::new(),
                    })
                }
            };
            let [w, h] = l.img_wh;
            let pair = EvalPair {
                pred: l.pred,
                gt: l.gt,
                points,
                gt_bbox: l.gt_bbox,
                image_diagonal: w.hypot(h),
                pred_bbox: l.pred_bbox,
            };
            pair.validate()?;
            Ok(pair)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const REC: &str = r#"{"quat_wxyz":[1,0,0,0],"t_m":[0,0,1.5],"f_px":600,"img_wh":[640,480],"bbox":[1,2,30,40]}"#;

    #[test]
    fn annotations_report_line_numbers() {
        let text = format!("{REC}\n\n{REC}\n{{\"quat_wxyz\": 3}}\n");
        match parse_annotations(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(parse_annotations(&format!("{REC}\n{REC}")).unwrap().len(), 2);
        assert!(matches!(parse_annotations("\n \n"), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn pairs_resolve_models() {
        let st = r#"{"quat_wxyz":[1,0,0,0],"t_m":[0,0,2],"focal_px":600}"#;
        let a = format!(r#"{{"pred":{st},"gt":{st},"model":"cube","gt_bbox":[0,0,10,10],"img_wh":[30,40]}}"#);
        let b = format!(r#"{{"pred":{st},"gt":{st},"model":"ghost","gt_bbox":[0,0,10,10],"img_wh":[30,40]}}"#);
        let resolve = |m: &str| {
            Ok((m == "cube").then(|| ModelPoints::new(vec![nalgebra::Vector3::zeros()]).unwrap()))
        };
        let pairs = parse_pairs(&a, resolve).unwrap();
        assert_eq!(pairs[0].image_diagonal, 50.0);
        match parse_pairs(&format!("{a}\n{b}"), resolve) {
            Err(Error::MissingModel { pair, model }) => assert_eq!((pair, model.as_str()), (1, "ghost")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
