//! Dataset adapters: a documented JSON format plus the on-disk layouts of
//! UFPR-ALPR and CCPD.
//!
//! A malformed annotation never aborts a load; it is recorded in
//! [`LoadReport::errors`] and the file is skipped.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::{Sample, Split};
use crate::boxes::BBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Ufpr,
    Ccpd,
    GenericJson,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ufpr" => Ok(Self::Ufpr),
            "ccpd" => Ok(Self::Ccpd),
            "generic_json" | "json" => Ok(Self::GenericJson),
            other => Err(Error::Config(format!("unknown dataset format {other:?}"))),
        }
    }
}

/// Loaded samples plus every per-file failure.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub samples: Vec<Sample>,
    pub errors: Vec<Error>,
}

impl LoadReport {
    fn fail(&mut self, path: &Path, message: impl Into<String>) {
        self.errors.push(Error::Dataset {
            path: path.to_path_buf(),
            message: message.into(),
        });
    }
}

pub const GENERIC_JSON_FILE: &str = "annotations.json";

/// `{"images": [{"file": "...", "boxes": [[x1, y1, x2, y2], ...], "split": "train"}]}`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenericAnnotations {
    pub images: Vec<GenericEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenericEntry {
    pub file: String,
    pub boxes: Vec<BBox>,
    pub split: Split,
}

pub fn load_dataset(root: &Path, format: DatasetFormat) -> Result<LoadReport> {
    if !root.exists() {
        return Err(Error::Dataset {
            path: root.to_path_buf(),
            message: "dataset root does not exist".into(),
        });
    }
    let report = match format {
        DatasetFormat::GenericJson => load_generic_json(root)?,
        DatasetFormat::Ufpr => load_ufpr(root),
        DatasetFormat::Ccpd => load_ccpd(root),
    };
    if !report.errors.is_empty() {
        log::warn!(
            "{} of {} annotation files failed to load under {}",
            report.errors.len(),
            report.errors.len() + report.samples.len(),
            root.display()
        );
    }
    Ok(report)
}

fn open_rgb(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

fn build_sample(
    report: &mut LoadReport,
    image_path: &Path,
    boxes: Vec<BBox>,
    split: Split,
    source_id: String,
) {
    match open_rgb(image_path) {
        Ok(image) => match Sample::new(image, boxes, source_id, split) {
            Ok(s) => report.samples.push(s),
            Err(e) => report.fail(image_path, e.to_string()),
        },
        Err(e) => report.fail(image_path, e.to_string()),
    }
}

fn load_generic_json(root: &Path) -> Result<LoadReport> {
    let path = root.join(GENERIC_JSON_FILE);
    let ann: GenericAnnotations = serde_json::from_slice(&fs::read(&path)?)?;
    let mut report = LoadReport::default();
    for entry in ann.images {
        let image_path = root.join(&entry.file);
        build_sample(
            &mut report,
            &image_path,
            entry.boxes,
            entry.split,
            entry.file,
        );
    }
    Ok(report)
}

fn sorted_files(root: &Path, exts: &[&str]) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)))
        })
        .collect();
    files.sort();
    files
}

fn relative_id(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

/// Split implied by UFPR's `training/`, `validation/`, `testing/` directories.
fn ufpr_split(path: &Path) -> Split {
    for comp in path.components().rev() {
        match comp
            .as_os_str()
            .to_string_lossy()
            .to_ascii_lowercase()
            .as_str()
        {
            "training" | "train" => return Split::Train,
            "validation" | "val" => return Split::Val,
            "testing" | "test" => return Split::Test,
            _ => {}
        }
    }
    Split::Train
}

/// Parses one UFPR-ALPR annotation text. Plates come from
/// `position_plate: x y w h` lines; with `use_corners`, a following
/// `corners: x,y x,y x,y x,y` line replaces the box by the corners' extent.
pub fn parse_ufpr_annotation(
    text: &str,
    use_corners: bool,
) -> std::result::Result<Vec<BBox>, String> {
    let mut boxes = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("position_plate:") {
            let v: Vec<f32> = rest
                .split_whitespace()
                .map(|t| {
                    t.parse::<f32>()
                        .map_err(|e| format!("bad position_plate value {t:?}: {e}"))
                })
                .collect::<std::result::Result<_, _>>()?;
            if v.len() != 4 {
                return Err(format!("position_plate needs 4 values, got {}", v.len()));
            }
            boxes.push(BBox::new(v[0], v[1], v[0] + v[2], v[1] + v[3]));
        } else if let Some(rest) = line.strip_prefix("corners:") {
            if !use_corners {
                continue;
            }
            let pts: Vec<(f32, f32)> = rest
                .split_whitespace()
                .map(|pair| {
                    let (x, y) = pair.split_once(',').ok_or(format!("bad corner {pair:?}"))?;
                    let x = x.parse::<f32>().map_err(|e| e.to_string())?;
                    let y = y.parse::<f32>().map_err(|e| e.to_string())?;
                    Ok((x, y))
                })
                .collect::<std::result::Result<_, String>>()?;
            if pts.len() != 4 {
                return Err(format!("corners needs 4 points, got {}", pts.len()));
            }
            let b = extent(&pts);
            match boxes.last_mut() {
                Some(last) => *last = b,
                None => boxes.push(b),
            }
        }
    }
    if boxes.is_empty() {
        return Err("no position_plate entry".into());
    }
    Ok(boxes)
}

fn extent(pts: &[(f32, f32)]) -> BBox {
    let (mut x1, mut y1, mut x2, mut y2) = (f32::MAX, f32::MAX, f32::MIN, f32::MIN);
    for &(x, y) in pts {
        x1 = x1.min(x);
        y1 = y1.min(y);
        x2 = x2.max(x);
        y2 = y2.max(y);
    }
    BBox::new(x1, y1, x2, y2)
}

pub fn load_ufpr(root: &Path) -> LoadReport {
    load_ufpr_with(root, false)
}

pub fn load_ufpr_with(root: &Path, use_corners: bool) -> LoadReport {
    let mut report = LoadReport::default();
    for txt in sorted_files(root, &["txt"]) {
        let text = match fs::read_to_string(&txt) {
            Ok(t) => t,
            Err(e) => {
                report.fail(&txt, e.to_string());
                continue;
            }
        };
        let boxes = match parse_ufpr_annotation(&text, use_corners) {
            Ok(b) => b,
            Err(e) => {
                report.fail(&txt, e);
                continue;
            }
        };
        let image_path = ["png", "jpg", "jpeg"]
            .iter()
            .map(|ext| txt.with_extension(ext))
            .find(|p| p.exists());
        let Some(image_path) = image_path else {
            report.fail(&txt, "no image next to annotation");
            continue;
        };
        let id = relative_id(root, &image_path);
        build_sample(&mut report, &image_path, boxes, ufpr_split(&txt), id);
    }
    report
}

/// Decodes a CCPD file name such as
/// `025-95_113-154&383_386&473-386&473_177&454_154&383_363&402-0_0_22_27_27_33_16-37-15.jpg`.
/// The third field is the bounding box `x1&y1_x2&y2`; when it is unusable the
/// extent of the four vertices in the fourth field is used.
pub fn parse_ccpd_name(name: &str) -> std::result::Result<BBox, String> {
    let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
    let fields: Vec<&str> = stem.split('-').collect();
    if fields.len() < 4 {
        return Err(format!(
            "expected at least 4 '-' separated fields, got {}",
            fields.len()
        ));
    }
    let points = |field: &str| -> std::result::Result<Vec<(f32, f32)>, String> {
        field
            .split('_')
            .map(|p| {
                let (x, y) = p.split_once('&').ok_or(format!("bad point {p:?}"))?;
                Ok((
                    x.parse::<f32>().map_err(|e| e.to_string())?,
                    y.parse::<f32>().map_err(|e| e.to_string())?,
                ))
            })
            .collect()
    };
    if let Ok(corners) = points(fields[2]) {
        if corners.len() == 2 {
            let b = extent(&corners);
            if !b.is_degenerate() {
                return Ok(b);
            }
        }
    }
    let verts = points(fields[3])?;
    if verts.len() != 4 {
        return Err(format!("expected 4 vertices, got {}", verts.len()));
    }
    let b = extent(&verts);
    if b.is_degenerate() {
        return Err("degenerate plate region".into());
    }
    Ok(b)
}

/// Split lists in `splits/{train,val,test}.txt` (one relative path per line),
/// when present. Files not listed are test images.
fn ccpd_split_index(root: &Path) -> HashMap<String, Split> {
    let mut index = HashMap::new();
    for (name, split) in [
        ("train", Split::Train),
        ("val", Split::Val),
        ("test", Split::Test),
    ] {
        let list = root.join("splits").join(format!("{name}.txt"));
        if let Ok(text) = fs::read_to_string(&list) {
            for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
                index.insert(line.replace('\\', "/"), split);
            }
        }
    }
    index
}

pub fn load_ccpd(root: &Path) -> LoadReport {
    let index = ccpd_split_index(root);
    let mut report = LoadReport::default();
    for path in sorted_files(root, &["jpg", "jpeg", "png"]) {
        let name = path
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .to_string();
        let bbox = match parse_ccpd_name(&name) {
            Ok(b) => b,
            Err(e) => {
                report.fail(&path, e);
                continue;
            }
        };
        let id = relative_id(root, &path);
        let split = index.get(&id).copied().unwrap_or(Split::Test);
        build_sample(&mut report, &path, vec![bbox], split, id);
    }
    report
}

/// Writes samples as PNGs plus an `annotations.json` in the generic format.
pub fn write_generic_json(root: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    let mut images = Vec::with_capacity(samples.len());
    for s in samples {
        let file = format!("images/{}.png", s.source_id);
        s.image.save(root.join(&file))?;
        images.push(GenericEntry {
            file,
            boxes: s.gt_boxes.clone(),
            split: s.split,
        });
    }
    let json = serde_json::to_string_pretty(&GenericAnnotations { images })?;
    fs::write(root.join(GENERIC_JSON_FILE), json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ccpd_name_decoding() {
        let b = parse_ccpd_name(
            "025-95_113-154&383_386&473-386&473_177&454_154&383_363&402-0_0_22_27_27_33_16-37-15.jpg",
        )
        .unwrap();
        assert_eq!(b, BBox::new(154.0, 383.0, 386.0, 473.0));
        // broken box field falls back to the vertices' extent
        let b = parse_ccpd_name("01-90_90-xx-300&500_100&520_90&400_310&410-0_0-1-1.jpg").unwrap();
        assert_eq!(b, BBox::new(90.0, 400.0, 310.0, 520.0));
        assert!(parse_ccpd_name("garbage.jpg").is_err());
    }

    #[test]
    fn ufpr_text_parsing() {
        let text = "camera: GoPro Hero4 Silver\nposition_vehicle: 794 453 455 379\n\ttype: car\nplate: AYO-9034\nposition_plate: 970 650 107 39\n\tchar 1: 976 660 13 21\n";
        assert_eq!(
            parse_ufpr_annotation(text, false).unwrap(),
            vec![BBox::new(970.0, 650.0, 1077.0, 689.0)]
        );
        let with_corners = format!("{text}corners: 971,651 1076,652 1075,688 970,690\n");
        assert_eq!(
            parse_ufpr_annotation(&with_corners, true).unwrap(),
            vec![BBox::new(970.0, 651.0, 1076.0, 690.0)]
        );
        assert!(parse_ufpr_annotation("plate: X\n", false).is_err());
        assert!(parse_ufpr_annotation("position_plate: 1 2 3\n", false).is_err());
    }

    #[test]
    fn ufpr_split_from_path() {
        assert_eq!(
            ufpr_split(Path::new("r/testing/track0091/a.txt")),
            Split::Test
        );
        assert_eq!(ufpr_split(Path::new("r/validation/t/a.txt")), Split::Val);
        assert_eq!(ufpr_split(Path::new("r/training/t/a.txt")), Split::Train);
    }
}
