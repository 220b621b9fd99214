//! Pointing game over attention grids.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `H x W` grid of non-negative attention weights, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl AttentionMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("attention map needs H, W >= 1"));
        }
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{} attention values for a {height}x{width} grid",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "attention values must be finite and >= 0, got {v}"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::shape("attention rows have different lengths"));
        }
        Self::new(rows.len(), width, rows.concat())
    }

    /// Flat binary grid: `u32` LE height, `u32` LE width, then `H * W` LE `f64`.
    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::invalid("attention grid is shorter than its header"));
        }
        let h = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if body.len() != 8 * h * w {
            return Err(Error::invalid(format!(
                "attention grid header says {h}x{w} but body has {} bytes",
                body.len()
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::new(h, w, values)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.values.len());
        out.extend((self.height as u32).to_le_bytes());
        out.extend((self.width as u32).to_le_bytes());
        for v in &self.values {
            out.extend(v.to_le_bytes());
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Half-open pixel rectangle `[x_min, x_max) x [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl GroundTruthBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::invalid(format!(
                "box [{x_min},{y_min},{x_max},{y_max}] is empty"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    fn check_within(&self, map: &AttentionMap) -> Result<()> {
        if self.x_max > map.width || self.y_max > map.height || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::invalid(format!(
                "box [{},{},{},{}] does not fit a {}x{} map",
                self.x_min, self.y_min, self.x_max, self.y_max, map.height, map.width
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..self.x_max).contains(&x) && (self.y_min..self.y_max).contains(&y)
    }
}

/// Number of selected pixels, `max(1, floor(fraction * H * W))`.
///
/// A 1e-9 slack absorbs products like `0.29 * 100 = 28.999999999999996`.
fn selection_size(fraction: f64, pixels: usize) -> usize {
    ((fraction * pixels as f64 + 1e-9).floor() as usize).clamp(1, pixels)
}

/// Hit iff any of the top `fraction` pixels (ties broken by row-major index) lies in a box.
pub fn pointing_game(map: &AttentionMap, boxes: &[GroundTruthBox], top_fraction: f64) -> Result<bool> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "top_fraction must lie in (0, 1], got {top_fraction}"
        )));
    }
    if boxes.is_empty() {
        return Err(Error::invalid("pointing game needs at least one box"));
    }
    for b in boxes {
        b.check_within(map)?;
    }
    let k = selection_size(top_fraction, map.values.len());
    let mut order: Vec<usize> = (0..map.values.len()).collect();
    // stable sort keeps ascending index order within equal values
    order.sort_by(|&a, &b| map.values[b].total_cmp(&map.values[a]));
    Ok(order[..k].iter().any(|&p| {
        let (y, x) = (p / map.width, p % map.width);
        boxes.iter().any(|b| b.contains(x, y))
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingCase {
    pub id: String,
    pub disease: String,
    pub map: AttentionMap,
    pub boxes: Vec<GroundTruthBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseRate {
    pub cases: usize,
    pub hits: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointingSuiteResult {
    pub top_fraction: f64,
    pub per_disease: BTreeMap<String, DiseaseRate>,
    /// Mean hit rate over all cases.
    pub overall: f64,
}

impl PointingSuiteResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("disease,cases,hits,rate\n");
        let mut cases = 0;
        let mut hits = 0;
        for (d, r) in &self.per_disease {
            out.push_str(&format!("{d},{},{},{:?}\n", r.cases, r.hits, r.rate));
            cases += r.cases;
            hits += r.hits;
        }
        out.push_str(&format!("overall,{cases},{hits},{:?}\n", self.overall));
        out
    }
}

pub fn pointing_game_suite(cases: &[GroundingCase], top_fraction: f64) -> Result<PointingSuiteResult> {
    if cases.is_empty() {
        return Err(Error::invalid("pointing-game suite is empty"));
    }
    let mut per_disease: BTreeMap<String, DiseaseRate> = BTreeMap::new();
    let mut hits_total = 0;
    for c in cases {
        let hit = pointing_game(&c.map, &c.boxes, top_fraction)
            .map_err(|e| Error::invalid(format!("case `{}`: {e}", c.id)))?;
        let entry = per_disease.entry(c.disease.clone()).or_insert(DiseaseRate {
            cases: 0,
            hits: 0,
            rate: 0.0,
        });
        entry.cases += 1;
        entry.hits += hit as usize;
        hits_total += hit as usize;
    }
    for r in per_disease.values_mut() {
        r.rate = r.hits as f64 / r.cases as f64;
    }
    Ok(PointingSuiteResult {
        top_fraction,
        per_disease,
        overall: hits_total as f64 / cases.len() as f64,
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AttentionField {
    Grid(Vec<Vec<f64>>),
    Path(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundingRecord {
    id: String,
    disease: String,
    attention: AttentionField,
    boxes: Vec<[usize; 4]>,
}

/// Reads line-delimited grounding records; relative grid paths resolve against the file's directory.
pub fn read_grounding_file(path: &Path) -> Result<Vec<GroundingCase>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut cases = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec_err = |reason: String| Error::Record {
            path: path.to_path_buf(),
            line: n + 1,
            reason,
        };
        let rec: GroundingRecord = serde_json::from_str(line).map_err(|e| rec_err(e.to_string()))?;
        let map = match rec.attention {
            AttentionField::Grid(rows) => AttentionMap::from_rows(&rows),
            AttentionField::Path(p) => {
                let grid_path = base.join(p);
                let bytes = std::fs::read(&grid_path).map_err(|e| Error::io(&grid_path, e))?;
                AttentionMap::from_binary(&bytes)
            }
        }
        .map_err(|e| rec_err(e.to_string()))?;
        let boxes = rec
            .boxes
            .iter()
            .map(|b| {
                let bx = GroundTruthBox::new(b[0], b[1], b[2], b[3])?;
                bx.check_within(&map)?;
                Ok(bx)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| rec_err(e.to_string()))?;
        cases.push(GroundingCase {
            id: rec.id,
            disease: rec.disease,
            map,
            boxes,
        });
    }
    Ok(cases)
}
