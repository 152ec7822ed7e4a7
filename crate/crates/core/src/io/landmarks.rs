use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{Landmark, LandmarkSet};

pub const LANDMARK_CSV_HEADER: &str = "index,x,y";

/// Parses `index,x,y` rows after a header line. With `bounds = (width,
/// height)` every point must lie inside the image. Errors name the line.
pub fn parse_landmarks(text: &str, source_name: &str, bounds: Option<(usize, usize)>) -> Result<LandmarkSet> {
    let err = |line: u64, reason: String| Error::Parse {
        source_name: source_name.to_string(),
        line: line as usize,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["index", "x", "y"] {
        return Err(err(1, format!("expected header `{LANDMARK_CSV_HEADER}`")));
    }
    let mut seen = HashSet::new();
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let index: usize = record[0]
            .parse()
            .map_err(|_| err(line, format!("bad index `{}`", &record[0])))?;
        let coord = |k: usize| -> Result<f32> {
            record[k]
                .parse::<f32>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(line, format!("bad coordinate `{}`", &record[k])))
        };
        let (x, y) = (coord(1)?, coord(2)?);
        if !seen.insert(index) {
            return Err(err(line, format!("duplicate landmark index {index}")));
        }
        if let Some((w, h)) = bounds {
            if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f32 && y <= (h - 1) as f32) {
                return Err(err(line, format!("landmark {index} at ({x}, {y}) lies outside the {w}x{h} image")));
            }
        }
        points.push(Landmark { index, x, y });
    }
    LandmarkSet::new(points)
}

pub fn read_landmarks(path: impl AsRef<Path>, bounds: Option<(usize, usize)>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmarks(&text, &path.display().to_string(), bounds)
}

pub fn landmarks_to_csv(set: &LandmarkSet) -> String {
    let mut out = format!("{LANDMARK_CSV_HEADER}\n");
    for p in set.points() {
        out.push_str(&format!("{},{},{}\n", p.index, p.x, p.y));
    }
    out
}

pub fn write_landmarks(path: impl AsRef<Path>, set: &LandmarkSet) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, landmarks_to_csv(set)).map_err(|e| Error::io(path, e))
}
