//! Gridded fields, per-variable z-score statistics and overlap tiling.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use ndarray::{s, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to the standard deviation of degenerate (constant) variables.
pub const EPS_STD: f64 = 1e-6;

/// A `[C, H, W]` stack of physical values on a regular lat/lon grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub values: Array3<f32>,
    pub variables: Vec<String>,
    pub lat_range: (f64, f64),
    pub lon_range: (f64, f64),
    pub timestamp: DateTime<Utc>,
}

impl GridField {
    pub fn new(
        values: Array3<f32>,
        variables: Vec<String>,
        lat_range: (f64, f64),
        lon_range: (f64, f64),
        timestamp: DateTime<Utc>,
    ) -> Result<Self> {
        let (c, h, w) = values.dim();
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty grid {h}x{w}")));
        }
        if c != variables.len() {
            return Err(Error::Shape(format!(
                "{c} channels but {} variable names",
                variables.len()
            )));
        }
        if !(lat_range.0 < lat_range.1) || !(lon_range.0 < lon_range.1) {
            return Err(Error::Shape(format!(
                "coordinate ranges must be increasing: lat {lat_range:?}, lon {lon_range:?}"
            )));
        }
        let field = Self {
            values,
            variables,
            lat_range,
            lon_range,
            timestamp,
        };
        field.check_finite()?;
        Ok(field)
    }

    /// Builds a field with unit-square coordinates and the Unix epoch as timestamp.
    pub fn from_values(values: Array3<f32>, variables: Vec<String>) -> Result<Self> {
        Self::new(
            values,
            variables,
            (0.0, 1.0),
            (0.0, 1.0),
            DateTime::<Utc>::UNIX_EPOCH,
        )
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn variable_index(&self, variable: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v == variable)
            .ok_or_else(|| Error::MissingVariable(variable.to_string()))
    }

    pub fn channel(&self, variable: &str) -> Result<ArrayView2<'_, f32>> {
        let idx = self.variable_index(variable)?;
        Ok(self.values.slice(s![idx, .., ..]))
    }

    /// Single-variable field sharing this field's metadata.
    pub fn select(&self, variable: &str) -> Result<GridField> {
        let plane = self.channel(variable)?.to_owned();
        Ok(self.with_values(
            plane.insert_axis(ndarray::Axis(0)),
            vec![variable.to_string()],
        ))
    }

    /// Replaces the values (and variable names) keeping coordinates and time.
    pub fn with_values(&self, values: Array3<f32>, variables: Vec<String>) -> GridField {
        debug_assert_eq!(values.dim().0, variables.len());
        GridField {
            values,
            variables,
            lat_range: self.lat_range,
            lon_range: self.lon_range,
            timestamp: self.timestamp,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (c, plane) in self.values.outer_iter().enumerate() {
            let mut count = 0;
            let mut first = None;
            for ((r, col), v) in plane.indexed_iter() {
                if !v.is_finite() {
                    count += 1;
                    first.get_or_insert((r, col));
                }
            }
            if let Some((row, col)) = first {
                return Err(Error::NonFinite {
                    variable: self.variables[c].clone(),
                    count,
                    row,
                    col,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariableStats {
    pub mean: f64,
    pub std: f64,
    pub count: u64,
    /// Set when the measured spread was below [`EPS_STD`] and the floor was applied.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

/// Per-variable normalization statistics, serialized as `{variable: {mean, std, count}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormStats {
    pub variables: BTreeMap<String, VariableStats>,
}

impl NormStats {
    pub fn get(&self, variable: &str) -> Result<&VariableStats> {
        self.variables
            .get(variable)
            .ok_or_else(|| Error::MissingVariable(variable.to_string()))
    }

    pub fn insert(&mut self, variable: impl Into<String>, stats: VariableStats) {
        self.variables.insert(variable.into(), stats);
    }

    pub fn merge(&mut self, other: NormStats) {
        self.variables.extend(other.variables);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Stable content hash, used to tie archives to the statistics that produced them.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("stats serialize");
        hex_digest(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Population mean/std of `variable` over every pixel of every field.
pub fn zscore_fit(fields: &[GridField], variable: &str) -> Result<NormStats> {
    let mut n = 0u64;
    let mut sum = 0.0f64;
    for field in fields {
        let plane = field.channel(variable)?;
        n += plane.len() as u64;
        sum += plane.iter().map(|&v| v as f64).sum::<f64>();
    }
    if n < 2 {
        return Err(Error::Shape(format!(
            "need at least 2 pixels of `{variable}`, found {n}"
        )));
    }
    let mean = sum / n as f64;
    let mut ss = 0.0f64;
    for field in fields {
        ss += field
            .channel(variable)?
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>();
    }
    let raw_std = (ss / n as f64).sqrt();
    let degenerate = raw_std < EPS_STD;
    let mut stats = NormStats::default();
    stats.insert(
        variable,
        VariableStats {
            mean,
            std: if degenerate { EPS_STD } else { raw_std },
            count: n,
            degenerate,
        },
    );
    Ok(stats)
}

/// Fits every variable of the first field over the whole sequence.
pub fn zscore_fit_all(fields: &[GridField]) -> Result<NormStats> {
    let first = fields.first().ok_or(Error::EmptyDataset)?;
    let mut stats = NormStats::default();
    for v in &first.variables {
        stats.merge(zscore_fit(fields, v)?);
    }
    Ok(stats)
}

fn map_channels(
    field: &GridField,
    stats: &NormStats,
    f: impl Fn(f64, &VariableStats) -> f64,
) -> Result<GridField> {
    let mut out = field.values.clone();
    for (c, name) in field.variables.iter().enumerate() {
        let st = stats.get(name)?;
        out.slice_mut(s![c, .., ..])
            .mapv_inplace(|v| f(v as f64, st) as f32);
    }
    Ok(field.with_values(out, field.variables.clone()))
}

pub fn zscore_apply(field: &GridField, stats: &NormStats) -> Result<GridField> {
    map_channels(field, stats, |v, st| (v - st.mean) / st.std)
}

pub fn zscore_invert(field: &GridField, stats: &NormStats) -> Result<GridField> {
    map_channels(field, stats, |v, st| v * st.std + st.mean)
}

/// How patch origins are laid out along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapPolicy {
    /// `ceil(n / p)` tiles at multiples of `p`; the last one shifted inward to stay in bounds.
    #[default]
    ShiftLast,
    /// Tiles advance by `p - overlap`, so neighbours share at least `overlap` pixels.
    MinOverlap(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blend {
    Average,
    #[default]
    Feather,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    pub data: Array3<f32>,
}

/// Overlapping tiling of a field, carrying what is needed to put it back together.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub patch_size: (usize, usize),
    pub source_dims: (usize, usize),
    pub coverage: Array2<u32>,
    template: GridField,
}

/// Origins along one axis of length `n` for tiles of length `p`.
pub fn tile_offsets(n: usize, p: usize, policy: OverlapPolicy) -> Vec<usize> {
    assert!(p >= 1 && p <= n, "tile {p} does not fit in {n}");
    let stride = match policy {
        OverlapPolicy::ShiftLast => p,
        OverlapPolicy::MinOverlap(ov) => p.saturating_sub(ov).max(1),
    };
    let count = (n - p).div_ceil(stride) + 1;
    (0..count).map(|i| (i * stride).min(n - p)).collect()
}

pub fn patchify(
    field: &GridField,
    patch_size: (usize, usize),
    policy: OverlapPolicy,
) -> Result<PatchSet> {
    let (h, w) = field.dims();
    let (ph, pw) = patch_size;
    if ph == 0 || pw == 0 || ph > h || pw > w {
        return Err(Error::Shape(format!(
            "patch {ph}x{pw} does not fit field {h}x{w}"
        )));
    }
    let rows = tile_offsets(h, ph, policy);
    let cols = tile_offsets(w, pw, policy);
    let mut patches = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            patches.push(Patch {
                row: r,
                col: c,
                data: field.values.slice(s![.., r..r + ph, c..c + pw]).to_owned(),
            });
        }
    }
    PatchSet::from_parts(patches, patch_size, field)
}

impl PatchSet {
    /// Assembles a patch set from externally produced tiles. `template` supplies the
    /// output dims and metadata; channel counts may differ from the template's.
    pub fn from_parts(
        patches: Vec<Patch>,
        patch_size: (usize, usize),
        template: &GridField,
    ) -> Result<Self> {
        let (h, w) = template.dims();
        let (ph, pw) = patch_size;
        let mut coverage = Array2::<u32>::zeros((h, w));
        let mut channels = None;
        for p in &patches {
            let (c, dh, dw) = p.data.dim();
            if (dh, dw) != patch_size {
                return Err(Error::Shape(format!(
                    "patch at ({}, {}) is {dh}x{dw}, expected {ph}x{pw}",
                    p.row, p.col
                )));
            }
            if *channels.get_or_insert(c) != c {
                return Err(Error::Shape("patches disagree on channel count".into()));
            }
            if p.row + ph > h || p.col + pw > w {
                return Err(Error::Shape(format!(
                    "patch at ({}, {}) leaves the {h}x{w} grid",
                    p.row, p.col
                )));
            }
            coverage
                .slice_mut(s![p.row..p.row + ph, p.col..p.col + pw])
                .mapv_inplace(|n| n + 1);
        }
        Ok(Self {
            patches,
            patch_size,
            source_dims: (h, w),
            coverage,
            template: template.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Replaces every tile's data through `f`, keeping offsets. Used for tiled inference.
    pub fn map_patches(
        &self,
        mut f: impl FnMut(&Patch) -> Result<Array3<f32>>,
        variables: Vec<String>,
    ) -> Result<PatchSet> {
        let patches = self
            .patches
            .iter()
            .map(|p| {
                Ok(Patch {
                    row: p.row,
                    col: p.col,
                    data: f(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let template = GridField {
            values: Array3::zeros((variables.len(), 0, 0)),
            variables,
            ..self.template.clone()
        };
        Ok(PatchSet {
            patches,
            patch_size: self.patch_size,
            source_dims: self.source_dims,
            coverage: self.coverage.clone(),
            template,
        })
    }

    /// Interior footprint edges, as (rows, cols) indices where a tile starts or ends.
    pub fn seam_lines(&self) -> (Vec<usize>, Vec<usize>) {
        let (h, w) = self.source_dims;
        let (ph, pw) = self.patch_size;
        let mut rows: Vec<usize> = self
            .patches
            .iter()
            .flat_map(|p| [p.row, p.row + ph])
            .filter(|&r| r > 0 && r < h)
            .collect();
        let mut cols: Vec<usize> = self
            .patches
            .iter()
            .flat_map(|p| [p.col, p.col + pw])
            .filter(|&c| c > 0 && c < w)
            .collect();
        rows.sort_unstable();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        (rows, cols)
    }

    /// Overlap shared with the nearest preceding / following tile along one axis.
    fn side_overlaps(offsets: &[usize], start: usize, len: usize) -> (usize, usize) {
        let end = start + len;
        let before = offsets
            .iter()
            .filter(|&&o| o < start)
            .map(|&o| (o + len).saturating_sub(start))
            .max()
            .unwrap_or(0);
        let after = offsets
            .iter()
            .filter(|&&o| o > start)
            .map(|&o| end.saturating_sub(o))
            .max()
            .unwrap_or(0);
        (before, after)
    }

    fn ramp(len: usize, before: usize, after: usize) -> Vec<f64> {
        (0..len)
            .map(|i| {
                let up = if before > 0 {
                    ((i + 1) as f64 / (before + 1) as f64).min(1.0)
                } else {
                    1.0
                };
                let down = if after > 0 {
                    ((len - i) as f64 / (after + 1) as f64).min(1.0)
                } else {
                    1.0
                };
                up.min(down)
            })
            .collect()
    }
}

pub fn unpatchify(patchset: &PatchSet, blend: Blend) -> Result<GridField> {
    let (h, w) = patchset.source_dims;
    if let Some(((r, c), _)) = patchset.coverage.indexed_iter().find(|(_, &n)| n == 0) {
        return Err(Error::Coverage(format!("pixel ({r}, {c}) is not covered")));
    }
    let channels = patchset
        .patches
        .first()
        .map(|p| p.data.dim().0)
        .ok_or_else(|| Error::Coverage("no patches".into()))?;
    let (ph, pw) = patchset.patch_size;
    let row_offsets: Vec<usize> = patchset.patches.iter().map(|p| p.row).collect();
    let col_offsets: Vec<usize> = patchset.patches.iter().map(|p| p.col).collect();

    let mut acc = Array3::<f64>::zeros((channels, h, w));
    let mut weight = Array2::<f64>::zeros((h, w));
    for p in &patchset.patches {
        let (wr, wc) = match blend {
            Blend::Average => (vec![1.0; ph], vec![1.0; pw]),
            Blend::Feather => {
                let (rb, ra) = PatchSet::side_overlaps(&row_offsets, p.row, ph);
                let (cb, ca) = PatchSet::side_overlaps(&col_offsets, p.col, pw);
                (PatchSet::ramp(ph, rb, ra), PatchSet::ramp(pw, cb, ca))
            }
        };
        for i in 0..ph {
            for j in 0..pw {
                let wt = wr[i] * wc[j];
                weight[[p.row + i, p.col + j]] += wt;
                for c in 0..channels {
                    acc[[c, p.row + i, p.col + j]] += wt * p.data[[c, i, j]] as f64;
                }
            }
        }
    }
    let mut out = Array3::<f32>::zeros((channels, h, w));
    for c in 0..channels {
        for i in 0..h {
            for j in 0..w {
                out[[c, i, j]] = (acc[[c, i, j]] / weight[[i, j]]) as f32;
            }
        }
    }
    let variables = if patchset.template.variables.len() == channels {
        patchset.template.variables.clone()
    } else {
        (0..channels).map(|c| format!("ch{c}")).collect()
    };
    Ok(patchset.template.with_values(out, variables))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn field(c: usize, h: usize, w: usize) -> GridField {
        let values = Array::from_shape_fn((c, h, w), |(k, i, j)| {
            (k * 1000 + i * 37 + j * 11) as f32 * 0.01 + 250.0
        });
        GridField::from_values(values, (0..c).map(|k| format!("v{k}")).collect()).unwrap()
    }

    #[test]
    fn constant_field_is_degenerate() {
        let f = GridField::from_values(Array3::from_elem((1, 4, 4), 5.0), vec!["a".into()])
            .unwrap();
        let st = zscore_fit(&[f], "a").unwrap();
        let a = st.get("a").unwrap();
        assert_eq!(a.mean, 5.0);
        assert_eq!(a.std, EPS_STD);
        assert!(a.degenerate);
    }

    #[test]
    fn population_statistics() {
        let f = GridField::from_values(
            Array3::from_shape_vec((1, 1, 2), vec![0.0, 2.0]).unwrap(),
            vec!["a".into()],
        )
        .unwrap();
        let st = zscore_fit(&[f], "a").unwrap();
        assert_eq!(st.get("a").unwrap().mean, 1.0);
        assert_eq!(st.get("a").unwrap().std, 1.0);

        let g = GridField::from_values(
            Array3::from_shape_vec((1, 2, 1), vec![-1.0, 1.0]).unwrap(),
            vec!["a".into()],
        )
        .unwrap();
        let st = zscore_fit(&[g.clone(), g], "a").unwrap();
        assert_eq!(st.get("a").unwrap().mean, 0.0);
        assert_eq!(st.get("a").unwrap().std, 1.0);
        assert_eq!(st.get("a").unwrap().count, 4);
    }

    #[test]
    fn fit_rejects_missing_variable_and_single_pixel() {
        let f = field(1, 3, 3);
        assert!(matches!(
            zscore_fit(&[f], "T2M"),
            Err(Error::MissingVariable(v)) if v == "T2M"
        ));
        let one = GridField::from_values(Array3::zeros((1, 1, 1)), vec!["a".into()]).unwrap();
        assert!(zscore_fit(&[one], "a").is_err());
    }

    #[test]
    fn apply_and_invert_unit_values() {
        let mut stats = NormStats::default();
        stats.insert(
            "a",
            VariableStats { mean: 280.0, std: 4.0, count: 10, degenerate: false },
        );
        let f = GridField::from_values(
            Array3::from_shape_vec((1, 1, 2), vec![280.0, 284.0]).unwrap(),
            vec!["a".into()],
        )
        .unwrap();
        let z = zscore_apply(&f, &stats).unwrap();
        assert_eq!(z.values.as_slice().unwrap(), &[0.0, 1.0]);
        let back = zscore_invert(&z, &stats).unwrap();
        assert_eq!(back.values, f.values);
        assert_eq!(back.timestamp, f.timestamp);

        let other = field(1, 2, 2).with_values(Array3::zeros((1, 2, 2)), vec!["b".into()]);
        assert!(matches!(zscore_apply(&other, &stats), Err(Error::MissingVariable(_))));
    }

    #[test]
    fn norm_stats_json_shape() {
        let st = zscore_fit(&[field(1, 4, 4)], "v0").unwrap();
        let json: serde_json::Value = serde_json::from_str(&st.to_json().unwrap()).unwrap();
        assert!(json["v0"]["mean"].is_number());
        assert!(json["v0"]["std"].is_number());
        assert_eq!(json["v0"]["count"], 16);
        assert_eq!(NormStats::from_json(&st.to_json().unwrap()).unwrap(), st);
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let mut v = Array3::<f32>::zeros((1, 3, 3));
        v[[0, 1, 2]] = f32::NAN;
        v[[0, 2, 0]] = f32::INFINITY;
        match GridField::from_values(v, vec!["a".into()]) {
            Err(Error::NonFinite { count, row, col, .. }) => {
                assert_eq!((count, row, col), (2, 1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(GridField::from_values(Array3::zeros((2, 3, 3)), vec!["a".into()]).is_err());
        assert!(GridField::new(
            Array3::zeros((1, 2, 2)),
            vec!["a".into()],
            (10.0, 5.0),
            (0.0, 1.0),
            DateTime::<Utc>::UNIX_EPOCH
        )
        .is_err());
    }

    #[test]
    fn tile_counts() {
        assert_eq!(tile_offsets(4384, 1000, OverlapPolicy::ShiftLast).len(), 5);
        assert_eq!(tile_offsets(6880, 1000, OverlapPolicy::ShiftLast).len(), 7);
        assert_eq!(tile_offsets(256, 256, OverlapPolicy::ShiftLast), vec![0]);
        assert_eq!(tile_offsets(300, 256, OverlapPolicy::ShiftLast), vec![0, 44]);
        assert_eq!(tile_offsets(256, 96, OverlapPolicy::ShiftLast), vec![0, 96, 160]);
        assert_eq!(tile_offsets(10, 4, OverlapPolicy::MinOverlap(2)), vec![0, 2, 4, 6]);
    }

    #[test]
    fn patchify_shapes() {
        let ps = patchify(&field(1, 300, 300), (256, 256), OverlapPolicy::ShiftLast).unwrap();
        assert_eq!(ps.len(), 4);
        assert_eq!(ps.patches[3].row, 44);
        assert_eq!(ps.patches[3].col, 44);
        assert_eq!(ps.coverage[[100, 100]], 4);
        assert_eq!(ps.coverage[[0, 0]], 1);
        assert_eq!(ps.coverage[[299, 0]], 1);
        assert!(patchify(&field(1, 8, 8), (9, 4), OverlapPolicy::ShiftLast).is_err());
    }

    #[test]
    fn exact_fit_returns_patch() {
        let f = field(2, 16, 16);
        let ps = patchify(&f, (16, 16), OverlapPolicy::ShiftLast).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!((ps.patches[0].row, ps.patches[0].col), (0, 0));
        for blend in [Blend::Average, Blend::Feather] {
            assert_eq!(unpatchify(&ps, blend).unwrap(), f);
        }
    }

    #[test]
    fn average_blend_of_constant_tiles() {
        let template = field(1, 4, 6);
        let patches = vec![
            Patch { row: 0, col: 0, data: Array3::from_elem((1, 4, 4), 0.0) },
            Patch { row: 0, col: 2, data: Array3::from_elem((1, 4, 4), 2.0) },
        ];
        let ps = PatchSet::from_parts(patches, (4, 4), &template).unwrap();
        let out = unpatchify(&ps, Blend::Average).unwrap();
        let row: Vec<f32> = out.values.slice(s![0, 1, ..]).to_vec();
        assert_eq!(row, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);

        // feather ramps across the two shared columns
        let out = unpatchify(&ps, Blend::Feather).unwrap();
        let row: Vec<f32> = out.values.slice(s![0, 1, ..]).to_vec();
        assert!(row[2] > 0.0 && row[2] < row[3] && row[3] < 2.0);
        assert_eq!((row[1], row[4]), (0.0, 2.0));
    }

    #[test]
    fn coverage_hole_is_structural_error() {
        let template = field(1, 4, 8);
        let patches = vec![Patch { row: 0, col: 0, data: Array3::zeros((1, 4, 4)) }];
        let ps = PatchSet::from_parts(patches, (4, 4), &template).unwrap();
        assert!(matches!(unpatchify(&ps, Blend::Average), Err(Error::Coverage(_))));
    }

    #[test]
    fn seam_lines_are_interior_edges() {
        let ps = patchify(&field(1, 256, 256), (96, 96), OverlapPolicy::ShiftLast).unwrap();
        let (rows, cols) = ps.seam_lines();
        assert_eq!(rows, vec![96, 160, 192]);
        assert_eq!(cols, rows);
    }
}
