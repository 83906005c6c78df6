//! Paired source/target datasets with a controlled covariate shift, and
//! their CSV + JSON-manifest file formats.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::rng::{self, streams, StreamRng};

/// Radius of the circle the gauss_blobs class means sit on.
pub const BLOB_RADIUS: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    TwoMoons,
    GaussBlobs,
}

/// Rotation angle in degrees (two_moons) or mean translation (gauss_blobs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Shift {
    RotationDeg(f64),
    Translation(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub family: Family,
    #[serde(rename = "K")]
    pub class_count: usize,
    pub n_per_class: usize,
    pub noise_sigma: f64,
    pub shift: Shift,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn two_moons(rotation_deg: f64, n_per_class: usize, noise_sigma: f64, seed: u64) -> Self {
        ShiftSpec {
            family: Family::TwoMoons,
            class_count: 2,
            n_per_class,
            noise_sigma,
            shift: Shift::RotationDeg(rotation_deg),
            seed,
        }
    }

    pub fn gauss_blobs(
        class_count: usize,
        translation: Vec<f64>,
        n_per_class: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        ShiftSpec {
            family: Family::GaussBlobs,
            class_count,
            n_per_class,
            noise_sigma,
            shift: Shift::Translation(translation),
            seed,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match (&self.family, &self.shift) {
            (Family::GaussBlobs, Shift::Translation(t)) => t.len(),
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and >= 0"));
        }
        if self.n_per_class == 0 {
            return Err(Error::config("n_per_class", "must be >= 1"));
        }
        match (&self.family, &self.shift) {
            (Family::TwoMoons, Shift::RotationDeg(a)) => {
                if self.class_count != 2 {
                    return Err(Error::config("K", "two_moons has exactly 2 classes"));
                }
                if !a.is_finite() {
                    return Err(Error::config("shift", "rotation must be finite"));
                }
            }
            (Family::GaussBlobs, Shift::Translation(t)) => {
                if self.class_count < 2 {
                    return Err(Error::config("K", "gauss_blobs needs K >= 2"));
                }
                if t.is_empty() || t.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config("shift", "translation must be a non-empty finite vector"));
                }
            }
            (Family::TwoMoons, _) => {
                return Err(Error::config("shift", "two_moons takes a rotation angle in degrees"))
            }
            (Family::GaussBlobs, _) => {
                return Err(Error::config("shift", "gauss_blobs takes a translation vector"))
            }
        }
        Ok(())
    }

    /// Class means of the unshifted gauss_blobs distribution.
    pub fn blob_means(&self) -> Vec<Vec<f64>> {
        let d = self.feature_dim();
        (0..self.class_count)
            .map(|k| {
                let mut mean = vec![0.0; d];
                if d == 1 {
                    mean[0] = BLOB_RADIUS * k as f64;
                } else {
                    let angle = 2.0 * PI * k as f64 / self.class_count as f64;
                    mean[0] = BLOB_RADIUS * angle.cos();
                    mean[1] = BLOB_RADIUS * angle.sin();
                }
                mean
            })
            .collect()
    }
}

/// Features with integer class labels; sample `i` has id `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledSet {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Contract(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Contract(format!("label {bad} outside [0, {class_count})")));
        }
        let mut seen = vec![false; class_count];
        labels.iter().for_each(|&l| seen[l] = true);
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!("class {missing} has no samples")));
        }
        Ok(LabeledSet {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn ids(&self) -> std::ops::Range<usize> {
        0..self.len()
    }

    /// Features-only view handed to adaptation; labels stay behind.
    pub fn unlabeled(&self) -> TargetView {
        TargetView {
            features: self.features.clone(),
        }
    }
}

/// Unlabeled target data. Row `i` is target sample id `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetView {
    features: Matrix,
}

impl TargetView {
    pub fn new(features: Matrix) -> Self {
        TargetView { features }
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Target,
}

fn sample_base(spec: &ShiftSpec, rng: &mut StreamRng) -> Result<LabeledSet> {
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let d = spec.feature_dim();
    let n = spec.class_count * spec.n_per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let means = spec.blob_means();
    for k in 0..spec.class_count {
        for _ in 0..spec.n_per_class {
            match spec.family {
                Family::TwoMoons => {
                    let t: f64 = rng.random_range(0.0..PI);
                    let (x, y) = if k == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    data.push(x + noise.sample(rng));
                    data.push(y + noise.sample(rng));
                }
                Family::GaussBlobs => {
                    for m in &means[k] {
                        data.push(m + noise.sample(rng));
                    }
                }
            }
            labels.push(k);
        }
    }
    LabeledSet::new(Matrix::new(n, d, data)?, labels, spec.class_count)
}

fn apply_shift(spec: &ShiftSpec, set: &mut LabeledSet) {
    match &spec.shift {
        Shift::RotationDeg(deg) => {
            let (s, c) = deg.to_radians().sin_cos();
            for r in 0..set.features.rows() {
                let row = set.features.row_mut(r);
                let (x, y) = (row[0], row[1]);
                row[0] = c * x - s * y;
                row[1] = s * x + c * y;
            }
        }
        Shift::Translation(t) => {
            for r in 0..set.features.rows() {
                for (v, dv) in set.features.row_mut(r).iter_mut().zip(t) {
                    *v += dv;
                }
            }
        }
    }
}

/// Draws one domain. `stream_id` separates independent draws from the same
/// spec (source, target, held-out source).
pub fn sample_domain(spec: &ShiftSpec, role: Role, stream_id: u64) -> Result<LabeledSet> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, stream_id);
    let mut set = sample_base(spec, &mut rng)?;
    if role == Role::Target {
        apply_shift(spec, &mut set);
    }
    Ok(set)
}

pub fn generate_pair(spec: &ShiftSpec) -> Result<(LabeledSet, LabeledSet)> {
    let source = sample_domain(spec, Role::Source, streams::SOURCE_DATA)?;
    let target = sample_domain(spec, Role::Target, streams::TARGET_DATA)?;
    Ok((source, target))
}

/// An independent source-domain draw for measuring source generalization.
pub fn generate_heldout_source(spec: &ShiftSpec) -> Result<LabeledSet> {
    sample_domain(spec, Role::Source, streams::HELDOUT_DATA)
}

// ---- file formats ----

/// 17 significant digits; parses back to the identical f64.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub family: Family,
    #[serde(rename = "K")]
    pub class_count: usize,
    pub n_per_class: usize,
    pub noise_sigma: f64,
    pub shift: Shift,
    pub seed: u64,
    pub role: Role,
}

impl Manifest {
    pub fn new(spec: &ShiftSpec, role: Role) -> Self {
        Manifest {
            family: spec.family,
            class_count: spec.class_count,
            n_per_class: spec.n_per_class,
            noise_sigma: spec.noise_sigma,
            shift: spec.shift.clone(),
            seed: spec.seed,
            role,
        }
    }
}

pub fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn write_dataset(set: &LabeledSet, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let mut header = String::from("id,label");
    for j in 0..set.feature_dim() {
        header.push_str(&format!(",f{j}"));
    }
    writeln!(out, "{header}")?;
    for (i, row) in set.features.row_iter().enumerate() {
        write!(out, "{i},{}", set.labels[i])?;
        for v in row {
            write!(out, ",{}", format_f64(*v))?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn parse_err(line: u64, reason: impl Into<String>) -> Error {
    Error::Parse {
        line,
        reason: reason.into(),
    }
}

/// Reads a dataset CSV. Rows may appear in any order but ids must be
/// exactly `0..n`; labels must lie in `[0, class_count)`.
pub fn read_dataset(path: &Path, class_count: usize) -> Result<LabeledSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "label" {
        return Err(parse_err(1, "header must start with id,label and name at least one feature"));
    }
    let d = headers.len() - 2;
    for (j, h) in headers.iter().skip(2).enumerate() {
        if h != format!("f{j}") {
            return Err(parse_err(1, format!("expected column f{j}, found `{h}`")));
        }
    }

    let mut rows: Vec<Option<(usize, Vec<f64>, u64)>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != d + 2 {
            return Err(parse_err(line, format!("expected {} fields, found {}", d + 2, record.len())));
        }
        let id: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad id `{}`", &record[0])))?;
        let label: usize = record[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad label `{}`", &record[1])))?;
        if label >= class_count {
            return Err(parse_err(line, format!("label {label} >= K = {class_count}")));
        }
        let mut feats = Vec::with_capacity(d);
        for field in record.iter().skip(2) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("bad float `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line, "non-finite feature"));
            }
            feats.push(v);
        }
        if rows.len() <= id {
            rows.resize(id + 1, None);
        }
        if let Some((_, _, first)) = &rows[id] {
            return Err(parse_err(line, format!("duplicate id {id} (first on line {first})")));
        }
        rows[id] = Some((label, feats, line));
    }

    let n = rows.len();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (id, row) in rows.into_iter().enumerate() {
        let (label, feats, _) = row.ok_or_else(|| parse_err(0, format!("ids are not dense: {id} is missing")))?;
        labels.push(label);
        data.extend(feats);
    }
    LabeledSet::new(Matrix::new(n, d, data)?, labels, class_count)
        .map_err(|e| parse_err(0, e.to_string()))
}

/// Reads a dataset CSV together with its sidecar manifest.
pub fn load_dataset(csv_path: &Path) -> Result<(LabeledSet, Manifest)> {
    let manifest = read_manifest(&manifest_path(csv_path))?;
    let set = read_dataset(csv_path, manifest.class_count)?;
    Ok((set, manifest))
}

pub fn save_dataset(set: &LabeledSet, manifest: &Manifest, csv_path: &Path) -> Result<()> {
    write_dataset(set, csv_path)?;
    write_manifest(manifest, &manifest_path(csv_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_mean(set: &LabeledSet, k: usize) -> Vec<f64> {
        let d = set.feature_dim();
        let mut mean = vec![0.0; d];
        let mut count = 0.0;
        for (row, &l) in set.features().row_iter().zip(set.labels()) {
            if l == k {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                count += 1.0;
            }
        }
        mean.iter().map(|m| m / count).collect()
    }

    #[test]
    fn validation_names_the_field() {
        let mut spec = ShiftSpec::two_moons(10.0, 5, 0.1, 0);
        spec.class_count = 3;
        assert!(matches!(spec.validate(), Err(Error::Config { field: "K", .. })));
        let spec = ShiftSpec::two_moons(10.0, 5, -0.1, 0);
        assert!(matches!(spec.validate(), Err(Error::Config { field: "noise_sigma", .. })));
        let spec = ShiftSpec::gauss_blobs(1, vec![1.0], 5, 0.1, 0);
        assert!(matches!(spec.validate(), Err(Error::Config { field: "K", .. })));
        let mut spec = ShiftSpec::gauss_blobs(3, vec![1.0, 0.0], 5, 0.1, 0);
        spec.shift = Shift::RotationDeg(3.0);
        assert!(matches!(spec.validate(), Err(Error::Config { field: "shift", .. })));
    }

    #[test]
    fn zero_rotation_uses_same_generator() {
        let spec = ShiftSpec::two_moons(0.0, 50, 0.1, 4);
        let (src, tgt) = generate_pair(&spec).unwrap();
        // a target draw on the target stream equals an unshifted source draw on that stream
        let unshifted = sample_domain(&spec, Role::Source, streams::TARGET_DATA).unwrap();
        assert_eq!(tgt, unshifted);
        assert_ne!(src, tgt);
    }

    #[test]
    fn blob_translation_moves_means_exactly() {
        let spec = ShiftSpec::gauss_blobs(3, vec![5.0, 0.0], 10, 0.3, 1);
        let means = spec.blob_means();
        let base = sample_domain(&spec, Role::Source, streams::TARGET_DATA).unwrap();
        let (_, tgt) = generate_pair(&spec).unwrap();
        for k in 0..3 {
            let b = class_mean(&base, k);
            let t = class_mean(&tgt, k);
            assert!((t[0] - b[0] - 5.0).abs() < 1e-12);
            assert!((t[1] - b[1]).abs() < 1e-12);
        }
        assert!((means[1][0] - BLOB_RADIUS * (2.0 * PI / 3.0).cos()).abs() < 1e-15);
    }

    #[test]
    fn rotation_preserves_radius() {
        let spec = ShiftSpec::two_moons(45.0, 20, 0.1, 2);
        let base = sample_domain(&spec, Role::Source, streams::TARGET_DATA).unwrap();
        let (_, tgt) = generate_pair(&spec).unwrap();
        for (a, b) in base.features().row_iter().zip(tgt.features().row_iter()) {
            assert!((crate::autodiff::norm(a) - crate::autodiff::norm(b)).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ShiftSpec::gauss_blobs(4, vec![1.0, -2.0, 0.5], 7, 0.2, 99);
        assert_eq!(generate_pair(&spec).unwrap(), generate_pair(&spec).unwrap());
    }

    #[test]
    fn every_class_present() {
        let spec = ShiftSpec::gauss_blobs(5, vec![0.0; 3], 1, 0.0, 0);
        let (src, _) = generate_pair(&spec).unwrap();
        assert_eq!(src.labels(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn manifest_json_field_names() {
        let spec = ShiftSpec::two_moons(45.0, 200, 0.15, 0);
        let json = serde_json::to_value(Manifest::new(&spec, Role::Target)).unwrap();
        assert_eq!(json["family"], "two_moons");
        assert_eq!(json["K"], 2);
        assert_eq!(json["shift"], 45.0);
        assert_eq!(json["role"], "target");
        let spec = ShiftSpec::gauss_blobs(3, vec![5.0, 0.0], 4, 0.1, 1);
        let json = serde_json::to_value(Manifest::new(&spec, Role::Source)).unwrap();
        assert_eq!(json["shift"], serde_json::json!([5.0, 0.0]));
    }

    #[test]
    fn format_round_trips_bit_exact() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 123456.789e10, f64::MIN_POSITIVE] {
            let s = format_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
    }
}
