//! Synthetic benchmarks, label-shift resampling and CSV I/O.
//!
//! Dataset CSV layout: a header `f0,...,f{d-1},label,domain`, one row per
//! sample. `label` is empty for unlabeled data. Floats are written in the
//! shortest decimal form that parses back to the same bits (never more than
//! 17 significant digits).

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    TwoMoonsRotation,
    GaussianShift,
    GaussianRingShift,
    PortraitsLikeDrift,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::TwoMoonsRotation => "two_moons_rotation",
            Family::GaussianShift => "gaussian_shift",
            Family::GaussianRingShift => "gaussian_ring_shift",
            Family::PortraitsLikeDrift => "portraits_like_drift",
        }
    }

    pub fn is_rotation(self) -> bool {
        matches!(self, Family::TwoMoonsRotation | Family::PortraitsLikeDrift)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "two_moons_rotation" => Ok(Family::TwoMoonsRotation),
            "gaussian_shift" => Ok(Family::GaussianShift),
            "gaussian_ring_shift" => Ok(Family::GaussianRingShift),
            "portraits_like_drift" => Ok(Family::PortraitsLikeDrift),
            other => Err(Error::Config(format!("unknown dataset family {other:?}"))),
        }
    }
}

/// Number of modes in the ring benchmark.
pub const RING_MODES: usize = 8;
/// Radius of the ring benchmark.
pub const RING_RADIUS: f64 = 3.0;
/// Feature dimension of the portraits-like benchmark.
pub const PORTRAITS_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub family: Family,
    /// Samples per domain.
    pub n: usize,
    /// Rotation of the target, in degrees (rotation families).
    pub angle_deg: Option<f64>,
    /// Translation of the target (shift families). Missing trailing
    /// coordinates are zero.
    pub shift: Option<Vec<f64>>,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("n must be at least 2, got {}", self.n)));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.family.is_rotation() {
            match self.angle_deg {
                None => {
                    return Err(Error::Config(format!(
                        "family {} requires --angle",
                        self.family
                    )))
                }
                Some(a) if !a.is_finite() => return Err(Error::Config("angle must be finite".into())),
                _ => {}
            }
        } else if let Some(shift) = &self.shift {
            if shift.iter().any(|v| !v.is_finite()) || shift.len() > self.dim() {
                return Err(Error::Config(format!(
                    "shift must hold at most {} finite values",
                    self.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self.family {
            Family::PortraitsLikeDrift => PORTRAITS_DIM,
            _ => 2,
        }
    }

    fn shift_vector(&self, default: &[f64]) -> Array1<f64> {
        let mut v = Array1::zeros(self.dim());
        let src = self.shift.as_deref().unwrap_or(default);
        for (dst, s) in v.iter_mut().zip(src) {
            *dst = *s;
        }
        v
    }
}

/// Rotates the first two coordinates of every row by `angle_deg` about
/// `center`.
pub fn rotate(points: &Array2<f64>, angle_deg: f64, center: (f64, f64)) -> Array2<f64> {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let mut out = points.clone();
    for mut row in out.outer_iter_mut() {
        let (x, y) = (row[0] - center.0, row[1] - center.1);
        row[0] = center.0 + c * x - s * y;
        row[1] = center.1 + s * x + c * y;
    }
    out
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn shuffled(features: Array2<f64>, labels: Vec<usize>, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    let feats = features.select(ndarray::Axis(0), &order);
    let labs = order.iter().map(|&i| labels[i]).collect();
    (feats, labs)
}

/// Two interleaved half circles, `n/2` per class (class 1 gets the odd one).
fn two_moons(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>) {
    let n0 = n / 2;
    let mut x = Array2::zeros((n, 2));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random_range(0.0..std::f64::consts::PI);
        let (px, py, label) = if i < n0 {
            (t.cos(), t.sin(), 0)
        } else {
            (1.0 - t.cos(), 0.5 - t.sin(), 1)
        };
        x[[i, 0]] = px + noise * normal(rng);
        x[[i, 1]] = py + noise * normal(rng);
        y.push(label);
    }
    shuffled(x, y, rng)
}

/// Center of the two-moons layout; rotations pivot here.
pub const MOONS_CENTER: (f64, f64) = (0.5, 0.25);

fn gaussian_blob(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, dim), || normal(rng))
}

fn ring(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>) {
    let mut x = Array2::zeros((n, 2));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let mode = i % RING_MODES;
        let theta = 2.0 * std::f64::consts::PI * mode as f64 / RING_MODES as f64;
        x[[i, 0]] = RING_RADIUS * theta.cos() + noise * normal(rng);
        x[[i, 1]] = RING_RADIUS * theta.sin() + noise * normal(rng);
        y.push(mode % 2);
    }
    shuffled(x, y, rng)
}

/// Two elongated class clusters in 8 dimensions.
fn portraits_like(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>) {
    let n0 = n / 2;
    let mut x = Array2::zeros((n, PORTRAITS_DIM));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = usize::from(i >= n0);
        let sign = if label == 0 { -1.0 } else { 1.0 };
        let along = 1.5 * normal(rng);
        x[[i, 0]] = along;
        x[[i, 1]] = sign * 1.2 + 0.3 * along.sin() + noise * normal(rng);
        for k in 2..PORTRAITS_DIM {
            x[[i, k]] = 0.5 * sign / k as f64 + noise * normal(rng);
        }
        y.push(label);
    }
    shuffled(x, y, rng)
}

/// Source and target domains for a synthetic benchmark, both labeled.
/// Callers hold the target labels out of training.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;
    let ((xs, ys), (xt, yt)) = match spec.family {
        Family::TwoMoonsRotation => {
            let src = two_moons(n, spec.noise, &mut rng);
            let (x, y) = two_moons(n, spec.noise, &mut rng);
            let angle = spec.angle_deg.unwrap_or(0.0);
            (src, (rotate(&x, angle, MOONS_CENTER), y))
        }
        Family::GaussianShift => {
            let shift = spec.shift_vector(&[4.0, 0.0]);
            let xs = gaussian_blob(n, 2, &mut rng);
            let xt = gaussian_blob(n, 2, &mut rng);
            let ys: Vec<usize> = xs.column(1).iter().map(|&v| usize::from(v > 0.0)).collect();
            let yt: Vec<usize> = xt.column(1).iter().map(|&v| usize::from(v > 0.0)).collect();
            ((xs, ys), (xt + &shift, yt))
        }
        Family::GaussianRingShift => {
            let shift = spec.shift_vector(&[3.0, 0.0]);
            let src = ring(n, spec.noise, &mut rng);
            let (x, y) = ring(n, spec.noise, &mut rng);
            (src, (x + &shift, y))
        }
        Family::PortraitsLikeDrift => {
            let src = portraits_like(n, spec.noise, &mut rng);
            let (x, y) = portraits_like(n, spec.noise, &mut rng);
            let angle = spec.angle_deg.unwrap_or(0.0);
            let mut x = rotate(&x, angle, (0.0, 0.0));
            x.column_mut(2).mapv_inplace(|v| v + 0.5);
            (src, (x, y))
        }
    };
    Ok((
        Dataset::new(xs, Some(ys), 0, 2)?,
        Dataset::new(xt, Some(yt), 1, 2)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelShiftSpec {
    /// Requested `p(y = 1)`; 0 and 1 give single-class sets.
    pub positive_prior: f64,
    pub n: usize,
    pub seed: u64,
}

/// Resamples a binary dataset with replacement so that exactly
/// `round(prior * n)` rows are positive.
pub fn resample_label_shift(data: &Dataset, spec: &LabelShiftSpec) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&spec.positive_prior) {
        return Err(Error::Config(format!(
            "prior must lie in [0, 1], got {}",
            spec.positive_prior
        )));
    }
    if spec.n == 0 {
        return Err(Error::Config("label-shift sample size must be positive".into()));
    }
    let labels = data.labels()?;
    if data.class_count != 2 || labels.iter().any(|&l| l > 1) {
        return Err(Error::Contract("label-shift resampling needs binary labels".into()));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let n_pos = (spec.positive_prior * spec.n as f64).round() as usize;
    let n_neg = spec.n - n_pos;
    if n_pos > 0 && pos.is_empty() {
        return Err(Error::Contract("no positive rows to resample from".into()));
    }
    if n_neg > 0 && neg.is_empty() {
        return Err(Error::Contract("no negative rows to resample from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = Vec::with_capacity(spec.n);
    for _ in 0..n_pos {
        rows.push(pos[rng.random_range(0..pos.len())]);
    }
    for _ in 0..n_neg {
        rows.push(neg[rng.random_range(0..neg.len())]);
    }
    rows.shuffle(&mut rng);
    Ok(data.select(&rows))
}

/// Loads a dataset CSV (see module docs).
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = File::open(path.as_ref())?;
    read_csv(BufReader::new(file))
}

pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let table = read_table(reader)?;
    let d = table.header.len().saturating_sub(2);
    let expected: Vec<String> = (0..d)
        .map(|k| format!("f{k}"))
        .chain(["label".to_string(), "domain".to_string()])
        .collect();
    if table.header.len() < 3 || table.header != expected {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header f0..f{{d-1}},label,domain, got {:?}", table.header),
        });
    }
    if table.rows.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    let mut features = Array2::zeros((table.rows.len(), d));
    let mut labels: Vec<Option<usize>> = Vec::with_capacity(table.rows.len());
    let mut domain = None;
    for (r, (line, row)) in table.lines.iter().zip(&table.rows).enumerate() {
        let line = *line;
        for k in 0..d {
            let v: f64 = row[k].trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("column f{k}: {:?} is not a number", row[k]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("column f{k} is not finite"),
                });
            }
            features[[r, k]] = v;
        }
        let label = row[d].trim();
        labels.push(if label.is_empty() {
            None
        } else {
            Some(label.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("label {label:?} is not a non-negative integer"),
            })?)
        });
        let dom: usize = row[d + 1].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("domain {:?} is not a non-negative integer", row[d + 1]),
        })?;
        match domain {
            None => domain = Some(dom),
            Some(first) if first != dom => {
                return Err(Error::Parse {
                    line,
                    msg: format!("mixed domains in one file ({first} and {dom})"),
                })
            }
            _ => {}
        }
    }
    let labeled = labels.iter().filter(|l| l.is_some()).count();
    let labels = if labeled == 0 {
        None
    } else if labeled == labels.len() {
        Some(labels.into_iter().map(|l| l.unwrap()).collect::<Vec<_>>())
    } else {
        let line = table.lines[labels.iter().position(|l| l.is_none()).unwrap()];
        return Err(Error::Parse {
            line,
            msg: "file mixes labeled and unlabeled rows".into(),
        });
    };
    let class_count = labels
        .as_ref()
        .map(|l| l.iter().copied().max().unwrap_or(0) + 1)
        .unwrap_or(0);
    Dataset::new(features, labels, domain.unwrap_or(0), class_count)
}

/// Writes a dataset CSV; floats use shortest round-trip formatting.
pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    write_csv(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_csv<W: Write>(dataset: &Dataset, w: &mut W) -> Result<()> {
    let d = dataset.dim();
    let header: Vec<String> = (0..d)
        .map(|k| format!("f{k}"))
        .chain(["label".to_string(), "domain".to_string()])
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (i, row) in dataset.features.outer_iter().enumerate() {
        let mut line = row.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",");
        line.push(',');
        if let Some(labels) = &dataset.labels {
            line.push_str(&labels[i].to_string());
        }
        line.push(',');
        line.push_str(&dataset.domain_index.to_string());
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// A parsed CSV with a header row; `lines[i]` is the 1-based file line of
/// `rows[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub lines: Vec<usize>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k].as_str()).collect())
    }
}

/// Reads any header-first CSV, rejecting ragged rows. Accepts LF or CRLF.
pub fn read_table<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header: Vec<String> = match records.next() {
        Some(rec) => rec
            .map_err(|e| csv_error(e, 1))?
            .iter()
            .map(|s| s.trim().to_string())
            .collect(),
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
    };
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_error(e, 0))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() == 1 && rec.get(0).map(str::trim) == Some("") {
            continue;
        }
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        rows.push(rec.iter().map(str::to_string).collect());
        lines.push(line);
    }
    Ok(Table { header, rows, lines })
}

pub fn load_table(path: impl AsRef<Path>) -> Result<Table> {
    read_table(BufReader::new(File::open(path.as_ref())?))
}

fn csv_error(e: csv::Error, fallback_line: usize) -> Error {
    let line = e
        .position()
        .map(|p| p.line() as usize)
        .unwrap_or(fallback_line);
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}
