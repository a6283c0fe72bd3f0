use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An `L × C` multivariate series, row-major by time step.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesFrame {
    values: Vec<f32>,
    len: usize,
    channels: usize,
    timestamps: Option<Vec<i64>>,
    channel_names: Vec<String>,
}

impl TimeSeriesFrame {
    pub fn new(values: Vec<f32>, channels: usize, channel_names: Vec<String>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Data("frame needs at least one channel".into()));
        }
        if !values.len().is_multiple_of(channels) {
            return Err(Error::Data(format!(
                "{} values do not fill rows of {channels} channels",
                values.len()
            )));
        }
        if channel_names.len() != channels {
            return Err(Error::Data("channel name count differs from channel count".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Ingest {
                row: i / channels,
                column: i % channels,
                detail: "non-finite value".into(),
            });
        }
        Ok(Self {
            len: values.len() / channels,
            values,
            channels,
            timestamps: None,
            channel_names,
        })
    }

    /// Frame from a closure `f(t, c)`, channels named `c0..`.
    pub fn from_fn(len: usize, channels: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut values = Vec::with_capacity(len * channels);
        for t in 0..len {
            for c in 0..channels {
                values.push(f(t, c));
            }
        }
        Self::new(values, channels, (0..channels).map(|c| format!("c{c}")).collect())
    }

    pub fn with_timestamps(mut self, ts: Vec<i64>) -> Result<Self> {
        if ts.len() != self.len {
            return Err(Error::Data("timestamp count differs from row count".into()));
        }
        if let Some(i) = ts.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "timestamps not strictly increasing at row {}",
                i + 1
            )));
        }
        self.timestamps = Some(ts);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn value(&self, t: usize, c: usize) -> f32 {
        self.values[t * self.channels + c]
    }

    pub fn timestamps(&self) -> Option<&[i64]> {
        self.timestamps.as_deref()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    /// Rows `range` as a new frame (possibly empty).
    pub fn slice(&self, range: Range<usize>) -> Self {
        let c = self.channels;
        Self {
            values: self.values[range.start * c..range.end * c].to_vec(),
            len: range.len(),
            channels: c,
            timestamps: self.timestamps.as_ref().map(|t| t[range.clone()].to_vec()),
            channel_names: self.channel_names.clone(),
        }
    }

    /// The `len × C` window starting at `start`.
    pub fn window(&self, start: usize, len: usize) -> Result<Tensor<f32>> {
        if len == 0 || start + len > self.len {
            return Err(Error::Data(format!(
                "window [{start}, {}) exceeds series length {}",
                start + len,
                self.len
            )));
        }
        let c = self.channels;
        Tensor::new(
            vec![len, c],
            self.values[start * c..(start + len) * c].to_vec(),
        )
    }
}

fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y/%m/%d %H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .map(|d| d.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp())
}

/// Reads a headered CSV. With `has_timestamp_column` the first column holds
/// integer or ISO-8601 timestamps; every other column must be numeric.
///
/// Row numbers in errors count file lines (the header is line 1); columns
/// are 1-based.
pub fn load_csv(path: impl AsRef<Path>, has_timestamp_column: bool) -> Result<TimeSeriesFrame> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    let skip = usize::from(has_timestamp_column);
    if headers.len() <= skip {
        return Err(Error::Data(format!("{}: no value columns", path.display())));
    }
    let names: Vec<String> = headers.iter().skip(skip).map(|h| h.trim().to_string()).collect();
    let channels = names.len();

    let mut values = Vec::new();
    let mut stamps = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::Ingest {
            row,
            column: 0,
            detail: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Ingest {
                row,
                column: record.len().min(headers.len()) + 1,
                detail: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        if has_timestamp_column {
            let ts = parse_timestamp(&record[0]).ok_or_else(|| Error::Ingest {
                row,
                column: 1,
                detail: format!("unparseable timestamp `{}`", &record[0]),
            })?;
            stamps.push(ts);
        }
        for (j, cell) in record.iter().enumerate().skip(skip) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Ingest {
                row,
                column: j + 1,
                detail: format!("unparseable number `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingest {
                    row,
                    column: j + 1,
                    detail: "non-finite value".into(),
                });
            }
            values.push(v as f32);
        }
    }
    if values.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let frame = TimeSeriesFrame::new(values, channels, names)?;
    if has_timestamp_column {
        frame.with_timestamps(stamps)
    } else {
        Ok(frame)
    }
}

/// How to cut a series into train/validation/test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitSizes {
    Ratios(f64, f64, f64),
    Fixed(usize, usize, usize),
}

/// Chronological, disjoint index ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitSpec {
    pub fn new(len: usize, sizes: SplitSizes) -> Result<Self> {
        let (a, b, c) = match sizes {
            SplitSizes::Fixed(a, b, c) => (a, b, c),
            SplitSizes::Ratios(ra, rb, rc) => {
                if [ra, rb, rc].iter().any(|r| !(0.0..=1.0).contains(r)) {
                    return Err(Error::Config(format!("split ratios out of range: {ra}/{rb}/{rc}")));
                }
                let sum = ra + rb + rc;
                if sum > 1.0 + 1e-9 {
                    return Err(Error::Config(format!("split ratios sum to {sum} > 1")));
                }
                let n = len as f64;
                let a = (n * ra + 1e-9).floor() as usize;
                let b = (n * rb + 1e-9).floor() as usize;
                let c = if (sum - 1.0).abs() < 1e-9 && rc > 0.0 {
                    len - a - b
                } else {
                    (n * rc + 1e-9).floor() as usize
                };
                (a, b, c)
            }
        };
        if a + b + c > len {
            return Err(Error::Config(format!(
                "split sizes {a}+{b}+{c} exceed series length {len}"
            )));
        }
        Ok(Self {
            train: 0..a,
            val: a..a + b,
            test: a + b..a + b + c,
        })
    }
}

/// Splits `frame` into contiguous train, validation and test frames.
pub fn chronological_split(
    frame: &TimeSeriesFrame,
    sizes: SplitSizes,
) -> Result<(TimeSeriesFrame, TimeSeriesFrame, TimeSeriesFrame)> {
    let spec = SplitSpec::new(frame.len(), sizes)?;
    Ok((
        frame.slice(spec.train),
        frame.slice(spec.val),
        frame.slice(spec.test),
    ))
}

/// Start indices of every `(input_len + horizon)` window inside `frame`.
pub fn forecast_starts(frame_len: usize, input_len: usize, horizon: usize) -> Vec<usize> {
    let span = input_len + horizon;
    if frame_len < span {
        return Vec::new();
    }
    (0..=frame_len - span).collect()
}

/// Per-channel z-scoring fitted on one frame (normally the training split)
/// and applied to others.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardScaler {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl StandardScaler {
    pub fn fit(frame: &TimeSeriesFrame) -> Result<Self> {
        if frame.is_empty() {
            return Err(Error::Data("cannot fit a scaler on an empty frame".into()));
        }
        let c = frame.channels();
        let n = frame.len() as f64;
        let mut mean = vec![0.0f64; c];
        for row in frame.values().chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; c];
        for row in frame.values().chunks(c) {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        Ok(Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var
                .iter()
                .map(|&s| ((s / n).sqrt() as f32).max(super::NORM_EPS))
                .collect(),
        })
    }

    pub fn transform(&self, frame: &TimeSeriesFrame) -> TimeSeriesFrame {
        let c = frame.channels();
        let mut out = frame.clone();
        for (i, v) in out.values.iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
        out
    }
}
