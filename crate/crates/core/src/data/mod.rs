//! Multivariate series ingestion, the `.dds` image format and synthetic sets
//! with known ground truth.

mod dds;
mod synth;

use std::io::Read;
use std::path::Path;

use crate::error::{arg, Error, Result};
use crate::image::{ImageSet, SetTag};
use crate::scalar::Scalar;

pub use dds::{decode_dds, encode_dds, read_dds, write_dds, DDS_MAGIC};
pub use synth::{synth_gaussian_ar1, synth_two_clusters, Ar1Sample, TwoClusterSample};

/// `T x C` matrix: one row per timestep, one column per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesMatrix<T> {
    timesteps: usize,
    channels: usize,
    values: Vec<T>,
    pub column_names: Option<Vec<String>>,
}

impl<T: Scalar> SeriesMatrix<T> {
    pub fn new(timesteps: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return arg("a series needs at least one channel");
        }
        if values.len() != timesteps * channels {
            return Err(Error::Shape(format!(
                "{} values for a {timesteps} x {channels} series",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "value at timestep {}, channel {} is not finite",
                pos / channels,
                pos % channels
            )));
        }
        Ok(Self { timesteps, channels, values, column_names: None })
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, t: usize, c: usize) -> T {
        self.values[t * self.channels + c]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Min/max over the whole series.
    GlobalMinMax,
    /// Min/max over each window separately.
    PerImageMinMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: usize,
    pub stride: usize,
    pub normalization: Normalization,
}

fn min_max<T: Scalar>(values: impl Iterator<Item = T>) -> (T, T) {
    values.fold((T::infinity(), T::neg_infinity()), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn rescale<T: Scalar>(v: T, lo: T, hi: T) -> T {
    if hi > lo {
        ((v - lo) / (hi - lo)).max(T::zero()).min(T::one())
    } else {
        T::lit(0.5)
    }
}

/// Slides a window over time; each window becomes one `C x window` image with
/// channels as rows and time as columns.
pub fn window_series<T: Scalar>(series: &SeriesMatrix<T>, spec: &WindowSpec) -> Result<ImageSet<T>> {
    if spec.window == 0 || spec.stride == 0 {
        return arg("window and stride must be at least 1");
    }
    let (t, c) = (series.timesteps, series.channels);
    if t < spec.window {
        return arg(format!("series has {t} timesteps, shorter than the window {}", spec.window));
    }
    let count = (t - spec.window) / spec.stride + 1;
    let (g_lo, g_hi) = min_max(series.values.iter().copied());
    if spec.normalization == Normalization::GlobalMinMax && !(g_hi > g_lo) {
        log::warn!("series has zero value range; every pixel is set to 0.5");
    }
    let mut pixels = Vec::with_capacity(count * c * spec.window);
    for w in 0..count {
        let start = w * spec.stride;
        let (lo, hi) = match spec.normalization {
            Normalization::GlobalMinMax => (g_lo, g_hi),
            Normalization::PerImageMinMax => {
                let (lo, hi) = min_max(series.values[start * c..(start + spec.window) * c].iter().copied());
                if !(hi > lo) {
                    log::warn!("window {w} has zero value range; its pixels are set to 0.5");
                }
                (lo, hi)
            }
        };
        for ch in 0..c {
            for dt in 0..spec.window {
                pixels.push(rescale(series.get(start + dt, ch), lo, hi));
            }
        }
    }
    ImageSet::new(c, spec.window, pixels, SetTag::Real)
}

/// Parses CSV text: rows are timesteps, columns channels. A first row that
/// does not parse as numbers is taken as the header.
pub fn parse_csv<T: Scalar, R: Read>(input: R) -> Result<SeriesMatrix<T>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let mut names = None;
    let mut width = None;
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Csv { row, column: 1, detail: e.to_string() })?;
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if i == 0 && record.iter().any(|cell| cell.trim().parse::<f64>().is_err()) {
            names = Some(record.iter().map(|s| s.trim().to_string()).collect::<Vec<_>>());
            width = Some(record.len());
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::Csv {
                row,
                column: record.len().min(expected) + 1,
                detail: format!("ragged row: expected {expected} cells, found {}", record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Csv {
                row,
                column: j + 1,
                detail: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv { row, column: j + 1, detail: format!("`{cell}` is not finite") });
            }
            values.push(T::lit(v));
        }
        rows += 1;
    }
    let channels = width.unwrap_or(0);
    if rows == 0 || channels == 0 {
        return Err(Error::Csv { row: 1, column: 1, detail: "no numeric rows".into() });
    }
    let mut series = SeriesMatrix::new(rows, channels, values)?;
    series.column_names = names;
    Ok(series)
}

pub fn load_csv<T: Scalar>(path: impl AsRef<Path>) -> Result<SeriesMatrix<T>> {
    parse_csv(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_count_and_shape() {
        let s = SeriesMatrix::new(4, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        let spec = WindowSpec { window: 2, stride: 2, normalization: Normalization::GlobalMinMax };
        let set = window_series(&s, &spec).unwrap();
        assert_eq!((set.len(), set.rows(), set.cols()), (2, 2, 2));
        // first image: channel 0 at t=0,1 then channel 1 at t=0,1
        let want = [0.0, 2.0 / 7.0, 1.0 / 7.0, 3.0 / 7.0];
        assert_eq!(set.image(0), &want);
    }

    #[test]
    fn predicted_count_never_reads_past_end() {
        for t in 3..20 {
            for window in 1..=t {
                for stride in 1..5 {
                    let s = SeriesMatrix::new(t, 1, (0..t).map(|v| v as f64).collect()).unwrap();
                    let spec = WindowSpec { window, stride, normalization: Normalization::PerImageMinMax };
                    let set = window_series(&s, &spec).unwrap();
                    assert_eq!(set.len(), (t - window) / stride + 1);
                }
            }
        }
    }

    #[test]
    fn constant_series_maps_to_half() {
        let s = SeriesMatrix::new(5, 2, vec![3.0; 10]).unwrap();
        for normalization in [Normalization::GlobalMinMax, Normalization::PerImageMinMax] {
            let set = window_series(&s, &WindowSpec { window: 3, stride: 1, normalization }).unwrap();
            assert!(set.pixels().iter().all(|&p| p == 0.5));
        }
    }

    #[test]
    fn ramp_maps_affinely() {
        let s = SeriesMatrix::new(10, 1, (0..10).map(|v| v as f64).collect()).unwrap();
        let set = window_series(&s, &WindowSpec { window: 10, stride: 1, normalization: Normalization::GlobalMinMax }).unwrap();
        assert_eq!(set.len(), 1);
        for (j, &p) in set.image(0).iter().enumerate() {
            assert_eq!(p, j as f64 / 9.0);
        }
    }

    #[test]
    fn short_series_is_rejected() {
        let s = SeriesMatrix::new(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        assert!(window_series(&s, &WindowSpec { window: 4, stride: 1, normalization: Normalization::GlobalMinMax }).is_err());
    }

    #[test]
    fn csv_with_header() {
        let s: SeriesMatrix<f64> = parse_csv("a,b\n1,2\n3,4\n".as_bytes()).unwrap();
        assert_eq!((s.timesteps(), s.channels()), (2, 2));
        assert_eq!(s.values(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.column_names.as_deref(), Some(&["a".to_string(), "b".to_string()][..]));
        let plain: SeriesMatrix<f64> = parse_csv("1.5,2\n3,-4e1\n".as_bytes()).unwrap();
        assert_eq!(plain.values(), &[1.5, 2.0, 3.0, -40.0]);
        assert!(plain.column_names.is_none());
    }

    #[test]
    fn csv_errors_name_the_cell() {
        let err = parse_csv::<f64, _>("a,b\n1,2\n3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Csv { row: 3, .. }), "{err}");
        let err = parse_csv::<f64, _>("a,b\n1,2\n3,x\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Csv { row: 3, column: 2, .. }), "{err}");
        let err = parse_csv::<f64, _>("a,b\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Csv { .. }));
    }
}
