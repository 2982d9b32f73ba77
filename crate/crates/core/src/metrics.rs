//! Error metrics, accuracy evaluation and the per-round CSV log.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::transport::SchemeKind;

/// Euclidean norm of `g − g_hat`.
pub fn l2_error_norm(g: &[f64], g_hat: &[f64]) -> Result<f64> {
    if g.len() != g_hat.len() {
        return Err(Error::ShapeMismatch { expected: g.len(), got: g_hat.len() });
    }
    Ok(g.iter().zip(g_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// `|g_i − g̃_i| / |g_i|`, with `None` where `g_i` is zero.
pub fn relative_error(g: &[f64], g_hat: &[f64]) -> Result<Vec<Option<f64>>> {
    if g.len() != g_hat.len() {
        return Err(Error::ShapeMismatch { expected: g.len(), got: g_hat.len() });
    }
    Ok(g.iter()
        .zip(g_hat)
        .map(|(&a, &b)| if a == 0.0 { None } else { Some((a - b).abs() / a.abs()) })
        .collect())
}

/// Fraction of test samples classified correctly.
///
/// NaN logits never win the argmax; a sample whose logits are all NaN is
/// assigned class 0.
pub fn evaluate_accuracy(net: &Network, params: &[f64], test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let mut correct = 0usize;
    for i in 0..test.len() {
        let predicted = net.predict(params, test.image(i))?.unwrap_or(0);
        if predicted == test.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub scheme: SchemeKind,
    pub snr_db: f64,
    pub modulation: usize,
    pub clients: usize,
    pub sparsity: f64,
    pub test_accuracy: f64,
    pub l2_error: f64,
    pub payload_bits: u64,
    pub coded_bits: u64,
    pub retx_count: u64,
    pub airtime_symbols: u64,
    /// Whether `l2_error` is within the configured tolerance; empty when no
    /// tolerance is set.
    pub within_tolerance: Option<bool>,
}

pub const ROUND_HEADER: [&str; 13] = [
    "round",
    "scheme",
    "snr_db",
    "modulation",
    "clients",
    "sparsity",
    "test_accuracy",
    "l2_error",
    "payload_bits",
    "coded_bits",
    "retx_count",
    "airtime_symbols",
    "within_tolerance",
];

/// Formats a real rounded to 9 significant digits.
pub fn format_real(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    let a = rounded.abs();
    if rounded == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{rounded}")
    } else {
        format!("{rounded:e}")
    }
}

pub fn parse_real(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::InvalidArgument(format!("`{s}` is not a real number")))
}

impl RoundMetrics {
    pub fn to_record(&self) -> Vec<String> {
        vec![
            self.round.to_string(),
            self.scheme.as_str().to_string(),
            format_real(self.snr_db),
            self.modulation.to_string(),
            self.clients.to_string(),
            format_real(self.sparsity),
            format_real(self.test_accuracy),
            format_real(self.l2_error),
            self.payload_bits.to_string(),
            self.coded_bits.to_string(),
            self.retx_count.to_string(),
            self.airtime_symbols.to_string(),
            self.within_tolerance.map(|b| b.to_string()).unwrap_or_default(),
        ]
    }

    pub fn from_record(r: &csv::StringRecord) -> Result<Self> {
        if r.len() != ROUND_HEADER.len() {
            return Err(Error::ShapeMismatch { expected: ROUND_HEADER.len(), got: r.len() });
        }
        let int = |i: usize| -> Result<u64> {
            r[i].parse().map_err(|_| Error::InvalidArgument(format!("`{}` is not an integer ({})", &r[i], ROUND_HEADER[i])))
        };
        Ok(RoundMetrics {
            round: int(0)? as usize,
            scheme: r[1].parse()?,
            snr_db: parse_real(&r[2])?,
            modulation: int(3)? as usize,
            clients: int(4)? as usize,
            sparsity: parse_real(&r[5])?,
            test_accuracy: parse_real(&r[6])?,
            l2_error: parse_real(&r[7])?,
            payload_bits: int(8)?,
            coded_bits: int(9)?,
            retx_count: int(10)?,
            airtime_symbols: int(11)?,
            within_tolerance: match &r[12] {
                "" => None,
                "true" => Some(true),
                "false" => Some(false),
                other => return Err(Error::InvalidArgument(format!("`{other}` is not a boolean"))),
            },
        })
    }
}

/// CSV writer that flushes after every row.
pub struct CsvLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl CsvLog {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = CsvLog { path: path.to_path_buf(), writer: csv::Writer::from_writer(file) };
        log.write_row(header)?;
        Ok(log)
    }

    pub fn write_row<I, T>(&mut self, row: I) -> Result<()>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        let path = &self.path;
        self.writer.write_record(row).map_err(|e| csv_error(path, e))?;
        self.writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Format { path: path.to_path_buf(), message: format!("{other:?}") },
    }
}

pub struct RoundCsvWriter(CsvLog);

impl RoundCsvWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(RoundCsvWriter(CsvLog::create(path, &ROUND_HEADER)?))
    }

    pub fn write(&mut self, m: &RoundMetrics) -> Result<()> {
        self.0.write_row(m.to_record())
    }
}

pub fn write_round_csv<'a, I>(records: I, path: &Path) -> Result<()>
where
    I: IntoIterator<Item = &'a RoundMetrics>,
{
    let mut w = RoundCsvWriter::create(path)?;
    for m in records {
        w.write(m)?;
    }
    Ok(())
}

pub fn read_round_csv(path: &Path) -> Result<Vec<RoundMetrics>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(ROUND_HEADER.iter().copied()) {
        return Err(Error::Format { path: path.to_path_buf(), message: "unexpected round CSV header".into() });
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        out.push(RoundMetrics::from_record(&rec.map_err(|e| csv_error(path, e))?)?);
    }
    Ok(out)
}

/// Writes `text` to `path` with path context on failure.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    File::create(path).and_then(|mut f| f.write_all(text.as_bytes())).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn l2_examples() {
        assert_eq!(l2_error_norm(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l2_error_norm(&[0.5], &[0.0]).unwrap(), 0.5);
        assert_eq!(l2_error_norm(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 5f64.sqrt());
        assert!(l2_error_norm(&[1.0], &[]).is_err());
    }

    #[test]
    fn relative_examples() {
        assert_eq!(relative_error(&[2.0, -4.0], &[2.0, -4.0]).unwrap(), vec![Some(0.0), Some(0.0)]);
        assert_eq!(relative_error(&[2.0], &[1.0]).unwrap(), vec![Some(0.5)]);
        assert_eq!(relative_error(&[-2.0], &[-1.0]).unwrap(), vec![Some(0.5)]);
        assert_eq!(relative_error(&[0.0], &[1.0]).unwrap(), vec![None]);
    }

    #[test]
    fn real_formatting() {
        assert_eq!(format_real(0.9), "0.9");
        assert_eq!(format_real(20.0), "20");
        assert_eq!(format_real(0.123456789123), "0.123456789");
        assert_eq!(format_real(1.0e-30), "1e-30");
        assert_eq!(format_real(f64::NAN), "NaN");
        assert_eq!(format_real(f64::NEG_INFINITY), "-inf");
        for s in ["0.9", "1e-30", "NaN", "inf", "-inf"] {
            let x = parse_real(s).unwrap();
            assert!(format_real(x) == s);
        }
    }

    fn sample(round: usize) -> RoundMetrics {
        RoundMetrics {
            round,
            scheme: SchemeKind::Approximate,
            snr_db: 20.0,
            modulation: 4,
            clients: 10,
            sparsity: 1.0,
            test_accuracy: 0.8123456789,
            l2_error: if round == 2 { f64::NAN } else { 1.5e-7 },
            payload_bits: 814_400,
            coded_bits: 814_400,
            retx_count: 0,
            airtime_symbols: 407_200,
            within_tolerance: if round == 0 { None } else { Some(round % 2 == 1) },
        }
    }

    #[test]
    fn csv_round_trip_and_line_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rounds.csv");
        write_round_csv(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);

        let rows: Vec<_> = (0..3).map(sample).collect();
        write_round_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap(), ROUND_HEADER.join(","));
        let back = read_round_csv(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.iter().zip(&rows) {
            assert_eq!(a.round, b.round);
            assert_eq!(a.test_accuracy, 0.812345679);
            assert_eq!(a.within_tolerance, b.within_tolerance);
            assert!(a.l2_error == b.l2_error || (a.l2_error.is_nan() && b.l2_error.is_nan()));
        }
        // Re-reading and re-writing is a fixed point.
        let path2 = dir.path().join("again.csv");
        write_round_csv(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn unwritable_path_reports_path() {
        let err = RoundCsvWriter::create(Path::new("/nonexistent-dir/x.csv")).err().unwrap();
        assert!(err.to_string().contains("/nonexistent-dir/x.csv"));
    }

    proptest! {
        #[test]
        fn l2_triangle_and_homogeneity(
            v in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3, -1e3f64..1e3), 1..40),
            s in -10.0f64..10.0,
        ) {
            let a: Vec<f64> = v.iter().map(|t| t.0).collect();
            let b: Vec<f64> = v.iter().map(|t| t.1).collect();
            let c: Vec<f64> = v.iter().map(|t| t.2).collect();
            let ac = l2_error_norm(&a, &c).unwrap();
            let ab = l2_error_norm(&a, &b).unwrap();
            let bc = l2_error_norm(&b, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9 * (1.0 + ab + bc));
            let sa: Vec<f64> = a.iter().map(|x| s * x).collect();
            let sb: Vec<f64> = b.iter().map(|x| s * x).collect();
            let lhs = l2_error_norm(&sa, &sb).unwrap();
            prop_assert!((lhs - s.abs() * ab).abs() <= 1e-9 * (1.0 + lhs));
            prop_assert!(ab >= 0.0);
        }
    }
}
