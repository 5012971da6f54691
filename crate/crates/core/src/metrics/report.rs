//! Transfer report and its CSV / JSON renderings.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::Value;

use super::{mean, sd, transfer_metrics, DiceMatrix};
use crate::error::{Error, Result};

pub const REPORT_VERSION: u32 = 1;
pub const CSV_FILE: &str = "dice_matrix.csv";
pub const JSON_FILE: &str = "transfer_report.json";
pub const TIMINGS_FILE: &str = "timings.json";

/// Wall-clock seconds per named phase. Kept out of the report proper so
/// that reports stay bit-reproducible.
pub type Timings = BTreeMap<String, f64>;

/// Everything in percent, rounded to six decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferReport {
    pub version: u32,
    pub config_hash: String,
    pub tasks: Vec<String>,
    /// `dice[i][j]`: checkpoint after stage `i + 1` on task `j + 1`.
    pub dice: Vec<Vec<f64>>,
    /// Single-task reference Dice per task.
    pub baseline: Vec<f64>,
    /// Backward transfer for tasks `1 ..= n−1`.
    pub bwt: Vec<f64>,
    /// Forward transfer for tasks `2 ..= n`.
    pub fwt: Vec<f64>,
    pub bwt_mean: Option<f64>,
    pub bwt_sd: Option<f64>,
    pub fwt_mean: Option<f64>,
    pub fwt_sd: Option<f64>,
    /// Final checkpoint: mean and SD of the per-task means.
    pub final_dice_mean: f64,
    pub final_dice_sd: f64,
    /// Final checkpoint: SD over every test case of every task.
    pub final_case_sd: Option<f64>,
    /// Share of quality-score selections that chose the right head.
    pub selection_accuracy: Option<f64>,
    /// Trainable parameters per stage.
    pub trainable_params: Vec<usize>,
    /// Stored parameters per stage.
    pub stored_params: Vec<usize>,
}

fn q(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn pct(x: f64) -> f64 {
    q(100.0 * x)
}

fn stats(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        (None, None)
    } else {
        (Some(pct(mean(v))), Some(pct(sd(v))))
    }
}

impl TransferReport {
    pub fn new(
        matrix: &DiceMatrix,
        trainable_params: Vec<usize>,
        stored_params: Vec<usize>,
        config_hash: impl Into<String>,
    ) -> Result<Self> {
        let n = matrix.n();
        if n == 0 {
            return Err(Error::InvalidArgument("empty Dice matrix".into()));
        }
        let all = matrix.d.iter().flatten().chain(&matrix.b);
        if all.clone().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::InvalidArgument("Dice values must lie in [0, 1]".into()));
        }
        let t = transfer_metrics(matrix);
        let (bwt_mean, bwt_sd) = stats(&t.bwt);
        let (fwt_mean, fwt_sd) = stats(&t.fwt);
        let last = &matrix.d[n - 1];
        let final_case_sd = matrix.cells.get(n - 1).map(|row| {
            let cases: Vec<f64> = row.iter().flat_map(|c| c.dice.iter().copied()).collect();
            pct(sd(&cases))
        });
        Ok(Self {
            version: REPORT_VERSION,
            config_hash: config_hash.into(),
            tasks: matrix.tasks.clone(),
            dice: matrix.d.iter().map(|r| r.iter().map(|&x| pct(x)).collect()).collect(),
            baseline: matrix.b.iter().map(|&x| pct(x)).collect(),
            bwt: t.bwt.iter().map(|&x| pct(x)).collect(),
            fwt: t.fwt.iter().map(|&x| pct(x)).collect(),
            bwt_mean,
            bwt_sd,
            fwt_mean,
            fwt_sd,
            final_dice_mean: pct(mean(last)),
            final_dice_sd: pct(sd(last)),
            final_case_sd,
            selection_accuracy: matrix.selection_accuracy().map(pct),
            trainable_params,
            stored_params,
        })
    }

    /// The Dice matrix as CSV: a header line, one line per stage and a final
    /// reference line, each with a label column plus one column per task.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let fixed = |label: String, row: &[f64]| -> Vec<String> {
            std::iter::once(label).chain(row.iter().map(|x| format!("{x:.6}"))).collect()
        };
        let csv_err = |e: csv::Error| Error::Data(format!("CSV encoding: {e}"));
        w.write_record(std::iter::once("model").chain(self.tasks.iter().map(String::as_str)))
            .map_err(csv_err)?;
        for (i, row) in self.dice.iter().enumerate() {
            w.write_record(fixed(format!("stage{}", i + 1), row)).map_err(csv_err)?;
        }
        w.write_record(fixed("baseline".into(), &self.baseline)).map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("CSV encoding: {e}")))?;
        Ok(String::from_utf8(bytes).expect("CSV of UTF-8 fields"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(fixed_json(&serde_json::to_value(self)?))
    }
}

/// Pretty JSON with sorted object keys and every float written with six
/// decimals. Non-finite floats become `null`.
pub fn fixed_json(v: &Value) -> String {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FixedFloats(PrettyFormatter::new()));
    v.serialize(&mut ser).expect("in-memory JSON serialization");
    out.push(b'\n');
    String::from_utf8(out).expect("serde_json emits UTF-8")
}

/// Pretty formatter with fixed six-decimal floats.
struct FixedFloats(PrettyFormatter<'static>);

impl Formatter for FixedFloats {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.6}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the CSV matrix, the JSON report and, when given, the timing
/// sidecar into `dir`. Returns the paths written.
pub fn emit_report(dir: &Path, report: &TransferReport, timings: Option<&Timings>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let csv = dir.join(CSV_FILE);
    write_file(&csv, &report.to_csv()?)?;
    written.push(csv);
    let json = dir.join(JSON_FILE);
    write_file(&json, &report.to_json()?)?;
    written.push(json);
    if let Some(t) = timings {
        let path = dir.join(TIMINGS_FILE);
        write_file(&path, &fixed_json(&serde_json::to_value(t)?))?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<TransferReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: TransferReport = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if report.version != REPORT_VERSION {
        return Err(Error::format(path, format!("report version {} is not {REPORT_VERSION}", report.version)));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(n: usize) -> TransferReport {
        let tasks = (1..=n).map(|i| format!("t{i}")).collect();
        let d = (0..n).map(|i| (0..n).map(|j| 0.5 + 0.01 * (i * n + j) as f64 / 3.0).collect()).collect();
        let m = DiceMatrix::from_values(tasks, d, vec![0.9; n]).unwrap();
        TransferReport::new(&m, vec![10; n], vec![20; n], "abc").unwrap()
    }

    #[test]
    fn single_task_json_has_empty_bwt() {
        let json = report(1).to_json().unwrap();
        assert!(json.contains("\"bwt\": []"), "{json}");
        assert!(json.contains("\"bwt_mean\": null"));
    }

    #[test]
    fn json_round_trip_is_exact() {
        for n in 1..5 {
            let r = report(n);
            let back: TransferReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
            assert_eq!(back, r);
        }
    }

    #[test]
    fn csv_layout() {
        let csv = report(3).to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines.iter().all(|l| l.split(',').count() == 4));
        assert_eq!(lines[0], "model,t1,t2,t3");
        assert!(lines[4].starts_with("baseline,90.000000"));
        assert!(csv.ends_with('\n') && !csv.contains('\r'));
    }

    #[test]
    fn floats_are_fixed_and_keys_sorted() {
        let v: Value = serde_json::json!({"b": 1.5, "a": [1, 2.25], "c": {"z": null, "y": "s"}});
        let s = fixed_json(&v);
        let expect = "{\n  \"a\": [\n    1,\n    2.250000\n  ],\n  \"b\": 1.500000,\n  \"c\": {\n    \"y\": \"s\",\n    \"z\": null\n  }\n}\n";
        assert_eq!(s, expect);
    }

    #[test]
    fn rejects_out_of_range_dice() {
        let m = DiceMatrix::from_values(vec!["a".into()], vec![vec![1.5]], vec![0.5]).unwrap();
        assert!(TransferReport::new(&m, vec![], vec![], "").is_err());
    }
}
