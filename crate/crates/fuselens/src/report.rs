//! Metric report emission in CSV and JSON, at 10-significant-digit
//! precision.

use serde_json::json;

use crate::metrics::MetricReport;

/// Exact header of every CSV report.
pub const CSV_HEADER: &str = "id,q_mi,q_abf,ssim_ct,ssim_mr,sl";

/// One labeled report row.
#[derive(Debug, Clone)]
pub struct MetricRecord {
    pub id: String,
    pub report: MetricReport,
}

/// Rounds to 10 significant digits, the report serialization precision.
pub fn round_sig10(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.9e}").parse().expect("scientific round-trip")
}

fn csv_row(record: &MetricRecord) -> String {
    let r = &record.report;
    format!(
        "{},{},{},{},{},{}",
        record.id,
        round_sig10(r.q_mi),
        round_sig10(r.q_abf),
        round_sig10(r.ssim_ct),
        round_sig10(r.ssim_mr),
        round_sig10(r.sl)
    )
}

fn json_fields(record: &MetricRecord) -> serde_json::Value {
    let r = &record.report;
    json!({
        "id": record.id,
        "q_mi": round_sig10(r.q_mi),
        "q_abf": round_sig10(r.q_abf),
        "ssim_ct": round_sig10(r.ssim_ct),
        "ssim_mr": round_sig10(r.ssim_mr),
        "sl": round_sig10(r.sl),
    })
}

/// Single-record report, as emitted by `fuselens eval`.
pub fn render_single(record: &MetricRecord, json_format: bool) -> String {
    if json_format {
        format!("{}\n", serde_json::to_string_pretty(&json_fields(record)).expect("serialize"))
    } else {
        format!("{CSV_HEADER}\n{}\n", csv_row(record))
    }
}

/// Arithmetic mean of each metric across records.
pub fn aggregate(records: &[MetricRecord]) -> MetricReport {
    let n = records.len() as f64;
    let mut sum = MetricReport {
        q_mi: 0.0,
        q_abf: 0.0,
        ssim_ct: 0.0,
        ssim_mr: 0.0,
        sl: 0.0,
    };
    for rec in records {
        sum.q_mi += rec.report.q_mi;
        sum.q_abf += rec.report.q_abf;
        sum.ssim_ct += rec.report.ssim_ct;
        sum.ssim_mr += rec.report.ssim_mr;
        sum.sl += rec.report.sl;
    }
    MetricReport {
        q_mi: sum.q_mi / n,
        q_abf: sum.q_abf / n,
        ssim_ct: sum.ssim_ct / n,
        ssim_mr: sum.ssim_mr / n,
        sl: sum.sl / n,
    }
}

/// Batch report: per-entry rows in manifest order plus one aggregate row
/// (CSV id `mean`; JSON key `aggregate`).
pub fn render_batch(records: &[MetricRecord], json_format: bool) -> String {
    let mean = MetricRecord {
        id: "mean".to_string(),
        report: aggregate(records),
    };
    if json_format {
        let value = json!({
            "entries": records.iter().map(json_fields).collect::<Vec<_>>(),
            "aggregate": json_fields(&mean),
        });
        format!("{}\n", serde_json::to_string_pretty(&value).expect("serialize"))
    } else {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for rec in records {
            out.push_str(&csv_row(rec));
            out.push('\n');
        }
        out.push_str(&csv_row(&mean));
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, base: f64) -> MetricRecord {
        MetricRecord {
            id: id.to_string(),
            report: MetricReport {
                q_mi: base,
                q_abf: base / 2.0,
                ssim_ct: base / 3.0,
                ssim_mr: base / 4.0,
                sl: base / 5.0,
            },
        }
    }

    #[test]
    fn rounding_keeps_ten_significant_digits() {
        let v = 0.123_456_789_123_456_78;
        let r = round_sig10(v);
        assert!((r - v).abs() / v < 1e-9);
        assert_eq!(round_sig10(0.0), 0.0);
        assert_eq!(round_sig10(1.0), 1.0);
        assert_eq!(round_sig10(r), r);
    }

    #[test]
    fn csv_round_trips_to_ten_digits() {
        let rec = record("x", std::f64::consts::PI / 10.0);
        let text = render_single(&rec, false);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields[0], "x");
        let parsed: f64 = fields[1].parse().unwrap();
        assert!((parsed - rec.report.q_mi).abs() / rec.report.q_mi < 1e-9);
    }

    #[test]
    fn json_round_trips_to_ten_digits() {
        let rec = record("y", 0.8765432109876);
        let text = render_single(&rec, true);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["id"], "y");
        for (key, want) in [
            ("q_mi", rec.report.q_mi),
            ("q_abf", rec.report.q_abf),
            ("ssim_ct", rec.report.ssim_ct),
            ("ssim_mr", rec.report.ssim_mr),
            ("sl", rec.report.sl),
        ] {
            let got = v[key].as_f64().unwrap();
            assert!((got - want).abs() / want.abs() < 1e-9, "{key}: {got} vs {want}");
        }
    }

    #[test]
    fn aggregate_is_arithmetic_mean() {
        let records = vec![record("a", 0.3), record("b", 0.6), record("c", 0.9)];
        let mean = aggregate(&records);
        assert!((mean.q_mi - 0.6).abs() < 1e-12);
        assert!((mean.sl - 0.12).abs() < 1e-12);
    }

    #[test]
    fn batch_csv_has_rows_plus_mean() {
        let records = vec![record("a", 0.4), record("b", 0.8)];
        let text = render_batch(&records, false);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("a,"));
        assert!(lines[2].starts_with("b,"));
        assert!(lines[3].starts_with("mean,"));
    }
}
