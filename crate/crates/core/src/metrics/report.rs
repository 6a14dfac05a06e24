use std::collections::BTreeMap;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Metric values; `None` when the metric was not computed or its scorer
/// failed. BLEU-4 and ROUGE-L are in [0, 1], CIDEr-D includes the x10 factor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct MetricValues {
    pub bleu4: Option<f64>,
    pub rouge_l: Option<f64>,
    pub cider: Option<f64>,
    pub rep1: Option<f64>,
    pub rep2: Option<f64>,
    pub rep3: Option<f64>,
    pub rep4: Option<f64>,
    pub raw_score: Option<f64>,
    pub discriminator_score: Option<f64>,
    pub r1: Option<f64>,
    pub r5: Option<f64>,
    pub r10: Option<f64>,
    pub mrr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CaptionSample {
    pub scene_id: u64,
    pub caption: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Which captioner was evaluated, e.g. `xe` or `scst-raw`.
    pub tag: String,
    /// Split name the captions were generated for.
    pub corpus: String,
    pub num_captions: usize,
    /// Role (`captioner`, `raw_scorer`, ...) to checkpoint SHA-256.
    pub checkpoints: BTreeMap<String, String>,
    pub metrics: MetricValues,
    /// Metric name to error message for scorers that failed.
    pub errors: BTreeMap<String, String>,
    pub samples: Vec<CaptionSample>,
}

/// Table columns in canonical order: header, accessor, display scale.
pub const COLUMNS: [(&str, fn(&MetricValues) -> Option<f64>, f64); 13] = [
    ("B-4", |m| m.bleu4, 100.0),
    ("R-L", |m| m.rouge_l, 100.0),
    ("CIDEr", |m| m.cider, 100.0),
    ("Rep-1", |m| m.rep1, 1.0),
    ("Rep-2", |m| m.rep2, 1.0),
    ("Rep-3", |m| m.rep3, 1.0),
    ("Rep-4", |m| m.rep4, 1.0),
    ("raw-score", |m| m.raw_score, 1.0),
    ("disc-score", |m| m.discriminator_score, 1.0),
    ("R@1", |m| m.r1, 1.0),
    ("R@5", |m| m.r5, 1.0),
    ("R@10", |m| m.r10, 1.0),
    ("MRR", |m| m.mrr, 1.0),
];

fn check_versions(reports: &[EvalReport]) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no reports to format".into()));
    }
    let mut versions: Vec<u32> = reports.iter().map(|r| r.schema_version).collect();
    versions.sort_unstable();
    versions.dedup();
    if versions.len() > 1 || versions[0] != REPORT_SCHEMA_VERSION {
        return Err(Error::SchemaVersion(versions));
    }
    Ok(())
}

fn cell(v: Option<f64>, scale: f64) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{:.3}", x * scale))
}

/// Aligned plain-text table, one row per report in input order.
pub fn format_table(reports: &[EvalReport]) -> Result<String> {
    check_versions(reports)?;
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("run".to_owned())
        .chain(std::iter::once("split".to_owned()))
        .chain(COLUMNS.iter().map(|c| c.0.to_owned()))
        .collect()];
    for r in reports {
        let mut row = vec![r.tag.clone(), r.corpus.clone()];
        row.extend(COLUMNS.iter().map(|(_, get, scale)| cell(get(&r.metrics), *scale)));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| if c < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    Ok(out)
}

/// Same data as [`format_table`] as CSV with unscaled values.
pub fn format_csv(reports: &[EvalReport]) -> Result<String> {
    check_versions(reports)?;
    let mut out = String::from("run,split");
    for c in COLUMNS.iter() {
        out.push(',');
        out.push_str(c.0);
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{},{}", r.tag, r.corpus));
        for (_, get, _) in COLUMNS.iter() {
            out.push(',');
            if let Some(v) = get(&r.metrics) {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(tag: &str, version: u32) -> EvalReport {
        EvalReport {
            schema_version: version,
            tag: tag.into(),
            corpus: "val".into(),
            num_captions: 3,
            checkpoints: BTreeMap::new(),
            metrics: MetricValues {
                cider: Some(1.234),
                rep1: Some(0.5),
                ..MetricValues::default()
            },
            errors: BTreeMap::new(),
            samples: Vec::new(),
        }
    }

    #[test]
    fn single_run_single_row() {
        let t = format_table(&[report("xe", REPORT_SCHEMA_VERSION)]).unwrap();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("xe"));
        assert!(lines[2].contains("123.400"));
        assert!(lines[2].contains("-"));
    }

    #[test]
    fn header_order_is_canonical() {
        let a = format_table(&[report("a", 1), report("b", 1)]).unwrap();
        let b = format_table(&[report("b", 1), report("a", 1)]).unwrap();
        assert_eq!(a.lines().next(), b.lines().next());
        let header = a.lines().next().unwrap();
        let pos: Vec<usize> = COLUMNS.iter().map(|c| header.find(&format!(" {}", c.0)).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn mixed_versions_are_refused() {
        match format_table(&[report("a", 1), report("b", 2)]) {
            Err(Error::SchemaVersion(v)) => assert_eq!(v, vec![1, 2]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(format_csv(&[]).is_err());
    }

    #[test]
    fn json_round_trip_keeps_nulls() {
        let r = report("xe", 1);
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"bleu4\":null"));
        assert_eq!(serde_json::from_str::<EvalReport>(&s).unwrap(), r);
    }
}
