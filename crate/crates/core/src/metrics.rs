//! Confusion-matrix based segmentation metrics.

use std::ops::AddAssign;

use crate::error::{Error, Result};

/// `counts[g * C + p]` = pixels of ground-truth class `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Data(format!("{} counts for a {classes}x{classes} matrix", counts.len())));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.classes..(c + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum()
    }

    /// Adds every pixel whose ground truth is not `ignore_index`.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], ignore_index: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "accumulate",
                format!("{} predictions vs {} labels", pred.len(), gt.len()),
            ));
        }
        let c = self.classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore_index {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::Data(format!(
                    "class pair (gt {g}, pred {p}) out of range for {c} classes"
                )));
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    /// Per-class recall; `None` for classes absent from the ground truth.
    pub fn per_class_pa(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let row = self.row_sum(c);
                (row > 0).then(|| self.get(c, c) as f64 / row as f64)
            })
            .collect()
    }

    /// Per-class IoU; `None` when the class is absent from both ground truth
    /// and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let union = self.row_sum(c) + self.col_sum(c) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Overall pixel accuracy; `None` when nothing was scored.
    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let trace: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| trace as f64 / total as f64)
    }

    pub fn summary(&self, old_classes: &[usize], new_classes: &[usize]) -> Summary {
        let per_class_pa = self.per_class_pa();
        let per_class_iou = self.per_class_iou();
        let group =
            |set: &[usize]| mean_defined(set.iter().map(|&c| per_class_iou.get(c).copied().flatten()));
        Summary {
            m_pa: self.pixel_accuracy(),
            m_ca: mean_defined(per_class_pa.iter().copied()),
            m_iou: mean_defined(per_class_iou.iter().copied()),
            m_iou_old: group(old_classes),
            m_iou_new: group(new_classes),
            per_class_pa,
            per_class_iou,
        }
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        assert_eq!(self.classes, rhs.classes, "merging matrices of different size");
        for (a, b) in self.counts.iter_mut().zip(&rhs.counts) {
            *a += b;
        }
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Reported metrics. Undefined values (0/0) are `None` and excluded from
/// every mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub per_class_pa: Vec<Option<f64>>,
    pub per_class_iou: Vec<Option<f64>>,
    /// Global pixel accuracy.
    pub m_pa: Option<f64>,
    /// Mean per-class accuracy.
    pub m_ca: Option<f64>,
    pub m_iou: Option<f64>,
    pub m_iou_old: Option<f64>,
    pub m_iou_new: Option<f64>,
}

/// Column headers of a metrics table after the row labels.
pub const METRIC_COLUMNS: [&str; 5] = ["mIoU old", "mIoU new", "mIoU", "mPA", "mCA"];

/// Formats a fraction as a percentage with two decimals, `-` when undefined.
pub fn format_percent(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

/// One row of a per-class IoU table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub step: usize,
    /// Aligned with the table's class columns.
    pub class_iou: Vec<Option<f64>>,
    pub m_iou_old: Option<f64>,
    pub m_iou_new: Option<f64>,
    pub m_iou: Option<f64>,
    pub m_pa: Option<f64>,
    pub m_ca: Option<f64>,
}

/// Writes `method,step,<class...>,mIoU old,mIoU new,mIoU,mPA,mCA` as CSV.
pub fn write_metrics_csv<W: std::io::Write>(
    out: W,
    class_names: &[String],
    rows: &[MetricsRow],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["method".to_string(), "step".to_string()];
    header.extend(class_names.iter().cloned());
    header.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        if row.class_iou.len() != class_names.len() {
            return Err(Error::Report(format!(
                "row has {} class values for {} columns",
                row.class_iou.len(),
                class_names.len()
            )));
        }
        let mut rec = vec![row.method.clone(), row.step.to_string()];
        rec.extend(row.class_iou.iter().map(|&v| format_percent(v)));
        for v in [row.m_iou_old, row.m_iou_new, row.m_iou, row.m_pa, row.m_ca] {
            rec.push(format_percent(v));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Report(e.to_string()))?;
    Ok(())
}

/// A parsed metrics table, values kept as text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetricsTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MetricsTable {
    pub fn class_names(&self) -> &[String] {
        &self.header[2..self.header.len() - METRIC_COLUMNS.len()]
    }
}

/// Parses and validates a table produced by [`write_metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<MetricsTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut records = reader.records();
    let header: Vec<String> = match records.next() {
        Some(r) => r.map_err(csv_err)?.iter().map(str::to_string).collect(),
        None => return Err(Error::Report("empty metrics table".into())),
    };
    let n = header.len();
    if n < 2 + METRIC_COLUMNS.len()
        || header[0] != "method"
        || header[1] != "step"
        || header[n - METRIC_COLUMNS.len()..] != METRIC_COLUMNS
    {
        return Err(Error::Report(format!("unexpected metrics header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in records {
        let rec: Vec<String> = rec.map_err(csv_err)?.iter().map(str::to_string).collect();
        if rec.len() != n {
            return Err(Error::Report(format!("row with {} fields, expected {n}", rec.len())));
        }
        if rec[1].parse::<usize>().is_err() {
            return Err(Error::Report(format!("bad step {:?}", rec[1])));
        }
        for v in &rec[2..] {
            if v != "-" && v.parse::<f64>().map_or(true, |x| !x.is_finite()) {
                return Err(Error::Report(format!("bad metric value {v:?}")));
            }
        }
        rows.push(rec);
    }
    Ok(MetricsTable { header, rows })
}

/// Concatenates tables that share one header, in the order given.
pub fn merge_tables(tables: &[MetricsTable]) -> Result<MetricsTable> {
    let first = tables.first().ok_or_else(|| Error::Report("no tables to merge".into()))?;
    let mut rows = Vec::new();
    for (i, t) in tables.iter().enumerate() {
        if t.header != first.header {
            return Err(Error::Report(format!(
                "table {} has classes {:?}, table 1 has {:?}",
                i + 1,
                t.class_names(),
                first.class_names()
            )));
        }
        rows.extend(t.rows.iter().cloned());
    }
    Ok(MetricsTable { header: first.header.clone(), rows })
}

pub fn write_table<W: std::io::Write>(out: W, table: &MetricsTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&table.header).map_err(csv_err)?;
    for row in &table.rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Report(format!("csv: {e}")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Report(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(c: usize, counts: &[u64]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(c, counts.to_vec()).unwrap()
    }

    #[test]
    fn accumulate_examples() {
        let mut m = ConfusionMatrix::new(3);
        m.accumulate(&[2; 5], &[2; 5], 255).unwrap();
        assert_eq!(m.get(2, 2), 5);
        let before = m.clone();
        m.accumulate(&[0, 1], &[255, 255], 255).unwrap();
        assert_eq!(m, before);
        assert!(m.accumulate(&[3], &[0], 255).is_err());
        assert!(m.accumulate(&[0], &[0, 1], 255).is_err());
    }

    #[test]
    fn iou_examples() {
        let m = cm(2, &[3, 1, 1, 3]);
        assert_eq!(m.per_class_iou(), vec![Some(0.6), Some(0.6)]);
        let diag = cm(3, &[4, 0, 0, 0, 0, 0, 0, 0, 7]);
        assert_eq!(diag.per_class_iou(), vec![Some(1.0), None, Some(1.0)]);
        assert_eq!(diag.summary(&[0, 1, 2], &[]).m_iou, Some(1.0));
    }

    #[test]
    fn summary_examples() {
        let s = cm(2, &[3, 1, 1, 3]).summary(&[0], &[1]);
        assert_eq!(s.m_pa, Some(0.75));
        assert_eq!(s.m_ca, Some(0.75));
        assert_eq!(s.m_iou, Some(0.6));
        assert_eq!(s.m_iou_old, Some(0.6));

        // Heavy false positives on class 1: high recall, poor IoU.
        let s = cm(2, &[5, 5, 0, 10]).summary(&[0], &[1]);
        assert_eq!(s.per_class_pa[1], Some(1.0));
        assert!((s.per_class_iou[1].unwrap() - 10.0 / 15.0).abs() < 1e-12);

        let s = cm(2, &[0; 4]).summary(&[0], &[1]);
        assert_eq!((s.m_pa, s.m_iou, s.m_iou_new), (None, None, None));
    }

    #[test]
    fn csv_round_trip() {
        let names = vec!["background".to_string(), "a".to_string()];
        let rows = vec![MetricsRow {
            method: "finetune".into(),
            step: 1,
            class_iou: vec![Some(0.5), None],
            m_iou_old: Some(0.5),
            m_iou_new: None,
            m_iou: Some(0.5),
            m_pa: Some(0.9),
            m_ca: Some(0.45),
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &names, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "method,step,background,a,mIoU old,mIoU new,mIoU,mPA,mCA\nfinetune,1,50.00,-,50.00,-,50.00,90.00,45.00\n"
        );
        let table = parse_metrics_csv(&text).unwrap();
        assert_eq!(table.class_names(), &names[..]);
        assert_eq!(table.rows.len(), 1);
        assert!(parse_metrics_csv("a,b\n").is_err());
        assert!(parse_metrics_csv("").is_err());

        let merged = merge_tables(&[table.clone(), table.clone()]).unwrap();
        assert_eq!(merged.rows.len(), 2);
        let mut out = Vec::new();
        write_table(&mut out, &merge_tables(std::slice::from_ref(&table)).unwrap()).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
        let other = MetricsTable {
            header: table.header.iter().map(|h| if h == "a" { "b".into() } else { h.clone() }).collect(),
            rows: vec![],
        };
        assert!(matches!(merge_tables(&[table, other]), Err(Error::Report(_))));
        assert!(merge_tables(&[]).is_err());
    }
}
