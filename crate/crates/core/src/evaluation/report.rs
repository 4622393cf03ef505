use std::io::Write;

use crate::calibnet::{forward, CalibParams, Prediction, VariantMode};
use crate::datastore::Container;
use crate::error::{Error, Result};
use crate::perception::{judge, PerceptionRecord};
use crate::tensor::Real;

use super::metrics::{plcc, srcc};

/// One scored video.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRow {
    pub id: String,
    pub q_b: f64,
    pub u_b: f64,
    pub delta: f64,
    pub y_hat: f64,
    /// Normalized MOS, `None` for unlabeled records.
    pub y: Option<f64>,
}

impl SampleRow {
    pub const CSV_HEADER: [&'static str; 6] = ["id", "q_b", "u_b", "delta", "y_hat", "y"];

    fn csv_fields(&self) -> [String; 6] {
        [
            self.id.clone(),
            self.q_b.to_string(),
            self.u_b.to_string(),
            self.delta.to_string(),
            self.y_hat.to_string(),
            self.y.map(|y| y.to_string()).unwrap_or_default(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub srcc: f64,
    pub plcc: f64,
    pub n: usize,
    pub rows: Vec<SampleRow>,
}

impl MetricReport {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        write_rows(out, &self.rows)
    }
}

pub fn write_rows(out: impl Write, rows: &[SampleRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SampleRow::CSV_HEADER)?;
    for row in rows {
        w.write_record(row.csv_fields())?;
    }
    w.flush()?;
    Ok(())
}

fn score_one<F: Real>(
    container: &Container,
    record: &PerceptionRecord,
    params: &CalibParams<F>,
    mode: VariantMode,
) -> Result<SampleRow> {
    let vset = container.verbalizers()?;
    let judgment = judge(record, &vset)?;
    let (pred, _): (Prediction<F>, _) = forward(record, &judgment, params, mode)?;
    Ok(SampleRow {
        id: record.video_id.clone(),
        q_b: pred.q_b.as_f64(),
        u_b: pred.u_b.as_f64(),
        delta: pred.delta.as_f64(),
        y_hat: pred.y_hat.as_f64(),
        y: container.label(record)?,
    })
}

/// Score every record, labeled or not, in container order.
pub fn score_records<F: Real>(
    params: &CalibParams<F>,
    container: &Container,
    mode: VariantMode,
) -> Result<Vec<SampleRow>> {
    container
        .records
        .iter()
        .map(|r| score_one(container, r, params, mode))
        .collect()
}

fn labeled_rows<F: Real>(
    params: &CalibParams<F>,
    container: &Container,
    ids: &[String],
    mode: VariantMode,
) -> Result<Vec<SampleRow>> {
    ids.iter()
        .map(|id| {
            let record = container
                .get(id)
                .ok_or_else(|| Error::Data(format!("unknown video id `{id}`")))?;
            let row = score_one(container, record, params, mode)?;
            if row.y.is_none() {
                return Err(Error::Data(format!("video `{id}` has no MOS label")));
            }
            Ok(row)
        })
        .collect()
}

/// SRCC and PLCC of predictions against normalized MOS over `ids`.
pub fn evaluate<F: Real>(
    params: &CalibParams<F>,
    container: &Container,
    ids: &[String],
    mode: VariantMode,
) -> Result<MetricReport> {
    let rows = labeled_rows(params, container, ids, mode)?;
    let pred: Vec<f64> = rows.iter().map(|r| r.y_hat).collect();
    let truth: Vec<f64> = rows.iter().map(|r| r.y.unwrap()).collect();
    Ok(MetricReport {
        srcc: srcc(&pred, &truth)?,
        plcc: plcc(&pred, &truth)?,
        n: rows.len(),
        rows,
    })
}

pub const HISTOGRAM_BINS: usize = 20;
const DECILES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticRow {
    pub id: String,
    pub q_b: f64,
    pub y: f64,
    /// `y - q_b`: what the base prior misses.
    pub base_error: f64,
    pub delta: f64,
    pub y_hat: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecileRow {
    pub index: usize,
    pub count: usize,
    /// Mean `q_b` within the decile.
    pub q_b_center: f64,
    pub mean_base_error: f64,
}

/// Data behind the base-vs-MOS scatter, the residual-vs-base dependency and
/// the residual histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub rows: Vec<DiagnosticRow>,
    /// 20 uniform bins of `y - q_b` over `[-1, 1]`.
    pub histogram: Vec<HistogramBin>,
    /// `q_b` quantile groups with the mean base error in each.
    pub deciles: Vec<DecileRow>,
    /// Least-squares slope of decile mean base error against decile center.
    pub decile_slope: f64,
}

impl Diagnostics {
    /// Fraction of histogram mass whose bins lie inside `[lo, hi]`.
    pub fn mass_within(&self, lo: f64, hi: f64) -> f64 {
        let total: usize = self.histogram.iter().map(|b| b.count).sum();
        let inside: usize = self
            .histogram
            .iter()
            .filter(|b| b.lo >= lo - 1e-12 && b.hi <= hi + 1e-12)
            .map(|b| b.count)
            .sum();
        inside as f64 / total.max(1) as f64
    }

    pub fn write_samples_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "q_b", "y", "y_minus_q_b", "delta", "y_hat"])?;
        for r in &self.rows {
            w.write_record([
                r.id.clone(),
                r.q_b.to_string(),
                r.y.to_string(),
                r.base_error.to_string(),
                r.delta.to_string(),
                r.y_hat.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_histogram_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_lo", "bin_hi", "count"])?;
        for b in &self.histogram {
            w.write_record([b.lo.to_string(), b.hi.to_string(), b.count.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_deciles_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["decile", "count", "q_b_center", "mean_y_minus_q_b"])?;
        for d in &self.deciles {
            w.write_record([
                d.index.to_string(),
                d.count.to_string(),
                d.q_b_center.to_string(),
                d.mean_base_error.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn histogram_bin(x: f64) -> usize {
    let idx = ((x + 1.0) * (HISTOGRAM_BINS as f64 / 2.0)).floor();
    idx.clamp(0.0, (HISTOGRAM_BINS - 1) as f64) as usize
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

pub fn analyze<F: Real>(
    params: &CalibParams<F>,
    container: &Container,
    ids: &[String],
    mode: VariantMode,
) -> Result<Diagnostics> {
    let rows: Vec<DiagnosticRow> = labeled_rows(params, container, ids, mode)?
        .into_iter()
        .map(|r| {
            let y = r.y.unwrap();
            DiagnosticRow {
                base_error: y - r.q_b,
                id: r.id,
                q_b: r.q_b,
                y,
                delta: r.delta,
                y_hat: r.y_hat,
            }
        })
        .collect();

    let width = 2.0 / HISTOGRAM_BINS as f64;
    let mut histogram: Vec<HistogramBin> = (0..HISTOGRAM_BINS)
        .map(|i| HistogramBin {
            lo: -1.0 + i as f64 * width,
            hi: -1.0 + (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for r in &rows {
        histogram[histogram_bin(r.base_error)].count += 1;
    }

    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        rows[a]
            .q_b
            .total_cmp(&rows[b].q_b)
            .then_with(|| rows[a].id.cmp(&rows[b].id))
    });
    let groups = DECILES.min(rows.len());
    let mut deciles = Vec::with_capacity(groups);
    for g in 0..groups {
        let lo = g * rows.len() / groups;
        let hi = (g + 1) * rows.len() / groups;
        let members = &order[lo..hi];
        let count = members.len() as f64;
        deciles.push(DecileRow {
            index: g,
            count: members.len(),
            q_b_center: members.iter().map(|&i| rows[i].q_b).sum::<f64>() / count,
            mean_base_error: members.iter().map(|&i| rows[i].base_error).sum::<f64>() / count,
        });
    }
    let centers: Vec<f64> = deciles.iter().map(|d| d.q_b_center).collect();
    let means: Vec<f64> = deciles.iter().map(|d| d.mean_base_error).collect();
    let decile_slope = least_squares_slope(&centers, &means);

    Ok(Diagnostics {
        rows,
        histogram,
        deciles,
        decile_slope,
    })
}
