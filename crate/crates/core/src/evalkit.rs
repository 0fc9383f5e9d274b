//! Metrics in physical units and attention diagnostics.
//!
//! Predictions are denormalized before scoring. Per (channel, horizon) the
//! report pools every masked cell of every sample, so RMSE is
//! `√(Σ M (Ŷ − Y)² / Σ M)` over the whole split.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fields::{denormalize, Field, GridSpec, LandMask, NormStats, Sample};
use crate::gfd::write_grid;
use crate::model::{predict_normalized, prepare, ModelConfig, ParamStore};

fn check_shapes(pred: &Field, target: &Field, mask: &LandMask) -> Result<()> {
    if pred.spec() != target.spec() || pred.n_channels() != target.n_channels() {
        return Err(Error::Shape("prediction and target fields differ in shape".into()));
    }
    if mask.spec().height != pred.spec().height || mask.spec().width != pred.spec().width {
        return Err(Error::Shape("mask and field grids differ".into()));
    }
    if mask.count() == 0 {
        return Err(Error::DegenerateMask);
    }
    Ok(())
}

/// Masked `(prediction, target)` pairs over every channel.
fn pairs<'a>(pred: &'a Field, target: &'a Field, mask: &'a LandMask) -> impl Iterator<Item = (f64, f64)> + 'a {
    let n = mask.cells().len();
    (0..pred.n_channels()).flat_map(move |c| {
        let (p, t) = (pred.channel(c), target.channel(c));
        (0..n).filter(|&i| mask.cells()[i]).map(move |i| (p[i] as f64, t[i] as f64))
    })
}

pub fn rmse(pred: &Field, target: &Field, mask: &LandMask) -> Result<f64> {
    check_shapes(pred, target, mask)?;
    let mut acc = Accumulator::default();
    pairs(pred, target, mask).for_each(|(p, t)| acc.push(p, t));
    Ok(acc.rmse())
}

pub fn mae(pred: &Field, target: &Field, mask: &LandMask) -> Result<f64> {
    check_shapes(pred, target, mask)?;
    let mut acc = Accumulator::default();
    pairs(pred, target, mask).for_each(|(p, t)| acc.push(p, t));
    Ok(acc.mae())
}

/// Masked Pearson correlation.
pub fn correlation(pred: &Field, target: &Field, mask: &LandMask) -> Result<f64> {
    check_shapes(pred, target, mask)?;
    let mut acc = Accumulator::default();
    pairs(pred, target, mask).for_each(|(p, t)| acc.push(p, t));
    acc.correlation()
}

/// Running sums for one (channel, horizon) cell of the report.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    n: u64,
    se: f64,
    ae: f64,
    sp: f64,
    st: f64,
    spp: f64,
    stt: f64,
    spt: f64,
}

impl Accumulator {
    pub fn push(&mut self, p: f64, t: f64) {
        let e = p - t;
        self.n += 1;
        self.se += e * e;
        self.ae += e.abs();
        self.sp += p;
        self.st += t;
        self.spp += p * p;
        self.stt += t * t;
        self.spt += p * t;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn rmse(&self) -> f64 {
        (self.se / self.n as f64).sqrt()
    }

    pub fn mae(&self) -> f64 {
        self.ae / self.n as f64
    }

    pub fn correlation(&self) -> Result<f64> {
        if self.n < 2 {
            return Err(Error::UndefinedCorrelation(format!("{} masked values", self.n)));
        }
        let n = self.n as f64;
        let cov = self.spt - self.sp * self.st / n;
        let vp = self.spp - self.sp * self.sp / n;
        let vt = self.stt - self.st * self.st / n;
        let tiny = 1e-12;
        if vp <= tiny * self.spp.max(1.0) || vt <= tiny * self.stt.max(1.0) {
            return Err(Error::UndefinedCorrelation("zero variance".into()));
        }
        Ok((cov / (vp.sqrt() * vt.sqrt())).clamp(-1.0, 1.0))
    }
}

/// Scores for one channel at one lead time.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub channel: String,
    pub unit: String,
    pub horizon: u32,
    pub rmse: f64,
    pub mae: f64,
    pub r: f64,
    pub n: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Channel-major, horizons ascending.
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn channels(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.channel.as_str()) {
                out.push(&r.channel);
            }
        }
        out
    }

    pub fn horizons(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self.rows.iter().map(|r| r.horizon).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn get(&self, channel: &str, horizon: u32) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.channel == channel && r.horizon == horizon)
    }

    /// Mean RMSE of a channel across horizons.
    pub fn channel_average(&self, channel: &str) -> f64 {
        mean(self.rows.iter().filter(|r| r.channel == channel).map(|r| r.rmse))
    }

    /// Mean RMSE at a horizon across channels.
    pub fn horizon_average(&self, horizon: u32) -> f64 {
        mean(self.rows.iter().filter(|r| r.horizon == horizon).map(|r| r.rmse))
    }

    /// Mean of the per-horizon averages.
    pub fn overall(&self) -> f64 {
        mean(self.horizons().into_iter().map(|h| self.horizon_average(h)))
    }

    fn mixed_units(&self) -> bool {
        self.rows.iter().any(|r| r.unit != self.rows[0].unit)
    }

    /// Aligned RMSE table: channels by horizons, with averages.
    pub fn to_text(&self) -> String {
        let horizons = self.horizons();
        let mut out = String::from("RMSE (physical units)\n");
        let _ = write!(out, "{:<12}", "channel");
        for h in &horizons {
            let _ = write!(out, " {:>10}", format!("{h}h"));
        }
        let _ = writeln!(out, " {:>10}", "avg");
        for c in self.channels() {
            let _ = write!(out, "{c:<12}");
            for &h in &horizons {
                let _ = write!(out, " {:>10.4}", self.get(c, h).map_or(f64::NAN, |r| r.rmse));
            }
            let _ = writeln!(out, " {:>10.4}", self.channel_average(c));
        }
        let _ = write!(out, "{:<12}", "average");
        for &h in &horizons {
            let _ = write!(out, " {:>10.4}", self.horizon_average(h));
        }
        let _ = writeln!(out, " {:>10.4}", self.overall());
        out.push_str("\nchannel      horizon       rmse        mae          r          n\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>7} {:>10.4} {:>10.4} {:>10.4} {:>10}",
                r.channel, r.horizon, r.rmse, r.mae, r.r, r.n
            );
        }
        if self.mixed_units() {
            out.push_str("\n* averages mix channels with different units and are not physically meaningful.\n");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("channel,horizon,rmse,mae,r,n\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:e},{:e},{:e},{}", r.channel, r.horizon, r.rmse, r.mae, r.r, r.n);
        }
        out
    }

    /// Write `report.txt` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, text) in [("report.txt", self.to_text()), ("report.csv", self.to_csv())] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Build a report from per-sample predictions already in physical units.
pub fn score(predictions: &[Vec<Field>], samples: &[&Sample], mask: &LandMask) -> Result<MetricsReport> {
    if predictions.len() != samples.len() || samples.is_empty() {
        return Err(Error::Input(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    let first = samples[0];
    let channels: Vec<(String, String)> = first.targets[0]
        .channels()
        .iter()
        .cloned()
        .zip(first.targets[0].units().iter().cloned())
        .collect();
    let mut acc = vec![vec![Accumulator::default(); first.lead_times.len()]; channels.len()];
    for (pred, s) in predictions.iter().zip(samples) {
        if s.lead_times != first.lead_times || pred.len() != s.targets.len() {
            return Err(Error::Input("samples disagree on lead times".into()));
        }
        for (h, (p, t)) in pred.iter().zip(&s.targets).enumerate() {
            check_shapes(p, t, mask)?;
            for (ci, (name, _)) in channels.iter().enumerate() {
                let (pc, tc) = (p.channel_by_name(name)?, t.channel_by_name(name)?);
                let a = &mut acc[ci][h];
                for (i, &m) in mask.cells().iter().enumerate() {
                    if m {
                        a.push(pc[i] as f64, tc[i] as f64);
                    }
                }
            }
        }
    }
    let mut rows = Vec::new();
    for ((name, unit), per_h) in channels.iter().zip(&acc) {
        for (&horizon, a) in first.lead_times.iter().zip(per_h) {
            rows.push(MetricRow {
                channel: name.clone(),
                unit: unit.clone(),
                horizon,
                rmse: a.rmse(),
                mae: a.mae(),
                r: a.correlation()?,
                n: a.count(),
            });
        }
    }
    Ok(MetricsReport { rows })
}

/// Predict every sample, denormalize, and score against the raw targets.
pub fn report(
    params: &ParamStore<f32>,
    mcfg: &ModelConfig,
    samples: &[&Sample],
    stats: &NormStats,
    mask: &LandMask,
) -> Result<MetricsReport> {
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let prep = prepare::<f32>(s, stats, mcfg)?;
        let fields = predict_normalized(params, mcfg, &prep)?
            .iter()
            .map(|f| {
                let f = denormalize(f, stats)?;
                Field::new(*s.spec(), f.channels().to_vec(), f.units().to_vec(), f.into_data())
            })
            .collect::<Result<Vec<_>>>()?;
        predictions.push(fields);
    }
    score(&predictions, samples, mask)
}

/// Summary of attention weight matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnDiagnostics {
    /// `bins + 1` equally spaced edges on `[0, 1]`.
    pub edges: Vec<f64>,
    /// Fraction of weights per bin; sums to one.
    pub mass: Vec<f64>,
    /// Mean over rows of the largest weight in the row.
    pub mu: f64,
    /// Shannon entropy (nats) of every row, matrices in order.
    pub entropy: Vec<Vec<f64>>,
}

const ROW_TOL: f64 = 1e-4;

/// Histogram, μ and entropies of row-stochastic matrices. The last bin is
/// closed so that a weight of exactly 1 is counted.
pub fn attn_diagnostics(weights: &[Array2<f64>], bins: usize) -> Result<AttnDiagnostics> {
    if weights.is_empty() || bins == 0 {
        return Err(Error::Input("need at least one matrix and one bin".into()));
    }
    let mut counts = vec![0u64; bins];
    let mut total = 0u64;
    let mut max_sum = 0.0;
    let mut rows = 0usize;
    let mut entropy = Vec::with_capacity(weights.len());
    for (k, w) in weights.iter().enumerate() {
        let mut ent = Vec::with_capacity(w.nrows());
        for (i, row) in w.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > ROW_TOL || row.iter().any(|&x| !(0.0..=1.0 + ROW_TOL).contains(&x)) {
                return Err(Error::Input(format!(
                    "attention matrix {k} row {i} is not a probability vector (sum {sum})"
                )));
            }
            let mut h = 0.0;
            let mut mx = 0.0f64;
            for &x in row {
                if x > 0.0 {
                    h -= x * x.ln();
                }
                mx = mx.max(x);
                let b = ((x * bins as f64) as usize).min(bins - 1);
                counts[b] += 1;
                total += 1;
            }
            ent.push(h);
            max_sum += mx;
            rows += 1;
        }
        entropy.push(ent);
    }
    Ok(AttnDiagnostics {
        edges: (0..=bins).map(|b| b as f64 / bins as f64).collect(),
        mass: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        mu: max_sum / rows as f64,
        entropy,
    })
}

impl AttnDiagnostics {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mu (mean row-max weight) = {:.6}", self.mu);
        for (k, e) in self.entropy.iter().enumerate() {
            let _ = writeln!(out, "layer {k} mean row entropy = {:.6} nats", mean(e.iter().copied()));
        }
        out.push_str("bin_lo, bin_hi, mass\n");
        for (b, m) in self.mass.iter().enumerate() {
            let _ = writeln!(out, "{:.4}, {:.4}, {m:e}", self.edges[b], self.edges[b + 1]);
        }
        out
    }

    /// Row entropies as a grid: one channel per matrix, `1 x N`.
    pub fn entropy_field(&self) -> Result<Field> {
        let n = self.entropy[0].len();
        if self.entropy.iter().any(|e| e.len() != n) {
            return Err(Error::Shape("attention matrices differ in size".into()));
        }
        let names = (0..self.entropy.len()).map(|k| format!("layer{k}")).collect();
        let units = vec!["nats".to_string(); self.entropy.len()];
        let data = self.entropy.iter().flatten().map(|&x| x as f32).collect();
        Field::new(GridSpec::matrix(1, n)?, names, units, data)
    }

    /// Write `attn_diagnostics.txt` and `attn_entropy.gfd`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("attn_diagnostics.txt");
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        write_grid(&self.entropy_field()?, dir.join("attn_entropy.gfd"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn line(values: &[f32]) -> Field {
        let spec = GridSpec::new(1, values.len(), 1, 1, 1).unwrap();
        Field::scalar(spec, "x", "u", values.to_vec()).unwrap()
    }

    #[test]
    fn hand_values() {
        let full = LandMask::full(*line(&[0.0, 0.0]).spec()).unwrap();
        let r = rmse(&line(&[3.0, 4.0]), &line(&[0.0, 0.0]), &full).unwrap();
        assert!((r - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(mae(&line(&[3.0, -4.0]), &line(&[0.0, 0.0]), &full).unwrap(), 3.5);
        let m3 = LandMask::full(*line(&[0.0; 3]).spec()).unwrap();
        let r = correlation(&line(&[1.0, 2.0, 3.0]), &line(&[2.0, 4.0, 7.0]), &m3).unwrap();
        // Centered: (−1, 0, 1) vs (−7/3, −1/3, 8/3); Σ products 5, Σ squares 2 and 114/9.
        let expected = 5.0 / (2.0f64.sqrt() * (114.0f64 / 9.0).sqrt());
        assert!((r - expected).abs() < 1e-12, "{r} vs {expected}");
        assert!(matches!(
            correlation(&line(&[1.0, 1.0, 1.0]), &line(&[2.0, 4.0, 7.0]), &m3),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn empty_mask_is_degenerate() {
        let spec = *line(&[0.0, 0.0]).spec();
        assert!(matches!(LandMask::new(spec, vec![false, false]), Err(Error::DegenerateMask)));
        let full = LandMask::full(spec).unwrap();
        assert!(matches!(rmse(&line(&[1.0]), &line(&[0.0, 0.0]), &full), Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_and_one_hot_attention() {
        let u = Array2::from_elem((4, 4), 0.25);
        let d = attn_diagnostics(&[u], 10).unwrap();
        assert!(d.entropy[0].iter().all(|&h| (h - 4f64.ln()).abs() < 1e-12));
        assert!((d.mu - 0.25).abs() < 1e-12);
        assert!((d.mass.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(d.mass[2], 1.0);
        let eye = Array2::<f64>::eye(3);
        let d = attn_diagnostics(&[eye], 4).unwrap();
        assert!(d.entropy[0].iter().all(|&h| h == 0.0));
        assert_eq!(d.mu, 1.0);
        assert!((d.mass[3] - 1.0 / 3.0).abs() < 1e-12);
        assert!(attn_diagnostics(&[array![[0.5, 0.6], [0.5, 0.5]]], 4).is_err());
    }
}
