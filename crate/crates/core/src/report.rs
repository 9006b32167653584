//! Layer trajectories, summary statistics and tidy CSV output.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::SCHEMA_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Capacity,
    Radius,
    Dimension,
    RhoCenter,
    AlphaSim,
    Tpr,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Capacity,
        Metric::Radius,
        Metric::Dimension,
        Metric::RhoCenter,
        Metric::AlphaSim,
        Metric::Tpr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Capacity => "capacity",
            Metric::Radius => "radius",
            Metric::Dimension => "dimension",
            Metric::RhoCenter => "rho_center",
            Metric::AlphaSim => "alpha_sim",
            Metric::Tpr => "tpr",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerValue {
    pub layer: usize,
    /// `layer / (num_layers - 1)`, comparable across models of different depth.
    pub x: f64,
    /// Mean over repetitions.
    pub raw_value: f64,
    pub normalized_value: f64,
    /// Standard error of the mean over repetitions; zero for a single one.
    pub stderr: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub schema_version: u32,
    pub task: String,
    pub metric: Metric,
    /// Name of the label subset the metric was restricted to, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
    pub per_layer: Vec<LayerValue>,
    pub repetitions: usize,
    pub normalization_layer: usize,
    pub num_layers: usize,
}

impl TrajectoryReport {
    pub fn layer(&self, layer: usize) -> Option<&LayerValue> {
        self.per_layer.iter().find(|v| v.layer == layer)
    }

    /// Tidy CSV: one row per layer.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Format(format!("csv: {e}"));
        w.write_record(["task", "subset", "metric", "layer", "x", "raw_value", "normalized_value", "stderr"])
            .map_err(io)?;
        for v in &self.per_layer {
            w.write_record([
                self.task.clone(),
                self.subset.clone().unwrap_or_default(),
                self.metric.to_string(),
                v.layer.to_string(),
                v.x.to_string(),
                v.raw_value.to_string(),
                v.normalized_value.to_string(),
                v.stderr.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Format(format!("csv: {e}")))
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Standard error of the mean using the unbiased sample variance.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Horizontal position of `layer` in a model with `num_layers` layers.
pub fn layer_x(layer: usize, num_layers: usize) -> f64 {
    if num_layers < 2 {
        0.0
    } else {
        layer as f64 / (num_layers - 1) as f64
    }
}

/// Builds a trajectory from per-layer repetition values, normalized by the
/// mean at `normalization_layer`.
pub fn layer_trajectory(
    task: &str,
    metric: Metric,
    values: &[(usize, Vec<f64>)],
    normalization_layer: usize,
    num_layers: usize,
) -> Result<TrajectoryReport> {
    if values.is_empty() {
        return Err(Error::Validation("trajectory needs at least one layer".into()));
    }
    let mut sorted: Vec<&(usize, Vec<f64>)> = values.iter().collect();
    sorted.sort_by_key(|(l, _)| *l);
    for w in sorted.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::Validation(format!("layer {} given twice", w[0].0)));
        }
    }
    for (l, v) in &sorted {
        if v.is_empty() {
            return Err(Error::Validation(format!("layer {l} has no values")));
        }
        if v.iter().any(|x| x.is_nan()) {
            return Err(Error::Validation(format!("layer {l} has NaN values")));
        }
    }
    let norm = sorted
        .iter()
        .find(|(l, _)| *l == normalization_layer)
        .map(|(_, v)| mean(v))
        .ok_or_else(|| Error::Validation(format!("normalization layer {normalization_layer} missing")))?;
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Validation(format!(
            "cannot normalize by {norm} at layer {normalization_layer}"
        )));
    }
    let repetitions = sorted.iter().map(|(_, v)| v.len()).max().unwrap_or(1);
    let num_layers = num_layers.max(sorted.last().map(|(l, _)| l + 1).unwrap_or(1));
    let per_layer = sorted
        .iter()
        .map(|(l, v)| {
            let m = mean(v);
            LayerValue {
                layer: *l,
                x: layer_x(*l, num_layers),
                raw_value: m,
                normalized_value: m / norm,
                stderr: standard_error(v),
                values: v.clone(),
            }
        })
        .collect();
    Ok(TrajectoryReport {
        schema_version: SCHEMA_VERSION,
        task: task.to_string(),
        metric,
        subset: None,
        per_layer,
        repetitions,
        normalization_layer,
        num_layers,
    })
}

/// Relative change `(last - first) / first`.
pub fn ratio_metric(x_first: f64, x_last: f64) -> Result<f64> {
    if x_first == 0.0 {
        return Err(Error::Validation("ratio undefined for a zero first value".into()));
    }
    Ok((x_last - x_first) / x_first)
}

/// Normalization layer used when none is given: the first analysed layer,
/// except for simulation capacity which skips the embedding layer.
pub fn default_normalization_layer(metric: Metric, layers: &[usize]) -> usize {
    let want = if metric == Metric::AlphaSim { 1 } else { 0 };
    layers
        .iter()
        .copied()
        .find(|&l| l >= want)
        .or_else(|| layers.first().copied())
        .unwrap_or(0)
}

/// Pearson product-moment correlation.
pub fn correlate(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Validation(format!("{} xs but {} ys", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation("need at least two pairs".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite value in correlation input".into()));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Equal-width histogram over the data range. The last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::Validation("histogram needs at least one bin".into()));
    }
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("histogram needs finite values".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            lower: lo + k as f64 * width,
            upper: if k + 1 == bins { hi } else { lo + (k + 1) as f64 * width },
            count,
        })
        .collect())
}

pub fn write_histogram_csv<W: Write>(bins: &[HistogramBin], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for b in bins {
        w.serialize(b).map_err(|e| Error::Format(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::Format(format!("csv: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn trajectory_normalizes_at_chosen_layer() {
        let v = vec![(0, vec![0.2]), (1, vec![0.3]), (2, vec![0.1])];
        let t = layer_trajectory("pos", Metric::Capacity, &v, 0, 3).unwrap();
        let norm: Vec<f64> = t.per_layer.iter().map(|l| l.normalized_value).collect();
        assert_relative_eq!(norm[0], 1.0);
        assert_relative_eq!(norm[1], 1.5, epsilon = 1e-12);
        assert_relative_eq!(norm[2], 0.5, epsilon = 1e-12);
        assert_eq!(t.per_layer[1].x, 0.5);
    }

    #[test]
    fn equal_repetitions_have_zero_stderr() {
        let v = vec![(0, vec![0.4; 5]), (1, vec![0.7, 0.7, 0.7, 0.7, 0.7])];
        let t = layer_trajectory("w", Metric::Radius, &v, 1, 2).unwrap();
        assert!(t.per_layer.iter().all(|l| l.stderr == 0.0));
        assert_eq!(t.repetitions, 5);
        assert_eq!(t.layer(1).unwrap().normalized_value, 1.0);
    }

    #[test]
    fn trajectory_errors() {
        assert!(layer_trajectory("t", Metric::Tpr, &[], 0, 1).is_err());
        assert!(layer_trajectory("t", Metric::Tpr, &[(0, vec![0.0]), (1, vec![1.0])], 0, 2).is_err());
        assert!(layer_trajectory("t", Metric::Tpr, &[(1, vec![1.0])], 0, 2).is_err());
    }

    #[test]
    fn stderr_matches_hand_computation() {
        // sample sd of {1, 2, 3} is 1
        assert_relative_eq!(standard_error(&[1.0, 2.0, 3.0]), 1.0 / 3f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn ratio_examples() {
        assert_relative_eq!(ratio_metric(0.2, 0.3).unwrap(), 0.5, epsilon = 1e-12);
        assert_eq!(ratio_metric(0.7, 0.7).unwrap(), 0.0);
        assert_relative_eq!(ratio_metric(0.4, 0.2).unwrap(), -0.5);
        assert!(ratio_metric(0.0, 1.0).is_err());
    }

    #[test]
    fn correlation_examples() {
        let xs = [0.3, -1.0, 2.5, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert_relative_eq!(correlate(&xs, &ys).unwrap(), 1.0, epsilon = 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert_relative_eq!(correlate(&xs, &neg).unwrap(), -1.0, epsilon = 1e-12);
        assert!(matches!(correlate(&xs, &[1.0; 4]), Err(Error::UndefinedCorrelation(_))));
        assert!(correlate(&[1.0], &[2.0]).is_err());
        assert!(correlate(&[1.0, 2.0], &[2.0]).is_err());
    }

    #[test]
    fn histogram_counts_everything() {
        let h = histogram(&[0.0, 0.1, 0.5, 0.9, 1.0], 2).unwrap();
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(h[1].upper, 1.0);
        let flat = histogram(&[2.0, 2.0], 3).unwrap();
        assert_eq!(flat.iter().map(|b| b.count).sum::<usize>(), 2);
        assert!(histogram(&[], 3).is_err());
        assert!(histogram(&[1.0], 0).is_err());
    }

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
    }
}
