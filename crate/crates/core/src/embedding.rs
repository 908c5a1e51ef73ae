//! Delay-embedding grids and their anti-diagonal (Hankel) structure.
//!
//! All indices are zero-based: cell `(j, i)` of an `S×m` grid holds the
//! target at time index `i + j`, so time indices `0..m` are observed and
//! `m..m+S-1` are the forecast horizon.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{shape_err, DefmError, Result};

/// Observed `n×m` multivariate window; row `j` is variable `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMatrix {
    n: usize,
    m: usize,
    data: Vec<f64>,
    pub dt: f64,
    pub names: Vec<String>,
}

impl SeriesMatrix {
    pub fn new(n: usize, m: usize, data: Vec<f64>, dt: f64) -> Result<Self> {
        if n < 1 || m < 1 {
            return Err(DefmError::Config(format!("series needs n >= 1 and m >= 1, got {n}x{m}")));
        }
        if data.len() != n * m {
            return shape_err("series", format!("{n}x{m} needs {} values, got {}", n * m, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DefmError::NonFinite { op: "series" });
        }
        let names = (0..n).map(|j| format!("z{}", j + 1)).collect();
        Ok(Self { n, m, data, dt, names })
    }

    /// Builds from per-variable rows.
    pub fn from_rows(rows: &[Vec<f64>], dt: f64) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return shape_err("series", "ragged rows");
        }
        Self::new(rows.len(), m, rows.concat(), dt)
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n {
            return shape_err("series", format!("{} names for {} variables", names.len(), self.n));
        }
        self.names = names;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, var: usize, t: usize) -> f64 {
        self.data[var * self.m + t]
    }

    pub fn set(&mut self, var: usize, t: usize, v: f64) {
        self.data[var * self.m + t] = v;
    }

    pub fn row(&self, var: usize) -> &[f64] {
        &self.data[var * self.m..(var + 1) * self.m]
    }

    pub fn row_mut(&mut self, var: usize) -> &mut [f64] {
        let m = self.m;
        &mut self.data[var * m..(var + 1) * m]
    }

    /// Spatial vector at time `t`.
    pub fn column(&self, t: usize) -> Vec<f64> {
        (0..self.n).map(|j| self.get(j, t)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Time-window `[start, start + len)` of every variable.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.m {
            return Err(DefmError::TooShort(format!(
                "window {start}..{} exceeds {} time points",
                start + len,
                self.m
            )));
        }
        let mut data = Vec::with_capacity(self.n * len);
        for j in 0..self.n {
            data.extend_from_slice(&self.row(j)[start..start + len]);
        }
        Self::new(self.n, len, data, self.dt)?.with_names(self.names.clone())
    }

    /// Per-variable z-score over the whole matrix; returns (normalized, means, stds).
    ///
    /// Variables with (near) zero spread keep a unit scale.
    pub fn zscore(&self) -> (Self, Vec<f64>, Vec<f64>) {
        let mut out = self.clone();
        let mut means = Vec::with_capacity(self.n);
        let mut stds = Vec::with_capacity(self.n);
        for j in 0..self.n {
            let (mean, std) = mean_std(self.row(j));
            let std = if std > 1e-12 { std } else { 1.0 };
            out.row_mut(j).iter_mut().for_each(|v| *v = (*v - mean) / std);
            means.push(mean);
            stds.push(std);
        }
        (out, means, stds)
    }
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Embedding dimension `s` (forecast span `s - 1`) and target variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub s: usize,
    pub target: usize,
}

impl EmbeddingConfig {
    /// Delay-embedding reconstruction is only guaranteed when `s` exceeds
    /// twice the attractor's box-counting dimension; that dimension is not
    /// known here, so this just renders the condition for the caller.
    pub fn takens_note(&self) -> String {
        format!(
            "embedding dimension S = {} is topologically faithful only if S > 2b (b: box-counting dimension, not estimated)",
            self.s
        )
    }
}

/// The `S×m` target grid with its known/unknown partition.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayEmbedding {
    s: usize,
    m: usize,
    values: Vec<f64>,
    known: Vec<bool>,
}

/// Builds the target's delay-embedding grid from the observed window.
pub fn build_delay_embedding(series: &SeriesMatrix, cfg: EmbeddingConfig) -> Result<DelayEmbedding> {
    let (s, m) = (cfg.s, series.m());
    if s < 1 || s > m {
        return Err(DefmError::Config(format!("embedding dimension {s} outside 1..={m}")));
    }
    if cfg.target >= series.n() {
        return Err(DefmError::Config(format!(
            "target index {} outside 0..{}",
            cfg.target,
            series.n()
        )));
    }
    let target = series.row(cfg.target);
    let mut values = vec![0.0; s * m];
    let mut known = vec![false; s * m];
    for j in 0..s {
        for i in 0..m {
            if i + j < m {
                values[j * m + i] = target[i + j];
                known[j * m + i] = true;
            }
        }
    }
    Ok(DelayEmbedding { s, m, values, known })
}

impl DelayEmbedding {
    pub fn s(&self) -> usize {
        self.s
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Observed value of cell `(j, i)`, if known.
    pub fn value(&self, j: usize, i: usize) -> Option<f64> {
        let k = j * self.m + i;
        self.known[k].then_some(self.values[k])
    }

    pub fn is_known(&self, j: usize, i: usize) -> bool {
        self.known[j * self.m + i]
    }

    pub fn unknown_count(&self) -> usize {
        self.known.iter().filter(|k| !**k).count()
    }

    /// Flat indices and observed values of every known cell, row-major.
    pub fn known_cells(&self) -> (Vec<usize>, Vec<f64>) {
        self.known
            .iter()
            .enumerate()
            .filter(|(_, k)| **k)
            .map(|(idx, _)| (idx, self.values[idx]))
            .unzip()
    }

    /// Drops supervision from every column whose flag is `false`.
    ///
    /// Those cells become unknown and fall under the consistency constraint
    /// instead of the data-fitting loss.
    pub fn restrict_supervision(&mut self, keep_columns: &[bool]) -> Result<()> {
        if keep_columns.len() != self.m {
            return shape_err("restrict_supervision", format!("{} flags for {} columns", keep_columns.len(), self.m));
        }
        for j in 0..self.s {
            for (i, &keep) in keep_columns.iter().enumerate() {
                if !keep {
                    self.known[j * self.m + i] = false;
                }
            }
        }
        Ok(())
    }
}

/// A pair of cells that estimate the same time index: `(j, i)` and
/// `(j - 1, i + 1)`.
pub type CellPair = ((usize, usize), (usize, usize));

/// Adjacent anti-diagonal pairs with at least one unknown cell.
pub fn consistency_pairs(emb: &DelayEmbedding) -> Vec<CellPair> {
    let mut pairs = Vec::new();
    for j in 1..emb.s {
        for i in 0..emb.m.saturating_sub(1) {
            if !(emb.is_known(j, i) && emb.is_known(j - 1, i + 1)) {
                pairs.push(((j, i), (j - 1, i + 1)));
            }
        }
    }
    pairs
}

/// Aggregated forecast for one future time index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonEstimate {
    /// Zero-based time index (`>= m`).
    pub time_index: usize,
    pub mean: f64,
    /// Population standard deviation of the contributing cells.
    pub spread: f64,
    pub cells: usize,
}

/// Averages every predicted cell on each future anti-diagonal.
pub fn aggregate_antidiagonal(predicted: &Tensor, emb: &DelayEmbedding) -> Result<Vec<HorizonEstimate>> {
    if predicted.shape() != [emb.s, emb.m] {
        return shape_err(
            "aggregate_antidiagonal",
            format!("prediction {:?} vs embedding {}x{}", predicted.shape(), emb.s, emb.m),
        );
    }
    let (s, m) = (emb.s, emb.m);
    let out = (m..m + s - 1)
        .map(|t| {
            let cells: Vec<f64> = (0..s)
                .filter(|&j| j <= t && t - j < m)
                .map(|j| predicted.at(j, t - j))
                .collect();
            let (mean, spread) = mean_std(&cells);
            HorizonEstimate {
                time_index: t,
                mean,
                spread,
                cells: cells.len(),
            }
        })
        .collect();
    Ok(out)
}

/// `S×m` Hankel grid of a series of length `m + s - 1`.
pub fn hankel_grid(series: &[f64], s: usize, m: usize) -> Result<Tensor> {
    if series.len() != m + s - 1 {
        return shape_err("hankel_grid", format!("need {} values, got {}", m + s - 1, series.len()));
    }
    let data = (0..s).flat_map(|j| series[j..j + m].iter().copied()).collect();
    Tensor::new(vec![s, m], data)
}

/// Reads a fully known grid back into its series: first row, then the
/// last column below it.
pub fn series_from_grid(grid: &Tensor) -> Result<Vec<f64>> {
    let Some((s, m)) = grid.dims2() else {
        return shape_err("series_from_grid", "expected 2-D grid");
    };
    let mut out: Vec<f64> = (0..m).map(|i| grid.at(0, i)).collect();
    out.extend((1..s).map(|j| grid.at(j, m - 1)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(target: &[f64]) -> SeriesMatrix {
        let noise: Vec<f64> = target.iter().map(|v| v * 0.5 + 1.0).collect();
        SeriesMatrix::from_rows(&[noise, target.to_vec()], 1.0).unwrap()
    }

    fn cfg(s: usize) -> EmbeddingConfig {
        EmbeddingConfig { s, target: 1 }
    }

    #[test]
    fn span_one_embedding() {
        let emb = build_delay_embedding(&series(&[1.0, 2.0, 3.0, 4.0]), cfg(2)).unwrap();
        assert_eq!(emb.unknown_count(), 1);
        assert_eq!((0..4).map(|i| emb.value(0, i).unwrap()).collect::<Vec<_>>(), [1.0, 2.0, 3.0, 4.0]);
        assert_eq!((0..3).map(|i| emb.value(1, i).unwrap()).collect::<Vec<_>>(), [2.0, 3.0, 4.0]);
        assert_eq!(emb.value(1, 3), None);
    }

    #[test]
    fn degenerate_single_row() {
        let emb = build_delay_embedding(&series(&[1.0, 2.0, 3.0]), cfg(1)).unwrap();
        assert_eq!(emb.unknown_count(), 0);
        assert_eq!(emb.value(0, 2), Some(3.0));
    }

    #[test]
    fn lorenz_sized_embedding() {
        let target: Vec<f64> = (0..45).map(|i| i as f64).collect();
        let emb = build_delay_embedding(&series(&target), cfg(19)).unwrap();
        assert_eq!((emb.s(), emb.m()), (19, 45));
        assert_eq!(emb.unknown_count(), 171);
        let mut future: Vec<usize> = Vec::new();
        for j in 0..19 {
            for i in 0..45 {
                if !emb.is_known(j, i) && !future.contains(&(i + j)) {
                    future.push(i + j);
                }
            }
        }
        future.sort();
        // zero-based 45..=62 is one-based 46..=63
        assert_eq!(future, (45..63).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_config() {
        let s = series(&[1.0, 2.0, 3.0]);
        assert!(build_delay_embedding(&s, cfg(4)).is_err());
        assert!(build_delay_embedding(&s, cfg(0)).is_err());
        assert!(build_delay_embedding(&s, EmbeddingConfig { s: 2, target: 2 }).is_err());
    }

    #[test]
    fn pairs_for_small_grids() {
        let emb = build_delay_embedding(&series(&[1.0, 2.0, 3.0, 4.0]), cfg(2)).unwrap();
        assert!(consistency_pairs(&emb).is_empty());
        let emb = build_delay_embedding(&series(&[1.0, 2.0, 3.0, 4.0]), cfg(3)).unwrap();
        // the 3x4 grid: time index 4 is estimated by (1,3) and (2,2);
        // time index 5 only by (2,3)
        assert_eq!(consistency_pairs(&emb), vec![((2, 2), (1, 3))]);
    }

    #[test]
    fn aggregation_mean_and_spread() {
        let emb = build_delay_embedding(&series(&[0.0; 4]), cfg(3)).unwrap();
        let mut grid = Tensor::zeros(vec![3, 4]);
        // time index 4: cells (1,3) and (2,2)
        grid.data_mut()[4 + 3] = 1.0;
        grid.data_mut()[8 + 2] = 3.0;
        grid.data_mut()[8 + 3] = 7.0;
        let est = aggregate_antidiagonal(&grid, &emb).unwrap();
        assert_eq!(est.len(), 2);
        assert_eq!(est[0].time_index, 4);
        assert_eq!(est[0].mean, 2.0);
        let oracle = (((1.0f64 - 2.0).powi(2) + (3.0f64 - 2.0).powi(2)) / 2.0).sqrt();
        assert_eq!(est[0].spread, oracle);
        assert_eq!(est[1].mean, 7.0);
        assert_eq!(est[1].spread, 0.0);
        assert_eq!(est[1].cells, 1);
    }

    #[test]
    fn aggregation_constant_antidiagonal_and_span_one() {
        let emb = build_delay_embedding(&series(&[0.0; 6]), cfg(4)).unwrap();
        let grid = hankel_grid(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], 4, 6).unwrap();
        for (k, e) in aggregate_antidiagonal(&grid, &emb).unwrap().iter().enumerate() {
            assert_eq!(e.mean, 6.0 + k as f64);
            assert_eq!(e.spread, 0.0);
        }
        let emb = build_delay_embedding(&series(&[0.0; 6]), cfg(2)).unwrap();
        let est = aggregate_antidiagonal(&Tensor::zeros(vec![2, 6]), &emb).unwrap();
        assert_eq!(est.len(), 1);
        assert_eq!(est[0].cells, 1);
        assert!(aggregate_antidiagonal(&Tensor::zeros(vec![3, 6]), &emb).is_err());
    }

    #[test]
    fn restricted_supervision_extends_pairs() {
        let mut emb = build_delay_embedding(&series(&[1.0, 2.0, 3.0, 4.0, 5.0]), cfg(3)).unwrap();
        let before = consistency_pairs(&emb).len();
        emb.restrict_supervision(&[true, false, true, true, true]).unwrap();
        assert!(!emb.is_known(0, 1));
        assert!(consistency_pairs(&emb).len() > before);
    }

    proptest! {
        #[test]
        fn hankel_round_trip(values in prop::collection::vec(-10.0f64..10.0, 3..30), s in 1usize..6) {
            prop_assume!(values.len() > s);
            let m = values.len() + 1 - s;
            let grid = hankel_grid(&values, s, m).unwrap();
            prop_assert_eq!(series_from_grid(&grid).unwrap(), values);
        }

        #[test]
        fn ignores_non_target_rows(target in prop::collection::vec(-5.0f64..5.0, 6..12), other in -3.0f64..3.0) {
            let m = target.len();
            let a = SeriesMatrix::from_rows(&[vec![other; m], target.clone()], 1.0).unwrap();
            let b = SeriesMatrix::from_rows(&[vec![-other * 2.0; m], target.clone()], 1.0).unwrap();
            prop_assert_eq!(build_delay_embedding(&a, cfg(4)).unwrap(), build_delay_embedding(&b, cfg(4)).unwrap());
        }
    }
}
