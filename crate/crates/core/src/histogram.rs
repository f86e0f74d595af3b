//! 2D histogram of cell normals over polar angle `φ = acos(−n_z)` and
//! azimuth `ψ = atan2(n_x, n_y)`.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;

use crate::cell_grid::CellGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistogramConfig {
    pub polar_bins: usize,
    pub azimuth_bins: usize,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self {
            polar_bins: 20,
            azimuth_bins: 20,
        }
    }
}

/// Invariant: `Σ counts == tracked cells`, and each tracked cell sits in
/// exactly one bin list.
#[derive(Debug, Clone)]
pub struct NormalHistogram {
    cfg: HistogramConfig,
    bins: Vec<Vec<usize>>,
    assignment: Vec<Option<usize>>,
    total: usize,
}

impl NormalHistogram {
    pub fn new(cfg: HistogramConfig) -> Result<Self> {
        if cfg.polar_bins == 0 || cfg.azimuth_bins == 0 {
            return Err(Error::InvalidInput("histogram needs at least one bin per axis".into()));
        }
        Ok(Self {
            cfg,
            bins: vec![Vec::new(); cfg.polar_bins * cfg.azimuth_bins],
            assignment: Vec::new(),
            total: 0,
        })
    }

    /// Histogram over `(cell index, unit normal)` pairs.
    pub fn build(cfg: HistogramConfig, cells: impl IntoIterator<Item = (usize, Vector3<f64>)>) -> Result<Self> {
        let mut h = Self::new(cfg)?;
        for (idx, n) in cells {
            h.insert(idx, &n)?;
        }
        Ok(h)
    }

    /// Histogram over every planar cell of `grid`.
    pub fn from_grid(cfg: HistogramConfig, grid: &CellGrid) -> Result<Self> {
        Self::build(
            cfg,
            grid.cells
                .iter()
                .enumerate()
                .filter(|(_, c)| c.planar)
                .map(|(i, c)| (i, c.normal)),
        )
    }

    pub fn config(&self) -> HistogramConfig {
        self.cfg
    }

    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn count(&self, bin: usize) -> usize {
        self.bins[bin].len()
    }

    pub fn cells_in(&self, bin: usize) -> &[usize] {
        &self.bins[bin]
    }

    pub fn bin_of_cell(&self, cell: usize) -> Option<usize> {
        self.assignment.get(cell).copied().flatten()
    }

    /// Bin index `polar · azimuth_bins + azimuth`. Normals within one polar
    /// step of the pole share azimuth bin 0.
    pub fn bin_of(&self, n: &Vector3<f64>) -> usize {
        let polar_step = PI / self.cfg.polar_bins as f64;
        let phi = (-n.z).clamp(-1.0, 1.0).acos();
        let pb = ((phi / polar_step) as usize).min(self.cfg.polar_bins - 1);
        let ab = if phi < polar_step {
            0
        } else {
            let mut psi = n.x.atan2(n.y);
            if psi < 0.0 {
                psi += TAU;
            }
            ((psi / (TAU / self.cfg.azimuth_bins as f64)) as usize).min(self.cfg.azimuth_bins - 1)
        };
        pb * self.cfg.azimuth_bins + ab
    }

    pub fn insert(&mut self, cell: usize, n: &Vector3<f64>) -> Result<()> {
        let norm = n.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("cell {cell} normal has norm {norm}")));
        }
        if self.bin_of_cell(cell).is_some() {
            return Err(Error::ContractViolation(format!("cell {cell} already tracked")));
        }
        let bin = self.bin_of(n);
        if self.assignment.len() <= cell {
            self.assignment.resize(cell + 1, None);
        }
        self.assignment[cell] = Some(bin);
        self.bins[bin].push(cell);
        self.total += 1;
        Ok(())
    }

    /// Bin with the largest count, lowest index on ties; `None` when empty.
    pub fn most_frequent_bin_index(&self) -> Option<usize> {
        let mut best: Option<(usize, usize)> = None;
        for (i, b) in self.bins.iter().enumerate() {
            if !b.is_empty() && best.map_or(true, |(_, c)| b.len() > c) {
                best = Some((i, b.len()));
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn most_frequent_bin(&self) -> Vec<usize> {
        self.most_frequent_bin_index()
            .map(|i| self.bins[i].clone())
            .unwrap_or_default()
    }

    /// Untracks `cells`. Fails without modifying anything if any cell is
    /// untracked or listed twice.
    pub fn remove_cells(&mut self, cells: &[usize]) -> Result<()> {
        let mut seen = std::collections::HashSet::with_capacity(cells.len());
        for &c in cells {
            if self.bin_of_cell(c).is_none() || !seen.insert(c) {
                return Err(Error::ContractViolation(format!("cell {c} is not tracked by the histogram")));
            }
        }
        let mut touched = Vec::new();
        for &c in cells {
            let bin = self.assignment[c].take().expect("checked above");
            touched.push(bin);
        }
        touched.sort_unstable();
        touched.dedup();
        for bin in touched {
            let assignment = &self.assignment;
            self.bins[bin].retain(|&c| assignment[c].is_some());
        }
        self.total -= cells.len();
        Ok(())
    }
}
