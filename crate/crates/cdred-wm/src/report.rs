//! Report assembly: visitation coverage, labeled success tables, degradation
//! arithmetic, and demo-count ablations. Every report renders as an aligned
//! text table and as a CSV carrying the same numbers at full precision.

use crate::dataset::Episode;

fn aligned_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut push_row = |cells: &[String]| {
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            out.push_str(cell);
            if i + 1 < cols {
                for _ in cell.len()..widths[i] {
                    out.push(' ');
                }
            }
        }
        out.push('\n');
    };
    push_row(&headers.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    for row in rows {
        push_row(row);
    }
    out
}

/// Per-dimension visitation histograms over the workspace box `[-1, 1]`.
/// Values outside the box (a biased object pose can poke past it) land in
/// the edge cells.
pub struct CoverageReport {
    pub bins_per_dim: usize,
    /// `[dim][bin]` visit counts for the expert dataset.
    pub expert_hist: Vec<Vec<usize>>,
    /// `[dim][bin]` visit counts for the behavioral rollouts.
    pub behavioral_hist: Vec<Vec<usize>>,
}

fn bin_index(value: f64, bins: usize) -> usize {
    let unit = (value.clamp(-1.0, 1.0) + 1.0) / 2.0;
    ((unit * bins as f64) as usize).min(bins - 1)
}

fn accumulate(episodes: &[Episode], dims: usize, bins: usize) -> Vec<Vec<usize>> {
    let mut hist = vec![vec![0usize; bins]; dims];
    let visit = |state: &[f64], hist: &mut Vec<Vec<usize>>| {
        assert_eq!(state.len(), dims, "all episodes must share one state width");
        for (d, &v) in state.iter().enumerate() {
            hist[d][bin_index(v, bins)] += 1;
        }
    };
    for ep in episodes {
        for tr in &ep.transitions {
            visit(&tr.state, &mut hist);
        }
        if let Some(last) = ep.transitions.last() {
            visit(&last.next_state, &mut hist);
        }
    }
    hist
}

/// Bins every visited state (including terminal ones) of both datasets.
pub fn coverage(expert: &[Episode], behavioral: &[Episode], bins_per_dim: usize) -> CoverageReport {
    assert!(bins_per_dim >= 1, "need at least one bin");
    let dims = expert
        .iter()
        .chain(behavioral)
        .flat_map(|ep| ep.transitions.first())
        .map(|tr| tr.state.len())
        .next()
        .expect("coverage needs at least one transition");
    CoverageReport {
        bins_per_dim,
        expert_hist: accumulate(expert, dims, bins_per_dim),
        behavioral_hist: accumulate(behavioral, dims, bins_per_dim),
    }
}

impl CoverageReport {
    pub fn dims(&self) -> usize {
        self.expert_hist.len()
    }

    pub fn expert_occupied(&self, dim: usize) -> usize {
        self.expert_hist[dim].iter().filter(|&&c| c > 0).count()
    }

    pub fn behavioral_occupied(&self, dim: usize) -> usize {
        self.behavioral_hist[dim].iter().filter(|&&c| c > 0).count()
    }

    /// Occupied-cell ratio behavioral / expert; infinite when the expert
    /// never visited the dimension at all.
    pub fn ratio(&self, dim: usize) -> f64 {
        self.behavioral_occupied(dim) as f64 / self.expert_occupied(dim) as f64
    }

    pub fn dims_with_ratio_at_least(&self, threshold: f64) -> usize {
        (0..self.dims()).filter(|&d| self.ratio(d) >= threshold).count()
    }

    fn rows(&self) -> Vec<Vec<String>> {
        (0..self.dims())
            .map(|d| {
                vec![
                    d.to_string(),
                    self.expert_occupied(d).to_string(),
                    self.behavioral_occupied(d).to_string(),
                    format!("{:.3}", self.ratio(d)),
                ]
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        aligned_table(&["dim", "expert_cells", "behavioral_cells", "ratio"], &self.rows())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dim,expert_cells,behavioral_cells,ratio\n");
        for d in 0..self.dims() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                d,
                self.expert_occupied(d),
                self.behavioral_occupied(d),
                self.ratio(d)
            ));
        }
        out
    }

    /// Long-format per-cell counts for external plotting.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("dim,bin,lo,hi,expert,behavioral\n");
        let width = 2.0 / self.bins_per_dim as f64;
        for d in 0..self.dims() {
            for b in 0..self.bins_per_dim {
                let lo = -1.0 + b as f64 * width;
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    d,
                    b,
                    lo,
                    lo + width,
                    self.expert_hist[d][b],
                    self.behavioral_hist[d][b]
                ));
            }
        }
        out
    }
}

/// A labeled success rate read from one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SuccessRow {
    pub label: String,
    pub success_rate: f64,
    pub episodes: usize,
}

/// Side-by-side success rates of several runs (method comparisons).
pub struct TransferReport {
    pub rows: Vec<SuccessRow>,
}

impl TransferReport {
    pub fn to_text(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![r.label.clone(), format!("{:.3}", r.success_rate), r.episodes.to_string()]
            })
            .collect();
        aligned_table(&["run", "success_rate", "episodes"], &rows)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,success_rate,episodes\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.label, r.success_rate, r.episodes));
        }
        out
    }
}

/// Success before and after moving a policy into a shifted domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationRow {
    pub label: String,
    pub original: f64,
    pub finetuned: f64,
}

impl DegradationRow {
    pub fn degradation(&self) -> f64 {
        self.original - self.finetuned
    }
}

pub struct DegradationReport {
    pub rows: Vec<DegradationRow>,
}

impl DegradationReport {
    pub fn to_text(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    format!("{:.3}", r.original),
                    format!("{:.3}", r.finetuned),
                    format!("{:.3}", r.degradation()),
                ]
            })
            .collect();
        aligned_table(&["run", "original", "finetuned", "degradation"], &rows)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,original,finetuned,degradation\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.label,
                r.original,
                r.finetuned,
                r.degradation()
            ));
        }
        out
    }
}

/// Success as a function of finetuning-demo count, sorted ascending.
pub struct AblationReport {
    pub rows: Vec<(usize, f64)>,
}

impl AblationReport {
    pub fn new(mut rows: Vec<(usize, f64)>) -> Self {
        rows.sort_by_key(|&(demos, _)| demos);
        Self { rows }
    }

    pub fn to_text(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|&(demos, rate)| vec![demos.to_string(), format!("{rate:.3}")])
            .collect();
        aligned_table(&["demos", "success_rate"], &rows)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("demos,success_rate\n");
        for &(demos, rate) in &self.rows {
            out.push_str(&format!("{demos},{rate}\n"));
        }
        out
    }
}
