//! Partition grids, counting-process increments, and at-risk counts.
//!
//! Gaps are binned into right-closed intervals `(t_{j-1}, t_j]` and at-risk
//! counts are evaluated at the right endpoints with a closed comparison, so a
//! gap tied with a cut point counts both as an event in that interval and as
//! at risk at that cut. On grids whose cuts sit at the observed event times
//! this makes the small-precision limit of the Bayes hazard estimator agree
//! with Breslow-type sums term by term.

use std::io::Write;

use thiserror::Error;

use crate::data::{Cohort, SubjectHistory};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid cuts must start at 0 and be strictly increasing")]
    NonMonotone,
    #[error("grid needs at least one interval")]
    Empty,
    #[error("step and horizon must be positive, got step={step}, horizon={horizon}")]
    BadStep { step: f64, horizon: f64 },
    #[error("time {time} lies beyond the grid horizon {horizon}")]
    BeyondHorizon { time: f64, horizon: f64 },
}

/// Ordered cut points `t_0 = 0 < t_1 < ... < t_M`; interval `j` (1-based in
/// the formulas, 0-based in storage) is `(t_{j-1}, t_j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionGrid {
    cuts: Vec<f64>,
}

impl PartitionGrid {
    /// Builds a grid from explicit cut points, the leading 0 included.
    pub fn from_cuts(cuts: Vec<f64>) -> Result<Self, GridError> {
        if cuts.len() < 2 {
            return Err(GridError::Empty);
        }
        if cuts[0] != 0.0 {
            return Err(GridError::NonMonotone);
        }
        if cuts.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(GridError::NonMonotone);
        }
        Ok(PartitionGrid { cuts })
    }

    /// Regular grid `0, step, 2*step, ..., horizon`. The final cut is pinned
    /// to `horizon` exactly.
    pub fn regular(step: f64, horizon: f64) -> Result<Self, GridError> {
        if !(step > 0.0) || !(horizon > 0.0) || !step.is_finite() || !horizon.is_finite() {
            return Err(GridError::BadStep { step, horizon });
        }
        let m = (horizon / step - 1e-9).ceil().max(1.0) as usize;
        let mut cuts = Vec::with_capacity(m + 1);
        for j in 0..m {
            cuts.push(j as f64 * step);
        }
        cuts.push(horizon);
        PartitionGrid::from_cuts(cuts)
    }

    /// Data-driven grid: cuts at the pooled distinct completed gap times of
    /// all recurrent types plus observed terminal times (Breslow-style).
    pub fn from_data(cohort: &Cohort) -> Result<Self, GridError> {
        let mut times: Vec<f64> = Vec::new();
        for s in &cohort.subjects {
            for g in &s.gaps {
                times.extend_from_slice(g);
            }
            if let (true, Some(t0)) = (s.terminal_observed, s.terminal_time) {
                times.push(t0);
            }
        }
        times.sort_by(|a, b| a.partial_cmp(b).expect("non-finite event time"));
        times.dedup();
        let mut cuts = Vec::with_capacity(times.len() + 1);
        cuts.push(0.0);
        cuts.extend(times);
        PartitionGrid::from_cuts(cuts)
    }

    /// Number of intervals `M`.
    pub fn m(&self) -> usize {
        self.cuts.len() - 1
    }

    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    pub fn horizon(&self) -> f64 {
        *self.cuts.last().expect("grid is nonempty")
    }

    /// Right endpoint of interval `j` (0-based).
    pub fn right(&self, j: usize) -> f64 {
        self.cuts[j + 1]
    }

    /// 0-based interval index with `t_{j-1} < t <= t_j`, or an error beyond
    /// the horizon. Requires `t > 0`.
    pub fn interval_of(&self, t: f64) -> Result<usize, GridError> {
        debug_assert!(t > 0.0);
        if t > self.horizon() {
            return Err(GridError::BeyondHorizon {
                time: t,
                horizon: self.horizon(),
            });
        }
        // first cut >= t; its (index - 1) is the 0-based interval
        let pos = self.cuts.partition_point(|&c| c < t);
        Ok(pos - 1)
    }
}

/// Gap-time at-risk count for type `q` (1-based) at time `u`: the number of
/// completed type-`q` gaps at least `u` plus the residual-gap indicator.
pub fn gap_at_risk(subject: &SubjectHistory, q: usize, u: f64) -> u32 {
    debug_assert!(u > 0.0);
    let qi = q - 1;
    let completed = subject.gaps[qi].iter().filter(|&&g| g >= u).count() as u32;
    completed + u32::from(subject.residual[qi] >= u)
}

/// Terminal-event at-risk indicator at time `u`: 1 while the subject is
/// under observation and alive, i.e. `min(tau, terminal time) >= u`.
pub fn terminal_at_risk(subject: &SubjectHistory, u: f64) -> u32 {
    debug_assert!(u > 0.0);
    u32::from(subject.observation_end() >= u)
}

/// Per-subject, per-interval counting increments and at-risk counts for every
/// recurrent type and the terminal event, plus the covariates: everything the
/// likelihood needs from the data.
#[derive(Debug, Clone)]
pub struct RiskSummary {
    n: usize,
    q_count: usize,
    m: usize,
    p: usize,
    grid: PartitionGrid,
    n_inc: Vec<u32>,
    y_at: Vec<u32>,
    n0_inc: Vec<u32>,
    y0_at: Vec<u32>,
    k_rec: Vec<u32>,
    k_term: Vec<u32>,
    covariates: Vec<f64>,
}

/// Identifies one hazard block: a recurrent type (1-based) or the terminal
/// event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Recurrent(usize),
    Terminal,
}

impl Block {
    /// All blocks of a model with `q_count` recurrent types, terminal last.
    pub fn all(q_count: usize) -> Vec<Block> {
        let mut v: Vec<Block> = (1..=q_count).map(Block::Recurrent).collect();
        v.push(Block::Terminal);
        v
    }

    pub fn label(&self) -> String {
        match self {
            Block::Recurrent(q) => format!("{q}"),
            Block::Terminal => "0".into(),
        }
    }
}

/// Builds the [`RiskSummary`] of a cohort over a grid.
///
/// Fails when any gap or terminal time lies beyond the grid horizon.
pub fn summarize(cohort: &Cohort, grid: &PartitionGrid) -> Result<RiskSummary, GridError> {
    let n = cohort.n_subjects();
    let q_count = cohort.q_count;
    let m = grid.m();
    let mut rs = RiskSummary {
        n,
        q_count,
        m,
        p: cohort.p,
        grid: grid.clone(),
        n_inc: vec![0; q_count * n * m],
        y_at: vec![0; q_count * n * m],
        n0_inc: vec![0; n * m],
        y0_at: vec![0; n * m],
        k_rec: vec![0; q_count * n],
        k_term: vec![0; n],
        covariates: vec![0.0; n * cohort.p],
    };
    for (i, s) in cohort.subjects.iter().enumerate() {
        rs.covariates[i * cohort.p..(i + 1) * cohort.p].copy_from_slice(&s.covariates);
        for q in 1..=q_count {
            let qi = q - 1;
            let base = (qi * n + i) * m;
            for &gap in &s.gaps[qi] {
                let j = grid.interval_of(gap)?;
                rs.n_inc[base + j] += 1;
                rs.k_rec[qi * n + i] += 1;
            }
            // At-risk count at each right endpoint; nonincreasing in j, so
            // stop once it reaches zero.
            for j in 0..m {
                let y = gap_at_risk(s, q, grid.right(j));
                if y == 0 {
                    break;
                }
                rs.y_at[base + j] = y;
            }
        }
        if let (true, Some(t0)) = (s.terminal_observed, s.terminal_time) {
            let j = grid.interval_of(t0)?;
            rs.n0_inc[i * m + j] = 1;
            rs.k_term[i] = 1;
        } else if let Some(t0) = s.terminal_time {
            // Unobserved terminal time beyond tau carries no event mass but
            // must still lie on the grid for consistency with the contract.
            if t0 > grid.horizon() {
                return Err(GridError::BeyondHorizon {
                    time: t0,
                    horizon: grid.horizon(),
                });
            }
        }
        for j in 0..m {
            let y = terminal_at_risk(s, grid.right(j));
            if y == 0 {
                break;
            }
            rs.y0_at[i * m + j] = y;
        }
    }
    Ok(rs)
}

impl RiskSummary {
    pub fn n_subjects(&self) -> usize {
        self.n
    }
    pub fn q_count(&self) -> usize {
        self.q_count
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn p(&self) -> usize {
        self.p
    }
    pub fn grid(&self) -> &PartitionGrid {
        &self.grid
    }

    pub fn covariates(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.p..(i + 1) * self.p]
    }

    /// Event-count increment for `block` of subject `i` in interval `j`.
    pub fn inc(&self, block: Block, i: usize, j: usize) -> u32 {
        match block {
            Block::Recurrent(q) => self.n_inc[((q - 1) * self.n + i) * self.m + j],
            Block::Terminal => self.n0_inc[i * self.m + j],
        }
    }

    /// At-risk count for `block` of subject `i` at the right endpoint of
    /// interval `j`.
    pub fn at_risk(&self, block: Block, i: usize, j: usize) -> u32 {
        match block {
            Block::Recurrent(q) => self.y_at[((q - 1) * self.n + i) * self.m + j],
            Block::Terminal => self.y0_at[i * self.m + j],
        }
    }

    /// Row of at-risk counts over intervals for one subject and block.
    pub fn at_risk_row(&self, block: Block, i: usize) -> &[u32] {
        match block {
            Block::Recurrent(q) => {
                let base = ((q - 1) * self.n + i) * self.m;
                &self.y_at[base..base + self.m]
            }
            Block::Terminal => &self.y0_at[i * self.m..(i + 1) * self.m],
        }
    }

    pub fn inc_row(&self, block: Block, i: usize) -> &[u32] {
        match block {
            Block::Recurrent(q) => {
                let base = ((q - 1) * self.n + i) * self.m;
                &self.n_inc[base..base + self.m]
            }
            Block::Terminal => &self.n0_inc[i * self.m..(i + 1) * self.m],
        }
    }

    /// Total event count of `block` for subject `i`.
    pub fn events(&self, block: Block, i: usize) -> u32 {
        match block {
            Block::Recurrent(q) => self.k_rec[(q - 1) * self.n + i],
            Block::Terminal => self.k_term[i],
        }
    }

    /// `N_i`: recurrent events over all types plus the terminal indicator.
    pub fn total_events(&self, i: usize) -> u32 {
        let rec: u32 = (1..=self.q_count)
            .map(|q| self.events(Block::Recurrent(q), i))
            .sum();
        rec + self.k_term[i]
    }

    /// Pooled event count of `block` in interval `j`.
    pub fn pooled_inc(&self, block: Block, j: usize) -> u32 {
        (0..self.n).map(|i| self.inc(block, i, j)).sum()
    }

    /// Debug dump `q,i,j,n_inc,y_at` (terminal rows use q = 0).
    pub fn write_debug_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "q,i,j,n_inc,y_at")?;
        for block in Block::all(self.q_count) {
            let label = block.label();
            for i in 0..self.n {
                for j in 0..self.m {
                    let (n, y) = (self.inc(block, i, j), self.at_risk(block, i, j));
                    if n > 0 || y > 0 {
                        writeln!(w, "{label},{i},{j},{n},{y}")?;
                    }
                }
            }
        }
        Ok(())
    }
}
