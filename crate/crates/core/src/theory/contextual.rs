//! Contextual mapping built from Heaviside ("modified sigmoid") attention.
//!
//! Inputs are sequences of distinct points on the grid `{0, δ, …, 1−δ}^d`.
//! Each point is reduced to the scalar index `l = uᵀx` with
//! `u = [1, δ⁻¹, …, δ^{−d+1}]`, so `l = δ·m` for an integer `m < δ^{−d}`.
//! One selective-shift layer per grid index updates only the token sitting at
//! that index; a final global shift broadcasts the last token. The resulting
//! values `q` must be distinct within and across sequences.
//!
//! `δ` is restricted to negative powers of two so that, with an integer `c`,
//! every intermediate value is a dyadic rational and comparisons are exact.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::parallel::{map_indexed, Schedule};

/// Largest number of sequences [`contextual_mapping_check`] will enumerate.
pub const ENUMERATION_BUDGET: u128 = 100_000;

/// Heaviside step with `H(0) = ½`.
#[inline]
pub fn heaviside(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        0.0
    } else {
        0.5
    }
}

fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
    }
    r
}

/// `δ^{−1}` when `δ = 2^{−k}` for some `k ≥ 1`.
fn grid_size(delta: f64) -> Result<u64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    let inv = 1.0 / delta;
    if inv.fract() != 0.0 || !(inv as u64).is_power_of_two() || inv > (1u64 << 20) as f64 {
        return Err(invalid(format!("delta must be 2^-k with 1 <= k <= 20, got {delta}")));
    }
    Ok(inv as u64)
}

/// Number of grid points `δ^{−d}`.
fn grid_points(delta: f64, d: usize) -> Result<u64> {
    let g = grid_size(delta)?;
    if d == 0 {
        return Err(invalid("d must be >= 1"));
    }
    g.checked_pow(d as u32)
        .filter(|&p| p <= (1u64 << 40))
        .ok_or_else(|| invalid(format!("grid of {g}^{d} points is too large")))
}

/// Lower bound on `c`: `(n−1)(δ^{−d}−1)·C(n−1, ⌈(n−1)/2⌉)`.
pub fn c_threshold(delta: f64, d: usize, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(invalid("n must be >= 2"));
    }
    let g = grid_points(delta, d)?;
    let m = (n - 1) as u64;
    Ok(m as f64 * (g - 1) as f64 * binomial(m, m.div_ceil(2)) as f64)
}

/// Ordered sequence of distinct grid points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSeq {
    pub delta: f64,
    pub d: usize,
    pub n: usize,
    /// Points sorted by scalar index.
    pub columns: Vec<Vec<f64>>,
}

impl GridSeq {
    /// Validates the points and sorts them by scalar index.
    pub fn new(delta: f64, columns: Vec<Vec<f64>>) -> Result<Self> {
        let g = grid_size(delta)?;
        let d = columns.first().map_or(0, |c| c.len());
        if columns.is_empty() || d == 0 {
            return Err(invalid("a grid sequence needs at least one non-empty point"));
        }
        for col in &columns {
            if col.len() != d {
                return Err(invalid("all points must have the same dimension"));
            }
            for &x in col {
                let m = x / delta;
                if !(x >= 0.0) || m.fract() != 0.0 || m >= g as f64 {
                    return Err(invalid(format!("coordinate {x} is not on the grid of step {delta}")));
                }
            }
        }
        let mut seq = Self {
            delta,
            d,
            n: columns.len(),
            columns,
        };
        let u = seq.u();
        seq.columns.sort_by(|a, b| dot(&u, a).total_cmp(&dot(&u, b)));
        let l = seq.indices();
        if l.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("duplicate points in grid sequence"));
        }
        Ok(seq)
    }

    /// Builds the sequence whose scalar indices are `δ·m` for the given `m`.
    pub fn from_grid_indices(delta: f64, d: usize, ms: &[u64]) -> Result<Self> {
        let g = grid_size(delta)?;
        let columns = ms
            .iter()
            .map(|&m| {
                let mut rest = m;
                (0..d)
                    .map(|_| {
                        let digit = rest % g;
                        rest /= g;
                        digit as f64 * delta
                    })
                    .collect()
            })
            .collect();
        Self::new(delta, columns)
    }

    fn u(&self) -> Vec<f64> {
        (0..self.d).map(|k| self.delta.powi(-(k as i32))).collect()
    }

    /// Scalar indices `l = uᵀx`, increasing.
    pub fn indices(&self) -> Vec<f64> {
        let u = self.u();
        self.columns.iter().map(|c| dot(&u, c)).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One Heaviside head on scalar indices: entry `j` is
/// `Σ_k l_k · H((l_k − b_q)(l_j − b_k))`.
pub fn heaviside_head(l: &[f64], b_q: f64, b_k: f64) -> Vec<f64> {
    l.iter()
        .map(|&lj| l.iter().map(|&lk| lk * heaviside((lk - b_q) * (lj - b_k))).sum())
        .collect()
}

/// Selective shift for grid index `i`: four heads whose combination adds
/// `c·Σ_{l_k > iδ} l_k` to the token at `iδ` and leaves the rest alone.
pub fn selective_shift(l: &[f64], i: u64, delta: f64, c: f64) -> Vec<f64> {
    let lo = (i as f64 - 0.5) * delta;
    let hi = (i as f64 + 0.5) * delta;
    let h1 = heaviside_head(l, 0.0, lo);
    let h2 = heaviside_head(l, 0.0, hi);
    let h3 = heaviside_head(l, hi, hi);
    let h4 = heaviside_head(l, hi, lo);
    (0..l.len())
        .map(|j| l[j] + 0.5 * c * (h1[j] - h2[j] - h3[j] + h4[j]))
        .collect()
}

/// Global shift: adds `c^{n+1}·Σ_{l_k > (c^n + ½)δ} l_k` to every token.
pub fn global_shift(l: &[f64], delta: f64, c: f64) -> Vec<f64> {
    let n = l.len() as i32;
    let b_q = (c.powi(n) + 0.5) * delta;
    let h = heaviside_head(l, b_q, 0.0);
    let w = c.powi(n + 1);
    l.iter().zip(&h).map(|(&x, &y)| x + w * y).collect()
}

/// Indices after all selective shifts, before the global shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftTrace {
    pub l: Vec<f64>,
    pub l_tilde: Vec<f64>,
    pub q: Vec<f64>,
}

fn run_stack(l: &[f64], delta: f64, grid: u64, c: f64) -> ShiftTrace {
    let mut cur = l.to_vec();
    for i in 0..grid {
        cur = selective_shift(&cur, i, delta, c);
    }
    let q = global_shift(&cur, delta, c);
    ShiftTrace {
        l: l.to_vec(),
        l_tilde: cur,
        q,
    }
}

/// Full layer stack on `x`; returns `q(X)`. Rejects `c` at or below the
/// threshold.
pub fn selective_shift_stack(x: &GridSeq, c: f64) -> Result<Vec<f64>> {
    Ok(selective_shift_trace(x, c, false)?.q)
}

/// Like [`selective_shift_stack`] but returns intermediate indices; `force`
/// skips the threshold check.
pub fn selective_shift_trace(x: &GridSeq, c: f64, force: bool) -> Result<ShiftTrace> {
    let grid = grid_points(x.delta, x.d)?;
    let threshold = c_threshold(x.delta, x.d, x.n.max(2))?;
    if !c.is_finite() || (!force && c <= threshold) {
        return Err(invalid(format!("c = {c} must exceed the threshold {threshold}")));
    }
    Ok(run_stack(&x.indices(), x.delta, grid, c))
}

/// Outcome of the exhaustive check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextualReport {
    pub delta: f64,
    pub d: usize,
    pub n: usize,
    pub c: f64,
    pub threshold: f64,
    pub precondition_met: bool,
    pub sequences: usize,
    /// Distinct values within every sequence.
    pub property_i: bool,
    /// No value shared between two different sequences.
    pub property_ii: bool,
    /// `l̃` strictly increasing in every sequence.
    pub monotone: bool,
    /// `c^j δ < l̃_j` for `j > 1` and `l̃_j < c^{j+1} δ` for `1 < j < n`.
    pub bounds: bool,
    /// `l̃_j ≤ c^n δ` for `j < n` and `l̃_n > c^n δ`.
    pub last_layer_condition: bool,
    /// Smallest gap between any two produced values.
    pub min_separation: f64,
    /// Every intermediate value is a dyadic rational within `f64` precision.
    pub exact_arithmetic: bool,
    pub failures: Vec<String>,
    pub all_hold: bool,
}

const MAX_FAILURES: usize = 10;

fn combinations(g: u64, n: usize) -> Vec<Vec<u64>> {
    let mut out = Vec::new();
    let mut cur: Vec<u64> = (0..n as u64).collect();
    if n as u64 > g {
        return out;
    }
    loop {
        out.push(cur.clone());
        // rightmost position that can still advance
        let mut pos = n;
        while pos > 0 {
            pos -= 1;
            if cur[pos] < g - (n - pos) as u64 {
                break;
            }
            if pos == 0 {
                return out;
            }
        }
        if cur[pos] >= g - (n - pos) as u64 {
            return out;
        }
        cur[pos] += 1;
        for k in pos + 1..n {
            cur[k] = cur[k - 1] + 1;
        }
    }
}

/// Enumerates every ordered sequence of `n` distinct grid points and checks
/// both contextual-mapping properties exactly. Below the `c` threshold it
/// errors unless `force` is set, in which case failures are reported.
pub fn contextual_mapping_check(
    delta: f64,
    d: usize,
    n: usize,
    c: f64,
    force: bool,
    schedule: Schedule,
) -> Result<ContextualReport> {
    let threshold = c_threshold(delta, d, n)?;
    let grid = grid_points(delta, d)?;
    let precondition_met = c > threshold;
    if !c.is_finite() || c <= 0.0 {
        return Err(invalid(format!("c must be finite and > 0, got {c}")));
    }
    if !precondition_met && !force {
        return Err(invalid(format!(
            "c = {c} does not exceed the threshold {threshold} for (delta={delta}, d={d}, n={n})"
        )));
    }
    let count = binomial(grid, n as u64);
    if count > ENUMERATION_BUDGET {
        return Err(Error::BudgetExceeded {
            needed: count,
            budget: ENUMERATION_BUDGET,
        });
    }
    if count == 0 {
        return Err(invalid(format!("no sequences of {n} distinct points on a grid of {grid}")));
    }
    let combos = combinations(grid, n);
    let traces = map_indexed(combos.len(), schedule, |s| {
        let l: Vec<f64> = combos[s].iter().map(|&m| m as f64 * delta).collect();
        run_stack(&l, delta, grid, c)
    });

    let mut failures = Vec::new();
    let mut note = |msg: String| {
        if failures.len() < MAX_FAILURES {
            failures.push(msg);
        }
    };
    let (mut property_i, mut monotone, mut bounds, mut last_layer) = (true, true, true, true);
    let cn = c.powi(n as i32) * delta;
    let unit = delta / 4.0;
    let mut exact = c.fract() == 0.0;
    let mut all: Vec<(f64, usize)> = Vec::with_capacity(traces.len() * n);
    for (s, t) in traces.iter().enumerate() {
        let mut sorted = t.q.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            property_i = false;
            note(format!("property (i) fails for l = {:?}: q = {:?}", t.l, t.q));
        }
        if t.l_tilde.windows(2).any(|w| w[0] >= w[1]) {
            monotone = false;
            note(format!("l~ not increasing for l = {:?}: {:?}", t.l, t.l_tilde));
        }
        for (j0, &lt) in t.l_tilde.iter().enumerate() {
            let j = j0 as i32 + 1;
            let lower_ok = j == 1 || c.powi(j) * delta < lt;
            let upper_ok = !(j > 1 && (j as usize) < n) || lt < c.powi(j + 1) * delta;
            if !(lower_ok && upper_ok) {
                bounds = false;
                note(format!("bound fails at j = {j} for l = {:?}: l~_j = {lt}", t.l));
            }
            let last_ok = if (j as usize) < n { lt <= cn } else { lt > cn };
            if !last_ok {
                last_layer = false;
                note(format!("last-layer condition fails at j = {j} for l = {:?}", t.l));
            }
        }
        for &v in &t.q {
            if !(v.abs() / unit < 2f64.powi(52)) {
                exact = false;
            }
            all.push((v, s));
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut property_ii = true;
    let mut min_sep = f64::INFINITY;
    for w in all.windows(2) {
        let gap = w[1].0 - w[0].0;
        min_sep = min_sep.min(gap);
        if gap == 0.0 && w[0].1 != w[1].1 {
            if property_ii {
                note(format!(
                    "property (ii) fails: value {} shared by l = {:?} and l = {:?}",
                    w[0].0, traces[w[0].1].l, traces[w[1].1].l
                ));
            }
            property_ii = false;
        }
    }
    if !exact {
        note("values exceed exact dyadic range; comparisons may be inexact".into());
    }
    let all_hold = property_i && property_ii && monotone && bounds && last_layer;
    Ok(ContextualReport {
        delta,
        d,
        n,
        c,
        threshold,
        precondition_met,
        sequences: traces.len(),
        property_i,
        property_ii,
        monotone,
        bounds,
        last_layer_condition: last_layer,
        min_separation: if min_sep.is_finite() { min_sep } else { 0.0 },
        exact_arithmetic: exact,
        failures,
        all_hold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds() {
        assert_eq!(c_threshold(0.25, 1, 3).unwrap(), 12.0);
        assert_eq!(c_threshold(0.5, 1, 2).unwrap(), 1.0);
        assert!(c_threshold(0.3, 1, 2).is_err());
    }

    #[test]
    fn combinations_enumerated() {
        let c = combinations(4, 2);
        assert_eq!(c.len(), 6);
        assert_eq!(c[0], vec![0, 1]);
        assert_eq!(c[5], vec![2, 3]);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
        assert!(combinations(2, 3).is_empty());
    }

    #[test]
    fn heaviside_half_at_zero() {
        assert_eq!(heaviside(0.0), 0.5);
        assert_eq!(heaviside(-1e-300), 0.0);
    }

    #[test]
    fn skipped_index_is_identity() {
        let l = [0.0, 0.5, 0.75];
        assert_eq!(selective_shift(&l, 1, 0.25, 13.0), l.to_vec());
    }

    #[test]
    fn first_shift_closed_form() {
        let x = GridSeq::from_grid_indices(0.25, 1, &[1, 2, 3]).unwrap();
        let l = x.indices();
        let after = selective_shift(&l, 1, 0.25, 13.0);
        let s1: f64 = l.iter().sum::<f64>() - l[0];
        assert_eq!(after[0], l[0] + 13.0 * s1);
        assert_eq!(&after[1..], &l[1..]);
    }

    #[test]
    fn grid_seq_validation() {
        assert!(GridSeq::new(0.25, vec![vec![0.25], vec![0.25]]).is_err());
        assert!(GridSeq::new(0.25, vec![vec![0.3]]).is_err());
        let s = GridSeq::new(0.5, vec![vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        assert_eq!(s.indices(), vec![0.5, 1.0]);
    }

    #[test]
    fn below_threshold_gated() {
        assert!(contextual_mapping_check(0.25, 1, 3, 2.0, false, Schedule::Sequential).is_err());
        let r = contextual_mapping_check(0.25, 1, 3, 2.0, true, Schedule::Sequential).unwrap();
        assert!(!r.precondition_met);
    }
}
