//! Multifractal detrended fluctuation analysis (MF-DFA).
//!
//! Estimates the generalized Hurst exponent function `h(q)` of a series,
//! the Hurst parameter `H = h(2)`, and the multifractality range
//! `Δh = h(q_min) − h(q_max)`. Window fluctuations are computed over
//! non-overlapping segments taken from both ends of the profile, with
//! per-window polynomial detrending, and `h(q)` is the least-squares
//! slope of `log F_q(s)` against `log s`.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::traffic::{Packet, Series, ServiceClass};

/// Windows whose detrended variance falls below this are treated as
/// zero-variance and excluded from negative-q moments.
const ZERO_VARIANCE_FLOOR: f64 = 1e-20;

/// Grid of moment orders. Strictly increasing, excludes 0, contains 2
/// and both extremes used for the `Δh` range.
#[derive(Debug, Clone, PartialEq)]
pub struct QGrid {
    qs: Vec<f64>,
}

impl QGrid {
    pub fn new(qs: Vec<f64>) -> Result<Self> {
        if qs.len() < 2 {
            return Err(Error::parameter("qgrid", "needs at least 2 entries"));
        }
        if qs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::parameter("qgrid", "must be strictly increasing"));
        }
        if qs.iter().any(|&q| q == 0.0 || !q.is_finite()) {
            return Err(Error::parameter("qgrid", "must exclude q = 0"));
        }
        if !qs.iter().any(|&q| q == 2.0) {
            return Err(Error::parameter("qgrid", "must contain q = 2"));
        }
        Ok(QGrid { qs })
    }

    /// `{-5..-1, 1..5}`: brackets the range definition and skips the
    /// q = 0 special case entirely.
    pub fn default_grid() -> Self {
        QGrid {
            qs: vec![
                -5.0, -4.0, -3.0, -2.0, -1.0, 1.0, 2.0, 3.0, 4.0, 5.0,
            ],
        }
    }

    pub fn q_min(&self) -> f64 {
        self.qs[0]
    }

    pub fn q_max(&self) -> f64 {
        *self.qs.last().unwrap()
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.qs.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.qs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qs.is_empty()
    }
}

impl Default for QGrid {
    fn default() -> Self {
        Self::default_grid()
    }
}

/// Window sizes and detrending order for one estimation run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalePlan {
    scales: Vec<usize>,
    detrend_order: usize,
}

impl ScalePlan {
    pub fn new(mut scales: Vec<usize>, detrend_order: usize) -> Result<Self> {
        scales.sort_unstable();
        scales.dedup();
        if scales.len() < 8 {
            return Err(Error::parameter("scales", "need at least 8 distinct scales"));
        }
        if scales[0] < detrend_order + 2 {
            return Err(Error::parameter(
                "scales",
                format!("min scale must be >= detrend_order + 2 = {}", detrend_order + 2),
            ));
        }
        Ok(ScalePlan {
            scales,
            detrend_order,
        })
    }

    /// 12 log-spaced scales from 16 to `n/4`, order-2 detrending.
    pub fn for_length(n: usize) -> Result<Self> {
        Self::for_length_with(n, 16, 12, 2)
    }

    pub fn for_length_with(
        n: usize,
        min_scale: usize,
        count: usize,
        detrend_order: usize,
    ) -> Result<Self> {
        let max_scale = n / 4;
        if max_scale <= min_scale {
            return Err(Error::parameter(
                "scales",
                format!("series too short for scale range: n = {n}"),
            ));
        }
        let ratio = (max_scale as f64 / min_scale as f64).powf(1.0 / (count as f64 - 1.0));
        let scales: Vec<usize> = (0..count)
            .map(|i| (min_scale as f64 * ratio.powi(i as i32)).round() as usize)
            .collect();
        Self::new(scales, detrend_order)
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn detrend_order(&self) -> usize {
        self.detrend_order
    }

    pub fn max_scale(&self) -> usize {
        *self.scales.last().unwrap()
    }
}

/// One MF-DFA estimate: the `h(q)` samples plus the derived scalars.
///
/// `h` is the entry of `hq` at q = 2 and `dh` is computed from the same
/// map, so the derived fields can never drift from the samples.
#[derive(Debug, Clone)]
pub struct MfEstimate {
    hq: Vec<(f64, f64)>,
    pub h: f64,
    pub dh: f64,
    fit_quality: Vec<(f64, f64)>,
    pub low_confidence: bool,
}

impl MfEstimate {
    fn from_samples(hq: Vec<(f64, f64)>, fit_quality: Vec<(f64, f64)>, qgrid: &QGrid, mut low_confidence: bool) -> Self {
        let lookup = |q: f64| {
            hq.iter()
                .find(|(qq, _)| *qq == q)
                .map(|(_, h)| *h)
                .unwrap_or(f64::NAN)
        };
        let h = lookup(2.0);
        let dh = lookup(qgrid.q_min()) - lookup(qgrid.q_max());
        if dh < 0.0 {
            low_confidence = true;
        }
        MfEstimate {
            hq,
            h,
            dh,
            fit_quality,
            low_confidence,
        }
    }

    /// Fallback estimate for windows with too little data: `H = 0.5`,
    /// `Δh = 0`, flagged low confidence.
    pub fn sentinel(qgrid: &QGrid) -> Self {
        let hq: Vec<(f64, f64)> = qgrid.iter().map(|q| (q, 0.5)).collect();
        let fit_quality = qgrid.iter().map(|q| (q, 0.0)).collect();
        Self::from_samples(hq, fit_quality, qgrid, true)
    }

    pub fn hq(&self, q: f64) -> Option<f64> {
        self.hq.iter().find(|(qq, _)| *qq == q).map(|(_, h)| *h)
    }

    pub fn hq_samples(&self) -> &[(f64, f64)] {
        &self.hq
    }

    pub fn fit_quality(&self, q: f64) -> Option<f64> {
        self.fit_quality
            .iter()
            .find(|(qq, _)| *qq == q)
            .map(|(_, r2)| *r2)
    }

    pub fn fit_quality_samples(&self) -> &[(f64, f64)] {
        &self.fit_quality
    }
}

/// Orthonormal polynomial basis on `s` equispaced points, columns up to
/// the given order. Lets each window's detrended variance be computed
/// as `|y|^2 - sum((q_j . y)^2)` with one factorization per scale.
fn orthonormal_basis(s: usize, order: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = (0..=order)
        .map(|p| {
            (0..s)
                .map(|i| {
                    // t in [-1, 1] keeps the Gram-Schmidt well conditioned
                    let t = if s > 1 {
                        2.0 * i as f64 / (s as f64 - 1.0) - 1.0
                    } else {
                        0.0
                    };
                    t.powi(p as i32)
                })
                .collect()
        })
        .collect();
    for j in 0..cols.len() {
        for k in 0..j {
            let dot: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
            for i in 0..s {
                cols[j][i] -= dot * cols[k][i];
            }
        }
        let norm: f64 = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut cols[j] {
                *v /= norm;
            }
        }
    }
    cols
}

fn detrended_variance(window: &[f64], basis: &[Vec<f64>]) -> f64 {
    let energy: f64 = window.iter().map(|v| v * v).sum();
    let mut projected = 0.0;
    for col in basis {
        let dot: f64 = col.iter().zip(window).map(|(a, b)| a * b).sum();
        projected += dot * dot;
    }
    ((energy - projected) / window.len() as f64).max(0.0)
}

fn ols_loglog(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    let r2 = if ss_tot > 1e-30 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= 1e-30 {
        1.0
    } else {
        0.0
    };
    (slope, r2)
}

/// MF-DFA estimate of `h(q)` over the grid.
///
/// Profile = cumulative sum of the mean-centred series; at each scale the
/// profile is split into non-overlapping windows from both ends; each
/// window is polynomial-detrended and its residual variance feeds the
/// q-th order fluctuation function. Zero-variance windows are dropped
/// for negative q (flagging the estimate when more than half drop), and
/// a scale is excluded for a given q when its fluctuation degenerates.
pub fn mfdfa(series: &Series, qgrid: &QGrid, plan: &ScalePlan) -> Result<MfEstimate> {
    let x = series.values();
    let n = x.len();
    if n < 1024 {
        return Err(Error::parameter(
            "series",
            format!("mfdfa needs length >= 1024, got {n}"),
        ));
    }
    if plan.max_scale() > n / 4 {
        return Err(Error::parameter("scales", "max scale exceeds n/4"));
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if var < 1e-24 || x.iter().all(|v| (v - mean).abs() < 1e-12) {
        return Err(Error::DegenerateInput("constant series".into()));
    }

    // profile of the standardized series: DFA slopes are unchanged and
    // the zero-variance floor becomes scale-relative, so rescaling the
    // input cannot move the estimate
    let std = var.sqrt();
    let mut profile = Vec::with_capacity(n);
    let mut acc = 0.0;
    for v in x {
        acc += (v - mean) / std;
        profile.push(acc);
    }

    // log F_q(s) samples per q, collected over usable scales
    let mut log_s: Vec<Vec<f64>> = vec![Vec::new(); qgrid.len()];
    let mut log_f: Vec<Vec<f64>> = vec![Vec::new(); qgrid.len()];
    let mut low_confidence = false;

    for &s in plan.scales() {
        let ns = n / s;
        if ns < 2 {
            continue;
        }
        let basis = orthonormal_basis(s, plan.detrend_order());
        let mut f2 = Vec::with_capacity(2 * ns);
        for v in 0..ns {
            f2.push(detrended_variance(&profile[v * s..(v + 1) * s], &basis));
        }
        for v in 0..ns {
            let start = n - (v + 1) * s;
            f2.push(detrended_variance(&profile[start..start + s], &basis));
        }

        for (qi, q) in qgrid.iter().enumerate() {
            let usable: Vec<f64> = if q < 0.0 {
                let kept: Vec<f64> = f2
                    .iter()
                    .copied()
                    .filter(|&v| v > ZERO_VARIANCE_FLOOR)
                    .collect();
                if kept.len() * 2 < f2.len() {
                    low_confidence = true;
                }
                kept
            } else {
                f2.clone()
            };
            if usable.is_empty() {
                continue;
            }
            let moment =
                usable.iter().map(|&v| v.powf(q / 2.0)).sum::<f64>() / usable.len() as f64;
            if !moment.is_finite() || moment <= 0.0 {
                continue;
            }
            let fq = moment.powf(1.0 / q);
            if fq.is_finite() && fq > 0.0 {
                log_s[qi].push((s as f64).ln());
                log_f[qi].push(fq.ln());
            }
        }
    }

    let mut hq = Vec::with_capacity(qgrid.len());
    let mut fit_quality = Vec::with_capacity(qgrid.len());
    for (qi, q) in qgrid.iter().enumerate() {
        if log_s[qi].len() < 4 {
            return Err(Error::DegenerateInput(format!(
                "fewer than 4 usable scales for q = {q}"
            )));
        }
        let (slope, r2) = ols_loglog(&log_s[qi], &log_f[qi]);
        hq.push((q, slope));
        fit_quality.push((q, r2));
    }

    Ok(MfEstimate::from_samples(hq, fit_quality, qgrid, low_confidence))
}

/// Closed-form `h(q)` of the binomial multiplicative cascade with
/// weight `p`: `(1 - log2(p^q + (1-p)^q)) / q`. Test oracle for the
/// estimator.
pub fn analytic_hq_binomial(p: f64, q: f64) -> Result<f64> {
    if !(p > 0.5 && p < 1.0) {
        return Err(Error::parameter("p", format!("must be in (0.5, 1), got {p}")));
    }
    if q == 0.0 {
        return Err(Error::parameter("q", "must be nonzero"));
    }
    Ok((1.0 - (p.powf(q) + (1.0 - p).powf(q)).log2()) / q)
}

/// Minimum nonzero slots for a class to get a real estimate instead of
/// the sentinel.
pub const MIN_NONZERO_SLOTS: usize = 64;

/// Per-class MF-DFA over one balancing window.
///
/// Splits the window's packets by class into slot-count series and runs
/// [`mfdfa`] on each. Classes with fewer than [`MIN_NONZERO_SLOTS`]
/// nonzero slots (or with degenerate series) get the sentinel estimate.
pub fn window_estimates(
    packets: &[Packet],
    classes: &[ServiceClass],
    window: Range<u64>,
    qgrid: &QGrid,
    plan: &ScalePlan,
) -> Result<BTreeMap<u8, MfEstimate>> {
    let len = window.end.saturating_sub(window.start) as usize;
    if len == 0 {
        return Err(Error::DegenerateInput("empty window".into()));
    }
    let mut counts: BTreeMap<u8, Vec<f64>> = classes
        .iter()
        .map(|c| (c.id, vec![0.0; len]))
        .collect();
    for p in packets {
        if p.arrival_slot >= window.start && p.arrival_slot < window.end {
            if let Some(series) = counts.get_mut(&p.service_class) {
                series[(p.arrival_slot - window.start) as usize] += 1.0;
            }
        }
    }
    let series: BTreeMap<u8, Series> = counts
        .into_iter()
        .map(|(id, v)| (id, Series::new(v)))
        .collect();
    estimate_class_counts(&series, qgrid, plan)
}

/// [`window_estimates`] for callers that already hold per-class slot
/// counts.
pub fn estimate_class_counts(
    counts: &BTreeMap<u8, Series>,
    qgrid: &QGrid,
    plan: &ScalePlan,
) -> Result<BTreeMap<u8, MfEstimate>> {
    if counts.is_empty() || counts.values().all(|s| s.is_empty()) {
        return Err(Error::DegenerateInput("empty window".into()));
    }
    let mut out = BTreeMap::new();
    for (&id, series) in counts {
        let nonzero = series.values().iter().filter(|&&v| v > 0.0).count();
        let est = if nonzero < MIN_NONZERO_SLOTS {
            MfEstimate::sentinel(qgrid)
        } else {
            match mfdfa(series, qgrid, plan) {
                Ok(e) => e,
                Err(Error::DegenerateInput(_)) => MfEstimate::sentinel(qgrid),
                Err(e) => return Err(e),
            }
        };
        out.insert(id, est);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic::{gen_binomial_cascade, gen_fgn};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn white_noise(n: usize, seed: u64) -> Series {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Series::new((0..n).map(|_| rng.sample(StandardNormal)).collect())
    }

    #[test]
    fn white_noise_is_uncorrelated() {
        let series = white_noise(1 << 16, 1);
        let grid = QGrid::default_grid();
        let plan = ScalePlan::for_length(series.len()).unwrap();
        let est = mfdfa(&series, &grid, &plan).unwrap();
        assert!((0.45..=0.55).contains(&est.h), "H = {}", est.h);
        assert!(est.dh < 0.2, "dh = {}", est.dh);
    }

    #[test]
    fn binomial_cascade_matches_analytic_h2() {
        let series = gen_binomial_cascade(0.75, 16, 3).unwrap();
        let grid = QGrid::default_grid();
        let plan = ScalePlan::for_length(series.len()).unwrap();
        let est = mfdfa(&series, &grid, &plan).unwrap();
        assert!((0.74..=0.94).contains(&est.h), "h(2) = {}", est.h);
    }

    #[test]
    fn fgn_high_h_round_trip() {
        let grid = QGrid::default_grid();
        let mut sum = 0.0;
        for seed in 0..10 {
            let series = gen_fgn(0.9, 1 << 16, seed).unwrap();
            let plan = ScalePlan::for_length(series.len()).unwrap();
            sum += mfdfa(&series, &grid, &plan).unwrap().h;
        }
        let mean = sum / 10.0;
        assert!((0.84..=0.96).contains(&mean), "mean H = {mean}");
    }

    #[test]
    fn constant_series_is_degenerate() {
        let series = Series::new(vec![3.0; 2048]);
        let grid = QGrid::default_grid();
        let plan = ScalePlan::for_length(2048).unwrap();
        assert!(matches!(
            mfdfa(&series, &grid, &plan),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn derived_fields_are_bit_exact() {
        let series = gen_binomial_cascade(0.7, 12, 9).unwrap();
        let grid = QGrid::default_grid();
        let plan = ScalePlan::for_length(series.len()).unwrap();
        let est = mfdfa(&series, &grid, &plan).unwrap();
        assert_eq!(est.h.to_bits(), est.hq(2.0).unwrap().to_bits());
        let expect = est.hq(grid.q_min()).unwrap() - est.hq(grid.q_max()).unwrap();
        assert_eq!(est.dh.to_bits(), expect.to_bits());
    }

    #[test]
    fn scale_invariance() {
        let series = gen_binomial_cascade(0.7, 13, 4).unwrap();
        let scaled = Series::new(series.values().iter().map(|v| v * 1234.5).collect());
        let grid = QGrid::default_grid();
        let plan = ScalePlan::for_length(series.len()).unwrap();
        let a = mfdfa(&series, &grid, &plan).unwrap();
        let b = mfdfa(&scaled, &grid, &plan).unwrap();
        for (qa, qb) in a.hq_samples().iter().zip(b.hq_samples()) {
            assert!((qa.1 - qb.1).abs() < 1e-9, "q = {}: {} vs {}", qa.0, qa.1, qb.1);
        }
    }

    #[test]
    fn cascade_spectrum_monotone_nonincreasing() {
        let series = gen_binomial_cascade(0.75, 16, 11).unwrap();
        let grid = QGrid::default_grid();
        let plan = ScalePlan::for_length(series.len()).unwrap();
        let est = mfdfa(&series, &grid, &plan).unwrap();
        let hs: Vec<f64> = est.hq_samples().iter().map(|(_, h)| *h).collect();
        for w in hs.windows(2) {
            assert!(w[1] <= w[0] + 0.05, "spectrum not non-increasing: {hs:?}");
        }
    }

    #[test]
    fn analytic_binomial_values() {
        let h2 = analytic_hq_binomial(0.75, 2.0).unwrap();
        assert!((h2 - 0.8390).abs() < 5e-4, "h(2) = {h2}");
        let hm5 = analytic_hq_binomial(0.75, -5.0).unwrap();
        assert!((hm5 - 1.8012).abs() < 5e-4, "h(-5) = {hm5}");
        // p -> 0.5 limit: uniform cascade, h(q) -> 1 for all q
        let lim = analytic_hq_binomial(0.5 + 1e-6, 2.0).unwrap();
        assert!((lim - 1.0).abs() < 1e-3, "limit = {lim}");
        assert!(analytic_hq_binomial(0.75, 0.0).is_err());
        assert!(analytic_hq_binomial(0.4, 2.0).is_err());
        assert!(analytic_hq_binomial(1.0, 2.0).is_err());
    }

    #[test]
    fn qgrid_validation() {
        assert!(QGrid::new(vec![-2.0, 0.0, 2.0]).is_err());
        assert!(QGrid::new(vec![2.0, 1.0]).is_err());
        assert!(QGrid::new(vec![-1.0, 1.0]).is_err()); // missing 2
        assert!(QGrid::new(vec![-3.0, 2.0, 3.0]).is_ok());
    }

    #[test]
    fn scale_plan_validation() {
        assert!(ScalePlan::new(vec![16, 32, 64], 2).is_err()); // too few
        assert!(ScalePlan::new(vec![2, 4, 8, 16, 32, 64, 128, 256], 2).is_err()); // min below order+2
        assert!(ScalePlan::for_length(1 << 12).is_ok());
    }

    #[test]
    fn sentinel_for_sparse_class() {
        use crate::traffic::{Protocol, TupleTemplate};
        let classes = vec![
            ServiceClass::new(0, Protocol::Tcp, TupleTemplate::default()),
            ServiceClass::new(1, Protocol::Udp, TupleTemplate::default()),
        ];
        // class 0 has plenty of packets, class 1 none
        let mut packets = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for slot in 0..4096u64 {
            if rng.random_bool(0.5) {
                packets.push(Packet::synthetic(slot, 0, 0));
            }
        }
        let grid = QGrid::default_grid();
        let plan = ScalePlan::for_length(4096).unwrap();
        let est = window_estimates(&packets, &classes, 0..4096, &grid, &plan).unwrap();
        let sparse = &est[&1];
        assert!(sparse.low_confidence);
        assert_eq!(sparse.h, 0.5);
        assert_eq!(sparse.dh, 0.0);
        assert!(!est[&0].low_confidence || est[&0].h != 0.5);
    }

    #[test]
    fn identical_series_identical_estimates() {
        let series = gen_binomial_cascade(0.7, 12, 5).unwrap();
        let mut counts = BTreeMap::new();
        counts.insert(0u8, series.clone());
        counts.insert(1u8, series);
        let grid = QGrid::default_grid();
        let plan = ScalePlan::for_length(1 << 12).unwrap();
        let est = estimate_class_counts(&counts, &grid, &plan).unwrap();
        assert_eq!(est[&0].h.to_bits(), est[&1].h.to_bits());
        assert_eq!(est[&0].dh.to_bits(), est[&1].dh.to_bits());
    }

    #[test]
    fn empty_window_errors() {
        let grid = QGrid::default_grid();
        let plan = ScalePlan::for_length(4096).unwrap();
        let counts: BTreeMap<u8, Series> = BTreeMap::new();
        assert!(matches!(
            estimate_class_counts(&counts, &grid, &plan),
            Err(Error::DegenerateInput(_))
        ));
    }
}
