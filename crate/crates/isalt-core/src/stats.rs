//! Model-selection statistics: empirical marginal densities, total variation
//! distance, temporal correlations, and blow-up scans.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::InferredScheme;
use crate::integrators::{ImplicitSolverOptions, SchemeKind};
use crate::sde::SdeSystem;
use crate::sim::{simulate_plain, simulate_with_system, SimConfig};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("empty sample set")]
    EmptySamples,
    #[error("histogram needs at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("invalid range: lo {lo} must be below hi {hi}")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("sample {0} is not finite")]
    NonFiniteSample(f64),
    #[error("histogram edges do not match; total variation needs identical binning")]
    EdgeMismatch,
    #[error("path too short: {len} samples for max_lag {max_lag} (need max_lag < (len-1)/2)")]
    PathTooShort { len: usize, max_lag: usize },
    #[error("blow-up scan needs at least one gap per scheme")]
    EmptyScan,
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
}

/// A binned empirical marginal density of one state coordinate. Densities
/// are normalized by the total sample count including out-of-range mass, so
/// `sum(density * binwidth) + underflow + overflow == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub coordinate: usize,
    /// B + 1 ascending bin edges.
    pub edges: Vec<f64>,
    /// B non-negative density values.
    pub density: Vec<f64>,
    /// Probability mass below the first edge / above the last edge.
    pub underflow: f64,
    pub overflow: f64,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.density.len()
    }

    pub fn bin_width(&self) -> f64 {
        (self.edges[self.edges.len() - 1] - self.edges[0]) / self.bins() as f64
    }

    pub fn range(&self) -> (f64, f64) {
        (self.edges[0], self.edges[self.edges.len() - 1])
    }

    /// Total probability mass (in-range plus out-of-range); 1 up to rounding.
    pub fn total_mass(&self) -> f64 {
        let w = self.bin_width();
        self.density.iter().map(|d| d * w).sum::<f64>() + self.underflow + self.overflow
    }

    /// Midpoint of bin i.
    pub fn center(&self, i: usize) -> f64 {
        0.5 * (self.edges[i] + self.edges[i + 1])
    }

    /// Index of the highest-density bin.
    pub fn argmax_bin(&self) -> usize {
        let mut best = 0;
        for (i, d) in self.density.iter().enumerate() {
            if *d > self.density[best] {
                best = i;
            }
        }
        best
    }

    pub fn with_coordinate(mut self, k: usize) -> Self {
        self.coordinate = k;
        self
    }
}

/// Bins a flat list of one coordinate's samples into `bins` uniform bins on
/// `[lo, hi]`. Samples equal to `hi` land in the last bin; samples outside
/// the range are counted as under/overflow mass.
pub fn empirical_pdf(samples: &[f64], bins: usize, range: (f64, f64)) -> Result<Histogram, StatsError> {
    let (lo, hi) = range;
    if samples.is_empty() {
        return Err(StatsError::EmptySamples);
    }
    if bins < 2 {
        return Err(StatsError::TooFewBins(bins));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(StatsError::InvalidRange { lo, hi });
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    let mut under = 0u64;
    let mut over = 0u64;
    for &v in samples {
        if !v.is_finite() {
            return Err(StatsError::NonFiniteSample(v));
        }
        if v < lo {
            under += 1;
        } else if v > hi {
            over += 1;
        } else {
            let mut idx = ((v - lo) / width) as usize;
            if idx >= bins {
                idx = bins - 1;
            }
            counts[idx] += 1;
        }
    }
    let total = samples.len() as f64;
    let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
    Ok(Histogram {
        coordinate: 0,
        edges,
        density: counts.iter().map(|&c| c as f64 / (total * width)).collect(),
        underflow: under as f64 / total,
        overflow: over as f64 / total,
    })
}

/// Total variation distance between two histograms on identical edges:
/// half the L1 distance of the binned densities plus half the difference of
/// out-of-range masses. A metric on fixed-edge histograms, with values in
/// [0, 1].
pub fn tvd(p: &Histogram, q: &Histogram) -> Result<f64, StatsError> {
    if p.edges.len() != q.edges.len() || p.edges.iter().zip(&q.edges).any(|(a, b)| a != b) {
        return Err(StatsError::EdgeMismatch);
    }
    let w = p.bin_width();
    let in_range: f64 = p
        .density
        .iter()
        .zip(&q.density)
        .map(|(a, b)| (a - b).abs() * w)
        .sum();
    let oor = ((p.underflow + p.overflow) - (q.underflow + q.overflow)).abs();
    Ok((0.5 * (in_range + oor)).clamp(0.0, 1.0))
}

/// Temporal correlation of one coordinate at lags `0..=max_lag`:
/// `C(h) = (1/(N-h)) sum_n x[n+h] x[n]`, the raw (not mean-subtracted, not
/// normalized) second moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcfCurve {
    pub coordinate: usize,
    pub lags: Vec<usize>,
    pub values: Vec<f64>,
}

impl AcfCurve {
    /// `C(h) / C(0)`, the normalized view used for plotting.
    pub fn normalized(&self) -> Vec<f64> {
        let c0 = self.values[0];
        if c0 == 0.0 {
            return vec![0.0; self.values.len()];
        }
        self.values.iter().map(|v| v / c0).collect()
    }
}

/// Computes the raw temporal correlation of a single-coordinate series with
/// `len = N + 1` samples. Requires `max_lag < N / 2`.
pub fn acf(series: &[f64], max_lag: usize, coordinate: usize) -> Result<AcfCurve, StatsError> {
    let len = series.len();
    if len < 3 || max_lag >= (len - 1) / 2 {
        return Err(StatsError::PathTooShort { len, max_lag });
    }
    let n = len - 1;
    let mut lags = Vec::with_capacity(max_lag + 1);
    let mut values = Vec::with_capacity(max_lag + 1);
    for h in 0..=max_lag {
        let terms = n - h;
        let mut sum = 0.0;
        for i in 0..terms {
            sum += series[i + h] * series[i];
        }
        lags.push(h);
        values.push(sum / terms as f64);
    }
    Ok(AcfCurve {
        coordinate,
        lags,
        values,
    })
}

/// What to simulate in one blow-up scan cell.
#[derive(Debug, Clone)]
pub enum ScanScheme {
    /// A plain scheme run at the cell's coarse step.
    Plain(SchemeKind),
    /// An inferred scheme (its own delta is used).
    Inferred(InferredScheme),
}

#[derive(Debug, Clone)]
pub struct ScanCell {
    pub gap: usize,
    pub delta: f64,
    pub scheme: ScanScheme,
}

/// One labelled row of the scan: a scheme across ascending gaps.
#[derive(Debug, Clone)]
pub struct ScanRow {
    pub label: String,
    pub cells: Vec<ScanCell>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlowupEntry {
    pub label: String,
    pub gap: usize,
    pub delta: f64,
    pub blew_up: bool,
    /// Earliest step at which any ensemble member blew up.
    pub first_blowup_step: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlowupTable {
    pub entries: Vec<BlowupEntry>,
    pub steps: usize,
    pub seeds: usize,
}

impl BlowupTable {
    /// Entries for one scheme label, ascending in gap.
    pub fn row(&self, label: &str) -> Vec<&BlowupEntry> {
        self.entries.iter().filter(|e| e.label == label).collect()
    }

    /// Smallest gap at which the scheme blew up, if any.
    pub fn first_blowup_gap(&self, label: &str) -> Option<usize> {
        self.row(label).iter().find(|e| e.blew_up).map(|e| e.gap)
    }

    /// True when the scheme survived every gap up to and including `gap`.
    pub fn stable_through(&self, label: &str, gap: usize) -> bool {
        self.row(label)
            .iter()
            .filter(|e| e.gap <= gap)
            .all(|e| !e.blew_up)
    }
}

/// Simulates a small ensemble (one trajectory per seed) for every
/// (scheme, gap) cell and flags the cell as blown up when any member blows
/// up. Cells run concurrently.
pub fn blowup_scan(
    system: &SdeSystem,
    rows: &[ScanRow],
    x0: &DVector<f64>,
    steps: usize,
    seeds: &[u64],
    opts: &ImplicitSolverOptions,
    blowup_threshold: f64,
) -> Result<BlowupTable, StatsError> {
    if rows.iter().any(|r| r.cells.is_empty()) || rows.is_empty() || seeds.is_empty() {
        return Err(StatsError::EmptyScan);
    }
    let mut jobs = Vec::new();
    for row in rows {
        let mut cells = row.cells.clone();
        cells.sort_by_key(|c| c.gap);
        for cell in cells {
            jobs.push((row.label.clone(), cell));
        }
    }
    let entries: Result<Vec<BlowupEntry>, StatsError> = jobs
        .par_iter()
        .map(|(label, cell)| {
            let mut first: Option<usize> = None;
            for &seed in seeds {
                let blow = match &cell.scheme {
                    ScanScheme::Plain(kind) => {
                        simulate_plain(
                            system,
                            *kind,
                            cell.delta,
                            x0,
                            steps,
                            seed,
                            0,
                            opts,
                            blowup_threshold,
                        )
                        .blowup_step
                    }
                    ScanScheme::Inferred(scheme) => {
                        let mut cfg =
                            SimConfig::new(scheme.clone(), vec![x0.clone()], steps, seed);
                        cfg.blowup_threshold = blowup_threshold;
                        cfg.record_every = steps;
                        simulate_with_system(&cfg, system)?.paths[0].blowup_step
                    }
                };
                if let Some(step) = blow {
                    first = Some(first.map_or(step, |f| f.min(step)));
                }
            }
            Ok(BlowupEntry {
                label: label.clone(),
                gap: cell.gap,
                delta: cell.delta,
                blew_up: first.is_some(),
                first_blowup_step: first,
            })
        })
        .collect();
    Ok(BlowupTable {
        entries: entries?,
        steps,
        seeds: seeds.len(),
    })
}

/// `(min, max)` of a sample set expanded by `frac` on each side; the default
/// binning range for reference data.
pub fn expanded_range(samples: &[f64], frac: f64) -> Result<(f64, f64), StatsError> {
    if samples.is_empty() {
        return Err(StatsError::EmptySamples);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in samples {
        if !v.is_finite() {
            return Err(StatsError::NonFiniteSample(v));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = frac * (hi - lo);
    Ok((lo - pad, hi + pad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_long_trajectory;
    use crate::rng::StreamRng;
    use crate::sde::{make_benchmark, BenchmarkId, SystemSpec};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    #[test]
    fn single_bin_mass() {
        let h = empirical_pdf(&[0.5, 0.5, 0.5], 4, (0.0, 1.0)).unwrap();
        // all samples in bin 2 of width 0.25
        assert_relative_eq!(h.density[2], 1.0 / 0.25);
        assert_eq!(h.density[0], 0.0);
        assert_relative_eq!(h.total_mass(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn out_of_range_mass_is_tracked() {
        let h = empirical_pdf(&[-1.0, 0.5, 2.0, 0.4], 2, (0.0, 1.0)).unwrap();
        assert_relative_eq!(h.underflow, 0.25);
        assert_relative_eq!(h.overflow, 0.25);
        assert_relative_eq!(h.total_mass(), 1.0, epsilon = 1e-12);
    }

    /// Numerical quadrature of the standard normal over each bin; an
    /// independent oracle for the histogram of Gaussian draws.
    fn normal_bin_masses(edges: &[f64]) -> Vec<f64> {
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        edges
            .windows(2)
            .map(|w| {
                // Simpson's rule with 64 panels per bin
                let (a, b) = (w[0], w[1]);
                let n = 64;
                let h = (b - a) / n as f64;
                let mut s = pdf(a) + pdf(b);
                for i in 1..n {
                    let x = a + i as f64 * h;
                    s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(x);
                }
                s * h / 3.0
            })
            .collect()
    }

    #[test]
    fn gaussian_histogram_matches_quadrature_oracle() {
        let mut rng = StreamRng::new(2024, 0);
        let samples: Vec<f64> = (0..1_000_000).map(|_| rng.standard_normal()).collect();
        let h = empirical_pdf(&samples, 100, (-5.0, 5.0)).unwrap();
        let masses = normal_bin_masses(&h.edges);
        let w = h.bin_width();
        let analytic = Histogram {
            coordinate: 0,
            edges: h.edges.clone(),
            density: masses.iter().map(|m| m / w).collect(),
            underflow: 0.0,
            overflow: 0.0,
        };
        assert!(tvd(&h, &analytic).unwrap() < 0.01);
    }

    #[test]
    fn double_well_reference_is_bimodal() {
        let system = make_benchmark(BenchmarkId::DoubleWell1D);
        let long = generate_long_trajectory(
            &system,
            &system.default_x0(),
            1e-3,
            500_000,
            77,
            &ImplicitSolverOptions::default(),
        )
        .unwrap();
        let xs = long.coordinate_after(0, 50_000);
        let range = expanded_range(&xs, 0.05).unwrap();
        let h = empirical_pdf(&xs, 100, range).unwrap();
        // modes of exp(-beta V) sit at the potential minima +-1
        let positive_mode = h
            .density
            .iter()
            .enumerate()
            .filter(|(i, _)| h.center(*i) > 0.0)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| h.center(i))
            .unwrap();
        let negative_mode = h
            .density
            .iter()
            .enumerate()
            .filter(|(i, _)| h.center(*i) < 0.0)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| h.center(i))
            .unwrap();
        assert!((positive_mode - 1.0).abs() <= 0.1, "mode at {positive_mode}");
        assert!((negative_mode + 1.0).abs() <= 0.1, "mode at {negative_mode}");
    }

    #[test]
    fn tvd_identical_and_disjoint() {
        let p = empirical_pdf(&[0.1, 0.2, 0.3], 4, (0.0, 1.0)).unwrap();
        assert_eq!(tvd(&p, &p).unwrap(), 0.0);
        let q = empirical_pdf(&[0.9, 0.8], 4, (0.0, 1.0)).unwrap();
        assert_relative_eq!(tvd(&p, &q).unwrap(), 1.0);
        let other_edges = empirical_pdf(&[0.5], 4, (0.0, 2.0)).unwrap();
        assert!(matches!(tvd(&p, &other_edges), Err(StatsError::EdgeMismatch)));
    }

    #[test]
    fn constant_path_acf_is_constant() {
        let series = vec![2.0; 101];
        let curve = acf(&series, 10, 0).unwrap();
        for v in &curve.values {
            assert_relative_eq!(*v, 4.0);
        }
        assert_relative_eq!(curve.normalized()[7], 1.0);
    }

    #[test]
    fn acf_zero_lag_is_mean_square() {
        let mut rng = StreamRng::new(5, 0);
        let series: Vec<f64> = (0..501).map(|_| rng.standard_normal()).collect();
        let curve = acf(&series, 5, 0).unwrap();
        let n = series.len() - 1;
        let ms: f64 = series[..n].iter().map(|x| x * x).sum::<f64>() / n as f64;
        assert!((curve.values[0] - ms).abs() <= 1e-12);
    }

    #[test]
    fn white_noise_decorrelates() {
        let mut rng = StreamRng::new(6, 0);
        let n = 100_000;
        let series: Vec<f64> = (0..=n).map(|_| rng.standard_normal()).collect();
        let curve = acf(&series, 5, 0).unwrap();
        let tol = 4.0 / (n as f64).sqrt();
        assert!((curve.values[0] - 1.0).abs() < 2.0 * tol);
        for h in 1..=5 {
            assert!(curve.values[h].abs() < tol, "C({h}) = {}", curve.values[h]);
        }
    }

    #[test]
    fn ou_acf_matches_analytic_covariance() {
        // exact OU simulation: x' = e^{-a delta} x + sqrt(var) z with the
        // stationary variance sigma^2/(2a); C(h) = (sigma^2/2a) e^{-a h delta}
        let (a, sigma) = (1.0f64, 2.0f64.sqrt());
        let delta = 0.01;
        let decay = (-a * delta).exp();
        let step_var = sigma * sigma / (2.0 * a) * (1.0 - decay * decay);
        let mut rng = StreamRng::new(31, 0);
        let n = 2_000_000usize;
        let mut x = 0.0;
        let mut series = Vec::with_capacity(n + 1);
        series.push(x);
        for _ in 0..n {
            x = decay * x + step_var.sqrt() * rng.standard_normal();
            series.push(x);
        }
        let curve = acf(&series, 100, 0).unwrap();
        for h in (0..=100).step_by(20) {
            let expected = sigma * sigma / (2.0 * a) * (-a * h as f64 * delta).exp();
            let got = curve.values[h];
            assert!(
                (got - expected).abs() <= 0.05 * expected,
                "C({h}) = {got} vs {expected}"
            );
        }
    }

    #[test]
    fn blowup_scan_flags_unstable_cells() {
        // stiff linear drift: explicit EM diverges at delta = 0.1, SSBE
        // stays put, and the embedded plain EM at tiny delta is stable
        let system = crate::sde::linear_system(
            "stiff",
            DMatrix::from_element(1, 1, -50.0),
            DMatrix::identity(1, 1),
            1.0,
        )
        .unwrap();
        let rows = vec![
            ScanRow {
                label: "plain-em".into(),
                cells: vec![
                    ScanCell { gap: 1, delta: 0.001, scheme: ScanScheme::Plain(SchemeKind::Em) },
                    ScanCell { gap: 100, delta: 0.1, scheme: ScanScheme::Plain(SchemeKind::Em) },
                ],
            },
            ScanRow {
                label: "plain-ssbe".into(),
                cells: vec![
                    ScanCell { gap: 100, delta: 0.1, scheme: ScanScheme::Plain(SchemeKind::Ssbe) },
                ],
            },
            ScanRow {
                label: "is-em".into(),
                cells: vec![ScanCell {
                    gap: 1,
                    delta: 0.001,
                    scheme: ScanScheme::Inferred(InferredScheme::plain(
                        crate::basis::FamilyKind::IsEm,
                        false,
                        0.001,
                        1,
                        SystemSpec::Named("stiff".into()),
                    1,
                    )),
                }],
            },
        ];
        let table = blowup_scan(
            &system,
            &rows,
            &DVector::from_element(1, 1.0),
            2_000,
            &[1, 2, 3],
            &ImplicitSolverOptions::default(),
            1e10,
        )
        .unwrap();
        assert_eq!(table.first_blowup_gap("plain-em"), Some(100));
        assert!(table.stable_through("plain-em", 1));
        assert!(table.stable_through("plain-ssbe", 100));
        assert!(table.stable_through("is-em", 1));
        let cell = &table.row("plain-em")[1];
        assert!(cell.blew_up && cell.first_blowup_step.is_some());
    }

    proptest! {
        #[test]
        fn histogram_mass_is_conserved(
            samples in proptest::collection::vec(-10.0..10.0f64, 1..200),
            bins in 2usize..50,
            lo in -5.0..0.0f64,
            span in 0.5..8.0f64,
        ) {
            let h = empirical_pdf(&samples, bins, (lo, lo + span)).unwrap();
            prop_assert!((h.total_mass() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn tvd_is_a_metric_on_shared_edges(
            a in proptest::collection::vec(-2.0..2.0f64, 1..60),
            b in proptest::collection::vec(-2.0..2.0f64, 1..60),
            c in proptest::collection::vec(-2.0..2.0f64, 1..60),
        ) {
            let range = (-1.5, 1.5);
            let p = empirical_pdf(&a, 10, range).unwrap();
            let q = empirical_pdf(&b, 10, range).unwrap();
            let r = empirical_pdf(&c, 10, range).unwrap();
            let pq = tvd(&p, &q).unwrap();
            let qp = tvd(&q, &p).unwrap();
            prop_assert!((pq - qp).abs() <= 1e-15);
            prop_assert!(pq >= 0.0 && pq <= 1.0);
            let pr = tvd(&p, &r).unwrap();
            let rq = tvd(&r, &q).unwrap();
            prop_assert!(pq <= pr + rq + 1e-12);
        }
    }
}
