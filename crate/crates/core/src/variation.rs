//! Current variation and the spike-time mapping-probability matrix.
//!
//! Each MAC event draws one relative deviation `delta ~ N(0, rho^2)` for the
//! total array current. The resulting ideal spike time is assigned to the
//! nearest nominal spike time, with decision boundaries midway between
//! adjacent nominal times. `p[i][j]` is the probability that the level with
//! nominal time `t_i` is read back as the level of `t_j`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{invalid, Result};
use crate::neuron::{ideal_spike_time, SpikeTimeSet};

/// Floor applied to non-positive noisy currents, relative to the nominal one.
const CLAMP_FRACTION: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationModel {
    /// Standard deviation of the relative current deviation.
    #[serde(rename = "rho")]
    pub relative_std: f64,
    /// Quantile of `|delta|` taken as the measured maximum deviation.
    pub epsilon_quantile: f64,
    pub seed: u64,
}

impl Default for VariationModel {
    fn default() -> Self {
        Self {
            relative_std: 0.03,
            epsilon_quantile: 0.999,
            seed: 0,
        }
    }
}

impl VariationModel {
    pub fn new(relative_std: f64, seed: u64) -> Self {
        Self {
            relative_std,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.relative_std.is_finite() && self.relative_std >= 0.0) {
            return Err(invalid(format!(
                "relative std must be finite and >= 0, got {}",
                self.relative_std
            )));
        }
        if !(self.epsilon_quantile > 0.5 && self.epsilon_quantile < 1.0) {
            return Err(invalid(format!(
                "epsilon quantile must lie in (0.5, 1), got {}",
                self.epsilon_quantile
            )));
        }
        Ok(())
    }

    /// Measured maximum deviation as a multiple of `rho`: the
    /// `epsilon_quantile` quantile of the half-normal `|N(0, 1)|`.
    pub fn epsilon_multiplier(&self) -> f64 {
        let normal = Normal::standard();
        normal.inverse_cdf(0.5 * (1.0 + self.epsilon_quantile))
    }
}

/// One draw of the array current under variation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyCurrent {
    pub amperes: f64,
    /// The raw draw was non-positive and got floored.
    pub clamped: bool,
}

pub fn sample_current<R: Rng + ?Sized>(nominal: f64, vm: &VariationModel, rng: &mut R) -> NoisyCurrent {
    if vm.relative_std == 0.0 {
        return NoisyCurrent {
            amperes: nominal,
            clamped: false,
        };
    }
    let delta: f64 = rng.sample::<f64, _>(StandardNormal) * vm.relative_std;
    let amperes = nominal * (1.0 + delta);
    if amperes > 0.0 {
        NoisyCurrent {
            amperes,
            clamped: false,
        }
    } else {
        NoisyCurrent {
            amperes: nominal * CLAMP_FRACTION,
            clamped: true,
        }
    }
}

/// Row-stochastic mapping-probability matrix. Rows are intended levels,
/// columns decoded levels, both in `levels` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMatrix {
    pub p: Vec<Vec<f64>>,
    /// Level of every row/column index. For an unpadded matrix this is the
    /// spike-time order (fastest first); for a padded one it is `0..=a`.
    pub levels: Vec<u32>,
    /// Nominal ideal spike times per index; empty once padded.
    #[serde(default)]
    pub times_s: Vec<f64>,
    pub padded: bool,
}

impl ErrorMatrix {
    pub fn identity(levels: Vec<u32>, times_s: Vec<f64>, padded: bool) -> Self {
        let n = levels.len();
        let p = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            p,
            levels,
            times_s,
            padded,
        }
    }

    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.p[i][i]).collect()
    }

    pub fn min_diag(&self) -> f64 {
        self.diag().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn index_of(&self, level: u32) -> Option<usize> {
        self.levels.iter().position(|&l| l == level)
    }

    pub fn row_of(&self, level: u32) -> Option<&[f64]> {
        self.index_of(level).map(|i| self.p[i].as_slice())
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.p
            .iter()
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let n = self.dim();
        if self.p.len() != n || self.p.iter().any(|r| r.len() != n) {
            return Err(invalid("error matrix must be square over its level order"));
        }
        for (i, row) in self.p.iter().enumerate() {
            if row.iter().any(|&x| !(0.0..=1.0 + tol).contains(&x)) {
                return Err(invalid(format!("row {i} has an entry outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(invalid(format!("row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    /// `k` lines of `k` comma-separated probabilities, in level order.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for row in &self.p {
            let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn sampler(&self) -> PmapSampler {
        PmapSampler::new(self)
    }
}

/// Precomputed cumulative rows for repeated sampling.
#[derive(Debug, Clone)]
pub struct PmapSampler {
    levels: Vec<u32>,
    cumulative: Vec<Vec<f64>>,
    /// Column index when the row puts all its mass on one entry.
    certain: Vec<Option<usize>>,
    max_level: u32,
    row_by_level: Vec<Option<usize>>,
}

impl PmapSampler {
    fn new(em: &ErrorMatrix) -> Self {
        let max_level = em.levels.iter().copied().max().unwrap_or(0);
        let mut row_by_level = vec![None; max_level as usize + 1];
        for (i, &l) in em.levels.iter().enumerate() {
            row_by_level[l as usize] = Some(i);
        }
        let cumulative = em
            .p
            .iter()
            .map(|row| {
                let mut acc = 0.0;
                row.iter()
                    .map(|&x| {
                        acc += x;
                        acc
                    })
                    .collect()
            })
            .collect();
        let certain = em
            .p
            .iter()
            .map(|row| {
                let nonzero: Vec<usize> = (0..row.len()).filter(|&j| row[j] > 0.0).collect();
                (nonzero.len() == 1).then(|| nonzero[0])
            })
            .collect();
        Self {
            levels: em.levels.clone(),
            cumulative,
            certain,
            max_level,
            row_by_level,
        }
    }

    pub fn covers(&self, level: u32) -> bool {
        level <= self.max_level && self.row_by_level[level as usize].is_some()
    }

    /// Draws the decoded level for an intended level. Rows with a single
    /// non-zero entry consume no randomness.
    pub fn sample<R: Rng + ?Sized>(&self, level: u32, rng: &mut R) -> Result<u32> {
        let row = self
            .row_by_level
            .get(level as usize)
            .copied()
            .flatten()
            .ok_or_else(|| invalid(format!("level {level} outside the error model's level space")))?;
        if let Some(j) = self.certain[row] {
            return Ok(self.levels[j]);
        }
        let cum = &self.cumulative[row];
        let total = *cum.last().expect("non-empty row");
        let u: f64 = rng.random::<f64>() * total;
        let j = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
        Ok(self.levels[j])
    }
}

/// Samples the decoded level of `level` from its row of `em`.
pub fn apply_pmap<R: Rng + ?Sized>(level: u32, em: &ErrorMatrix, rng: &mut R) -> Result<u32> {
    em.sampler().sample(level, rng)
}

/// Decision boundaries midway between adjacent ideal times.
fn midpoints(times: &[f64]) -> Vec<f64> {
    times.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

fn check_set(set: &SpikeTimeSet) -> Result<()> {
    if set.is_empty() {
        return Err(invalid("spike-time set is empty"));
    }
    Ok(())
}

/// Monte-Carlo extraction: `n_samples` noisy currents per level, each
/// converted to an ideal spike time and bucketed by the midpoints between
/// the set's ideal times. Levels run in parallel, each with its own generator
/// seeded from `seed ^ level`, so results do not depend on the thread count.
pub fn extract_pmap(set: &SpikeTimeSet, vm: &VariationModel, n_samples: usize) -> Result<ErrorMatrix> {
    check_set(set)?;
    vm.validate()?;
    if n_samples == 0 {
        return Err(invalid("need at least one Monte-Carlo sample per level"));
    }
    let times = set.ideal_times();
    let bounds = midpoints(&times);
    let k = set.len();
    let rows: Vec<(Vec<f64>, usize)> = set
        .entries
        .par_iter()
        .map(|entry| -> Result<(Vec<f64>, usize)> {
            let nominal = entry.level as f64 * set.params.cell_on_current;
            let mut rng = ChaCha8Rng::seed_from_u64(vm.seed ^ entry.level as u64);
            let mut counts = vec![0usize; k];
            let mut clamps = 0;
            for _ in 0..n_samples {
                let noisy = sample_current(nominal, vm, &mut rng);
                clamps += noisy.clamped as usize;
                let t = ideal_spike_time(noisy.amperes, &set.params)?;
                counts[bounds.partition_point(|&m| m <= t)] += 1;
            }
            let row = counts
                .into_iter()
                .map(|c| c as f64 / n_samples as f64)
                .collect();
            Ok((row, clamps))
        })
        .collect::<Result<_>>()?;
    let clamps: usize = rows.iter().map(|r| r.1).sum();
    if clamps > 0 {
        log::debug!("{clamps} non-positive current draws were floored");
    }
    Ok(ErrorMatrix {
        p: rows.into_iter().map(|r| r.0).collect(),
        levels: set.levels(),
        times_s: times,
        padded: false,
    })
}

fn std_normal_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        1.0
    } else if x == f64::NEG_INFINITY {
        0.0
    } else {
        0.5 * erfc(-x / std::f64::consts::SQRT_2)
    }
}

/// Closed-form counterpart of [`extract_pmap`]. Since `t` is proportional to
/// `1/I`, level `i` lands in bucket `[m_lo, m_hi)` exactly when
/// `t_i / m_hi - 1 < delta <= t_i / m_lo - 1`; the outermost buckets are
/// unbounded, so every row telescopes to 1.
pub fn analytic_pmap(set: &SpikeTimeSet, vm: &VariationModel) -> Result<ErrorMatrix> {
    check_set(set)?;
    vm.validate()?;
    let times = set.ideal_times();
    let k = times.len();
    if vm.relative_std == 0.0 {
        return Ok(ErrorMatrix::identity(set.levels(), times, false));
    }
    let bounds = midpoints(&times);
    let rho = vm.relative_std;
    let p = times
        .iter()
        .map(|&t_i| {
            // Deviation thresholds at each boundary; decreasing in boundary time.
            let cuts: Vec<f64> = bounds.iter().map(|&m| (t_i / m - 1.0) / rho).collect();
            (0..k)
                .map(|j| {
                    let upper = if j == 0 { f64::INFINITY } else { cuts[j - 1] };
                    let lower = if j == k - 1 { f64::NEG_INFINITY } else { cuts[j] };
                    (std_normal_cdf(upper) - std_normal_cdf(lower)).max(0.0)
                })
                .collect()
        })
        .collect();
    Ok(ErrorMatrix {
        p,
        levels: set.levels(),
        times_s: times,
        padded: false,
    })
}

/// Decision interval and variation interval of one included level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Margin {
    pub level: u32,
    /// Length of the decision interval `B`, seconds.
    pub b_len_s: f64,
    /// Length of `E = [t(I + eps), t(I - eps)]`, seconds; infinite when
    /// `eps >= I`.
    pub e_len_s: f64,
    /// `|B| / |E|`; `+inf` without variation.
    pub ratio: f64,
}

/// Decision-interval lengths of each level in ideal-time order. Interior
/// levels span the midpoints to both neighbours; the fastest level's
/// interval starts at 0 and the slowest one ends at the GRT, matching the
/// decode buckets.
pub fn decision_interval_lengths(times: &[f64], grt_s: f64) -> Vec<f64> {
    let bounds = midpoints(times);
    (0..times.len())
        .map(|i| {
            let left = if i == 0 { 0.0 } else { bounds[i - 1] };
            let right = if i + 1 == times.len() { grt_s.max(times[i]) } else { bounds[i] };
            right - left
        })
        .collect()
}

pub fn robustness_margins(set: &SpikeTimeSet, vm: &VariationModel) -> Result<Vec<Margin>> {
    check_set(set)?;
    vm.validate()?;
    let times = set.ideal_times();
    let b = decision_interval_lengths(&times, set.grt());
    let eps = vm.epsilon_multiplier() * vm.relative_std;
    Ok(set
        .entries
        .iter()
        .zip(b)
        .map(|(entry, b_len_s)| {
            let t = entry.t_ideal_s;
            let e_len_s = if eps >= 1.0 {
                f64::INFINITY
            } else {
                t / (1.0 - eps) - t / (1.0 + eps)
            };
            let ratio = if e_len_s == 0.0 { f64::INFINITY } else { b_len_s / e_len_s };
            Margin {
                level: entry.level,
                b_len_s,
                e_len_s,
                ratio,
            }
        })
        .collect())
}
