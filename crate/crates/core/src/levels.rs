//! MAC-level statistics and frequency-based level selection.
//!
//! The occurrence histogram of sub-MAC results is collected over an inference
//! workload; only the `k` most frequent levels keep a spike time, and every
//! other level is clipped (outside the selected range) or snapped (inside an
//! interior gap) to an included one.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{BnnModel, CompiledModel, SubMacConfig};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::neuron::SpikeTimeSet;

/// Absolute frequency of every sub-MAC level `0..=a`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacHistogram {
    pub counts: Vec<u64>,
    pub array_size: u32,
    pub provenance: String,
}

impl MacHistogram {
    pub fn new(array_size: u32, provenance: impl Into<String>) -> Self {
        Self {
            counts: vec![0; array_size as usize + 1],
            array_size,
            provenance: provenance.into(),
        }
    }

    pub fn from_counts(counts: Vec<u64>, provenance: impl Into<String>) -> Result<Self> {
        if counts.is_empty() {
            return Err(invalid("histogram needs at least one level"));
        }
        Ok(Self {
            array_size: counts.len() as u32 - 1,
            counts,
            provenance: provenance.into(),
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Level with the highest count; the lowest such level on ties.
    pub fn mode(&self) -> u32 {
        let mut best = 0;
        for (level, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = level;
            }
        }
        best as u32
    }

    pub fn merge(&mut self, other: &MacHistogram) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(invalid(format!(
                "cannot merge histograms over {} and {} levels",
                self.counts.len(),
                other.counts.len()
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Two-column CSV with header `level,count`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "level,count")?;
        for (level, count) in self.counts.iter().enumerate() {
            writeln!(out, "{level},{count}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R, provenance: impl Into<String>) -> Result<Self> {
        let mut counts = Vec::new();
        let mut offset = 0usize;
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let line_len = line.len() + 1;
            if lineno == 0 {
                if line.trim() != "level,count" {
                    return Err(Error::Parse {
                        offset,
                        message: format!("expected header `level,count`, found `{line}`"),
                    });
                }
                offset += line_len;
                continue;
            }
            if line.trim().is_empty() {
                offset += line_len;
                continue;
            }
            let parse_err = |message: String| Error::Parse { offset, message };
            let (level, count) = line
                .split_once(',')
                .ok_or_else(|| parse_err(format!("malformed row `{line}`")))?;
            let level: usize = level
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad level: {e}")))?;
            let count: u64 = count
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad count: {e}")))?;
            if level != counts.len() {
                return Err(parse_err(format!(
                    "levels must be listed in order; expected {}, found {level}",
                    counts.len()
                )));
            }
            counts.push(count);
            offset += line_len;
        }
        Self::from_counts(counts, provenance)
    }
}

/// Counts every chunk-level popcount produced while running `dataset`
/// through `model` with array size `array_size`, summed over all layers.
/// Work is sharded across threads and the shard histograms are added.
pub fn collect_histogram(model: &BnnModel, dataset: &Dataset, array_size: u32) -> Result<MacHistogram> {
    if dataset.is_empty() {
        return Err(invalid("cannot profile an empty dataset"));
    }
    let compiled = CompiledModel::new(model)?;
    let cfg = SubMacConfig::identity(array_size);
    let runtime = cfg.compile()?;
    let levels = array_size as usize + 1;
    let counts = dataset
        .samples
        .par_iter()
        .try_fold(
            || vec![0u64; levels],
            |mut acc, sample| -> Result<Vec<u64>> {
                // The identity transform never draws.
                let mut unused = ChaCha8Rng::seed_from_u64(0);
                compiled.run(&sample.pixels, &runtime, &mut unused, Some(&mut acc))?;
                Ok(acc)
            },
        )
        .try_reduce(
            || vec![0u64; levels],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                Ok(a)
            },
        )?;
    Ok(MacHistogram {
        counts,
        array_size,
        provenance: dataset.name.clone(),
    })
}

/// Included MAC levels after selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSet {
    pub included: Vec<u32>,
    pub k: usize,
    pub q_first: u32,
    pub q_last: u32,
    /// Histogram mode used for snapping ties.
    pub mode: u32,
    /// Levels strictly between `q_first` and `q_last` that were not selected.
    pub gaps: Vec<u32>,
}

impl LevelSet {
    pub fn new(mut included: Vec<u32>, mode: u32) -> Result<Self> {
        included.sort_unstable();
        included.dedup();
        let (&q_first, &q_last) = match (included.first(), included.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(invalid("level set must not be empty")),
        };
        let gaps = (q_first..=q_last)
            .filter(|q| included.binary_search(q).is_err())
            .collect();
        Ok(Self {
            k: included.len(),
            included,
            q_first,
            q_last,
            mode,
            gaps,
        })
    }

    /// Contiguous range `lo..=hi`.
    pub fn range(lo: u32, hi: u32) -> Result<Self> {
        if lo > hi {
            return Err(invalid(format!("empty level range {lo}..={hi}")));
        }
        Self::new((lo..=hi).collect(), (lo + hi) / 2)
    }

    pub fn contains(&self, level: u32) -> bool {
        self.included.binary_search(&level).is_ok()
    }

    pub fn is_contiguous(&self) -> bool {
        self.gaps.is_empty()
    }

    /// Lookup table `level -> clip_level(level)` for `0..=array_size`.
    pub fn clip_table(&self, array_size: u32) -> Vec<u32> {
        (0..=array_size).map(|m| clip_level(m, self)).collect()
    }
}

/// Picks the `k` levels with the highest counts. Ties go to the level closer
/// to the histogram mode, then to the lower level. Asking for more levels
/// than have non-zero counts pads with the levels nearest the mode.
pub fn select_top_k(hist: &MacHistogram, k: usize) -> Result<LevelSet> {
    select_top_k_from(hist, k, true)
}

/// Like [`select_top_k`], optionally leaving level 0 out of the candidates.
pub fn select_top_k_from(hist: &MacHistogram, k: usize, include_zero: bool) -> Result<LevelSet> {
    let first = if include_zero { 0 } else { 1 };
    let candidates = hist.counts.len().saturating_sub(first);
    if k == 0 || k > candidates {
        return Err(invalid(format!(
            "k = {k} outside [1, {candidates}]"
        )));
    }
    if hist.total() == 0 {
        return Err(invalid("histogram is empty; profile before selecting levels"));
    }
    let mode = hist.mode() as i64;
    let mut order: Vec<u32> = (first as u32..hist.counts.len() as u32).collect();
    order.sort_by_key(|&q| {
        (
            std::cmp::Reverse(hist.counts[q as usize]),
            (q as i64 - mode).unsigned_abs(),
            q,
        )
    });
    let nonzero = order.iter().filter(|&&q| hist.counts[q as usize] > 0).count();
    if k > nonzero {
        log::warn!(
            "k = {k} exceeds the {nonzero} observed levels; padding with levels nearest the mode"
        );
    }
    let chosen = order[..k].to_vec();
    let set = LevelSet::new(chosen, mode as u32)?;
    if !set.is_contiguous() {
        log::info!("top-{k} selection leaves interior gaps {:?}", set.gaps);
    }
    Ok(set)
}

/// Maps a MAC value onto the included set: values outside `[q_first, q_last]`
/// clip to the nearer end, values inside a gap snap to the nearest included
/// level (ties toward the mode, then the lower level).
pub fn clip_level(m: u32, ls: &LevelSet) -> u32 {
    if m <= ls.q_first {
        return ls.q_first;
    }
    if m >= ls.q_last {
        return ls.q_last;
    }
    match ls.included.binary_search(&m) {
        Ok(_) => m,
        Err(pos) => {
            let below = ls.included[pos - 1];
            let above = ls.included[pos];
            let (db, da) = (m - below, above - m);
            if db != da {
                return if db < da { below } else { above };
            }
            let mode = ls.mode as i64;
            let (mb, ma) = (
                (below as i64 - mode).unsigned_abs(),
                (above as i64 - mode).unsigned_abs(),
            );
            if ma < mb {
                above
            } else {
                below
            }
        }
    }
}

/// What the cycle counter reports for one neuron evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeObservation {
    Cycle(u64),
    Timeout,
}

/// Converts a latched cycle back to a MAC level. Decision boundaries sit
/// midway between adjacent latched spike times; a cycle exactly on a
/// boundary belongs to the slower level. The fastest bucket extends down to
/// cycle 0 and the slowest up to the GRT. Later cycles count as a timeout,
/// which decodes to the set's timeout level.
pub fn decode_spike(obs: SpikeObservation, set: &SpikeTimeSet) -> u32 {
    let cycle = match obs {
        SpikeObservation::Cycle(c) if c <= set.grt_cycles => c,
        _ => return set.timeout_level,
    };
    // Compare 2*cycle against t_i + t_{i+1} to stay in integers.
    let doubled = 2 * cycle as u128;
    for pair in set.entries.windows(2) {
        let boundary = pair[0].t_cycles as u128 + pair[1].t_cycles as u128;
        if doubled < boundary {
            return pair[0].level;
        }
    }
    set.entries
        .last()
        .map(|e| e.level)
        .unwrap_or(set.timeout_level)
}
