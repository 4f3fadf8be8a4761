//! Greedy spike-time merging for variation tolerance.
//!
//! Starting from the mapping-probability matrix of a selected spike-time
//! set, the spike time with the smallest probability of being read back
//! correctly is repeatedly merged into a neighbour: its column is added to
//! the neighbour's column, then its row and column are removed. A merge goes
//! left when the left neighbour's diagonal entry is strictly smaller than the
//! right one's, otherwise right; the fastest and slowest times can only merge
//! inward. Every merge widens the decision interval of the absorbing time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::levels::{clip_level, LevelSet};
use crate::neuron::{SpikeEntry, SpikeTimeSet};
use crate::variation::{extract_pmap, ErrorMatrix, VariationModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeDirection {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    /// Index of the removed spike time in the matrix before this step.
    pub index: usize,
    pub removed_level: u32,
    pub target_level: u32,
    pub direction: MergeDirection,
    pub min_diag_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub phi: usize,
    pub k_v: usize,
    /// Surviving spike times, fastest first.
    pub surviving: Vec<SpikeEntry>,
    /// Every original level mapped to the level of its surviving spike time.
    pub redirect: BTreeMap<u32, u32>,
    pub merged_pmap: ErrorMatrix,
    pub steps: Vec<MergeStep>,
}

impl MergePlan {
    pub fn surviving_levels(&self) -> Vec<u32> {
        self.surviving.iter().map(|e| e.level).collect()
    }

    /// Spike-time set restricted to the surviving times.
    pub fn surviving_set(&self, original: &SpikeTimeSet) -> Result<SpikeTimeSet> {
        original.restrict_to(&self.surviving_levels())
    }
}

/// Picks the merge for the current matrix: the lowest-index minimum of the
/// diagonal and the direction it merges in. Requires at least two rows.
pub fn next_merge(p: &[Vec<f64>]) -> (usize, MergeDirection) {
    let n = p.len();
    debug_assert!(n >= 2);
    let mut j = 0;
    for i in 1..n {
        if p[i][i] < p[j][j] {
            j = i;
        }
    }
    let direction = if j == 0 {
        MergeDirection::Right
    } else if j == n - 1 || p[j - 1][j - 1] < p[j + 1][j + 1] {
        MergeDirection::Left
    } else {
        MergeDirection::Right
    };
    (j, direction)
}

/// Adds column `j` into its neighbour in `direction`, then deletes row and
/// column `j`. Returns the neighbour's index before the deletion.
pub fn merge_column(p: &mut Vec<Vec<f64>>, j: usize, direction: MergeDirection) -> usize {
    let target = match direction {
        MergeDirection::Left => j - 1,
        MergeDirection::Right => j + 1,
    };
    for row in p.iter_mut() {
        row[target] += row[j];
    }
    p.remove(j);
    for row in p.iter_mut() {
        row.remove(j);
    }
    target
}

/// Runs `phi` greedy merge steps on `pmap`, whose rows follow the time order
/// of `set`.
pub fn capmin_v(pmap: &ErrorMatrix, set: &SpikeTimeSet, phi: usize) -> Result<MergePlan> {
    if pmap.padded {
        return Err(invalid("merging needs the unpadded error matrix"));
    }
    if pmap.levels != set.levels() {
        return Err(invalid("error matrix does not follow the spike-time set's order"));
    }
    let k = set.len();
    if phi >= k {
        return Err(invalid(format!("phi = {phi} must be below the {k} spike times")));
    }
    let mut p = pmap.p.clone();
    let mut surviving = set.entries.clone();
    let mut redirect: BTreeMap<u32, u32> = set.entries.iter().map(|e| (e.level, e.level)).collect();
    let mut steps = Vec::with_capacity(phi);
    for _ in 0..phi {
        let (j, direction) = next_merge(&p);
        let removed = surviving[j].level;
        let target = merge_column(&mut p, j, direction);
        let target_level = surviving[target].level;
        surviving.remove(j);
        for to in redirect.values_mut() {
            if *to == removed {
                *to = target_level;
            }
        }
        let min_diag_after = (0..p.len()).map(|i| p[i][i]).fold(f64::INFINITY, f64::min);
        steps.push(MergeStep {
            index: j,
            removed_level: removed,
            target_level,
            direction,
            min_diag_after,
        });
    }
    let merged_pmap = ErrorMatrix {
        p,
        levels: surviving.iter().map(|e| e.level).collect(),
        times_s: surviving.iter().map(|e| e.t_ideal_s).collect(),
        padded: false,
    };
    Ok(MergePlan {
        phi,
        k_v: surviving.len(),
        surviving,
        redirect,
        merged_pmap,
        steps,
    })
}

/// Expands the merged matrix to the full `0..=a` level space. Each level is
/// first clipped into `ls`, then sent to its surviving representative, whose
/// merged row it inherits. An included level 0 is read back through the
/// timeout and always decodes to 0.
pub fn pad_pmap(plan: &MergePlan, ls: &LevelSet, array_size: u32) -> Result<ErrorMatrix> {
    let n = array_size as usize + 1;
    if ls.q_last > array_size {
        return Err(invalid("level set exceeds the array size"));
    }
    let mut p = vec![vec![0.0; n]; n];
    for (level, row) in p.iter_mut().enumerate() {
        let clipped = clip_level(level as u32, ls);
        if clipped == 0 {
            row[0] = 1.0;
            continue;
        }
        let rep = *plan.redirect.get(&clipped).ok_or_else(|| {
            invalid(format!("level {clipped} of the level set has no spike time in the plan"))
        })?;
        let src = plan
            .merged_pmap
            .row_of(rep)
            .ok_or_else(|| invalid(format!("representative {rep} missing from merged matrix")))?;
        for (col, &prob) in plan.merged_pmap.levels.iter().zip(src) {
            row[*col as usize] += prob;
        }
    }
    Ok(ErrorMatrix {
        p,
        levels: (0..=array_size).collect(),
        times_s: Vec::new(),
        padded: true,
    })
}

/// Measures the matrix of the surviving times afresh, with the wider
/// buckets the merges produced, instead of summing columns.
pub fn reextract_pmap(
    plan: &MergePlan,
    set: &SpikeTimeSet,
    vm: &VariationModel,
    n_samples: usize,
) -> Result<ErrorMatrix> {
    extract_pmap(&plan.surviving_set(set)?, vm, n_samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::{build_spike_time_set, NeuronCircuitParams};

    fn three_level_set(levels: &[u32]) -> SpikeTimeSet {
        let p = NeuronCircuitParams::default().with_capacitance(10e-12);
        build_spike_time_set(levels, &p).unwrap()
    }

    fn example_pmap(set: &SpikeTimeSet) -> ErrorMatrix {
        ErrorMatrix {
            p: vec![
                vec![0.9, 0.08, 0.02],
                vec![0.2, 0.6, 0.2],
                vec![0.05, 0.15, 0.8],
            ],
            levels: set.levels(),
            times_s: set.ideal_times(),
            padded: false,
        }
    }

    #[test]
    fn hand_traced_example() {
        let set = three_level_set(&[10, 11, 12]);
        let plan = capmin_v(&example_pmap(&set), &set, 1).unwrap();
        assert_eq!(plan.k_v, 2);
        assert_eq!(plan.steps[0].index, 1);
        assert_eq!(plan.steps[0].direction, MergeDirection::Right);
        let expect = [[0.9, 0.10], [0.05, 0.95]];
        for (row, want) in plan.merged_pmap.p.iter().zip(expect) {
            for (got, w) in row.iter().zip(want) {
                assert!((got - w).abs() < 1e-15);
            }
        }
        // t1 <-> 12, t2 <-> 11, t3 <-> 10.
        assert_eq!(plan.surviving_levels(), vec![12, 10]);
        assert_eq!(plan.redirect[&11], 10);
        assert_eq!(plan.redirect[&12], 12);
    }

    #[test]
    fn identity_merges_first_time_rightward() {
        let set = three_level_set(&[10, 11, 12]);
        let id = ErrorMatrix::identity(set.levels(), set.ideal_times(), false);
        let plan = capmin_v(&id, &set, 1).unwrap();
        assert_eq!(plan.steps[0].index, 0);
        assert_eq!(plan.steps[0].direction, MergeDirection::Right);
        assert_eq!(plan.merged_pmap.min_diag(), 1.0);
        assert_eq!(plan.redirect[&12], 11);
    }

    #[test]
    fn phi_zero_is_identity() {
        let set = three_level_set(&[10, 11, 12]);
        let pm = example_pmap(&set);
        let plan = capmin_v(&pm, &set, 0).unwrap();
        assert_eq!(plan.merged_pmap, pm);
        assert_eq!(plan.surviving, set.entries);
        assert!(plan.redirect.iter().all(|(a, b)| a == b));
    }

    #[test]
    fn phi_out_of_range() {
        let set = three_level_set(&[10, 11, 12]);
        assert!(capmin_v(&example_pmap(&set), &set, 3).is_err());
    }

    #[test]
    fn padding_clips_and_redirects() {
        let set = three_level_set(&[10, 11, 12]);
        let plan = capmin_v(&example_pmap(&set), &set, 1).unwrap();
        let ls = LevelSet::range(10, 12).unwrap();
        let padded = pad_pmap(&plan, &ls, 32).unwrap();
        assert!(padded.padded);
        assert!(padded.max_row_sum_error() < 1e-12);
        // Level 11 inherits the merged row of its representative (level 10).
        let rep_row = plan.merged_pmap.row_of(10).unwrap();
        assert_eq!(padded.p[11][12], rep_row[0]);
        assert_eq!(padded.p[11][10], rep_row[1]);
        assert_eq!(padded.p[11][11], 0.0);
        // Below the range clips to 10, above to 12.
        assert_eq!(padded.p[3], padded.p[10]);
        assert_eq!(padded.p[30], padded.p[12]);
    }

    #[test]
    fn padding_without_merges_is_one_hot_outside() {
        let p = NeuronCircuitParams::default();
        let levels: Vec<u32> = (9..=22).collect();
        let c = crate::neuron::size_capacitor(&levels, &p).unwrap();
        let set = build_spike_time_set(&levels, &p.with_capacitance(c)).unwrap();
        let id = ErrorMatrix::identity(set.levels(), set.ideal_times(), false);
        let plan = capmin_v(&id, &set, 0).unwrap();
        let padded = pad_pmap(&plan, &LevelSet::range(9, 22).unwrap(), 32).unwrap();
        let mut want = vec![0.0; 33];
        want[9] = 1.0;
        assert_eq!(padded.p[3], want);
        for q in 9..=22 {
            assert_eq!(padded.p[q][q], 1.0);
        }
    }

    #[test]
    fn included_zero_level_decodes_to_zero() {
        let set = three_level_set(&[0, 1, 2]);
        let id = ErrorMatrix::identity(set.levels(), set.ideal_times(), false);
        let plan = capmin_v(&id, &set, 0).unwrap();
        let padded = pad_pmap(&plan, &LevelSet::range(0, 2).unwrap(), 4).unwrap();
        assert_eq!(padded.p[0], vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(padded.p[4][2], 1.0);
    }
}
