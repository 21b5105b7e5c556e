use serde::{Deserialize, Serialize};

use super::site::Quantizer;
use crate::error::{Error, Result};

/// Checks that `groups` evenly partitions `timesteps`.
pub fn check_grouping(timesteps: usize, groups: usize) -> Result<()> {
    if groups == 0 || timesteps == 0 || timesteps % groups != 0 {
        return Err(Error::Config(format!(
            "group count {groups} must divide the {timesteps} timesteps"
        )));
    }
    Ok(())
}

/// 1-based index `i` of the group `[(i−1)·T/G, i·T/G − 1]` containing `t`.
pub fn group_of(t: usize, timesteps: usize, groups: usize) -> Result<usize> {
    check_grouping(timesteps, groups)?;
    if t >= timesteps {
        return Err(Error::Domain(format!("timestep {t} outside 0..{timesteps}")));
    }
    Ok(t / (timesteps / groups) + 1)
}

/// Timesteps belonging to 1-based group `i`.
pub fn group_members(i: usize, timesteps: usize, groups: usize) -> Result<std::ops::Range<usize>> {
    check_grouping(timesteps, groups)?;
    if i == 0 || i > groups {
        return Err(Error::Domain(format!("group {i} outside 1..={groups}")));
    }
    let width = timesteps / groups;
    Ok((i - 1) * width..i * width)
}

/// One activation quantizer per timestep group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGroupedParams {
    pub timesteps: usize,
    /// Entry `i − 1` serves group `i`.
    pub groups: Vec<Quantizer>,
}

impl TimeGroupedParams {
    pub fn new(timesteps: usize, groups: Vec<Quantizer>) -> Result<Self> {
        check_grouping(timesteps, groups.len())?;
        Ok(TimeGroupedParams { timesteps, groups })
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn for_timestep(&self, t: usize) -> Result<&Quantizer> {
        let i = group_of(t, self.timesteps, self.groups.len())?;
        self.groups
            .get(i - 1)
            .ok_or_else(|| Error::Config(format!("no parameters for group {i}")))
    }

    pub fn quantize(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self.for_timestep(t)?.quantize_slice(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::MultiRegionParams;

    #[test]
    fn group_boundaries() {
        assert_eq!(group_of(0, 100, 10).unwrap(), 1);
        assert_eq!(group_of(37, 100, 10).unwrap(), 4);
        assert_eq!(group_of(99, 100, 10).unwrap(), 10);
        assert_eq!(group_of(10, 100, 10).unwrap(), 2);
        assert_eq!(group_members(4, 100, 10).unwrap(), 30..40);
        assert!(matches!(group_of(100, 100, 10), Err(Error::Domain(_))));
        assert!(matches!(group_of(0, 100, 7), Err(Error::Config(_))));
    }

    #[test]
    fn single_group_matches_ungrouped() {
        let p = MultiRegionParams::softmax(3.0 / 1024.0, 6).unwrap();
        let g = TimeGroupedParams::new(100, vec![Quantizer::MultiRegion(p)]).unwrap();
        let xs: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
        for t in [0, 50, 99] {
            assert_eq!(g.quantize(&xs, t).unwrap(), p.quantize_slice(&xs).unwrap());
        }
    }

    #[test]
    fn groups_differ_only_where_grids_differ() {
        let a = MultiRegionParams::softmax(1.0 / 1024.0, 6).unwrap();
        let b = MultiRegionParams::softmax(8.0 / 1024.0, 6).unwrap();
        let g = TimeGroupedParams::new(
            100,
            vec![Quantizer::MultiRegion(a), Quantizer::MultiRegion(b)],
        )
        .unwrap();
        let xs: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
        let q1 = g.quantize(&xs, 49).unwrap();
        let q2 = g.quantize(&xs, 50).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            assert_eq!(q1[i], a.quantize(x).unwrap());
            assert_eq!(q2[i], b.quantize(x).unwrap());
        }
        assert_ne!(q1, q2);
    }
}
