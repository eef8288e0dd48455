use crate::error::{Error, Result};
use crate::network::ChannelMaskSet;

use super::criteria::ChannelScoreTable;

/// Channels chosen for pruning, as `(group, channel)`, plus skipped-floor notes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Selection {
    pub pruned: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

impl Selection {
    pub fn apply(&self, masks: &mut ChannelMaskSet) {
        for &(g, c) in &self.pruned {
            masks.prune(g, c);
        }
    }
}

/// Picks the `count` lowest-scoring surviving channels across all groups.
/// Ties go to the lower group index, then the lower channel index. A channel
/// whose removal would leave its group below `floor` survivors is skipped
/// with a warning and the next candidate is taken.
pub fn select_global(table: &ChannelScoreTable, masks: &ChannelMaskSet, count: usize, floor: usize) -> Result<Selection> {
    if table.scores.len() != masks.groups().len() {
        return Err(Error::MaskLength {
            expected: masks.groups().len(),
            found: table.scores.len(),
        });
    }
    let available: usize = masks
        .groups()
        .iter()
        .map(|m| m.count().saturating_sub(floor))
        .sum();
    if count > available {
        return Err(Error::InvalidArgument(format!(
            "cannot prune {count} channels: only {available} remain above the per-layer floor of {floor}"
        )));
    }
    let mut candidates: Vec<(f64, usize, usize)> = vec![];
    for (g, scores) in table.scores.iter().enumerate() {
        let mask = masks.group(g);
        mask.expect_len(scores.len())?;
        for (c, &s) in scores.iter().enumerate() {
            if mask.get(c) {
                candidates.push((s, g, c));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut alive: Vec<usize> = masks.groups().iter().map(|m| m.count()).collect();
    let mut out = Selection::default();
    for (s, g, c) in candidates {
        if out.pruned.len() == count {
            break;
        }
        if alive[g] <= floor {
            out.warnings.push(format!(
                "group {g} channel {c} (score {s:.3e}) kept: group is at its floor of {floor}"
            ));
            continue;
        }
        alive[g] -= 1;
        out.pruned.push((g, c));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::ChannelMask;
    use crate::network::zoo;

    fn masks_for(widths: &[usize]) -> ChannelMaskSet {
        let dims: Vec<usize> = std::iter::once(2).chain(widths.iter().copied()).collect();
        let m = zoo::mlp(&dims, 2);
        let topo = m.validate().unwrap();
        ChannelMaskSet::from_masks(&m, &topo, widths.iter().map(|&w| ChannelMask::full(w)).collect()).unwrap()
    }

    #[test]
    fn global_sort_across_layers() {
        let masks = masks_for(&[2, 2]);
        let t = ChannelScoreTable {
            scores: vec![vec![0.1, 0.9], vec![0.2, 0.8]],
        };
        assert_eq!(select_global(&t, &masks, 2, 1).unwrap().pruned, vec![(0, 0), (1, 0)]);
        assert!(select_global(&t, &masks, 0, 1).unwrap().pruned.is_empty());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let masks = masks_for(&[2]);
        let t = ChannelScoreTable {
            scores: vec![vec![0.5, 0.5]],
        };
        assert_eq!(select_global(&t, &masks, 1, 1).unwrap().pruned, vec![(0, 0)]);
    }

    #[test]
    fn floor_skips_with_warning() {
        let masks = masks_for(&[2, 3]);
        let t = ChannelScoreTable {
            scores: vec![vec![0.0, 0.1], vec![0.5, 0.6, 0.7]],
        };
        let s = select_global(&t, &masks, 2, 1).unwrap();
        assert_eq!(s.pruned, vec![(0, 0), (1, 0)]);
        assert_eq!(s.warnings.len(), 1);
        assert!(select_global(&t, &masks, 4, 1).is_err());
    }
}
