use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::types::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

/// A maximal connected set of foreground cells, `(row, col)` in BFS order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub cells: Vec<(usize, usize)>,
    /// First cell in row-major order.
    pub anchor: (usize, usize),
}

impl Component {
    pub fn size(&self) -> usize {
        self.cells.len()
    }
}

/// Foreground components sorted by size descending, ties broken by the
/// row-major position of each component's first cell.
pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> Vec<Component> {
    let (h, w) = (mask.height, mask.width);
    let offsets: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ],
    };
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut cells = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            cells.push((r, c));
            for &(dr, dc) in offsets {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if mask.bits[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        out.push(Component {
            cells,
            anchor: (start / w, start % w),
        });
    }
    // Discovery order is already row-major by anchor; a stable sort keeps it for ties.
    out.sort_by(|a, b| b.size().cmp(&a.size()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_ones_is_one_component() {
        let cs = connected_components(&Mask::ones(4, 6), Connectivity::Four);
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].size(), 24);
    }

    #[test]
    fn diagonal_cells_depend_on_connectivity() {
        let m = Mask::from_rows(&[&[1, 0], &[0, 1]]);
        assert_eq!(connected_components(&m, Connectivity::Four).len(), 2);
        assert_eq!(connected_components(&m, Connectivity::Eight).len(), 1);
    }

    #[test]
    fn empty_mask_has_no_components() {
        assert!(connected_components(&Mask::zeros(3, 3), Connectivity::Eight).is_empty());
    }

    #[test]
    fn ordering_is_size_then_anchor() {
        let m = Mask::from_rows(&[
            &[1, 0, 1, 1],
            &[0, 0, 0, 0],
            &[1, 1, 0, 1],
        ]);
        let cs = connected_components(&m, Connectivity::Four);
        let summary: Vec<(usize, (usize, usize))> = cs.iter().map(|c| (c.size(), c.anchor)).collect();
        assert_eq!(summary, vec![(2, (0, 2)), (2, (2, 0)), (1, (0, 0)), (1, (2, 3))]);
    }

    proptest! {
        #[test]
        fn components_partition_foreground(
            bits in proptest::collection::vec(any::<bool>(), 48),
            eight in any::<bool>(),
        ) {
            let m = Mask::from_bits(6, 8, bits).unwrap();
            let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
            let cs = connected_components(&m, conn);
            let total: usize = cs.iter().map(Component::size).sum();
            prop_assert_eq!(total, m.count_ones());
            let mut seen = std::collections::HashSet::new();
            for c in &cs {
                for &cell in &c.cells {
                    prop_assert!(m.get(cell.0, cell.1));
                    prop_assert!(seen.insert(cell));
                }
            }
            for pair in cs.windows(2) {
                prop_assert!(pair[0].size() >= pair[1].size());
            }
        }
    }
}
