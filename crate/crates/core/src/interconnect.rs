//! Neighbor topologies, per-cycle port exchange and the shared register file.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{Coord, SharedRegMode, Topology};

/// Input/output port direction. The discriminant is the operand select code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    North = 0,
    East = 1,
    South = 2,
    West = 3,
    North2 = 4,
    East2 = 5,
    South2 = 6,
    West2 = 7,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::North,
        Direction::East,
        Direction::South,
        Direction::West,
        Direction::North2,
        Direction::East2,
        Direction::South2,
        Direction::West2,
    ];

    pub fn from_index(i: usize) -> Option<Direction> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_two_hop(self) -> bool {
        self.index() >= 4
    }

    pub fn opposite(self) -> Direction {
        Self::ALL[(self.index() & 4) | ((self.index() + 2) & 3)]
    }

    /// (row delta, col delta)
    fn delta(self) -> (isize, isize) {
        match self {
            Direction::North => (-1, 0),
            Direction::East => (0, 1),
            Direction::South => (1, 0),
            Direction::West => (0, -1),
            Direction::North2 => (-2, 0),
            Direction::East2 => (0, 2),
            Direction::South2 => (2, 0),
            Direction::West2 => (0, -2),
        }
    }
}

/// The PE seen through port `dir` of `at`, if the link exists.
pub fn neighbor(topology: Topology, at: Coord, dir: Direction, rows: usize, cols: usize) -> Option<Coord> {
    let (dr, dc) = dir.delta();
    match topology {
        Topology::Torus => {
            if dir.is_two_hop() {
                return None;
            }
            let r = (at.row as isize + dr).rem_euclid(rows as isize) as usize;
            let c = (at.col as isize + dc).rem_euclid(cols as isize) as usize;
            Some(Coord::new(r, c))
        }
        Topology::Mesh2D | Topology::OneHop => {
            if dir.is_two_hop() && topology == Topology::Mesh2D {
                return None;
            }
            let r = at.row as isize + dr;
            let c = at.col as isize + dc;
            if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
                None
            } else {
                Some(Coord::new(r as usize, c as usize))
            }
        }
    }
}

/// All (direction, neighbor) pairs of `at`, in port order.
pub fn neighbors(topology: Topology, at: Coord, rows: usize, cols: usize) -> Vec<(Direction, Coord)> {
    Direction::ALL.iter().filter_map(|&d| neighbor(topology, at, d, rows, cols).map(|n| (d, n))).collect()
}

/// Number of directed links (connected input ports) in the array.
pub fn directed_links(topology: Topology, rows: usize, cols: usize) -> usize {
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| Coord::new(r, c)))
        .map(|at| neighbors(topology, at, rows, cols).len())
        .sum()
}

/// Values seen on the eight input ports of one PE.
pub type PortInputs = [Option<u32>; 8];

/// Routes the per-PE output values of cycle `t` (row-major) to the input
/// ports every PE reads in cycle `t + 1`. All links have one cycle latency.
pub fn exchange(topology: Topology, rows: usize, cols: usize, outputs: &[Option<u32>]) -> Vec<PortInputs> {
    assert_eq!(outputs.len(), rows * cols);
    let mut inputs = vec![[None; 8]; rows * cols];
    for (i, ports) in inputs.iter_mut().enumerate() {
        let at = Coord::new(i / cols, i % cols);
        for d in Direction::ALL {
            if let Some(n) = neighbor(topology, at, d, rows, cols) {
                ports[d.index()] = outputs[n.row * cols + n.col];
            }
        }
    }
    inputs
}

/// Number of scope instances the grid is partitioned into.
pub fn scope_instances(mode: SharedRegMode, rows: usize, cols: usize) -> usize {
    match mode {
        SharedRegMode::Line => cols,
        SharedRegMode::Row => rows,
        SharedRegMode::Quadrant => 4,
        SharedRegMode::Global => 1,
    }
}

/// Scope instance that owns `at`. Line scope is a column; quadrants split
/// at `rows / 2` and `cols / 2`.
pub fn scope_of(mode: SharedRegMode, at: Coord, rows: usize, cols: usize) -> usize {
    match mode {
        SharedRegMode::Line => at.col,
        SharedRegMode::Row => at.row,
        SharedRegMode::Quadrant => usize::from(at.row >= rows / 2) * 2 + usize::from(at.col >= cols / 2),
        SharedRegMode::Global => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("shared register index {idx} out of range (count {count})")]
pub struct IndexOutOfRange {
    pub idx: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PendingWrite {
    scope: usize,
    idx: usize,
    from: Coord,
    value: u32,
}

/// Shared registers partitioned by scope. Writes are buffered and become
/// visible after [`SharedRegFile::commit`] at the end of the cycle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedRegFile {
    mode: SharedRegMode,
    rows: usize,
    cols: usize,
    count: usize,
    regs: Vec<Vec<Option<u32>>>,
    pending: Vec<PendingWrite>,
}

impl SharedRegFile {
    pub fn new(mode: SharedRegMode, rows: usize, cols: usize, count: usize) -> Self {
        SharedRegFile {
            mode,
            rows,
            cols,
            count,
            regs: vec![vec![None; count]; scope_instances(mode, rows, cols)],
            pending: Vec::new(),
        }
    }

    pub fn mode(&self) -> SharedRegMode {
        self.mode
    }

    pub fn scope(&self, at: Coord) -> usize {
        scope_of(self.mode, at, self.rows, self.cols)
    }

    /// Registers visible from `at`.
    pub fn view(&self, at: Coord) -> &[Option<u32>] {
        &self.regs[self.scope(at)]
    }

    pub fn read(&self, at: Coord, idx: usize) -> Result<Option<u32>, IndexOutOfRange> {
        self.check(idx)?;
        Ok(self.regs[self.scope(at)][idx])
    }

    pub fn write(&mut self, at: Coord, idx: usize, value: u32) -> Result<(), IndexOutOfRange> {
        self.check(idx)?;
        self.pending.push(PendingWrite { scope: self.scope(at), idx, from: at, value });
        Ok(())
    }

    /// Applies buffered writes. When several PEs write the same register in
    /// one cycle the lowest (row, col) wins; returns the number of losing
    /// writes.
    pub fn commit(&mut self) -> u64 {
        let mut pending = std::mem::take(&mut self.pending);
        pending.sort_by_key(|w| (w.scope, w.idx, w.from));
        let mut conflicts = 0;
        let mut last: Option<(usize, usize)> = None;
        for w in pending {
            if last == Some((w.scope, w.idx)) {
                conflicts += 1;
                continue;
            }
            last = Some((w.scope, w.idx));
            self.regs[w.scope][w.idx] = Some(w.value);
        }
        conflicts
    }

    pub fn clear(&mut self) {
        for scope in &mut self.regs {
            scope.iter_mut().for_each(|r| *r = None);
        }
        self.pending.clear();
    }

    fn check(&self, idx: usize) -> Result<(), IndexOutOfRange> {
        if idx < self.count {
            Ok(())
        } else {
            Err(IndexOutOfRange { idx, count: self.count })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mesh_corner_has_two_neighbors() {
        assert_eq!(neighbors(Topology::Mesh2D, Coord::new(0, 0), 8, 8).len(), 2);
    }

    #[test]
    fn torus_always_four() {
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(neighbors(Topology::Torus, Coord::new(r, c), 8, 8).len(), 4);
            }
        }
    }

    #[test]
    fn onehop_center_has_eight() {
        let n = neighbors(Topology::OneHop, Coord::new(3, 3), 8, 8);
        assert_eq!(n.len(), 8);
        let dist1 = n.iter().filter(|(_, c)| c.manhattan(Coord::new(3, 3)) == 1).count();
        let dist2 = n.iter().filter(|(_, c)| c.manhattan(Coord::new(3, 3)) == 2).count();
        assert_eq!((dist1, dist2), (4, 4));
    }

    #[test]
    fn opposite_is_involution() {
        for d in Direction::ALL {
            assert_ne!(d.opposite(), d);
            assert_eq!(d.opposite().opposite(), d);
            assert_eq!(d.opposite().is_two_hop(), d.is_two_hop());
        }
    }

    #[test]
    fn links_are_symmetric_and_never_self() {
        for topo in [Topology::Mesh2D, Topology::OneHop, Topology::Torus] {
            for (rows, cols) in [(2, 2), (2, 5), (3, 7), (8, 8)] {
                for r in 0..rows {
                    for c in 0..cols {
                        let at = Coord::new(r, c);
                        for (d, n) in neighbors(topo, at, rows, cols) {
                            assert_ne!(n, at);
                            assert_eq!(neighbor(topo, n, d.opposite(), rows, cols), Some(at));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn all_invalid_outputs_give_invalid_inputs() {
        let inputs = exchange(Topology::Torus, 4, 4, &[None; 16]);
        assert!(inputs.iter().all(|p| p.iter().all(Option::is_none)));
    }

    #[test]
    fn east_neighbor_sees_value_on_west_port() {
        let mut out = vec![None; 64];
        out[2 * 8 + 2] = Some(7);
        let inputs = exchange(Topology::Mesh2D, 8, 8, &out);
        assert_eq!(inputs[2 * 8 + 3][Direction::West.index()], Some(7));
        assert_eq!(inputs[1 * 8 + 2][Direction::South.index()], Some(7));
        assert_eq!(inputs[2 * 8 + 4][Direction::West.index()], None);
    }

    #[test]
    fn global_scope_shares_across_grid() {
        let mut f = SharedRegFile::new(SharedRegMode::Global, 8, 8, 4);
        f.write(Coord::new(0, 0), 1, 99).unwrap();
        assert_eq!(f.read(Coord::new(7, 7), 1).unwrap(), None);
        f.commit();
        assert_eq!(f.read(Coord::new(7, 7), 1).unwrap(), Some(99));
    }

    #[test]
    fn row_scope_is_private_to_row() {
        let mut f = SharedRegFile::new(SharedRegMode::Row, 8, 8, 4);
        f.write(Coord::new(0, 0), 0, 5).unwrap();
        f.commit();
        assert_eq!(f.read(Coord::new(1, 0), 0).unwrap(), None);
        assert_eq!(f.read(Coord::new(0, 7), 0).unwrap(), Some(5));
    }

    #[test]
    fn line_scope_is_a_column() {
        let mut f = SharedRegFile::new(SharedRegMode::Line, 8, 8, 4);
        f.write(Coord::new(0, 3), 0, 5).unwrap();
        f.commit();
        assert_eq!(f.read(Coord::new(7, 3), 0).unwrap(), Some(5));
        assert_eq!(f.read(Coord::new(0, 4), 0).unwrap(), None);
    }

    #[test]
    fn quadrants_split_at_half() {
        let s = |r, c| scope_of(SharedRegMode::Quadrant, Coord::new(r, c), 8, 8);
        assert_ne!(s(3, 3), s(4, 4));
        assert_eq!(s(0, 0), s(3, 3));
        assert_eq!(s(4, 4), s(7, 7));
    }

    #[test]
    fn lowest_coordinate_wins_write_conflict() {
        let mut f = SharedRegFile::new(SharedRegMode::Global, 4, 4, 2);
        f.write(Coord::new(2, 1), 0, 21).unwrap();
        f.write(Coord::new(0, 3), 0, 3).unwrap();
        f.write(Coord::new(1, 0), 0, 10).unwrap();
        f.write(Coord::new(3, 3), 1, 33).unwrap();
        assert_eq!(f.commit(), 2);
        assert_eq!(f.read(Coord::new(0, 0), 0).unwrap(), Some(3));
        assert_eq!(f.read(Coord::new(0, 0), 1).unwrap(), Some(33));
    }

    #[test]
    fn register_index_checked() {
        let mut f = SharedRegFile::new(SharedRegMode::Global, 4, 4, 2);
        assert_eq!(f.read(Coord::new(0, 0), 2), Err(IndexOutOfRange { idx: 2, count: 2 }));
        assert!(f.write(Coord::new(0, 0), 5, 1).is_err());
    }
}
