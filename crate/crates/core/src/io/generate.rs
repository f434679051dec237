use rand::seq::SliceRandom;
use rand::Rng;

use super::{sudoku_constraints, Graph};
use crate::csp::{CspInstance, ProblemKind};
use crate::error::{Error, Result};

/// Erdős–Rényi `G(n, p)`.
pub fn gen_random_graph<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Graph> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("edge probability {p} outside [0, 1]")));
    }
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    Ok(Graph { n, edges })
}

struct Grid {
    side: usize,
    box_side: usize,
    cells: Vec<Option<usize>>,
    rows: Vec<u16>,
    cols: Vec<u16>,
    boxes: Vec<u16>,
}

impl Grid {
    fn new(side: usize, cells: &[Option<usize>]) -> Option<Self> {
        let box_side = (side as f64).sqrt() as usize;
        let mut g = Grid {
            side,
            box_side,
            cells: vec![None; side * side],
            rows: vec![0; side],
            cols: vec![0; side],
            boxes: vec![0; side],
        };
        for (i, v) in cells.iter().enumerate() {
            if let Some(v) = *v {
                if g.candidates(i) & (1 << v) == 0 {
                    return None;
                }
                g.set(i, v);
            }
        }
        Some(g)
    }

    fn units(&self, i: usize) -> (usize, usize, usize) {
        let (r, c) = (i / self.side, i % self.side);
        (r, c, (r / self.box_side) * self.box_side + c / self.box_side)
    }

    fn candidates(&self, i: usize) -> u16 {
        let (r, c, b) = self.units(i);
        let full = (1u16 << self.side) - 1;
        full & !(self.rows[r] | self.cols[c] | self.boxes[b])
    }

    fn set(&mut self, i: usize, v: usize) {
        let (r, c, b) = self.units(i);
        self.rows[r] |= 1 << v;
        self.cols[c] |= 1 << v;
        self.boxes[b] |= 1 << v;
        self.cells[i] = Some(v);
    }

    fn clear(&mut self, i: usize) {
        let v = self.cells[i].take().expect("cell is set");
        let (r, c, b) = self.units(i);
        self.rows[r] &= !(1 << v);
        self.cols[c] &= !(1 << v);
        self.boxes[b] &= !(1 << v);
    }

    /// Empty cell with the fewest candidates.
    fn pick(&self) -> Option<(usize, u16)> {
        let mut best: Option<(usize, u16)> = None;
        for i in 0..self.cells.len() {
            if self.cells[i].is_none() {
                let cand = self.candidates(i);
                if best.is_none_or(|(_, b)| cand.count_ones() < b.count_ones()) {
                    best = Some((i, cand));
                    if cand.count_ones() <= 1 {
                        break;
                    }
                }
            }
        }
        best
    }

    fn count(&mut self, limit: usize) -> usize {
        let Some((i, cand)) = self.pick() else { return 1 };
        let mut total = 0;
        for v in 0..self.side {
            if cand & (1 << v) != 0 {
                self.set(i, v);
                total += self.count(limit - total);
                self.clear(i);
                if total >= limit {
                    break;
                }
            }
        }
        total
    }

    fn fill<R: Rng + ?Sized>(&mut self, rng: &mut R) -> bool {
        let Some((i, cand)) = self.pick() else { return true };
        let mut order: Vec<usize> = (0..self.side).filter(|v| cand & (1 << v) != 0).collect();
        order.shuffle(rng);
        for v in order {
            self.set(i, v);
            if self.fill(rng) {
                return true;
            }
            self.clear(i);
        }
        false
    }
}

fn side_of(cells: usize) -> Result<usize> {
    match cells {
        16 => Ok(4),
        81 => Ok(9),
        _ => Err(Error::Structural(format!("{cells} cells is not a 4x4 or 9x9 grid"))),
    }
}

/// Counts completions of a partial grid, stopping at `limit`.
pub fn count_sudoku_solutions(cells: &[Option<usize>], limit: usize) -> Result<usize> {
    let side = side_of(cells.len())?;
    Ok(Grid::new(side, cells).map_or(0, |mut g| g.count(limit.max(1))))
}

/// First completion in value order, if any.
pub fn solve_sudoku(cells: &[Option<usize>]) -> Result<Option<Vec<usize>>> {
    let side = side_of(cells.len())?;
    let Some(mut g) = Grid::new(side, cells) else { return Ok(None) };
    fn first(g: &mut Grid) -> bool {
        let Some((i, cand)) = g.pick() else { return true };
        for v in 0..g.side {
            if cand & (1 << v) != 0 {
                g.set(i, v);
                if first(g) {
                    return true;
                }
                g.clear(i);
            }
        }
        false
    }
    Ok(first(&mut g).then(|| g.cells.iter().map(|c| c.expect("complete")).collect()))
}

/// Random complete grid, then cells are blanked in random order until
/// `givens` remain. A blank that would admit a second solution is skipped
/// while other cells are still available; if uniqueness cannot reach the
/// requested count the remaining removals ignore it.
pub fn gen_sudoku<R: Rng + ?Sized>(side: usize, givens: usize, rng: &mut R) -> Result<CspInstance> {
    if side != 4 && side != 9 {
        return Err(Error::Config(format!("sudoku side must be 4 or 9, got {side}")));
    }
    let n = side * side;
    if givens > n {
        return Err(Error::Config(format!("{givens} givens exceed {n} cells")));
    }
    let mut grid = Grid::new(side, &vec![None; n]).expect("empty grid is consistent");
    assert!(grid.fill(rng), "an empty grid always has a completion");
    let solution: Vec<usize> = grid.cells.iter().map(|c| c.expect("complete")).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut cells: Vec<Option<usize>> = solution.iter().map(|&v| Some(v)).collect();
    let mut remaining = n;
    let mut skipped = Vec::new();
    for &i in &order {
        if remaining == givens {
            break;
        }
        cells[i] = None;
        if count_sudoku_solutions(&cells, 2)? == 1 {
            remaining -= 1;
        } else {
            cells[i] = Some(solution[i]);
            skipped.push(i);
        }
    }
    for &i in &skipped {
        if remaining == givens {
            break;
        }
        cells[i] = None;
        remaining -= 1;
    }
    CspInstance::new(ProblemKind::Sudoku, n, side, sudoku_constraints(side), cells)?.with_ground_truth(solution)
}
