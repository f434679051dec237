//! Instance file formats: Sudoku lines, DIMACS `.col` and GSET.

mod generate;

pub use generate::{count_sudoku_solutions, gen_random_graph, gen_sudoku, solve_sudoku};

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::csp::{Constraint, CspInstance, ProblemKind};
use crate::error::{Error, Result};

/// Undirected simple graph with `0..n` vertices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    pub n: usize,
    /// Sorted, deduplicated, `u < v`.
    pub edges: Vec<(usize, usize)>,
}

impl Graph {
    /// Normalizes edge orientation and drops duplicates.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Structural(format!("edge ({u}, {v}) out of range for {n} vertices")));
            }
            if u == v {
                return Err(Error::Structural(format!("self-loop on vertex {u}")));
            }
            set.insert((u.min(v), u.max(v)));
        }
        Ok(Graph { n, edges: set.into_iter().collect() })
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Recovers the graph of a coloring or max-cut instance.
    pub fn from_instance(instance: &CspInstance) -> Result<Self> {
        if !instance.kind.is_graph() {
            return Err(Error::Unsupported(format!("{} instance has no graph", instance.kind.as_str())));
        }
        Graph::new(instance.n(), instance.constraints().iter().map(|c| (c.scope[0], c.scope[1])))
    }
}

/// One `NotEqual` per edge, no givens. `k` is the color count, and must be 2
/// for max-cut.
pub fn build_instance(graph: &Graph, kind: ProblemKind, k: usize) -> Result<CspInstance> {
    match kind {
        ProblemKind::Sudoku => return Err(Error::Unsupported("sudoku is not built from a graph".into())),
        ProblemKind::GraphColoring if k < 2 => return Err(Error::Config(format!("need k >= 2 colors, got {k}"))),
        ProblemKind::MaxCut if k != 2 => return Err(Error::Config(format!("max-cut needs k = 2, got {k}"))),
        _ => {}
    }
    let cs = graph.edges.iter().map(|&(u, v)| Constraint::not_equal(u, v)).collect();
    CspInstance::new(kind, graph.n, k, cs, vec![None; graph.n])
}

fn sudoku_geometry(cells: usize) -> Option<(usize, usize)> {
    match cells {
        16 => Some((4, 2)),
        81 => Some((9, 3)),
        _ => None,
    }
}

/// Row, column and box `AllDifferent` constraints, in that order.
pub fn sudoku_constraints(side: usize) -> Vec<Constraint> {
    let b = (side as f64).sqrt() as usize;
    let mut cs = Vec::with_capacity(3 * side);
    for r in 0..side {
        cs.push(Constraint::all_different((0..side).map(|c| r * side + c).collect()));
    }
    for c in 0..side {
        cs.push(Constraint::all_different((0..side).map(|r| r * side + c).collect()));
    }
    for br in 0..b {
        for bc in 0..b {
            let scope = (0..side)
                .map(|t| (br * b + t / b) * side + bc * b + t % b)
                .collect();
            cs.push(Constraint::all_different(scope));
        }
    }
    cs
}

fn parse_grid(field: &str, line_no: usize, what: &str) -> Result<Vec<Option<usize>>> {
    let chars: Vec<char> = field.chars().collect();
    let Some((side, _)) = sudoku_geometry(chars.len()) else {
        return Err(Error::parse(
            format!("line {line_no}"),
            format!("{what} has {} cells, expected 16 or 81", chars.len()),
        ));
    };
    chars
        .iter()
        .enumerate()
        .map(|(pos, &ch)| match ch {
            '0' | '.' => Ok(None),
            '1'..='9' => {
                let digit = ch as usize - '0' as usize;
                if digit > side {
                    Err(Error::parse(
                        format!("line {line_no}, column {}", pos + 1),
                        format!("digit {digit} too large for a {side}x{side} grid"),
                    ))
                } else {
                    Ok(Some(digit - 1))
                }
            }
            _ => Err(Error::parse(
                format!("line {line_no}, column {}", pos + 1),
                format!("unexpected character {ch:?} in {what}"),
            )),
        })
        .collect()
}

fn unit_name(index: usize, side: usize) -> String {
    match index / side {
        0 => format!("row {}", index % side + 1),
        1 => format!("column {}", index % side + 1),
        _ => format!("box {}", index % side + 1),
    }
}

/// Parses a line `GRID [SOLUTION]` where the fields are separated by
/// whitespace or a comma. Digits are 1-based; `0` and `.` are blanks.
pub fn parse_sudoku(line: &str) -> Result<CspInstance> {
    parse_sudoku_at(line, 1)
}

pub(crate) fn parse_sudoku_at(line: &str, line_no: usize) -> Result<CspInstance> {
    let fields: Vec<&str> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|f| !f.is_empty())
        .collect();
    if fields.is_empty() || fields.len() > 2 {
        return Err(Error::parse(format!("line {line_no}"), "expected a grid and an optional solution"));
    }
    let givens = parse_grid(fields[0], line_no, "grid")?;
    let (side, _) = sudoku_geometry(givens.len()).expect("checked by parse_grid");
    let constraints = sudoku_constraints(side);
    for (k, c) in constraints.iter().enumerate() {
        let mut seen = [false; 10];
        for &i in &c.scope {
            if let Some(v) = givens[i] {
                if seen[v] {
                    return Err(Error::parse(
                        format!("line {line_no}, {}", unit_name(k, side)),
                        format!("digit {} given twice in {}", v + 1, unit_name(k, side)),
                    ));
                }
                seen[v] = true;
            }
        }
    }
    let inst = CspInstance::new(ProblemKind::Sudoku, side * side, side, constraints, givens)?;
    let Some(sol) = fields.get(1) else { return Ok(inst) };
    let sol = parse_grid(sol, line_no, "solution")?;
    if sol.len() != inst.n() {
        return Err(Error::parse(format!("line {line_no}"), "solution size differs from the grid"));
    }
    let sol: Vec<usize> = sol
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| Error::parse(format!("line {line_no}, column {}", i + 1), "blank in solution")))
        .collect::<Result<_>>()?;
    inst.with_ground_truth(sol)
        .map_err(|e| Error::parse(format!("line {line_no}"), format!("invalid solution: {e}")))
}

/// Parses one instance per non-empty line, `#` starts a comment line.
pub fn parse_sudoku_file(text: &str) -> Result<Vec<CspInstance>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| parse_sudoku_at(l.trim(), i + 1))
        .collect()
}

fn grid_string(values: impl Iterator<Item = Option<usize>>) -> String {
    values
        .map(|v| match v {
            Some(v) => char::from(b'1' + v as u8),
            None => '.',
        })
        .collect()
}

pub fn serialize_sudoku(instance: &CspInstance) -> Result<String> {
    if instance.kind != ProblemKind::Sudoku {
        return Err(Error::Unsupported(format!("cannot write {} as sudoku", instance.kind.as_str())));
    }
    let mut line = grid_string(instance.givens().iter().copied());
    if let Some(sol) = instance.ground_truth() {
        line.push(' ');
        line.push_str(&grid_string(sol.iter().map(|&v| Some(v))));
    }
    Ok(line)
}

fn parse_index(tok: Option<&str>, n: usize, loc: &str) -> Result<usize> {
    let tok = tok.ok_or_else(|| Error::parse(loc, "missing vertex index"))?;
    let v: usize = tok
        .parse()
        .map_err(|_| Error::parse(loc, format!("bad vertex index {tok:?}")))?;
    if v == 0 || v > n {
        return Err(Error::parse(loc, format!("vertex {v} out of range 1..={n}")));
    }
    Ok(v - 1)
}

fn push_edge(edges: &mut BTreeSet<(usize, usize)>, u: usize, v: usize, loc: &str) -> Result<()> {
    if u == v {
        return Err(Error::parse(loc, format!("self-loop on vertex {}", u + 1)));
    }
    edges.insert((u.min(v), u.max(v)));
    Ok(())
}

/// DIMACS `.col`: `c` comments, one `p edge N M` header, `e U V` lines.
pub fn parse_dimacs_col(text: &str) -> Result<Graph> {
    let mut n = None;
    let mut edges = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let loc = format!("line {}", i + 1);
        let mut toks = line.split_whitespace();
        match toks.next() {
            None | Some("c") => {}
            Some("p") => {
                if n.is_some() {
                    return Err(Error::parse(loc, "second problem line"));
                }
                if !matches!(toks.next(), Some("edge" | "col")) {
                    return Err(Error::parse(loc, "expected `p edge N M`"));
                }
                let count = toks
                    .next()
                    .and_then(|t| t.parse::<usize>().ok())
                    .ok_or_else(|| Error::parse(&loc, "bad vertex count"))?;
                toks.next()
                    .and_then(|t| t.parse::<usize>().ok())
                    .ok_or_else(|| Error::parse(&loc, "bad edge count"))?;
                n = Some(count);
            }
            Some("e") => {
                let nv = n.ok_or_else(|| Error::parse(&loc, "edge before problem line"))?;
                let u = parse_index(toks.next(), nv, &loc)?;
                let v = parse_index(toks.next(), nv, &loc)?;
                if toks.next().is_some() {
                    return Err(Error::parse(loc, "trailing tokens on edge line"));
                }
                push_edge(&mut edges, u, v, &loc)?;
            }
            Some(other) => return Err(Error::parse(loc, format!("unknown line type {other:?}"))),
        }
    }
    let n = n.ok_or_else(|| Error::parse("end of input", "missing `p edge` line"))?;
    Ok(Graph { n, edges: edges.into_iter().collect() })
}

pub fn serialize_dimacs_col(graph: &Graph) -> String {
    let mut out = format!("p edge {} {}\n", graph.n, graph.edge_count());
    for &(u, v) in &graph.edges {
        let _ = writeln!(out, "e {} {}", u + 1, v + 1);
    }
    out
}

/// GSET: header `N M`, then `U V W` lines. Only unit weights are accepted.
pub fn parse_gset(text: &str) -> Result<Graph> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (h, header) = lines.next().ok_or_else(|| Error::parse("line 1", "empty input"))?;
    let nums: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(format!("line {}", h + 1), "header must be `N M`"))?;
    let [n, _m] = nums[..] else {
        return Err(Error::parse(format!("line {}", h + 1), "header must be `N M`"));
    };
    let mut edges = BTreeSet::new();
    for (i, line) in lines {
        let loc = format!("line {}", i + 1);
        let mut toks = line.split_whitespace();
        let u = parse_index(toks.next(), n, &loc)?;
        let v = parse_index(toks.next(), n, &loc)?;
        let w = toks.next().ok_or_else(|| Error::parse(&loc, "missing weight"))?;
        let w: i64 = w.parse().map_err(|_| Error::parse(&loc, format!("bad weight {w:?}")))?;
        if toks.next().is_some() {
            return Err(Error::parse(loc, "trailing tokens on edge line"));
        }
        if w != 1 {
            return Err(Error::Unsupported(format!("{loc}: edge weight {w}, only unit weights are supported")));
        }
        push_edge(&mut edges, u, v, &loc)?;
    }
    Ok(Graph { n, edges: edges.into_iter().collect() })
}

pub fn serialize_gset(graph: &Graph) -> String {
    let mut out = format!("{} {}\n", graph.n, graph.edge_count());
    for &(u, v) in &graph.edges {
        let _ = writeln!(out, "{} {} 1", u + 1, v + 1);
    }
    out
}

/// Best-known cut table: one `name best_cut` pair per line.
pub fn parse_references(text: &str) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let loc = format!("line {}", i + 1);
        let mut toks = line.split_whitespace();
        let (Some(name), Some(cut), None) = (toks.next(), toks.next(), toks.next()) else {
            return Err(Error::parse(loc, "expected `name best_cut`"));
        };
        let cut = cut
            .parse()
            .map_err(|_| Error::parse(&loc, format!("bad cut value {cut:?}")))?;
        out.push((name.to_string(), cut));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csp::{eval_hard, Assignment};

    const SOLVED9: &str =
        "534678912672195348198342567859761423426853791713924856961537284287419635345286179";

    #[test]
    fn blank_grid_structure() {
        let inst = parse_sudoku(&".".repeat(81)).unwrap();
        assert_eq!(inst.n(), 81);
        assert_eq!(inst.constraints().len(), 27);
        assert_eq!(inst.free_count(), 81);
    }

    #[test]
    fn solved_grid_is_feasible() {
        let inst = parse_sudoku(SOLVED9).unwrap();
        let x: Vec<usize> = inst.givens().iter().map(|g| g.unwrap()).collect();
        let x = Assignment::new(&inst, x).unwrap();
        assert_eq!(eval_hard(&inst, &x).unwrap().0, 0);
    }

    #[test]
    fn duplicate_in_row_names_the_row() {
        let mut line = ".".repeat(81);
        line.replace_range(18..19, "5");
        line.replace_range(25..26, "5");
        match parse_sudoku(&line) {
            Err(Error::Parse { location, .. }) => assert!(location.contains("row 3"), "{location}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_length_and_character() {
        assert!(matches!(parse_sudoku("123"), Err(Error::Parse { .. })));
        let mut line = ".".repeat(16);
        line.replace_range(3..4, "x");
        assert!(matches!(parse_sudoku(&line), Err(Error::Parse { .. })));
        let mut line = ".".repeat(16);
        line.replace_range(3..4, "5");
        assert!(matches!(parse_sudoku(&line), Err(Error::Parse { .. })));
    }

    #[test]
    fn sudoku_round_trip_with_solution() {
        let line = "1..4..1.......2. 1234341221434321";
        let inst = parse_sudoku(line).unwrap();
        assert_eq!(inst.ground_truth().unwrap()[1], 1);
        let again = parse_sudoku(&serialize_sudoku(&inst).unwrap()).unwrap();
        assert_eq!(again, inst);
    }

    #[test]
    fn bad_solution_is_rejected() {
        assert!(parse_sudoku("1............... 1234123412341234").is_err());
    }

    #[test]
    fn dimacs_triangle() {
        let g = parse_dimacs_col("c triangle\np edge 3 3\ne 1 2\ne 2 3\ne 1 3\n").unwrap();
        assert_eq!(g.n, 3);
        assert_eq!(g.edges, vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(parse_dimacs_col(&serialize_dimacs_col(&g)).unwrap(), g);
    }

    #[test]
    fn duplicate_edges_collapse() {
        let g = parse_dimacs_col("p edge 3 3\ne 1 2\ne 2 1\ne 1 2\n").unwrap();
        assert_eq!(g.edge_count(), 1);
        let g = parse_gset("3 2\n1 2 1\n2 1 1\n").unwrap();
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn dimacs_faults() {
        assert!(matches!(parse_dimacs_col("p edge 3 1\ne 1 4\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse_dimacs_col("p edge 3 1\ne 2 2\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse_dimacs_col("e 1 2\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse_dimacs_col("p edge 3 1\nx\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn gset_header_and_weights() {
        let mut text = String::from("800 19176\n");
        text.push_str("1 2 1\n799 800 1\n");
        let g = parse_gset(&text).unwrap();
        assert_eq!(g.n, 800);
        assert_eq!(parse_gset(&serialize_gset(&g)).unwrap(), g);
        assert!(matches!(parse_gset("3 1\n1 2 -1\n"), Err(Error::Unsupported(_))));
        assert!(matches!(parse_gset("3 1\n1 1 1\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse_gset("3\n1 2 1\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn build_from_graph() {
        let tri = Graph::new(3, [(0, 1), (1, 2), (0, 2)]).unwrap();
        let inst = build_instance(&tri, ProblemKind::GraphColoring, 3).unwrap();
        let x = Assignment::new(&inst, vec![0, 1, 2]).unwrap();
        assert_eq!(eval_hard(&inst, &x).unwrap().0, 0);
        let two = build_instance(&tri, ProblemKind::GraphColoring, 2).unwrap();
        for bits in 0..8usize {
            let x = Assignment::new(&two, (0..3).map(|i| (bits >> i) & 1).collect()).unwrap();
            assert!(eval_hard(&two, &x).unwrap().0 >= 1);
        }
        assert!(build_instance(&tri, ProblemKind::MaxCut, 3).is_err());
        assert_eq!(Graph::from_instance(&inst).unwrap(), tri);
    }

    #[test]
    fn path_max_cut_is_two() {
        let path = Graph::new(3, [(0, 1), (1, 2)]).unwrap();
        let inst = build_instance(&path, ProblemKind::MaxCut, 2).unwrap();
        let best = (0..8usize)
            .map(|bits| {
                let x = Assignment::new(&inst, (0..3).map(|i| (bits >> i) & 1).collect()).unwrap();
                crate::csp::cut_size(&inst, &x)
            })
            .max()
            .unwrap();
        assert_eq!(best, 2);
        let alt = Assignment::new(&inst, vec![0, 1, 0]).unwrap();
        assert_eq!(crate::csp::cut_size(&inst, &alt), 2);
    }

    #[test]
    fn references_parse() {
        let refs = parse_references("# best cuts\nG1 11624\ng2  5\n").unwrap();
        assert_eq!(refs, vec![("G1".into(), 11624), ("g2".into(), 5)]);
        assert!(parse_references("G1\n").is_err());
    }
}
