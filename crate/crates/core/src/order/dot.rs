//! Graphviz export of order matrices.

use std::fmt::Write;

use super::{DepthMatrix, OcclusionMatrix, FRONT, OVERLAP};

/// One node per instance labelled with its category; solid `i -> j` edges for
/// occlusion, dashed for "in front of", and a single dotted `dir=both` edge
/// per overlap pair.
pub fn to_dot(labels: &[String], occlusion: Option<&OcclusionMatrix>, depth: Option<&DepthMatrix>) -> String {
    let mut s = String::from("digraph order {\n  node [shape=box];\n");
    for (i, l) in labels.iter().enumerate() {
        let _ = writeln!(s, "  {i} [label=\"{i}: {}\"];", l.replace('"', "\\\""));
    }
    if let Some(m) = occlusion {
        for i in 0..m.n() {
            for j in 0..m.n() {
                if m.occludes(i, j) {
                    let _ = writeln!(s, "  {i} -> {j};");
                }
            }
        }
    }
    if let Some(m) = depth {
        for i in 0..m.n() {
            for j in 0..m.n() {
                if i == j {
                    continue;
                }
                if m.get(i, j) == FRONT {
                    let _ = writeln!(s, "  {i} -> {j} [style=dashed];");
                } else if m.get(i, j) == OVERLAP && i < j {
                    let _ = writeln!(s, "  {i} -> {j} [style=dotted, dir=both];");
                }
            }
        }
    }
    s.push_str("}\n");
    s
}
