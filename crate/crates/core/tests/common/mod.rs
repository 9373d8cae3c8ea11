use std::f64::consts::PI;
use std::sync::Arc;

use concavlab::fields::{Grid, ScalarField};
use concavlab::geometry::ConvexDomain;
use minilp::{ComparisonOp, OptimizationDirection, Problem};

/// Per node, the smallest value at that node among affine functions
/// dominating `f` at every node.
pub fn lp_envelope(f: &ScalarField) -> Vec<f64> {
    let g = f.grid();
    let nodes = g.interior_nodes();
    nodes
        .iter()
        .map(|&k| {
            let p = g.node_point(k);
            let mut pb = Problem::new(OptimizationDirection::Minimize);
            let free = (f64::NEG_INFINITY, f64::INFINITY);
            let c0 = pb.add_var(1.0, free);
            let c1 = pb.add_var(p[0], free);
            let c2 = pb.add_var(p[1], free);
            for &j in nodes {
                let q = g.node_point(j);
                pb.add_constraint(&[(c0, 1.0), (c1, q[0]), (c2, q[1])], ComparisonOp::Ge, f.values()[j]);
            }
            pb.solve().expect("bounded LP").objective()
        })
        .collect()
}

/// Largest node-wise gap between an envelope field and the LP oracle.
pub fn lp_gap(f: &ScalarField, envelope: &ScalarField) -> f64 {
    f.grid()
        .interior_nodes()
        .iter()
        .zip(lp_envelope(f))
        .map(|(&k, v)| (envelope.values()[k] - v).abs())
        .fold(0.0, f64::max)
}

/// `sin x sin y` on the square of side pi with `cells` cells per side.
pub fn sin_sin(cells: usize) -> ScalarField {
    let sq = ConvexDomain::square([0.0, 0.0], PI).unwrap();
    let g = Arc::new(Grid::with_cells(&sq, cells).unwrap());
    ScalarField::from_fn(g, 0.0, |p| p[0].sin() * p[1].sin()).unwrap()
}
