//! Mini-batch neighbor graph, sharpening, and the graph-structured penalty
//!
//! ```text
//! R = λ_LU Σ_{u∈U, v∈L} A_uv ‖p̂_u − y_v‖² + λ_UU Σ_{u,v∈U} A_uv ‖p̂_u − p̂_v‖²
//! ```
//!
//! with `A_ij = max(0, cos(z_i, z_j) − τ_c)` and `p̂` the sharpened
//! prediction.

use serde::{Deserialize, Serialize};

use crate::numnet::{dot, Matrix, Tape, Var, LOG_FLOOR};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum NodeRole {
    /// Node from the labeled set, with its (one-hot or soft) label.
    Labeled(Vec<f64>),
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    pub adjacency: Matrix,
    pub tau_c: f64,
    pub roles: Vec<NodeRole>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.rows() == 0
    }

    pub fn with_roles(mut self, roles: Vec<NodeRole>) -> Result<Self> {
        if roles.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} roles for a graph of {} nodes",
                roles.len(),
                self.len()
            )));
        }
        self.roles = roles;
        Ok(self)
    }
}

/// All-pairs adjacency `A_ij = ReLU(cos(Z_i, Z_j) − τ_c)`, diagonal included.
pub fn build_neighbor_graph(z: &Matrix, tau_c: f64) -> Result<NeighborGraph> {
    adjacency(z, tau_c, false)
}

/// Like [`build_neighbor_graph`], but a zero-norm row becomes an isolated
/// node instead of an error. Post-ReLU representations can be exactly zero.
pub fn build_neighbor_graph_isolating_zeros(z: &Matrix, tau_c: f64) -> Result<NeighborGraph> {
    adjacency(z, tau_c, true)
}

fn adjacency(z: &Matrix, tau_c: f64, isolate_zeros: bool) -> Result<NeighborGraph> {
    if !(0.0..1.0).contains(&tau_c) {
        return Err(Error::InvalidConfig(format!(
            "tau_c {tau_c} outside [0, 1)"
        )));
    }
    let n = z.rows();
    let norms: Vec<f64> = z.row_iter().map(|r| dot(r, r).sqrt()).collect();
    if !isolate_zeros {
        if let Some(i) = norms.iter().position(|&v| v == 0.0) {
            return Err(Error::Degenerate(format!(
                "row {i} of the representation has zero norm"
            )));
        }
    }
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        if norms[i] == 0.0 {
            continue;
        }
        for j in i..n {
            if norms[j] == 0.0 {
                continue;
            }
            let cos = (dot(z.row(i), z.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            let w = (cos - tau_c).max(0.0);
            a.set(i, j, w);
            a.set(j, i, w);
        }
    }
    Ok(NeighborGraph {
        adjacency: a,
        tau_c,
        roles: vec![NodeRole::Unlabeled; n],
    })
}

/// `p^{1/T} / Σ p^{1/T}` after flooring entries at 1e-12.
pub fn sharpen(p: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "temperature {temperature} must be > 0"
        )));
    }
    if p.is_empty() {
        return Err(Error::Empty("sharpen of an empty vector".into()));
    }
    let mut out: Vec<f64> = p
        .iter()
        .map(|&v| v.max(LOG_FLOOR).ln() / temperature)
        .collect();
    crate::numnet::softmax_in_place(&mut out);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegWeights {
    pub lambda_lu: f64,
    pub lambda_uu: f64,
    /// Count each unordered U–U pair once instead of twice.
    pub unordered_uu: bool,
}

impl Default for RegWeights {
    fn default() -> Self {
        Self {
            lambda_lu: 0.01,
            lambda_uu: 0.005,
            unordered_uu: false,
        }
    }
}

/// Value of `R` and its gradient with respect to the per-node sharpened
/// predictions `p_hat` (rows of labeled nodes are ignored).
pub fn graph_regularizer(
    graph: &NeighborGraph,
    p_hat: &Matrix,
    weights: RegWeights,
) -> Result<(f64, Matrix)> {
    let n = graph.len();
    if graph.roles.len() != n || p_hat.rows() != n {
        return Err(Error::Shape(format!(
            "graph of {n} nodes, {} roles, {} predictions",
            graph.roles.len(),
            p_hat.rows()
        )));
    }
    if weights.lambda_lu < 0.0 || weights.lambda_uu < 0.0 {
        return Err(Error::InvalidConfig("graph weights must be ≥ 0".into()));
    }
    let c = p_hat.cols();
    for (i, role) in graph.roles.iter().enumerate() {
        if let NodeRole::Labeled(y) = role {
            if y.len() != c {
                return Err(Error::Shape(format!(
                    "labeled node {i} has a {}-class label, predictions have {c}",
                    y.len()
                )));
            }
        }
    }
    let uu_scale = if weights.unordered_uu { 0.5 } else { 1.0 };
    let a = &graph.adjacency;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, c);
    for u in 0..n {
        if graph.roles[u] != NodeRole::Unlabeled {
            continue;
        }
        let pu = p_hat.row(u);
        let mut gu = vec![0.0; c];
        for v in 0..n {
            let w = a.get(u, v);
            if w == 0.0 || u == v {
                continue;
            }
            match &graph.roles[v] {
                NodeRole::Labeled(y) => {
                    let coef = weights.lambda_lu * w;
                    for k in 0..c {
                        let d = pu[k] - y[k];
                        value += coef * d * d;
                        gu[k] += 2.0 * coef * d;
                    }
                }
                NodeRole::Unlabeled => {
                    let pv = p_hat.row(v);
                    let coef = uu_scale * weights.lambda_uu * w;
                    for k in 0..c {
                        let d = pu[k] - pv[k];
                        value += coef * d * d;
                        // (u, v) and (v, u) both contribute to ∂/∂p̂_u.
                        gu[k] += 4.0 * coef * d;
                    }
                }
            }
        }
        grad.row_mut(u).copy_from_slice(&gu);
    }
    Ok((value, grad))
}

/// Records `R` on the tape as a function of the logits, with
/// `p̂ = softmax(F / T)` (the sharpened softmax).
pub fn tape_graph_regularizer(
    tape: &mut Tape,
    logits: Var,
    graph: &NeighborGraph,
    temperature: f64,
    weights: RegWeights,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature {temperature} must be > 0"
        )));
    }
    let scaled = tape.scale(logits, 1.0 / temperature);
    let p_hat = tape.softmax(scaled);
    let (value, local) = graph_regularizer(graph, tape.value(p_hat), weights)?;
    tape.custom_scalar(p_hat, value, local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numnet::{argmax, softmax};
    use crate::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn adjacency_examples() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let g = build_neighbor_graph(&z, 0.5).unwrap();
        assert!((g.adjacency.get(0, 1) - 0.5).abs() < 1e-15);
        assert_eq!(g.adjacency.get(0, 2), 0.0);
        assert!((g.adjacency.get(2, 2) - 0.5).abs() < 1e-15);

        // cos = 0.8 between (1, 0) and (0.8, 0.6).
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.8, 0.6]]).unwrap();
        let g = build_neighbor_graph(&z, 0.5).unwrap();
        assert!((g.adjacency.get(0, 1) - 0.3).abs() < 1e-12);

        let zero = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(build_neighbor_graph(&zero, 0.5).is_err());
        let g = build_neighbor_graph_isolating_zeros(&zero, 0.5).unwrap();
        assert_eq!(g.adjacency.data(), &[0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sharpen_examples() {
        let p = [0.2, 0.3, 0.5];
        let same = sharpen(&p, 1.0).unwrap();
        for (a, b) in same.iter().zip(p) {
            assert!((a - b).abs() < 1e-15);
        }
        let uniform = sharpen(&[0.25; 4], 0.3).unwrap();
        assert!(uniform.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = sharpen(&[0.8, 0.2], 0.5).unwrap();
        assert!((s[0] - 0.64 / 0.68).abs() < 1e-12 && (s[1] - 0.04 / 0.68).abs() < 1e-12);
        assert!((s[0] - 0.9412).abs() < 1e-4);
        let with_zero = sharpen(&[1.0, 0.0], 0.5).unwrap();
        assert!(with_zero.iter().all(|v| v.is_finite()));
        assert!(sharpen(&p, 0.0).is_err());
    }

    fn roles_lu(n_l: usize, n_u: usize, label: &[f64]) -> Vec<NodeRole> {
        (0..n_l)
            .map(|_| NodeRole::Labeled(label.to_vec()))
            .chain((0..n_u).map(|_| NodeRole::Unlabeled))
            .collect()
    }

    #[test]
    fn regularizer_examples() {
        let w = RegWeights::default();
        assert_eq!((w.lambda_lu, w.lambda_uu), (0.01, 0.005));

        let empty = NeighborGraph {
            adjacency: Matrix::zeros(3, 3),
            tau_c: 0.5,
            roles: roles_lu(1, 2, &[1.0, 0.0]),
        };
        let p = Matrix::from_rows(&[vec![0.3, 0.7], vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        assert_eq!(graph_regularizer(&empty, &p, w).unwrap().0, 0.0);

        let mut a = Matrix::zeros(2, 2);
        a.set(0, 1, 0.3);
        a.set(1, 0, 0.3);
        let one_edge = NeighborGraph {
            adjacency: a,
            tau_c: 0.5,
            roles: vec![NodeRole::Labeled(vec![0.0, 1.0]), NodeRole::Unlabeled],
        };
        let p = Matrix::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        let (r, _) = graph_regularizer(&one_edge, &p, w).unwrap();
        assert!((r - 0.006).abs() < 1e-15);

        let agree = NeighborGraph {
            adjacency: Matrix::filled(4, 4, 0.5),
            tau_c: 0.5,
            roles: roles_lu(2, 2, &[0.0, 1.0]),
        };
        let p = Matrix::from_rows(&vec![vec![0.0, 1.0]; 4]).unwrap();
        assert_eq!(graph_regularizer(&agree, &p, w).unwrap().0, 0.0);

        let bad = NeighborGraph {
            roles: roles_lu(2, 2, &[1.0, 0.0, 0.0]),
            ..agree
        };
        assert!(graph_regularizer(&bad, &p, w).is_err());
    }

    #[test]
    fn unordered_convention_halves_uu_term() {
        let z = Matrix::from_rows(&[vec![1.0, 0.1], vec![1.0, 0.2], vec![0.9, 0.3]]).unwrap();
        let g = build_neighbor_graph(&z, 0.0).unwrap();
        let p = Matrix::from_rows(&[vec![0.1, 0.9], vec![0.6, 0.4], vec![0.5, 0.5]]).unwrap();
        let ordered = graph_regularizer(&g, &p, RegWeights::default()).unwrap().0;
        let unordered = RegWeights {
            unordered_uu: true,
            ..Default::default()
        };
        let half = graph_regularizer(&g, &p, unordered).unwrap().0;
        assert!((ordered - 2.0 * half).abs() < 1e-15 && ordered > 0.0);
    }

    #[test]
    fn regularizer_gradient_through_logits_matches_finite_differences() {
        let mut rng = seeded_rng(3);
        let n = 6;
        let c = 3;
        let z = Matrix::new(
            n,
            4,
            (0..n * 4).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let roles = vec![
            NodeRole::Labeled(vec![1.0, 0.0, 0.0]),
            NodeRole::Unlabeled,
            NodeRole::Labeled(vec![0.0, 0.0, 1.0]),
            NodeRole::Unlabeled,
            NodeRole::Unlabeled,
            NodeRole::Unlabeled,
        ];
        let g = build_neighbor_graph(&z, 0.5)
            .unwrap()
            .with_roles(roles)
            .unwrap();
        let logits = Matrix::new(
            n,
            c,
            (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let weights = RegWeights {
            lambda_lu: 0.7,
            lambda_uu: 0.4,
            unordered_uu: false,
        };
        let t = 0.5;
        let eval = |f: &Matrix| {
            let p: Vec<Vec<f64>> = f
                .row_iter()
                .map(|r| sharpen(&softmax(r).unwrap(), t).unwrap())
                .collect();
            graph_regularizer(&g, &Matrix::from_rows(&p).unwrap(), weights)
                .unwrap()
                .0
        };
        let mut tape = Tape::new();
        let x = tape.leaf(logits.clone());
        let r = tape_graph_regularizer(&mut tape, x, &g, t, weights).unwrap();
        assert!((tape.scalar(r) - eval(&logits)).abs() < 1e-12);
        let grad = tape.backward(r).unwrap().get(x, &tape);
        let mut worst: f64 = 0.0;
        for i in 0..logits.data().len() {
            let h = 1e-5;
            let mut up = logits.clone();
            let mut dn = logits.clone();
            up.data_mut()[i] += h;
            dn.data_mut()[i] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            let an = grad.data()[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-7));
        }
        assert!(worst < 1e-5, "{worst}");
    }

    proptest! {
        #[test]
        fn graph_is_symmetric_bounded_and_scale_invariant(
            rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 2..10),
            tau in 0.0f64..0.95,
            scale in 0.1f64..10.0,
        ) {
            let z = Matrix::from_rows(&rows).unwrap();
            let g = build_neighbor_graph(&z, tau).unwrap();
            let a = &g.adjacency;
            for i in 0..a.rows() {
                for j in 0..a.rows() {
                    prop_assert_eq!(a.get(i, j).to_bits(), a.get(j, i).to_bits());
                    prop_assert!(a.get(i, j) >= 0.0 && a.get(i, j) <= 1.0 - tau + 1e-15);
                }
            }
            let mut scaled = z.clone();
            for v in scaled.row_mut(0) { *v *= scale; }
            let g2 = build_neighbor_graph(&scaled, tau).unwrap();
            for (x, y) in g.adjacency.data().iter().zip(g2.adjacency.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn sharpen_preserves_argmax_and_composes(
            raw in prop::collection::vec(0.001f64..1.0, 2..8),
            t in 0.1f64..3.0,
        ) {
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let q = sharpen(&p, t).unwrap();
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert_eq!(argmax(&q), argmax(&p));
            let twice = sharpen(&q, t).unwrap();
            let direct = sharpen(&p, t * t).unwrap();
            for (a, b) in twice.iter().zip(&direct) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
