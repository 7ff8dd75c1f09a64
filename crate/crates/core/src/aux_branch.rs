//! AU co-occurrence graph and the graph-convolution AU predictor whose
//! logits serve as per-sample semantic features.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Tape, Var};

/// Conditional-probability adjacency `A[p][q] = P(AU_p | AU_q)` and its
/// row-stochastic form.
#[derive(Debug, Clone, PartialEq)]
pub struct AuGraph {
    pub adjacency: Matrix,
    pub normalized: Arc<Matrix>,
    /// Per-AU occurrence counts; empty for random graphs.
    pub occurrences: Vec<usize>,
    /// Pairwise co-occurrence counts (M×M); empty for random graphs.
    pub co_occurrences: Vec<Vec<usize>>,
}

impl AuGraph {
    pub fn aus(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn to_csv(&self, normalized: bool) -> String {
        let m = if normalized {
            self.normalized.as_ref()
        } else {
            &self.adjacency
        };
        let mut out = String::new();
        for r in 0..m.rows() {
            let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

/// Scales each row to sum to one; all-zero rows become uniform `1/M`.
pub fn row_normalize(a: &Matrix) -> Matrix {
    let m = a.cols();
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
        } else {
            row.iter_mut().for_each(|v| *v = 1.0 / m as f64);
        }
    }
    out
}

/// Counts AU occurrences and co-occurrences over the given label vectors.
pub fn build_graph<L: AsRef<[bool]>>(au_labels: &[L], aus: usize) -> Result<AuGraph> {
    let mut occ = vec![0usize; aus];
    let mut co = vec![vec![0usize; aus]; aus];
    let mut active = Vec::with_capacity(aus);
    for (i, z) in au_labels.iter().enumerate() {
        let z = z.as_ref();
        if z.len() != aus {
            return Err(Error::shape("build_graph", (i, z.len()), (i, aus)));
        }
        active.clear();
        active.extend((0..aus).filter(|&m| z[m]));
        for &p in &active {
            occ[p] += 1;
            for &q in &active {
                co[p][q] += 1;
            }
        }
    }
    let mut adjacency = Matrix::zeros(aus, aus);
    for p in 0..aus {
        for q in 0..aus {
            if occ[q] > 0 {
                adjacency.set(p, q, co[p][q] as f64 / occ[q] as f64);
            }
        }
    }
    Ok(AuGraph {
        normalized: Arc::new(row_normalize(&adjacency)),
        adjacency,
        occurrences: occ,
        co_occurrences: co,
    })
}

/// Edges drawn uniformly from `[0, 1)` and row-normalized, discarding the
/// co-occurrence structure.
pub fn random_graph<R: Rng>(aus: usize, rng: &mut R) -> AuGraph {
    let data = (0..aus * aus).map(|_| rng.random::<f64>()).collect();
    let adjacency = Matrix::from_vec(aus, aus, data).expect("square");
    AuGraph {
        normalized: Arc::new(row_normalize(&adjacency)),
        adjacency,
        occurrences: Vec::new(),
        co_occurrences: Vec::new(),
    }
}

/// Affine head `D_f -> M·B` producing per-sample AU node features.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w: Var,
    pub b: Var,
}

/// Two graph-convolution weight matrices (`B×G`, `G×G`).
#[derive(Debug, Clone, Copy)]
pub struct GcnVars {
    pub w1: Var,
    pub w2: Var,
}

/// Per-node AU classifier: row `m` of `w` (M×G) and `b[m]` score node `m`.
#[derive(Debug, Clone, Copy)]
pub struct NodeClassifierVars {
    pub w: Var,
    pub b: Var,
}

/// Projects backbone features to node features and reshapes them to
/// `N·M × B` (row `i·M + m` is node `m` of sample `i`).
pub fn au_node_features(tape: &mut Tape, features: Var, head: &HeadVars, aus: usize) -> Result<Var> {
    let x = tape.matmul(features, head.w)?;
    let x = tape.add_row_bias(x, head.b)?;
    let (n, width) = tape.value(x).shape();
    if aus == 0 || width % aus != 0 {
        return Err(Error::shape("au_node_features", (n, width), (aus, 0)));
    }
    tape.reshape(x, n * aus, width / aus)
}

/// Two layers of `leaky(Ā X W)` with independent weights.
pub fn gcn_forward(tape: &mut Tape, x: Var, graph: &AuGraph, gcn: &GcnVars, slope: f64) -> Result<Var> {
    let mut h = x;
    for w in [gcn.w1, gcn.w2] {
        let agg = tape.graph_propagate(h, Arc::clone(&graph.normalized))?;
        let lin = tape.matmul(agg, w)?;
        h = tape.leaky_relu(lin, slope);
    }
    Ok(h)
}

/// AU probabilities `p` and the logits `s` behind them, both N×M.
pub struct AuPrediction {
    pub probabilities: Var,
    pub semantic: Var,
}

pub fn au_predict(tape: &mut Tape, embeddings: Var, cls: &NodeClassifierVars) -> Result<AuPrediction> {
    let semantic = tape.node_linear(embeddings, cls.w, cls.b)?;
    let probabilities = tape.sigmoid(semantic);
    Ok(AuPrediction {
        probabilities,
        semantic,
    })
}

/// Confidence-weighted binary cross-entropy of `sigmoid(semantic)` against
/// the AU targets, averaged over samples. `alphas` are treated as constants.
pub fn au_loss(tape: &mut Tape, semantic: Var, targets: &Matrix, alphas: &[f64]) -> Result<Var> {
    tape.weighted_bce_logits(semantic, targets, alphas)
}

/// N×M 0/1 target matrix from AU bit-vectors.
pub fn au_targets<L: AsRef<[bool]>>(labels: &[L], aus: usize) -> Matrix {
    let mut z = Matrix::zeros(labels.len(), aus);
    for (i, l) in labels.iter().enumerate() {
        for (m, &bit) in l.as_ref().iter().enumerate() {
            if bit {
                z.set(i, m, 1.0);
            }
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, sigmoid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn bits(active: &[usize], m: usize) -> Vec<bool> {
        (0..m).map(|i| active.contains(&i)).collect()
    }

    #[test]
    fn documented_asymmetric_example() {
        // AU1 in samples {1,2}, AU2 in {2,3,4}.
        let labels = vec![bits(&[0], 2), bits(&[0, 1], 2), bits(&[1], 2), bits(&[1], 2)];
        let g = build_graph(&labels, 2).unwrap();
        assert!((g.adjacency.get(0, 1) - 1.0 / 3.0).abs() < 1e-12);
        assert!((g.adjacency.get(1, 0) - 0.5).abs() < 1e-12);
        assert_eq!(g.adjacency.get(0, 0), 1.0);
        assert_eq!(g.adjacency.get(1, 1), 1.0);
    }

    #[test]
    fn all_active_gives_uniform_normalized() {
        let labels = vec![vec![true; 4]; 5];
        let g = build_graph(&labels, 4).unwrap();
        assert!(g.adjacency.data().iter().all(|&v| v == 1.0));
        assert!(g.normalized.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn unseen_au_row_falls_back_to_uniform() {
        let labels = vec![bits(&[0, 1], 3), bits(&[1], 3)];
        let g = build_graph(&labels, 3).unwrap();
        assert_eq!(g.adjacency.row(2), &[0.0, 0.0, 0.0]);
        assert_eq!(g.normalized.row(2), &[1.0 / 3.0; 3]);
        for r in 0..3 {
            assert!((g.normalized.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_graph_is_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_graph(10, &mut rng);
        for r in 0..10 {
            assert!((g.normalized.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_gives_zero_node_features() {
        let mut t = Tape::new();
        let f = t.leaf(Matrix::filled(3, 5, 1.0));
        let head = HeadVars {
            w: t.leaf(Matrix::zeros(5, 4 * 2)),
            b: t.leaf(Matrix::zeros(1, 4 * 2)),
        };
        let x = au_node_features(&mut t, f, &head, 4).unwrap();
        assert_eq!(t.value(x), &Matrix::zeros(12, 2));
    }

    #[test]
    fn node_features_reshape_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fm = random(2, 3, &mut rng);
        let wm = random(3, 6, &mut rng);
        let mut t = Tape::new();
        let f = t.leaf(fm.clone());
        let head = HeadVars {
            w: t.leaf(wm.clone()),
            b: t.leaf(Matrix::zeros(1, 6)),
        };
        let x = au_node_features(&mut t, f, &head, 3).unwrap();
        let flat = fm.matmul(&wm).unwrap();
        assert_eq!(t.value(x).shape(), (6, 2));
        // Node 1 of sample 1 is columns 2..4 of that sample's flat row.
        assert_eq!(t.value(x).row(4), &flat.row(1)[2..4]);
    }

    #[test]
    fn head_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fm = random(3, 4, &mut rng);
        let params = vec![random(4, 5 * 2, &mut rng), random(1, 5 * 2, &mut rng)];
        let r = random(15, 2, &mut rng);
        let report = grad_check(&params, 1e-5, |t, v| {
            let f = t.leaf(fm.clone());
            let x = au_node_features(t, f, &HeadVars { w: v[0], b: v[1] }, 5)?;
            let rv = t.leaf(r.clone());
            let y = t.mul(x, rv)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(report.worst() < 1e-4);
    }

    #[test]
    fn identity_graph_and_weights_propagate_unchanged() {
        let mut t = Tape::new();
        let xm = Matrix::from_rows(&[[1.0, 2.0], [0.5, 0.0], [3.0, 1.0]]);
        let x = t.leaf(xm.clone());
        let graph = AuGraph {
            adjacency: Matrix::identity(3),
            normalized: Arc::new(Matrix::identity(3)),
            occurrences: vec![],
            co_occurrences: vec![],
        };
        let w = t.leaf(Matrix::identity(2));
        let agg = t.graph_propagate(x, Arc::clone(&graph.normalized)).unwrap();
        let lin = t.matmul(agg, w).unwrap();
        let out = t.leaky_relu(lin, 0.01);
        assert_eq!(t.value(out), &xm);
    }

    #[test]
    fn uniform_graph_averages_nodes() {
        let mut t = Tape::new();
        let xm = Matrix::from_rows(&[[1.0, 2.0], [3.0, -4.0]]);
        let x = t.leaf(xm);
        let agg = t
            .graph_propagate(x, Arc::new(Matrix::filled(2, 2, 0.5)))
            .unwrap();
        assert_eq!(t.value(agg).row(0), &[2.0, -1.0]);
        assert_eq!(t.value(agg).row(1), &[2.0, -1.0]);
    }

    #[test]
    fn gcn_weight_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let labels: Vec<Vec<bool>> = (0..20)
            .map(|_| (0..4).map(|_| rng.random_bool(0.5)).collect())
            .collect();
        let graph = build_graph(&labels, 4).unwrap();
        let xm = random(2 * 4, 3, &mut rng);
        let params = vec![random(3, 5, &mut rng), random(5, 5, &mut rng)];
        let report = grad_check(&params, 1e-5, |t, v| {
            let x = t.leaf(xm.clone());
            let h = gcn_forward(t, x, &graph, &GcnVars { w1: v[0], w2: v[1] }, 0.01)?;
            let sq = t.mul(h, h)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(report.worst() < 1e-4, "{:?}", report.max_rel_error);
    }

    #[test]
    fn zero_classifier_predicts_half() {
        let mut t = Tape::new();
        let h = t.leaf(Matrix::filled(6, 4, 1.0));
        let cls = NodeClassifierVars {
            w: t.leaf(Matrix::zeros(3, 4)),
            b: t.leaf(Matrix::zeros(1, 3)),
        };
        let pred = au_predict(&mut t, h, &cls).unwrap();
        assert!(t.value(pred.probabilities).data().iter().all(|&p| p == 0.5));
        assert!(t.value(pred.semantic).data().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn probabilities_are_sigmoid_of_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new();
        let h = t.leaf(random(8, 5, &mut rng));
        let cls = NodeClassifierVars {
            w: t.leaf(random(4, 5, &mut rng)),
            b: t.leaf(random(1, 4, &mut rng)),
        };
        let pred = au_predict(&mut t, h, &cls).unwrap();
        let (p, s) = (t.value(pred.probabilities), t.value(pred.semantic));
        assert_eq!(p.shape(), (2, 4));
        for (&pv, &sv) in p.data().iter().zip(s.data()) {
            assert_eq!(pv, sigmoid(sv));
            assert!(pv > 0.0 && pv < 1.0);
        }
    }

    #[test]
    fn au_loss_near_zero_for_confident_predictions() {
        let mut t = Tape::new();
        let z = Matrix::from_rows(&[[1.0, 0.0, 1.0]]);
        let s = t.leaf(z.map(|v| if v == 1.0 { 40.0 } else { -40.0 }));
        let l = au_loss(&mut t, s, &z, &[0.9]).unwrap();
        assert!(t.value(l).item() < 1e-10);
    }

    #[test]
    fn au_loss_matches_per_sample_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let sm = Matrix::from_vec(4, 5, (0..20).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let pm = sm.map(sigmoid);
        let zm = Matrix::from_vec(4, 5, (0..20).map(|_| rng.random_range(0..2) as f64).collect()).unwrap();
        let alphas: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..0.9)).collect();
        let mut t = Tape::new();
        let s = t.leaf(sm);
        let l = au_loss(&mut t, s, &zm, &alphas).unwrap();
        let mut expected = 0.0;
        for i in 0..4 {
            let mut per = 0.0;
            for m in 0..5 {
                let (pv, zv) = (pm.get(i, m), zm.get(i, m));
                per -= alphas[i] * (zv * pv.ln() + (1.0 - zv) * (1.0 - pv).ln());
            }
            expected += per / 4.0;
        }
        assert!((t.value(l).item() - expected).abs() < 1e-12);
    }
}
