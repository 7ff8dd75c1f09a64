use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::aux_branch::{GcnVars, HeadVars, NodeClassifierVars};
use crate::numcore::{Matrix, Tape, Var};
use crate::target_branch::BackboneVars;

/// Which learning-rate schedule a parameter follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Target,
    Aux,
}

/// All learnable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    /// Confidence projection, D_f×1.
    pub w_a: Matrix,
    /// Expression classifier, D_f×C.
    pub classifier: Matrix,
    pub head_w: Matrix,
    pub head_b: Matrix,
    pub gcn_w1: Matrix,
    pub gcn_w2: Matrix,
    pub node_w: Matrix,
    pub node_b: Matrix,
}

pub const PARAM_NAMES: [&str; 12] = [
    "backbone.w1",
    "backbone.b1",
    "backbone.w2",
    "backbone.b2",
    "confidence.w_a",
    "classifier.w",
    "au_head.w",
    "au_head.b",
    "gcn.w1",
    "gcn.w2",
    "au_classifier.w",
    "au_classifier.b",
];

const GROUPS: [ParamGroup; 12] = [
    ParamGroup::Target,
    ParamGroup::Target,
    ParamGroup::Target,
    ParamGroup::Target,
    ParamGroup::Target,
    ParamGroup::Target,
    ParamGroup::Aux,
    ParamGroup::Aux,
    ParamGroup::Aux,
    ParamGroup::Aux,
    ParamGroup::Aux,
    ParamGroup::Aux,
];

/// Tape handles for every parameter of a [`Model`].
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub w_a: Var,
    pub classifier: Var,
    pub head: HeadVars,
    pub gcn: GcnVars,
    pub node: NodeClassifierVars,
}

impl ModelVars {
    /// Inverse of [`ModelVars::all`].
    pub fn from_slice(v: &[Var; 12]) -> Self {
        ModelVars {
            backbone: BackboneVars {
                w1: v[0],
                b1: v[1],
                w2: v[2],
                b2: v[3],
            },
            w_a: v[4],
            classifier: v[5],
            head: HeadVars { w: v[6], b: v[7] },
            gcn: GcnVars { w1: v[8], w2: v[9] },
            node: NodeClassifierVars { w: v[10], b: v[11] },
        }
    }

    pub fn all(&self) -> [Var; 12] {
        [
            self.backbone.w1,
            self.backbone.b1,
            self.backbone.w2,
            self.backbone.b2,
            self.w_a,
            self.classifier,
            self.head.w,
            self.head.b,
            self.gcn.w1,
            self.gcn.w2,
            self.node.w,
            self.node.b,
        ]
    }
}

fn normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

impl Model {
    /// He-normal weights for layers followed by leaky ReLU, Xavier-style
    /// for linear read-outs, zero biases.
    pub fn init<R: Rng>(dim: usize, classes: usize, aus: usize, cfg: &TrainConfig, rng: &mut R) -> Self {
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let lin = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let (h, df, b, g) = (cfg.hidden, cfg.feature_dim, cfg.node_dim, cfg.gcn_channels);
        Model {
            w1: normal(dim, h, he(dim), rng),
            b1: Matrix::zeros(1, h),
            w2: normal(h, df, lin(h), rng),
            b2: Matrix::zeros(1, df),
            w_a: normal(df, 1, lin(df), rng),
            classifier: normal(df, classes, lin(df), rng),
            head_w: normal(df, aus * b, lin(df), rng),
            head_b: Matrix::zeros(1, aus * b),
            gcn_w1: normal(b, g, he(b), rng),
            gcn_w2: normal(g, g, he(g), rng),
            node_w: normal(aus, g, lin(g), rng),
            node_b: Matrix::zeros(1, aus),
        }
    }

    pub fn params(&self) -> [&Matrix; 12] {
        [
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.w_a,
            &self.classifier,
            &self.head_w,
            &self.head_b,
            &self.gcn_w1,
            &self.gcn_w2,
            &self.node_w,
            &self.node_b,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 12] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w_a,
            &mut self.classifier,
            &mut self.head_w,
            &mut self.head_b,
            &mut self.gcn_w1,
            &mut self.gcn_w2,
            &mut self.node_w,
            &mut self.node_b,
        ]
    }

    pub fn group(index: usize) -> ParamGroup {
        GROUPS[index]
    }

    pub fn zeros_like(&self) -> Model {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Model {
            w1: z(&self.w1),
            b1: z(&self.b1),
            w2: z(&self.w2),
            b2: z(&self.b2),
            w_a: z(&self.w_a),
            classifier: z(&self.classifier),
            head_w: z(&self.head_w),
            head_b: z(&self.head_b),
            gcn_w1: z(&self.gcn_w1),
            gcn_w2: z(&self.gcn_w2),
            node_w: z(&self.node_w),
            node_b: z(&self.node_b),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            backbone: BackboneVars {
                w1: tape.leaf(self.w1.clone()),
                b1: tape.leaf(self.b1.clone()),
                w2: tape.leaf(self.w2.clone()),
                b2: tape.leaf(self.b2.clone()),
            },
            w_a: tape.leaf(self.w_a.clone()),
            classifier: tape.leaf(self.classifier.clone()),
            head: HeadVars {
                w: tape.leaf(self.head_w.clone()),
                b: tape.leaf(self.head_b.clone()),
            },
            gcn: GcnVars {
                w1: tape.leaf(self.gcn_w1.clone()),
                w2: tape.leaf(self.gcn_w2.clone()),
            },
            node: NodeClassifierVars {
                w: tape.leaf(self.node_w.clone()),
                b: tape.leaf(self.node_b.clone()),
            },
        }
    }

    /// Heavy-ball SGD: `v = mu v + g; p -= lr v`. With `mu = 0` this is
    /// plain SGD and `velocity` simply holds the last gradient.
    pub fn sgd_step(&mut self, grads: &[Matrix; 12], velocity: &mut Model, lr: impl Fn(ParamGroup) -> f64, momentum: f64) {
        let vel = velocity.params_mut();
        for (i, (p, v)) in self.params_mut().into_iter().zip(vel).enumerate() {
            let rate = lr(Self::group(i));
            for (vv, &g) in v.data_mut().iter_mut().zip(grads[i].data()) {
                *vv = momentum * *vv + g;
            }
            if rate != 0.0 {
                p.axpy(-rate, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Model::init(8, 3, 5, &cfg, &mut rng);
        let before = m.clone();
        let grads = m.params().map(|p| Matrix::filled(p.rows(), p.cols(), 1.0));
        let mut vel = m.zeros_like();
        m.sgd_step(&grads, &mut vel, |_| 0.0, 0.0);
        assert_eq!(m, before);
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::init(16, 5, 10, &cfg, &mut rng);
        assert_eq!(m.w1.shape(), (16, 64));
        assert_eq!(m.w2.shape(), (64, 32));
        assert_eq!(m.head_w.shape(), (32, 160));
        assert_eq!(m.gcn_w1.shape(), (16, 64));
        assert_eq!(m.gcn_w2.shape(), (64, 64));
        assert_eq!(m.node_w.shape(), (10, 64));
        assert_eq!(m.classifier.shape(), (32, 5));
    }
}
