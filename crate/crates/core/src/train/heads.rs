//! Projection heads and prototype distributions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{check_simplex, Graph, Var};
use crate::kernels;
use crate::optim::Parameters;
use crate::tensor::{Result, Tensor, TensorError};
use crate::vit::{fan_in_std, normal_tensor, ViTConfig, ViTParams, ViTVars};

const NORM_EPS: f64 = 1e-12;

/// `Linear(D,H) → gelu → Linear(H,H) → gelu → Linear(H,K)`.
///
/// The last layer works on the unit-normalized hidden vector and uses
/// unit-normalized prototype columns, so logits are cosine similarities in
/// `[−1, 1]` plus a bias. Bounded logits keep temperature sharpening and
/// centering in balance; with unbounded logits the teacher collapses.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

impl HeadVars {
    pub fn ordered(&self) -> [Var; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

fn check_dims(input: usize, hidden: usize, k: usize) -> Result<()> {
    if input == 0 || hidden == 0 {
        return Err(TensorError::Param(
            "head dimensions must be positive".into(),
        ));
    }
    if k < 2 {
        return Err(TensorError::Param(format!(
            "a projection head needs at least 2 prototypes, got {k}"
        )));
    }
    Ok(())
}

impl ProjectionHead {
    pub fn init(input: usize, hidden: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        check_dims(input, hidden, k)?;
        let mut h = Self {
            w1: normal_tensor(&[input, hidden], fan_in_std(input), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: normal_tensor(&[hidden, hidden], fan_in_std(hidden), rng),
            b2: Tensor::zeros(&[hidden]),
            w3: normal_tensor(&[hidden, k], fan_in_std(hidden), rng),
            b3: Tensor::zeros(&[k]),
        };
        h.set_requires_grad(true);
        Ok(h)
    }

    pub fn zeros(input: usize, hidden: usize, k: usize) -> Result<Self> {
        check_dims(input, hidden, k)?;
        Ok(Self {
            w1: Tensor::zeros(&[input, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, hidden]),
            b2: Tensor::zeros(&[hidden]),
            w3: Tensor::zeros(&[hidden, k]),
            b3: Tensor::zeros(&[k]),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn prototypes(&self) -> usize {
        self.w3.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph) -> HeadVars {
        HeadVars {
            w1: g.param(&self.w1),
            b1: g.param(&self.b1),
            w2: g.param(&self.w2),
            b2: g.param(&self.b2),
            w3: g.param(&self.w3),
            b3: g.param(&self.b3),
        }
    }

    /// Logits `[rows, K]` for features `[rows, D]`.
    pub fn forward(g: &mut Graph, v: &HeadVars, x: Var) -> Result<Var> {
        let h = g.linear(x, v.w1, Some(v.b1))?;
        let h = g.gelu(h);
        let h = g.linear(h, v.w2, Some(v.b2))?;
        let h = g.gelu(h);
        let h = g.normalize_rows(h, NORM_EPS)?;
        let protos = g.transpose(v.w3)?;
        let protos = g.normalize_rows(protos, NORM_EPS)?;
        let protos = g.transpose(protos)?;
        g.linear(h, protos, Some(v.b3))
    }

    /// Logits for a single feature vector, without recording gradients.
    pub fn logits(&self, feature: &Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let v = self.bind(&mut g);
        let x = g.constant(feature.clone().reshape(&[1, feature.numel()])?);
        let out = Self::forward(&mut g, &v, x)?;
        g.value(out).clone().reshape(&[self.prototypes()])
    }
}

impl Parameters for ProjectionHead {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f("fc1.weight", &self.w1);
        f("fc1.bias", &self.b1);
        f("fc2.weight", &self.w2);
        f("fc2.bias", &self.b2);
        f("fc3.weight", &self.w3);
        f("fc3.bias", &self.b3);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("fc1.weight", &mut self.w1);
        f("fc1.bias", &mut self.b1);
        f("fc2.weight", &mut self.w2);
        f("fc2.bias", &mut self.b2);
        f("fc3.weight", &mut self.w3);
        f("fc3.bias", &mut self.b3);
    }
}

/// Backbone plus class-token and patch-token heads. Teacher and student
/// share this structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub backbone: ViTParams,
    pub class_head: ProjectionHead,
    pub patch_head: ProjectionHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub prototypes: usize,
}

pub struct NetworkVars {
    pub backbone: ViTVars,
    pub class_head: HeadVars,
    pub patch_head: HeadVars,
}

impl NetworkVars {
    /// Vars in the same order as `Network::visit`.
    pub fn ordered(&self) -> Vec<Var> {
        let mut v = self.backbone.ordered();
        v.extend(self.class_head.ordered());
        v.extend(self.patch_head.ordered());
        v
    }
}

impl Network {
    pub fn init(vit: ViTConfig, head: HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        let backbone = ViTParams::init(vit, rng)?;
        let class_head =
            ProjectionHead::init(vit.embed_dim, head.hidden_dim, head.prototypes, rng)?;
        let patch_head =
            ProjectionHead::init(vit.embed_dim, head.hidden_dim, head.prototypes, rng)?;
        Ok(Self {
            backbone,
            class_head,
            patch_head,
        })
    }

    pub fn zeros(vit: ViTConfig, head: HeadConfig) -> Result<Self> {
        Ok(Self {
            backbone: ViTParams::zeros(vit)?,
            class_head: ProjectionHead::zeros(vit.embed_dim, head.hidden_dim, head.prototypes)?,
            patch_head: ProjectionHead::zeros(vit.embed_dim, head.hidden_dim, head.prototypes)?,
        })
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            hidden_dim: self.class_head.hidden_dim(),
            prototypes: self.class_head.prototypes(),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> NetworkVars {
        NetworkVars {
            backbone: self.backbone.bind(g),
            class_head: self.class_head.bind(g),
            patch_head: self.patch_head.bind(g),
        }
    }
}

impl Parameters for Network {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.backbone
            .visit(&mut |n, t| f(&format!("backbone.{n}"), t));
        self.class_head
            .visit(&mut |n, t| f(&format!("class_head.{n}"), t));
        self.patch_head
            .visit(&mut |n, t| f(&format!("patch_head.{n}"), t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.backbone
            .visit_mut(&mut |n, t| f(&format!("backbone.{n}"), t));
        self.class_head
            .visit_mut(&mut |n, t| f(&format!("class_head.{n}"), t));
        self.patch_head
            .visit_mut(&mut |n, t| f(&format!("patch_head.{n}"), t));
    }
}

/// A K-way distribution over prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoDistribution {
    values: Vec<f64>,
}

impl ProtoDistribution {
    /// Validates that `values` lies on the probability simplex.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(TensorError::Validation(format!(
                "a distribution needs at least 2 entries, got {}",
                values.len()
            )));
        }
        check_simplex(&values, values.len(), "distribution")?;
        Ok(Self { values })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            values: vec![1.0 / k as f64; k],
        }
    }

    pub fn one_hot(k: usize, hot: usize) -> Self {
        let mut values = vec![0.0; k];
        values[hot] = 1.0;
        Self { values }
    }

    /// `softmax(logits / tau)`.
    pub fn from_logits(logits: &[f64], tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(TensorError::Param(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let mut values = vec![0.0; logits.len()];
        kernels::softmax_into(logits, tau, &mut values);
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn entropy(&self) -> f64 {
        kernels::entropy(&self.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

/// Projects one feature vector to a prototype distribution. The teacher
/// subtracts `center` before sharpening; the student is not centered.
pub fn head_forward(
    feature: &Tensor,
    head: &ProjectionHead,
    role: Role,
    center: &Tensor,
    tau: f64,
) -> Result<ProtoDistribution> {
    if !(tau > 0.0) {
        return Err(TensorError::Param(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let mut logits = head.logits(feature)?.into_data();
    if role == Role::Teacher {
        if center.numel() != logits.len() {
            return Err(TensorError::Shape(format!(
                "center of length {} for {} prototypes",
                center.numel(),
                logits.len()
            )));
        }
        logits
            .iter_mut()
            .zip(center.data())
            .for_each(|(l, c)| *l -= c);
    }
    ProtoDistribution::from_logits(&logits, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_head_is_uniform() {
        let head = ProjectionHead::zeros(4, 8, 5).unwrap();
        let d = head_forward(
            &Tensor::from_vec(vec![1.0, -2.0, 0.5, 3.0]),
            &head,
            Role::Teacher,
            &Tensor::zeros(&[5]),
            0.04,
        )
        .unwrap();
        assert!(d.values().iter().all(|&p| (p - 0.2).abs() < 1e-12));
    }

    #[test]
    fn centering_cancels_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = ProjectionHead::init(4, 8, 6, &mut rng).unwrap();
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.1, 0.2]);
        let center = head.logits(&x).unwrap();
        let d = head_forward(&x, &head, Role::Teacher, &center, 0.04).unwrap();
        assert!(d.values().iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-9));
        let s = head_forward(&x, &head, Role::Student, &center, 0.1).unwrap();
        assert!(s.values().iter().any(|&p| (p - 1.0 / 6.0).abs() > 1e-9));
    }

    #[test]
    fn teacher_temperature_sharpens() {
        let logits = [1.0, 0.0, 0.0, 0.0];
        let t = ProtoDistribution::from_logits(&logits, 0.04).unwrap();
        let s = ProtoDistribution::from_logits(&logits, 0.1).unwrap();
        assert!(t.values()[0] > s.values()[0]);
        assert!(ProtoDistribution::from_logits(&logits, 0.0).is_err());
    }

    #[test]
    fn rejects_small_k_and_off_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ProjectionHead::init(4, 4, 1, &mut rng).is_err());
        assert!(ProtoDistribution::new(vec![0.6, 0.6]).is_err());
        assert!(ProtoDistribution::new(vec![1.2, -0.2]).is_err());
    }
}
