//! Named parameter storage and the SGD update.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::Gradients;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    #[cfg(test)]
    pub(crate) fn from_raw(i: usize) -> Self {
        ParamId(i)
    }
}

/// Which sub-model owns a parameter. Updates are always applied to a subset
/// of groups, never to the whole store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Sample encoder (Θ_B).
    Encoder,
    /// Trigger and argument classifiers (Θ_E).
    Extractor,
    /// Memory module and loss regressor (Θ_M).
    Predictor,
}

impl Group {
    pub fn prefix(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Extractor => "extractor",
            Group::Predictor => "mblp",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<Group>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: Group, value: Array2<f64>) -> ParamId {
        self.names.push(format!("{}.{}", group.prefix(), name));
        self.groups.push(group);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Xavier/Glorot uniform initialisation.
    pub fn add_xavier<R: Rng>(
        &mut self,
        name: &str,
        group: Group,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let v = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound));
        self.add(name, group, v)
    }

    pub fn add_normal<R: Rng>(
        &mut self,
        name: &str,
        group: Group,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        // sum of uniforms; adequate for initialisation and avoids a
        // distribution dependency
        let v = Array2::from_shape_fn((rows, cols), |_| {
            let s: f64 = (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum();
            s * scale * (3.0f64 / 4.0).sqrt()
        });
        self.add(name, group, v)
    }

    pub fn add_zeros(&mut self, name: &str, group: Group, rows: usize, cols: usize) -> ParamId {
        self.add(name, group, Array2::zeros((rows, cols)))
    }

    pub fn add_const(
        &mut self,
        name: &str,
        group: Group,
        rows: usize,
        cols: usize,
        v: f64,
    ) -> ParamId {
        self.add(name, group, Array2::from_elem((rows, cols), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.groups[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Snapshot of every parameter in the given groups, in id order.
    pub fn snapshot(&self, groups: &[Group]) -> Vec<Array2<f64>> {
        self.ids()
            .filter(|id| groups.contains(&self.group(*id)))
            .map(|id| self.value(id).clone())
            .collect()
    }

    /// Plain SGD restricted to `groups`: gradients on parameters outside those
    /// groups are ignored. The global norm is clipped to `clip` first (when
    /// `clip > 0`). Returns the pre-clip norm.
    pub fn sgd_step(&mut self, grads: &Gradients, groups: &[Group], lr: f64, clip: f64) -> f64 {
        let mut owned = Gradients::new();
        for (id, g) in grads.iter() {
            if groups.contains(&self.group(id)) {
                owned.insert(id, g.clone());
            }
        }
        let norm = if clip > 0.0 {
            owned.clip_norm(clip)
        } else {
            owned.norm()
        };
        for (id, g) in owned.iter() {
            let v = &mut self.values[id.0];
            v.zip_mut_with(g, |w, &d| *w -= lr * d);
        }
        norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Update rule bound to a set of parameter groups. Adam keeps its moment
/// estimates per parameter; SGD is stateless.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    groups: Vec<Group>,
    lr: f64,
    clip: f64,
    steps: u64,
    moments: std::collections::HashMap<ParamId, (Array2<f64>, Array2<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, groups: &[Group], lr: f64, clip: f64) -> Self {
        Optimizer {
            kind,
            groups: groups.to_vec(),
            lr,
            clip,
            steps: 0,
            moments: Default::default(),
        }
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update. Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> f64 {
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => store.sgd_step(grads, &self.groups, self.lr, self.clip),
            OptimizerKind::Adam => self.adam(store, grads),
        }
    }

    fn adam(&mut self, store: &mut ParamStore, grads: &Gradients) -> f64 {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let mut owned = Gradients::new();
        for (id, g) in grads.iter() {
            if self.groups.contains(&store.group(id)) {
                owned.insert(id, g.clone());
            }
        }
        let norm = if self.clip > 0.0 {
            owned.clip_norm(self.clip)
        } else {
            owned.norm()
        };
        let t = self.steps as i32;
        let c1 = 1.0 - B1.powi(t);
        let c2 = 1.0 - B2.powi(t);
        for (id, g) in owned.iter() {
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            m.zip_mut_with(g, |m, &d| *m = B1 * *m + (1.0 - B1) * d);
            v.zip_mut_with(g, |v, &d| *v = B2 * *v + (1.0 - B2) * d * d);
            let w = &mut store.values[id.0];
            ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| {
                *w -= self.lr * (m / c1) / ((v / c2).sqrt() + EPS);
            });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_step_only_touches_requested_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let a = store.add_xavier("a", Group::Encoder, 2, 2, &mut rng);
        let b = store.add_xavier("b", Group::Predictor, 2, 2, &mut rng);
        let mut grads = Gradients::new();
        grads.insert(a, Array2::ones((2, 2)));
        grads.insert(b, Array2::ones((2, 2)));
        let before_b = store.value(b).clone();
        let before_a = store.value(a).clone();
        store.sgd_step(&grads, &[Group::Encoder], 0.1, 0.0);
        assert_eq!(store.value(b), &before_b);
        assert_ne!(store.value(a), &before_a);
        assert_eq!(store.name(b), "mblp.b");
        assert_eq!(store.find("encoder.a"), Some(a));
    }

    #[test]
    fn adam_respects_groups_and_moves_against_gradient() {
        let mut store = ParamStore::new();
        let a = store.add_zeros("a", Group::Extractor, 1, 2);
        let b = store.add_zeros("b", Group::Predictor, 1, 2);
        let mut grads = Gradients::new();
        grads.insert(a, Array2::from_elem((1, 2), 2.0));
        grads.insert(b, Array2::from_elem((1, 2), 2.0));
        let mut opt = Optimizer::new(OptimizerKind::Adam, &[Group::Extractor], 0.01, 0.0);
        opt.step(&mut store, &grads);
        // first bias-corrected Adam step has magnitude lr
        assert!((store.value(a)[[0, 0]] + 0.01).abs() < 1e-9);
        assert_eq!(store.value(b), &Array2::<f64>::zeros((1, 2)));
    }
}
