//! Memory-based loss prediction.
//!
//! The selected memory module keeps, per classification task, a `K × d_M`
//! matrix whose row `p` summarises category `p` over the samples selected so
//! far. Adding a sample `S` with token features `𝓑(S)`:
//!
//! ```text
//! f_p   = Att(M_p, 𝓑(S), 𝓑(S))
//! g_p   = σ(W_g [f_p ; M_p] + b_g)
//! M_p' = g_p · (W_M f_p) + (1 − g_p) · M_p
//! ```
//!
//! Each prediction (hidden vector `h`, output distribution `P`) then gets a
//! loss estimate `F([h ; P ; Att(h, M, M)])`, with a softplus output so the
//! estimate is never negative. The memory read and update queries go through
//! learned projections; keys and values are used as-is.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TaskSchema;
use crate::encoder::{attend, EncoderOutput};
use crate::error::{Error, Result};
use crate::extractor::{SamplePredictions, Task};
use crate::graph::{Graph, Var};
use crate::params::{Group, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub d_m: usize,
    pub hidden: usize,
    /// Without memory the head sees only `[h ; P]` (the conventional,
    /// memory-less loss predictor).
    pub memory: bool,
    /// Gate per memory dimension instead of one scalar gate per category.
    pub per_dim_gate: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            d_m: 256,
            hidden: 64,
            memory: true,
            per_dim_gate: false,
        }
    }
}

#[derive(Debug, Clone)]
struct MemoryParams {
    init: ParamId,
    update_wq: ParamId,
    w_m: ParamId,
    w_g: ParamId,
    b_g: ParamId,
    read_wq: ParamId,
}

#[derive(Debug, Clone)]
struct TaskHead {
    categories: usize,
    memory: Option<MemoryParams>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Per-task memory matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    pub matrices: [Array2<f64>; 2],
}

impl MemoryState {
    pub fn matrix(&self, task: Task) -> &Array2<f64> {
        &self.matrices[task.index()]
    }

    pub fn is_finite(&self) -> bool {
        self.matrices.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Memory matrices on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MemoryVars {
    pub matrices: [Var; 2],
}

/// Result of one memory update, with the gate values for inspection.
#[derive(Debug, Clone)]
pub struct SmmUpdate {
    pub memory: MemoryState,
    /// Per task: `K × 1` (or `K × d_M` with per-dimension gates).
    pub gates: [Array2<f64>; 2],
}

#[derive(Debug, Clone)]
pub struct LossPredictor {
    cfg: PredictorConfig,
    d_h: usize,
    heads: [TaskHead; 2],
}

impl LossPredictor {
    pub fn new<R: Rng>(
        cfg: &PredictorConfig,
        schema: &TaskSchema,
        d_h: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.d_m == 0 || cfg.hidden == 0 {
            return Err(Error::InvalidArgument("d_m and hidden must be positive".into()));
        }
        let g = Group::Predictor;
        let mut make = |task: Task, categories: usize, h_dim: usize| {
            let t = match task {
                Task::Trigger => "trigger",
                Task::Argument => "argument",
            };
            let p = |n: &str| format!("{t}.{n}");
            let d_m = cfg.d_m;
            let memory = cfg.memory.then(|| {
                let gate_width = if cfg.per_dim_gate { d_m } else { 1 };
                MemoryParams {
                    init: store.add_normal(&p("memory_init"), g, categories, d_m, 0.5, rng),
                    update_wq: store.add_xavier(&p("update_wq"), g, d_m, d_h, rng),
                    w_m: store.add_xavier(&p("w_m"), g, d_h, d_m, rng),
                    w_g: store.add_xavier(&p("w_g"), g, d_h + d_m, gate_width, rng),
                    b_g: store.add_zeros(&p("b_g"), g, 1, gate_width),
                    read_wq: store.add_xavier(&p("read_wq"), g, h_dim, d_m, rng),
                }
            });
            let input = h_dim + categories + if cfg.memory { d_m } else { 0 };
            TaskHead {
                categories,
                memory,
                w1: store.add_xavier(&p("f.w1"), g, input, cfg.hidden, rng),
                b1: store.add_zeros(&p("f.b1"), g, 1, cfg.hidden),
                w2: store.add_xavier(&p("f.w2"), g, cfg.hidden, 1, rng),
                b2: store.add_const(&p("f.b2"), g, 1, 1, -1.0),
            }
        };
        let trigger = make(Task::Trigger, schema.num_event_types(), d_h);
        let argument = make(Task::Argument, schema.num_arg_labels(), 3 * d_h);
        Ok(LossPredictor {
            cfg: cfg.clone(),
            d_h,
            heads: [trigger, argument],
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    pub fn uses_memory(&self) -> bool {
        self.cfg.memory
    }

    fn memory_params(&self, task: Task) -> Result<&MemoryParams> {
        self.heads[task.index()]
            .memory
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("loss predictor has no memory".into()))
    }

    /// Gate bias parameter of a task (exposed for gate-forcing checks).
    pub fn gate_bias(&self, task: Task) -> Option<ParamId> {
        self.heads[task.index()].memory.as_ref().map(|m| m.b_g)
    }

    /// `W_M` of a task.
    pub fn memory_projection(&self, task: Task) -> Option<ParamId> {
        self.heads[task.index()].memory.as_ref().map(|m| m.w_m)
    }

    /// The learnable initial memory on the tape.
    pub fn reset_vars(&self, g: &mut Graph, store: &ParamStore) -> Result<MemoryVars> {
        let t = g.param(store, self.memory_params(Task::Trigger)?.init);
        let a = g.param(store, self.memory_params(Task::Argument)?.init);
        Ok(MemoryVars { matrices: [t, a] })
    }

    /// One gated update with a sample's token features `enc` (`n × d_h`).
    /// Returns the new memory and the gates.
    pub fn update_vars(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memory: &MemoryVars,
        enc: Var,
    ) -> Result<(MemoryVars, [Var; 2])> {
        let (n, d) = g.shape(enc);
        if n == 0 || d != self.d_h {
            return Err(Error::Shape(format!(
                "encoding {n}×{d}, expected non-empty with width {}",
                self.d_h
            )));
        }
        let mut mats = memory.matrices;
        let mut gates = memory.matrices;
        for task in Task::ALL {
            let p = self.memory_params(task)?;
            let mem = memory.matrices[task.index()];
            if g.shape(mem).1 != self.cfg.d_m {
                return Err(Error::Shape("memory width differs from d_m".into()));
            }
            let wq = g.param(store, p.update_wq);
            let q = g.matmul(mem, wq);
            let f = attend(g, q, enc, enc, 1)?;
            let gate_in = g.hcat(&[f, mem]);
            let w_g = g.param(store, p.w_g);
            let b_g = g.param(store, p.b_g);
            let logits = g.matmul(gate_in, w_g);
            let logits = g.add_row(logits, b_g);
            let gate = g.sigmoid(logits);
            let closed = g.affine(gate, -1.0, 1.0);
            let w_m = g.param(store, p.w_m);
            let proj = g.matmul(f, w_m);
            let (fresh, kept) = if self.cfg.per_dim_gate {
                (g.mul(proj, gate), g.mul(mem, closed))
            } else {
                (g.mul_col(proj, gate), g.mul_col(mem, closed))
            };
            mats[task.index()] = g.add(fresh, kept);
            gates[task.index()] = gate;
        }
        Ok((MemoryVars { matrices: mats }, gates))
    }

    /// Loss estimates for every prediction of one sentence, in prediction
    /// order, as an `N(S) × 1` node. `hidden` and `probs` are tape inputs
    /// (constants), so no gradient reaches the encoder or the extractor.
    /// `None` for a sentence without candidates.
    pub fn predict_vars(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memory: Option<&MemoryVars>,
        preds: &SamplePredictions,
    ) -> Result<Option<Var>> {
        if preds.is_empty() {
            return Ok(None);
        }
        if self.cfg.memory && memory.is_none() {
            return Err(Error::InvalidArgument(
                "memory-based predictor called without memory".into(),
            ));
        }
        let mut outs = Vec::with_capacity(2);
        for task in Task::ALL {
            let head = &self.heads[task.index()];
            let hidden = preds.hidden(task);
            let probs = preds.probs(task);
            if probs.ncols() != head.categories {
                return Err(Error::Shape(format!(
                    "{task:?} predictions have {} categories, predictor expects {}",
                    probs.ncols(),
                    head.categories
                )));
            }
            let h = g.input(hidden.clone());
            let p = g.input(probs.clone());
            let mut parts = vec![h, p];
            if let (Some(mp), Some(mem)) = (head.memory.as_ref(), memory) {
                let mem = mem.matrices[task.index()];
                let wq = g.param(store, mp.read_wq);
                let q = g.matmul(h, wq);
                parts.push(attend(g, q, mem, mem, 1)?);
            }
            let x = g.hcat(&parts);
            let w1 = g.param(store, head.w1);
            let b1 = g.param(store, head.b1);
            let w2 = g.param(store, head.w2);
            let b2 = g.param(store, head.b2);
            let z = g.matmul(x, w1);
            let z = g.add_row(z, b1);
            let z = g.tanh(z);
            let z = g.matmul(z, w2);
            let z = g.add_row(z, b2);
            outs.push(g.softplus(z));
        }
        Ok(Some(g.vcat(&outs)))
    }

    /// Memory reset to the current learnable initial state.
    pub fn reset(&self, store: &ParamStore) -> Result<MemoryState> {
        Ok(MemoryState {
            matrices: [
                store.value(self.memory_params(Task::Trigger)?.init).clone(),
                store.value(self.memory_params(Task::Argument)?.init).clone(),
            ],
        })
    }

    pub fn smm_update(
        &self,
        store: &ParamStore,
        memory: &MemoryState,
        enc: &EncoderOutput,
    ) -> Result<SmmUpdate> {
        let mut g = Graph::new();
        let mem = MemoryVars {
            matrices: [
                g.input(memory.matrices[0].clone()),
                g.input(memory.matrices[1].clone()),
            ],
        };
        let e = g.input(enc.token_features.clone());
        let (new, gates) = self.update_vars(&mut g, store, &mem, e)?;
        Ok(SmmUpdate {
            memory: MemoryState {
                matrices: [
                    g.value(new.matrices[0]).clone(),
                    g.value(new.matrices[1]).clone(),
                ],
            },
            gates: [g.value(gates[0]).clone(), g.value(gates[1]).clone()],
        })
    }

    /// Predicted balanced loss of every prediction, in prediction order.
    pub fn predict_losses(
        &self,
        store: &ParamStore,
        memory: Option<&MemoryState>,
        preds: &SamplePredictions,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mem = memory.map(|m| MemoryVars {
            matrices: [g.input(m.matrices[0].clone()), g.input(m.matrices[1].clone())],
        });
        let out = self.predict_vars(&mut g, store, mem.as_ref(), preds)?;
        Ok(out.map_or_else(Vec::new, |v| g.value(v).iter().copied().collect()))
    }
}
