//! The assembled network: parameter layout, initialization and the
//! per-scene forward pass on a tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjattn::{reconstruct_step, AdjAttnConfig, AdjAttnVars};
use crate::error::{Error, Result};
use crate::gnn::{fuse, gat_layer, stgcn_layer, GatHead};
use crate::head::{self, GaussianForecast, RAW_WIDTH, TXP_KERNEL_WIDTH};
use crate::ingest::Scene;
use crate::numerics::{grad_check, BoundParams, GradCheckConfig, GradCheckReport, ParamGrads, ParamId, ParamStore, Tape, Tensor, Var};
use crate::stgraph::{GraphConfig, KernelSpace, SpatioTemporalGraph};

pub const LAYER_CHOICES: [usize; 4] = [1, 3, 5, 7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_max: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    /// Width of the lifted node embedding.
    pub embed_dim: usize,
    /// Query/key width of adjacency reconstruction.
    pub d_k: usize,
    pub gat_heads: usize,
    pub gat_head_dim: usize,
    pub recon_heads: usize,
    pub stgcn_layers: usize,
    pub txp_layers: usize,
    pub scaled_scores: bool,
    pub residual_adjacency: bool,
    pub disable_gat: bool,
    pub disable_adj_attention: bool,
    /// Feed the three raw coordinates to the GAT branch instead of the embedding.
    pub gat_on_raw: bool,
    pub kernel_space: KernelSpace,
    /// Inverted dropout on the fused embedding while training.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_max: 16,
            t_obs: 4,
            t_pred: 6,
            embed_dim: 32,
            d_k: 16,
            gat_heads: 4,
            gat_head_dim: 8,
            recon_heads: 1,
            stgcn_layers: 1,
            txp_layers: 5,
            scaled_scores: false,
            residual_adjacency: false,
            disable_gat: false,
            disable_adj_attention: false,
            gat_on_raw: false,
            kernel_space: KernelSpace::Normalized,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_max", self.n_max),
            ("t_obs", self.t_obs),
            ("t_pred", self.t_pred),
            ("embed_dim", self.embed_dim),
            ("d_k", self.d_k),
            ("gat_heads", self.gat_heads),
            ("gat_head_dim", self.gat_head_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (name, v) in [("stgcn_layers", self.stgcn_layers), ("txp_layers", self.txp_layers)] {
            if !LAYER_CHOICES.contains(&v) {
                return Err(Error::Config(format!("{name} must be one of 1, 3, 5, 7, got {v}")));
            }
        }
        if self.recon_heads != 1 {
            return Err(Error::Config("recon_heads must be 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn graph(&self) -> GraphConfig {
        GraphConfig {
            n_max: self.n_max,
            kernel_space: self.kernel_space,
        }
    }

    pub fn adj_attn(&self) -> AdjAttnConfig {
        AdjAttnConfig {
            scaled_scores: self.scaled_scores,
            residual_adjacency: self.residual_adjacency,
        }
    }

    fn gat_input_dim(&self) -> usize {
        if self.gat_on_raw {
            3
        } else {
            self.embed_dim
        }
    }
}

#[derive(Clone, Debug)]
struct ParamIds {
    embed: ParamId,
    adj: Option<[ParamId; 3]>,
    stgcn: Vec<ParamId>,
    gat: Vec<(ParamId, ParamId)>,
    fuse: Option<ParamId>,
    txp: Vec<ParamId>,
    head: ParamId,
}

impl ParamIds {
    fn resolve(config: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let adj = if config.disable_adj_attention {
            None
        } else {
            Some([store.require("adj.wq")?, store.require("adj.wk")?, store.require("adj.wv")?])
        };
        let (gat, fuse) = if config.disable_gat {
            (Vec::new(), None)
        } else {
            let heads = (0..config.gat_heads)
                .map(|k| Ok((store.require(&format!("gat.{k}.w"))?, store.require(&format!("gat.{k}.a"))?)))
                .collect::<Result<_>>()?;
            (heads, Some(store.require("fuse.w")?))
        };
        Ok(Self {
            embed: store.require("embed.w")?,
            adj,
            stgcn: (0..config.stgcn_layers)
                .map(|l| store.require(&format!("stgcn.{l}.w")))
                .collect::<Result<_>>()?,
            gat,
            fuse,
            txp: (0..config.txp_layers)
                .map(|l| store.require(&format!("txp.{l}.w")))
                .collect::<Result<_>>()?,
            head: store.require("head.w")?,
        })
    }
}

/// Parameter names and shapes for a configuration, in registration order.
pub fn parameter_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (m, n, dk) = (config.embed_dim, config.n_max, config.d_k);
    let mut out = vec![("embed.w".to_string(), vec![3, m])];
    if !config.disable_adj_attention {
        out.push(("adj.wq".into(), vec![dk, n]));
        out.push(("adj.wk".into(), vec![dk, n]));
        out.push(("adj.wv".into(), vec![n, n]));
    }
    for l in 0..config.stgcn_layers {
        out.push((format!("stgcn.{l}.w"), vec![m, m]));
    }
    if !config.disable_gat {
        let (f, fp) = (config.gat_input_dim(), config.gat_head_dim);
        for k in 0..config.gat_heads {
            out.push((format!("gat.{k}.w"), vec![f, fp]));
            out.push((format!("gat.{k}.a"), vec![2 * fp]));
        }
        out.push(("fuse.w".into(), vec![m + config.gat_heads * fp, m]));
    }
    for l in 0..config.txp_layers {
        let c_in = if l == 0 { config.t_obs } else { config.t_pred };
        out.push((format!("txp.{l}.w"), vec![config.t_pred, c_in, TXP_KERNEL_WIDTH]));
    }
    out.push(("head.w".into(), vec![m, RAW_WIDTH]));
    out
}

fn xavier<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// Scene converted into model inputs and normalized targets.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub graph: SpatioTemporalGraph,
    /// `[t_pred · n_real, 3]` normalized future positions, step-major.
    pub truth: Tensor,
    /// Rows of the raw head output that belong to real nodes.
    pub rows: Vec<usize>,
}

impl PreparedScene {
    pub fn n_real(&self) -> usize {
        self.graph.n_real
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryModel {
    config: ModelConfig,
    store: ParamStore,
    ids: ParamIds,
}

impl TrajectoryModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in parameter_layout(&config) {
            let value = match name.as_str() {
                "adj.wq" | "adj.wk" | "adj.wv" => {
                    let bound = 1.0 / (config.n_max as f64).sqrt();
                    Tensor::from_fn(&shape, |_| rng.random_range(-bound..=bound))
                }
                _ if shape.len() == 3 => {
                    let fan_in = shape[1] * shape[2];
                    let fan_out = shape[0] * shape[2];
                    xavier(&shape, fan_in, fan_out, &mut rng)
                }
                _ if shape.len() == 1 => xavier(&shape, shape[0], 1, &mut rng),
                _ => xavier(&shape, shape[0], shape[1], &mut rng),
            };
            store.register(name, value)?;
        }
        Self::from_store(config, store)
    }

    /// Wraps an existing store, checking names and shapes against the layout.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters for this configuration, found {}",
                layout.len(),
                store.len()
            )));
        }
        for (name, shape) in &layout {
            let id = store.require(name)?;
            if store.value(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    store.value(id).shape()
                )));
            }
        }
        let ids = ParamIds::resolve(&config, &store)?;
        Ok(Self { config, store, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn prepare(&self, scene: &Scene) -> Result<PreparedScene> {
        if scene.t_obs != self.config.t_obs || scene.t_pred != self.config.t_pred {
            return Err(Error::shape(
                "prepare",
                format!(
                    "scene windows ({}, {}) against model ({}, {})",
                    scene.t_obs, scene.t_pred, self.config.t_obs, self.config.t_pred
                ),
            ));
        }
        let graph = SpatioTemporalGraph::from_scene(scene, self.config.graph())?;
        let normalized = scene.normalize().positions;
        let (n, t_obs, t_pred) = (scene.node_count(), scene.t_obs, scene.t_pred);
        let steps = scene.steps();
        let truth = Tensor::from_fn(&[t_pred * n, 3], |k| {
            let (row, c) = (k / 3, k % 3);
            let (t, i) = (row / n, row % n);
            normalized.data()[(c * steps + t_obs + t) * n + i]
        });
        let rows = head::real_rows(t_pred, graph.mask());
        Ok(PreparedScene { graph, truth, rows })
    }

    /// Records the forward pass and returns the `[t_pred · n_max, 9]` raw
    /// head output. `dropout_rng` enables dropout when the rate is nonzero.
    pub fn record_forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        scene: &PreparedScene,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let g = &scene.graph;
        let mask = g.mask();
        if g.capacity() != cfg.n_max {
            return Err(Error::shape("forward", format!("graph capacity {} for n_max {}", g.capacity(), cfg.n_max)));
        }
        let p = |id: ParamId| params.get(id);

        let raw_steps: Vec<Var> = (0..cfg.t_obs)
            .map(|t| tape.constant(g.nodes.step_matrix(t)))
            .collect();
        let embed_w = p(self.ids.embed);
        let embedded = raw_steps
            .iter()
            .map(|&x| tape.matmul(x, embed_w))
            .collect::<Result<Vec<_>>>()?;

        let mut adjacency = Vec::with_capacity(cfg.t_obs);
        for t in 0..cfg.t_obs {
            let a_bar = tape.constant(g.adjacency.normalized.slice0(t));
            adjacency.push(match self.ids.adj {
                None => a_bar,
                Some([wq, wk, wv]) => {
                    let vars = AdjAttnVars { wq: p(wq), wk: p(wk), wv: p(wv) };
                    reconstruct_step(tape, a_bar, &vars, mask, cfg.adj_attn())?.adjacency
                }
            });
        }

        let mut stgcn = embedded.clone();
        for &w in &self.ids.stgcn {
            stgcn = stgcn_layer(tape, &stgcn, &adjacency, p(w), mask)?;
        }

        let mut fused = match self.ids.fuse {
            None => stgcn,
            Some(fuse_w) => {
                let heads: Vec<GatHead> = self
                    .ids
                    .gat
                    .iter()
                    .map(|&(w, a)| GatHead { w: p(w), a: p(a) })
                    .collect();
                let gat_in = if cfg.gat_on_raw { &raw_steps } else { &embedded };
                let gat = gat_layer(tape, gat_in, &heads, mask)?;
                fuse(tape, &stgcn, &gat, p(fuse_w), mask)?
            }
        };

        if let Some(rng) = dropout_rng.filter(|_| cfg.dropout > 0.0) {
            let keep = 1.0 - cfg.dropout;
            for f in fused.iter_mut() {
                let shape = tape.value(*f).shape().to_vec();
                let m = tape.constant(Tensor::from_fn(&shape, |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                }));
                *f = tape.mul(*f, m)?;
            }
        }

        let stacked = tape.stack(&fused)?;
        let txp: Vec<Var> = self.ids.txp.iter().map(|&w| p(w)).collect();
        let extrapolated = head::txp_forward(tape, stacked, &txp)?;
        let raw = head::project_raw(tape, extrapolated, p(self.ids.head))?;
        // padded rows carry no signal; keep them exactly zero
        let rows_mask = Tensor::from_fn(&[cfg.t_pred * cfg.n_max, RAW_WIDTH], |k| {
            f64::from(u8::from(mask[(k / RAW_WIDTH) % cfg.n_max]))
        });
        let rm = tape.constant(rows_mask);
        tape.mul(raw, rm)
    }

    /// Summed NLL over the real nodes and predicted steps of one scene.
    pub fn record_scene_nll(&self, tape: &mut Tape, params: &BoundParams, scene: &PreparedScene, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let raw = self.record_forward(tape, params, scene, dropout_rng)?;
        let real = head::gather_rows(tape, raw, &scene.rows)?;
        let decoded = head::decode(tape, real)?;
        let truth = tape.constant(scene.truth.clone());
        head::gaussian_nll_sum(tape, &decoded, truth)
    }

    /// Summed scene NLL and its parameter gradients.
    pub fn scene_gradients(&self, scene: &PreparedScene, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<(f64, ParamGrads)> {
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let loss = self.record_scene_nll(&mut tape, &params, scene, dropout_rng)?;
        let grads = tape.gradients(loss)?;
        Ok((tape.value(loss).item(), grads.param_grads(self.store.len())))
    }

    /// Summed scene NLL without gradients.
    pub fn scene_nll(&self, scene: &PreparedScene) -> Result<f64> {
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let loss = self.record_scene_nll(&mut tape, &params, scene, None)?;
        Ok(tape.value(loss).item())
    }

    /// Raw head output `[t_pred, n_max, 9]` for one scene.
    pub fn raw_output(&self, scene: &PreparedScene) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let raw = self.record_forward(&mut tape, &params, scene, None)?;
        tape.value(raw).clone().reshaped(&[self.config.t_pred, self.config.n_max, RAW_WIDTH])
    }

    pub fn predict(&self, scene: &PreparedScene) -> Result<GaussianForecast> {
        head::forecast_from_raw(&self.raw_output(scene)?, scene.graph.mask())
    }
}

/// Small deterministic scene of `nodes` aircraft on diverging straight tracks.
pub fn toy_scene(nodes: usize, t_obs: usize, t_pred: usize) -> Result<Scene> {
    let steps = t_obs + t_pred;
    let positions = Tensor::from_fn(&[3, steps, nodes], |k| {
        let (c, t, i) = (k / (steps * nodes), (k / nodes) % steps, k % nodes);
        let base = [-71.0, 42.3, 3000.0][c];
        let rate = [0.01, -0.007, 15.0][c];
        base + rate * t as f64 * (1.0 + i as f64) + 0.05 * i as f64 * [1.0, 1.0, 200.0][c]
    });
    Scene::from_positions(positions, t_obs, t_pred, (0..nodes as u32).collect(), 0, "toy")
}

/// Finite-difference result for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Checked coordinates whose gradient exceeds the relative-error floor.
    pub active: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    pub params: Vec<ParamCheck>,
}

impl TrajectoryModel {
    /// Checks the summed scene NLL gradient against central differences
    /// for every parameter scalar.
    pub fn gradient_check(&self, scene: &PreparedScene, config: GradCheckConfig) -> Result<ModelGradCheck> {
        let point: Vec<Tensor> = self.store.entries().map(|e| e.value.clone()).collect();
        let report = grad_check(
            |tape, vars| {
                let params = BoundParams::from_vars(vars.to_vec());
                self.record_scene_nll(tape, &params, scene, None)
            },
            &point,
            config,
        )?;
        let mut params: Vec<ParamCheck> = self
            .store
            .entries()
            .zip(&report.per_input)
            .zip(&report.analytic)
            .map(|((e, &err), g)| ParamCheck {
                name: e.name.clone(),
                max_rel_error: err,
                checked: e.value.len(),
                active: g.data().iter().filter(|v| v.abs() > config.abs_floor).count(),
                excluded: 0,
            })
            .collect();
        for c in &report.excluded_kinks {
            let p = &mut params[c.input];
            p.excluded += 1;
            p.checked -= 1;
            if report.analytic[c.input].data()[c.element].abs() > config.abs_floor {
                p.active -= 1;
            }
        }
        Ok(ModelGradCheck { report, params })
    }
}
