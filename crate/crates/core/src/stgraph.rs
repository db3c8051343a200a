//! Spatiotemporal graph construction: node features, inverse-distance
//! adjacency, symmetric normalization, and padding to a fixed capacity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Scene;
use crate::numerics::Tensor;

/// Distances below this are treated as near-coincident.
pub const NEAR_COINCIDENT: f64 = 1e-6;
/// Kernel value assigned to near-coincident, but not identical, positions.
pub const KERNEL_CLAMP: f64 = 1e6;

/// Coordinates in which pairwise distances are measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelSpace {
    Raw,
    #[default]
    Normalized,
}

impl std::str::FromStr for KernelSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(KernelSpace::Raw),
            "normalized" => Ok(KernelSpace::Normalized),
            _ => Err(Error::Config(format!(
                "kernel_space must be raw or normalized, got {s:?}"
            ))),
        }
    }
}

/// Inverse Euclidean distance, zero for identical positions.
pub fn kernel(vi: [f64; 3], vj: [f64; 3]) -> f64 {
    let d = vi
        .iter()
        .zip(&vj)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if d == 0.0 {
        0.0
    } else if d < NEAR_COINCIDENT {
        KERNEL_CLAMP
    } else {
        1.0 / d
    }
}

/// Node features, shape `[3, steps, nodes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeTensor {
    pub values: Tensor,
}

impl NodeTensor {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 || values.shape()[0] != 3 {
            return Err(Error::shape(
                "node_tensor",
                format!("expected [3, T, N], got {:?}", values.shape()),
            ));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite { op: "node_tensor" });
        }
        Ok(Self { values })
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn position(&self, step: usize, node: usize) -> [f64; 3] {
        std::array::from_fn(|c| self.values.at(&[c, step, node]))
    }

    /// Features of one step as a `[nodes, 3]` matrix.
    pub fn step_matrix(&self, step: usize) -> Tensor {
        let n = self.nodes();
        Tensor::from_fn(&[n, 3], |k| self.values.at(&[k % 3, step, k / 3]))
    }

    /// Observation steps of a normalized scene.
    pub fn from_scene_observed(scene: &Scene, space: KernelSpace) -> Result<Self> {
        let positions = match space {
            KernelSpace::Normalized => scene.normalize().positions,
            KernelSpace::Raw => scene.positions.clone(),
        };
        let (t_obs, n) = (scene.t_obs, scene.node_count());
        let steps = scene.steps();
        Self::new(Tensor::from_fn(&[3, t_obs, n], |k| {
            let (c, t, i) = (k / (t_obs * n), (k / n) % t_obs, k % n);
            positions.data()[(c * steps + t) * n + i]
        }))
    }
}

/// Raw and normalized adjacency per step, plus the real-node mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyStack {
    /// `[T, N, N]` kernel values.
    pub raw: Tensor,
    /// `[T, N, N]` symmetric normalization of `raw + I`.
    pub normalized: Tensor,
    pub mask: Vec<bool>,
}

impl AdjacencyStack {
    pub fn from_nodes(nodes: &NodeTensor) -> Result<Self> {
        let raw = build_adjacency(nodes);
        let (t, n) = (nodes.steps(), nodes.nodes());
        let mut steps = Vec::with_capacity(t);
        for s in 0..t {
            steps.push(normalize_adjacency(&raw.slice0(s))?);
        }
        let normalized = if t == 0 {
            Tensor::zeros(&[0, n, n])
        } else {
            Tensor::stack(&steps)?
        };
        Ok(Self {
            raw,
            normalized,
            mask: vec![true; n],
        })
    }

    pub fn steps(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn capacity(&self) -> usize {
        self.mask.len()
    }

    pub fn real_nodes(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `raw[t][i][j] = kernel(v_t^i, v_t^j)` with an exactly zero diagonal.
pub fn build_adjacency(nodes: &NodeTensor) -> Tensor {
    let (t, n) = (nodes.steps(), nodes.nodes());
    let mut out = Tensor::zeros(&[t, n, n]);
    for s in 0..t {
        for i in 0..n {
            let vi = nodes.position(s, i);
            for j in i + 1..n {
                let k = kernel(vi, nodes.position(s, j));
                out.set(&[s, i, j], k);
                out.set(&[s, j, i], k);
            }
        }
    }
    out
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(raw: &Tensor) -> Result<Tensor> {
    let (n, m) = raw.dims2("normalize_adjacency")?;
    if n != m {
        return Err(Error::shape("normalize_adjacency", format!("{n}x{m} is not square")));
    }
    let a = raw.data();
    let hat = |i: usize, j: usize| a[i * n + j] + if i == j { 1.0 } else { 0.0 };
    let mut inv_sqrt = Vec::with_capacity(n);
    for i in 0..n {
        let degree: f64 = (0..n).map(|j| hat(i, j)).sum();
        if !(degree > 0.0) {
            return Err(Error::DegenerateDegree { node: i, degree });
        }
        inv_sqrt.push(1.0 / degree.sqrt());
    }
    Ok(Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        inv_sqrt[i] * hat(i, j) * inv_sqrt[j]
    }))
}

/// Zero-pads the node and adjacency tensors to `n_max` nodes.
pub fn pad_to_capacity(
    stack: &AdjacencyStack,
    nodes: &NodeTensor,
    n_max: usize,
) -> Result<(AdjacencyStack, NodeTensor)> {
    let n = nodes.nodes();
    if n > n_max {
        return Err(Error::CapacityExceeded {
            nodes: n,
            capacity: n_max,
        });
    }
    let t = nodes.steps();
    let pad_square = |src: &Tensor| {
        Tensor::from_fn(&[t, n_max, n_max], |k| {
            let (s, i, j) = (k / (n_max * n_max), (k / n_max) % n_max, k % n_max);
            if i < n && j < n {
                src.at(&[s, i, j])
            } else {
                0.0
            }
        })
    };
    let values = Tensor::from_fn(&[3, t, n_max], |k| {
        let (c, s, i) = (k / (t * n_max), (k / n_max) % t, k % n_max);
        if i < n {
            nodes.values.at(&[c, s, i])
        } else {
            0.0
        }
    });
    let mut mask: Vec<bool> = stack.mask.iter().copied().take(n).collect();
    mask.resize(n_max, false);
    Ok((
        AdjacencyStack {
            raw: pad_square(&stack.raw),
            normalized: pad_square(&stack.normalized),
            mask,
        },
        NodeTensor { values },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub n_max: usize,
    pub kernel_space: KernelSpace,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            n_max: 16,
            kernel_space: KernelSpace::Normalized,
        }
    }
}

/// Model input for one scene: padded node features and adjacency over the
/// observation steps.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatioTemporalGraph {
    /// Normalized coordinates, `[3, t_obs, n_max]`.
    pub nodes: NodeTensor,
    pub adjacency: AdjacencyStack,
    pub n_real: usize,
}

impl SpatioTemporalGraph {
    pub fn from_scene(scene: &Scene, config: GraphConfig) -> Result<Self> {
        let features = NodeTensor::from_scene_observed(scene, KernelSpace::Normalized)?;
        let distance_nodes = match config.kernel_space {
            KernelSpace::Normalized => features.clone(),
            KernelSpace::Raw => NodeTensor::from_scene_observed(scene, KernelSpace::Raw)?,
        };
        let stack = AdjacencyStack::from_nodes(&distance_nodes)?;
        let (adjacency, nodes) = pad_to_capacity(&stack, &features, config.n_max)?;
        Ok(Self {
            nodes,
            adjacency,
            n_real: scene.node_count(),
        })
    }

    pub fn mask(&self) -> &[bool] {
        &self.adjacency.mask
    }

    pub fn capacity(&self) -> usize {
        self.adjacency.capacity()
    }
}

/// Splits a scene with more than `n_max` aircraft into groups of nearest
/// neighbours at the first observed step.
///
/// Each group is seeded with the lowest remaining node index and filled with
/// its `n_max - 1` nearest remaining nodes (normalized coordinates, ties by
/// index). Groups smaller than `min_aircraft` are dropped.
pub fn split_to_capacity(scene: &Scene, n_max: usize, min_aircraft: usize) -> Result<Vec<Scene>> {
    if n_max == 0 {
        return Err(Error::Config("n_max must be at least 1".into()));
    }
    let n = scene.node_count();
    if n <= n_max {
        return Ok(vec![scene.clone()]);
    }
    let normalized = scene.normalize().positions;
    let steps = scene.steps();
    let at0 = |i: usize| -> [f64; 3] { std::array::from_fn(|c| normalized.data()[(c * steps) * n + i]) };
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    while let Some(&seed) = remaining.first() {
        let origin = at0(seed);
        let mut by_distance: Vec<(f64, usize)> = remaining
            .iter()
            .map(|&i| {
                let p = at0(i);
                let d2: f64 = (0..3).map(|c| (p[c] - origin[c]).powi(2)).sum();
                (d2, i)
            })
            .collect();
        by_distance.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut group: Vec<usize> = by_distance.iter().take(n_max).map(|&(_, i)| i).collect();
        group.sort_unstable();
        remaining.retain(|i| !group.contains(i));
        if group.len() >= min_aircraft.max(1) {
            out.push(scene.select_nodes(&group)?);
        }
    }
    Ok(out)
}

/// `[rows, cols]` matrix that is 1 on rows of real nodes and 0 elsewhere.
pub fn row_mask_matrix(mask: &[bool], cols: usize) -> Tensor {
    Tensor::from_fn(&[mask.len(), cols], |k| f64::from(u8::from(mask[k / cols.max(1)])))
}

/// `[n, n]` matrix that is 1 where both row and column are real nodes.
pub fn pair_mask_matrix(mask: &[bool]) -> Tensor {
    let n = mask.len();
    Tensor::from_fn(&[n, n], |k| f64::from(u8::from(mask[k / n] && mask[k % n])))
}
