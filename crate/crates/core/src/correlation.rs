//! Clamped cosine affinities between feature maps and their stacking into
//! hypercorrelation volumes.
//!
//! Positions are flattened row-major (y-major): index = y * W + x.

use candle_core::{Tensor, D};

use crate::error::{shape_err, Result};

/// Lower bound on the norm product so zero feature vectors give affinity 0.
pub const AFFINITY_EPS: f64 = 1e-8;

/// Which pair of images a hypercorrelation relates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    /// Query against support.
    QuerySupport,
    /// Query against itself.
    QueryQuery,
}

/// Affinity matrix [N_q, N_s] with entries in [0, 1].
#[derive(Debug, Clone)]
pub struct Affinity {
    values: Tensor,
    query_grid: (usize, usize),
    support_grid: (usize, usize),
}

impl Affinity {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn query_grid(&self) -> (usize, usize) {
        self.query_grid
    }

    pub fn support_grid(&self) -> (usize, usize) {
        self.support_grid
    }
}

fn flatten_positions(f: &Tensor) -> Result<(Tensor, (usize, usize))> {
    let (c, h, w) = f
        .dims3()
        .map_err(|_| shape_err!("feature map must be [C,H,W], got {:?}", f.dims()))?;
    Ok((f.reshape((c, h * w))?, (h, w)))
}

/// ReLU(cos(Fq(p_q), Fs(p_s))) for every pair of positions.
pub fn cosine_affinity(fq: &Tensor, fs: &Tensor) -> Result<Affinity> {
    let (q, query_grid) = flatten_positions(fq)?;
    let (s, support_grid) = flatten_positions(fs)?;
    if q.dims()[0] != s.dims()[0] {
        return Err(shape_err!(
            "channel mismatch: query has {}, support has {}",
            q.dims()[0],
            s.dims()[0]
        ));
    }
    let qn = q.sqr()?.sum_keepdim(0)?.sqrt()?; // [1, Nq]
    let sn = s.sqr()?.sum_keepdim(0)?.sqrt()?; // [1, Ns]
    let dot = q.t()?.matmul(&s)?; // [Nq, Ns]
    let denom = qn.t()?.broadcast_mul(&sn)?.maximum(AFFINITY_EPS)?;
    let values = dot.broadcast_div(&denom)?.relu()?;
    Ok(Affinity {
        values,
        query_grid,
        support_grid,
    })
}

/// Affinity of a feature map with itself.
pub fn self_affinity(fq: &Tensor) -> Result<Affinity> {
    cosine_affinity(fq, fq)
}

/// Stack of per-block affinities, [N_q, N_s, D].
#[derive(Debug, Clone)]
pub struct Hypercorrelation {
    values: Tensor,
    kind: Branch,
    query_grid: (usize, usize),
    support_grid: (usize, usize),
}

impl Hypercorrelation {
    /// Wrap an existing [N_q, N_s, D] tensor.
    pub fn from_tensor(
        values: Tensor,
        kind: Branch,
        query_grid: (usize, usize),
        support_grid: (usize, usize),
    ) -> Result<Self> {
        let (nq, ns, _) = values
            .dims3()
            .map_err(|_| shape_err!("hypercorrelation must be [Nq,Ns,D], got {:?}", values.dims()))?;
        if nq != query_grid.0 * query_grid.1 || ns != support_grid.0 * support_grid.1 {
            return Err(shape_err!(
                "hypercorrelation {:?} inconsistent with grids {query_grid:?} / {support_grid:?}",
                values.dims()
            ));
        }
        Ok(Self {
            values,
            kind,
            query_grid,
            support_grid,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn kind(&self) -> Branch {
        self.kind
    }

    pub fn query_grid(&self) -> (usize, usize) {
        self.query_grid
    }

    pub fn support_grid(&self) -> (usize, usize) {
        self.support_grid
    }

    pub fn depth(&self) -> usize {
        self.values.dims()[2]
    }

    /// The d-th block's affinity matrix.
    pub fn slice(&self, d: usize) -> Result<Tensor> {
        Ok(self.values.narrow(D::Minus1, d, 1)?.squeeze(D::Minus1)?)
    }

    pub fn unstack(&self) -> Result<Vec<Tensor>> {
        (0..self.depth()).map(|d| self.slice(d)).collect()
    }

    /// Channels-first support maps [N_q, D, H_s, W_s] for support-grid convolutions.
    pub fn support_maps(&self) -> Result<Tensor> {
        let (nq, _, d) = self.values.dims3()?;
        let (h, w) = self.support_grid;
        Ok(self
            .values
            .transpose(1, 2)?
            .contiguous()?
            .reshape((nq, d, h, w))?)
    }
}

/// Stack D affinities along a trailing depth axis.
pub fn stack_hypercorrelation(affinities: &[Affinity], kind: Branch) -> Result<Hypercorrelation> {
    let first = affinities
        .first()
        .ok_or_else(|| shape_err!("cannot stack an empty list of affinities"))?;
    for a in affinities {
        if a.values.dims() != first.values.dims()
            || a.query_grid != first.query_grid
            || a.support_grid != first.support_grid
        {
            return Err(shape_err!(
                "ragged affinities: {:?} vs {:?}",
                a.values.dims(),
                first.values.dims()
            ));
        }
    }
    let tensors: Vec<&Tensor> = affinities.iter().map(|a| &a.values).collect();
    let values = Tensor::stack(&tensors, 2)?;
    Ok(Hypercorrelation {
        values,
        kind,
        query_grid: first.query_grid,
        support_grid: first.support_grid,
    })
}
