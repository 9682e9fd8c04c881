//! Target-aware transformer layers (TTL) and modules (TTM).
//!
//! A TTL treats every query position as an independent batch element and
//! attends over the support grid of a hypercorrelation. Queries and the
//! shortcut are projected onto a reduced support grid, keys and values stay
//! on the input grid, and values outside the (downsampled) target mask are
//! zeroed before aggregation, so only foreground correlations survive.

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::correlation::Branch;
use crate::error::{config_err, shape_err, Result};
use crate::mask::BinaryMask;
use crate::ops;
use crate::params::{Conv2d, LayerNorm, Mlp, ParamBuilder};

/// Train/eval switch carrying the dropout stream.
pub enum Mode<'a> {
    Eval,
    Train {
        drop_rate: f64,
        rng: &'a mut ChaCha8Rng,
    },
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    /// Element dropout, applied to self-hypercorrelation inputs only.
    pub fn drop(&mut self, x: &Tensor, branch: Branch) -> Result<Tensor> {
        match self {
            Mode::Train { drop_rate, rng } if branch == Branch::QueryQuery => {
                drop_elements(x, *drop_rate, true, rng)
            }
            _ => Ok(x.clone()),
        }
    }
}

/// Zero each element independently with probability `rate` while training.
/// Survivors are not rescaled.
pub fn drop_elements(x: &Tensor, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(config_err!("drop rate must lie in [0, 1), got {rate}"));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 })
        .collect();
    let keep = Tensor::from_vec(keep, x.dims(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&keep)?)
}

/// Area pooling onto a coarser grid; a cell is foreground iff any source
/// pixel it covers is foreground.
pub fn downsample_mask(mask: &BinaryMask, target: (usize, usize)) -> Result<BinaryMask> {
    let (h, w) = mask.dims();
    let (th, tw) = target;
    if th == 0 || tw == 0 || th > h || tw > w {
        return Err(shape_err!(
            "cannot downsample a {h}x{w} mask to {th}x{tw}"
        ));
    }
    if (th, tw) == (h, w) {
        return Ok(mask.clone());
    }
    let bins = |i: usize, n: usize, t: usize| (i * n / t, ((i + 1) * n).div_ceil(t));
    Ok(BinaryMask::from_fn(th, tw, |ty, tx| {
        let (y0, y1) = bins(ty, h, th);
        let (x0, x1) = bins(tx, w, tw);
        (y0..y1).any(|y| (x0..x1).any(|x| mask.get(y, x)))
    }))
}

/// How a TTL shrinks the support grid for its queries and shortcut.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupportReduction {
    /// Stride-2 convolution.
    Halve,
    /// Stride-1 convolution.
    Keep,
    /// Stride-1 convolution followed by a mean over the whole grid (output 1x1).
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TtlConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub kernel: usize,
    pub reduction: SupportReduction,
}

impl TtlConfig {
    fn padding(&self) -> usize {
        self.kernel / 2
    }

    /// Support grid after the query/shortcut projection.
    pub fn output_grid(&self, grid: (usize, usize)) -> (usize, usize) {
        let p = self.padding();
        let k = self.kernel;
        match self.reduction {
            SupportReduction::Halve => ((grid.0 + 2 * p - k) / 2 + 1, (grid.1 + 2 * p - k) / 2 + 1),
            SupportReduction::Keep => (grid.0 + 2 * p - k + 1, grid.1 + 2 * p - k + 1),
            SupportReduction::Global => (1, 1),
        }
    }

    pub fn param_count(&self) -> usize {
        let k = self.kernel;
        2 * Conv2d::param_count(self.in_dim, self.hidden_dim, k)
            + 2 * Conv2d::param_count(self.in_dim, self.out_dim, k)
            + 2 * Mlp::param_count(self.out_dim, self.out_dim)
            + 2 * LayerNorm::param_count(self.out_dim)
    }
}

/// Outputs of the four support-grid projections.
#[derive(Debug, Clone)]
pub struct Projections {
    /// [N, S_q, D_hid]
    pub query: Tensor,
    /// [N, D_hid, S_k]
    pub key: Tensor,
    /// [N, S_k, D_out], before masking
    pub value: Tensor,
    /// [N, S_q, D_out]
    pub shortcut: Tensor,
    pub query_grid: (usize, usize),
    pub key_grid: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Ttl {
    cfg: TtlConfig,
    conv_q: Conv2d,
    conv_k: Conv2d,
    conv_v: Conv2d,
    conv_sc: Conv2d,
    mlp1: Mlp,
    norm1: LayerNorm,
    mlp2: Mlp,
    norm2: LayerNorm,
}

impl Ttl {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: TtlConfig) -> Result<Self> {
        if cfg.kernel.is_multiple_of(2) {
            return Err(config_err!("TTL kernel must be odd, got {}", cfg.kernel));
        }
        let p = cfg.padding();
        let q_stride = if cfg.reduction == SupportReduction::Halve { 2 } else { 1 };
        let (din, dh, dout, k) = (cfg.in_dim, cfg.hidden_dim, cfg.out_dim, cfg.kernel);
        Ok(Self {
            cfg,
            conv_q: Conv2d::new(&mut pb.pp("conv_q"), din, dh, k, q_stride, p)?,
            conv_k: Conv2d::new(&mut pb.pp("conv_k"), din, dh, k, 1, p)?,
            conv_v: Conv2d::new(&mut pb.pp("conv_v"), din, dout, k, 1, p)?,
            conv_sc: Conv2d::new(&mut pb.pp("conv_sc"), din, dout, k, q_stride, p)?,
            mlp1: Mlp::new(&mut pb.pp("mlp1"), dout, dout)?,
            norm1: LayerNorm::new(&mut pb.pp("norm1"), dout)?,
            mlp2: Mlp::new(&mut pb.pp("mlp2"), dout, dout)?,
            norm2: LayerNorm::new(&mut pb.pp("norm2"), dout)?,
        })
    }

    pub fn config(&self) -> &TtlConfig {
        &self.cfg
    }

    pub fn conv_q(&self) -> &Conv2d {
        &self.conv_q
    }

    pub fn conv_k(&self) -> &Conv2d {
        &self.conv_k
    }

    pub fn conv_v(&self) -> &Conv2d {
        &self.conv_v
    }

    pub fn conv_sc(&self) -> &Conv2d {
        &self.conv_sc
    }

    pub fn mlp1(&self) -> &Mlp {
        &self.mlp1
    }

    pub fn mlp2(&self) -> &Mlp {
        &self.mlp2
    }

    pub fn norm1(&self) -> &LayerNorm {
        &self.norm1
    }

    pub fn norm2(&self) -> &LayerNorm {
        &self.norm2
    }

    /// Project channels-first support maps [N, D_in, H, W].
    pub fn project(&self, x: &Tensor) -> Result<Projections> {
        let (n, c, _, _) = x
            .dims4()
            .map_err(|_| shape_err!("TTL input must be [N,D,H,W], got {:?}", x.dims()))?;
        if c != self.cfg.in_dim {
            return Err(shape_err!("TTL expects {} input channels, got {c}", self.cfg.in_dim));
        }
        let (dh, dout) = (self.cfg.hidden_dim, self.cfg.out_dim);
        let mut q = self.conv_q.forward(x)?;
        let mut sc = self.conv_sc.forward(x)?;
        if self.cfg.reduction == SupportReduction::Global {
            q = q.flatten_from(2)?.mean_keepdim(2)?.unsqueeze(3)?;
            sc = sc.flatten_from(2)?.mean_keepdim(2)?.unsqueeze(3)?;
        }
        let query_grid = (q.dims()[2], q.dims()[3]);
        let sq = query_grid.0 * query_grid.1;
        let k = self.conv_k.forward(x)?;
        let key_grid = (k.dims()[2], k.dims()[3]);
        let sk = key_grid.0 * key_grid.1;
        let v = self.conv_v.forward(x)?;
        Ok(Projections {
            query: q.reshape((n, dh, sq))?.transpose(1, 2)?.contiguous()?,
            key: k.reshape((n, dh, sk))?,
            value: v.reshape((n, dout, sk))?.transpose(1, 2)?.contiguous()?,
            shortcut: sc.reshape((n, dout, sq))?.transpose(1, 2)?.contiguous()?,
            query_grid,
            key_grid,
        })
    }

    /// Softmax(Q K^T) over keys, [N, S_q, S_k]. No temperature scaling.
    pub fn attention_weights(&self, proj: &Projections) -> Result<Tensor> {
        ops::softmax_last(&proj.query.matmul(&proj.key)?)
    }

    /// Masked aggregation Softmax(Q K^T)(V * M), [N, S_q, D_out].
    pub fn attend(&self, proj: &Projections, mask: &BinaryMask) -> Result<Tensor> {
        let sk = proj.key_grid.0 * proj.key_grid.1;
        let m = downsample_mask(mask, proj.key_grid)?
            .to_tensor(proj.value.dtype(), proj.value.device())?
            .reshape((1, sk, 1))?;
        let v = proj.value.broadcast_mul(&m)?;
        Ok(self.attention_weights(proj)?.matmul(&v)?)
    }

    /// The two MLP + add + norm stages.
    pub fn finish(&self, attended: &Tensor, shortcut: &Tensor) -> Result<Tensor> {
        let x = ((self.mlp1.forward(attended)? + attended)? + shortcut)?;
        let x = self.norm1.forward(&x)?;
        let y = (self.mlp2.forward(&x)? + &x)?;
        self.norm2.forward(&y)
    }

    /// Channels-first forward: [N, D_in, H, W] -> [N, D_out, H', W'].
    pub fn forward_maps(
        &self,
        x: &Tensor,
        mask: &BinaryMask,
        branch: Branch,
        mode: &mut Mode<'_>,
    ) -> Result<Tensor> {
        let x = mode.drop(x, branch)?;
        let proj = self.project(&x)?;
        let attended = self.attend(&proj, mask)?;
        let out = self.finish(&attended, &proj.shortcut)?;
        let n = out.dims()[0];
        let (h, w) = proj.query_grid;
        Ok(out
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, self.cfg.out_dim, h, w))?)
    }
}

fn to_maps(x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (n, s, d) = x
        .dims3()
        .map_err(|_| shape_err!("expected [N_q, S, D], got {:?}", x.dims()))?;
    if s != grid.0 * grid.1 {
        return Err(shape_err!(
            "support axis of length {s} does not match grid {}x{}",
            grid.0,
            grid.1
        ));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((n, d, grid.0, grid.1))?)
}

fn from_maps(x: &Tensor) -> Result<(Tensor, (usize, usize))> {
    let (n, d, h, w) = x.dims4()?;
    Ok((x.reshape((n, d, h * w))?.transpose(1, 2)?.contiguous()?, (h, w)))
}

fn check_mask(mask: &BinaryMask, grid: (usize, usize)) -> Result<()> {
    if mask.height() < grid.0 || mask.width() < grid.1 {
        return Err(shape_err!(
            "mask {}x{} is smaller than support grid {}x{}",
            mask.height(),
            mask.width(),
            grid.0,
            grid.1
        ));
    }
    Ok(())
}

/// One TTL on a [N_q, H_s*W_s, D_in] volume; returns [N_q, H'*W', D_out]
/// and the reduced grid.
pub fn ttl_forward(
    x_in: &Tensor,
    support_grid: (usize, usize),
    mask: &BinaryMask,
    ttl: &Ttl,
    branch: Branch,
    mode: &mut Mode<'_>,
) -> Result<(Tensor, (usize, usize))> {
    check_mask(mask, support_grid)?;
    let maps = to_maps(x_in, support_grid)?;
    from_maps(&ttl.forward_maps(&maps, mask, branch, mode)?)
}

/// Position of a TTM inside a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtmStage {
    /// Halves the support grid, then refines at that size.
    First,
    /// Halves the support grid, then collapses it to a single position.
    Second,
}

impl TtmStage {
    fn reductions(self) -> [SupportReduction; 2] {
        match self {
            TtmStage::First => [SupportReduction::Halve, SupportReduction::Keep],
            TtmStage::Second => [SupportReduction::Halve, SupportReduction::Global],
        }
    }
}

/// Two chained TTLs.
#[derive(Debug, Clone)]
pub struct Ttm {
    layers: [Ttl; 2],
    stage: TtmStage,
}

impl Ttm {
    pub fn config_for(in_dim: usize, dim: usize, kernel: usize, stage: TtmStage) -> [TtlConfig; 2] {
        let [ra, rb] = stage.reductions();
        [
            TtlConfig {
                in_dim,
                hidden_dim: dim,
                out_dim: dim,
                kernel,
                reduction: ra,
            },
            TtlConfig {
                in_dim: dim,
                hidden_dim: dim,
                out_dim: dim,
                kernel,
                reduction: rb,
            },
        ]
    }

    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_dim: usize,
        dim: usize,
        kernel: usize,
        stage: TtmStage,
    ) -> Result<Self> {
        let [a, b] = Self::config_for(in_dim, dim, kernel, stage);
        Ok(Self {
            layers: [Ttl::new(&mut pb.pp("ttl_a"), a)?, Ttl::new(&mut pb.pp("ttl_b"), b)?],
            stage,
        })
    }

    pub fn param_count(in_dim: usize, dim: usize, kernel: usize, stage: TtmStage) -> usize {
        Self::config_for(in_dim, dim, kernel, stage)
            .iter()
            .map(TtlConfig::param_count)
            .sum()
    }

    pub fn stage(&self) -> TtmStage {
        self.stage
    }

    pub fn layers(&self) -> &[Ttl; 2] {
        &self.layers
    }

    pub fn output_grid(&self, grid: (usize, usize)) -> (usize, usize) {
        let g = self.layers[0].config().output_grid(grid);
        self.layers[1].config().output_grid(g)
    }

    pub fn forward_maps(
        &self,
        x: &Tensor,
        mask: &BinaryMask,
        branch: Branch,
        mode: &mut Mode<'_>,
    ) -> Result<Tensor> {
        let y = self.layers[0].forward_maps(x, mask, branch, mode)?;
        self.layers[1].forward_maps(&y, mask, branch, mode)
    }
}

/// Both TTLs of a TTM on a [N_q, H_s*W_s, D] volume.
pub fn ttm_forward(
    x: &Tensor,
    support_grid: (usize, usize),
    mask: &BinaryMask,
    ttm: &Ttm,
    branch: Branch,
    mode: &mut Mode<'_>,
) -> Result<(Tensor, (usize, usize))> {
    check_mask(mask, support_grid)?;
    let maps = to_maps(x, support_grid)?;
    from_maps(&ttm.forward_maps(&maps, mask, branch, mode)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    fn random(dims: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    fn ttl(cfg: TtlConfig, seed: u64) -> (ParamStore, Ttl) {
        let mut store = ParamStore::new(seed, DType::F64);
        let layer = Ttl::new(&mut store.root().pp("ttl"), cfg).unwrap();
        (store, layer)
    }

    fn cfg(in_dim: usize, dim: usize, reduction: SupportReduction) -> TtlConfig {
        TtlConfig {
            in_dim,
            hidden_dim: dim,
            out_dim: dim,
            kernel: 3,
            reduction,
        }
    }

    #[test]
    fn drop_zero_rate_and_eval_are_identity() {
        let x = random(&[4, 5, 3], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(flat(&drop_elements(&x, 0.0, true, &mut rng).unwrap()), flat(&x));
        assert_eq!(flat(&drop_elements(&x, 0.5, false, &mut rng).unwrap()), flat(&x));
    }

    #[test]
    fn drop_rate_out_of_range_is_config_error() {
        let x = random(&[2], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for rate in [-0.1, 1.0, 1.5] {
            assert!(matches!(
                drop_elements(&x, rate, true, &mut rng),
                Err(crate::Error::Config(_))
            ));
        }
    }

    #[test]
    fn drop_fraction_concentrates() {
        // Binomial(1e5, 0.5) has sd ~158 elements, so +-0.02 is ~12 sd.
        let x = (random(&[100_000], 3) + 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = flat(&drop_elements(&x, 0.5, true, &mut rng).unwrap());
        let zeros = y.iter().filter(|&&v| v == 0.0).count() as f64 / y.len() as f64;
        assert!((zeros - 0.5).abs() < 0.02, "{zeros}");
        // survivors are untouched
        for (a, b) in y.iter().zip(flat(&x)) {
            assert!(*a == 0.0 || *a == b);
        }
    }

    #[test]
    fn downsample_examples() {
        let ones = BinaryMask::ones(4, 4);
        assert_eq!(downsample_mask(&ones, (2, 2)).unwrap(), BinaryMask::ones(2, 2));
        let zeros = BinaryMask::zeros(4, 4);
        assert_eq!(downsample_mask(&zeros, (2, 2)).unwrap(), BinaryMask::zeros(2, 2));
        let mut single = BinaryMask::zeros(4, 4);
        single.set(2, 1, true);
        let expected = BinaryMask::from_fn(2, 2, |y, x| y == 1 && x == 0);
        assert_eq!(downsample_mask(&single, (2, 2)).unwrap(), expected);
        assert!(downsample_mask(&single, (5, 4)).is_err());
    }

    #[test]
    fn downsample_uneven_bins_cover_source() {
        // 13 -> 7 bins overlap; every source pixel lies in some bin
        for y in 0..13 {
            for x in 0..13 {
                let mut m = BinaryMask::zeros(13, 13);
                m.set(y, x, true);
                assert!(downsample_mask(&m, (7, 7)).unwrap().has_foreground());
            }
        }
    }

    #[test]
    fn zero_mask_gives_exact_zero_attention() {
        let (_s, layer) = ttl(cfg(3, 4, SupportReduction::Halve), 1);
        let x = random(&[5, 3, 4, 4], 2);
        let proj = layer.project(&x).unwrap();
        let out = layer.attend(&proj, &BinaryMask::zeros(4, 4)).unwrap();
        assert!(flat(&out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let (_s, layer) = ttl(cfg(2, 3, SupportReduction::Keep), 4);
        let x = (random(&[3, 2, 3, 3], 5) * 10.0).unwrap();
        let proj = layer.project(&x).unwrap();
        let w = layer.attention_weights(&proj).unwrap();
        for s in flat(&w.sum(2).unwrap()) {
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn query_axis_permutation_commutes() {
        let (_s, layer) = ttl(cfg(2, 4, SupportReduction::Halve), 6);
        let x = random(&[4, 9, 2], 7);
        let mask = BinaryMask::from_fn(3, 3, |y, x| (y + x) % 2 == 0);
        let perm = Tensor::new(&[2u32, 0, 3, 1], &Device::Cpu).unwrap();
        let (a, _) = ttl_forward(&x, (3, 3), &mask, &layer, Branch::QuerySupport, &mut Mode::Eval).unwrap();
        let xp = x.index_select(&perm, 0).unwrap();
        let (b, _) = ttl_forward(&xp, (3, 3), &mask, &layer, Branch::QuerySupport, &mut Mode::Eval).unwrap();
        let ap = a.index_select(&perm, 0).unwrap();
        for (u, v) in flat(&ap).iter().zip(flat(&b)) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_out_values_do_not_matter() {
        let (_s, layer) = ttl(cfg(2, 3, SupportReduction::Halve), 8);
        let x = random(&[3, 2, 4, 4], 9);
        let mask = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        let proj = layer.project(&x).unwrap();
        let base = layer.attend(&proj, &mask).unwrap();
        let mut noisy = proj.clone();
        let keep = mask.to_tensor(DType::F64, &Device::Cpu).unwrap().reshape((1, 16, 1)).unwrap();
        let noise = (random(&[3, 16, 3], 10) * 100.0).unwrap();
        let off = (1.0 - keep).unwrap();
        noisy.value = (proj.value.clone() + noise.broadcast_mul(&off).unwrap()).unwrap();
        let perturbed = layer.attend(&noisy, &mask).unwrap();
        for (u, v) in flat(&base).iter().zip(flat(&perturbed)) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn ttm_grid_schedule() {
        let mut store = ParamStore::new(0, DType::F32);
        let mut root = store.root();
        let first = Ttm::new(&mut root.pp("a"), 3, 4, 3, TtmStage::First).unwrap();
        let second = Ttm::new(&mut root.pp("b"), 4, 4, 3, TtmStage::Second).unwrap();
        assert_eq!(first.output_grid((13, 13)), (7, 7));
        assert_eq!(first.output_grid((25, 25)), (13, 13));
        for g in [(1, 1), (2, 2), (7, 7), (13, 13), (25, 25), (4, 6)] {
            assert_eq!(second.output_grid(g), (1, 1));
        }
    }

    #[test]
    fn ttm_forward_shapes() {
        let mut store = ParamStore::new(0, DType::F64);
        let mut root = store.root();
        let first = Ttm::new(&mut root.pp("a"), 3, 4, 3, TtmStage::First).unwrap();
        let second = Ttm::new(&mut root.pp("b"), 4, 4, 3, TtmStage::Second).unwrap();
        let x = random(&[2, 13 * 13, 3], 1);
        let mask = BinaryMask::ones(26, 26);
        let (y, g) = ttm_forward(&x, (13, 13), &mask, &first, Branch::QuerySupport, &mut Mode::Eval).unwrap();
        assert_eq!(g, (7, 7));
        assert_eq!(y.dims(), &[2, 49, 4]);
        let (z, g) = ttm_forward(&y, g, &mask, &second, Branch::QuerySupport, &mut Mode::Eval).unwrap();
        assert_eq!(g, (1, 1));
        assert_eq!(z.dims(), &[2, 1, 4]);
    }

    #[test]
    fn zero_input_zero_bias_output_is_norm_bias() {
        let mut store = ParamStore::new(3, DType::F64);
        let first = Ttm::new(&mut store.root().pp("a"), 2, 4, 3, TtmStage::First).unwrap();
        store.fill_where(|n| n.ends_with("bias"), 0.0).unwrap();
        let x = Tensor::zeros((2, 16, 2), DType::F64, &Device::Cpu).unwrap();
        let (y, _) = ttm_forward(&x, (4, 4), &BinaryMask::ones(4, 4), &first, Branch::QuerySupport, &mut Mode::Eval).unwrap();
        // every projection is zero, layer norm of zeros is its (zero) bias
        assert!(flat(&y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_smaller_than_grid_is_shape_error() {
        let (_s, layer) = ttl(cfg(2, 2, SupportReduction::Keep), 0);
        let x = random(&[1, 16, 2], 0);
        let r = ttl_forward(&x, (4, 4), &BinaryMask::ones(2, 2), &layer, Branch::QuerySupport, &mut Mode::Eval);
        assert!(matches!(r, Err(crate::Error::Shape(_))));
    }

    #[test]
    fn param_count_matches_closed_form() {
        for (din, d, red) in [(3, 4, SupportReduction::Halve), (23, 20, SupportReduction::Global), (1, 1, SupportReduction::Keep)] {
            let c = cfg(din, d, red);
            let (store, _) = ttl(c, 0);
            let k2 = 9;
            let closed = 2 * (k2 * din * d + d) + 2 * (k2 * din * d + d) + 4 * (d * d + d) + 4 * d;
            assert_eq!(store.num_scalars(), closed);
            assert_eq!(c.param_count(), closed);
        }
    }

    #[test]
    fn drop_only_on_self_branch() {
        let x = (random(&[1000], 0) + 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mode = Mode::Train { drop_rate: 0.5, rng: &mut rng };
        assert_eq!(flat(&mode.drop(&x, Branch::QuerySupport).unwrap()), flat(&x));
        assert_ne!(flat(&mode.drop(&x, Branch::QueryQuery).unwrap()), flat(&x));
    }
}
