//! The bi-transformer pyramid: one TBTM per backbone layer (4, 3, 2), the
//! MixToken carried between them, the intermediate and final predictions,
//! and the weighted multi-level loss.

use candle_core::{DType, Device, Tensor};

use crate::backbone::{FeaturePyramid, PYRAMID_LAYERS};
use crate::correlation::{cosine_affinity, stack_hypercorrelation, Branch, Hypercorrelation};
use crate::error::{config_err, shape_err, Result};
use crate::mask::BinaryMask;
use crate::ops;
use crate::params::{Conv2d, ParamBuilder, ParamStore};
use crate::ttl::{Mode, Ttm, TtmStage};

/// Default MixToken width.
pub const DEFAULT_DIM: usize = 20;
/// Initial bias of the two-channel output convolutions.
pub const LOGIT_BIAS_INIT: f64 = 2.0;
/// Default intermediate-loss weight.
pub const DEFAULT_ALPHA: f64 = 0.1;

/// Fused similarity evidence per query position, [N_q, 1, D].
#[derive(Debug, Clone)]
pub struct MixToken {
    values: Tensor,
    grid: (usize, usize),
}

impl MixToken {
    pub fn new(values: Tensor, grid: (usize, usize)) -> Result<Self> {
        let (n, one, _) = values
            .dims3()
            .map_err(|_| shape_err!("MixToken must be [N_q,1,D], got {:?}", values.dims()))?;
        if one != 1 || n != grid.0 * grid.1 {
            return Err(shape_err!(
                "MixToken {:?} does not fit grid {grid:?}",
                values.dims()
            ));
        }
        Ok(Self { values, grid })
    }

    pub fn zeros(grid: (usize, usize), dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        let values = Tensor::zeros((grid.0 * grid.1, 1, dim), dtype, device)?;
        Ok(Self { values, grid })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.values.dims()[2]
    }

    /// Channels-first spatial view [D, H, W].
    pub fn to_spatial(&self) -> Result<Tensor> {
        let (h, w) = self.grid;
        Ok(self
            .values
            .reshape((h, w, self.dim()))?
            .permute((2, 0, 1))?
            .contiguous()?)
    }

    fn from_spatial(x: &Tensor) -> Result<Self> {
        let (d, h, w) = x.dims3()?;
        let values = x.permute((1, 2, 0))?.contiguous()?.reshape((h * w, 1, d))?;
        Ok(Self {
            values,
            grid: (h, w),
        })
    }
}

/// Bilinear, channel-wise upsampling of a MixToken field.
pub fn upsample_token(token: &MixToken, target: (usize, usize)) -> Result<MixToken> {
    let (h, w) = token.grid;
    if target.0 < h || target.1 < w {
        return Err(shape_err!(
            "cannot upsample token from {h}x{w} to smaller {}x{}",
            target.0,
            target.1
        ));
    }
    if target == token.grid {
        return Ok(token.clone());
    }
    let spatial = ops::resize_bilinear(&token.to_spatial()?, target.0, target.1)?;
    MixToken::from_spatial(&spatial)
}

/// Two convolutions, each followed by ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ConvBlock {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_dim: usize,
        mid_dim: usize,
        out_dim: usize,
        kernel: usize,
    ) -> Result<Self> {
        let p = kernel / 2;
        let gain = std::f64::consts::SQRT_2;
        Ok(Self {
            conv1: Conv2d::with_gain(&mut pb.pp("conv1"), in_dim, mid_dim, kernel, 1, p, gain)?,
            conv2: Conv2d::with_gain(&mut pb.pp("conv2"), mid_dim, out_dim, kernel, 1, p, gain)?,
        })
    }

    pub fn param_count(in_dim: usize, mid_dim: usize, out_dim: usize, kernel: usize) -> usize {
        Conv2d::param_count(in_dim, mid_dim, kernel) + Conv2d::param_count(mid_dim, out_dim, kernel)
    }

    pub fn conv1(&self) -> &Conv2d {
        &self.conv1
    }

    pub fn conv2(&self) -> &Conv2d {
        &self.conv2
    }

    /// [C, H, W] -> [C_out, H, W]
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.unsqueeze(0)?;
        let y = self.conv1.forward(&x)?.relu()?;
        Ok(self.conv2.forward(&y)?.relu()?.squeeze(0)?)
    }
}

/// Reshape a squeezed volume [N_q, 1, D] onto the query grid and predict
/// two-channel logits.
pub fn conv_block_predict(x: &Tensor, grid: (usize, usize), block: &ConvBlock) -> Result<Tensor> {
    let token = MixToken::new(x.clone(), grid)?;
    let logits = block.forward(&token.to_spatial()?)?;
    if logits.dims()[0] != 2 {
        return Err(shape_err!(
            "prediction block must output 2 channels, got {}",
            logits.dims()[0]
        ));
    }
    Ok(logits)
}

/// Background iff channel 0 strictly exceeds channel 1; ties are foreground.
pub fn binarize_logits(logits: &Tensor) -> Result<BinaryMask> {
    let (c, h, w) = logits
        .dims3()
        .map_err(|_| shape_err!("logits must be [2,H,W], got {:?}", logits.dims()))?;
    if c != 2 {
        return Err(shape_err!("logits must have 2 channels, got {c}"));
    }
    let v: Vec<Vec<Vec<f64>>> = logits.to_dtype(DType::F64)?.to_vec3()?;
    Ok(BinaryMask::from_fn(h, w, |y, x| v[0][y][x] <= v[1][y][x]))
}

/// Logits and binarised pseudo mask of one pyramid level.
#[derive(Debug, Clone)]
pub struct LayerPrediction {
    pub logits: Tensor,
    pub pseudo_mask: BinaryMask,
}

/// Everything a TBTM produces.
#[derive(Debug, Clone)]
pub struct TbtmOutput {
    pub token: MixToken,
    pub prediction: LayerPrediction,
    /// Squeezed cross-branch volume, [N_q, 1, D].
    pub cross: Tensor,
    /// Squeezed self-branch volume, absent when the self branch is disabled.
    pub self_sim: Option<Tensor>,
}

/// Target-aware bi-transformer module for one pyramid level.
#[derive(Debug, Clone)]
pub struct Tbtm {
    cross: [Ttm; 2],
    self_sim: Option<[Ttm; 2]>,
    conv_block: ConvBlock,
    dim: usize,
    query_chunk: usize,
}

impl Tbtm {
    pub fn new(pb: &mut ParamBuilder<'_>, depth: usize, cfg: &NetworkConfig) -> Result<Self> {
        let (d, k) = (cfg.dim, cfg.kernel);
        let pair = |pb: &mut ParamBuilder<'_>| -> Result<[Ttm; 2]> {
            Ok([
                Ttm::new(&mut pb.pp("ttm1"), depth, d, k, TtmStage::First)?,
                Ttm::new(&mut pb.pp("ttm2"), d, d, k, TtmStage::Second)?,
            ])
        };
        let cross = pair(&mut pb.pp("cross"))?;
        let self_sim = if cfg.bi_transformer {
            Some(pair(&mut pb.pp("self"))?)
        } else {
            None
        };
        let conv_block = ConvBlock::new(&mut pb.pp("predict"), d, d, 2, k)?;
        Ok(Self {
            cross,
            self_sim,
            conv_block,
            dim: d,
            query_chunk: cfg.query_chunk.max(1),
        })
    }

    pub fn param_count(depth: usize, cfg: &NetworkConfig) -> usize {
        let (d, k) = (cfg.dim, cfg.kernel);
        let branch =
            Ttm::param_count(depth, d, k, TtmStage::First) + Ttm::param_count(d, d, k, TtmStage::Second);
        let branches = if cfg.bi_transformer { 2 } else { 1 };
        branches * branch + ConvBlock::param_count(d, d, 2, k)
    }

    pub fn conv_block(&self) -> &ConvBlock {
        &self.conv_block
    }

    pub fn has_self_branch(&self) -> bool {
        self.self_sim.is_some()
    }

    /// Squeeze one hypercorrelation to [N_q, 1, D]: TTM, add the incoming
    /// token over the support axis, TTM again. Query positions are processed
    /// in chunks; in eval mode each chunk is detached so its graph is freed.
    fn squeeze(
        &self,
        ttms: &[Ttm; 2],
        x: &Hypercorrelation,
        mask: &BinaryMask,
        t_next: &MixToken,
        mode: &mut Mode<'_>,
    ) -> Result<Tensor> {
        let branch = x.kind();
        let maps = x.support_maps()?;
        let n_q = maps.dims()[0];
        let t = t_next.values().reshape((n_q, self.dim, 1, 1))?;
        let mut outs = Vec::with_capacity(n_q.div_ceil(self.query_chunk));
        let mut start = 0;
        while start < n_q {
            let len = self.query_chunk.min(n_q - start);
            let xc = maps.narrow(0, start, len)?;
            let y = ttms[0].forward_maps(&xc, mask, branch, mode)?;
            let y = y.broadcast_add(&t.narrow(0, start, len)?)?;
            let y = ttms[1].forward_maps(&y, mask, branch, mode)?;
            outs.push(if mode.is_training() { y } else { y.detach() });
            start += len;
        }
        let y = if outs.len() == 1 {
            outs.pop().expect("one chunk")
        } else {
            Tensor::cat(&outs, 0)?
        };
        Ok(y.reshape((n_q, 1, self.dim))?)
    }

    /// Cross branch, intermediate prediction, self branch under the pseudo
    /// mask, and the residual token update.
    pub fn forward(
        &self,
        x_qs: &Hypercorrelation,
        x_qq: Option<&Hypercorrelation>,
        support_mask: &BinaryMask,
        t_next: &MixToken,
        mode: &mut Mode<'_>,
    ) -> Result<TbtmOutput> {
        let grid = x_qs.query_grid();
        if t_next.grid() != grid {
            return Err(shape_err!(
                "incoming token grid {:?} differs from query grid {grid:?}",
                t_next.grid()
            ));
        }
        if t_next.dim() != self.dim {
            return Err(shape_err!("token width {} != {}", t_next.dim(), self.dim));
        }
        let cross = self.squeeze(&self.cross, x_qs, support_mask, t_next, mode)?;
        let logits = conv_block_predict(&cross, grid, &self.conv_block)?;
        let pseudo_mask = binarize_logits(&logits)?;

        let mut token = (t_next.values() + &cross)?;
        let self_sim = match (&self.self_sim, x_qq) {
            (Some(ttms), Some(x_qq)) => {
                if x_qq.query_grid() != grid {
                    return Err(shape_err!(
                        "self hypercorrelation grid {:?} differs from {grid:?}",
                        x_qq.query_grid()
                    ));
                }
                let s = self.squeeze(ttms, x_qq, &pseudo_mask, t_next, mode)?;
                token = (token + &s)?;
                Some(s)
            }
            (Some(_), None) => {
                return Err(shape_err!("self branch enabled but no self hypercorrelation given"))
            }
            (None, _) => None,
        };
        Ok(TbtmOutput {
            token: MixToken::new(token, grid)?,
            prediction: LayerPrediction {
                logits,
                pseudo_mask,
            },
            cross,
            self_sim,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetworkConfig {
    /// Backbone blocks in layers 2, 3, 4.
    pub block_counts: [usize; 3],
    pub dim: usize,
    pub kernel: usize,
    pub bi_transformer: bool,
    /// Query positions per TTM chunk.
    pub query_chunk: usize,
}

impl NetworkConfig {
    pub fn new(block_counts: [usize; 3]) -> Self {
        Self {
            block_counts,
            dim: DEFAULT_DIM,
            kernel: 3,
            bi_transformer: true,
            query_chunk: 512,
        }
    }

    fn depth(&self, layer: usize) -> usize {
        self.block_counts[layer - 2]
    }

    /// Closed-form learnable parameter count.
    pub fn param_count(&self) -> usize {
        let levels: usize = PYRAMID_LAYERS
            .iter()
            .map(|&l| Tbtm::param_count(self.depth(l), self))
            .sum();
        let (d, k) = (self.dim, self.kernel);
        levels + ConvBlock::param_count(d, d, d, k) + ConvBlock::param_count(d, d, 2, k)
    }
}

/// One level of a forward pass.
#[derive(Debug, Clone)]
pub struct LevelOutput {
    pub layer: usize,
    /// Token entering this level (zeros at layer 4, upsampled otherwise).
    pub token_in: MixToken,
    pub output: TbtmOutput,
}

#[derive(Debug, Clone)]
pub struct NetworkOutput {
    /// Layers 4, 3, 2 in evaluation order.
    pub levels: Vec<LevelOutput>,
    /// Final logits on the doubled layer-2 grid.
    pub final_logits: Tensor,
}

impl NetworkOutput {
    /// Logit maps ordered M_1 (final), M_2, M_3, M_4.
    pub fn logit_maps(&self) -> Vec<Tensor> {
        let mut maps = vec![self.final_logits.clone()];
        for layer in [2, 3, 4] {
            maps.push(self.level(layer).output.prediction.logits.clone());
        }
        maps
    }

    pub fn level(&self, layer: usize) -> &LevelOutput {
        self.levels
            .iter()
            .find(|l| l.layer == layer)
            .expect("levels 2, 3, 4 are always present")
    }
}

/// Grid used on the support axis at `layer`: layer 2 is matched at the
/// layer-3 resolution, the others at their own.
fn support_axis_grid(pyramid: &FeaturePyramid, layer: usize) -> (usize, usize) {
    if layer == 2 {
        pyramid.grid(3)
    } else {
        pyramid.grid(layer)
    }
}

fn resize_maps(maps: &[Tensor], grid: (usize, usize), dtype: DType) -> Result<Vec<Tensor>> {
    maps.iter()
        .map(|m| ops::resize_bilinear(&m.to_dtype(dtype)?, grid.0, grid.1))
        .collect()
}

/// Cross- and (optionally) self-hypercorrelation at one pyramid layer.
pub fn build_hypercorrelations(
    query: &FeaturePyramid,
    support: &FeaturePyramid,
    layer: usize,
    with_self: bool,
    dtype: DType,
) -> Result<(Hypercorrelation, Option<Hypercorrelation>)> {
    let fq: Vec<Tensor> = query
        .layer(layer)
        .iter()
        .map(|m| m.to_dtype(dtype))
        .collect::<candle_core::Result<_>>()?;
    let fs = resize_maps(support.layer(layer), support_axis_grid(support, layer), dtype)?;
    let cross = fq
        .iter()
        .zip(&fs)
        .map(|(q, s)| cosine_affinity(q, s))
        .collect::<Result<Vec<_>>>()?;
    let x_qs = stack_hypercorrelation(&cross, Branch::QuerySupport)?;
    let x_qq = if with_self {
        let fq_axis = resize_maps(&fq, support_axis_grid(query, layer), dtype)?;
        let affs = fq
            .iter()
            .zip(&fq_axis)
            .map(|(q, s)| cosine_affinity(q, s))
            .collect::<Result<Vec<_>>>()?;
        Some(stack_hypercorrelation(&affs, Branch::QueryQuery)?)
    } else {
        None
    };
    Ok((x_qs, x_qq))
}

/// The full network: three TBTMs and two decoders over frozen features.
pub struct TbtNet {
    cfg: NetworkConfig,
    store: ParamStore,
    /// Layers 4, 3, 2.
    levels: [Tbtm; 3],
    decoder_a: ConvBlock,
    decoder_b: ConvBlock,
}

impl TbtNet {
    pub fn new(cfg: NetworkConfig, seed: u64, dtype: DType) -> Result<Self> {
        if cfg.dim == 0 || cfg.block_counts.contains(&0) {
            return Err(config_err!("network dimensions must be positive: {cfg:?}"));
        }
        let mut store = ParamStore::new(seed, dtype);
        let mut root = store.root();
        let mut level = |layer: usize| Tbtm::new(&mut root.pp(format!("layer{layer}")), cfg.depth(layer), &cfg);
        let levels = [level(4)?, level(3)?, level(2)?];
        let (d, k) = (cfg.dim, cfg.kernel);
        let decoder_a = ConvBlock::new(&mut root.pp("decoder_a"), d, d, d, k)?;
        let decoder_b = ConvBlock::new(&mut root.pp("decoder_b"), d, d, 2, k)?;
        // logits pass through a ReLU; starting both channels positive keeps
        // every prediction head trainable from the first step
        store.fill_where(
            |n| n.ends_with("predict.conv2.bias") || n == "decoder_b.conv2.bias",
            LOGIT_BIAS_INIT,
        )?;
        Ok(Self {
            cfg,
            store,
            levels,
            decoder_a,
            decoder_b,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn learnable_param_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// TBTM of layer 2, 3 or 4.
    pub fn level(&self, layer: usize) -> &Tbtm {
        &self.levels[4 - layer]
    }

    pub fn decoders(&self) -> (&ConvBlock, &ConvBlock) {
        (&self.decoder_a, &self.decoder_b)
    }

    /// One-shot forward pass over precomputed pyramids.
    pub fn forward(
        &self,
        query: &FeaturePyramid,
        support: &FeaturePyramid,
        support_mask: &BinaryMask,
        mode: &mut Mode<'_>,
    ) -> Result<NetworkOutput> {
        if query.block_counts() != self.cfg.block_counts
            || support.block_counts() != self.cfg.block_counts
        {
            return Err(shape_err!(
                "pyramid block counts {:?}/{:?} do not match network {:?}",
                query.block_counts(),
                support.block_counts(),
                self.cfg.block_counts
            ));
        }
        let dtype = self.dtype();
        let device = self.store.device().clone();
        let mut levels: Vec<LevelOutput> = Vec::with_capacity(3);
        for layer in [4, 3, 2] {
            let (x_qs, x_qq) =
                build_hypercorrelations(query, support, layer, self.cfg.bi_transformer, dtype)?;
            let grid = x_qs.query_grid();
            let token_in = match levels.last() {
                None => MixToken::zeros(grid, self.cfg.dim, dtype, &device)?,
                Some(prev) => upsample_token(&prev.output.token, grid)?,
            };
            let output =
                self.level(layer)
                    .forward(&x_qs, x_qq.as_ref(), support_mask, &token_in, mode)?;
            levels.push(LevelOutput {
                layer,
                token_in,
                output,
            });
        }
        let t2 = &levels[2].output.token;
        let (h, w) = t2.grid();
        let up = upsample_token(t2, (2 * h, 2 * w))?;
        let hidden = self.decoder_a.forward(&up.to_spatial()?)?;
        let final_logits = self.decoder_b.forward(&hidden)?;
        Ok(NetworkOutput {
            levels,
            final_logits,
        })
    }
}

/// Weighted combination (1 - 3a) L_1 + a (L_2 + L_3 + L_4), evaluated with a
/// single final rounding.
pub fn combine_level_losses(levels: [f64; 4], alpha: f64) -> f64 {
    let weights = [1.0 - 3.0 * alpha, alpha, alpha, alpha];
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (w, l) in weights.iter().zip(levels) {
        let p = w * l;
        let ep = w.mul_add(l, -p);
        let s = sum + p;
        let z = s - sum;
        let es = (sum - (s - z)) + (p - z);
        sum = s;
        comp += es + ep;
    }
    sum + comp
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// Differentiable total.
    pub total: Tensor,
    /// Per-level cross entropies L_1..L_4.
    pub levels: [f64; 4],
    /// Total recomputed from `levels`.
    pub value: f64,
}

/// Upsample every logit map to the ground-truth size and combine their
/// cross entropies. `maps` is ordered M_1 (final), M_2, M_3, M_4.
pub fn total_loss(maps: &[Tensor], ground_truth: &BinaryMask, alpha: f64) -> Result<LossBreakdown> {
    if maps.len() != 4 {
        return Err(config_err!(
            "total loss needs 4 logit maps (final, layers 2-4), got {}",
            maps.len()
        ));
    }
    if !(0.0..=1.0 / 3.0).contains(&alpha) {
        return Err(config_err!("alpha must lie in [0, 1/3], got {alpha}"));
    }
    let (h, w) = ground_truth.dims();
    let dtype = maps[0].dtype();
    let target = ground_truth.to_tensor(dtype, maps[0].device())?;
    let losses = maps
        .iter()
        .map(|m| ops::cross_entropy_2class(&ops::resize_bilinear(m, h, w)?, &target))
        .collect::<Result<Vec<_>>>()?;
    let mut levels = [0f64; 4];
    for (dst, l) in levels.iter_mut().zip(&losses) {
        *dst = l.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    let aux = ((&losses[1] + &losses[2])? + &losses[3])?;
    let total = ((&losses[0] * (1.0 - 3.0 * alpha))? + (aux * alpha)?)?;
    Ok(LossBreakdown {
        total,
        levels,
        value: combine_level_losses(levels, alpha),
    })
}
