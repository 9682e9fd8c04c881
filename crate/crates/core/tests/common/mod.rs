//! Plain-f64 reference implementations used as oracles by the integration
//! tests. Nothing here calls into the tensor code paths under test except to
//! read parameter values.

#![allow(dead_code)]

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tbtnet::mask::BinaryMask;
use tbtnet::params::{Conv2d, LayerNorm, Linear, Mlp};
use tbtnet::ttl::{SupportReduction, Ttl};

/// Channels-first map [C][H][W].
pub type Map = Vec<Vec<Vec<f64>>>;

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all()
        .unwrap()
        .to_dtype(candle_core::DType::F64)
        .unwrap()
        .to_vec1()
        .unwrap()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Map {
    (0..c)
        .map(|_| (0..h).map(|_| random_vec(rng, w, -1.0, 1.0)).collect())
        .collect()
}

pub fn map_to_tensor(maps: &[Map]) -> Tensor {
    let (n, c, h, w) = (maps.len(), maps[0].len(), maps[0][0].len(), maps[0][0][0].len());
    let v: Vec<f64> = maps.iter().flatten().flatten().flatten().copied().collect();
    Tensor::from_vec(v, (n, c, h, w), &Device::Cpu).unwrap()
}

pub fn tensor_to_maps(t: &Tensor) -> Vec<Map> {
    let (n, c, h, w) = t.dims4().unwrap();
    let v = flat(t);
    (0..n)
        .map(|i| {
            (0..c)
                .map(|ch| {
                    (0..h)
                        .map(|y| (0..w).map(|x| v[((i * c + ch) * h + y) * w + x]).collect())
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.random_bool(p))
}

/// Direct-summation convolution with zero padding.
pub fn conv2d(x: &Map, conv: &Conv2d) -> Map {
    let (o, k, s, p) = (conv.out_channels(), conv.kernel(), conv.stride(), conv.padding());
    let wt = flat(conv.weight());
    let b = flat(conv.bias());
    let (c, h, w) = (x.len(), x[0].len(), x[0][0].len());
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let mut out = vec![vec![vec![0.0; ow]; oh]; o];
    for (oc, plane) in out.iter_mut().enumerate() {
        for (oy, row) in plane.iter_mut().enumerate() {
            for (ox, cell) in row.iter_mut().enumerate() {
                let mut acc = b[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += wt[((oc * c + ic) * k + ky) * k + kx]
                                * x[ic][iy as usize][ix as usize];
                        }
                    }
                }
                *cell = acc;
            }
        }
    }
    out
}

pub fn linear(x: &[f64], l: &Linear) -> Vec<f64> {
    let w = flat(l.weight());
    let b = flat(l.bias());
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, bo)| bo + (0..n_in).map(|i| w[o * n_in + i] * x[i]).sum::<f64>())
        .collect()
}

pub fn mlp(x: &[f64], m: &Mlp) -> Vec<f64> {
    let h: Vec<f64> = linear(x, m.fc1()).into_iter().map(|v| v.max(0.0)).collect();
    linear(&h, m.fc2())
}

pub fn layer_norm(x: &[f64], ln: &LayerNorm) -> Vec<f64> {
    let g = flat(ln.gamma());
    let b = flat(ln.beta());
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + ln.eps()).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * g[i] + b[i])
        .collect()
}

/// ReLU(cos) between every query and support position, positions
/// flattened row-major.
pub fn cosine_affinity(fq: &Map, fs: &Map) -> Vec<Vec<f64>> {
    let vecs = |m: &Map| -> Vec<Vec<f64>> {
        let (h, w) = (m[0].len(), m[0][0].len());
        (0..h * w)
            .map(|i| m.iter().map(|ch| ch[i / w][i % w]).collect())
            .collect()
    };
    let (q, s) = (vecs(fq), vecs(fs));
    q.iter()
        .map(|a| {
            s.iter()
                .map(|b| {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if na == 0.0 || nb == 0.0 {
                        0.0
                    } else {
                        (dot / (na * nb)).max(0.0)
                    }
                })
                .collect()
        })
        .collect()
}

fn position_vectors(m: &Map) -> Vec<Vec<f64>> {
    let (h, w) = (m[0].len(), m[0][0].len());
    (0..h * w)
        .map(|i| m.iter().map(|ch| ch[i / w][i % w]).collect())
        .collect()
}

fn grid_mean(m: &Map) -> Map {
    let n = (m[0].len() * m[0][0].len()) as f64;
    m.iter()
        .map(|ch| vec![vec![ch.iter().flatten().sum::<f64>() / n]])
        .collect()
}

/// Reference TTL on one query position's support map. `mask` must already
/// be on the key grid (which equals the input grid).
pub fn ttl(x: &Map, mask: &BinaryMask, layer: &Ttl) -> Map {
    let global = layer.config().reduction == SupportReduction::Global;
    let mut q = conv2d(x, layer.conv_q());
    let mut sc = conv2d(x, layer.conv_sc());
    if global {
        q = grid_mean(&q);
        sc = grid_mean(&sc);
    }
    let (oh, ow) = (q[0].len(), q[0][0].len());
    let qv = position_vectors(&q);
    let scv = position_vectors(&sc);
    let kv = position_vectors(&conv2d(x, layer.conv_k()));
    let vv = position_vectors(&conv2d(x, layer.conv_v()));
    let m: Vec<f64> = mask.as_slice().iter().map(|&b| f64::from(b)).collect();
    let d_out = vv[0].len();
    let mut out = vec![vec![vec![0.0; ow]; oh]; d_out];
    for (i, qi) in qv.iter().enumerate() {
        let logits: Vec<f64> = kv
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum())
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let att: Vec<f64> = (0..d_out)
            .map(|d| (0..kv.len()).map(|j| e[j] / z * vv[j][d] * m[j]).sum())
            .collect();
        let m1 = mlp(&att, layer.mlp1());
        let x1: Vec<f64> = (0..d_out).map(|d| m1[d] + att[d] + scv[i][d]).collect();
        let x1 = layer_norm(&x1, layer.norm1());
        let m2 = mlp(&x1, layer.mlp2());
        let y: Vec<f64> = (0..d_out).map(|d| m2[d] + x1[d]).collect();
        let y = layer_norm(&y, layer.norm2());
        for d in 0..d_out {
            out[d][i / ow][i % ow] = y[d];
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Pooled-IoU mean over classes, recomputed from raw masks.
pub fn brute_force_miou(episodes: &[(usize, Vec<u8>, Vec<u8>)]) -> f64 {
    use std::collections::BTreeMap;
    let mut per: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for (class, pred, truth) in episodes {
        let e = per.entry(*class).or_default();
        for (p, t) in pred.iter().zip(truth) {
            let (p, t) = (*p != 0, *t != 0);
            e.0 += u64::from(p && t);
            e.1 += u64::from(p || t);
        }
    }
    let ious: Vec<f64> = per
        .values()
        .map(|&(i, u)| if u == 0 { 0.0 } else { i as f64 / u as f64 })
        .collect();
    ious.iter().sum::<f64>() / ious.len() as f64
}
