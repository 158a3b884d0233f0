//! Independent reference implementations shared by the integration tests.
//! None of these call into the crate's attention, patching or cost code.
#![allow(dead_code)]

use num_bigint::BigUint;

/// Row-major `n×d` buffer.
pub struct Mat {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn at(&self, i: usize, c: usize) -> f64 {
        self.data[i * self.d + c]
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Pixel index of offset `o` (row-major within the patch) in patch `a`
/// (row-major over the patch grid).
fn pixel(a: usize, o: usize, w: usize, p: usize) -> usize {
    let gw = w / p;
    let (py, px) = (a / gw, a % gw);
    let (oy, ox) = (o / p, o % p);
    (py * p + oy) * w + px * p + ox
}

/// Patch-wise spatial attention expressed directly on pixel tokens: the
/// patch logit is a sum over matching in-patch offsets, and each pixel
/// mixes the value pixels at its own offset.
pub fn patch_attention(q: &Mat, k: &Mat, v: &Mat, h: usize, w: usize, p: usize) -> Vec<f64> {
    let d = q.d;
    let np = (h / p) * (w / p);
    let scale = ((d * p * p) as f64).sqrt();
    let mut out = vec![0.0; h * w * d];
    for a in 0..np {
        let logits: Vec<f64> = (0..np)
            .map(|b| {
                let mut s = 0.0;
                for o in 0..p * p {
                    for c in 0..d {
                        s += q.at(pixel(a, o, w, p), c) * k.at(pixel(b, o, w, p), c);
                    }
                }
                s / scale
            })
            .collect();
        let wts = softmax(&logits);
        for o in 0..p * p {
            let i = pixel(a, o, w, p);
            for c in 0..d {
                out[i * d + c] = (0..np).map(|b| wts[b] * v.at(pixel(b, o, w, p), c)).sum();
            }
        }
    }
    out
}

/// `(softmax(QᵀK/√N)·Vᵀ)ᵀ` by explicit sums.
pub fn channel_attention(q: &Mat, k: &Mat, v: &Mat) -> Vec<f64> {
    let (n, d) = (q.n, q.d);
    let scale = (n as f64).sqrt();
    let rows: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            let logits: Vec<f64> = (0..d)
                .map(|b| (0..n).map(|t| q.at(t, a) * k.at(t, b)).sum::<f64>() / scale)
                .collect();
            softmax(&logits)
        })
        .collect();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for a in 0..d {
            out[i * d + a] = (0..d).map(|b| rows[a][b] * v.at(i, b)).sum();
        }
    }
    out
}

/// Flattened `H×W×d` map rearranged into `(H/p·W/p) × (d·p²)` patch tokens
/// by index arithmetic on the destination.
pub fn patch_tokens(map: &[f64], h: usize, w: usize, d: usize, p: usize) -> Vec<f64> {
    let width = d * p * p;
    let np = (h / p) * (w / p);
    (0..np * width)
        .map(|idx| {
            let (a, r) = (idx / width, idx % width);
            let (o, c) = (r / d, r % d);
            map[pixel(a, o, w, p) * d + c]
        })
        .collect()
}

fn big(v: u64) -> BigUint {
    BigUint::from(v)
}

/// Standard attention flops, `2N²D`.
pub fn standard_flops(n: u64, d: u64) -> BigUint {
    big(2) * big(n) * big(n) * big(d)
}

/// View-mixed flops scaled by `p²`: `2N²D + 2ND²p²`.
pub fn vma_flops_times_p2(n: u64, d: u64, p: u64) -> BigUint {
    big(2) * big(n) * big(n) * big(d) + big(2) * big(n) * big(d) * big(d) * big(p) * big(p)
}

/// Smallest `N ≤ limit` where view-mixed attention is strictly cheaper.
pub fn crossover(d: u64, p: u64, limit: u64) -> Option<u64> {
    (1..=limit).find(|&n| vma_flops_times_p2(n, d, p) < standard_flops(n, d) * big(p) * big(p))
}
