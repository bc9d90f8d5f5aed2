//! Straight-line f64 reference implementations shared by the test binaries.
//! Nothing here calls into the library's tensor code.

#![allow(dead_code)]

use candle_core::{DType, Tensor};
use facefill::nn::ParamStore;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dense `[c, h, w]` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Arr3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Arr3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Sample `b` of a `[B, C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor, b: usize) -> Self {
        let (_, c, h, w) = t.dims4().unwrap();
        let data = t
            .get(b)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        Self { c, h, w, data }
    }

    pub fn concat(&self, other: &Arr3) -> Self {
        assert_eq!((self.h, self.w), (other.h, other.w));
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self {
            c: self.c + other.c,
            h: self.h,
            w: self.w,
            data,
        }
    }
}

pub fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    store
        .get(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .as_tensor()
        .to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

/// Zero-padded cross-correlation with `k × k` kernels stored `[cout, cin, k, k]`.
pub fn conv(x: &Arr3, weight: &[f64], bias: Option<&[f64]>, cout: usize, k: usize) -> Arr3 {
    assert_eq!(weight.len(), cout * x.c * k * k);
    let pad = (k / 2) as isize;
    let mut out = Arr3::zeros(cout, x.h, x.w);
    for o in 0..cout {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for i in 0..x.c {
                    for dy in 0..k {
                        for dx in 0..k {
                            let sy = y as isize + dy as isize - pad;
                            let sx = xx as isize + dx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                continue;
                            }
                            acc +=
                                weight[((o * x.c + i) * k + dy) * k + dx] * x.at(i, sy as usize, sx as usize);
                        }
                    }
                }
                *out.at_mut(o, y, xx) = acc;
            }
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

pub fn area_down(x: &Arr3, f: usize) -> Arr3 {
    let mut out = Arr3::zeros(x.c, x.h / f, x.w / f);
    for c in 0..x.c {
        for y in 0..out.h {
            for xx in 0..out.w {
                let mut s = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        s += x.at(c, y * f + dy, xx * f + dx);
                    }
                }
                *out.at_mut(c, y, xx) = s / (f * f) as f64;
            }
        }
    }
    out
}

pub struct DafOracle {
    pub f_hat: Arr3,
    pub x_resized: Arr3,
    pub projected: Arr3,
    pub alpha: Arr3,
    pub y: Arr3,
}

/// Fusion forward pass for one sample, reading weights by name from `store`
/// (the module must have been built at the store root).
pub fn daf_oracle(store: &ParamStore, feature: &Arr3, x_q: &Arr3) -> DafOracle {
    let c = feature.c;
    let w_down = param(store, "w_down");
    let w_up = param(store, "w_up");
    let squeezed = w_down.len() / c;
    let hidden_w = param(store, "attn0.bias").len();

    let n = (feature.h * feature.w) as f64;
    let z: Vec<f64> = (0..c)
        .map(|ch| {
            feature.data[ch * feature.h * feature.w..(ch + 1) * feature.h * feature.w]
                .iter()
                .sum::<f64>()
                / n
        })
        .collect();
    let hidden: Vec<f64> = (0..squeezed)
        .map(|j| relu((0..c).map(|i| w_down[j * c + i] * z[i]).sum()))
        .collect();
    let omega: Vec<f64> = (0..c)
        .map(|i| sigmoid((0..squeezed).map(|j| w_up[i * squeezed + j] * hidden[j]).sum()))
        .collect();
    let mut f_hat = feature.clone();
    for ch in 0..c {
        for y in 0..feature.h {
            for x in 0..feature.w {
                *f_hat.at_mut(ch, y, x) *= omega[ch];
            }
        }
    }

    let wc = conv(
        x_q,
        &param(store, "w_c.weight"),
        Some(&param(store, "w_c.bias")),
        3,
        1,
    );
    let x_resized = area_down(&wc, x_q.h / feature.h);
    let projected = conv(
        &f_hat,
        &param(store, "w_k.weight"),
        Some(&param(store, "w_k.bias")),
        3,
        1,
    );

    let a_in = projected.concat(&x_resized);
    let a0 = conv(
        &a_in,
        &param(store, "attn0.weight"),
        Some(&param(store, "attn0.bias")),
        hidden_w,
        3,
    )
    .map(relu);
    let a1 = conv(
        &a0,
        &param(store, "attn1.weight"),
        Some(&param(store, "attn1.bias")),
        hidden_w,
        3,
    )
    .map(relu);
    let logits = conv(
        &a1,
        &param(store, "attn2.weight"),
        Some(&param(store, "attn2.bias")),
        3,
        3,
    );
    let alpha = logits.map(sigmoid);

    let mut y = projected.clone();
    for i in 0..y.data.len() {
        y.data[i] = alpha.data[i] * projected.data[i] + (1.0 - alpha.data[i]) * x_resized.data[i];
    }
    DafOracle {
        f_hat,
        x_resized,
        projected,
        alpha,
        y,
    }
}

/// `−log softmax(logits)[target]`, evaluated with a max shift.
pub fn softmax_ce(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Mann–Whitney win rate: P(pos > neg) + ½ P(pos = neg), counted pairwise.
pub fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins2 = 0u64;
    let mut total = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            total += 1;
            if si > sj {
                wins2 += 2;
            } else if si == sj {
                wins2 += 1;
            }
        }
    }
    wins2 as f64 / (2 * total) as f64
}

/// Overwrites every parameter in `store` with N(0, scale²) draws.
pub fn randomize(store: &ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for (name, var) in store.vars() {
        let n = var.elem_count();
        let vals: Vec<f64> = (0..n)
            .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng))
            .map(|v: f64| v * scale)
            .collect();
        let t = Tensor::from_vec(vals, var.dims(), var.device()).unwrap();
        store.assign(&name, &t).unwrap();
    }
}
