//! Naive f64 reference implementations of the tape primitives.
//!
//! These are written independently of the library (plain loops, no im2col,
//! no GEMM) and serve as the function that finite differences are taken of.

#![allow(dead_code)]

#[derive(Clone, Debug)]
pub struct R {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl R {
    pub fn new(shape: &[usize], data: Vec<f64>) -> R {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        R {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> R {
        R::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, o: &R, f: impl Fn(f64, f64) -> f64) -> R {
        assert_eq!(self.shape, o.shape);
        R::new(
            &self.shape,
            self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    fn at4(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        let s = &self.shape;
        self.data[((a * s[1] + b) * s[2] + c) * s[3] + d]
    }
}

pub fn conv2d(x: &R, k: &R, bias: Option<&R>, stride: usize, pad: usize) -> R {
    let (n, cin, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (cout, _, kh, kw) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for i in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bias.map_or(0.0, |b| b.data[co]);
                    for ci in 0..cin {
                        for a in 0..kh {
                            for b in 0..kw {
                                let iy = (oy * stride + a) as isize - pad as isize;
                                let ix = (ox * stride + b) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x.at4(i, ci, iy as usize, ix as usize) * k.at4(co, ci, a, b);
                                }
                            }
                        }
                    }
                    out[((i * cout + co) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    R::new(&[n, cout, ho, wo], out)
}

pub fn softmax_channel(x: &R) -> R {
    let (n, p, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = x.clone();
    for i in 0..n {
        for a in 0..h {
            for b in 0..w {
                let idx = |c: usize| ((i * p + c) * h + a) * w + b;
                let z: f64 = (0..p).map(|c| x.data[idx(c)].exp()).sum();
                for c in 0..p {
                    out.data[idx(c)] = x.data[idx(c)].exp() / z;
                }
            }
        }
    }
    out
}

pub fn spatial_max(x: &R) -> R {
    let (n, p) = (x.shape[0], x.shape[1]);
    let s = x.shape[2] * x.shape[3];
    let data = (0..n * p)
        .map(|plane| {
            x.data[plane * s..(plane + 1) * s]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    R::new(&[n, p], data)
}

pub fn matmul(a: &R, b: &R) -> R {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a.data[i * k + p] * b.data[p * n + j]).sum();
        }
    }
    R::new(&[m, n], out)
}

pub fn sum_axis(x: &R, axis: usize) -> R {
    let outer: usize = x.shape[..axis].iter().product();
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..len {
            for i in 0..inner {
                out[o * inner + i] += x.data[(o * len + k) * inner + i];
            }
        }
    }
    let mut shape = x.shape.clone();
    shape.remove(axis);
    R::new(&shape, out)
}

pub fn gather_cells(x: &R, maps: &[Vec<usize>]) -> R {
    let (n, c) = (x.shape[0], x.shape[1]);
    let s = x.shape[2] * x.shape[3];
    let mut out = x.clone();
    for i in 0..n {
        for ch in 0..c {
            for d in 0..s {
                out.data[(i * c + ch) * s + d] = x.data[(i * c + ch) * s + maps[i][d]];
            }
        }
    }
    out
}

pub fn cross_entropy(logits: &R, targets: &[usize]) -> f64 {
    let (n, c) = (logits.shape[0], logits.shape[1]);
    let mut total = 0.0;
    for i in 0..n {
        let row = &logits.data[i * c..(i + 1) * c];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        total += lse - row[targets[i]];
    }
    total / n as f64
}

pub fn layer_norm(x: &R, eps: f64) -> R {
    let n = x.shape[0];
    let m = x.data.len() / n;
    let mut out = x.clone();
    for i in 0..n {
        let row = &x.data[i * m..(i + 1) * m];
        let mean = row.iter().sum::<f64>() / m as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
        for k in 0..m {
            out.data[i * m + k] = (row[k] - mean) / (var + eps).sqrt();
        }
    }
    out
}
