//! Straight-line reference implementations used as test oracles. Nothing
//! here calls into the crate's numerics.

#![allow(dead_code)]

pub struct LayerDims {
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_types: usize,
    pub out_types: usize,
    pub in_atoms: usize,
    pub out_atoms: usize,
    pub iterations: usize,
}

pub fn squash(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|x| x * x).sum();
    if n2 == 0.0 {
        return vec![0.0; s.len()];
    }
    let n = n2.sqrt();
    s.iter().map(|x| x * n2 / (1.0 + n2) / n).collect()
}

fn same_pad(n: usize, k: usize, s: usize) -> (usize, usize) {
    let out = (n + s - 1) / s;
    let need = (out - 1) * s + k;
    let total = if need > n { need - n } else { 0 };
    (out, total / 2)
}

/// Plain nested-loop convolutional capsule layer on one `[h, w, types,
/// atoms]` grid. Children outside the grid are skipped, which must give
/// the same parents as treating them as zero votes. Returns the parent
/// extents and `[oh, ow, out_types, out_atoms]` flattened.
pub fn conv_capsule_layer(
    d: &LayerDims,
    children: &[f64],
    transforms: &[f64],
    bias: &[f64],
) -> (usize, usize, Vec<f64>) {
    let (oh, pt) = same_pad(d.h, d.kernel, d.stride);
    let (ow, pl) = same_pad(d.w, d.kernel, d.stride);
    let (ti, to, ai, ao, k) = (d.in_types, d.out_types, d.in_atoms, d.out_atoms, d.kernel);
    let mut out = Vec::new();
    for oy in 0..oh {
        for ox in 0..ow {
            // votes[child][j][b]
            let mut votes: Vec<Vec<Vec<f64>>> = Vec::new();
            for t in 0..ti {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * d.stride + ky) as isize - pt as isize;
                        let ix = (ox * d.stride + kx) as isize - pl as isize;
                        if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                            continue;
                        }
                        let (iy, ix) = (iy as usize, ix as usize);
                        let child = &children[((iy * d.w + ix) * ti + t) * ai..][..ai];
                        let mut v = vec![vec![0.0; ao]; to];
                        for (j, vj) in v.iter_mut().enumerate() {
                            for (b, vjb) in vj.iter_mut().enumerate() {
                                for (a, &c) in child.iter().enumerate() {
                                    let widx = (((t * k + ky) * k + kx) * ai + a) * (to * ao) + j * ao + b;
                                    *vjb += c * transforms[widx];
                                }
                            }
                        }
                        votes.push(v);
                    }
                }
            }
            let mut logits = vec![vec![0.0; to]; votes.len()];
            let mut parents = vec![vec![0.0; ao]; to];
            for it in 0..d.iterations {
                let mut s = vec![vec![0.0; ao]; to];
                for (ci, v) in votes.iter().enumerate() {
                    let m = logits[ci].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits[ci].iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..to {
                        for b in 0..ao {
                            s[j][b] += e[j] / z * v[j][b];
                        }
                    }
                }
                for j in 0..to {
                    for b in 0..ao {
                        s[j][b] += bias[j * ao + b];
                    }
                    parents[j] = squash(&s[j]);
                }
                if it + 1 < d.iterations {
                    for (ci, v) in votes.iter().enumerate() {
                        for j in 0..to {
                            logits[ci][j] += (0..ao).map(|b| v[j][b] * parents[j][b]).sum::<f64>();
                        }
                    }
                }
            }
            for p in parents {
                out.extend(p);
            }
        }
    }
    (oh, ow, out)
}

/// Confidence-weighted mean of `(score, confidence)` pairs, plain mean when
/// the weights sum to zero.
pub fn weighted_mean(votes: &[(f64, f64)]) -> f64 {
    let w: f64 = votes.iter().map(|v| v.1).sum();
    if w > 0.0 {
        votes.iter().map(|v| v.0 * v.1).sum::<f64>() / w
    } else {
        votes.iter().map(|v| v.0).sum::<f64>() / votes.len() as f64
    }
}
