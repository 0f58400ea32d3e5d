//! Test-only oracles, written independently of the library kernels.
#![allow(dead_code)]

use mitoloc::numerics::{ParamStore, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Real>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-1.0..1.0)))
}

/// Direct six-loop convolution with zero padding.
pub fn naive_conv2d(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let xv = |i: usize, ch: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            x.data()[((i * c + ch) * h + y as usize) * w + xx as usize]
        }
    };
    let mut out = vec![0.0; n * f * oh * ow];
    for i in 0..n {
        for o in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ch in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                s += xv(i, ch, y, xx) * k.data()[((o * c + ch) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((i * f + o) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    Tensor::new(vec![n, f, oh, ow], out).unwrap()
}

/// Central finite difference of `f` with respect to one scalar of a
/// parameter, restoring the value afterwards.
pub fn central_difference(
    store: &mut ParamStore<f64>,
    name: &str,
    index: usize,
    h: f64,
    mut f: impl FnMut(&ParamStore<f64>) -> f64,
) -> f64 {
    let id = store.id(name).expect("parameter");
    let orig = store.get(id).tensor.data()[index];
    store.get_mut(id).tensor.data_mut()[index] = orig + h;
    let up = f(store);
    store.get_mut(id).tensor.data_mut()[index] = orig - h;
    let down = f(store);
    store.get_mut(id).tensor.data_mut()[index] = orig;
    (up - down) / (2.0 * h)
}

/// `|analytic − numeric| ≤ atol + rtol·|numeric|`.
pub fn grad_close(analytic: f64, numeric: f64, rtol: f64, atol: f64) -> bool {
    (analytic - numeric).abs() <= atol + rtol * numeric.abs()
}

/// Maximum bipartite matching size by exhaustive search over injective
/// assignments of detections to annotations (or to nothing).
pub fn brute_force_max_matching(dets: &[(f64, f64)], anns: &[(f64, f64)], radius: f64) -> (usize, f64) {
    fn rec(
        i: usize,
        dets: &[(f64, f64)],
        anns: &[(f64, f64)],
        used: &mut Vec<bool>,
        radius: f64,
        count: usize,
        dist: f64,
        best: &mut (usize, f64),
    ) {
        if i == dets.len() {
            if count > best.0 || (count == best.0 && dist < best.1 - 1e-12) {
                *best = (count, dist);
            }
            return;
        }
        rec(i + 1, dets, anns, used, radius, count, dist, best);
        for j in 0..anns.len() {
            if used[j] {
                continue;
            }
            let d = ((dets[i].0 - anns[j].0).powi(2) + (dets[i].1 - anns[j].1).powi(2)).sqrt();
            if d <= radius {
                used[j] = true;
                rec(i + 1, dets, anns, used, radius, count + 1, dist + d, best);
                used[j] = false;
            }
        }
    }
    let mut best = (0, f64::INFINITY);
    rec(0, dets, anns, &mut vec![false; anns.len()], radius, 0, 0.0, &mut best);
    if best.0 == 0 {
        best.1 = 0.0;
    }
    best
}

/// AUC as the fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            den += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Youden's J of the rule `score ≥ t`, by direct counting.
pub fn youden_at(scores: &[f64], labels: &[bool], t: f64) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let tp = scores.iter().zip(labels).filter(|(&s, &l)| l && s >= t).count() as f64;
    let fp = scores.iter().zip(labels).filter(|(&s, &l)| !l && s >= t).count() as f64;
    tp / pos - fp / neg
}

/// Best J over every distinct cut of the sorted scores.
pub fn brute_force_best_youden(scores: &[f64], labels: &[bool]) -> f64 {
    let mut cuts: Vec<f64> = scores.to_vec();
    cuts.push(f64::INFINITY);
    cuts.iter().map(|&t| youden_at(scores, labels, t)).fold(f64::NEG_INFINITY, f64::max)
}

/// 8-connected component count via union-find over foreground pixels.
pub fn union_find_components(mask: &[bool], h: usize, w: usize) -> usize {
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for r in 0..h {
        for c in 0..w {
            if !mask[r * w + c] {
                continue;
            }
            for (dr, dc) in [(-1isize, -1isize), (-1, 0), (-1, 1), (0, -1)] {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || cc >= w as isize {
                    continue;
                }
                let j = rr as usize * w + cc as usize;
                if mask[j] {
                    let (a, b) = (find(&mut parent, r * w + c), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
    }
    (0..h * w).filter(|&i| mask[i] && find(&mut parent, i) == i).count()
}

pub fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

pub fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let (a, b) = (unit(a), unit(b));
    let d = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
    d.acos().to_degrees()
}

/// `v` tilted by a random angle of at most `max_deg` degrees, kept non-negative.
pub fn jitter_direction(rng: &mut impl Rng, v: [f64; 3], max_deg: f64) -> [f64; 3] {
    loop {
        let d = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let s = rng.random_range(0.0..max_deg.to_radians().tan());
        let dn = unit(d);
        let w = unit([v[0] + s * dn[0], v[1] + s * dn[1], v[2] + s * dn[2]]);
        if w.iter().all(|&x| x > 0.0) && angle_deg(v, w) <= max_deg {
            return w;
        }
    }
}

/// Beer-Lambert rendering of two stains: a fifth of the pixels carry pure
/// hematoxylin, a fifth pure eosin, the rest a random mixture.
pub fn two_stain_image(rng: &mut impl Rng, h: [f64; 3], e: [f64; 3], scale: [f64; 2], size: u32) -> image::RgbImage {
    image::RgbImage::from_fn(size, size, |_, _| {
        let u: f64 = rng.random();
        let (ch, ce) = if u < 0.2 {
            (rng.random_range(0.2..1.0), 0.0)
        } else if u < 0.4 {
            (0.0, rng.random_range(0.2..1.0))
        } else {
            (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))
        };
        let px = |k: usize| {
            let od = h[k] * ch * scale[0] + e[k] * ce * scale[1];
            (256.0 * 10f64.powf(-od) - 1.0).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}
