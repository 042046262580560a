//! Plain slice kernels shared by the tape's forward and backward passes.

use super::tensor::Real;

/// `a[m,k] · b[k,n]`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o = *o + x * y;
            }
        }
    }
    out
}

/// `a[m,k] · b[n,k]ᵀ`
pub fn matmul_t<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out.push(dot(arow, &b[j * k..(j + 1) * k]));
        }
    }
    out
}

/// `a[inner,rows]ᵀ · b[inner,n]`
pub fn t_matmul<T: Real>(a: &[T], b: &[T], rows: usize, inner: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * n];
    for p in 0..inner {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..rows {
            let x = a[p * rows + i];
            if x == T::zero() {
                continue;
            }
            for (o, &y) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o = *o + x * y;
            }
        }
    }
    out
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn column_sums<T: Real>(g: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for (i, &x) in g.iter().enumerate() {
        out[i % cols] = out[i % cols] + x;
    }
    out
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu<T: Real>(x: T) -> T {
    let u = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_K) * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + e^z)` without overflow.
pub fn softplus<T: Real>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// Log-sum-exp over the entries selected by `keep`.
pub fn masked_lse<T: Real>(row: &[T], keep: impl Fn(usize) -> bool) -> T {
    let max = (0..row.len())
        .filter(|&c| keep(c))
        .map(|c| row[c])
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let total: T = (0..row.len())
        .filter(|&c| keep(c))
        .map(|c| (row[c] - max).exp())
        .sum();
    max + total.ln()
}

/// `log(1 + Σ exp(x))`.
pub fn log1p_sum_exp<T: Real>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    let max = xs.iter().copied().fold(T::zero(), T::max);
    let total: T = xs.iter().map(|&x| (x - max).exp()).sum::<T>() + (-max).exp();
    max + total.ln()
}

/// Lower bound on `|z|²` in the angle derivative.
pub const ANGLE_EPS: f64 = 1e-8;

fn complex_parts<T: Real>(xa: &[T], xb: &[T], k: usize, h: usize) -> (T, T) {
    let (a, b, c, d) = (xa[k], xa[h + k], xb[k], xb[h + k]);
    // z_a · conj(z_b) has the same argument as z_a / z_b.
    (a * c + b * d, b * c - a * d)
}

pub fn angle_sim<T: Real>(xa: &[T], xb: &[T]) -> T {
    let h = xa.len() / 2;
    let total: T = (0..h)
        .map(|k| {
            let (re, im) = complex_parts(xa, xb, k, h);
            im.atan2(re).abs()
        })
        .sum();
    -total / (T::from_usize(h).unwrap() * T::lit(std::f64::consts::PI))
}

pub fn angle_sim_grad<T: Real>(xa: &[T], xb: &[T], g: T, da: &mut [T], db: &mut [T]) {
    let h = xa.len() / 2;
    let scale = -g / (T::from_usize(h).unwrap() * T::lit(std::f64::consts::PI));
    for k in 0..h {
        let (re, im) = complex_parts(xa, xb, k, h);
        let theta = im.atan2(re);
        let sign = if theta > T::zero() {
            T::one()
        } else if theta < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        let r2 = (re * re + im * im).max(T::lit(ANGLE_EPS));
        let coef = scale * sign;
        let d_re = coef * (-im / r2);
        let d_im = coef * (re / r2);
        let (a, b, c, d) = (xa[k], xa[h + k], xb[k], xb[h + k]);
        da[k] = da[k] + d_re * c - d_im * d;
        da[h + k] = da[h + k] + d_re * d + d_im * c;
        db[k] = db[k] + d_re * a + d_im * b;
        db[h + k] = db[h + k] + d_re * b - d_im * a;
    }
}
