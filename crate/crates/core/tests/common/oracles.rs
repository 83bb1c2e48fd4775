//! Independent reference computations for the statistics kernel.
//!
//! Sums of squares and moments are exact rationals built from the binary
//! value of each `f64` input; only the final square root and the t tail
//! integral run in floating point. The tail integral is adaptive Simpson
//! quadrature of the unnormalized Student density, so it shares no special
//! functions with the kernel.

#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn q(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite input")
}

fn qi(n: usize) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

fn to_f64(x: &BigRational) -> f64 {
    x.to_f64().expect("representable")
}

fn exact_mean(xs: &[f64]) -> BigRational {
    xs.iter()
        .map(|&v| q(v))
        .fold(BigRational::zero(), |a, b| a + b)
        / qi(xs.len())
}

/// Mean squares for rows, columns and residual, with the residual summed
/// term by term instead of by subtraction.
pub fn anova(rows: &[Vec<f64>]) -> (BigRational, BigRational, BigRational) {
    let n = rows.len();
    let k = rows[0].len();
    let cells: Vec<Vec<BigRational>> = rows
        .iter()
        .map(|r| r.iter().map(|&v| q(v)).collect())
        .collect();
    let all: Vec<f64> = rows.concat();
    let grand = exact_mean(&all);
    let row_means: Vec<BigRational> = rows.iter().map(|r| exact_mean(r)).collect();
    let col_means: Vec<BigRational> = (0..k)
        .map(|j| exact_mean(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect();
    let mut ssr = BigRational::zero();
    for rm in &row_means {
        let d = rm - &grand;
        ssr += &d * &d;
    }
    ssr *= qi(k);
    let mut ssc = BigRational::zero();
    for cm in &col_means {
        let d = cm - &grand;
        ssc += &d * &d;
    }
    ssc *= qi(n);
    let mut sse = BigRational::zero();
    for i in 0..n {
        for j in 0..k {
            let d = &cells[i][j] - &row_means[i] - &col_means[j] + &grand;
            sse += &d * &d;
        }
    }
    (
        ssr / qi(n - 1),
        ssc / qi(k - 1),
        sse / (qi(n - 1) * qi(k - 1)),
    )
}

/// Absolute-agreement average-measures ICC, or `None` when the denominator
/// is not positive.
pub fn icc_ak(rows: &[Vec<f64>]) -> Option<f64> {
    let n = rows.len();
    let (msr, msc, mse) = anova(rows);
    let den = &msr + (&msc - &mse) / qi(n);
    if !den.is_positive() {
        return None;
    }
    Some(to_f64(&((msr - mse) / den)))
}

fn signed_sqrt(sign_of: &BigRational, square: &BigRational) -> f64 {
    let mag = to_f64(square).sqrt();
    if sign_of.is_negative() {
        -mag
    } else {
        mag
    }
}

/// Pearson r, with r² formed exactly.
pub fn pearson_r(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (exact_mean(x), exact_mean(y));
    let mut sxy = BigRational::zero();
    let mut sxx = BigRational::zero();
    let mut syy = BigRational::zero();
    for (&a, &b) in x.iter().zip(y) {
        let dx = q(a) - &mx;
        let dy = q(b) - &my;
        sxy += &dx * &dy;
        sxx += &dx * &dx;
        syy += &dy * &dy;
    }
    let r2 = &sxy * &sxy / (sxx * syy);
    signed_sqrt(&sxy, &r2)
}

/// Pearson two-sided p through t = r·sqrt(df / (1 − r²)).
pub fn pearson_p(x: &[f64], y: &[f64]) -> f64 {
    let r = pearson_r(x, y);
    let df = (x.len() - 2) as f64;
    let t = r * (df / ((1.0 - r) * (1.0 + r))).sqrt();
    t_two_sided(t, df)
}

/// Welch t statistic and Welch–Satterthwaite df.
pub fn welch(a: &[f64], b: &[f64]) -> (f64, f64) {
    let var = |xs: &[f64]| {
        let m = exact_mean(xs);
        let ss = xs
            .iter()
            .map(|&v| {
                let d = q(v) - &m;
                &d * &d
            })
            .fold(BigRational::zero(), |s, v| s + v);
        (m, ss / qi(xs.len() - 1))
    };
    let (ma, va) = var(a);
    let (mb, vb) = var(b);
    let qa = va / qi(a.len());
    let qb = vb / qi(b.len());
    let se2 = &qa + &qb;
    let diff = ma - mb;
    let t = signed_sqrt(&diff, &(&diff * &diff / &se2));
    let df = &se2 * &se2 / (&qa * &qa / qi(a.len() - 1) + &qb * &qb / qi(b.len() - 1));
    (t, to_f64(&df))
}

fn density(s: f64, df: f64) -> f64 {
    (1.0 + s * s / df).powf(-(df + 1.0) / 2.0)
}

fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, eps: f64) -> f64 {
    fn step<F: Fn(f64) -> f64>(
        f: &F,
        (a, b): (f64, f64),
        (fa, fm, fb): (f64, f64, f64),
        whole: f64,
        eps: f64,
        depth: u32,
    ) -> f64 {
        let m = (a + b) / 2.0;
        let (lm, rm) = ((a + m) / 2.0, (m + b) / 2.0);
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * eps {
            left + right + delta / 15.0
        } else {
            step(f, (a, m), (fa, flm, fm), left, eps / 2.0, depth - 1)
                + step(f, (m, b), (fm, frm, fb), right, eps / 2.0, depth - 1)
        }
    }
    let (fa, fb) = (f(a), f(b));
    let fm = f((a + b) / 2.0);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, (a, b), (fa, fm, fb), whole, eps, 48)
}

/// ∫_a^∞ of the unnormalized density, via s = a / v on (0, 1].
fn tail(a: f64, df: f64) -> f64 {
    simpson(
        &|v: f64| {
            if v == 0.0 {
                0.0
            } else {
                density(a / v, df) * a / (v * v)
            }
        },
        0.0,
        1.0,
        1e-12,
    )
}

/// Two-sided Student-t p-value by quadrature.
pub fn t_two_sided(t: f64, df: f64) -> f64 {
    let a = t.abs();
    if a == 0.0 {
        return 1.0;
    }
    let half = simpson(&|s: f64| density(s, df), 0.0, 1.0, 1e-12) + tail(1.0, df);
    (tail(a, df) / half).min(1.0)
}

/// Ratings 1..5 in quarter steps, so sums stay small exact binaries.
pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..k)
                .map(|_| rng.random_range(4..=20) as f64 / 4.0)
                .collect()
        })
        .collect()
}

pub fn random_sample(rng: &mut ChaCha8Rng, n: usize, center: f64, spread: f64) -> Vec<f64> {
    (0..n)
        .map(|_| center + spread * (rng.random::<f64>() - 0.5))
        .collect()
}
