//! Fixed-order dense products for inference.
//!
//! Every output entry is accumulated as `((0 + a₀b₀) + a₁b₁) + …` in
//! ascending inner index, so results match a naive triple loop bit for bit
//! and do not depend on how many columns are processed together.

/// `c = a · b` with `a: m×k`, `b: k×n`, `c: m×n`, all column-major.
pub fn matmul(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { matmul_avx2(a, m, k, b, n, c) };
            return;
        }
    }
    matmul_body(a, m, k, b, n, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, c: &mut [f32]) {
    matmul_body(a, m, k, b, n, c);
}

#[inline(always)]
fn matmul_body(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, c: &mut [f32]) {
    for j in 0..n {
        let bj = &b[j * k..(j + 1) * k];
        let cj = &mut c[j * m..(j + 1) * m];
        cj.fill(0.0);
        let mut p = 0;
        while p + 4 <= k {
            let (s0, s1, s2, s3) = (bj[p], bj[p + 1], bj[p + 2], bj[p + 3]);
            let a0 = &a[p * m..(p + 1) * m];
            let a1 = &a[(p + 1) * m..(p + 2) * m];
            let a2 = &a[(p + 2) * m..(p + 3) * m];
            let a3 = &a[(p + 3) * m..(p + 4) * m];
            for i in 0..m {
                cj[i] = cj[i] + a0[i] * s0 + a1[i] * s1 + a2[i] * s2 + a3[i] * s3;
            }
            p += 4;
        }
        while p < k {
            let s = bj[p];
            let ap = &a[p * m..(p + 1) * m];
            for i in 0..m {
                cj[i] = cj[i] + ap[i] * s;
            }
            p += 1;
        }
    }
}

/// Naive reference used by tests and hand-rolled oracles.
pub fn dot_in_order(row: impl Iterator<Item = f32>, col: impl Iterator<Item = f32>) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in row.zip(col) {
        acc += x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    #[test]
    fn matches_naive_bitwise() {
        let mut rng = rng::stream(1, "kernel");
        for (m, k, n) in [(1, 1, 1), (5, 7, 3), (16, 128, 9), (384, 128, 7)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.random::<f32>() - 0.5).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.random::<f32>() - 0.5).collect();
            let mut c = vec![0.0; m * n];
            matmul(&a, m, k, &b, n, &mut c);
            for i in 0..m {
                for j in 0..n {
                    let naive = dot_in_order((0..k).map(|p| a[p * m + i]), (0..k).map(|p| b[j * k + p]));
                    assert_eq!(c[j * m + i].to_bits(), naive.to_bits());
                }
            }
            // column subsets give the same bits
            let mut c1 = vec![0.0; m];
            matmul(&a, m, k, &b[(n - 1) * k..], 1, &mut c1);
            assert_eq!(&c[(n - 1) * m..], &c1[..]);
        }
    }
}
