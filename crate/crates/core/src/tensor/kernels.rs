use std::cell::Cell;

use super::Scalar;

thread_local! {
    static MULTIPLIES: Cell<u64> = const { Cell::new(0) };
}

/// Scalar multiplies issued by matrix products on this thread since the
/// last reset. Only gemm work is counted.
pub fn multiply_count() -> u64 {
    MULTIPLIES.with(Cell::get)
}

pub fn reset_multiply_count() {
    MULTIPLIES.with(|c| c.set(0));
}

/// `c[m,n] (+)= op(a)[m,k] * op(b)[k,n]`, all buffers row-major.
///
/// With `a_t` the buffer `a` holds a `[k,m]` matrix, with `b_t` the buffer
/// `b` holds `[n,k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    a_t: bool,
    b: &[S],
    b_t: bool,
    c: &mut [S],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = S::zero());
        }
        return;
    }
    MULTIPLIES.with(|cnt| cnt.set(cnt.get() + (m * k * n) as u64));
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { S::one() } else { S::zero() };
    S::gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, Option<usize>)) {
        let p = self.positions();
        for ci in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    for oh in 0..self.h_out {
                        let y = (oh * self.stride + ki) as isize - self.pad as isize;
                        for ow in 0..self.w_out {
                            let x = (ow * self.stride + kj) as isize - self.pad as isize;
                            let col = row * p + oh * self.w_out + ow;
                            let src = (y >= 0
                                && x >= 0
                                && (y as usize) < self.h
                                && (x as usize) < self.w)
                                .then(|| (ci * self.h + y as usize) * self.w + x as usize);
                            f(col, src);
                        }
                    }
                }
            }
        }
    }
}

/// Unfold `x[C,H,W]` into columns `[C*kh*kw, Ho*Wo]`.
pub(crate) fn im2col<S: Scalar>(x: &[S], g: &ConvGeometry) -> Vec<S> {
    let mut cols = vec![S::zero(); g.patch_len() * g.positions()];
    g.for_each_tap(|col, src| {
        if let Some(s) = src {
            cols[col] = x[s];
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dx`.
pub(crate) fn col2im<S: Scalar>(cols: &[S], g: &ConvGeometry, dx: &mut [S]) {
    g.for_each_tap(|col, src| {
        if let Some(s) = src {
            dx[s] += cols[col];
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_match_plain_product() {
        // a is 2x3, b is 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f64; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        let a_t = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b_t = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0f64; 4];
        gemm(2, 3, 2, &a_t, true, &b_t, true, &mut c2, false);
        assert_eq!(c, c2);

        gemm(2, 3, 2, &a, false, &b, false, &mut c2, true);
        assert_eq!(c2, [116.0, 128.0, 278.0, 308.0]);
    }

    #[test]
    fn multiply_counter_tracks_gemm_volume() {
        reset_multiply_count();
        let mut c = [0.0f32; 6];
        gemm(2, 4, 3, &[0.0; 8], false, &[0.0; 12], false, &mut c, false);
        assert_eq!(multiply_count(), 24);
    }
}
