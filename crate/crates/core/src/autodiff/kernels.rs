//! Slice-level compute kernels shared by the forward and backward passes.
//!
//! Loops are written so the compiler can vectorize the inner axis. Reductions
//! use a fixed lane count so results do not depend on the target ISA.

use super::tensor::Real;

/// Spatial extents padded to rank 3 with leading ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Grid3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid3 {
    pub fn from_spatial(spatial: &[usize]) -> Option<Self> {
        match *spatial {
            [w] => Some(Self { d: 1, h: 1, w }),
            [h, w] => Some(Self { d: 1, h, w }),
            [d, h, w] => Some(Self { d, h, w }),
            _ => None,
        }
    }

    /// Cubic kernel of side `k` over the last `rank` axes.
    pub fn kernel(k: usize, rank: usize) -> Self {
        Self {
            d: if rank >= 3 { k } else { 1 },
            h: if rank >= 2 { k } else { 1 },
            w: k,
        }
    }

    pub fn len(&self) -> usize {
        self.d * self.h * self.w
    }
}

#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let s0 = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let s1 = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

/// Valid output range `[lo, hi)` along an axis of length `n` for offset `o`,
/// i.e. positions `p` with `0 <= p + o < n`.
#[inline]
fn span(n: usize, o: isize) -> (usize, usize) {
    let lo = (-o).max(0) as usize;
    let hi = (n as isize - o).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

/// Visits every (weight index, output row slice, input row slice) triple of a
/// zero-padded "same" cross-correlation over one channel.
#[inline]
fn for_each_tap(
    g: Grid3,
    k: Grid3,
    mut f: impl FnMut(usize, std::ops::Range<usize>, std::ops::Range<usize>),
) {
    let (rd, rh, rw) = ((k.d / 2) as isize, (k.h / 2) as isize, (k.w / 2) as isize);
    for a in 0..k.d {
        let oz = a as isize - rd;
        let (z0, z1) = span(g.d, oz);
        for b in 0..k.h {
            let oy = b as isize - rh;
            let (y0, y1) = span(g.h, oy);
            for c in 0..k.w {
                let ox = c as isize - rw;
                let (x0, x1) = span(g.w, ox);
                if x0 >= x1 {
                    continue;
                }
                let tap = (a * k.h + b) * k.w + c;
                for z in z0..z1 {
                    let zi = (z as isize + oz) as usize;
                    for y in y0..y1 {
                        let yi = (y as isize + oy) as usize;
                        let out_row = (z * g.h + y) * g.w;
                        let in_row = (zi * g.h + yi) * g.w;
                        let xi0 = (x0 as isize + ox) as usize;
                        f(
                            tap,
                            out_row + x0..out_row + x1,
                            in_row + xi0..in_row + xi0 + (x1 - x0),
                        );
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(input: &[T], out: &mut [T], g: Grid3, k: Grid3, w: &[T]) {
    for_each_tap(g, k, |tap, o, i| axpy(&mut out[o], w[tap], &input[i]));
}

pub(crate) fn conv_backward_input<T: Real>(dout: &[T], din: &mut [T], g: Grid3, k: Grid3, w: &[T]) {
    for_each_tap(g, k, |tap, o, i| axpy(&mut din[i], w[tap], &dout[o]));
}

pub(crate) fn conv_backward_kernel<T: Real>(
    dout: &[T],
    input: &[T],
    g: Grid3,
    k: Grid3,
    dw: &mut [T],
) {
    for_each_tap(g, k, |tap, o, i| dw[tap] += dot(&dout[o], &input[i]));
}

/// `out[o, :] += sum_i w[o, i] * input[i, :]`.
pub(crate) fn dense_forward<T: Real>(
    input: &[T],
    cin: usize,
    cells: usize,
    w: &[T],
    cout: usize,
    out: &mut [T],
) {
    for o in 0..cout {
        let row = &mut out[o * cells..(o + 1) * cells];
        let wr = &w[o * cin..(o + 1) * cin];
        accumulate_rows(row, cells, (0..cin).map(|i| (wr[i], &input[i * cells..(i + 1) * cells])));
    }
}

/// `din[i, :] += sum_o w[o, i] * dout[o, :]`.
pub(crate) fn dense_backward_input<T: Real>(
    dout: &[T],
    cout: usize,
    cells: usize,
    w: &[T],
    cin: usize,
    din: &mut [T],
) {
    for i in 0..cin {
        let row = &mut din[i * cells..(i + 1) * cells];
        accumulate_rows(row, cells, (0..cout).map(|o| (w[o * cin + i], &dout[o * cells..(o + 1) * cells])));
    }
}

/// `dw[o, i] += <dout[o, :], input[i, :]>`.
pub(crate) fn dense_backward_weight<T: Real>(
    dout: &[T],
    cout: usize,
    input: &[T],
    cin: usize,
    cells: usize,
    dw: &mut [T],
) {
    for o in 0..cout {
        let g = &dout[o * cells..(o + 1) * cells];
        for i in 0..cin {
            dw[o * cin + i] += dot(g, &input[i * cells..(i + 1) * cells]);
        }
    }
}

/// Adds a weighted sum of rows into `row`, four rows per pass.
#[inline]
fn accumulate_rows<'a, T: Real>(
    row: &mut [T],
    cells: usize,
    terms: impl Iterator<Item = (T, &'a [T])>,
) {
    let terms: Vec<(T, &'a [T])> = terms.collect();
    let mut chunks = terms.chunks_exact(4);
    for q in &mut chunks {
        let (w0, x0) = (q[0].0, &q[0].1[..cells]);
        let (w1, x1) = (q[1].0, &q[1].1[..cells]);
        let (w2, x2) = (q[2].0, &q[2].1[..cells]);
        let (w3, x3) = (q[3].0, &q[3].1[..cells]);
        for ((((r, &a), &b), &c), &d) in row.iter_mut().zip(x0).zip(x1).zip(x2).zip(x3) {
            *r += (w0 * a + w1 * b) + (w2 * c + w3 * d);
        }
    }
    for &(w, x) in chunks.remainder() {
        axpy(row, w, x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..37).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }

    #[test]
    fn span_limits() {
        assert_eq!(span(5, -1), (1, 5));
        assert_eq!(span(5, 1), (0, 4));
        assert_eq!(span(2, 3), (0, 0));
    }

    #[test]
    fn conv_1d_by_hand() {
        let g = Grid3::from_spatial(&[3]).unwrap();
        let k = Grid3::kernel(3, 1);
        let mut out = vec![0.0f64; 3];
        conv_forward(&[1.0, 2.0, 3.0], &mut out, g, k, &[1.0, 1.0, 1.0]);
        assert_eq!(out, vec![3.0, 6.0, 5.0]);
    }
}
