//! GEMM and im2col helpers shared by the dense and convolution ops.

/// `c = op(a) · op(b) + beta · c` for row-major operands.
///
/// `op(a)` is `m × k`; when `ta` is set `a` is stored as `k × m`.
/// `op(b)` is `k × n`; when `tb` is set `b` is stored as `n × k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover m·k, k·n and m·n elements and the strides
    // above stay inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a strided 1-D window: `cols[c·K + j, t] ↔ src[c, t·stride + j − pad]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub src_len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub cols_len: usize,
}

impl Window {
    #[inline]
    fn pos(&self, t: usize, j: usize) -> Option<usize> {
        let p = (t * self.stride + j) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < self.src_len).then_some(p as usize)
    }

    pub fn cols_size(&self) -> usize {
        self.channels * self.kernel * self.cols_len
    }

    pub fn im2col(&self, src: &[f64], cols: &mut [f64]) {
        debug_assert_eq!(src.len(), self.channels * self.src_len);
        debug_assert_eq!(cols.len(), self.cols_size());
        for c in 0..self.channels {
            let s = &src[c * self.src_len..(c + 1) * self.src_len];
            for j in 0..self.kernel {
                let row = &mut cols[(c * self.kernel + j) * self.cols_len..][..self.cols_len];
                for (t, r) in row.iter_mut().enumerate() {
                    *r = self.pos(t, j).map_or(0.0, |p| s[p]);
                }
            }
        }
    }

    pub fn col2im_add(&self, cols: &[f64], dst: &mut [f64]) {
        debug_assert_eq!(dst.len(), self.channels * self.src_len);
        debug_assert_eq!(cols.len(), self.cols_size());
        for c in 0..self.channels {
            let d = &mut dst[c * self.src_len..(c + 1) * self.src_len];
            for j in 0..self.kernel {
                let row = &cols[(c * self.kernel + j) * self.cols_len..][..self.cols_len];
                for (t, r) in row.iter().enumerate() {
                    if let Some(p) = self.pos(t, j) {
                        d[p] += r;
                    }
                }
            }
        }
    }
}
