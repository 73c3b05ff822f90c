//! Fixed index maps backing the gather/scatter pair of linear operators.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

/// Marks a destination entry that reads as zero.
pub const ZERO: u32 = u32::MAX;

/// `dst[i] = src[index[i]]` (or zero when `index[i] == ZERO`).
///
/// The adjoint scatters a destination-shaped tensor back into the source
/// shape, summing entries that share a source index.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMap {
    pub src_shape: (usize, usize),
    pub dst_shape: (usize, usize),
    pub index: Vec<u32>,
}

impl IndexMap {
    pub fn new(src_shape: (usize, usize), dst_shape: (usize, usize), index: Vec<u32>) -> Self {
        assert_eq!(index.len(), dst_shape.0 * dst_shape.1);
        let n = src_shape.0 * src_shape.1;
        assert!(index.iter().all(|&i| i == ZERO || (i as usize) < n));
        Self { src_shape, dst_shape, index }
    }

    /// Column selection: `rows×cols` source, one destination column per entry of `cols_sel`.
    pub fn select_cols(rows: usize, cols: usize, cols_sel: &[usize]) -> Self {
        let w = cols_sel.len();
        let mut index = Vec::with_capacity(rows * w);
        for r in 0..rows {
            for &c in cols_sel {
                assert!(c < cols);
                index.push((r * cols + c) as u32);
            }
        }
        Self::new((rows, cols), (rows, w), index)
    }

    /// Row selection.
    pub fn select_rows(rows: usize, cols: usize, rows_sel: &[usize]) -> Self {
        let mut index = Vec::with_capacity(rows_sel.len() * cols);
        for &r in rows_sel {
            assert!(r < rows);
            for c in 0..cols {
                index.push((r * cols + c) as u32);
            }
        }
        Self::new((rows, cols), (rows_sel.len(), cols), index)
    }

    /// Temporal unfolding for a 1-D convolution with zero padding.
    ///
    /// Source is `rows×cols`; destination row `t` holds the `kernel` frames
    /// `t - pad .. t - pad + kernel`, tap-major: column `j*cols + c`.
    pub fn unfold(rows: usize, cols: usize, kernel: usize, pad: usize) -> Self {
        let out_rows = rows + 2 * pad + 1 - kernel;
        let mut index = Vec::with_capacity(out_rows * kernel * cols);
        for t in 0..out_rows {
            for j in 0..kernel {
                let src = t as isize + j as isize - pad as isize;
                for c in 0..cols {
                    if src < 0 || src >= rows as isize {
                        index.push(ZERO);
                    } else {
                        index.push((src as usize * cols + c) as u32);
                    }
                }
            }
        }
        Self::new((rows, cols), (out_rows, kernel * cols), index)
    }

    /// Cached `unfold` maps, keyed by shape.
    pub fn unfold_cached(rows: usize, cols: usize, kernel: usize, pad: usize) -> Rc<Self> {
        thread_local! {
            static CACHE: RefCell<HashMap<(usize, usize, usize, usize), Rc<IndexMap>>> = RefCell::new(HashMap::new());
        }
        CACHE.with(|c| {
            c.borrow_mut()
                .entry((rows, cols, kernel, pad))
                .or_insert_with(|| Rc::new(Self::unfold(rows, cols, kernel, pad)))
                .clone()
        })
    }

    pub(crate) fn gather(&self, src: &[f64]) -> Vec<f64> {
        self.index
            .iter()
            .map(|&i| if i == ZERO { 0.0 } else { src[i as usize] })
            .collect()
    }

    pub(crate) fn scatter(&self, dst: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.src_shape.0 * self.src_shape.1];
        for (&i, &v) in self.index.iter().zip(dst) {
            if i != ZERO {
                out[i as usize] += v;
            }
        }
        out
    }
}
