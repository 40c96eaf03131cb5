//! Fixed sparse linear maps between flat buffers.
//!
//! Every index-shuffling operation in the engine (im2col, permutations,
//! broadcasts, pooling selections, flips, crops, bilinear resampling, row
//! reductions) is one of these maps. A map's adjoint is its transpose, so the
//! whole family is closed under differentiation to any order.

use std::collections::HashMap;
use std::sync::{Arc, LazyLock, Mutex, OnceLock};

use crate::tensor::numel;

/// Compressed-row matrix of shape `numel(out_shape) × numel(in_shape)`.
pub struct SparseMap {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    /// `None` means every stored weight is 1.
    vals: Option<Vec<f64>>,
    transpose: OnceLock<Arc<SparseMap>>,
}

impl std::fmt::Debug for SparseMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparseMap")
            .field("in_shape", &self.in_shape)
            .field("out_shape", &self.out_shape)
            .field("nnz", &self.cols.len())
            .finish()
    }
}

impl SparseMap {
    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), numel(&self.in_shape));
        let rows = self.row_ptr.len() - 1;
        let mut out = vec![0.0; rows];
        match &self.vals {
            None => {
                for (r, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for &c in &self.cols[self.row_ptr[r]..self.row_ptr[r + 1]] {
                        acc += input[c as usize];
                    }
                    *o = acc;
                }
            }
            Some(vals) => {
                for (r, o) in out.iter_mut().enumerate() {
                    let span = self.row_ptr[r]..self.row_ptr[r + 1];
                    let mut acc = 0.0;
                    for (&c, &w) in self.cols[span.clone()].iter().zip(&vals[span]) {
                        acc += w * input[c as usize];
                    }
                    *o = acc;
                }
            }
        }
        out
    }

    /// The adjoint map, computed once and cached.
    pub fn transposed(&self) -> Arc<SparseMap> {
        Arc::clone(self.transpose.get_or_init(|| Arc::new(self.build_transpose())))
    }

    fn build_transpose(&self) -> SparseMap {
        let n_in = numel(&self.in_shape);
        let mut counts = vec![0usize; n_in + 1];
        for &c in &self.cols {
            counts[c as usize + 1] += 1;
        }
        for i in 0..n_in {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut fill = counts;
        let mut cols = vec![0u32; self.cols.len()];
        let mut vals = self.vals.as_ref().map(|_| vec![0.0; self.cols.len()]);
        for r in 0..self.row_ptr.len() - 1 {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.cols[k] as usize;
                let dst = fill[c];
                fill[c] += 1;
                cols[dst] = r as u32;
                if let (Some(dv), Some(sv)) = (vals.as_mut(), self.vals.as_ref()) {
                    dv[dst] = sv[k];
                }
            }
        }
        SparseMap {
            in_shape: self.out_shape.clone(),
            out_shape: self.in_shape.clone(),
            row_ptr,
            cols,
            vals,
            transpose: OnceLock::new(),
        }
    }
}

struct Builder {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Option<Vec<f64>>,
}

impl Builder {
    fn new(in_shape: &[usize], out_shape: &[usize], weighted: bool) -> Self {
        let rows = numel(out_shape);
        let mut row_ptr = Vec::with_capacity(rows + 1);
        row_ptr.push(0);
        Builder {
            in_shape: in_shape.to_vec(),
            out_shape: out_shape.to_vec(),
            row_ptr,
            cols: Vec::with_capacity(rows),
            vals: weighted.then(Vec::new),
        }
    }

    fn push(&mut self, col: usize) {
        debug_assert!(col < numel(&self.in_shape));
        self.cols.push(col as u32);
    }

    fn push_weighted(&mut self, col: usize, w: f64) {
        self.cols.push(col as u32);
        self.vals.as_mut().expect("weighted builder").push(w);
    }

    fn end_row(&mut self) {
        self.row_ptr.push(self.cols.len());
    }

    fn finish(self) -> SparseMap {
        debug_assert_eq!(self.row_ptr.len(), numel(&self.out_shape) + 1);
        SparseMap {
            in_shape: self.in_shape,
            out_shape: self.out_shape,
            row_ptr: self.row_ptr,
            cols: self.cols,
            vals: self.vals,
            transpose: OnceLock::new(),
        }
    }
}

/// Pure selection: output `k` copies input `idx[k]`, or is zero for `None`.
pub fn gather(in_shape: &[usize], out_shape: &[usize], idx: impl IntoIterator<Item = Option<usize>>) -> SparseMap {
    let mut b = Builder::new(in_shape, out_shape, false);
    for i in idx {
        if let Some(c) = i {
            b.push(c);
        }
        b.end_row();
    }
    b.finish()
}

#[derive(Clone, PartialEq, Eq, Hash)]
enum Key {
    Im2col([usize; 6]),
    Permute([usize; 4]),
    RowBroadcast([usize; 2]),
    RowSum([usize; 2]),
    RowExpand([usize; 2]),
    Resize(Vec<usize>, [usize; 2]),
    FlipW(Vec<usize>),
    Shift(Vec<usize>, [isize; 2]),
}

static CACHE: LazyLock<Mutex<HashMap<Key, Arc<SparseMap>>>> = LazyLock::new(|| Mutex::new(HashMap::new()));
const CACHE_LIMIT: usize = 256;

fn cached(key: Key, build: impl FnOnce() -> SparseMap) -> Arc<SparseMap> {
    if let Some(m) = CACHE.lock().expect("map cache poisoned").get(&key) {
        return Arc::clone(m);
    }
    let map = Arc::new(build());
    let mut cache = CACHE.lock().expect("map cache poisoned");
    if cache.len() >= CACHE_LIMIT {
        cache.clear();
    }
    Arc::clone(cache.entry(key).or_insert(map))
}

/// `[b, c, h, w]` → `[b*h*w, c*k*k]` patch matrix with zero padding `pad`.
pub fn im2col(b: usize, c: usize, h: usize, w: usize, k: usize, pad: usize) -> Arc<SparseMap> {
    cached(Key::Im2col([b, c, h, w, k, pad]), || {
        let out_shape = [b * h * w, c * k * k];
        let mut bld = Builder::new(&[b, c, h, w], &out_shape, false);
        for n in 0..b {
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        for a in 0..k {
                            for bb in 0..k {
                                let y = i as isize + a as isize - pad as isize;
                                let x = j as isize + bb as isize - pad as isize;
                                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                    bld.push(((n * c + ch) * h + y as usize) * w + x as usize);
                                }
                                bld.end_row();
                            }
                        }
                    }
                }
            }
        }
        bld.finish()
    })
}

/// `[b, h, w, c]` (stored as `[b*h*w, c]`) → `[b, c, h, w]`.
pub fn nhwc_to_nchw(b: usize, h: usize, w: usize, c: usize) -> Arc<SparseMap> {
    cached(Key::Permute([b, h, w, c]), || {
        let idx = (0..b).flat_map(move |n| {
            (0..c).flat_map(move |ch| {
                (0..h).flat_map(move |i| (0..w).map(move |j| Some(((n * h + i) * w + j) * c + ch)))
            })
        });
        gather(&[b * h * w, c], &[b, c, h, w], idx)
    })
}

/// `[cols]` → `[rows, cols]`, repeating the vector on every row.
pub fn row_broadcast(rows: usize, cols: usize) -> Arc<SparseMap> {
    cached(Key::RowBroadcast([rows, cols]), || {
        gather(&[cols], &[rows, cols], (0..rows * cols).map(|k| Some(k % cols)))
    })
}

/// `[rows, cols]` → `[rows]`, summing each row.
pub fn row_sum(rows: usize, cols: usize) -> Arc<SparseMap> {
    cached(Key::RowSum([rows, cols]), || {
        let mut b = Builder::new(&[rows, cols], &[rows], false);
        for r in 0..rows {
            for c in 0..cols {
                b.push(r * cols + c);
            }
            b.end_row();
        }
        b.finish()
    })
}

/// `[rows]` → `[rows, cols]`, repeating each entry across its row.
pub fn row_expand(rows: usize, cols: usize) -> Arc<SparseMap> {
    cached(Key::RowExpand([rows, cols]), || {
        gather(&[rows], &[rows, cols], (0..rows * cols).map(|k| Some(k / cols)))
    })
}

/// Selects column `picks[r]` of each row of a `[rows, cols]` matrix.
pub fn pick_columns(rows: usize, cols: usize, picks: &[usize]) -> SparseMap {
    gather(&[rows, cols], &[rows], picks.iter().enumerate().map(|(r, &c)| Some(r * cols + c)))
}

fn split_hw(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape.len();
    let (h, w) = (shape[n - 2], shape[n - 1]);
    (numel(&shape[..n - 2]), h, w)
}

/// Mirrors the last axis.
pub fn flip_w(shape: &[usize]) -> Arc<SparseMap> {
    cached(Key::FlipW(shape.to_vec()), || {
        let (lead, h, w) = split_hw(shape);
        let idx = (0..lead * h).flat_map(move |row| (0..w).map(move |j| Some(row * w + (w - 1 - j))));
        gather(shape, shape, idx)
    })
}

/// Translates the last two axes: `out[i, j] = in[i - dy, j - dx]`, zero
/// where the source falls outside. A pad-then-crop at offset `(oy, ox)` of a
/// `pad`-padded image is a shift by `(pad - oy, pad - ox)`.
pub fn shift(shape: &[usize], dy: isize, dx: isize) -> Arc<SparseMap> {
    cached(Key::Shift(shape.to_vec(), [dy, dx]), || {
        let (lead, h, w) = split_hw(shape);
        let idx = (0..lead).flat_map(move |l| {
            (0..h).flat_map(move |i| {
                (0..w).map(move |j| {
                    let y = i as isize - dy;
                    let x = j as isize - dx;
                    (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w)
                        .then(|| (l * h + y as usize) * w + x as usize)
                })
            })
        });
        gather(shape, shape, idx)
    })
}

/// Bilinear resampling of the last two axes with half-pixel centres and
/// edge clamping.
pub fn bilinear_resize(shape: &[usize], out_h: usize, out_w: usize) -> Arc<SparseMap> {
    cached(Key::Resize(shape.to_vec(), [out_h, out_w]), || {
        let (lead, h, w) = split_hw(shape);
        let mut out_shape = shape.to_vec();
        let n = out_shape.len();
        out_shape[n - 2] = out_h;
        out_shape[n - 1] = out_w;
        let taps = |dst: usize, src_len: usize, dst_len: usize| -> [(usize, f64); 2] {
            let scale = src_len as f64 / dst_len as f64;
            let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            let t = pos - lo as f64;
            [(lo, 1.0 - t), (hi, t)]
        };
        let mut b = Builder::new(shape, &out_shape, true);
        for l in 0..lead {
            for i in 0..out_h {
                let ty = taps(i, h, out_h);
                for j in 0..out_w {
                    let tx = taps(j, w, out_w);
                    // merge duplicate taps at the borders
                    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(4);
                    for &(y, wy) in &ty {
                        for &(x, wx) in &tx {
                            let wgt = wy * wx;
                            if wgt == 0.0 {
                                continue;
                            }
                            let col = (l * h + y) * w + x;
                            match entries.iter_mut().find(|e| e.0 == col) {
                                Some(e) => e.1 += wgt,
                                None => entries.push((col, wgt)),
                            }
                        }
                    }
                    for (col, wgt) in entries {
                        b.push_weighted(col, wgt);
                    }
                    b.end_row();
                }
            }
        }
        b.finish()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(map: &SparseMap) -> Vec<Vec<f64>> {
        let n_in = numel(map.in_shape());
        (0..n_in)
            .map(|c| {
                let mut e = vec![0.0; n_in];
                e[c] = 1.0;
                map.apply(&e)
            })
            .collect()
    }

    #[test]
    fn transpose_is_adjoint() {
        let m = bilinear_resize(&[1, 3, 3], 5, 4);
        let t = m.transposed();
        let d = dense(&m);
        let dt = dense(&t);
        for (c, col) in d.iter().enumerate() {
            for (r, v) in col.iter().enumerate() {
                assert_eq!(*v, dt[r][c]);
            }
        }
    }

    #[test]
    fn resize_preserves_constants() {
        let m = bilinear_resize(&[4, 4], 8, 8);
        let out = m.apply(&[0.7; 16]);
        assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn flip_is_involution() {
        let m = flip_w(&[2, 3]);
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(m.apply(&x), vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(m.apply(&m.apply(&x)), x.to_vec());
    }

    #[test]
    fn shift_zero_fills() {
        let m = shift(&[2, 2], 1, 0);
        assert_eq!(m.apply(&[1.0, 2.0, 3.0, 4.0]), vec![0.0, 0.0, 1.0, 2.0]);
    }
}
