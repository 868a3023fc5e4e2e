//! Attention and masking operators.
//!
//! Everything here is stateless. Single-head operators work on 2-D
//! `(rows, dim)` views; multi-head attention is a leading batch axis owned by
//! the caller.
//!
//! Additive masks carry `-inf` / `0` entries. During the logit update a `-inf`
//! entry is applied by adding `f32::MIN` to the logit, and a `0` entry leaves the
//! logit untouched, so `masked_attn` with an all-zero mask performs exactly the
//! same floating point operations as `attn`.

use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewD, Axis, IxDyn, Zip};

use crate::error::{shape_err, Error, MaskLeg, Result};

/// Query, key and value matrices for one attention head.
#[derive(Debug, Clone, Copy)]
pub struct AttnTensors<'a> {
    q: ArrayView2<'a, f32>,
    k: ArrayView2<'a, f32>,
    v: ArrayView2<'a, f32>,
    scale: f32,
}

impl<'a> AttnTensors<'a> {
    /// Validates shapes and uses the default scale `1/sqrt(d)`.
    pub fn new(
        q: ArrayView2<'a, f32>,
        k: ArrayView2<'a, f32>,
        v: ArrayView2<'a, f32>,
    ) -> Result<Self> {
        let d = q.ncols();
        if d == 0 {
            return Err(shape_err("query dim d must be > 0"));
        }
        if k.ncols() != d {
            return Err(shape_err(format!(
                "Q last axis d={} != K last axis d={}",
                d,
                k.ncols()
            )));
        }
        if k.nrows() != v.nrows() {
            return Err(shape_err(format!(
                "K rows N_k={} != V rows N_k={}",
                k.nrows(),
                v.nrows()
            )));
        }
        if k.nrows() == 0 {
            return Err(shape_err("N_k must be > 0"));
        }
        Ok(Self {
            q,
            k,
            v,
            scale: 1.0 / (d as f32).sqrt(),
        })
    }

    pub fn with_scale(mut self, scale: f32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(shape_err(format!("scale must be positive, got {scale}")));
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn q(&self) -> ArrayView2<'a, f32> {
        self.q
    }
    pub fn k(&self) -> ArrayView2<'a, f32> {
        self.k
    }
    pub fn v(&self) -> ArrayView2<'a, f32> {
        self.v
    }
    pub fn scale(&self) -> f32 {
        self.scale
    }
    pub fn n_q(&self) -> usize {
        self.q.nrows()
    }
    pub fn n_k(&self) -> usize {
        self.k.nrows()
    }
    pub fn d_v(&self) -> usize {
        self.v.ncols()
    }
}

/// Additive attention mask with entries in `{-inf, 0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveMask {
    values: Array2<f32>,
}

impl AdditiveMask {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if let Some(bad) = values
            .iter()
            .find(|&&x| !(x == 0.0 || x == f32::NEG_INFINITY))
        {
            return Err(Error::Mask(format!(
                "additive mask entries must be -inf or 0, found {bad}"
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(n_q: usize, n_k: usize) -> Self {
        Self {
            values: Array2::zeros((n_q, n_k)),
        }
    }

    /// Mask where every query row sees exactly the keys flagged `true`.
    pub fn from_visible_keys(n_q: usize, visible: &[bool]) -> Self {
        let mut values = Array2::zeros((n_q, visible.len()));
        for mut row in values.rows_mut() {
            for (x, &vis) in row.iter_mut().zip(visible) {
                if !vis {
                    *x = f32::NEG_INFINITY;
                }
            }
        }
        Self { values }
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Index of the first row without any visible key.
    pub fn first_degenerate_row(&self) -> Option<usize> {
        self.values
            .rows()
            .into_iter()
            .position(|row| row.iter().all(|&x| x == f32::NEG_INFINITY))
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|&x| x == 0.0)
    }
}

/// Binary `{0, 1}` mask broadcast against an attention output or feature array.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendMask {
    values: ArrayD<f32>,
}

impl BlendMask {
    pub fn new(values: ArrayD<f32>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|&&x| !(x == 0.0 || x == 1.0)) {
            return Err(Error::Mask(format!(
                "blend mask must be binary, found {bad}"
            )));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[bool]) -> Self {
        let values = ArrayD::from_shape_fn(IxDyn(&[rows.len(), 1]), |ix| {
            if rows[ix[0]] {
                1.0
            } else {
                0.0
            }
        });
        Self { values }
    }

    pub fn filled(shape: &[usize], on: bool) -> Self {
        Self {
            values: ArrayD::from_elem(IxDyn(shape), if on { 1.0 } else { 0.0 }),
        }
    }

    pub fn values(&self) -> &ArrayD<f32> {
        &self.values
    }
}

/// Scaled logits `Q K^T * scale`.
fn logits(t: &AttnTensors<'_>) -> Array2<f32> {
    let mut s = t.q.dot(&t.k.t());
    s.mapv_inplace(|x| x * t.scale);
    s
}

/// Row-wise numerically stabilized softmax, in place.
pub(crate) fn softmax_rows_inplace(s: &mut Array2<f32>) {
    for mut row in s.rows_mut() {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x));
        let mut sum = 0.0f32;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

fn apply_mask(s: &mut Array2<f32>, m: &AdditiveMask, leg: MaskLeg) -> Result<()> {
    if m.shape() != s.dim() {
        return Err(shape_err(format!(
            "{leg} shape {:?} != logits shape (N_q, N_k) = {:?}",
            m.shape(),
            s.dim()
        )));
    }
    if let Some(row) = m.first_degenerate_row() {
        return Err(Error::DegenerateMask { leg, row });
    }
    Zip::from(s).and(&m.values).for_each(|x, &mv| {
        if mv == f32::NEG_INFINITY {
            *x += f32::MIN;
        }
    });
    Ok(())
}

/// Post-softmax attention probabilities `softmax(Q K^T * scale)`.
pub fn attn_probs(t: &AttnTensors<'_>) -> Array2<f32> {
    let mut s = logits(t);
    softmax_rows_inplace(&mut s);
    s
}

/// `softmax(Q K^T * scale + M)`; keys masked with `-inf` get exactly zero weight.
pub fn masked_attn_probs(t: &AttnTensors<'_>, m: &AdditiveMask) -> Result<Array2<f32>> {
    masked_probs_leg(t, m, MaskLeg::Single)
}

fn masked_probs_leg(t: &AttnTensors<'_>, m: &AdditiveMask, leg: MaskLeg) -> Result<Array2<f32>> {
    let mut s = logits(t);
    apply_mask(&mut s, m, leg)?;
    softmax_rows_inplace(&mut s);
    debug_assert!(Zip::from(&s)
        .and(&m.values)
        .all(|&p, &mv| mv == 0.0 || p == 0.0));
    Ok(s)
}

pub fn attn(t: &AttnTensors<'_>) -> Array2<f32> {
    attn_probs(t).dot(&t.v)
}

pub fn masked_attn(t: &AttnTensors<'_>, m: &AdditiveMask) -> Result<Array2<f32>> {
    Ok(masked_attn_probs(t, m)?.dot(&t.v))
}

/// Foreground/background fused attention:
/// `m-attn(.; M^f) * M_m + m-attn(.; M^b) * (1 - M_m)`.
pub fn mask_fused_attn(
    t: &AttnTensors<'_>,
    mf: &AdditiveMask,
    mb: &AdditiveMask,
    mm: &BlendMask,
) -> Result<Array2<f32>> {
    let fg = masked_probs_leg(t, mf, MaskLeg::Foreground)?.dot(&t.v);
    let bg = masked_probs_leg(t, mb, MaskLeg::Background)?.dot(&t.v);
    let out = blend_features(fg.view().into_dyn(), bg.view().into_dyn(), mm)?;
    Ok(out
        .into_dimensionality()
        .expect("blend preserves the 2-D shape"))
}

/// `mm * a + (1 - mm) * b` with `mm` broadcast to the shape of `a`.
///
/// Binary masks make this a per-element selection, so the result is
/// bit-identical to `a` (or `b`) wherever the mask is 1 (or 0).
pub fn blend_features(a: ArrayViewD<'_, f32>, b: ArrayViewD<'_, f32>, mm: &BlendMask) -> Result<ArrayD<f32>> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "blend operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let m = mm.values.broadcast(a.raw_dim()).ok_or_else(|| {
        shape_err(format!(
            "blend mask {:?} does not broadcast to {:?}",
            mm.values.shape(),
            a.shape()
        ))
    })?;
    let mut out = a.to_owned();
    Zip::from(&mut out).and(&b).and(&m).for_each(|o, &bv, &mv| {
        if mv == 0.0 {
            *o = bv;
        } else if mv != 1.0 {
            *o = mv * *o + (1.0 - mv) * bv;
        }
    });
    Ok(out)
}

/// Sum of each softmax row; used by invariant checks.
pub fn row_sums(p: &Array2<f32>) -> Vec<f32> {
    p.sum_axis(Axis(1)).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Scalar f64 softmax-attention, written without ndarray matmuls.
    fn oracle_attn(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], visible: Option<&[bool]>) -> Vec<Vec<f64>> {
        let d = q[0].len() as f64;
        q.iter()
            .map(|qi| {
                let idx: Vec<usize> = (0..k.len())
                    .filter(|&j| visible.is_none_or(|vis| vis[j]))
                    .collect();
                let s: Vec<f64> = idx
                    .iter()
                    .map(|&j| qi.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..v[0].len())
                    .map(|c| idx.iter().zip(&e).map(|(&j, w)| w / z * v[j][c]).sum())
                    .collect()
            })
            .collect()
    }

    fn to_vecs(a: &Array2<f32>) -> Vec<Vec<f64>> {
        a.rows().into_iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect()
    }

    #[test]
    fn single_key_returns_its_value() {
        let (q, k, v) = (array![[1.0f32, 0.0]], array![[1.0f32, 0.0]], array![[5.0f32, 5.0]]);
        let t = AttnTensors::new(q.view(), k.view(), v.view()).unwrap();
        assert_eq!(attn(&t), array![[5.0f32, 5.0]]);
    }

    #[test]
    fn zero_query_averages_values() {
        let q = array![[0.0f32, 0.0]];
        let k = array![[1.0f32, 0.0], [0.0, 1.0]];
        let v = array![[2.0f32, 0.0], [0.0, 2.0]];
        let t = AttnTensors::new(q.view(), k.view(), v.view()).unwrap();
        assert_eq!(attn(&t), array![[1.0f32, 1.0]]);
    }

    #[test]
    fn two_key_softmax_matches_scalar_oracle() {
        // softmax([2/sqrt(2), 0])
        let a = 2.0f64 / 2.0f64.sqrt();
        let w0 = a.exp() / (a.exp() + 1.0);
        let q = array![[2.0f32, 0.0]];
        let k = array![[1.0f32, 0.0], [0.0, 1.0]];
        let v = array![[1.0f32, 0.0], [0.0, 1.0]];
        let out = attn(&AttnTensors::new(q.view(), k.view(), v.view()).unwrap());
        assert!((out[[0, 0]] as f64 - w0).abs() < 1e-6);
        assert!((out[[0, 1]] as f64 - (1.0 - w0)).abs() < 1e-6);
        assert!((w0 - 0.8044).abs() < 1e-4);
    }

    #[test]
    fn dimension_mismatch_names_axes() {
        let q = array![[1.0f32, 0.0, 0.0]];
        let k = array![[1.0f32, 0.0]];
        let err = AttnTensors::new(q.view(), k.view(), k.view()).unwrap_err();
        assert!(err.to_string().contains("Q last axis"), "{err}");
        let v = array![[1.0f32], [2.0]];
        let err = AttnTensors::new(k.view(), k.view(), v.view()).unwrap_err();
        assert!(err.to_string().contains("V rows"), "{err}");
    }

    #[test]
    fn masked_key_gets_zero_weight() {
        let q = array![[0.3f32, -0.2]];
        let k = array![[1.0f32, 0.0], [0.0, 1.0]];
        let v = array![[3.0f32, 3.0], [9.0, 9.0]];
        let t = AttnTensors::new(q.view(), k.view(), v.view()).unwrap();
        let m = AdditiveMask::new(array![[0.0, f32::NEG_INFINITY]]).unwrap();
        assert_eq!(masked_attn(&t, &m).unwrap(), array![[3.0f32, 3.0]]);
        assert_eq!(masked_attn_probs(&t, &m).unwrap()[[0, 1]], 0.0);
    }

    #[test]
    fn masking_one_of_three_keys_matches_resoftmax_oracle() {
        let q = array![[0.4f32, 1.1], [-0.7, 0.2]];
        let k = array![[1.0f32, 0.5], [-0.3, 0.8], [2.0, -1.0]];
        let v = array![[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        let t = AttnTensors::new(q.view(), k.view(), v.view()).unwrap();
        let vis = [true, true, false];
        let m = AdditiveMask::from_visible_keys(2, &vis);
        let got = masked_attn(&t, &m).unwrap();
        let want = oracle_attn(&to_vecs(&q), &to_vecs(&k), &to_vecs(&v), Some(&vis));
        for (gr, wr) in got.rows().into_iter().zip(&want) {
            for (g, w) in gr.iter().zip(wr) {
                assert!((*g as f64 - w).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let q = array![[1.0f32, 0.0], [0.0, 1.0]];
        let t = AttnTensors::new(q.view(), q.view(), q.view()).unwrap();
        let m = AdditiveMask::new(array![[0.0, 0.0], [f32::NEG_INFINITY, f32::NEG_INFINITY]]).unwrap();
        match masked_attn(&t, &m) {
            Err(Error::DegenerateMask { row: 1, leg: MaskLeg::Single }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let ok = AdditiveMask::zeros(2, 2);
        let mm = BlendMask::filled(&[2, 1], true);
        match mask_fused_attn(&t, &ok, &m, &mm) {
            Err(Error::DegenerateMask { leg: MaskLeg::Background, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn additive_mask_rejects_other_values() {
        assert!(AdditiveMask::new(array![[0.0, -1.0]]).is_err());
        assert!(BlendMask::new(array![[0.5f32]].into_dyn()).is_err());
    }

    #[test]
    fn fused_attention_splices_rows() {
        let q = array![[0.4f32, 1.1], [-0.7, 0.2], [0.1, 0.1], [2.0, -0.5]];
        let k = array![[1.0f32, 0.5], [-0.3, 0.8], [2.0, -1.0]];
        let v = array![[1.0f32, 2.0], [4.0, 5.0], [7.0, 8.0]];
        let t = AttnTensors::new(q.view(), k.view(), v.view()).unwrap();
        let mf = AdditiveMask::from_visible_keys(4, &[true, false, true]);
        let mb = AdditiveMask::from_visible_keys(4, &[false, true, false]);
        let rows = [true, false, true, false];
        let got = mask_fused_attn(&t, &mf, &mb, &BlendMask::from_rows(&rows)).unwrap();
        let fg = masked_attn(&t, &mf).unwrap();
        let bg = masked_attn(&t, &mb).unwrap();
        for (i, &on) in rows.iter().enumerate() {
            let want = if on { fg.row(i) } else { bg.row(i) };
            assert_eq!(got.row(i), want);
        }
        let all_fg = mask_fused_attn(&t, &mf, &mb, &BlendMask::filled(&[4, 2], true)).unwrap();
        assert_eq!(all_fg, fg);
        let all_bg = mask_fused_attn(&t, &mf, &mb, &BlendMask::filled(&[4, 2], false)).unwrap();
        assert_eq!(all_bg, bg);
    }

    #[test]
    fn blend_selects_elements() {
        let a = array![[1.0f32, 1.0]].into_dyn();
        let b = array![[3.0f32, 3.0]].into_dyn();
        let mm = BlendMask::new(array![[1.0f32, 0.0]].into_dyn()).unwrap();
        assert_eq!(blend_features(a.view(), b.view(), &mm).unwrap(), array![[1.0f32, 3.0]].into_dyn());
        let ones = BlendMask::filled(&[1, 2], true);
        assert_eq!(blend_features(a.view(), b.view(), &ones).unwrap(), a);
        let zeros = BlendMask::filled(&[1, 2], false);
        assert_eq!(blend_features(a.view(), b.view(), &zeros).unwrap(), b);
        let c = array![[1.0f32, 2.0, 3.0]].into_dyn();
        assert!(blend_features(a.view(), c.view(), &ones).is_err());
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f32>> {
        proptest::collection::vec(-3.0f32..3.0, rows * cols)
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(q in matrix(3, 4), k in matrix(5, 4), v in matrix(5, 2)) {
            let t = AttnTensors::new(q.view(), k.view(), v.view()).unwrap();
            for s in row_sums(&attn_probs(&t)) {
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
            let m = AdditiveMask::from_visible_keys(3, &[true, false, true, false, true]);
            for s in row_sums(&masked_attn_probs(&t, &m).unwrap()) {
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn zero_mask_is_bit_exact(q in matrix(3, 4), k in matrix(5, 4), v in matrix(5, 2)) {
            let t = AttnTensors::new(q.view(), k.view(), v.view()).unwrap();
            let m = AdditiveMask::zeros(3, 5);
            prop_assert_eq!(masked_attn(&t, &m).unwrap(), attn(&t));
        }

        #[test]
        fn permuting_keys_jointly_is_invariant(q in matrix(3, 4), k in matrix(6, 4), v in matrix(6, 3), shift in 1usize..6) {
            let t = AttnTensors::new(q.view(), k.view(), v.view()).unwrap();
            let base = attn(&t);
            let perm: Vec<usize> = (0..6).map(|i| (i + shift) % 6).collect();
            let kp = k.select(Axis(0), &perm);
            let vp = v.select(Axis(0), &perm);
            let tp = AttnTensors::new(q.view(), kp.view(), vp.view()).unwrap();
            let out = attn(&tp);
            for (a, b) in base.iter().zip(out.iter()) {
                prop_assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn blend_with_itself_is_identity(a in matrix(4, 3), bits in proptest::collection::vec(any::<bool>(), 12)) {
            let mm = BlendMask::new(ArrayD::from_shape_vec(IxDyn(&[4, 3]), bits.iter().map(|&b| b as u8 as f32).collect()).unwrap()).unwrap();
            prop_assert_eq!(blend_features(a.view().into_dyn(), a.view().into_dyn(), &mm).unwrap(), a.into_dyn());
        }
    }
}
