use ndarray::{s, Array1, Array2, Array3, Array4, ArrayViewMutD, ArrayViewD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

/// Collects named parameter views for checkpointing and checksums.
pub(crate) trait Params {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f32>)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f32>)>);
}

fn normal_init<R: Rng>(rng: &mut R, std: f32) -> impl FnMut() -> f32 + '_ {
    let n = Normal::new(0.0f32, std).expect("std > 0");
    move || n.sample(rng)
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: Array2<f32>, // (out, in)
    pub b: Array1<f32>,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize, gain: f32) -> Self {
        let std = gain / (input as f32).sqrt();
        let mut f = normal_init(rng, std);
        let w = Array2::from_shape_simple_fn((output, input), &mut f);
        let b = Array1::from_shape_simple_fn(output, || f() * 0.1);
        Self { w, b }
    }

    /// `(n, in) -> (n, out)`
    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    /// Applies the projection to the last axis of a 3-D token array.
    pub fn forward3(&self, x: &Array3<f32>) -> Array3<f32> {
        let (g, n, c) = x.dim();
        let flat = x
            .to_shape((g * n, c))
            .expect("contiguous tokens")
            .to_owned();
        let y = self.forward(&flat);
        y.into_shape_with_order((g, n, self.w.nrows()))
            .expect("same element count")
    }
}

impl Params for Linear {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f32>)>) {
        out.push((format!("{prefix}.weight"), self.w.view().into_dyn()));
        out.push((format!("{prefix}.bias"), self.b.view().into_dyn()));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f32>)>) {
        out.push((format!("{prefix}.weight"), self.w.view_mut().into_dyn()));
        out.push((format!("{prefix}.bias"), self.b.view_mut().into_dyn()));
    }
}

/// 3x3 same-padded convolution applied frame by frame.
#[derive(Debug, Clone)]
pub(crate) struct Conv3x3 {
    pub w: Array4<f32>, // (out, in, 3, 3)
    pub b: Array1<f32>,
}

impl Conv3x3 {
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize, gain: f32) -> Self {
        let std = gain / ((input * 9) as f32).sqrt();
        let mut f = normal_init(rng, std);
        let w = Array4::from_shape_simple_fn((output, input, 3, 3), &mut f);
        let b = Array1::from_shape_simple_fn(output, || f() * 0.1);
        Self { w, b }
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (frames, cin, h, w) = x.dim();
        let cout = self.w.len_of(Axis(0));
        assert_eq!(cin, self.w.len_of(Axis(1)), "conv input channels");
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let ws = self.w.as_slice().expect("standard layout");
        let plane = h * w;
        let mut out = vec![0.0f32; frames * cout * plane];
        out.par_chunks_mut(cout * plane)
            .enumerate()
            .for_each(|(f, of)| {
                let xf = &xs[f * cin * plane..(f + 1) * cin * plane];
                for oc in 0..cout {
                    let op = &mut of[oc * plane..(oc + 1) * plane];
                    op.fill(self.b[oc]);
                    for ic in 0..cin {
                        let ip = &xf[ic * plane..(ic + 1) * plane];
                        let wk = &ws[(oc * cin + ic) * 9..(oc * cin + ic + 1) * 9];
                        for ky in 0..3 {
                            let dy = ky as isize - 1;
                            let y0 = (-dy).max(0) as usize;
                            let y1 = (h as isize - dy).min(h as isize) as usize;
                            for kx in 0..3 {
                                let dx = kx as isize - 1;
                                let wv = wk[ky * 3 + kx];
                                let x0 = (-dx).max(0) as usize;
                                let x1 = (w as isize - dx).min(w as isize) as usize;
                                for y in y0..y1 {
                                    let sy = (y as isize + dy) as usize;
                                    let orow = &mut op[y * w + x0..y * w + x1];
                                    let srow = &ip[sy * w + (x0 as isize + dx) as usize
                                        ..sy * w + (x1 as isize + dx) as usize];
                                    for (o, s) in orow.iter_mut().zip(srow) {
                                        *o += wv * s;
                                    }
                                }
                            }
                        }
                    }
                }
            });
        Array4::from_shape_vec((frames, cout, h, w), out).expect("conv output shape")
    }
}

impl Params for Conv3x3 {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f32>)>) {
        out.push((format!("{prefix}.weight"), self.w.view().into_dyn()));
        out.push((format!("{prefix}.bias"), self.b.view().into_dyn()));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f32>)>) {
        out.push((format!("{prefix}.weight"), self.w.view_mut().into_dyn()));
        out.push((format!("{prefix}.bias"), self.b.view_mut().into_dyn()));
    }
}

pub(crate) fn silu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f32, D>) {
    x.mapv_inplace(|v| v / (1.0 + (-v).exp()));
}

/// Affine-free layer norm over the last axis.
pub(crate) fn layer_norm(x: &Array3<f32>) -> Array3<f32> {
    let mut y = x.clone();
    for mut row in y.lanes_mut(Axis(2)) {
        let n = row.len() as f32;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    y
}

pub(crate) fn avg_pool2(x: &Array4<f32>) -> Array4<f32> {
    let (f, c, h, w) = x.dim();
    Array4::from_shape_fn((f, c, h / 2, w / 2), |(fi, ci, y, xx)| {
        let p = x.slice(s![fi, ci, 2 * y..2 * y + 2, 2 * xx..2 * xx + 2]);
        p.sum() * 0.25
    })
}

pub(crate) fn upsample2(x: &Array4<f32>) -> Array4<f32> {
    let (f, c, h, w) = x.dim();
    Array4::from_shape_fn((f, c, h * 2, w * 2), |(fi, ci, y, xx)| x[[fi, ci, y / 2, xx / 2]])
}

pub(crate) fn concat_channels(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching spatial dims")
}

/// Sinusoidal embedding of a diffusion timestep.
pub(crate) fn timestep_embedding(t: f32, dim: usize) -> Array1<f32> {
    let half = dim / 2;
    let mut e = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10000.0f32).ln() * i as f32 / half as f32).exp();
        e[i] = (t * freq).sin();
        e[half + i] = (t * freq).cos();
    }
    e
}

/// `(F, C, H, W) -> (F, H*W, C)`
pub(crate) fn to_spatial_tokens(x: &Array4<f32>) -> Array3<f32> {
    let (f, c, h, w) = x.dim();
    x.view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((f, h * w, c))
        .expect("token reshape")
}

pub(crate) fn from_spatial_tokens(t: &Array3<f32>, h: usize, w: usize) -> Array4<f32> {
    let (f, _, c) = t.dim();
    t.to_shape((f, h, w, c))
        .expect("token reshape")
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .into_owned()
}

/// `(F, C, H, W) -> (H*W, F, C)`
pub(crate) fn to_temporal_tokens(x: &Array4<f32>) -> Array3<f32> {
    let (f, c, h, w) = x.dim();
    x.view()
        .permuted_axes([2, 3, 0, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((h * w, f, c))
        .expect("token reshape")
}

pub(crate) fn from_temporal_tokens(t: &Array3<f32>, h: usize, w: usize) -> Array4<f32> {
    let (_, f, c) = t.dim();
    t.to_shape((h, w, f, c))
        .expect("token reshape")
        .permuted_axes([2, 3, 0, 1])
        .as_standard_layout()
        .into_owned()
}

/// `(G, n, heads * hd) -> (G * heads, n, hd)`
pub(crate) fn split_heads(x: &Array3<f32>, heads: usize) -> Array3<f32> {
    let (g, n, inner) = x.dim();
    let hd = inner / heads;
    x.to_shape((g, n, heads, hd))
        .expect("head split")
        .permuted_axes([0, 2, 1, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((g * heads, n, hd))
        .expect("head split")
}

/// Inverse of [`split_heads`].
pub(crate) fn merge_heads(x: &Array3<f32>, heads: usize) -> Array3<f32> {
    let (gh, n, hd) = x.dim();
    let g = gh / heads;
    x.to_shape((g, heads, n, hd))
        .expect("head merge")
        .permuted_axes([0, 2, 1, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((g, n, heads * hd))
        .expect("head merge")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn token_layouts_round_trip() {
        let x = Array4::from_shape_fn((3, 2, 4, 5), |(a, b, c, d)| (a * 1000 + b * 100 + c * 10 + d) as f32);
        let s = to_spatial_tokens(&x);
        assert_eq!(s[[1, 2 * 5 + 3, 1]], x[[1, 1, 2, 3]]);
        assert_eq!(from_spatial_tokens(&s, 4, 5), x);
        let t = to_temporal_tokens(&x);
        assert_eq!(t[[2 * 5 + 3, 1, 1]], x[[1, 1, 2, 3]]);
        assert_eq!(from_temporal_tokens(&t, 4, 5), x);
    }

    #[test]
    fn heads_round_trip() {
        let x = Array3::from_shape_fn((2, 3, 8), |(a, b, c)| (a * 100 + b * 10 + c) as f32);
        let s = split_heads(&x, 2);
        assert_eq!(s.dim(), (4, 3, 4));
        assert_eq!(s[[3, 2, 1]], x[[1, 2, 5]]);
        assert_eq!(merge_heads(&s, 2), x);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let conv = Conv3x3::new(&mut rng, 2, 3, 1.0);
        let x = Array4::from_shape_fn((2, 2, 5, 4), |(a, b, c, d)| ((a + 2 * b + 3 * c + 5 * d) % 7) as f32 - 3.0);
        let y = conv.forward(&x);
        for (f, o, yy, xx) in [(0, 0, 0, 0), (1, 2, 4, 3), (0, 1, 2, 1)] {
            let mut acc = conv.b[o];
            for i in 0..2 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = yy as isize + ky as isize - 1;
                        let sx = xx as isize + kx as isize - 1;
                        if (0..5).contains(&sy) && (0..4).contains(&sx) {
                            acc += conv.w[[o, i, ky, kx]] * x[[f, i, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            assert!((acc - y[[f, o, yy, xx]]).abs() < 1e-5);
        }
    }
}
