//! Orthonormal type-II DCT and the pseudoinput transform built on it.
//!
//! A pseudoinput is the top-left `d x d` block of the per-channel 2-D DCT of
//! an image, divided elementwise by a normalization matrix `S` holding the
//! largest absolute value each kept frequency reaches over the training set.
//! The lift back to image space multiplies by `S`, zero-pads the dropped
//! frequencies and applies the inverse DCT. Both directions are computed as
//! `A * X * B` products with slices of the basis, which makes the crop and
//! the zero-padding implicit.

use std::rc::Rc;

use crate::error::{DvpError, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Lower bound applied to the learnable pseudoinput log standard deviation.
pub const LOG_SIGMA_MIN: f64 = -10.0;

/// Entries of `S` below this are treated as absent frequencies and set to 1.
pub const NORM_FLOOR: f64 = 1e-8;

/// `D x D` orthonormal DCT-II matrix: `C[k][n] = a_k cos(pi/D (n + 1/2) k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DctBasis {
    side: usize,
    c: Vec<f64>,
}

impl DctBasis {
    pub fn new(side: usize) -> Result<Self> {
        if side == 0 {
            return Err(DvpError::dim("dct basis", "side must be positive"));
        }
        let d = side as f64;
        let mut c = vec![0.0; side * side];
        for k in 0..side {
            let scale = if k == 0 { (1.0 / d).sqrt() } else { (2.0 / d).sqrt() };
            for n in 0..side {
                c[k * side + n] =
                    scale * (std::f64::consts::PI / d * (n as f64 + 0.5) * k as f64).cos();
            }
        }
        Ok(Self { side, c })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Row-major coefficient matrix.
    pub fn matrix(&self) -> &[f64] {
        &self.c
    }

    pub fn at(&self, k: usize, n: usize) -> f64 {
        self.c[k * self.side + n]
    }

    /// First `rows` rows of `C` as a `[rows, D]` tensor.
    fn rows<T: Real>(&self, rows: usize) -> Tensor<T> {
        let data = self.c[..rows * self.side].iter().map(|&v| T::from_f64(v)).collect();
        Tensor::from_parts(vec![rows, self.side], data)
    }

    /// Transpose of the first `rows` rows: `[D, rows]`.
    fn rows_t<T: Real>(&self, rows: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(rows * self.side);
        for n in 0..self.side {
            for k in 0..rows {
                data.push(T::from_f64(self.at(k, n)));
            }
        }
        Tensor::from_parts(vec![self.side, rows], data)
    }
}

fn square_planes<T>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize)>
where
    T: Real,
{
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
        return Err(DvpError::dim(op, format!("expected square trailing axes, got {s:?}")));
    }
    let side = s[s.len() - 1];
    Ok((x.len() / (side * side).max(1), side))
}

fn apply_planes<T: Real>(x: &Tensor<T>, left: &Tensor<T>, right: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (oh, ow) = (left.shape()[0], right.shape()[1]);
    let planes = x.len() / (h * w).max(1);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    // Reuses the differentiable kernel; nothing is recorded that needs a gradient.
    let out = g
        .sandwich(xv, Rc::new(left.clone()), Rc::new(right.clone()))
        .expect("shapes checked by caller");
    let mut shape = s.to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    debug_assert_eq!(g.value(out).len(), planes * oh * ow);
    Tensor::from_parts(shape, g.value(out).data().to_vec())
}

/// Per-plane `C * x * Cᵀ` over the two trailing (square) axes.
pub fn dct2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, side) = square_planes("dct2", x)?;
    let basis = DctBasis::new(side)?;
    Ok(apply_planes(x, &basis.rows(side), &basis.rows_t(side)))
}

/// Per-plane `Cᵀ * y * C`, the inverse of [`dct2`].
pub fn idct2<T: Real>(y: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, side) = square_planes("idct2", y)?;
    let basis = DctBasis::new(side)?;
    Ok(apply_planes(y, &basis.rows_t(side), &basis.rows(side)))
}

/// Per-frequency normalization of cropped DCT coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct NormMatrix {
    /// `[c, d, d]`, strictly positive.
    pub s: Tensor<f64>,
    /// Fingerprint of the dataset `s` was computed from.
    pub digest: String,
}

impl NormMatrix {
    pub fn new(s: Tensor<f64>, digest: impl Into<String>) -> Result<Self> {
        if s.shape().len() != 3 || s.shape()[1] != s.shape()[2] {
            return Err(DvpError::dim("norm matrix", format!("expected [c, d, d], got {:?}", s.shape())));
        }
        if s.data().iter().any(|&v| v.is_nan() || v <= 0.0) {
            return Err(DvpError::usage("normalization matrix must be strictly positive"));
        }
        Ok(Self {
            s,
            digest: digest.into(),
        })
    }

    pub fn with_digest(mut self, digest: impl Into<String>) -> Self {
        self.digest = digest.into();
        self
    }

    pub fn channels(&self) -> usize {
        self.s.shape()[0]
    }

    pub fn crop(&self) -> usize {
        self.s.shape()[1]
    }
}

/// Largest absolute cropped DCT coefficient per `(channel, k, n)` over a
/// dataset of `[c, D, D]` images; entries below [`NORM_FLOOR`] become 1.
pub fn compute_norm_matrix<T, I>(images: I, d: usize) -> Result<NormMatrix>
where
    T: Real,
    I: IntoIterator<Item = Tensor<T>>,
{
    let mut maxima: Option<(Vec<f64>, usize, DctBasis)> = None;
    for img in images {
        let s = img.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(DvpError::dim("compute_norm_matrix", format!("image shape {s:?}")));
        }
        let (c, side) = (s[0], s[1]);
        if d == 0 || d > side {
            return Err(DvpError::usage(format!("crop {d} outside 1..={side}")));
        }
        let (acc, channels, basis) = match &mut maxima {
            Some(m) => m,
            slot => slot.insert((vec![0.0; c * d * d], c, DctBasis::new(side)?)),
        };
        if *channels != c || basis.side() != side {
            return Err(DvpError::dim("compute_norm_matrix", "images differ in shape"));
        }
        let u = apply_planes(&img.cast::<f64>(), &basis.rows(d), &basis.rows_t(d));
        for (m, v) in acc.iter_mut().zip(u.data()) {
            *m = m.max(v.abs());
        }
    }
    let (acc, c, _) = maxima.ok_or_else(|| DvpError::usage("empty dataset for normalization matrix"))?;
    let s = acc
        .into_iter()
        .map(|v| if v < NORM_FLOOR { 1.0 } else { v })
        .collect();
    NormMatrix::new(Tensor::from_parts(vec![c, d, d], s), "")
}

/// Normalization matrix of a whole dataset, tagged with its digest.
pub fn norm_matrix_for(data: &crate::data::Dataset, d: usize) -> Result<NormMatrix> {
    let norm = compute_norm_matrix((0..data.len()).map(|i| data.image::<f64>(i)), d)?;
    Ok(norm.with_digest(data.digest()))
}

/// Pseudoinput transform for images of side `D` with crop `d`.
#[derive(Clone, Debug)]
pub struct PseudoinputTransform<T> {
    side: usize,
    norm: NormMatrix,
    s: Tensor<T>,
    analysis_left: Rc<Tensor<T>>,
    analysis_right: Rc<Tensor<T>>,
    synthesis_left: Rc<Tensor<T>>,
    synthesis_right: Rc<Tensor<T>>,
}

impl<T: Real> PseudoinputTransform<T> {
    pub fn new(norm: NormMatrix, side: usize) -> Result<Self> {
        let d = norm.crop();
        if d > side {
            return Err(DvpError::usage(format!("crop {d} exceeds image side {side}")));
        }
        let basis = DctBasis::new(side)?;
        Ok(Self {
            side,
            s: norm.s.cast(),
            analysis_left: Rc::new(basis.rows(d)),
            analysis_right: Rc::new(basis.rows_t(d)),
            synthesis_left: Rc::new(basis.rows_t(d)),
            synthesis_right: Rc::new(basis.rows(d)),
            norm,
        })
    }

    pub fn norm(&self) -> &NormMatrix {
        &self.norm
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn crop(&self) -> usize {
        self.norm.crop()
    }

    pub fn channels(&self) -> usize {
        self.norm.channels()
    }

    /// Dimensionality of one pseudoinput, `c * d * d`.
    pub fn dim(&self) -> usize {
        self.s.len()
    }

    fn check_images(&self, op: &'static str, x: &Tensor<T>, side: usize) -> Result<usize> {
        let (c, s) = (self.channels(), x.shape());
        match *s {
            [n, xc, h, w] if xc == c && h == side && w == side => Ok(n),
            _ => Err(DvpError::dim(
                op,
                format!("expected [n, {c}, {side}, {side}], got {s:?}"),
            )),
        }
    }

    fn s_batch(&self, n: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(n * self.s.len());
        for _ in 0..n {
            data.extend_from_slice(self.s.data());
        }
        let d = self.crop();
        Tensor::from_parts(vec![n, self.channels(), d, d], data)
    }

    /// Crop-and-normalize: `[n, c, D, D] -> [n, c, d, d]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_images("f_dct", x, self.side)?;
        let u = apply_planes(x, &self.analysis_left, &self.analysis_right);
        let s = self.s_batch(n);
        let data = u.data().iter().zip(s.data()).map(|(&a, &b)| a / b).collect();
        Ok(Tensor::from_parts(u.shape().to_vec(), data))
    }

    /// Lift `[n, c, d, d] -> [n, c, D, D]`.
    pub fn inverse(&self, u: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_images("f_dct_dagger", u, self.crop())?;
        let s = self.s_batch(n);
        let data = u.data().iter().zip(s.data()).map(|(&a, &b)| a * b).collect();
        let scaled = Tensor::from_parts(u.shape().to_vec(), data);
        Ok(apply_planes(&scaled, &self.synthesis_left, &self.synthesis_right))
    }

    /// Differentiable lift of a pseudoinput node.
    pub fn lift(&self, g: &mut Graph<T>, u: Var) -> Result<Var> {
        let n = self.check_images("lift", g.value(u), self.crop())?;
        let s = g.constant(self.s_batch(n));
        let scaled = g.mul(u, s)?;
        g.sandwich(scaled, self.synthesis_left.clone(), self.synthesis_right.clone())
    }
}

/// Algorithm-style free function: DCT, crop to `d`, divide by `S`.
pub fn f_dct<T: Real>(x: &Tensor<T>, norm: &NormMatrix) -> Result<Tensor<T>> {
    let side = *x.shape().last().ok_or_else(|| DvpError::dim("f_dct", "scalar input"))?;
    let single = x.shape().len() == 3;
    let x4 = if single {
        let mut s = vec![1];
        s.extend_from_slice(x.shape());
        x.clone().reshape(&s)?
    } else {
        x.clone()
    };
    let u = PseudoinputTransform::new(norm.clone(), side)?.forward(&x4)?;
    if single {
        let s = u.shape()[1..].to_vec();
        u.reshape(&s)
    } else {
        Ok(u)
    }
}

/// Multiply by `S`, zero-pad to `side`, inverse DCT.
pub fn f_dct_dagger<T: Real>(u: &Tensor<T>, norm: &NormMatrix, side: usize) -> Result<Tensor<T>> {
    let single = u.shape().len() == 3;
    let u4 = if single {
        let mut s = vec![1];
        s.extend_from_slice(u.shape());
        u.clone().reshape(&s)?
    } else {
        u.clone()
    };
    let x = PseudoinputTransform::new(norm.clone(), side)?.inverse(&u4)?;
    if single {
        let s = x.shape()[1..].to_vec();
        x.reshape(&s)
    } else {
        Ok(x)
    }
}

/// A pseudoinput draw `u ~ N(f_dct(x), sigma^2 I)` and its image-space lift.
#[derive(Clone, Copy, Debug)]
pub struct PseudoinputPair {
    /// `[n, c, d, d]`.
    pub u: Var,
    /// `[n, c, D, D]`.
    pub u_x: Var,
    /// Clamped log standard deviation (one element).
    pub log_sigma: Var,
}

/// Reparameterized pseudoinput sample; gradients reach `log_sigma`.
pub fn sample_pseudoinput<T: Real>(
    g: &mut Graph<T>,
    transform: &PseudoinputTransform<T>,
    x: &Tensor<T>,
    log_sigma: Var,
    rng: &mut Rng,
) -> Result<PseudoinputPair> {
    if !g.value(log_sigma).item().is_finite() {
        return Err(DvpError::usage("log sigma is not finite"));
    }
    let mean = g.constant(transform.forward(x)?);
    let log_sigma = g.clamp(log_sigma, LOG_SIGMA_MIN, f64::INFINITY);
    let sigma = g.exp(log_sigma);
    let eps = g.constant(rng.normal_tensor(g.shape(mean)));
    let noise = g.mul_scalar(eps, sigma)?;
    let u = g.add(mean, noise)?;
    let u_x = transform.lift(g, u)?;
    Ok(PseudoinputPair { u, u_x, log_sigma })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn dct2_of_ones_keeps_only_dc() {
        let y = dct2(&t(&[2, 2], &[1.0; 4])).unwrap();
        let want = [2.0, 0.0, 0.0, 0.0];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let back = idct2(&y).unwrap();
        for v in back.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_dimensional_pair() {
        let b = DctBasis::new(2).unwrap();
        let (a, c) = (0.3, -1.7);
        let y0 = b.at(0, 0) * a + b.at(0, 1) * c;
        let y1 = b.at(1, 0) * a + b.at(1, 1) * c;
        let r2 = std::f64::consts::SQRT_2;
        assert!((y0 - (a + c) / r2).abs() < 1e-12);
        assert!((y1 - (a - c) / r2).abs() < 1e-12);
    }

    #[test]
    fn non_square_is_dimension_error() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(dct2(&x), Err(DvpError::Dimension { .. })));
        assert!(matches!(idct2(&x), Err(DvpError::Dimension { .. })));
    }

    #[test]
    fn zero_maps_to_zero() {
        let y = idct2(&Tensor::<f64>::zeros(&[4, 4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn norm_matrix_replaces_zero_maxima() {
        let s = compute_norm_matrix([t(&[1, 2, 2], &[1.0; 4])], 2).unwrap();
        for (a, b) in s.s.data().iter().zip([2.0, 1.0, 1.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_matrix_is_sign_symmetric() {
        let x = t(&[1, 3, 3], &[0.1, -0.4, 0.9, 0.3, 0.0, -0.2, 0.7, 0.5, -0.8]);
        let neg = x.map(|v| -v);
        let a = compute_norm_matrix([x.clone()], 2).unwrap();
        let b = compute_norm_matrix([x, neg], 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_is_usage_error() {
        let r = compute_norm_matrix(Vec::<Tensor<f64>>::new(), 2);
        assert!(matches!(r, Err(DvpError::Usage(_))));
    }

    #[test]
    fn crop_larger_than_side_is_rejected() {
        let norm = NormMatrix::new(Tensor::full(&[1, 3, 3], 1.0), "").unwrap();
        let x = Tensor::<f64>::zeros(&[1, 2, 2]);
        assert!(matches!(f_dct(&x, &norm), Err(DvpError::Usage(_))));
        assert!(matches!(f_dct_dagger(&Tensor::<f64>::zeros(&[1, 3, 3]), &norm, 2), Err(DvpError::Usage(_))));
    }

    #[test]
    fn crop_one_of_ones() {
        let norm = NormMatrix::new(t(&[1, 1, 1], &[2.0]), "").unwrap();
        let u = f_dct(&t(&[1, 2, 2], &[1.0; 4]), &norm).unwrap();
        assert_eq!(u.shape(), &[1, 1, 1]);
        assert!((u.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_pseudoinput_is_deterministic() {
        let norm = NormMatrix::new(Tensor::full(&[1, 2, 2], 1.5), "").unwrap();
        let tr = PseudoinputTransform::<f64>::new(norm, 4).unwrap();
        let x = Tensor::from_f64(&[1, 1, 4, 4], &(0..16).map(|i| i as f64 / 16.0).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let ls = g.leaf(Tensor::scalar(-200.0));
        let pair = sample_pseudoinput(&mut g, &tr, &x, ls, &mut Rng::new(3)).unwrap();
        // log sigma is clamped at -10, so the noise is at most ~1e-4 per entry.
        let want = tr.forward(&x).unwrap();
        for (a, b) in g.value(pair.u).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-3);
        }
        assert_eq!(g.scalar(pair.log_sigma), LOG_SIGMA_MIN);
    }
}
