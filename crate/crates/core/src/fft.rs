//! Discrete Fourier transforms of arbitrary length.
//!
//! Power-of-two lengths run an iterative radix-2 Cooley-Tukey kernel; every
//! other length goes through Bluestein's chirp-z reformulation, which turns
//! the DFT into a circular convolution evaluated with a power-of-two FFT.
//! The 2D transforms act on the (H, W) axes of every (n, c) slice.
//!
//! Convention: the forward transform is unnormalized and the inverse carries
//! the full `1 / (H * W)` factor, so `ifft2d(fft2d(a) * fft2d(b))` is the plain
//! circular convolution of `a` and `b`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, Tensor};

/// A spectrum produced by [`fft2d`]; its shape records the spatial grid.
pub type SpectrumTensor = ComplexTensor;

#[derive(Debug)]
struct Radix2 {
    n: usize,
    /// `exp(-2 pi i k / n)` for `k < n / 2`.
    tw_re: Vec<f64>,
    tw_im: Vec<f64>,
    bitrev: Vec<usize>,
}

impl Radix2 {
    fn new(n: usize) -> Self {
        debug_assert!(n.is_power_of_two());
        let half = n / 2;
        let (tw_re, tw_im) = (0..half)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .unzip();
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        Radix2 {
            n,
            tw_re,
            tw_im,
            bitrev,
        }
    }

    fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let j = self.bitrev[i];
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let (wr, wi) = (self.tw_re[k * step], self.tw_im[k * step]);
                    let a = start + k;
                    let b = a + half;
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }
}

#[derive(Debug)]
struct Bluestein {
    n: usize,
    inner: Radix2,
    /// `exp(-i pi k^2 / n)`.
    chirp_re: Vec<f64>,
    chirp_im: Vec<f64>,
    /// Spectrum of the conjugate chirp filter, length `inner.n`.
    filter_re: Vec<f64>,
    filter_im: Vec<f64>,
}

impl Bluestein {
    fn new(n: usize) -> Self {
        let m = (2 * n - 1).next_power_of_two();
        let inner = Radix2::new(m);
        let (chirp_re, chirp_im): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|k| {
                // k^2 mod 2n keeps the angle small and exact.
                let q = (k as u128 * k as u128 % (2 * n as u128)) as f64;
                let a = -PI * q / n as f64;
                (a.cos(), a.sin())
            })
            .unzip();
        let mut filter_re = vec![0.0; m];
        let mut filter_im = vec![0.0; m];
        for k in 0..n {
            filter_re[k] = chirp_re[k];
            filter_im[k] = -chirp_im[k];
            if k > 0 {
                filter_re[m - k] = chirp_re[k];
                filter_im[m - k] = -chirp_im[k];
            }
        }
        inner.forward(&mut filter_re, &mut filter_im);
        Bluestein {
            n,
            inner,
            chirp_re,
            chirp_im,
            filter_re,
            filter_im,
        }
    }

    fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        let m = self.inner.n;
        let mut ar = vec![0.0; m];
        let mut ai = vec![0.0; m];
        for k in 0..self.n {
            let (cr, ci) = (self.chirp_re[k], self.chirp_im[k]);
            ar[k] = re[k] * cr - im[k] * ci;
            ai[k] = re[k] * ci + im[k] * cr;
        }
        self.inner.forward(&mut ar, &mut ai);
        for k in 0..m {
            let (xr, xi) = (ar[k], ai[k]);
            let (fr, fi) = (self.filter_re[k], self.filter_im[k]);
            ar[k] = xr * fr - xi * fi;
            ai[k] = xr * fi + xi * fr;
        }
        // Inverse of length m via conjugation.
        for v in ai.iter_mut() {
            *v = -*v;
        }
        self.inner.forward(&mut ar, &mut ai);
        let scale = 1.0 / m as f64;
        for k in 0..self.n {
            let (xr, xi) = (ar[k] * scale, -ai[k] * scale);
            let (cr, ci) = (self.chirp_re[k], self.chirp_im[k]);
            re[k] = xr * cr - xi * ci;
            im[k] = xr * ci + xi * cr;
        }
    }
}

#[derive(Debug)]
enum Kernel {
    Identity,
    Radix2(Radix2),
    Bluestein(Bluestein),
}

/// A precomputed transform for one length.
#[derive(Debug)]
pub struct FftPlan {
    len: usize,
    kernel: Kernel,
}

impl FftPlan {
    /// Radix-2 for powers of two, Bluestein otherwise.
    pub fn new(len: usize) -> Self {
        assert!(len > 0, "zero-length FFT");
        let kernel = if len == 1 {
            Kernel::Identity
        } else if len.is_power_of_two() {
            Kernel::Radix2(Radix2::new(len))
        } else {
            Kernel::Bluestein(Bluestein::new(len))
        };
        FftPlan { len, kernel }
    }

    /// Forces the chirp-z path regardless of length.
    pub fn bluestein(len: usize) -> Self {
        assert!(len > 0, "zero-length FFT");
        FftPlan {
            len,
            kernel: Kernel::Bluestein(Bluestein::new(len)),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn uses_bluestein(&self) -> bool {
        matches!(self.kernel, Kernel::Bluestein(_))
    }

    /// In-place unnormalized forward DFT.
    pub fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        assert_eq!(re.len(), self.len);
        assert_eq!(im.len(), self.len);
        match &self.kernel {
            Kernel::Identity => {}
            Kernel::Radix2(k) => k.forward(re, im),
            Kernel::Bluestein(k) => k.forward(re, im),
        }
    }

    /// In-place unnormalized inverse DFT (no `1/n`).
    pub fn inverse_unscaled(&self, re: &mut [f64], im: &mut [f64]) {
        for v in im.iter_mut() {
            *v = -*v;
        }
        self.forward(re, im);
        for v in im.iter_mut() {
            *v = -*v;
        }
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<FftPlan>>> = RefCell::new(HashMap::new());
}

fn plan(len: usize) -> Rc<FftPlan> {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry(len)
            .or_insert_with(|| Rc::new(FftPlan::new(len)))
            .clone()
    })
}

static IFFT_SCALE_FAULT: AtomicBool = AtomicBool::new(false);

/// Mutation hook for the verification harness: while set, inverse
/// transforms scale by `n` instead of `1 / n`.
#[doc(hidden)]
pub fn set_ifft_scale_fault(on: bool) {
    IFFT_SCALE_FAULT.store(on, Ordering::Relaxed);
}

fn inverse_scale(n: usize) -> f64 {
    if IFFT_SCALE_FAULT.load(Ordering::Relaxed) {
        n as f64
    } else {
        1.0 / n as f64
    }
}

/// 1D forward DFT of a complex sequence.
pub fn fft(re: &[f64], im: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (mut r, mut i) = (re.to_vec(), im.to_vec());
    plan(re.len()).forward(&mut r, &mut i);
    (r, i)
}

/// 1D inverse DFT, scaled by `1 / n`.
pub fn ifft(re: &[f64], im: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (mut r, mut i) = (re.to_vec(), im.to_vec());
    plan(re.len()).inverse_unscaled(&mut r, &mut i);
    let s = inverse_scale(re.len());
    r.iter_mut().chain(i.iter_mut()).for_each(|v| *v *= s);
    (r, i)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    /// Conjugate transform without the `1/(H*W)` factor.
    InverseUnscaled,
}

/// 2D transform over (H, W) of every (n, c) slice, all unnormalized.
pub fn transform2d(re: &Tensor, im: &Tensor, dir: Direction) -> Result<ComplexTensor> {
    let shape = re.shape();
    if im.shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "fft2d",
            lhs: shape,
            rhs: im.shape(),
        });
    }
    let [n, c, h, w] = shape.dims();
    let mut out_re = re.clone();
    let mut out_im = im.clone();
    let row_plan = plan(w);
    let col_plan = plan(h);
    let run = |p: &FftPlan, r: &mut [f64], i: &mut [f64]| match dir {
        Direction::Forward => p.forward(r, i),
        Direction::InverseUnscaled => p.inverse_unscaled(r, i),
    };
    let hw = h * w;
    let mut col_re = vec![0.0; h];
    let mut col_im = vec![0.0; h];
    for s in 0..n * c {
        let sr = &mut out_re.data_mut()[s * hw..(s + 1) * hw];
        let si = &mut out_im.data_mut()[s * hw..(s + 1) * hw];
        // H axis first: columns.
        for x in 0..w {
            for y in 0..h {
                col_re[y] = sr[y * w + x];
                col_im[y] = si[y * w + x];
            }
            run(&col_plan, &mut col_re, &mut col_im);
            for y in 0..h {
                sr[y * w + x] = col_re[y];
                si[y * w + x] = col_im[y];
            }
        }
        for y in 0..h {
            run(&row_plan, &mut sr[y * w..(y + 1) * w], &mut si[y * w..(y + 1) * w]);
        }
    }
    ComplexTensor::new(out_re, out_im)
}

/// Unnormalized forward DFT of a real map.
pub fn fft2d(x: &Tensor) -> SpectrumTensor {
    let im = Tensor::zeros(x.shape());
    transform2d(x, &im, Direction::Forward).expect("shapes match by construction")
}

pub fn fft2d_complex(x: &ComplexTensor) -> Result<SpectrumTensor> {
    transform2d(&x.re, &x.im, Direction::Forward)
}

/// Inverse DFT scaled by `1 / (H * W)`.
pub fn ifft2d(s: &SpectrumTensor) -> Result<ComplexTensor> {
    let mut out = transform2d(&s.re, &s.im, Direction::InverseUnscaled)?;
    let scale = inverse_scale(s.shape().spatial());
    out.re.data_mut().iter_mut().for_each(|v| *v *= scale);
    out.im.data_mut().iter_mut().for_each(|v| *v *= scale);
    Ok(out)
}

/// Drops the imaginary part; with `imag_tol` set, fails if any `|im|` exceeds it.
pub fn take_real(c: &ComplexTensor, imag_tol: Option<f64>) -> Result<Tensor> {
    if let Some(tol) = imag_tol {
        let max_imag = c.max_abs_imag();
        if max_imag > tol || !max_imag.is_finite() {
            return Err(Error::ImaginaryResidue { max_imag, tol });
        }
    }
    Ok(c.re.clone())
}

/// Largest deviation from `X[u, v] = conj(X[-u, -v])`.
pub fn conjugate_symmetry_error(s: &SpectrumTensor) -> f64 {
    let [n, c, h, w] = s.shape().dims();
    let mut worst: f64 = 0.0;
    for b in 0..n {
        for ch in 0..c {
            for u in 0..h {
                for v in 0..w {
                    let (mu, mv) = ((h - u) % h, (w - v) % w);
                    let dr = s.re.at(b, ch, u, v) - s.re.at(b, ch, mu, mv);
                    let di = s.im.at(b, ch, u, v) + s.im.at(b, ch, mu, mv);
                    worst = worst.max(dr.abs()).max(di.abs());
                }
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut r)
    }

    #[test]
    fn constant_map_concentrates_in_dc() {
        let x = Tensor::full(Shape::new(1, 1, 5, 6), 0.7);
        let s = fft2d(&x);
        assert!((s.re.at(0, 0, 0, 0) - 0.7 * 30.0).abs() < 1e-10);
        let mut rest = 0.0f64;
        for u in 0..5 {
            for v in 0..6 {
                if (u, v) != (0, 0) {
                    rest = rest.max(s.re.at(0, 0, u, v).abs()).max(s.im.at(0, 0, u, v).abs());
                }
            }
        }
        assert!(rest < 1e-10);
    }

    #[test]
    fn impulse_gives_flat_spectrum() {
        let mut x = Tensor::zeros(Shape::new(1, 1, 7, 4));
        x.set(0, 0, 0, 0, 1.0);
        let s = fft2d(&x);
        assert!(s.re.map(|v| v - 1.0).max_abs() < 1e-12);
        assert!(s.im.max_abs() < 1e-12);
    }

    #[test]
    fn matches_naive_dft() {
        for (h, w) in [(20, 20), (7, 5), (16, 12), (1, 9)] {
            let x = random(Shape::new(1, 2, h, w), (h * w) as u64);
            let fast = fft2d(&x);
            let slow = oracle::naive_dft2d(&ComplexTensor::from_real(x));
            assert!(fast.re.max_abs_diff(&slow.re).unwrap() < 1e-9, "{h}x{w}");
            assert!(fast.im.max_abs_diff(&slow.im).unwrap() < 1e-9, "{h}x{w}");
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        for size in [8, 20, 40, 80] {
            let x = random(Shape::new(1, 1, size, size), size as u64);
            let s = fft2d(&x);
            let back = ifft2d(&s).unwrap();
            assert!(back.re.max_abs_diff(&x).unwrap() < 1e-9);
            assert!(back.im.max_abs() < 1e-9);
            let energy: f64 = x.data().iter().map(|v| v * v).sum();
            let spec: f64 = s.re.data().iter().zip(s.im.data()).map(|(a, b)| a * a + b * b).sum();
            let rel = (energy - spec / (size * size) as f64).abs() / energy;
            assert!(rel < 1e-9);
        }
    }

    #[test]
    fn eighty_uses_chirp_z() {
        assert!(FftPlan::new(80).uses_bluestein());
        assert!(!FftPlan::new(64).uses_bluestein());
    }

    #[test]
    fn bluestein_agrees_with_radix2() {
        for n in [2, 4, 16, 64] {
            let mut r = ChaCha8Rng::seed_from_u64(n as u64);
            let re: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
            let im: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
            let (mut ar, mut ai) = (re.clone(), im.clone());
            let (mut br, mut bi) = (re, im);
            FftPlan::new(n).forward(&mut ar, &mut ai);
            FftPlan::bluestein(n).forward(&mut br, &mut bi);
            for k in 0..n {
                assert!((ar[k] - br[k]).abs() < 1e-10);
                assert!((ai[k] - bi[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn convolution_theorem() {
        for (i, (h, w)) in [(4, 4), (7, 5), (16, 16), (20, 20)].into_iter().enumerate() {
            let a = random(Shape::new(1, 1, h, w), 100 + i as u64);
            let b = random(Shape::new(1, 1, h, w), 200 + i as u64);
            let prod = fft2d(&a).mul(&fft2d(&b), false).unwrap();
            let conv = take_real(&ifft2d(&prod).unwrap(), None).unwrap();
            let want = oracle::circular_conv2d(&a, &b).unwrap();
            assert!(conv.max_abs_diff(&want).unwrap() < 1e-8);
        }
    }

    #[test]
    fn real_input_spectra_are_conjugate_symmetric() {
        let x = random(Shape::new(2, 3, 6, 9), 3);
        assert!(conjugate_symmetry_error(&fft2d(&x)) < 1e-10);
    }

    #[test]
    fn product_of_real_spectra_inverts_to_real() {
        let a = random(Shape::new(1, 2, 10, 10), 4);
        let b = random(Shape::new(1, 2, 10, 10), 5);
        let prod = fft2d(&a).mul(&fft2d(&b), false).unwrap();
        let back = ifft2d(&prod).unwrap();
        assert!(take_real(&back, Some(1e-6)).is_ok());
    }

    #[test]
    fn take_real_reports_residue() {
        let re = Tensor::ones(Shape::new(1, 1, 2, 2));
        let im = Tensor::full(Shape::new(1, 1, 2, 2), 0.5);
        let c = ComplexTensor::new(re.clone(), im).unwrap();
        match take_real(&c, Some(1e-6)) {
            Err(Error::ImaginaryResidue { max_imag, .. }) => assert_eq!(max_imag, 0.5),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(take_real(&c, None).unwrap(), re);
        assert_eq!(take_real(&ComplexTensor::from_real(re.clone()), Some(0.0)).unwrap(), re);
    }

    #[test]
    fn linearity() {
        let a = random(Shape::new(1, 1, 12, 9), 8);
        let b = random(Shape::new(1, 1, 12, 9), 9);
        let (alpha, beta) = (0.37, -1.9);
        let mixed = a.scale(alpha).add(&b.scale(beta)).unwrap();
        let lhs = fft2d(&mixed);
        let (fa, fb) = (fft2d(&a), fft2d(&b));
        let rhs_re = fa.re.scale(alpha).add(&fb.re.scale(beta)).unwrap();
        let rhs_im = fa.im.scale(alpha).add(&fb.im.scale(beta)).unwrap();
        assert!(lhs.re.max_abs_diff(&rhs_re).unwrap() < 1e-10);
        assert!(lhs.im.max_abs_diff(&rhs_im).unwrap() < 1e-10);
    }

    #[test]
    fn one_dimensional_round_trip() {
        let re: Vec<f64> = (0..13).map(|i| (i as f64 * 0.3).sin()).collect();
        let im = vec![0.0; 13];
        let (fr, fi) = fft(&re, &im);
        let (br, bi) = ifft(&fr, &fi);
        for k in 0..13 {
            assert!((br[k] - re[k]).abs() < 1e-12);
            assert!(bi[k].abs() < 1e-12);
        }
    }
}
