//! The `fredft verify` suites.
//!
//! Every check measures one error against one tolerance. Checks are
//! independent and may run on a thread pool, but the report always lists
//! them in catalog order and prints no timings, so two runs of the same
//! build produce the same bytes.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use fredft::autodiff::{gradcheck, gradcheck_random, kink_free_points, project, ComplexVar, GradCheckConfig, GradReport, Tape, Var};
use fredft::conv::{conv2d_raw, deform_conv2d_raw, BatchNormStats, ConvSpec, NormMode};
use fredft::detection::{
    ciou_loss, detection_loss, detection_loss_with, DetachedTerms, varifocal_loss, BBox, HeadLayout, VarifocalParams,
};
use fredft::fft::{conjugate_symmetry_error, fft2d, fft2d_complex, ifft2d, FftPlan};
use fredft::fusion::{
    fdffl_routing, spectrum_product, Cgmm, Fdfam, Fdffl, FreDFTConfig, FreDft, FusionLayout, Lfem, Mfda, MlpFfl, Msda,
    VarPair, MFDA_IMAG_TOL,
};
use fredft::nn::{gradcheck_module, Ctx, ParamBuilder, ParamStore};
use fredft::oracle::{circular_conv2d, naive_conv2d, naive_deform_conv2d, naive_dft2d};
use fredft::tensor::{
    channel_shuffle, layer_norm, shuffle_source, softmax, ComplexTensor, PoolKind, SoftmaxAxis, LAYER_NORM_EPS,
};
use fredft::{Error, ModalityPair, Result, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Fft,
    Gradcheck,
    Oracle,
    Invariants,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["fft", "gradcheck", "oracle", "invariants", "all"];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Fft => "fft",
            Suite::Gradcheck => "gradcheck",
            Suite::Oracle => "oracle",
            Suite::Invariants => "invariants",
            Suite::All => "all",
        }
    }

    fn parts(self) -> Vec<Suite> {
        match self {
            Suite::All => vec![Suite::Fft, Suite::Oracle, Suite::Invariants, Suite::Gradcheck],
            s => vec![s],
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fft" => Ok(Suite::Fft),
            "gradcheck" => Ok(Suite::Gradcheck),
            "oracle" => Ok(Suite::Oracle),
            "invariants" => Ok(Suite::Invariants),
            "all" => Ok(Suite::All),
            _ => Err(Error::InvalidArgument(format!(
                "unknown suite {s:?}; expected one of {}",
                Suite::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bound {
    /// Pass when `measured <= tolerance`.
    AtMost,
    /// Pass when `measured >= tolerance`.
    AtLeast,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub bound: Bound,
    /// Set when the check could not be evaluated at all.
    pub error: Option<String>,
}

impl Check {
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            measured,
            tolerance,
            bound: Bound::AtMost,
            error: None,
        }
    }

    pub fn at_least(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Check {
            bound: Bound::AtLeast,
            ..Check::at_most(name, measured, tolerance)
        }
    }

    fn errored(name: &str, err: &Error) -> Self {
        Check {
            error: Some(err.to_string()),
            ..Check::at_most(name, f64::NAN, 0.0)
        }
    }

    pub fn passed(&self) -> bool {
        self.error.is_none()
            && match self.bound {
                Bound::AtMost => self.measured <= self.tolerance,
                Bound::AtLeast => self.measured >= self.tolerance,
            }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        if let Some(e) = &self.error {
            return write!(f, "{verdict} {} error: {e}", self.name);
        }
        let op = match self.bound {
            Bound::AtMost => "<=",
            Bound::AtLeast => ">=",
        };
        write!(f, "{verdict} {} measured={:.3e} {op} tol={:.3e}", self.name, self.measured, self.tolerance)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&c.to_string());
            s.push('\n');
        }
        let failed = self.failures().count();
        s.push_str(&format!(
            "suite {}: {} checks, {} passed, {failed} failed\n",
            self.suite.name(),
            self.checks.len(),
            self.checks.len() - failed
        ));
        s
    }
}

type Job = Box<dyn Fn() -> Result<Vec<Check>> + Send + Sync>;

struct Entry {
    name: String,
    job: Job,
}

fn entry(name: impl Into<String>, job: impl Fn() -> Result<Vec<Check>> + Send + Sync + 'static) -> Entry {
    Entry {
        name: name.into(),
        job: Box::new(job),
    }
}

/// Single-check entry whose job returns the measured value.
fn single(name: &str, tol: f64, job: impl Fn() -> Result<f64> + Send + Sync + 'static) -> Entry {
    let n = name.to_string();
    entry(name, move || Ok(vec![Check::at_most(n.clone(), job()?, tol)]))
}

/// Runs every check of `suite` on the current rayon pool.
pub fn run(suite: Suite) -> Report {
    let entries: Vec<Entry> = suite.parts().into_iter().flat_map(catalog).collect();
    let checks = entries
        .par_iter()
        .map(|e| match (e.job)() {
            Ok(c) => c,
            Err(err) => vec![Check::errored(&e.name, &err)],
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Report { suite, checks }
}

/// Names of the checks in `suite`, in report order.
pub fn check_names(suite: Suite) -> Vec<String> {
    suite.parts().into_iter().flat_map(catalog).map(|e| e.name).collect()
}

fn catalog(suite: Suite) -> Vec<Entry> {
    match suite {
        Suite::Fft => fft_suite(),
        Suite::Oracle => oracle_suite(),
        Suite::Invariants => invariant_suite(),
        Suite::Gradcheck => gradcheck_suite(),
        Suite::All => unreachable!("expanded by parts()"),
    }
}

fn s(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w)
}

fn random(shape: Shape, seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn random_complex(shape: Shape, seed: u64) -> ComplexTensor {
    ComplexTensor {
        re: random(shape, seed),
        im: random(shape, seed ^ 0xfff),
    }
}

fn random_pair(shape: Shape, seed: u64) -> ModalityPair {
    ModalityPair {
        rgb: random(shape, seed),
        ir: random(shape, seed + 1000),
    }
}

fn complex_diff(a: &ComplexTensor, b: &ComplexTensor) -> Result<f64> {
    Ok(a.re.max_abs_diff(&b.re)?.max(a.im.max_abs_diff(&b.im)?))
}

fn energy(c: &ComplexTensor) -> f64 {
    c.re.data().iter().chain(c.im.data()).map(|v| v * v).sum()
}

// ---- fft ----

const FFT_TOL: f64 = 1e-9;
const FFT_SIZES: [usize; 4] = [8, 20, 40, 80];

fn fft_suite() -> Vec<Entry> {
    let mut out = Vec::new();
    for (i, n) in FFT_SIZES.into_iter().enumerate() {
        let seed = 100 + i as u64;
        out.push(single(&format!("fft/roundtrip/{n}x{n}"), FFT_TOL, move || {
            let x = random_complex(s(1, 2, n, n), seed);
            complex_diff(&ifft2d(&fft2d_complex(&x)?)?, &x)
        }));
        out.push(single(&format!("fft/parseval/{n}x{n}"), FFT_TOL, move || {
            // sum |ifft(X)|^2 must equal sum |X|^2 / N
            let spectrum = fft2d_complex(&random_complex(s(1, 2, n, n), seed))?;
            let back = energy(&ifft2d(&spectrum)?);
            let expect = energy(&spectrum) / (n * n) as f64;
            Ok((back - expect).abs() / expect)
        }));
    }
    for (i, (h, w)) in [(1, 1), (2, 3), (5, 7), (8, 8), (12, 20), (20, 20)].into_iter().enumerate() {
        let seed = 200 + i as u64;
        out.push(single(&format!("fft/naive_dft/{h}x{w}"), FFT_TOL, move || {
            let x = random_complex(s(1, 2, h, w), seed);
            complex_diff(&fft2d_complex(&x)?, &naive_dft2d(&x))
        }));
    }
    out.push(single("fft/bluestein_vs_radix2/64", FFT_TOL, || {
        let mut rng = ChaCha8Rng::seed_from_u64(300);
        let re: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let im: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (mut ar, mut ai) = (re.clone(), im.clone());
        let (mut br, mut bi) = (re, im);
        FftPlan::new(64).forward(&mut ar, &mut ai);
        FftPlan::bluestein(64).forward(&mut br, &mut bi);
        Ok(ar.iter().zip(&br).chain(ai.iter().zip(&bi)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }));
    out.push(single("fft/real_conjugate_symmetry/20x20", FFT_TOL, || {
        Ok(conjugate_symmetry_error(&fft2d(&random(s(1, 3, 20, 20), 301))))
    }));
    out
}

// ---- oracle ----

const CONV_THEOREM_INSTANCES: usize = 24;

fn oracle_suite() -> Vec<Entry> {
    let mut out = vec![single(
        &format!("oracle/convolution_theorem/{CONV_THEOREM_INSTANCES}_instances"),
        1e-8,
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(400);
            let mut worst: f64 = 0.0;
            for i in 0..CONV_THEOREM_INSTANCES {
                let (h, w) = if i == 0 { (20, 20) } else { (rng.random_range(1..=20), rng.random_range(1..=20)) };
                let a = Tensor::rand_uniform(s(1, 2, h, w), -1.0, 1.0, &mut rng);
                let b = Tensor::rand_uniform(s(1, 2, h, w), -1.0, 1.0, &mut rng);
                let prod = ifft2d(&fft2d(&a).mul(&fft2d(&b), false)?)?;
                worst = worst
                    .max(prod.re.max_abs_diff(&circular_conv2d(&a, &b)?)?)
                    .max(prod.max_abs_imag());
            }
            Ok(worst)
        },
    )];
    let convs = [
        ("standard3x3", ConvSpec::standard(2, 3, 3)),
        ("dilated3x3", ConvSpec::dilated(2, 3, 3, 2)),
        ("depthwise5x5", ConvSpec::depthwise(3, 5)),
        ("pointwise", ConvSpec::pointwise(3, 2)),
        ("strided3x3", ConvSpec::standard(2, 2, 3).with_stride(2)),
    ];
    for (i, (label, spec)) in convs.into_iter().enumerate() {
        let seed = 410 + i as u64;
        out.push(single(&format!("oracle/conv2d/{label}"), 1e-10, move || {
            let x = random(s(2, spec.in_channels, 7, 6), seed);
            let w = random(spec.weight_shape(), seed + 1);
            let b: Vec<f64> = random(s(1, spec.out_channels, 1, 1), seed + 2).into_data();
            let geo = spec.geometry();
            conv2d_raw(&x, &w, Some(&b), geo)?.max_abs_diff(&naive_conv2d(&x, &w, Some(&b), geo)?)
        }));
    }
    out.push(single("oracle/deform_conv2d", 1e-10, || {
        let spec = ConvSpec::deformable(2, 3, 3);
        let geo = spec.geometry();
        let x = random(s(1, 2, 6, 5), 420);
        let off = random(s(1, 18, 6, 5), 421).scale(1.7);
        let w = random(spec.weight_shape(), 422);
        let b = random(s(1, 3, 1, 1), 423).into_data();
        deform_conv2d_raw(&x, &off, &w, Some(&b), geo)?
            .0
            .max_abs_diff(&naive_deform_conv2d(&x, &off, &w, Some(&b), geo)?)
    }));
    out.push(single("oracle/mfda_circular_convolution", 1e-8, mfda_oracle));
    out.push(single("oracle/spectrum_correlation", 1e-10, || {
        let (a, b) = (random(s(1, 1, 5, 4), 430), random(s(1, 1, 5, 4), 431));
        let tape = Tape::new();
        let r = spectrum_product(tape.constant(a.clone()), tape.constant(b.clone()), true)?
            .ifft2d()?
            .take_real(Some(MFDA_IMAG_TOL))?
            .value();
        let (h, w) = (5, 4);
        let expect = Tensor::from_fn(a.shape(), |[_, _, y, x]| {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += a.at(0, 0, (i + y) % h, (j + x) % w) * b.at(0, 0, i, j);
                }
            }
            acc
        });
        r.max_abs_diff(&expect)
    }));
    out.extend(loss_checks());
    out
}

fn mfda_oracle() -> Result<f64> {
    let (store, mfda) = build(440, |pb| Mfda::new(pb, "mfda", &FreDFTConfig::with_channels(2)))?;
    let x = random_pair(s(1, 2, 6, 6), 441);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, NormMode::Train);
    let p = constants(&tape, &x);
    let qkv = mfda.qkv(&ctx, &p)?;
    let got = mfda.forward(&ctx, &p)?.rgb.value();
    let conv = circular_conv2d(&qkv.rgb[0].value(), &qkv.rgb[1].value())?;
    let get = |name: &str| store.id(name).map(|id| store.get(id).clone());
    let gated = layer_norm(
        &conv,
        get("mfda.rgb.norm.gamma")?.data(),
        get("mfda.rgb.norm.beta")?.data(),
        LAYER_NORM_EPS,
    )?
    .mul(&qkv.ir[2].value())?;
    let proj = conv2d_raw(
        &gated,
        &get("mfda.rgb.proj.weight")?,
        Some(get("mfda.rgb.proj.bias")?.data()),
        ConvSpec::pointwise(2, 2).geometry(),
    )?;
    got.max_abs_diff(&x.rgb.add(&proj)?)
}

/// CIoU from corner coordinates, written out independently of the library.
fn ciou_by_hand(p: [f64; 4], t: [f64; 4]) -> f64 {
    let corners = |[cx, cy, w, h]: [f64; 4]| (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
    let (px1, py1, px2, py2) = corners(p);
    let (tx1, ty1, tx2, ty2) = corners(t);
    let inter = (px2.min(tx2) - px1.max(tx1)).max(0.0) * (py2.min(ty2) - py1.max(ty1)).max(0.0);
    let union = p[2] * p[3] + t[2] * t[3] - inter;
    let iou = inter / union;
    let diag2 = (px2.max(tx2) - px1.min(tx1)).powi(2) + (py2.max(ty2) - py1.min(ty1)).powi(2);
    let dist2 = (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2);
    let v = 4.0 / (PI * PI) * ((t[2] / t[3]).atan() - (p[2] / p[3]).atan()).powi(2);
    let alpha = if v == 0.0 { 0.0 } else { v / (1.0 - iou + v) };
    1.0 - iou + dist2 / diag2 + alpha * v
}

fn random_box(rng: &mut ChaCha8Rng) -> Result<BBox> {
    BBox::new(
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.02..0.5),
        rng.random_range(0.02..0.5),
        0,
    )
}

fn loss_checks() -> Vec<Entry> {
    vec![
        single("oracle/ciou_hand_case", 1e-10, || {
            let (p, t) = ([0.5, 0.5, 0.2, 0.2], [0.6, 0.6, 0.2, 0.4]);
            let got = ciou_loss(&BBox::new(p[0], p[1], p[2], p[3], 0)?, &BBox::new(t[0], t[1], t[2], t[3], 0)?)?;
            Ok((got - ciou_by_hand(p, t)).abs().max((got - 0.8820907787298142).abs()))
        }),
        single("oracle/ciou_random_vs_hand", 1e-10, || {
            let mut rng = ChaCha8Rng::seed_from_u64(450);
            let mut worst: f64 = 0.0;
            for _ in 0..200 {
                let (a, b) = (random_box(&mut rng)?, random_box(&mut rng)?);
                let hand = ciou_by_hand([a.cx, a.cy, a.w, a.h], [b.cx, b.cy, b.w, b.h]);
                worst = worst.max((ciou_loss(&a, &b)? - hand).abs());
            }
            Ok(worst)
        }),
        single("oracle/ciou_identical_is_zero", 1e-10, || {
            let mut rng = ChaCha8Rng::seed_from_u64(451);
            let mut worst: f64 = 0.0;
            for _ in 0..200 {
                let a = random_box(&mut rng)?;
                worst = worst.max(ciou_loss(&a, &a)?.abs());
            }
            Ok(worst)
        }),
        entry("oracle/ciou_distinct_is_positive", || {
            let mut rng = ChaCha8Rng::seed_from_u64(452);
            let mut least = f64::INFINITY;
            for _ in 0..200 {
                let a = random_box(&mut rng)?;
                // small perturbations are the hard side of "zero only if equal"
                let b = BBox::new(a.cx + rng.random_range(-1e-3..1e-3), a.cy, a.w * (1.0 + rng.random_range(0.0..1e-3)), a.h, 0)?;
                for other in [b, random_box(&mut rng)?] {
                    if other != a {
                        least = least.min(ciou_loss(&a, &other)?);
                    }
                }
            }
            Ok(vec![Check::at_least("oracle/ciou_distinct_is_positive", least, f64::MIN_POSITIVE)])
        }),
        single("oracle/loss_additivity", 0.0, || {
            let layout = HeadLayout { classes: 2, grid: 4, prior: 0.3 };
            let truth = vec![
                vec![BBox::new(0.3, 0.3, 0.2, 0.1, 0)?, BBox::new(0.7, 0.6, 0.1, 0.3, 1)?],
                vec![BBox::new(0.55, 0.2, 0.3, 0.2, 1)?],
            ];
            let mut rng = ChaCha8Rng::seed_from_u64(453);
            let mut worst: f64 = 0.0;
            for _ in 0..20 {
                let tape = Tape::new();
                let out = tape.var(Tensor::rand_uniform(s(2, 7, 4, 4), -2.0, 2.0, &mut rng));
                let (total, b) = detection_loss(&layout, out, &truth, &VarifocalParams::default())?;
                worst = worst.max((b.total - (b.l_box + b.l_cls + b.l_obj)).abs());
                worst = worst.max((total.value().data()[0] - b.total).abs());
            }
            Ok(worst)
        }),
        single("oracle/one_object_breakdown", 1e-10, || {
            // zero head on a 2x2 grid, prior 0.5: prediction (0.25, 0.75, 0.5, 0.5),
            // every score 0.5, IoU 0.48 with the target
            let layout = HeadLayout { classes: 2, grid: 2, prior: 0.5 };
            let truth = vec![vec![BBox::new(0.3, 0.7, 0.4, 0.3, 1)?]];
            let tape = Tape::new();
            let out = tape.var(Tensor::zeros(s(1, 7, 2, 2)));
            let (_, b) = detection_loss(&layout, out, &truth, &VarifocalParams::default())?;
            let ln2 = 2f64.ln();
            let iou: f64 = 0.48;
            let l_box = ciou_by_hand([0.25, 0.75, 0.5, 0.5], [0.3, 0.7, 0.4, 0.3]);
            // three negative cells at p = 0.5, one positive at q = IoU
            let l_obj = 3.0 * 0.75 * 0.25 * ln2 + iou * ln2;
            let l_cls = ln2 + 0.75 * 0.25 * ln2;
            Ok((b.l_box - l_box).abs().max((b.l_obj - l_obj).abs()).max((b.l_cls - l_cls).abs()))
        }),
        single("oracle/varifocal_monotonicity", 0.0, || {
            let vf = VarifocalParams::default();
            let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
            let mut violations = 0usize;
            for w in grid.windows(2) {
                // negatives cost more as the score rises, positives less
                violations += usize::from(varifocal_loss(w[1], 0.0, &vf) <= varifocal_loss(w[0], 0.0, &vf));
                violations += usize::from(varifocal_loss(w[1], 1.0, &vf) >= varifocal_loss(w[0], 1.0, &vf));
            }
            for &q in &[0.25, 0.5, 0.9] {
                // a positive's loss is minimized when the score equals its target
                let at_q = varifocal_loss(q, q, &vf);
                violations += grid.iter().filter(|&&p| (p - q).abs() > 1e-9 && varifocal_loss(p, q, &vf) < at_q).count();
            }
            Ok(violations as f64)
        }),
    ]
}

// ---- invariants ----

fn build<T>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_>) -> Result<T>) -> Result<(ParamStore, T)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut ParamBuilder::new(&mut store, &mut rng))?;
    Ok((store, m))
}

fn constants<'t>(tape: &'t Tape, x: &ModalityPair) -> VarPair<'t> {
    ModalityPair {
        rgb: tape.constant(x.rgb.clone()),
        ir: tape.constant(x.ir.clone()),
    }
}

fn run_single(
    store: &ParamStore,
    x: &Tensor,
    f: impl for<'t> Fn(&Ctx<'t, '_>, Var<'t>) -> Result<Var<'t>>,
) -> Result<Tensor> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, NormMode::Train);
    Ok((*f(&ctx, tape.constant(x.clone()))?.value()).clone())
}

fn run_pair(
    store: &ParamStore,
    x: &ModalityPair,
    f: impl for<'t> Fn(&Ctx<'t, '_>, &VarPair<'t>) -> Result<VarPair<'t>>,
) -> Result<ModalityPair> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, NormMode::Train);
    let out = f(&ctx, &constants(&tape, x))?;
    Ok(ModalityPair {
        rgb: (*out.rgb.value()).clone(),
        ir: (*out.ir.value()).clone(),
    })
}

fn pair_diff(a: &ModalityPair, b: &ModalityPair) -> Result<f64> {
    Ok(a.rgb.max_abs_diff(&b.rgb)?.max(a.ir.max_abs_diff(&b.ir)?))
}

fn zero(store: &mut ParamStore, prefixes: &[&str]) -> Result<()> {
    for p in prefixes {
        if store.zero_prefix(p) == 0 {
            return Err(Error::InvalidArgument(format!("no parameters under {p}")));
        }
    }
    Ok(())
}

fn invariant_suite() -> Vec<Entry> {
    let mut out = Vec::new();
    for (c, g) in [(4, 2), (8, 4), (12, 3), (16, 4), (18, 6)] {
        out.push(single(&format!("invariants/channel_shuffle_bijective/c{c}_g{g}"), 0.0, move || {
            let x = Tensor::from_fn(s(1, c, 2, 2), |[_, ch, y, xx]| (ch * 4 + y * 2 + xx) as f64);
            let y = channel_shuffle(&x, g)?;
            let mut seen = vec![false; c];
            let mut bad = 0usize;
            for oc in 0..c {
                let src = shuffle_source(oc, c, g);
                bad += usize::from(src >= c || std::mem::replace(&mut seen[src], true));
                let moved = y.slice_channels(oc, 1)?.max_abs_diff(&x.slice_channels(src.min(c - 1), 1)?)?;
                bad += usize::from(moved != 0.0);
            }
            Ok(bad as f64)
        }));
    }
    for ce in [3, 6, 9, 18] {
        out.push(single(&format!("invariants/fdffl_chunk_partition/ce{ce}"), 0.0, move || {
            let routing = fdffl_routing(ce);
            let mut bad = usize::from(routing.len() != 3);
            for path in &routing {
                bad += usize::from(path.iter().map(|r| r.len()).sum::<usize>() != ce);
            }
            let mut all: Vec<usize> = routing.iter().flatten().flat_map(|r| r.clone()).collect();
            all.sort_unstable();
            bad += usize::from(all != (0..3 * ce).collect::<Vec<_>>());
            Ok(bad as f64)
        }));
    }
    out.push(single("invariants/identity/lfem_zero_projection", 0.0, || {
        let (mut store, m) = build(500, |pb| Lfem::new(pb, "lfem", &FreDFTConfig::with_channels(4)))?;
        zero(&mut store, &["lfem.proj"])?;
        let x = random(s(2, 4, 6, 6), 501);
        run_single(&store, &x, |ctx, v| m.forward(ctx, v))?.max_abs_diff(&x)
    }));
    out.push(single("invariants/identity/cgmm_zero_projection", 0.0, || {
        let (mut store, m) = build(502, |pb| Cgmm::new(pb, "cgmm", &FreDFTConfig::with_channels(4)))?;
        zero(&mut store, &["cgmm.rgb.p.", "cgmm.ir.p."])?;
        let x = random_pair(s(2, 4, 5, 5), 503);
        pair_diff(&run_pair(&store, &x, |ctx, p| m.forward(ctx, p))?, &x)
    }));
    out.push(single("invariants/identity/mfda_zero_projection", 0.0, || {
        let (mut store, m) = build(504, |pb| Mfda::new(pb, "mfda", &FreDFTConfig::with_channels(4)))?;
        zero(&mut store, &["mfda.rgb.proj.", "mfda.ir.proj."])?;
        let x = random_pair(s(1, 4, 6, 6), 505);
        pair_diff(&run_pair(&store, &x, |ctx, p| m.forward(ctx, p))?, &x)
    }));
    out.push(single("invariants/identity/msda_zero_projection", 0.0, || {
        let (mut store, m) = build(506, |pb| Msda::new(pb, "msda", &FreDFTConfig::with_channels(4)))?;
        zero(&mut store, &["msda.rgb.proj.", "msda.ir.proj."])?;
        let x = random_pair(s(1, 4, 5, 5), 507);
        pair_diff(&run_pair(&store, &x, |ctx, p| m.forward(ctx, p))?, &x)
    }));
    out.push(single("invariants/identity/fdffl_zero_projection", 0.0, || {
        let (mut store, m) = build(508, |pb| Fdffl::new(pb, "ffl", &FreDFTConfig::with_channels(5)))?;
        zero(&mut store, &["ffl.proj"])?;
        let x = random(s(2, 5, 6, 7), 509);
        run_single(&store, &x, |ctx, v| m.forward(ctx, v))?.max_abs_diff(&x)
    }));
    out.push(single("invariants/identity/mlp_ffl_zero_projection", 0.0, || {
        let (mut store, m) = build(510, |pb| MlpFfl::new(pb, "mlp", &FreDFTConfig::with_channels(4)))?;
        zero(&mut store, &["mlp.fc2"])?;
        let x = random(s(1, 4, 5, 5), 511);
        run_single(&store, &x, |ctx, v| m.forward(ctx, v))?.max_abs_diff(&x)
    }));
    for (i, (h, w)) in [(6, 6), (7, 5), (8, 8), (20, 20)].into_iter().enumerate() {
        let seed = 520 + i as u64;
        out.push(single(&format!("invariants/mfda_imaginary_residue/{h}x{w}"), MFDA_IMAG_TOL, move || {
            let (store, m) = build(seed, |pb| Mfda::new(pb, "mfda", &FreDFTConfig::with_channels(4)))?;
            let x = random_pair(s(1, 4, h, w), seed);
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, NormMode::Train);
            m.imaginary_residue(&ctx, &constants(&tape, &x))
        }));
    }
    for (label, axis) in [("channel", SoftmaxAxis::Channel), ("spatial", SoftmaxAxis::Spatial)] {
        out.push(single(&format!("invariants/softmax_{label}_sums_to_one"), 1e-12, move || {
            let x = random(s(2, 5, 4, 3), 530).scale(20.0);
            let p = softmax(&x, axis);
            let [n, c, h, w] = p.shape().dims();
            let mut worst: f64 = 0.0;
            if p.data().iter().any(|&v| !(v >= 0.0)) {
                return Ok(f64::INFINITY);
            }
            match axis {
                SoftmaxAxis::Channel => {
                    for b in 0..n {
                        for y in 0..h {
                            for xx in 0..w {
                                let sum: f64 = (0..c).map(|ch| p.at(b, ch, y, xx)).sum();
                                worst = worst.max((sum - 1.0).abs());
                            }
                        }
                    }
                }
                SoftmaxAxis::Spatial => {
                    for lane in p.data().chunks(h * w) {
                        worst = worst.max((lane.iter().sum::<f64>() - 1.0).abs());
                    }
                }
            }
            Ok(worst)
        }));
    }
    out.push(single("invariants/layer_norm_moments", 1e-12, || {
        let (c, h, w) = (6, 3, 4);
        let x = random(s(2, c, h, w), 531).map(|v| 3.0 * v + 0.7);
        let y = layer_norm(&x, &vec![1.0; c], &vec![0.0; c], LAYER_NORM_EPS)?;
        let mut worst: f64 = 0.0;
        for b in 0..2 {
            for yy in 0..h {
                for xx in 0..w {
                    let col = |t: &Tensor| (0..c).map(|ch| t.at(b, ch, yy, xx)).collect::<Vec<f64>>();
                    let (xs, ys) = (col(&x), col(&y));
                    let mean = xs.iter().sum::<f64>() / c as f64;
                    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                    let out_mean = ys.iter().sum::<f64>() / c as f64;
                    let out_var = ys.iter().map(|v| v * v).sum::<f64>() / c as f64;
                    worst = worst.max(out_mean.abs()).max((out_var - var / (var + LAYER_NORM_EPS)).abs());
                }
            }
        }
        Ok(worst)
    }));
    out.push(single("invariants/msda_rows_sum_to_one", 1e-12, || {
        let (store, m) = build(532, |pb| Msda::new(pb, "msda", &FreDFTConfig::with_channels(4)))?;
        let x = random_pair(s(2, 4, 4, 5), 533).map(|t| t.scale(3.0));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, NormMode::Train);
        let a = m.rgb_attention_matrix(&ctx, &constants(&tape, &x))?;
        Ok(a.data().chunks(20).map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max))
    }));
    out.push(single("invariants/cgmm_gate_open_unit_interval", 0.0, || {
        let (store, m) = build(534, |pb| Cgmm::new(pb, "cgmm", &FreDFTConfig::with_channels(6)))?;
        let x = random_pair(s(2, 6, 5, 4), 535).map(|t| t.scale(5.0));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, NormMode::Train);
        let g = m.rgb_gate(&ctx, &constants(&tape, &x))?.value();
        Ok(g.data().iter().filter(|&&v| !(v > 0.0 && v < 1.0)).count() as f64)
    }));
    out.push(single("invariants/fdfam_output_nonnegative", 0.0, || {
        let (store, m) = build(536, |pb| Fdfam::new(pb, "fdfam", &FreDFTConfig::with_channels(8), &FusionLayout::FULL))?;
        let x = random_pair(s(1, 8, 8, 8), 537);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, NormMode::Train);
        let y = m.forward(&ctx, &constants(&tape, &x))?.value();
        Ok(y.data().iter().filter(|&&v| !(v >= 0.0)).count() as f64)
    }));
    out.push(single("invariants/addition_layout_adds", 0.0, || {
        let (store, block) = build(538, |pb| FreDft::new(pb, "fredft", &FreDFTConfig::with_channels(4), FusionLayout::ADDITION))?;
        let x = random_pair(s(1, 4, 5, 5), 539);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, NormMode::Train);
        block.forward(&ctx, &constants(&tape, &x))?.value().max_abs_diff(&x.rgb.add(&x.ir)?)
    }));
    out.push(single("invariants/block_deterministic", 0.0, || {
        let x = random_pair(s(2, 6, 7, 6), 540);
        let outs = (0..2)
            .map(|_| {
                let (store, block) = build(541, |pb| FreDft::new(pb, "fredft", &FreDFTConfig::with_channels(6), FusionLayout::FULL))?;
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &store, NormMode::Train);
                Ok((*block.forward(&ctx, &constants(&tape, &x))?.value()).clone())
            })
            .collect::<Result<Vec<Tensor>>>()?;
        outs[0].max_abs_diff(&outs[1])
    }));
    out
}

// ---- gradcheck ----

const GRAD_POINTS: usize = 3;

fn grad_check(name: &str, r: Result<GradReport>, tol: f64) -> Result<Vec<Check>> {
    let r = r?;
    let mut c = Check::at_most(format!("gradcheck/{name}"), r.max_rel_err, tol);
    c.error = r.failure;
    Ok(vec![c])
}

fn op_entry<F>(name: &'static str, shapes: Vec<Shape>, f: F) -> Entry
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Send + Sync + 'static,
{
    entry(format!("gradcheck/{name}"), move || {
        let cfg = GradCheckConfig::default();
        let r = gradcheck_random(name, |t, v| project(t, f(t, v)?), &shapes, GRAD_POINTS, &cfg);
        grad_check(name, r, cfg.tol)
    })
}

fn module_entry<M, F>(name: &'static str, seed: u64, shapes: Vec<Shape>, make: M, f: F) -> Entry
where
    M: Fn(&mut ParamBuilder<'_>) -> Result<Box<dyn ModuleFn>> + Send + Sync + 'static,
    F: Fn(&mut ParamStore) -> Result<()> + Send + Sync + 'static,
{
    entry(format!("gradcheck/{name}"), move || {
        let (mut store, m) = build(seed, &make)?;
        f(&mut store)?;
        let cfg = GradCheckConfig::default();
        let r = gradcheck_module(name, &store, &shapes, NormMode::Train, GRAD_POINTS, &cfg, |ctx, x| m.apply(ctx, x));
        grad_check(name, r, cfg.tol)
    })
}

/// A module forward over a list of inputs, returning one tensor.
trait ModuleFn: Send + Sync {
    fn apply<'t>(&self, ctx: &Ctx<'t, '_>, x: &[Var<'t>]) -> Result<Var<'t>>;
}

impl ModuleFn for Lfem {
    fn apply<'t>(&self, ctx: &Ctx<'t, '_>, x: &[Var<'t>]) -> Result<Var<'t>> {
        self.forward(ctx, x[0])
    }
}

impl ModuleFn for Fdffl {
    fn apply<'t>(&self, ctx: &Ctx<'t, '_>, x: &[Var<'t>]) -> Result<Var<'t>> {
        self.forward(ctx, x[0])
    }
}

impl ModuleFn for MlpFfl {
    fn apply<'t>(&self, ctx: &Ctx<'t, '_>, x: &[Var<'t>]) -> Result<Var<'t>> {
        self.forward(ctx, x[0])
    }
}

fn pair_of<'t>(x: &[Var<'t>]) -> VarPair<'t> {
    ModalityPair { rgb: x[0], ir: x[1] }
}

fn join<'t>(p: VarPair<'t>) -> Result<Var<'t>> {
    Var::concat(&[p.rgb, p.ir])
}

impl ModuleFn for Cgmm {
    fn apply<'t>(&self, ctx: &Ctx<'t, '_>, x: &[Var<'t>]) -> Result<Var<'t>> {
        join(self.forward(ctx, &pair_of(x))?)
    }
}

impl ModuleFn for Mfda {
    fn apply<'t>(&self, ctx: &Ctx<'t, '_>, x: &[Var<'t>]) -> Result<Var<'t>> {
        join(self.forward(ctx, &pair_of(x))?)
    }
}

impl ModuleFn for Msda {
    fn apply<'t>(&self, ctx: &Ctx<'t, '_>, x: &[Var<'t>]) -> Result<Var<'t>> {
        join(self.forward(ctx, &pair_of(x))?)
    }
}

impl ModuleFn for Fdfam {
    fn apply<'t>(&self, ctx: &Ctx<'t, '_>, x: &[Var<'t>]) -> Result<Var<'t>> {
        self.forward(ctx, &pair_of(x))
    }
}

impl ModuleFn for FreDft {
    fn apply<'t>(&self, ctx: &Ctx<'t, '_>, x: &[Var<'t>]) -> Result<Var<'t>> {
        self.forward(ctx, &pair_of(x))
    }
}

fn boxed<M: ModuleFn + 'static>(m: Result<M>) -> Result<Box<dyn ModuleFn>> {
    Ok(Box::new(m?))
}

/// Small random offset-predictor weights so deformable taps leave the grid.
fn randomize_offsets(store: &mut ParamStore, names: &[String], seed: u64) -> Result<()> {
    for name in names {
        let id = store.id(name)?;
        let noise = random(store.get(id).shape(), seed).scale(0.1);
        store.set(id, noise)?;
    }
    Ok(())
}

fn tensor_op_entries() -> Vec<Entry> {
    let e = s(2, 3, 3, 2);
    let u = vec![s(1, 2, 3, 3)];
    let mut out = vec![
        op_entry("add", vec![e, e], |_, v| v[0].add(v[1])),
        op_entry("sub", vec![e, e], |_, v| v[0].sub(v[1])),
        op_entry("mul", vec![e, e], |_, v| v[0].mul(v[1])),
        op_entry("div", vec![e, e], |_, v| v[0].div(v[1].square().add_scalar(0.5))),
        op_entry("maximum", vec![e, e], |_, v| v[0].maximum(v[1])),
        op_entry("minimum", vec![e, e], |_, v| v[0].minimum(v[1])),
        op_entry("broadcast_mul", vec![e, s(2, 3, 1, 1)], |_, v| v[0].mul(v[1])),
        op_entry("broadcast_add", vec![s(2, 3, 1, 1), e], |_, v| v[0].add(v[1])),
        op_entry("relu", u.clone(), |_, v| Ok(v[0].relu())),
        op_entry("silu", u.clone(), |_, v| Ok(v[0].silu())),
        op_entry("sigmoid", u.clone(), |_, v| Ok(v[0].sigmoid())),
        op_entry("exp", u.clone(), |_, v| Ok(v[0].exp())),
        op_entry("ln", u.clone(), |_, v| Ok(v[0].square().add_scalar(0.1).ln())),
        op_entry("sqrt", u.clone(), |_, v| Ok(v[0].square().add_scalar(0.1).sqrt())),
        op_entry("atan", u.clone(), |_, v| Ok(v[0].atan())),
        op_entry("square", u.clone(), |_, v| Ok(v[0].square())),
        op_entry("scale", u.clone(), |_, v| Ok(v[0].scale(-2.5))),
        op_entry("clamp", u.clone(), |_, v| Ok(v[0].clamp(-0.5, 0.5))),
        op_entry("sum", u.clone(), |_, v| Ok(v[0].sum())),
        op_entry("mean", u.clone(), |_, v| Ok(v[0].mean())),
        op_entry("sum_spatial", vec![e], |_, v| Ok(v[0].sum_spatial())),
        op_entry("reshape", vec![e], |_, v| v[0].reshape([2, 1, 9, 2])),
        op_entry("transpose", vec![s(2, 1, 3, 4)], |_, v| Ok(v[0].transpose_last2())),
        op_entry("matmul", vec![s(2, 1, 3, 4), s(2, 1, 4, 2)], |_, v| v[0].matmul(v[1])),
        op_entry("concat", vec![s(1, 2, 3, 3), s(1, 1, 3, 3)], |_, v| Var::concat(&[v[0], v[1], v[0]])),
        op_entry("slice_channels", vec![s(2, 5, 2, 2)], |_, v| v[0].slice_channels(1, 3)),
        op_entry("split_channels", vec![s(1, 6, 2, 2)], |_, v| {
            let p = v[0].split_channels(&[1, 2, 3])?;
            p[2].slice_channels(0, 1)?.add(p[0])?.mul(p[1].slice_channels(1, 1)?)
        }),
        op_entry("channel_shuffle", vec![s(1, 8, 2, 2)], |_, v| v[0].channel_shuffle(4)),
        op_entry("gather", u.clone(), |_, v| v[0].gather(vec![0, 4, 4, 17])),
        op_entry("softmax_channel", vec![s(2, 4, 3, 3)], |_, v| Ok(v[0].softmax(SoftmaxAxis::Channel))),
        op_entry("softmax_spatial", vec![s(2, 4, 3, 3)], |_, v| Ok(v[0].softmax(SoftmaxAxis::Spatial))),
        op_entry("layer_norm", vec![s(2, 4, 3, 3), s(1, 4, 1, 1), s(1, 4, 1, 1)], |_, v| {
            v[0].layer_norm(v[1], v[2], LAYER_NORM_EPS)
        }),
        op_entry("global_avg_pool", vec![s(2, 3, 3, 3)], |_, v| Ok(v[0].global_pool(PoolKind::Average))),
        op_entry("global_max_pool", vec![s(2, 3, 3, 3)], |_, v| Ok(v[0].global_pool(PoolKind::Max))),
        op_entry("attention", vec![e, e, e], |_, v| v[0].attention(v[1], v[2], 1.0 / 3f64.sqrt())),
    ];
    for (label, mode) in [("batch_norm_train", NormMode::Train), ("batch_norm_eval", NormMode::Eval)] {
        out.push(op_entry(label, vec![s(3, 2, 3, 3), s(1, 2, 1, 1), s(1, 2, 1, 1)], move |_, v| {
            let mut running = BatchNormStats::new(2);
            running.mean = vec![0.1, -0.2];
            running.var = vec![0.5, 1.5];
            Ok(v[0].batch_norm(v[1], v[2], &running, mode, 1e-5)?.0)
        }));
    }
    let convs = [
        ("conv2d_standard", ConvSpec::standard(2, 3, 3)),
        ("conv2d_dilated", ConvSpec::dilated(2, 3, 3, 2)),
        ("conv2d_depthwise", ConvSpec::depthwise(3, 5)),
        ("conv2d_pointwise", ConvSpec::pointwise(3, 2)),
        ("conv2d_strided", ConvSpec::standard(2, 2, 3).with_stride(2)),
    ];
    for (label, spec) in convs {
        let geo = spec.geometry();
        let shapes = vec![s(2, spec.in_channels, 5, 6), spec.weight_shape(), s(1, spec.out_channels, 1, 1)];
        out.push(op_entry(label, shapes, move |_, v| v[0].conv2d(v[1], Some(v[2]), geo)));
    }
    let spec = ConvSpec::deformable(2, 3, 3);
    let geo = spec.geometry();
    out.push(op_entry(
        "deform_conv2d",
        vec![s(1, 2, 5, 5), s(1, 18, 5, 5), spec.weight_shape(), s(1, 3, 1, 1)],
        move |_, v| v[0].deform_conv2d(v[1].scale(0.7).add_scalar(0.13), v[2], Some(v[3]), geo),
    ));
    out.extend([
        op_entry("fft2d", vec![s(1, 2, 5, 4)], |_, v| {
            let f = ComplexVar::real(v[0]).fft2d()?;
            f.re.add(f.im.expect("forward transform is complex").scale(0.7))
        }),
        op_entry("ifft2d", vec![s(1, 2, 3, 5), s(1, 2, 3, 5)], |_, v| {
            let r = ComplexVar { re: v[0], im: Some(v[1]) }.ifft2d()?;
            r.re.add(r.im.expect("complex input").scale(0.3))
        }),
        op_entry("spectrum_product", vec![s(1, 2, 4, 5), s(1, 2, 4, 5)], |_, v| {
            spectrum_product(v[0], v[1], false)?.ifft2d()?.take_real(Some(MFDA_IMAG_TOL))
        }),
        op_entry("spectrum_correlation", vec![s(1, 1, 4, 4), s(1, 1, 4, 4)], |_, v| {
            spectrum_product(v[0], v[1], true)?.ifft2d()?.take_real(Some(MFDA_IMAG_TOL))
        }),
        op_entry("spectrum_chunks", vec![s(1, 6, 4, 4)], |_, v| {
            let f = ComplexVar::real(v[0]).fft2d()?;
            let parts = f.split_channels(&[2, 2, 2])?;
            ComplexVar::concat(&[parts[2], parts[0], parts[1]])?.ifft2d()?.take_real(None)
        }),
    ]);
    out
}

fn module_entries() -> Vec<Entry> {
    let pair = |c, h, w| vec![s(1, c, h, w), s(1, c, h, w)];
    let none = |_: &mut ParamStore| Ok(());
    let mut out = vec![
        module_entry("lfem", 600, vec![s(1, 4, 6, 6)], |pb| boxed(Lfem::new(pb, "lfem", &FreDFTConfig::with_channels(4))), |st| {
            randomize_offsets(st, &["lfem.deform.conv.offset.weight".into()], 601)
        }),
        module_entry("cgmm", 602, pair(4, 5, 5), |pb| boxed(Cgmm::new(pb, "cgmm", &FreDFTConfig::with_channels(4))), none),
        module_entry("mfda", 603, pair(4, 5, 6), |pb| boxed(Mfda::new(pb, "mfda", &FreDFTConfig::with_channels(4))), none),
        module_entry(
            "mfda_cross_conjugate",
            604,
            pair(4, 5, 6),
            |pb| {
                let c = FreDFTConfig {
                    conjugate_key: true,
                    cross_qk: true,
                    ..FreDFTConfig::with_channels(4)
                };
                boxed(Mfda::new(pb, "mfda", &c))
            },
            none,
        ),
        module_entry("fdffl", 605, vec![s(1, 6, 8, 8)], |pb| boxed(Fdffl::new(pb, "ffl", &FreDFTConfig::with_channels(6))), none),
        module_entry("fdfam", 606, pair(4, 6, 6), |pb| boxed(Fdfam::new(pb, "fdfam", &FreDFTConfig::with_channels(4), &FusionLayout::FULL)), none),
        module_entry("msda", 607, pair(4, 4, 5), |pb| boxed(Msda::new(pb, "msda", &FreDFTConfig::with_channels(4))), none),
        module_entry("mlp_ffl", 608, vec![s(1, 4, 5, 5)], |pb| boxed(MlpFfl::new(pb, "mlp", &FreDFTConfig::with_channels(4))), none),
    ];
    out.push(entry("gradcheck/fredft_full_stack", || {
        let (mut store, block) = build(609, |pb| FreDft::new(pb, "fredft", &FreDFTConfig::with_channels(4), FusionLayout::FULL))?;
        randomize_offsets(
            &mut store,
            &["rgb", "ir"].map(|m| format!("fredft.lfem_{m}.deform.conv.offset.weight")),
            610,
        )?;
        let sh = s(1, 4, 5, 6);
        let cfg = GradCheckConfig {
            probes: 16,
            ..Default::default()
        };
        let r = gradcheck_module("fredft", &store, &[sh, sh], NormMode::Train, GRAD_POINTS, &cfg, |ctx, x| {
            block.apply(ctx, x)
        });
        grad_check("fredft_full_stack", r, cfg.tol)
    }));
    out
}

fn tape_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

/// Gradient check of a function with stop-gradient terms `T`. The terms
/// are computed once at each base point and then held fixed, so the finite
/// differences see the same function backward differentiates.
fn frozen_entry<T, F>(name: &'static str, seed: u64, shapes: Vec<Shape>, eval: F) -> Entry
where
    T: Send + Sync + 'static,
    F: for<'t> Fn(&'t Tape, &[Var<'t>], Option<&T>) -> Result<(Var<'t>, T)> + Send + Sync + 'static,
{
    entry(format!("gradcheck/{name}"), move || {
        let cfg = GradCheckConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total: Option<GradReport> = None;
        let mut accepted = 0;
        for _ in 0..200 {
            if accepted == GRAD_POINTS {
                break;
            }
            let xs: Vec<Tensor> = shapes.iter().map(|&sh| Tensor::rand_uniform(sh, -1.0, 1.0, &mut rng)).collect();
            let fixed = {
                let tape = Tape::new();
                let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.var(x.clone())).collect();
                eval(&tape, &vars, None)?.1
            };
            let f = tape_fn(|t, v| Ok(eval(t, v, Some(&fixed))?.0));
            if kink_free_points(&f, std::iter::once(xs.clone()), 1, &cfg)?.is_empty() {
                continue;
            }
            let point_cfg = GradCheckConfig {
                seed: accepted as u64,
                ..cfg.clone()
            };
            let r = gradcheck(name, f, &xs, &point_cfg)?;
            total = Some(match total {
                None => r,
                Some(t) => t.merge(&r),
            });
            accepted += 1;
        }
        match total {
            Some(r) if accepted == GRAD_POINTS => grad_check(name, Ok(r), cfg.tol),
            _ => Err(Error::InvalidArgument(format!("{name}: no kink-free points"))),
        }
    })
}

fn loss_entries() -> Vec<Entry> {
    vec![
        frozen_entry("ciou_loss", 619, vec![s(1, 1, 1, 3); 4], |t, v, fixed: Option<&Vec<f64>>| {
            // alpha is stop-gradient, frozen like the detection loss terms
            let targets = [
                BBox::new(0.35, 0.45, 0.25, 0.2, 0)?,
                BBox::new(0.6, 0.5, 0.3, 0.3, 0)?,
                BBox::new(0.5, 0.6, 0.1, 0.4, 0)?,
            ];
            let centre = t.constant(Tensor::full(s(1, 1, 1, 3), 0.5));
            let pred = fredft::detection::BoxVars {
                cx: v[0].scale(0.1).add(centre)?,
                cy: v[1].scale(0.1).add(centre)?,
                w: v[2].scale(0.5).exp().scale(0.25),
                h: v[3].scale(0.5).exp().scale(0.25),
            };
            let (loss, _, alpha) = fredft::detection::ciou_loss_var(&pred, &targets, fixed.map(Vec::as_slice))?;
            Ok((project(t, loss)?, alpha))
        }),
        op_entry("varifocal_loss", vec![s(1, 1, 2, 4)], |_, v| {
            let q = [0.0, 0.3, 0.0, 1.0, 0.7, 0.0, 0.0, 0.5];
            fredft::detection::varifocal_loss_var(v[0].sigmoid(), &q, &VarifocalParams::default())
        }),
        frozen_entry("detection_loss", 620, vec![s(2, 7, 2, 2)], |_, v, fixed: Option<&DetachedTerms>| {
            // the IoU objectness targets and the CIoU alpha are stop-gradient
            let layout = HeadLayout { classes: 2, grid: 2, prior: 0.5 };
            let truth = vec![
                vec![BBox::new(0.3, 0.7, 0.4, 0.3, 1)?],
                vec![BBox::new(0.8, 0.2, 0.2, 0.3, 0)?, BBox::new(0.2, 0.3, 0.3, 0.2, 1)?],
            ];
            let (loss, _, terms) = detection_loss_with(&layout, v[0], &truth, &VarifocalParams::default(), fixed)?;
            Ok((loss, terms))
        }),
    ]
}

fn gradcheck_suite() -> Vec<Entry> {
    let mut out = tensor_op_entries();
    out.extend(module_entries());
    out.extend(loss_entries());
    out
}
