//! Forward-time scaling of spatial and frequency-domain attention.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fredft::autodiff::Tape;
use fredft::fusion::{FreDFTConfig, Mfda, Msda, VarPair};
use fredft::nn::{Ctx, ParamBuilder, ParamStore};
use fredft::{ModalityPair, Result, Shape, Tensor};

use crate::config::BenchConfig;

pub const KERNELS: [&str; 2] = ["msda", "mfda"];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kernel: &'static str,
    pub size: usize,
    pub tokens: usize,
    /// Median forward time in seconds.
    pub median: f64,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of `ln(time)` against `ln(H * W)`, per kernel.
    pub slopes: Vec<(&'static str, f64)>,
}

impl BenchResult {
    pub fn slope(&self, kernel: &str) -> Option<f64> {
        self.slopes.iter().find(|(k, _)| *k == kernel).map(|&(_, s)| s)
    }

    /// One row per (size, kernel); the fitted slope of the row's kernel is
    /// repeated on each of its rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kernel,size,tokens,repeats,median_seconds,slope\n");
        for r in &self.rows {
            let slope = self.slope(r.kernel).unwrap_or(f64::NAN);
            s.push_str(&format!("{},{},{},{},{:e},{:.4}\n", r.kernel, r.size, r.tokens, r.repeats, r.median, slope));
        }
        s
    }
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Ordinary least-squares slope of `ys` on `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

enum Kernel {
    Msda(Msda),
    Mfda(Mfda),
}

impl Kernel {
    fn forward<'t>(&self, ctx: &Ctx<'t, '_>, p: &VarPair<'t>) -> Result<VarPair<'t>> {
        match self {
            Kernel::Msda(m) => m.forward(ctx, p),
            Kernel::Mfda(m) => m.forward(ctx, p),
        }
    }
}

fn time_once(kernel: &Kernel, store: &ParamStore, x: &ModalityPair) -> Result<f64> {
    let start = Instant::now();
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, store);
    let p = ModalityPair {
        rgb: tape.constant(x.rgb.clone()),
        ir: tape.constant(x.ir.clone()),
    };
    let out = kernel.forward(&ctx, &p)?;
    std::hint::black_box(out.rgb.value());
    Ok(start.elapsed().as_secs_f64())
}

pub fn bench_attention(cfg: &BenchConfig, seed: u64) -> Result<BenchResult> {
    let c = cfg.channels;
    let mut rows = Vec::new();
    for &size in &cfg.sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ size as u64);
        let shape = Shape::new(1, c, size, size);
        let x = ModalityPair {
            rgb: Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng),
            ir: Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng),
        };
        let fusion = FreDFTConfig {
            height: size,
            width: size,
            ..FreDFTConfig::with_channels(c)
        };
        for name in KERNELS {
            let mut store = ParamStore::new();
            let mut prng = ChaCha8Rng::seed_from_u64(seed);
            let kernel = {
                let mut pb = ParamBuilder::new(&mut store, &mut prng);
                match name {
                    "msda" => Kernel::Msda(Msda::new(&mut pb, "msda", &fusion)?),
                    _ => Kernel::Mfda(Mfda::new(&mut pb, "mfda", &fusion)?),
                }
            };
            // one untimed run warms FFT plans and allocator pools
            time_once(&kernel, &store, &x)?;
            let mut times = (0..cfg.repeats).map(|_| time_once(&kernel, &store, &x)).collect::<Result<Vec<f64>>>()?;
            rows.push(BenchRow {
                kernel: name,
                size,
                tokens: size * size,
                median: median(&mut times),
                repeats: cfg.repeats,
            });
        }
    }
    let slopes = KERNELS
        .iter()
        .map(|&k| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| r.kernel == k)
                .map(|r| ((r.tokens as f64).ln(), r.median.ln()))
                .unzip();
            (k, fit_slope(&xs, &ys))
        })
        .collect();
    Ok(BenchResult { rows, slopes })
}
