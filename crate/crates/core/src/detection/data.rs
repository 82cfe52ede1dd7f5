use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::BBox;
use crate::error::{Error, Result};
use crate::tensor::{ModalityPair, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Both,
    RgbOnly,
    IrOnly,
}

impl Visibility {
    pub const ALL: [Visibility; 3] = [Visibility::Both, Visibility::RgbOnly, Visibility::IrOnly];

    pub fn in_rgb(self) -> bool {
        self != Visibility::IrOnly
    }

    pub fn in_ir(self) -> bool {
        self != Visibility::RgbOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            Visibility::Both => "both",
            Visibility::RgbOnly => "rgb_only",
            Visibility::IrOnly => "ir_only",
        }
    }
}

/// Synthetic dual-modality scenes. Class 0 objects are wide, class 1 tall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub count: usize,
    pub seed: u64,
    /// Probabilities of `both`, `rgb_only`, `ir_only`.
    pub mix: [f64; 3],
    pub size: usize,
    pub noise: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Long and short side ranges in pixels.
    pub long_side: [usize; 2],
    pub short_side: [usize; 2],
    /// Objects never share a cell of this grid.
    pub grid: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            count: 2000,
            seed: 0,
            mix: [0.4, 0.3, 0.3],
            size: 64,
            noise: 0.05,
            min_objects: 1,
            max_objects: 3,
            long_side: [18, 26],
            short_side: [10, 14],
            grid: 8,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mix.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (self.mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("visibility mix {:?} must be fractions summing to 1", self.mix)));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::InvalidArgument("need 1 <= min_objects <= max_objects".into()));
        }
        let [lo, hi] = self.long_side;
        let [slo, shi] = self.short_side;
        if slo == 0 || slo > shi || lo > hi || hi + 2 > self.size || self.grid == 0 || self.size % self.grid != 0 {
            return Err(Error::InvalidArgument("object sizes do not fit the image".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `(1, 3, S, S)`.
    pub rgb: Tensor,
    /// `(1, 1, S, S)`.
    pub ir: Tensor,
    pub truth: Vec<BBox>,
    pub visibility: Vec<Visibility>,
}

struct Placed {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    class_id: usize,
    vis: Visibility,
}

fn place(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<Placed> {
    let s = cfg.size;
    let cell = s / cfg.grid;
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut out: Vec<Placed> = Vec::new();
    let mut tries = 0;
    while out.len() < n && tries < 200 {
        tries += 1;
        let class_id = rng.random_range(0..2usize);
        let long = rng.random_range(cfg.long_side[0]..=cfg.long_side[1]);
        let short = rng.random_range(cfg.short_side[0]..=cfg.short_side[1]);
        let (w, h) = if class_id == 0 { (long, short) } else { (short, long) };
        let x0 = rng.random_range(1..s - w);
        let y0 = rng.random_range(1..s - h);
        let u: f64 = rng.random();
        let vis = if u < cfg.mix[0] {
            Visibility::Both
        } else if u < cfg.mix[0] + cfg.mix[1] {
            Visibility::RgbOnly
        } else {
            Visibility::IrOnly
        };
        // centers in pixel units times two, to stay integral
        let (cx2, cy2) = (2 * x0 + w, 2 * y0 + h);
        let on_edge = cx2 % (2 * cell) == 0 || cy2 % (2 * cell) == 0;
        let clash = on_edge || out.iter().any(|o| {
            let apart_x = x0 >= o.x0 + o.w + 2 || o.x0 >= x0 + w + 2;
            let apart_y = y0 >= o.y0 + o.h + 2 || o.y0 >= y0 + h + 2;
            let same_cell = cx2 / (2 * cell) == (2 * o.x0 + o.w) / (2 * cell) && cy2 / (2 * cell) == (2 * o.y0 + o.h) / (2 * cell);
            !(apart_x || apart_y) || same_cell
        });
        if !clash {
            out.push(Placed { x0, y0, w, h, class_id, vis });
        }
    }
    out
}

/// One scene; sample `index` of the stream selected by `cfg.seed`.
pub fn synthetic_sample(cfg: &SyntheticConfig, index: usize) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let s = cfg.size;
    let objects = place(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.noise).expect("noise sigma is finite");
    let bound = 3.0 * cfg.noise;
    let draw = |rng: &mut ChaCha8Rng| noise.sample(rng).clamp(-bound, bound);

    let mut rgb = vec![0.0; 3 * s * s];
    let mut ir = vec![0.0; s * s];
    for o in &objects {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
        let period = rng.random_range(2..=4usize);
        let amp = rng.random_range(0.7..1.0);
        if o.vis.in_rgb() {
            for y in o.y0..o.y0 + o.h {
                for x in o.x0..o.x0 + o.w {
                    let stripe = if ((x - o.x0) / period + (y - o.y0) / period) % 2 == 0 { 1.0 } else { 0.75 };
                    for (c, col) in color.iter().enumerate() {
                        rgb[(c * s + y) * s + x] = col * stripe;
                    }
                }
            }
        }
        if o.vis.in_ir() {
            let cx = o.x0 as f64 + o.w as f64 / 2.0;
            let cy = o.y0 as f64 + o.h as f64 / 2.0;
            let (sx, sy) = (o.w as f64 / 4.0, o.h as f64 / 4.0);
            for y in 0..s {
                for x in 0..s {
                    let dx = (x as f64 + 0.5 - cx) / sx;
                    let dy = (y as f64 + 0.5 - cy) / sy;
                    ir[y * s + x] += amp * (-0.5 * (dx * dx + dy * dy)).exp();
                }
            }
        }
    }
    for v in rgb.iter_mut().chain(ir.iter_mut()) {
        *v += draw(&mut rng);
    }
    let sf = s as f64;
    let truth = objects
        .iter()
        .map(|o| {
            BBox::new(
                (o.x0 as f64 + o.w as f64 / 2.0) / sf,
                (o.y0 as f64 + o.h as f64 / 2.0) / sf,
                o.w as f64 / sf,
                o.h as f64 / sf,
                o.class_id,
            )
            .expect("positive size")
        })
        .collect();
    SyntheticSample {
        rgb: Tensor::new(Shape::new(1, 3, s, s), rgb).expect("sized"),
        ir: Tensor::new(Shape::new(1, 1, s, s), ir).expect("sized"),
        truth,
        visibility: objects.iter().map(|o| o.vis).collect(),
    }
}

/// `cfg.count` scenes. Each sample has its own random stream, so the
/// result does not depend on how many threads generate it.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    Ok((0..cfg.count).into_par_iter().map(|i| synthetic_sample(cfg, i)).collect())
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?
        .shape();
    let mut data = Vec::with_capacity(first.numel() * parts.len());
    for p in parts {
        if p.shape() != first {
            return Err(Error::ShapeMismatch {
                op: "stack",
                lhs: first,
                rhs: p.shape(),
            });
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(Shape::new(parts.len() * first.n(), first.c(), first.h(), first.w()), data)
}

/// Stacks samples into a batch of images plus their truth sets.
pub fn collate(samples: &[&SyntheticSample]) -> Result<(ModalityPair, Vec<Vec<BBox>>)> {
    let rgb = stack(&samples.iter().map(|s| &s.rgb).collect::<Vec<_>>())?;
    let ir = stack(&samples.iter().map(|s| &s.ir).collect::<Vec<_>>())?;
    let truth = samples.iter().map(|s| s.truth.clone()).collect();
    Ok((ModalityPair { rgb, ir }, truth))
}
