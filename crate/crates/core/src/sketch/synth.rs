//! Synthetic paired photo/sketch data.
//!
//! Each class owns a template of 2–4 primitive outlines whose geometry is an
//! affine function of a small per-instance parameter vector. The photo is a
//! filled, thick render of the primitives; the sketch is their jittered
//! outlines. Optional scribbles are inserted at random stroke positions.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{draw_polyline, RasterCanvas, VectorSketch};
use crate::error::{Result, SketchError};
use crate::rng::{stream, Rng as StreamRng};

const MARGIN: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_classes: usize,
    pub n_instances_per_class: usize,
    pub noise_strokes_per_sketch: usize,
    pub canvas: usize,
    /// Standard deviation of per-point sketch jitter.
    pub jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_classes: 8,
            n_instances_per_class: 8,
            noise_strokes_per_sketch: 0,
            canvas: 32,
            jitter: 0.006,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticInstance {
    pub instance_id: u64,
    pub class_id: usize,
    pub photo: RasterCanvas,
    pub sketch: VectorSketch,
    pub noise_mask: Vec<bool>,
    /// The latent shape parameters shared by photo and sketch.
    pub params: Vec<f64>,
}

impl SyntheticInstance {
    /// The sketch with every injected stroke removed.
    pub fn clean_sketch(&self) -> VectorSketch {
        let keep: Vec<bool> = self.noise_mask.iter().map(|n| !n).collect();
        self.sketch.select(&keep).expect("mask matches strokes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    EllipseArc {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        rot: f64,
        start: f64,
        sweep: f64,
    },
    Polyline(Vec<[f64; 2]>),
    ZigZag {
        from: [f64; 2],
        to: [f64; 2],
        teeth: usize,
        amp: f64,
    },
}

impl Primitive {
    fn closed(&self) -> bool {
        match self {
            Self::EllipseArc { sweep, .. } => *sweep >= 2.0 * PI - 1e-9,
            Self::Polyline(v) => v.len() >= 3,
            Self::ZigZag { .. } => false,
        }
    }

    /// Outline points in unit coordinates, before the canvas margin.
    pub fn outline(&self) -> Vec<[f64; 2]> {
        match self {
            Self::EllipseArc {
                cx,
                cy,
                rx,
                ry,
                rot,
                start,
                sweep,
            } => {
                let n = 16;
                (0..=n)
                    .map(|i| {
                        let a = start + sweep * i as f64 / n as f64;
                        let (x, y) = (rx * a.cos(), ry * a.sin());
                        [cx + x * rot.cos() - y * rot.sin(), cy + x * rot.sin() + y * rot.cos()]
                    })
                    .collect()
            }
            Self::Polyline(v) => subdivide(v, 0.08),
            Self::ZigZag { from, to, teeth, amp } => {
                let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
                let len = (dx * dx + dy * dy).sqrt().max(1e-9);
                let (nx, ny) = (-dy / len, dx / len);
                let m = 2 * teeth;
                (0..=m)
                    .map(|i| {
                        let t = i as f64 / m as f64;
                        let s = if i % 2 == 1 { *amp } else { 0.0 };
                        [from[0] + t * dx + s * nx, from[1] + t * dy + s * ny]
                    })
                    .collect()
            }
        }
    }
}

fn subdivide(v: &[[f64; 2]], max_len: f64) -> Vec<[f64; 2]> {
    let mut out = vec![v[0]];
    for w in v.windows(2) {
        let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        let pieces = (d / max_len).ceil().max(1.0) as usize;
        for k in 1..=pieces {
            let t = k as f64 / pieces as f64;
            out.push([w[0][0] + t * (w[1][0] - w[0][0]), w[0][1] + t * (w[1][1] - w[0][1])]);
        }
    }
    out
}

fn to_canvas(p: [f64; 2]) -> [f64; 2] {
    [
        (MARGIN + (1.0 - 2.0 * MARGIN) * p[0]).clamp(0.0, 1.0),
        (MARGIN + (1.0 - 2.0 * MARGIN) * p[1]).clamp(0.0, 1.0),
    ]
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Ellipse,
    Polyline,
    ZigZag(usize),
}

/// Geometry numbers of one primitive plus how they respond to instance
/// parameters.
#[derive(Clone, Debug)]
struct PrimitiveTemplate {
    kind: Kind,
    base: Vec<f64>,
    /// `base.len() × n_params` sensitivities.
    sens: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct ClassTemplate {
    n_params: usize,
    prims: Vec<PrimitiveTemplate>,
}

fn sample_template(rng: &mut StreamRng) -> ClassTemplate {
    let n_prims = rng.random_range(2..=4);
    let n_params = rng.random_range(4..=8);
    let prims = (0..n_prims)
        .map(|_| {
            let (kind, base, scales): (Kind, Vec<f64>, Vec<f64>) = match rng.random_range(0..3) {
                0 => {
                    let full = rng.random_bool(0.5);
                    let sweep = if full { 2.0 * PI } else { rng.random_range(PI..1.7 * PI) };
                    (
                        Kind::Ellipse,
                        vec![
                            rng.random_range(0.3..0.7),
                            rng.random_range(0.3..0.7),
                            rng.random_range(0.1..0.3),
                            rng.random_range(0.1..0.3),
                            rng.random_range(0.0..PI),
                            rng.random_range(0.0..2.0 * PI),
                            sweep,
                        ],
                        vec![0.05, 0.05, 0.035, 0.035, 0.25, 0.3, if full { 0.0 } else { 0.3 }],
                    )
                }
                1 => {
                    let n = rng.random_range(3..=4);
                    let base: Vec<f64> = (0..2 * n).map(|_| rng.random_range(0.1..0.9)).collect();
                    (Kind::Polyline, base, vec![0.06; 2 * n])
                }
                _ => {
                    let teeth = rng.random_range(3..=5);
                    (
                        Kind::ZigZag(teeth),
                        vec![
                            rng.random_range(0.1..0.9),
                            rng.random_range(0.1..0.9),
                            rng.random_range(0.1..0.9),
                            rng.random_range(0.1..0.9),
                            rng.random_range(0.04..0.08),
                        ],
                        vec![0.06, 0.06, 0.06, 0.06, 0.02],
                    )
                }
            };
            let sens = scales
                .iter()
                .map(|&s| {
                    (0..n_params)
                        .map(|_| if s == 0.0 { 0.0 } else { Normal::new(0.0, s).unwrap().sample(rng) })
                        .collect()
                })
                .collect();
            PrimitiveTemplate { kind, base, sens }
        })
        .collect();
    ClassTemplate { n_params, prims }
}

impl ClassTemplate {
    fn decode(&self, params: &[f64]) -> Vec<Primitive> {
        self.prims
            .iter()
            .map(|p| {
                let g: Vec<f64> = p
                    .base
                    .iter()
                    .zip(&p.sens)
                    .map(|(b, row)| b + row.iter().zip(params).map(|(s, q)| s * q).sum::<f64>())
                    .collect();
                let pos = |v: f64| v.clamp(0.0, 1.0);
                match p.kind {
                    Kind::Ellipse => Primitive::EllipseArc {
                        cx: pos(g[0]),
                        cy: pos(g[1]),
                        rx: g[2].clamp(0.05, 0.45),
                        ry: g[3].clamp(0.05, 0.45),
                        rot: g[4],
                        start: g[5],
                        sweep: g[6].min(2.0 * PI),
                    },
                    Kind::Polyline => {
                        Primitive::Polyline(g.chunks(2).map(|c| [pos(c[0]), pos(c[1])]).collect())
                    }
                    Kind::ZigZag(teeth) => Primitive::ZigZag {
                        from: [pos(g[0]), pos(g[1])],
                        to: [pos(g[2]), pos(g[3])],
                        teeth,
                        amp: g[4].clamp(0.01, 0.1),
                    },
                }
            })
            .collect()
    }
}

fn extent(points: &[[f64; 2]]) -> (f64, f64) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    (x1 - x0, y1 - y0)
}

fn degenerate(prims: &[Primitive]) -> bool {
    let all: Vec<[f64; 2]> = prims.iter().flat_map(Primitive::outline).collect();
    let (w, h) = extent(&all);
    if w < 0.1 || h < 0.1 {
        return true;
    }
    prims.iter().any(|p| {
        let (w, h) = extent(&p.outline());
        w.max(h) < 0.05 || (p.closed() && w.min(h) < 0.02)
    })
}

fn point_in_polygon(x: f64, y: f64, poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi, xj, yj) = (poly[i][0], poly[i][1], poly[j][0], poly[j][1]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Filled interiors at half intensity, thick outlines at full intensity.
pub fn render_photo(prims: &[Primitive], size: usize) -> RasterCanvas {
    let mut canvas = RasterCanvas::new(size, size);
    for p in prims {
        let outline: Vec<[f64; 2]> = p.outline().into_iter().map(to_canvas).collect();
        if p.closed() {
            for r in 0..size {
                for c in 0..size {
                    let (x, y) = (c as f64 / (size - 1) as f64, r as f64 / (size - 1) as f64);
                    if point_in_polygon(x, y, &outline) {
                        canvas.paint(r as i64, c as i64, 0.5);
                    }
                }
            }
        }
        let mut ring = outline.clone();
        if p.closed() {
            ring.push(outline[0]);
        }
        draw_polyline(&mut canvas, &ring, 2, 1.0);
    }
    canvas
}

/// A random 3–6 point polyline anywhere on the canvas.
pub fn noise_scribble<R: Rng + ?Sized>(rng: &mut R) -> Vec<[f64; 2]> {
    let n = rng.random_range(3..=6);
    let mut p = [rng.random_range(MARGIN..1.0 - MARGIN), rng.random_range(MARGIN..1.0 - MARGIN)];
    let mut out = vec![p];
    for _ in 1..n {
        let a = rng.random_range(0.0..2.0 * PI);
        let l = rng.random_range(0.05..0.2);
        p = [(p[0] + l * a.cos()).clamp(0.0, 1.0), (p[1] + l * a.sin()).clamp(0.0, 1.0)];
        out.push(p);
    }
    out
}

fn insert_noise<R: Rng + ?Sized>(
    rng: &mut R,
    strokes: &mut Vec<Vec<[f64; 2]>>,
    mask: &mut Vec<bool>,
    noise: Vec<[f64; 2]>,
) {
    let at = rng.random_range(0..=strokes.len());
    strokes.insert(at, noise);
    mask.insert(at, true);
}

fn jittered<R: Rng + ?Sized>(rng: &mut R, outline: &[[f64; 2]], jitter: f64) -> Vec<[f64; 2]> {
    let n = Normal::new(0.0, jitter.max(1e-12)).unwrap();
    let shift = [n.sample(rng) * 1.5, n.sample(rng) * 1.5];
    outline
        .iter()
        .map(|&p| {
            let [x, y] = to_canvas(p);
            [
                (x + shift[0] + n.sample(rng)).clamp(0.0, 1.0),
                (y + shift[1] + n.sample(rng)).clamp(0.0, 1.0),
            ]
        })
        .collect()
}

pub fn gen_synthetic_dataset(cfg: &SynthConfig) -> Result<Vec<SyntheticInstance>> {
    if cfg.n_classes == 0 || cfg.n_instances_per_class == 0 {
        return Err(SketchError::InvalidArgument("counts must be at least 1".into()));
    }
    if cfg.canvas < 8 {
        return Err(SketchError::InvalidArgument("canvas must be at least 8 pixels".into()));
    }
    let mut out = Vec::with_capacity(cfg.n_classes * cfg.n_instances_per_class);
    for class in 0..cfg.n_classes {
        let mut trng = stream(cfg.seed, &[1, class as u64]);
        let template = loop {
            let t = sample_template(&mut trng);
            if !degenerate(&t.decode(&vec![0.0; t.n_params])) {
                break t;
            }
        };
        for i in 0..cfg.n_instances_per_class {
            let mut rng = stream(cfg.seed, &[2, class as u64, i as u64]);
            let mut attempts = 0;
            let (params, prims) = loop {
                let p: Vec<f64> = (0..template.n_params).map(|_| rng.random_range(-1.0..1.0)).collect();
                let prims = template.decode(&p);
                if !degenerate(&prims) {
                    break (p, prims);
                }
                attempts += 1;
                if attempts > 1000 {
                    return Err(SketchError::InvalidArgument(format!(
                        "class {class}: could not sample a non-degenerate instance"
                    )));
                }
            };
            let photo = render_photo(&prims, cfg.canvas);
            let mut strokes: Vec<Vec<[f64; 2]>> =
                prims.iter().map(|p| jittered(&mut rng, &p.outline(), cfg.jitter)).collect();
            let mut mask = vec![false; strokes.len()];
            for _ in 0..cfg.noise_strokes_per_sketch {
                let s = noise_scribble(&mut rng);
                insert_noise(&mut rng, &mut strokes, &mut mask, s);
            }
            out.push(SyntheticInstance {
                instance_id: (class * cfg.n_instances_per_class + i) as u64,
                class_id: class,
                photo,
                sketch: VectorSketch::from_polylines(strokes)?,
                noise_mask: mask,
                params,
            });
        }
    }
    Ok(out)
}

/// Copies `n` strokes from `distractor`'s clean sketch into `target` as
/// flagged noise, so the noise overlaps the distractor's photo.
pub fn inject_distractor_noise<R: Rng + ?Sized>(
    target: &SyntheticInstance,
    distractor: &SyntheticInstance,
    n: usize,
    rng: &mut R,
) -> SyntheticInstance {
    let mut strokes = target.sketch.polylines();
    let mut mask = target.noise_mask.clone();
    let mut pool = distractor.clean_sketch().polylines();
    pool.shuffle(rng);
    for s in pool.into_iter().cycle().take(n) {
        insert_noise(rng, &mut strokes, &mut mask, s);
    }
    SyntheticInstance {
        sketch: VectorSketch::from_polylines(strokes).expect("valid strokes"),
        noise_mask: mask,
        ..target.clone()
    }
}
