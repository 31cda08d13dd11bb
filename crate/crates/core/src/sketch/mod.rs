//! Vector and raster sketches and the conversions between them.
//!
//! Coordinates are canvas-normalised to `[0, 1]`. Pixel `(row, col)` of an
//! `H×W` canvas corresponds to `(round(y·(H−1)), round(x·(W−1)))`.

mod io;
mod synth;

pub use io::{read_pgm, read_sketch_jsonl, write_pgm, write_sketch_jsonl, SketchRecord};
pub use synth::{
    gen_synthetic_dataset, inject_distractor_noise, noise_scribble, Primitive, SyntheticInstance,
    SynthConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SketchError};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PenState {
    /// Pen touching the paper; the next point continues the stroke.
    Down,
    /// Pen lifted after this point; the next point starts a new stroke.
    Up,
    /// Last point of the drawing.
    End,
}

impl PenState {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            Self::Down => [1.0, 0.0, 0.0],
            Self::Up => [0.0, 1.0, 0.0],
            Self::End => [0.0, 0.0, 1.0],
        }
    }

    pub fn index(self) -> usize {
        match self {
            Self::Down => 0,
            Self::Up => 1,
            Self::End => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => Self::Down,
            1 => Self::Up,
            _ => Self::End,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenPoint {
    pub x: f64,
    pub y: f64,
    pub pen: PenState,
}

impl PenPoint {
    /// The five-element `(x, y, q1, q2, q3)` encoding.
    pub fn five(&self) -> [f64; 5] {
        let q = self.pen.one_hot();
        [self.x, self.y, q[0], q[1], q[2]]
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stroke {
    points: Vec<PenPoint>,
}

impl Stroke {
    pub fn points(&self) -> &[PenPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn coords(&self) -> Vec<[f64; 2]> {
        self.points.iter().map(PenPoint::xy).collect()
    }
}

/// An ordered list of strokes. Pen states are assigned on construction so
/// the stroke-boundary invariants always hold.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct VectorSketch {
    strokes: Vec<Stroke>,
}

impl VectorSketch {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a sketch from point lists. Every stroke needs at least one
    /// point and every coordinate must lie in `[0, 1]`.
    pub fn from_polylines(polylines: Vec<Vec<[f64; 2]>>) -> Result<Self> {
        let k = polylines.len();
        let mut strokes = Vec::with_capacity(k);
        for (si, pl) in polylines.into_iter().enumerate() {
            if pl.is_empty() {
                return Err(SketchError::InvalidSketch(format!("stroke {si} has no points")));
            }
            let n = pl.len();
            let mut points = Vec::with_capacity(n);
            for (pi, [x, y]) in pl.into_iter().enumerate() {
                if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                    return Err(SketchError::InvalidSketch(format!(
                        "stroke {si} point {pi} ({x}, {y}) outside the unit square"
                    )));
                }
                let pen = if pi + 1 < n {
                    PenState::Down
                } else if si + 1 < k {
                    PenState::Up
                } else {
                    PenState::End
                };
                points.push(PenPoint { x, y, pen });
            }
            strokes.push(Stroke { points });
        }
        Ok(Self { strokes })
    }

    /// Like [`from_polylines`](Self::from_polylines) but clamps coordinates
    /// into the unit square and drops empty strokes.
    pub fn from_polylines_clamped(polylines: Vec<Vec<[f64; 2]>>) -> Self {
        let cleaned = polylines
            .into_iter()
            .filter(|p| !p.is_empty())
            .map(|p| p.into_iter().map(|[x, y]| [x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)]).collect())
            .collect();
        Self::from_polylines(cleaned).expect("clamped polylines are valid")
    }

    pub fn strokes(&self) -> &[Stroke] {
        &self.strokes
    }

    pub fn num_strokes(&self) -> usize {
        self.strokes.len()
    }

    pub fn total_points(&self) -> usize {
        self.strokes.iter().map(Stroke::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.strokes.is_empty()
    }

    pub fn polylines(&self) -> Vec<Vec<[f64; 2]>> {
        self.strokes.iter().map(Stroke::coords).collect()
    }

    pub fn points(&self) -> impl Iterator<Item = &PenPoint> {
        self.strokes.iter().flat_map(|s| s.points.iter())
    }

    /// The strokes whose mask bit is set, in original order.
    pub fn select(&self, mask: &[bool]) -> Result<Self> {
        if mask.len() != self.strokes.len() {
            return Err(SketchError::InvalidArgument(format!(
                "mask has {} entries for {} strokes",
                mask.len(),
                self.strokes.len()
            )));
        }
        let kept = self
            .polylines()
            .into_iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| p)
            .collect();
        Self::from_polylines(kept)
    }

    /// Appends a stroke, re-deriving pen states.
    pub fn push_stroke(&self, stroke: Vec<[f64; 2]>) -> Result<Self> {
        let mut p = self.polylines();
        p.push(stroke);
        Self::from_polylines(p)
    }

    /// Removes the last stroke, if any.
    pub fn pop_stroke(&self) -> Self {
        let mut p = self.polylines();
        p.pop();
        Self::from_polylines(p).expect("prefix of a valid sketch")
    }
}

/// Perpendicular distance from `p` to the segment `a`–`b`.
pub fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return ((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2)).sqrt();
    }
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

/// Ramer-Douglas-Peucker simplification of one stroke.
pub fn rdp_simplify(points: &[[f64; 2]], epsilon: f64) -> Vec<[f64; 2]> {
    if points.len() < 3 {
        return points.to_vec();
    }
    let mut keep = vec![false; points.len()];
    keep[0] = true;
    keep[points.len() - 1] = true;
    let mut stack = vec![(0, points.len() - 1)];
    while let Some((lo, hi)) = stack.pop() {
        let mut best = (0.0, 0);
        for i in lo + 1..hi {
            let d = segment_distance(points[i], points[lo], points[hi]);
            if d > best.0 {
                best = (d, i);
            }
        }
        if best.0 > epsilon {
            keep[best.1] = true;
            stack.push((lo, best.1));
            stack.push((best.1, hi));
        }
    }
    points.iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| *p).collect()
}

/// Applies [`rdp_simplify`] to every stroke.
pub fn rdp_sketch(sketch: &VectorSketch, epsilon: f64) -> VectorSketch {
    let p = sketch.polylines().iter().map(|s| rdp_simplify(s, epsilon)).collect();
    VectorSketch::from_polylines(p).expect("simplification keeps valid points")
}

/// `H×W` grid of intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterCanvas {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RasterCanvas {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(SketchError::DimensionMismatch {
                expected: [height, width],
                got: [data.len(), 1],
            });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SketchError::InvalidArgument("intensity outside [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Raises a pixel to at least `v`; out-of-range coordinates are ignored.
    pub fn paint(&mut self, row: i64, col: i64, v: f64) {
        if row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width {
            let i = row as usize * self.width + col as usize;
            self.data[i] = self.data[i].max(v.clamp(0.0, 1.0));
        }
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    /// Maps a normalised coordinate to its pixel.
    pub fn pixel_of(&self, x: f64, y: f64) -> (i64, i64) {
        (
            (y * (self.height - 1) as f64).round() as i64,
            (x * (self.width - 1) as f64).round() as i64,
        )
    }

    /// Block-average downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Self {
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Self::new(h, w);
        let k = (factor * factor) as f64;
        for r in 0..h {
            for c in 0..w {
                let mut s = 0.0;
                for i in 0..factor {
                    for j in 0..factor {
                        s += self.get(r * factor + i, c * factor + j);
                    }
                }
                out.data[r * w + c] = s / k;
            }
        }
        out
    }
}

/// Integer line traversal between two pixels (inclusive).
pub fn line_pixels(r0: i64, c0: i64, r1: i64, c1: i64) -> Vec<(i64, i64)> {
    let (dr, dc) = ((r1 - r0).abs(), -(c1 - c0).abs());
    let (sr, sc) = (if r0 < r1 { 1 } else { -1 }, if c0 < c1 { 1 } else { -1 });
    let (mut r, mut c, mut err) = (r0, c0, dr + dc);
    let mut out = Vec::new();
    loop {
        out.push((r, c));
        if r == r1 && c == c1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dc {
            err += dc;
            r += sr;
        }
        if e2 <= dr {
            err += dr;
            c += sc;
        }
    }
    out
}

fn stamp(canvas: &mut RasterCanvas, r: i64, c: i64, line_width: usize, v: f64) {
    let lw = line_width as i64;
    let lo = -(lw - 1) / 2;
    for dr in lo..lo + lw {
        for dc in lo..lo + lw {
            canvas.paint(r + dr, c + dc, v);
        }
    }
}

/// Draws a polyline onto `canvas` with intensity `v`.
pub fn draw_polyline(canvas: &mut RasterCanvas, points: &[[f64; 2]], line_width: usize, v: f64) {
    let pix: Vec<(i64, i64)> = points.iter().map(|p| canvas.pixel_of(p[0], p[1])).collect();
    if pix.len() == 1 {
        stamp(canvas, pix[0].0, pix[0].1, line_width, v);
    }
    for w in pix.windows(2) {
        for (r, c) in line_pixels(w[0].0, w[0].1, w[1].0, w[1].1) {
            stamp(canvas, r, c, line_width, v);
        }
    }
}

/// Renders a sketch with binary intensity. Segments join consecutive points
/// of the same stroke only.
pub fn rasterize(sketch: &VectorSketch, height: usize, width: usize, line_width: usize) -> Result<RasterCanvas> {
    if height < 8 || width < 8 {
        return Err(SketchError::InvalidArgument(format!(
            "canvas {height}x{width} smaller than 8x8"
        )));
    }
    if line_width == 0 {
        return Err(SketchError::InvalidArgument("line width must be at least 1".into()));
    }
    let mut canvas = RasterCanvas::new(height, width);
    for s in sketch.strokes() {
        draw_polyline(&mut canvas, &s.coords(), line_width, 1.0);
    }
    Ok(canvas)
}

/// The first `⌊t·N/T⌋` points, keeping stroke boundaries.
pub fn partial_prefix(sketch: &VectorSketch, t: usize, total: usize) -> Result<VectorSketch> {
    if total == 0 || t > total {
        return Err(SketchError::InvalidArgument(format!("step {t} of {total}")));
    }
    let n = t * sketch.total_points() / total;
    let mut left = n;
    let mut out = Vec::new();
    for s in sketch.strokes() {
        if left == 0 {
            break;
        }
        let take = left.min(s.len());
        out.push(s.coords()[..take].to_vec());
        left -= take;
    }
    VectorSketch::from_polylines(out)
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetStep {
    pub dx: f64,
    pub dy: f64,
    pub pen: PenState,
}

/// Offset encoding: an absolute origin followed by point-to-point deltas.
/// Each entry's pen state belongs to the point it leads to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Offsets {
    pub origin: [f64; 2],
    pub origin_pen: PenState,
    pub steps: Vec<OffsetStep>,
}

pub fn to_offsets(sketch: &VectorSketch) -> Result<Offsets> {
    let pts: Vec<&PenPoint> = sketch.points().collect();
    let first = pts.first().ok_or(SketchError::EmptySketch)?;
    let steps = pts
        .windows(2)
        .map(|w| OffsetStep {
            dx: w[1].x - w[0].x,
            dy: w[1].y - w[0].y,
            pen: w[1].pen,
        })
        .collect();
    Ok(Offsets {
        origin: first.xy(),
        origin_pen: first.pen,
        steps,
    })
}

pub fn to_absolute(offsets: &Offsets) -> Result<VectorSketch> {
    let mut strokes = vec![vec![offsets.origin]];
    let mut prev_pen = offsets.origin_pen;
    let [mut x, mut y] = offsets.origin;
    for s in &offsets.steps {
        x += s.dx;
        y += s.dy;
        if prev_pen == PenState::Down {
            strokes.last_mut().expect("non-empty").push([x, y]);
        } else {
            strokes.push(vec![[x, y]]);
        }
        prev_pen = s.pen;
    }
    VectorSketch::from_polylines(strokes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pen_states_follow_stroke_boundaries() {
        let s = VectorSketch::from_polylines(vec![vec![[0.1, 0.1], [0.2, 0.2]], vec![[0.5, 0.5]]]).unwrap();
        let pens: Vec<PenState> = s.points().map(|p| p.pen).collect();
        assert_eq!(pens, vec![PenState::Down, PenState::Up, PenState::End]);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(VectorSketch::from_polylines(vec![vec![[1.2, 0.0]]]).is_err());
        assert!(VectorSketch::from_polylines(vec![vec![]]).is_err());
    }

    #[test]
    fn line_pixels_are_connected() {
        let px = line_pixels(0, 0, 3, 7);
        assert_eq!(px.first(), Some(&(0, 0)));
        assert_eq!(px.last(), Some(&(3, 7)));
        for w in px.windows(2) {
            assert!((w[0].0 - w[1].0).abs() <= 1 && (w[0].1 - w[1].1).abs() <= 1);
        }
    }
}
