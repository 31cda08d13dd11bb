use autodiff::{Linear, Module, Param, Tape, Tensor, Var};
use rand::Rng;

/// Gated recurrent unit with fused gate weights (update, reset, candidate).
#[derive(Debug, Clone)]
pub struct GruCell {
    pub wx: Linear,
    pub wh: Param,
    hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let lim = (1.0 / hidden as f64).sqrt();
        Self {
            wx: Linear::new(&format!("{name}.wx"), input, 3 * hidden, rng),
            wh: Param::new(format!("{name}.wh"), Tensor::uniform(hidden, 3 * hidden, -lim, lim, rng)),
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input(&self) -> usize {
        self.wx.fan_in()
    }

    /// One step over a batch of rows.
    pub fn step<'t>(&self, tape: &'t Tape, x: Var<'t>, h: Var<'t>) -> Var<'t> {
        let n = self.hidden;
        let gx = self.wx.forward(tape, x);
        let gh = h.matmul(tape.param(&self.wh));
        let z = gx.slice_cols(0, n).add(gh.slice_cols(0, n)).sigmoid();
        let r = gx.slice_cols(n, 2 * n).add(gh.slice_cols(n, 2 * n)).sigmoid();
        let cand = gx.slice_cols(2 * n, 3 * n).add(r.mul(gh.slice_cols(2 * n, 3 * n))).tanh();
        // h' = cand + z ⊙ (h − cand)
        cand.add(z.mul(h.sub(cand)))
    }

    /// Runs over the rows of `xs` from a zero state, returning every hidden
    /// state stacked as rows.
    pub fn run<'t>(&self, tape: &'t Tape, xs: Var<'t>) -> Vec<Var<'t>> {
        let mut h = tape.constant(Tensor::zeros(1, self.hidden));
        let mut out = Vec::with_capacity(xs.shape()[0]);
        for t in 0..xs.shape()[0] {
            h = self.step(tape, xs.row(t), h);
            out.push(h);
        }
        out
    }
}

impl Module for GruCell {
    fn params(&self) -> Vec<&Param> {
        vec![&self.wx.w, &self.wx.b, &self.wh]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.wx.w, &mut self.wx.b, &mut self.wh]
    }
}
