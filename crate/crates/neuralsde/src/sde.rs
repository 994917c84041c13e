//! Two-factor neural SDE and its Euler–Maruyama simulation.
//!
//! The state is the log spot `Y = log S` and an unconstrained second factor `V`:
//!
//! ```text
//! Y_{n+1} = Y_n + (r - d - sigma^2/2) dt_n + sigma dW1_n
//! V_{n+1} = V_n + bV dt_n            + sigmaV dW2_n
//! dW2 = rho dW1 + sqrt(1 - rho^2) dU
//! ```
//!
//! with `sigma = sigma(t/T, S, V)` and `sigmaV = sigmaV(t/T, V)` softplus networks
//! (hence strictly positive), `bV = bV(t/T, V)` unconstrained, and `dW1, dU`
//! independent `N(0, dt_n)` increments. Simulating in log coordinates keeps the
//! spot positive without flooring; `V` is deliberately not floored, negative
//! excursions are representable and left to the model to rule out.
//!
//! Under the historical measure the diffusions are unchanged and the drifts pick
//! up market-price-of-risk terms from the two-output network
//! `zeta = (zeta1, zeta2)(t/T, Y, V)`:
//!
//! ```text
//! bY_P = r - d - sigma^2/2 + sigma^2 zeta1 + rho sigma sigmaV zeta2
//! bV_P = bV + rho sigma sigmaV zeta1 + sigmaV^2 zeta2
//! ```
//!
//! so `zeta == 0` recovers the pricing-measure dynamics exactly (bit for bit when
//! the same increments are reused).
//!
//! Every simulation exists twice: once on the reverse-mode tape
//! ([`NeuralSdeModel::simulate_graph`]) for gradients, and once as plain
//! arithmetic ([`NeuralSdeModel::simulate`]). The two are kept bitwise identical
//! by mirroring the tape's operation order in the plain code, which makes
//! finite-difference checks and cheap non-differentiated passes exact stand-ins
//! for the tape values.

use crate::diffkit::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::nets::{Mlp, MlpHandle, OutputActivation};
use crate::par;
use crate::rng::SeedTree;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Measure a path batch was generated under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    RiskNeutral,
    Physical,
}

impl Measure {
    pub fn tag(&self) -> &'static str {
        match self {
            Measure::RiskNeutral => "Q",
            Measure::Physical => "P",
        }
    }
}

/// Strictly increasing simulation times `t_0 < t_1 < ... < t_N` in years.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid of `n_steps` steps over `[0, horizon]`.
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        if horizon <= 0.0 {
            return Err(Error::NonPositive {
                what: "grid horizon".to_string(),
                value: horizon,
            });
        }
        if n_steps == 0 {
            return Err(Error::Config("grid needs at least one step".to_string()));
        }
        let times = (0..=n_steps)
            .map(|i| horizon * (i as f64) / (n_steps as f64))
            .collect();
        Ok(TimeGrid { times })
    }

    /// Uniform grid adjusted so every knot (typically an option maturity) lands
    /// exactly on a grid point: knots within a quarter step of a uniform point
    /// replace it, others are inserted as extra points.
    pub fn with_knots(horizon: f64, n_steps: usize, knots: &[f64]) -> Result<Self> {
        let base = Self::uniform(horizon, n_steps)?;
        let mut times = base.times;
        let dt = horizon / n_steps as f64;
        let snap = 0.25 * dt;
        for &k in knots {
            if !(k > 0.0 && k <= horizon + 1e-12) {
                return Err(Error::Config(format!(
                    "knot {k} outside the grid span (0, {horizon}]"
                )));
            }
            let idx = ((k / dt).round() as usize).min(n_steps);
            if (times[idx] - k).abs() <= snap {
                times[idx] = k;
            } else {
                match times.binary_search_by(|t| t.partial_cmp(&k).expect("finite times")) {
                    Ok(_) => {}
                    Err(pos) => times.insert(pos, k),
                }
            }
        }
        Self::from_times(times)
    }

    /// Wraps an explicit list of times, which must be strictly increasing and
    /// start at a non-negative time.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Empty {
                what: "time grid".to_string(),
            });
        }
        if times[0] < 0.0 || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "grid times must be non-negative and strictly increasing, got {times:?}"
            )));
        }
        Ok(TimeGrid { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn dt(&self, n: usize) -> f64 {
        self.times[n + 1] - self.times[n]
    }

    /// Index of the grid point equal to `t` (within 1e-9); otherwise reports the
    /// nearest grid time so callers can rebuild the grid with the right knots.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &x) in self.times.iter().enumerate() {
            let d = (x - t).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        if best_d <= 1e-9 {
            Ok(best)
        } else {
            Err(Error::MaturityOffGrid {
                t,
                nearest: self.times[best],
            })
        }
    }
}

/// Brownian increments for a batch of paths, stored step-major:
/// `dw1[n * n_paths + i]` is path `i`'s increment over step `n`, distributed
/// `N(0, dt_n)`. `du` may be empty when a joint sampler supplies the second
/// factor directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Increments {
    pub n_steps: usize,
    pub n_paths: usize,
    pub dw1: Vec<f64>,
    pub du: Vec<f64>,
}

impl Increments {
    /// Draws fresh increments; each path owns the RNG stream
    /// `("paths", [epoch, path])`, so a batch is reproducible path by path
    /// independently of scheduling or batch size.
    pub fn draw(grid: &TimeGrid, n_paths: usize, tree: &SeedTree, epoch: u64) -> Self {
        let n = grid.n_steps();
        let sqrt_dts: Vec<f64> = (0..n).map(|k| grid.dt(k).sqrt()).collect();
        let per_path = par::map_collect(n_paths, |i| {
            let mut rng = tree.stream("paths", &[epoch, i as u64]);
            let mut w = Vec::with_capacity(n);
            let mut u = Vec::with_capacity(n);
            for &s in &sqrt_dts {
                let z1: f64 = StandardNormal.sample(&mut rng);
                let z2: f64 = StandardNormal.sample(&mut rng);
                w.push(s * z1);
                u.push(s * z2);
            }
            (w, u)
        });
        let mut dw1 = vec![0.0; n * n_paths];
        let mut du = vec![0.0; n * n_paths];
        for (i, (w, u)) in per_path.iter().enumerate() {
            for k in 0..n {
                dw1[k * n_paths + i] = w[k];
                du[k * n_paths + i] = u[k];
            }
        }
        Increments {
            n_steps: n,
            n_paths,
            dw1,
            du,
        }
    }

    pub fn from_parts(n_steps: usize, n_paths: usize, dw1: Vec<f64>, du: Vec<f64>) -> Result<Self> {
        if dw1.len() != n_steps * n_paths || !(du.is_empty() || du.len() == dw1.len()) {
            return Err(Error::InvalidShape {
                op: "Increments::from_parts",
                shape: vec![n_steps, n_paths],
                detail: format!("{} dW1 and {} dU values", dw1.len(), du.len()),
            });
        }
        Ok(Increments {
            n_steps,
            n_paths,
            dw1,
            du,
        })
    }

    pub fn dw1_row(&self, n: usize) -> &[f64] {
        &self.dw1[n * self.n_paths..(n + 1) * self.n_paths]
    }

    pub fn du_row(&self, n: usize) -> &[f64] {
        &self.du[n * self.n_paths..(n + 1) * self.n_paths]
    }

    /// Correlated second-factor increments `rho dW1 + sqrt(1 - rho^2) dU`.
    pub fn dw2(&self, rho: f64) -> Result<Vec<f64>> {
        if !(-1.0..=1.0).contains(&rho) {
            return Err(Error::DegenerateCorrelation { rho });
        }
        if self.du.is_empty() {
            return Err(Error::Empty {
                what: "dU increments".to_string(),
            });
        }
        let root = (1.0 - rho * rho).sqrt();
        let mut out = vec![0.0; self.dw1.len()];
        par::fill(&mut out, |i| rho * self.dw1[i] + root * self.du[i]);
        Ok(out)
    }
}

/// Simulated paths, step-major: `y[n * n_paths + i]` is the log spot of path `i`
/// at grid time `n`.
#[derive(Debug, Clone)]
pub struct PathBatch {
    pub measure: Measure,
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub dw1: Vec<f64>,
    pub du: Vec<f64>,
}

impl PathBatch {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn y_at(&self, n: usize) -> &[f64] {
        &self.y[n * self.n_paths..(n + 1) * self.n_paths]
    }

    pub fn v_at(&self, n: usize) -> &[f64] {
        &self.v[n * self.n_paths..(n + 1) * self.n_paths]
    }

    /// Spot levels `exp(Y)` at grid time `n`.
    pub fn spot_at(&self, n: usize) -> Vec<f64> {
        self.y_at(n).iter().map(|y| y.exp()).collect()
    }

    /// Writes `step,time,path,S,V` rows, grouped by path.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "step,time,path,S,V")?;
        for p in 0..self.n_paths {
            for n in 0..self.times.len() {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    n,
                    self.times[n],
                    p,
                    self.y[n * self.n_paths + p].exp(),
                    self.v[n * self.n_paths + p]
                )?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// The three coefficient networks for one maturity segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeNets {
    pub sigma: Mlp,
    pub bv: Mlp,
    pub sigmav: Mlp,
}

impl SdeNets {
    /// Builds zero-initialized coefficient networks with the given hidden widths:
    /// `sigma(t, S, V)` and `sigmaV(t, V)` softplus, `bV(t, V)` unconstrained.
    pub fn new(hidden: &[usize]) -> Result<Self> {
        Ok(SdeNets {
            sigma: Mlp::new(&widths(3, hidden, 1), OutputActivation::Softplus)?,
            bv: Mlp::new(&widths(2, hidden, 1), OutputActivation::Identity)?,
            sigmav: Mlp::new(&widths(2, hidden, 1), OutputActivation::Softplus)?,
        })
    }

    pub fn init_glorot(&mut self, gain: f64, rng: &mut impl Rng) {
        self.sigma.init_glorot(gain, rng);
        self.bv.init_glorot(gain, rng);
        self.sigmav.init_glorot(gain, rng);
    }

    pub fn param_count(&self) -> usize {
        self.sigma.param_count() + self.bv.param_count() + self.sigmav.param_count()
    }
}

/// Builds a market-price-of-risk network `(zeta1, zeta2)(t, Y, V)` with the given
/// hidden widths.
pub fn zeta_net(hidden: &[usize]) -> Result<Mlp> {
    Mlp::new(&widths(3, hidden, 2), OutputActivation::Identity)
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

/// Spot/factor correlation, either a fixed value in `[-1, 1]` or a free
/// parameter mapped through tanh so it can be calibrated without constraints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rho {
    Fixed(f64),
    Trainable(f64),
}

impl Rho {
    pub fn value(&self) -> f64 {
        match self {
            Rho::Fixed(r) => *r,
            Rho::Trainable(raw) => raw.tanh(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Rho::Trainable(_))
    }
}

/// The calibrated market model: per-maturity-segment coefficient networks, an
/// optional market-price-of-risk network, the correlation, and the short
/// rate/dividend yield. Segment `k` governs times in `[seg_ends[k-1], seg_ends[k])`
/// and the last segment end is the model horizon used to normalize network time
/// inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralSdeModel {
    pub segments: Vec<SdeNets>,
    pub seg_ends: Vec<f64>,
    pub zeta: Option<Mlp>,
    pub rho: Rho,
    pub r: f64,
    pub d: f64,
}

/// Tape bindings for every model parameter.
#[derive(Debug, Clone)]
pub struct ModelHandles {
    pub segments: Vec<SegmentHandles>,
    pub zeta: Option<MlpHandle>,
    pub rho_raw: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct SegmentHandles {
    pub sigma: MlpHandle,
    pub bv: MlpHandle,
    pub sigmav: MlpHandle,
}

/// Which parameter groups receive gradients when the model is bound to a tape.
#[derive(Debug, Clone)]
pub struct BindSpec {
    pub segment_trainable: Vec<bool>,
    pub zeta_trainable: bool,
    pub rho_trainable: bool,
}

impl BindSpec {
    /// Everything the model can train: all segments, zeta when present, rho when
    /// it is the trainable variant.
    pub fn all_trainable(model: &NeuralSdeModel) -> Self {
        BindSpec {
            segment_trainable: vec![true; model.segments.len()],
            zeta_trainable: model.zeta.is_some(),
            rho_trainable: model.rho.is_trainable(),
        }
    }

    pub fn frozen(model: &NeuralSdeModel) -> Self {
        BindSpec {
            segment_trainable: vec![false; model.segments.len()],
            zeta_trainable: false,
            rho_trainable: false,
        }
    }

    /// Stagewise calibration: only segment `k` is trainable.
    pub fn stage(model: &NeuralSdeModel, k: usize) -> Self {
        let mut segment_trainable = vec![false; model.segments.len()];
        if let Some(flag) = segment_trainable.get_mut(k) {
            *flag = true;
        }
        BindSpec {
            segment_trainable,
            zeta_trainable: false,
            rho_trainable: false,
        }
    }
}

/// Per-time coefficient nodes produced by [`NeuralSdeModel::coeff_nodes`]; drifts
/// are per unit time (not yet scaled by the step size).
#[derive(Debug, Clone, Copy)]
pub struct CoeffNodes {
    pub sigma: NodeId,
    pub sigmav: NodeId,
    pub drift_y: NodeId,
    pub drift_v: NodeId,
    pub spot: NodeId,
}

/// Plain-arithmetic twin of [`CoeffNodes`].
#[derive(Debug, Clone)]
pub struct CoeffRows {
    pub sigma: Vec<f64>,
    pub sigmav: Vec<f64>,
    pub drift_y: Vec<f64>,
    pub drift_v: Vec<f64>,
}

/// Per-step state nodes of a simulation tape; `y`, `v` and `s = exp(y)` each hold
/// one `[n_paths]` node per grid time.
#[derive(Debug, Clone)]
pub struct SimTape {
    pub y: Vec<NodeId>,
    pub v: Vec<NodeId>,
    pub s: Vec<NodeId>,
}

impl NeuralSdeModel {
    pub fn new(
        segments: Vec<SdeNets>,
        seg_ends: Vec<f64>,
        zeta: Option<Mlp>,
        rho: Rho,
        r: f64,
        d: f64,
    ) -> Result<Self> {
        let model = NeuralSdeModel {
            segments,
            seg_ends,
            zeta,
            rho,
            r,
            d,
        };
        model.validate()?;
        Ok(model)
    }

    /// Single-segment model covering `[0, horizon]`.
    pub fn single_segment(
        nets: SdeNets,
        horizon: f64,
        zeta: Option<Mlp>,
        rho: Rho,
        r: f64,
        d: f64,
    ) -> Result<Self> {
        Self::new(vec![nets], vec![horizon], zeta, rho, r, d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Empty {
                what: "model segments".to_string(),
            });
        }
        if self.seg_ends.len() != self.segments.len() {
            return Err(Error::Config(format!(
                "{} segments but {} segment ends",
                self.segments.len(),
                self.seg_ends.len()
            )));
        }
        if self.seg_ends[0] <= 0.0 || self.seg_ends.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "segment ends must be positive and strictly increasing, got {:?}",
                self.seg_ends
            )));
        }
        for (k, seg) in self.segments.iter().enumerate() {
            check_net("sigma", k, &seg.sigma, 3, 1, OutputActivation::Softplus)?;
            check_net("bV", k, &seg.bv, 2, 1, OutputActivation::Identity)?;
            check_net("sigmaV", k, &seg.sigmav, 2, 1, OutputActivation::Softplus)?;
        }
        if let Some(zeta) = &self.zeta {
            check_net("zeta", 0, zeta, 3, 2, OutputActivation::Identity)?;
        }
        if let Rho::Fixed(r) = self.rho {
            if !(-1.0..=1.0).contains(&r) {
                return Err(Error::DegenerateCorrelation { rho: r });
            }
        }
        if !self.r.is_finite() || !self.d.is_finite() {
            return Err(Error::NotFinite {
                context: "model rates".to_string(),
            });
        }
        Ok(())
    }

    /// Model horizon = the last segment end; network time inputs are `t / horizon`.
    pub fn horizon(&self) -> f64 {
        *self.seg_ends.last().unwrap()
    }

    /// Segment whose half-open time span `[seg_ends[k-1], seg_ends[k])` contains `t`.
    pub fn segment_of(&self, t: f64) -> usize {
        self.seg_ends
            .iter()
            .position(|&e| t < e)
            .unwrap_or(self.seg_ends.len() - 1)
    }

    /// Draws fresh parameters for every network from per-component seed streams.
    pub fn init_glorot(&mut self, gain: f64, tree: &SeedTree) {
        for (k, seg) in self.segments.iter_mut().enumerate() {
            seg.sigma
                .init_glorot(gain, &mut tree.stream("init-sigma", &[k as u64]));
            seg.bv
                .init_glorot(gain, &mut tree.stream("init-bv", &[k as u64]));
            seg.sigmav
                .init_glorot(gain, &mut tree.stream("init-sigmav", &[k as u64]));
        }
        if let Some(zeta) = &mut self.zeta {
            zeta.init_glorot(gain, &mut tree.stream("init-zeta", &[]));
        }
    }

    pub fn param_count(&self) -> usize {
        let nets: usize = self.segments.iter().map(SdeNets::param_count).sum();
        let zeta = self.zeta.as_ref().map_or(0, Mlp::param_count);
        nets + zeta + usize::from(self.rho.is_trainable())
    }

    /// Flattens all calibrated parameters: per segment `sigma, bV, sigmaV`
    /// (each layer's weights then biases), then `zeta`, then the raw correlation
    /// parameter when trainable.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for seg in &self.segments {
            out.extend(seg.sigma.flat_params());
            out.extend(seg.bv.flat_params());
            out.extend(seg.sigmav.flat_params());
        }
        if let Some(zeta) = &self.zeta {
            out.extend(zeta.flat_params());
        }
        if let Rho::Trainable(raw) = self.rho {
            out.push(raw);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::InvalidShape {
                op: "NeuralSdeModel::set_flat_params",
                shape: vec![self.param_count()],
                detail: format!("{} values", flat.len()),
            });
        }
        let mut offset = 0;
        for seg in &mut self.segments {
            for net in [&mut seg.sigma, &mut seg.bv, &mut seg.sigmav] {
                let n = net.param_count();
                net.set_flat_params(&flat[offset..offset + n])?;
                offset += n;
            }
        }
        if let Some(zeta) = &mut self.zeta {
            let n = zeta.param_count();
            zeta.set_flat_params(&flat[offset..offset + n])?;
            offset += n;
        }
        if let Rho::Trainable(raw) = &mut self.rho {
            *raw = flat[offset];
        }
        Ok(())
    }

    /// Per-parameter prior scales in flat order; `override_sigma` replaces the
    /// layer-wise Glorot defaults everywhere, and the raw correlation always gets
    /// a unit prior.
    pub fn prior_sigmas(&self, gain: f64, override_sigma: Option<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for seg in &self.segments {
            out.extend(seg.sigma.prior_sigmas(gain, override_sigma));
            out.extend(seg.bv.prior_sigmas(gain, override_sigma));
            out.extend(seg.sigmav.prior_sigmas(gain, override_sigma));
        }
        if let Some(zeta) = &self.zeta {
            out.extend(zeta.prior_sigmas(gain, override_sigma));
        }
        if self.rho.is_trainable() {
            out.push(override_sigma.unwrap_or(1.0));
        }
        out
    }

    /// Binds every parameter to the tape; gradient flow follows `spec`.
    pub fn bind(&self, g: &mut Graph, spec: &BindSpec) -> Result<ModelHandles> {
        if spec.segment_trainable.len() != self.segments.len() {
            return Err(Error::Config(format!(
                "bind spec covers {} segments, model has {}",
                spec.segment_trainable.len(),
                self.segments.len()
            )));
        }
        let segments = self
            .segments
            .iter()
            .zip(&spec.segment_trainable)
            .map(|(seg, &train)| SegmentHandles {
                sigma: seg.sigma.bind(g, train),
                bv: seg.bv.bind(g, train),
                sigmav: seg.sigmav.bind(g, train),
            })
            .collect();
        let zeta = self
            .zeta
            .as_ref()
            .map(|z| z.bind(g, spec.zeta_trainable));
        let rho_raw = match self.rho {
            Rho::Trainable(raw) => {
                let t = Tensor::from_vec(&[1], vec![raw])?;
                Some(g.leaf_as(&t, spec.rho_trainable))
            }
            Rho::Fixed(_) => None,
        };
        Ok(ModelHandles {
            segments,
            zeta,
            rho_raw,
        })
    }

    /// Trainability of each flat parameter under `spec`, aligned with
    /// [`NeuralSdeModel::flat_params`].
    pub fn trainable_mask(&self, spec: &BindSpec) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.param_count());
        for (seg, &train) in self.segments.iter().zip(&spec.segment_trainable) {
            out.extend(std::iter::repeat(train).take(seg.param_count()));
        }
        if let Some(zeta) = &self.zeta {
            out.extend(std::iter::repeat(spec.zeta_trainable).take(zeta.param_count()));
        }
        if self.rho.is_trainable() {
            out.push(spec.rho_trainable);
        }
        out
    }

    /// Tape gradients for all flat parameters; unbound or gradient-free leaves
    /// contribute zeros.
    pub fn flat_grads(&self, g: &Graph, handles: &ModelHandles) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (seg, hs) in self.segments.iter().zip(&handles.segments) {
            out.extend(seg.sigma.flat_grads(g, &hs.sigma));
            out.extend(seg.bv.flat_grads(g, &hs.bv));
            out.extend(seg.sigmav.flat_grads(g, &hs.sigmav));
        }
        if let (Some(zeta), Some(hz)) = (&self.zeta, &handles.zeta) {
            out.extend(zeta.flat_grads(g, hz));
        }
        if self.rho.is_trainable() {
            let grad = handles
                .rho_raw
                .and_then(|id| g.grad(id))
                .map_or(0.0, |gr| gr[0]);
            out.push(grad);
        }
        out
    }

    /// Drift and diffusion coefficients at time `t` for a batch of states, on the
    /// tape. Drifts are per unit time; under the historical measure the
    /// market-price-of-risk terms are added and require `zeta`.
    pub fn coeff_nodes(
        &self,
        g: &mut Graph,
        handles: &ModelHandles,
        t: f64,
        y: NodeId,
        v: NodeId,
        measure: Measure,
    ) -> Result<CoeffNodes> {
        let m = g.value(y).len();
        let tn = t / self.horizon();
        let k = self.segment_of(t);
        let seg = &self.segments[k];
        let hs = &handles.segments[k];

        let tcol = g.const_vec(vec![tn; m]);
        let spot = g.exp(y);
        let x_sigma = g.stack_cols(&[tcol, spot, v])?;
        let sigma_out = seg.sigma.forward(g, &hs.sigma, x_sigma)?;
        let sigma = g.gather_col(sigma_out, 0)?;
        let x_v = g.stack_cols(&[tcol, v])?;
        let bv_out = seg.bv.forward(g, &hs.bv, x_v)?;
        let bv = g.gather_col(bv_out, 0)?;
        let sigmav_out = seg.sigmav.forward(g, &hs.sigmav, x_v)?;
        let sigmav = g.gather_col(sigmav_out, 0)?;

        let sq = g.square(sigma);
        let half = g.mul_scalar(sq, -0.5);
        let base = g.add_scalar(half, self.r - self.d);

        let (drift_y, drift_v) = match measure {
            Measure::RiskNeutral => (base, bv),
            Measure::Physical => {
                let zeta = self.zeta.as_ref().ok_or(Error::MissingZeta)?;
                let hz = handles.zeta.as_ref().ok_or(Error::MissingZeta)?;
                let x_z = g.stack_cols(&[tcol, y, v])?;
                let z_out = zeta.forward(g, hz, x_z)?;
                let z1 = g.gather_col(z_out, 0)?;
                let z2 = g.gather_col(z_out, 1)?;
                let cross0 = g.mul(sigma, sigmav)?;
                let cross = match self.rho {
                    Rho::Fixed(r) => g.mul_scalar(cross0, r),
                    Rho::Trainable(_) => {
                        let raw = handles.rho_raw.ok_or(Error::MissingZeta)?;
                        let rho_t = g.tanh(raw);
                        g.scale_by(rho_t, cross0)?
                    }
                };
                let e1 = g.mul(sq, z1)?;
                let y1 = g.add(base, e1)?;
                let e2 = g.mul(cross, z2)?;
                let drift_y = g.add(y1, e2)?;
                let c1 = g.mul(cross, z1)?;
                let v1 = g.add(bv, c1)?;
                let sv2 = g.square(sigmav);
                let e3 = g.mul(sv2, z2)?;
                let drift_v = g.add(v1, e3)?;
                (drift_y, drift_v)
            }
        };
        Ok(CoeffNodes {
            sigma,
            sigmav,
            drift_y,
            drift_v,
            spot,
        })
    }

    /// Plain-arithmetic twin of [`NeuralSdeModel::coeff_nodes`]; the operation
    /// order must stay in lockstep with the tape version so the two agree bitwise.
    pub fn coeff_rows(&self, t: f64, y: &[f64], v: &[f64], measure: Measure) -> Result<CoeffRows> {
        if y.len() != v.len() {
            return Err(Error::ShapeMismatch {
                op: "coeff_rows",
                lhs: vec![y.len()],
                rhs: vec![v.len()],
            });
        }
        let m = y.len();
        let tn = t / self.horizon();
        let k = self.segment_of(t);
        let seg = &self.segments[k];

        let spot: Vec<f64> = y.iter().map(|y| y.exp()).collect();
        let sigma = seg.sigma.eval_rows(&stack3(tn, &spot, v), m)?;
        let x_v = stack2(tn, v);
        let bv = seg.bv.eval_rows(&x_v, m)?;
        let sigmav = seg.sigmav.eval_rows(&x_v, m)?;

        let rd = self.r - self.d;
        let mut drift_y = vec![0.0; m];
        let mut drift_v = vec![0.0; m];
        match measure {
            Measure::RiskNeutral => {
                for i in 0..m {
                    drift_y[i] = sigma[i] * sigma[i] * -0.5 + rd;
                    drift_v[i] = bv[i];
                }
            }
            Measure::Physical => {
                let zeta = self.zeta.as_ref().ok_or(Error::MissingZeta)?;
                let z = zeta.eval_rows(&stack3(tn, y, v), m)?;
                let rho = self.rho.value();
                for i in 0..m {
                    let sq = sigma[i] * sigma[i];
                    let base = sq * -0.5 + rd;
                    let cross = sigma[i] * sigmav[i] * rho;
                    drift_y[i] = (base + sq * z[2 * i]) + cross * z[2 * i + 1];
                    drift_v[i] =
                        (bv[i] + cross * z[2 * i]) + sigmav[i] * sigmav[i] * z[2 * i + 1];
                }
            }
        }
        Ok(CoeffRows {
            sigma,
            sigmav,
            drift_y,
            drift_v,
        })
    }

    /// Historical-measure drifts `(bY_P, bV_P)` at a single state.
    pub fn p_drifts(&self, t: f64, y: f64, v: f64) -> Result<(f64, f64)> {
        if self.zeta.is_none() {
            return Err(Error::MissingZeta);
        }
        let c = self.coeff_rows(t, &[y], &[v], Measure::Physical)?;
        Ok((c.drift_y[0], c.drift_v[0]))
    }

    /// Euler–Maruyama on the tape; returns the per-step state nodes so callers
    /// can attach payoffs or transition densities and differentiate through the
    /// whole scheme.
    pub fn simulate_graph(
        &self,
        g: &mut Graph,
        handles: &ModelHandles,
        grid: &TimeGrid,
        inc: &Increments,
        measure: Measure,
        s0: f64,
        v0: f64,
    ) -> Result<SimTape> {
        self.check_sim_inputs(grid, inc, s0, v0)?;
        let m = inc.n_paths;
        let n = grid.n_steps();

        let fixed_dw2 = match self.rho {
            Rho::Fixed(r) => Some(inc.dw2(r)?),
            Rho::Trainable(_) => {
                if inc.du.is_empty() {
                    return Err(Error::Empty {
                        what: "dU increments".to_string(),
                    });
                }
                None
            }
        };
        let rho_nodes = match self.rho {
            Rho::Trainable(_) => {
                let raw = handles.rho_raw.ok_or_else(|| {
                    Error::Config("trainable correlation is not bound to the tape".to_string())
                })?;
                let rho_t = g.tanh(raw);
                let one = g.const_scalar(1.0);
                let rho2 = g.square(rho_t);
                let omr = g.sub(one, rho2)?;
                let root = g.sqrt(omr)?;
                Some((rho_t, root))
            }
            Rho::Fixed(_) => None,
        };

        let mut tape = SimTape {
            y: Vec::with_capacity(n + 1),
            v: Vec::with_capacity(n + 1),
            s: Vec::with_capacity(n + 1),
        };
        tape.y.push(g.const_vec(vec![s0.ln(); m]));
        tape.v.push(g.const_vec(vec![v0; m]));

        for step in 0..n {
            let t = grid.times()[step];
            let dt = grid.dt(step);
            let y_cur = tape.y[step];
            let v_cur = tape.v[step];
            let c = self.coeff_nodes(g, handles, t, y_cur, v_cur, measure)?;
            tape.s.push(c.spot);

            let dw1_c = g.const_vec(inc.dw1_row(step).to_vec());
            let dy_drift = g.mul_scalar(c.drift_y, dt);
            let y_mid = g.add(y_cur, dy_drift)?;
            let y_diff = g.mul(c.sigma, dw1_c)?;
            let y_next = g.add(y_mid, y_diff)?;

            let dw2_c = match (&fixed_dw2, &rho_nodes) {
                (Some(all), _) => g.const_vec(all[step * m..(step + 1) * m].to_vec()),
                (None, Some((rho_t, root))) => {
                    let du_c = g.const_vec(inc.du_row(step).to_vec());
                    let a = g.scale_by(*rho_t, dw1_c)?;
                    let b = g.scale_by(*root, du_c)?;
                    g.add(a, b)?
                }
                (None, None) => unreachable!("rho mode handled above"),
            };
            let dv_drift = g.mul_scalar(c.drift_v, dt);
            let v_mid = g.add(v_cur, dv_drift)?;
            let v_diff = g.mul(c.sigmav, dw2_c)?;
            let v_next = g.add(v_mid, v_diff)?;

            if !all_finite(g.value(y_next)) || !all_finite(g.value(v_next)) {
                return Err(Error::SimulationDiverged { step });
            }
            tape.y.push(y_next);
            tape.v.push(v_next);
        }
        let s_last = g.exp(tape.y[n]);
        tape.s.push(s_last);
        Ok(tape)
    }

    /// Euler–Maruyama without the tape, bitwise identical to
    /// [`NeuralSdeModel::simulate_graph`] on the same increments.
    pub fn simulate(
        &self,
        grid: &TimeGrid,
        inc: &Increments,
        measure: Measure,
        s0: f64,
        v0: f64,
    ) -> Result<PathBatch> {
        self.check_sim_inputs(grid, inc, s0, v0)?;
        let m = inc.n_paths;
        let n = grid.n_steps();
        let dw2 = inc.dw2(self.rho.value())?;

        let mut y = vec![0.0; (n + 1) * m];
        let mut v = vec![0.0; (n + 1) * m];
        y[..m].fill(s0.ln());
        v[..m].fill(v0);

        for step in 0..n {
            let t = grid.times()[step];
            let dt = grid.dt(step);
            let (y_head, y_tail) = y.split_at_mut((step + 1) * m);
            let (v_head, v_tail) = v.split_at_mut((step + 1) * m);
            let y_cur = &y_head[step * m..];
            let v_cur = &v_head[step * m..];
            let c = self.coeff_rows(t, y_cur, v_cur, measure)?;
            let y_next = &mut y_tail[..m];
            let v_next = &mut v_tail[..m];
            for i in 0..m {
                y_next[i] = (y_cur[i] + c.drift_y[i] * dt) + c.sigma[i] * inc.dw1[step * m + i];
                v_next[i] = (v_cur[i] + c.drift_v[i] * dt) + c.sigmav[i] * dw2[step * m + i];
            }
            if !all_finite(y_next) || !all_finite(v_next) {
                return Err(Error::SimulationDiverged { step });
            }
        }
        Ok(PathBatch {
            measure,
            times: grid.times().to_vec(),
            n_paths: m,
            y,
            v,
            dw1: inc.dw1.clone(),
            du: inc.du.clone(),
        })
    }

    fn check_sim_inputs(&self, grid: &TimeGrid, inc: &Increments, s0: f64, v0: f64) -> Result<()> {
        self.validate()?;
        if s0 <= 0.0 {
            return Err(Error::NonPositive {
                what: "initial spot".to_string(),
                value: s0,
            });
        }
        if !v0.is_finite() {
            return Err(Error::NotFinite {
                context: "initial second factor".to_string(),
            });
        }
        if inc.n_steps != grid.n_steps() || inc.n_paths == 0 {
            return Err(Error::Config(format!(
                "{} increment steps for a {}-step grid ({} paths)",
                inc.n_steps,
                grid.n_steps(),
                inc.n_paths
            )));
        }
        if grid.horizon() > self.horizon() + 1e-9 {
            return Err(Error::Config(format!(
                "grid horizon {} exceeds model horizon {}",
                grid.horizon(),
                self.horizon()
            )));
        }
        Ok(())
    }
}

fn check_net(
    name: &str,
    segment: usize,
    net: &Mlp,
    input: usize,
    output: usize,
    activation: OutputActivation,
) -> Result<()> {
    if net.input_dim() != input || net.output_dim() != output || net.output_activation() != activation
    {
        return Err(Error::Config(format!(
            "{name} network of segment {segment} must map {input} -> {output} with {activation:?} output, \
             got {} -> {} with {:?}",
            net.input_dim(),
            net.output_dim(),
            net.output_activation()
        )));
    }
    Ok(())
}

fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

fn stack3(t: f64, a: &[f64], b: &[f64]) -> Vec<f64> {
    let m = a.len();
    let mut x = vec![0.0; m * 3];
    for i in 0..m {
        x[3 * i] = t;
        x[3 * i + 1] = a[i];
        x[3 * i + 2] = b[i];
    }
    x
}

fn stack2(t: f64, a: &[f64]) -> Vec<f64> {
    let m = a.len();
    let mut x = vec![0.0; m * 2];
    for i in 0..m {
        x[2 * i] = t;
        x[2 * i + 1] = a[i];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn const_net(inputs: usize, values: &[f64], act: OutputActivation) -> Mlp {
        Mlp::constant(inputs, values, act).unwrap()
    }

    fn const_model(sigma: f64, r: f64, d: f64, rho: f64) -> NeuralSdeModel {
        let nets = SdeNets {
            sigma: const_net(3, &[sigma], OutputActivation::Softplus),
            bv: const_net(2, &[0.0], OutputActivation::Identity),
            sigmav: const_net(2, &[0.1], OutputActivation::Softplus),
        };
        NeuralSdeModel::single_segment(nets, 1.0, None, Rho::Fixed(rho), r, d).unwrap()
    }

    fn random_model(seed: u64, gain: f64, with_zeta: bool) -> NeuralSdeModel {
        let mut nets = SdeNets::new(&[8]).unwrap();
        let tree = SeedTree::new(seed);
        nets.init_glorot(gain, &mut tree.stream("nets", &[]));
        let zeta = with_zeta.then(|| {
            let mut z = zeta_net(&[8]).unwrap();
            z.init_glorot(gain, &mut tree.stream("zeta", &[]));
            z
        });
        NeuralSdeModel::single_segment(nets, 1.0, zeta, Rho::Fixed(-0.3), 0.02, 0.0).unwrap()
    }

    #[test]
    fn uniform_grid_basics() {
        let grid = TimeGrid::uniform(1.0, 96).unwrap();
        assert_eq!(grid.n_steps(), 96);
        assert_eq!(grid.horizon(), 1.0);
        assert_eq!(grid.index_of(16.0 / 96.0).unwrap(), 16);
        let err = grid.index_of(0.17).unwrap_err();
        match err {
            Error::MaturityOffGrid { t, nearest } => {
                assert_eq!(t, 0.17);
                assert!((nearest - 16.0 / 96.0).abs() < 1e-12);
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(TimeGrid::uniform(0.0, 8).is_err());
        assert!(TimeGrid::uniform(1.0, 0).is_err());
    }

    #[test]
    fn knotted_grid_hits_every_maturity() {
        let maturities = [0.175, 0.425, 0.695, 0.940];
        let grid = TimeGrid::with_knots(0.94, 96, &maturities).unwrap();
        for &t in &maturities {
            let idx = grid.index_of(t).unwrap();
            assert_eq!(grid.times()[idx], t);
        }
        assert!(grid.times().windows(2).all(|w| w[1] > w[0]));
        assert!(grid.n_steps() >= 96);
        assert!(TimeGrid::with_knots(1.0, 8, &[1.5]).is_err());
    }

    #[test]
    fn dw2_correlation_edge_cases() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let inc = Increments::draw(&grid, 64, &SeedTree::new(2), 0);
        let same = inc.dw2(1.0).unwrap();
        for (a, b) in same.iter().zip(&inc.dw1) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(matches!(
            inc.dw2(1.2),
            Err(Error::DegenerateCorrelation { .. })
        ));
        let no_du = Increments::from_parts(4, 2, vec![0.0; 8], vec![]).unwrap();
        assert!(no_du.dw2(0.5).is_err());
    }

    #[test]
    fn empirical_increment_correlation_tracks_rho() {
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let inc = Increments::draw(&grid, 6_250, &SeedTree::new(7), 0);
        let dw2 = inc.dw2(0.5).unwrap();
        let n = inc.dw1.len() as f64;
        let m1 = inc.dw1.iter().sum::<f64>() / n;
        let m2 = dw2.iter().sum::<f64>() / n;
        let mut c11 = 0.0;
        let mut c22 = 0.0;
        let mut c12 = 0.0;
        for (a, b) in inc.dw1.iter().zip(&dw2) {
            c11 += (a - m1) * (a - m1);
            c22 += (b - m2) * (b - m2);
            c12 += (a - m1) * (b - m2);
        }
        let corr = c12 / (c11 * c22).sqrt();
        assert!((corr - 0.5).abs() < 0.02, "corr {corr}");
    }

    #[test]
    fn same_seed_same_paths() {
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let model = random_model(3, 1.0, false);
        let a = Increments::draw(&grid, 32, &SeedTree::new(9), 4);
        let b = Increments::draw(&grid, 32, &SeedTree::new(9), 4);
        assert_eq!(a, b);
        let pa = model
            .simulate(&grid, &a, Measure::RiskNeutral, 1.0, 0.04)
            .unwrap();
        let pb = model
            .simulate(&grid, &b, Measure::RiskNeutral, 1.0, 0.04)
            .unwrap();
        assert_eq!(pa.y, pb.y);
        assert_eq!(pa.v, pb.v);
        let c = Increments::draw(&grid, 32, &SeedTree::new(9), 5);
        assert_ne!(a.dw1, c.dw1);
    }

    #[test]
    fn vanishing_volatility_freezes_the_spot() {
        let model = const_model(1e-8, 0.0, 0.0, 0.0);
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let inc = Increments::draw(&grid, 100, &SeedTree::new(4), 0);
        let batch = model
            .simulate(&grid, &inc, Measure::RiskNeutral, 1.0, 0.04)
            .unwrap();
        for n in 0..=grid.n_steps() {
            for s in batch.spot_at(n) {
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_volatility_log_drift() {
        let model = const_model(0.3, 0.0, 0.0, 0.0);
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let m = 100_000;
        let inc = Increments::draw(&grid, m, &SeedTree::new(11), 0);
        let batch = model
            .simulate(&grid, &inc, Measure::RiskNeutral, 1.0, 0.04)
            .unwrap();
        let mean_dy = par::sum(batch.y_at(4)) / m as f64 - 0.0;
        let target = -0.5 * 0.3 * 0.3;
        let tol = 3.0 * 0.3 / (m as f64).sqrt();
        assert!(
            (mean_dy - target).abs() < tol,
            "mean {mean_dy} target {target} tol {tol}"
        );
    }

    #[test]
    fn martingale_under_pricing_measure() {
        let grid = TimeGrid::uniform(0.25, 8).unwrap();
        let model = {
            let mut m = random_model(21, 1.0, false);
            m.r = 0.0;
            m
        };
        let mut terminal = Vec::new();
        for seed in 0..20 {
            let inc = Increments::draw(&grid, 2_000, &SeedTree::new(1000 + seed), 0);
            let batch = model
                .simulate(&grid, &inc, Measure::RiskNeutral, 1.0, 0.04)
                .unwrap();
            terminal.extend(batch.spot_at(8));
        }
        let n = terminal.len() as f64;
        let mean = terminal.iter().sum::<f64>() / n;
        let var = terminal.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
        let stderr = (var / n).sqrt();
        assert!(
            (mean - 1.0).abs() < 4.0 * stderr,
            "mean {mean} stderr {stderr}"
        );
    }

    #[test]
    fn discounted_spot_is_flat_with_rates() {
        let model = {
            let mut m = random_model(23, 1.0, false);
            m.r = 0.03;
            m.d = 0.01;
            m
        };
        let grid = TimeGrid::uniform(0.5, 6).unwrap();
        let m_paths = 4_000;
        let inc = Increments::draw(&grid, m_paths, &SeedTree::new(5), 0);
        let batch = model
            .simulate(&grid, &inc, Measure::RiskNeutral, 1.0, 0.04)
            .unwrap();
        let disc = (-(model.r - model.d) * grid.horizon()).exp();
        let vals: Vec<f64> = batch.spot_at(6).iter().map(|s| disc * s).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
        let stderr = (var / n).sqrt();
        assert!(
            (mean - 1.0).abs() < 4.0 * stderr,
            "mean {mean} stderr {stderr}"
        );
    }

    #[test]
    fn p_drift_examples() {
        // zeta == 0 recovers the pricing-measure drifts
        let nets = SdeNets {
            sigma: const_net(3, &[0.3], OutputActivation::Softplus),
            bv: const_net(2, &[0.7], OutputActivation::Identity),
            sigmav: const_net(2, &[0.1], OutputActivation::Softplus),
        };
        let zero_zeta = zeta_net(&[4]).unwrap();
        let model = NeuralSdeModel::single_segment(
            nets.clone(),
            1.0,
            Some(zero_zeta),
            Rho::Fixed(-0.5),
            0.01,
            0.0,
        )
        .unwrap();
        let (by, bv) = model.p_drifts(0.3, 0.0, 0.04).unwrap();
        let q = model
            .coeff_rows(0.3, &[0.0], &[0.04], Measure::RiskNeutral)
            .unwrap();
        assert_eq!(by, q.drift_y[0]);
        assert_eq!(bv, q.drift_v[0]);

        // one-factor lognormal case: zeta1 = (mu - r) / sigma^2 gives drift mu - sigma^2/2
        let zeta = const_net(3, &[0.05 / 0.09, 0.0], OutputActivation::Identity);
        let bs = NeuralSdeModel::single_segment(
            nets.clone(),
            1.0,
            Some(zeta),
            Rho::Fixed(0.0),
            0.0,
            0.0,
        )
        .unwrap();
        let (by, _) = bs.p_drifts(0.5, 0.0, 0.04).unwrap();
        assert!((by - 0.005).abs() < 1e-12, "drift {by}");

        // rho = 0 kills the cross terms
        let zeta2 = const_net(3, &[0.0, 3.0], OutputActivation::Identity);
        let uncorr = NeuralSdeModel::single_segment(
            nets,
            1.0,
            Some(zeta2),
            Rho::Fixed(0.0),
            0.01,
            0.0,
        )
        .unwrap();
        let (by, bv) = uncorr.p_drifts(0.3, 0.0, 0.04).unwrap();
        let q = uncorr
            .coeff_rows(0.3, &[0.0], &[0.04], Measure::RiskNeutral)
            .unwrap();
        assert_eq!(by, q.drift_y[0]);
        assert!((bv - (q.drift_v[0] + 0.1 * 0.1 * 3.0)).abs() < 1e-15);

        let no_zeta = const_model(0.3, 0.0, 0.0, 0.0);
        assert!(matches!(
            no_zeta.p_drifts(0.1, 0.0, 0.0),
            Err(Error::MissingZeta)
        ));
    }

    #[test]
    fn zero_zeta_physical_paths_match_pricing_paths_bitwise() {
        let mut model = random_model(31, 1.2, false);
        model.zeta = Some(zeta_net(&[8]).unwrap());
        let grid = TimeGrid::uniform(1.0, 12).unwrap();
        let inc = Increments::draw(&grid, 200, &SeedTree::new(6), 0);
        let q = model
            .simulate(&grid, &inc, Measure::RiskNeutral, 1.0, 0.04)
            .unwrap();
        let p = model
            .simulate(&grid, &inc, Measure::Physical, 1.0, 0.04)
            .unwrap();
        assert_eq!(q.y, p.y);
        assert_eq!(q.v, p.v);
    }

    #[test]
    fn graph_and_plain_simulation_agree_bitwise() {
        for (rho, measure) in [
            (Rho::Fixed(-0.3), Measure::RiskNeutral),
            (Rho::Fixed(-0.3), Measure::Physical),
            (Rho::Trainable(0.4), Measure::RiskNeutral),
            (Rho::Trainable(0.4), Measure::Physical),
        ] {
            let mut model = random_model(41, 1.0, true);
            model.rho = rho;
            let grid = TimeGrid::uniform(1.0, 10).unwrap();
            let inc = Increments::draw(&grid, 64, &SeedTree::new(8), 0);
            let plain = model.simulate(&grid, &inc, measure, 1.2, 0.05).unwrap();

            let mut g = Graph::new();
            let handles = model.bind(&mut g, &BindSpec::all_trainable(&model)).unwrap();
            let tape = model
                .simulate_graph(&mut g, &handles, &grid, &inc, measure, 1.2, 0.05)
                .unwrap();
            for n in 0..=grid.n_steps() {
                let gy = g.value(tape.y[n]);
                let gv = g.value(tape.v[n]);
                for i in 0..inc.n_paths {
                    assert_eq!(gy[i].to_bits(), plain.y_at(n)[i].to_bits());
                    assert_eq!(gv[i].to_bits(), plain.v_at(n)[i].to_bits());
                }
                let gs = g.value(tape.s[n]);
                let ps = plain.spot_at(n);
                for i in 0..inc.n_paths {
                    assert_eq!(gs[i].to_bits(), ps[i].to_bits());
                }
            }
        }
    }

    #[test]
    fn pathwise_gradient_matches_finite_differences() {
        for trainable_rho in [false, true] {
            let mut model = random_model(55, 0.8, true);
            if trainable_rho {
                model.rho = Rho::Trainable(0.3);
            }
            let grid = TimeGrid::uniform(0.5, 16).unwrap();
            let inc = Increments::draw(&grid, 2_000, &SeedTree::new(12), 0);

            let mut g = Graph::new();
            let handles = model.bind(&mut g, &BindSpec::all_trainable(&model)).unwrap();
            let tape = model
                .simulate_graph(&mut g, &handles, &grid, &inc, Measure::Physical, 1.0, 0.04)
                .unwrap();
            let obj = g.mean(tape.s[grid.n_steps()]);
            g.backward(obj).unwrap();
            let grads = model.flat_grads(&g, &handles);

            let sigma_n = model.segments[0].sigma.param_count();
            let bv_n = model.segments[0].bv.param_count();
            let mut picks = vec![0, 5, sigma_n + 1, sigma_n + bv_n + 2];
            if trainable_rho {
                picks.push(model.param_count() - 1);
            }
            let flat = model.flat_params();
            let h = 1e-6;
            for &idx in &picks {
                let mut probe = model.clone();
                let mut up = flat.clone();
                up[idx] += h;
                probe.set_flat_params(&up).unwrap();
                let f_up = mean_terminal_spot(&probe, &grid, &inc);
                let mut dn = flat.clone();
                dn[idx] -= h;
                probe.set_flat_params(&dn).unwrap();
                let f_dn = mean_terminal_spot(&probe, &grid, &inc);
                let fd = (f_up - f_dn) / (2.0 * h);
                let a = grads[idx];
                let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-12);
                assert!(rel < 1e-4, "param {idx}: analytic {a} fd {fd} rel {rel}");
            }
        }
    }

    fn mean_terminal_spot(model: &NeuralSdeModel, grid: &TimeGrid, inc: &Increments) -> f64 {
        let batch = model
            .simulate(grid, inc, Measure::Physical, 1.0, 0.04)
            .unwrap();
        par::sum(&batch.spot_at(grid.n_steps())) / inc.n_paths as f64
    }

    #[test]
    fn euler_refinement_halves_weak_error() {
        let mut ratios = Vec::new();
        for seed in 0..5 {
            let model = random_model(200 + seed, 2.0, true);
            let fine_grid = TimeGrid::uniform(1.0, 128).unwrap();
            let fine = Increments::draw(&fine_grid, 20_000, &SeedTree::new(300 + seed), 0);
            let m128 = mean_terminal_log(&model, &fine_grid, &fine);
            let m8 = {
                let (grid, inc) = coarsen(&fine, 16);
                mean_terminal_log(&model, &grid, &inc)
            };
            let m16 = {
                let (grid, inc) = coarsen(&fine, 8);
                mean_terminal_log(&model, &grid, &inc)
            };
            ratios.push((m8 - m128).abs() / (m16 - m128).abs());
        }
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ratios[2];
        assert!(
            (1.5..=3.0).contains(&median),
            "weak-error ratios {ratios:?}"
        );
    }

    fn mean_terminal_log(model: &NeuralSdeModel, grid: &TimeGrid, inc: &Increments) -> f64 {
        let batch = model
            .simulate(grid, inc, Measure::Physical, 1.0, 0.04)
            .unwrap();
        par::sum(batch.y_at(grid.n_steps())) / inc.n_paths as f64
    }

    /// Sums blocks of `factor` fine steps into one coarse step, so both levels
    /// share the same Brownian path.
    fn coarsen(fine: &Increments, factor: usize) -> (TimeGrid, Increments) {
        let n_c = fine.n_steps / factor;
        let m = fine.n_paths;
        let mut dw1 = vec![0.0; n_c * m];
        let mut du = vec![0.0; n_c * m];
        for c in 0..n_c {
            for j in 0..factor {
                let f = c * factor + j;
                for i in 0..m {
                    dw1[c * m + i] += fine.dw1[f * m + i];
                    du[c * m + i] += fine.du[f * m + i];
                }
            }
        }
        (
            TimeGrid::uniform(1.0, n_c).unwrap(),
            Increments::from_parts(n_c, m, dw1, du).unwrap(),
        )
    }

    #[test]
    fn diverging_state_reports_the_step() {
        let nets = SdeNets {
            sigma: const_net(3, &[0.2], OutputActivation::Softplus),
            bv: const_net(2, &[1e308], OutputActivation::Identity),
            sigmav: const_net(2, &[0.1], OutputActivation::Softplus),
        };
        let model =
            NeuralSdeModel::single_segment(nets, 2.0, None, Rho::Fixed(0.0), 0.0, 0.0).unwrap();
        let grid = TimeGrid::uniform(2.0, 2).unwrap();
        let inc = Increments::draw(&grid, 8, &SeedTree::new(2), 0);
        let err = model
            .simulate(&grid, &inc, Measure::RiskNeutral, 1.0, 0.0)
            .unwrap_err();
        assert!(matches!(err, Error::SimulationDiverged { step: 1 }));

        let mut g = Graph::new();
        let handles = model.bind(&mut g, &BindSpec::frozen(&model)).unwrap();
        let err = model
            .simulate_graph(&mut g, &handles, &grid, &inc, Measure::RiskNeutral, 1.0, 0.0)
            .unwrap_err();
        assert!(matches!(err, Error::SimulationDiverged { step: 1 }));
    }

    #[test]
    fn segment_dispatch_switches_networks() {
        let seg_a = SdeNets {
            sigma: const_net(3, &[0.2], OutputActivation::Softplus),
            bv: const_net(2, &[0.0], OutputActivation::Identity),
            sigmav: const_net(2, &[0.1], OutputActivation::Softplus),
        };
        let seg_b = SdeNets {
            sigma: const_net(3, &[0.4], OutputActivation::Softplus),
            bv: const_net(2, &[0.0], OutputActivation::Identity),
            sigmav: const_net(2, &[0.1], OutputActivation::Softplus),
        };
        let model = NeuralSdeModel::new(
            vec![seg_a, seg_b],
            vec![0.5, 1.0],
            None,
            Rho::Fixed(0.0),
            0.0,
            0.0,
        )
        .unwrap();
        assert_eq!(model.segment_of(0.0), 0);
        assert_eq!(model.segment_of(0.49), 0);
        assert_eq!(model.segment_of(0.5), 1);
        assert_eq!(model.segment_of(1.0), 1);
        for (t, want) in [(0.0, 0.2), (0.25, 0.2), (0.5, 0.4), (0.75, 0.4)] {
            let c = model
                .coeff_rows(t, &[0.0], &[0.04], Measure::RiskNeutral)
                .unwrap();
            assert!((c.sigma[0] - want).abs() < 1e-12, "t={t} sigma {}", c.sigma[0]);
        }
    }

    #[test]
    fn flat_params_round_trip_with_mask() {
        let mut model = random_model(61, 1.0, true);
        model.rho = Rho::Trainable(0.2);
        let flat = model.flat_params();
        assert_eq!(flat.len(), model.param_count());
        let mut other = random_model(62, 1.0, true);
        other.rho = Rho::Trainable(0.0);
        other.set_flat_params(&flat).unwrap();
        assert_eq!(other.flat_params(), flat);
        assert!((other.rho.value() - 0.2f64.tanh()).abs() < 1e-15);

        let spec = BindSpec::stage(&model, 0);
        let mask = model.trainable_mask(&spec);
        assert_eq!(mask.len(), flat.len());
        let seg_n = model.segments[0].param_count();
        assert!(mask[..seg_n].iter().all(|&b| b));
        assert!(mask[seg_n..].iter().all(|&b| !b));

        let sigmas = model.prior_sigmas(1.5, Some(0.18));
        assert_eq!(sigmas.len(), flat.len());
        assert!(sigmas[..sigmas.len() - 1].iter().all(|&s| s == 0.18));
        assert_eq!(sigmas[sigmas.len() - 1], 0.18);
    }

    #[test]
    fn csv_export_round_trips_values() {
        let model = const_model(0.3, 0.01, 0.0, 0.2);
        let grid = TimeGrid::uniform(0.5, 3).unwrap();
        let inc = Increments::draw(&grid, 2, &SeedTree::new(14), 0);
        let batch = model
            .simulate(&grid, &inc, Measure::RiskNeutral, 1.1, 0.04)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("paths.csv");
        batch.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,time,path,S,V");
        assert_eq!(text.lines().count(), 1 + 2 * 4);
        let first: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(first[0], "0");
        assert_eq!(first[2], "0");
        let s: f64 = first[3].parse().unwrap();
        assert_eq!(s.to_bits(), batch.spot_at(0)[0].to_bits());
    }

    #[test]
    fn rho_reparameterization() {
        let rho = Rho::Trainable(0.5f64.atanh());
        assert!((rho.value() - 0.5).abs() < 1e-15);
        assert!(Rho::Trainable(100.0).value() <= 1.0);
        let nets = SdeNets::new(&[4]).unwrap();
        assert!(matches!(
            NeuralSdeModel::single_segment(nets, 1.0, None, Rho::Fixed(1.2), 0.0, 0.0),
            Err(Error::DegenerateCorrelation { .. })
        ));
    }
}
