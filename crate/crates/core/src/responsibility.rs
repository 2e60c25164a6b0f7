//! Responsibility allocation and the decentralized safety constraints.
//!
//! For an ordered pair `(i, j)` with barrier `h` the responsibility-aware
//! constraint on agent `i` reads
//!
//! ```text
//!   c_i(x, u) - gamma(i, x) >= 0,   c_i = Lg_i h . u_i + (alpha(h) + Lf h) / N
//! ```
//!
//! with `N = 2` in the pairwise form. Because the two `c` terms sum to
//! `dh/dt + alpha(h)`, both constraints together with `gamma_i + gamma_j >= 0`
//! imply the centralized barrier condition.

use std::io::{Read, Write};

use rand::Rng;

use crate::barrier::{dot2, BarrierConfig, BarrierEval};
use crate::dynamics::{AgentState, ControlInput, InputBounds};
use crate::error::{Error, Result};
use crate::mlp::Mlp;

pub const FEATURE_DIM: usize = 8;

/// Ordered-pair features in the ego frame.
///
/// Layout: `[rel_x, rel_y, v_ego, v_other, cos(dtheta), sin(dtheta), rel_vx, rel_vy]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairFeatures(pub [f64; FEATURE_DIM]);

/// Length and speed scale applied before the network sees the features.
const LENGTH_SCALE: f64 = 10.0;
const SPEED_SCALE: f64 = 10.0;

impl PairFeatures {
    pub fn rel_position(&self) -> [f64; 2] {
        [self.0[0], self.0[1]]
    }

    /// Network input: lengths and speeds rescaled to order one.
    pub fn network_input(&self) -> [f64; FEATURE_DIM] {
        let f = self.0;
        [
            f[0] / LENGTH_SCALE,
            f[1] / LENGTH_SCALE,
            f[2] / SPEED_SCALE,
            f[3] / SPEED_SCALE,
            f[4],
            f[5],
            f[6] / SPEED_SCALE,
            f[7] / SPEED_SCALE,
        ]
    }
}

pub fn features(ego: AgentState, other: AgentState) -> PairFeatures {
    let (s, c) = ego.theta.sin_cos();
    let to_ego = |dx: f64, dy: f64| [c * dx + s * dy, -s * dx + c * dy];
    let rel = to_ego(other.x - ego.x, other.y - ego.y);
    let dtheta = other.theta - ego.theta;
    let (so, co) = other.theta.sin_cos();
    let rv = to_ego(other.v * co - ego.v * c, other.v * so - ego.v * s);
    PairFeatures([
        rel[0],
        rel[1],
        ego.v,
        other.v,
        dtheta.cos(),
        dtheta.sin(),
        rv[0],
        rv[1],
    ])
}

/// Anything that assigns a responsibility offset to an ordered pair.
pub trait Responsibility: Sync {
    fn gamma(&self, ego: AgentState, other: AgentState) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub enum GammaModel {
    /// `gamma == 0`: responsibility split evenly.
    Zero,
    Mlp(Mlp),
}

pub const HIDDEN_WIDTH: usize = 128;
pub const DEFAULT_SLOPES: [f64; 2] = [0.1, 0.01];

impl GammaModel {
    /// Zero-initialized network with the default `8 -> 128 -> 128 -> 1` shape.
    pub fn zero_mlp() -> Self {
        GammaModel::Mlp(Mlp::zeros(
            &[FEATURE_DIM, HIDDEN_WIDTH, HIDDEN_WIDTH, 1],
            &DEFAULT_SLOPES,
        ))
    }

    pub fn random_mlp<R: Rng>(hidden: &[usize], slopes: &[f64], scale: f64, rng: &mut R) -> Self {
        let mut widths = vec![FEATURE_DIM];
        widths.extend_from_slice(hidden);
        widths.push(1);
        GammaModel::Mlp(Mlp::random(&widths, slopes, scale, rng))
    }

    pub fn eval_features(&self, f: &PairFeatures) -> f64 {
        match self {
            GammaModel::Zero => 0.0,
            GammaModel::Mlp(net) => net.forward(&f.network_input()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GammaModel::Zero => Ok(()),
            GammaModel::Mlp(net) => {
                if net.input_dim() != FEATURE_DIM {
                    return Err(Error::InvalidArgument(format!(
                        "network input width {} does not match feature width {FEATURE_DIM}",
                        net.input_dim()
                    )));
                }
                if !net.is_finite() {
                    return Err(Error::NonFinite("network parameters".into()));
                }
                Ok(())
            }
        }
    }
}

impl Responsibility for GammaModel {
    fn gamma(&self, ego: AgentState, other: AgentState) -> f64 {
        self.eval_features(&features(ego, other))
    }
}

pub fn gamma_eval(model: &GammaModel, ego: AgentState, other: AgentState) -> f64 {
    model.gamma(ego, other)
}

/// Analytic allocation used as ground truth for synthetic experts: the
/// agent behind takes `trailing`, the agent in front `leading`.
///
/// "Behind" means the other agent is ahead in the ego frame while the ego is
/// not ahead in the other's frame. Pairs where both or neither see the other
/// ahead get zero, so the pairwise sum is `trailing + leading` or zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionalRule {
    pub trailing: f64,
    pub leading: f64,
}

impl PositionalRule {
    pub fn new(trailing: f64, leading: f64) -> Result<Self> {
        if trailing + leading < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "trailing + leading must be nonnegative, got {trailing} + {leading}"
            )));
        }
        Ok(Self { trailing, leading })
    }
}

/// Ordering of two agents along their direction of travel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairRole {
    Trailing,
    Leading,
    Ambiguous,
}

pub fn pair_role(ego: AgentState, other: AgentState) -> PairRole {
    let ahead_of_ego = features(ego, other).0[0] > 0.0;
    let ego_ahead_of_other = features(other, ego).0[0] > 0.0;
    match (ahead_of_ego, ego_ahead_of_other) {
        (true, false) => PairRole::Trailing,
        (false, true) => PairRole::Leading,
        _ => PairRole::Ambiguous,
    }
}

impl Responsibility for PositionalRule {
    fn gamma(&self, ego: AgentState, other: AgentState) -> f64 {
        match pair_role(ego, other) {
            PairRole::Trailing => self.trailing,
            PairRole::Leading => self.leading,
            PairRole::Ambiguous => 0.0,
        }
    }
}

/// Which side of a [`BarrierEval`] an agent occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    I,
    J,
}

impl Side {
    pub fn lg(self, eval: &BarrierEval) -> [f64; 2] {
        match self {
            Side::I => eval.lg_i,
            Side::J => eval.lg_j,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintTerms {
    pub c: f64,
    pub gamma: f64,
    pub margin: f64,
}

/// `c = Lg h . u + (alpha(h) + Lf h) / n_agents`.
pub fn c_term(
    side: Side,
    eval: &BarrierEval,
    u: ControlInput,
    n_agents: usize,
    cfg: &BarrierConfig,
) -> f64 {
    debug_assert!(n_agents >= 2);
    dot2(side.lg(eval), u.to_array()) + (cfg.alpha(eval.value) + eval.lf) / n_agents as f64
}

/// Responsibility-aware margin for the agent on `side` of the pair
/// `(si, sj)` that produced `eval`.
pub fn racbf_margin(
    side: Side,
    eval: &BarrierEval,
    u: ControlInput,
    model: &dyn Responsibility,
    si: AgentState,
    sj: AgentState,
    cfg: &BarrierConfig,
) -> ConstraintTerms {
    let (ego, other) = match side {
        Side::I => (si, sj),
        Side::J => (sj, si),
    };
    let c = c_term(side, eval, u, 2, cfg);
    let gamma = model.gamma(ego, other);
    ConstraintTerms {
        c,
        gamma,
        margin: c - gamma,
    }
}

/// `inf_{u in box} lg . u`, attained at a vertex.
pub fn box_infimum(lg: [f64; 2], bounds: &InputBounds) -> f64 {
    -(lg[0].abs() * bounds.a_max + lg[1].abs() * bounds.omega_max)
}

/// Robust margin for agent `i` against every admissible input of agent `j`.
pub fn worst_case_margin(
    eval: &BarrierEval,
    u_i: ControlInput,
    bounds: &InputBounds,
    cfg: &BarrierConfig,
) -> f64 {
    eval.lf + cfg.alpha(eval.value) + dot2(eval.lg_i, u_i.to_array()) + box_infimum(eval.lg_j, bounds)
}

// Model file layout (little endian):
//   [0..8)   magic b"RACBFGAM"
//   [8]      version (1)
//   [9]      variant: 0 = zero, 1 = mlp
//   mlp only:
//   u32      layer count L
//   L x (u32 outputs, u32 inputs)
//   (L-1) x f64 leaky-ReLU slopes
//   per layer: outputs*inputs f64 weights (row-major), outputs f64 biases
// No trailing bytes.
pub const MODEL_MAGIC: &[u8; 8] = b"RACBFGAM";
pub const MODEL_VERSION: u8 = 1;

pub fn write_model<W: Write>(model: &GammaModel, mut w: W) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&[MODEL_VERSION])?;
    match model {
        GammaModel::Zero => w.write_all(&[0])?,
        GammaModel::Mlp(net) => {
            w.write_all(&[1])?;
            w.write_all(&(net.layers.len() as u32).to_le_bytes())?;
            for l in &net.layers {
                w.write_all(&(l.outputs() as u32).to_le_bytes())?;
                w.write_all(&(l.inputs() as u32).to_le_bytes())?;
            }
            for s in &net.slopes {
                w.write_all(&s.to_le_bytes())?;
            }
            for p in net.params() {
                w.write_all(&p.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::CorruptModel {
                offset: self.at,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let at = self.at;
        let v = f64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::CorruptModel {
                offset: at,
                detail: format!("non-finite {what}"),
            });
        }
        Ok(v)
    }
}

pub fn read_model<R: Read>(mut r: R) -> Result<GammaModel> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_model(&buf)
}

pub fn decode_model(buf: &[u8]) -> Result<GammaModel> {
    let mut c = Cursor { buf, at: 0 };
    let corrupt = |offset: usize, detail: String| Error::CorruptModel { offset, detail };
    if c.take(8, "magic")? != MODEL_MAGIC {
        return Err(corrupt(0, "bad magic".into()));
    }
    let version = c.u8("version")?;
    if version != MODEL_VERSION {
        return Err(corrupt(8, format!("unsupported version {version}")));
    }
    let model = match c.u8("variant")? {
        0 => GammaModel::Zero,
        1 => {
            let at = c.at;
            let n_layers = c.u32("layer count")? as usize;
            if n_layers == 0 || n_layers > 64 {
                return Err(corrupt(at, format!("implausible layer count {n_layers}")));
            }
            let mut widths = Vec::with_capacity(n_layers + 1);
            for k in 0..n_layers {
                let at = c.at;
                let out = c.u32("layer outputs")? as usize;
                let inp = c.u32("layer inputs")? as usize;
                if out == 0 || inp == 0 || out > 1 << 16 || inp > 1 << 16 {
                    return Err(corrupt(at, format!("implausible shape {out}x{inp} for layer {k}")));
                }
                if k == 0 {
                    widths.push(inp);
                } else if widths[k] != inp {
                    return Err(corrupt(at, format!("layer {k} input {inp} != previous output {}", widths[k])));
                }
                widths.push(out);
            }
            if *widths.last().unwrap() != 1 {
                return Err(corrupt(c.at, "final layer must have one output".into()));
            }
            let mut slopes = Vec::with_capacity(n_layers - 1);
            for _ in 1..n_layers {
                slopes.push(c.f64("slope")?);
            }
            let mut net = Mlp::zeros(&widths, &slopes);
            let mut params = Vec::with_capacity(net.param_count());
            for _ in 0..net.param_count() {
                params.push(c.f64("parameter")?);
            }
            net.set_params(&params);
            GammaModel::Mlp(net)
        }
        v => return Err(corrupt(9, format!("unknown variant {v}"))),
    };
    if c.at != buf.len() {
        return Err(corrupt(c.at, format!("{} trailing bytes", buf.len() - c.at)));
    }
    Ok(model)
}
