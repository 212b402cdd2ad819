//! The decoupled-query decoder.
//!
//! Each layer runs self-attention over the live queries, then splits into a
//! class branch and a box branch. Both branches cross-attend to the scene
//! memory and apply a feed-forward block; the class branch feeds the
//! classification head and the box branch feeds the points head. The next
//! layer starts from the element-wise sum of the two branches, restricted to
//! the queries that survive top-k selection.

use serde::{Deserialize, Serialize};

use super::memory::{memory_feature_dim, sine_code, SceneMemory};
use super::schedule::{topk_indices, QuerySchedule, QueryState};
use super::tape::{Matrix, ParamStore, Tape, Var};
use crate::error::ModelError;
use crate::geom::{Point2, PointSet};
use crate::loss::{sigmoid, ClassLogits, Prediction};
use crate::rng::Rng;

/// Reference logits are kept inside this band so refinement cannot push a
/// query's anchor into the flat tail of the sigmoid.
const REF_LIMIT: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Feature width.
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    /// Points per query.
    pub k_points: usize,
    pub classes: usize,
    /// Number of memory tokens; a perfect square (one per grid cell).
    pub memory_tokens: usize,
    /// Learned queries entering the first layer.
    pub queries: usize,
    /// Hidden width of the feed-forward blocks.
    pub ffn: usize,
    /// Side of the square image in pixels; points are squashed into it.
    pub image_size: f64,
    /// Per-head strength of the cross-attention locality prior, in inverse
    /// squared normalized image units. Zero gives plain attention.
    pub locality: Vec<f64>,
    /// Initial foreground probability of every class logit.
    pub prior_prob: f64,
    /// Radius in logit units of the initial ring of points around each
    /// reference.
    pub init_spread: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            layers: 4,
            k_points: 9,
            classes: 3,
            memory_tokens: 256,
            queries: 60,
            ffn: 128,
            image_size: 256.0,
            locality: vec![0.0, 16.0, 64.0, 256.0],
            prior_prob: 0.01,
            init_spread: 0.3,
        }
    }
}

impl DecoderConfig {
    pub fn grid(&self) -> usize {
        (self.memory_tokens as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.layers == 0 {
            return bad("need at least one layer".into());
        }
        if self.k_points < 3 {
            return bad(format!("k_points = {} is below 3", self.k_points));
        }
        if self.classes == 0 || self.queries == 0 || self.ffn == 0 {
            return bad("classes, queries and ffn must be positive".into());
        }
        let g = self.grid();
        if g == 0 || g * g != self.memory_tokens {
            return bad(format!("memory_tokens = {} is not a square grid", self.memory_tokens));
        }
        if !(self.image_size.is_finite() && self.image_size > 0.0) {
            return bad("image_size must be positive".into());
        }
        if self.locality.len() != self.heads || self.locality.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return bad(format!("locality needs {} non-negative entries", self.heads));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return bad("prior_prob must lie in (0, 1)".into());
        }
        if !(self.init_spread.is_finite() && self.init_spread >= 0.0) {
            return bad("init_spread must be non-negative".into());
        }
        Ok(())
    }

    /// Checks that a schedule drives this decoder.
    pub fn check_schedule(&self, s: &QuerySchedule) -> Result<(), ModelError> {
        s.validate()?;
        if s.layers != self.layers || s.n_first != self.queries {
            return Err(ModelError::Config(format!(
                "schedule ({} queries, {} layers) does not fit decoder ({} queries, {} layers)",
                s.n_first, s.layers, self.queries, self.layers
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
}

#[derive(Debug, Clone, Copy)]
struct Branch {
    cross: Attn,
    norm1: Norm,
    ff1: Lin,
    ff2: Lin,
    norm2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    pos: Lin,
    self_attn: Attn,
    norm: Norm,
    class: Branch,
    boxes: Branch,
    cls_head: Lin,
    pts1: Lin,
    pts2: Lin,
}

#[derive(Debug, Clone)]
struct Layout {
    mem1: Lin,
    mem2: Lin,
    mem_norm: Norm,
    query_content: usize,
    query_ref: usize,
    layers: Vec<LayerLayout>,
}

/// Which part of the model a parameter belongs to. Used by tests that
/// perturb one branch at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Memory,
    Queries,
    /// Self-attention and positional projection of a layer.
    Shared(usize),
    ClassBranch(usize),
    BoxBranch(usize),
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn lin(&mut self, name: &str, input: usize, output: usize, gain: f64) -> Lin {
        let limit = gain * (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output).map(|_| self.rng.range(-limit, limit)).collect();
        let w = self.store.push(format!("{name}.w"), Matrix::from_vec(input, output, data));
        let b = self.store.push(format!("{name}.b"), Matrix::zeros(1, output));
        Lin { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let g = self.store.push(format!("{name}.g"), Matrix::from_vec(1, d, vec![1.0; d]));
        let b = self.store.push(format!("{name}.b"), Matrix::zeros(1, d));
        Norm { g, b }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.lin(&format!("{name}.q"), d, d, 1.0),
            k: self.lin(&format!("{name}.k"), d, d, 1.0),
            v: self.lin(&format!("{name}.v"), d, d, 1.0),
            o: self.lin(&format!("{name}.o"), d, d, 1.0),
        }
    }

    fn branch(&mut self, name: &str, cfg: &DecoderConfig) -> Branch {
        Branch {
            cross: self.attn(&format!("{name}.cross"), cfg.d),
            norm1: self.norm(&format!("{name}.norm1"), cfg.d),
            ff1: self.lin(&format!("{name}.ff1"), cfg.d, cfg.ffn, 1.0),
            ff2: self.lin(&format!("{name}.ff2"), cfg.ffn, cfg.d, 1.0),
            norm2: self.norm(&format!("{name}.norm2"), cfg.d),
        }
    }
}

fn build(cfg: &DecoderConfig, rng: &mut Rng) -> (ParamStore, Layout) {
    let mut b = Builder {
        store: ParamStore::new(),
        rng,
    };
    let d = cfg.d;
    let raw = memory_feature_dim(cfg.classes);
    let mem1 = b.lin("memory.embed1", raw, d, 1.0);
    let mem2 = b.lin("memory.embed2", d, d, 1.0);
    let mem_norm = b.norm("memory.norm", d);

    let content = (0..cfg.queries * d).map(|_| b.rng.normal()).collect();
    let query_content = b
        .store
        .push("queries.content", Matrix::from_vec(cfg.queries, d, content));
    let refs = (0..cfg.queries * 2)
        .map(|_| {
            let u = b.rng.range(0.05, 0.95);
            (u / (1.0 - u)).ln()
        })
        .collect();
    let query_ref = b
        .store
        .push("queries.reference", Matrix::from_vec(cfg.queries, 2, refs));

    let prior_bias = -((1.0 - cfg.prior_prob) / cfg.prior_prob).ln();
    let ring: Vec<f64> = (0..cfg.k_points)
        .flat_map(|k| {
            let a = std::f64::consts::TAU * k as f64 / cfg.k_points as f64;
            [cfg.init_spread * a.cos(), cfg.init_spread * a.sin()]
        })
        .collect();

    let mut layers = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let p = format!("layer{i}");
        let pos = b.lin(&format!("{p}.pos"), 16, d, 1.0);
        let self_attn = b.attn(&format!("{p}.self"), d);
        let norm = b.norm(&format!("{p}.norm"), d);
        let class = b.branch(&format!("{p}.class"), cfg);
        let boxes = b.branch(&format!("{p}.box"), cfg);
        let cls_head = b.lin(&format!("{p}.class.head"), d, cfg.classes, 1.0);
        b.store.values[cls_head.b].data.fill(prior_bias);
        let pts1 = b.lin(&format!("{p}.box.head1"), d, d, 1.0);
        let pts2 = b.lin(&format!("{p}.box.head2"), d, 2 * cfg.k_points, 0.1);
        b.store.values[pts2.b].data.copy_from_slice(&ring);
        layers.push(LayerLayout {
            pos,
            self_attn,
            norm,
            class,
            boxes,
            cls_head,
            pts1,
            pts2,
        });
    }
    let layout = Layout {
        mem1,
        mem2,
        mem_norm,
        query_content,
        query_ref,
        layers,
    };
    (b.store, layout)
}

/// Multiply-accumulate counts of one decoder layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOps {
    /// Query-query score and mixing products (`QK^T` and `AV`); quadratic
    /// in the number of queries.
    pub self_attn: u64,
    /// Self-attention input/output projections and the positional
    /// projection.
    pub self_attn_proj: u64,
    /// Query-memory score and mixing products of both branches.
    pub cross_attn: u64,
    /// Cross-attention projections of both branches.
    pub cross_attn_proj: u64,
    pub ffn: u64,
    pub heads: u64,
}

impl LayerOps {
    pub fn total(&self) -> u64 {
        self.self_attn + self.self_attn_proj + self.cross_attn + self.cross_attn_proj + self.ffn + self.heads
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub memory: u64,
    pub layers: Vec<LayerOps>,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.memory + self.layers.iter().map(LayerOps::total).sum::<u64>()
    }
}

#[derive(Clone, Copy)]
enum OpKind {
    Memory,
    SelfProj,
    CrossProj,
    Ffn,
    Heads,
}

/// Attention weights of one layer, one matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub self_attn: Vec<Matrix>,
    pub class_cross: Vec<Matrix>,
    pub box_cross: Vec<Matrix>,
}

/// Values produced by one decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    /// First-layer index of every live query.
    pub ids: Vec<usize>,
    /// Reference point (logit space) each query entered the layer with.
    pub refs: Vec<[f64; 2]>,
    pub class_features: Matrix,
    pub box_features: Matrix,
    /// `queries x classes`.
    pub logits: Matrix,
    /// `queries x 2K` pixel coordinates, interleaved x, y.
    pub points: Matrix,
}

impl LayerOutput {
    /// Highest sigmoid score of each query.
    pub fn class_probs(&self) -> Vec<f64> {
        (0..self.logits.rows)
            .map(|i| self.logits.row(i).iter().map(|&v| sigmoid(v)).fold(0.0, f64::max))
            .collect()
    }

    pub fn point_lists(&self) -> Vec<Vec<Point2>> {
        (0..self.points.rows)
            .map(|i| {
                self.points
                    .row(i)
                    .chunks_exact(2)
                    .map(|p| Point2::new(p[0], p[1]))
                    .collect()
            })
            .collect()
    }

    pub fn predictions(&self) -> Result<Vec<Prediction>, ModelError> {
        predictions_from(&self.logits, &self.points)
    }

    pub fn class_state(&self) -> QueryState {
        QueryState {
            features: self.class_features.clone(),
            refs: self.refs.clone(),
            ids: self.ids.clone(),
        }
    }

    pub fn box_state(&self) -> QueryState {
        QueryState {
            features: self.box_features.clone(),
            refs: self.refs.clone(),
            ids: self.ids.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub layers: Vec<LayerOutput>,
    pub ops: OpCounts,
    /// Filled only when requested.
    pub attention: Vec<LayerAttention>,
}

/// Recorded discrete choices and detached values of an earlier pass, so a
/// perturbed pass differentiates the same function the tape does.
#[derive(Clone, Copy)]
pub(crate) struct Frozen<'f> {
    pub keep: &'f [Vec<usize>],
    /// Reference values entering each layer.
    pub refs: &'f [Vec<[f64; 2]>],
}

/// Tape handles of one layer's outputs.
pub(crate) struct LayerVars {
    pub class_feat: Var,
    pub box_feat: Var,
    pub logits: Var,
    pub points: Var,
    pub ids: Vec<usize>,
    pub refs: Vec<[f64; 2]>,
    /// Reference each query hands to the next layer.
    pub next_refs: Vec<[f64; 2]>,
    /// Rows of the previous layer kept for this one (all rows for layer 0).
    pub keep: Vec<usize>,
}

pub(crate) struct Run<'a> {
    pub tape: Tape<'a>,
    pub layers: Vec<LayerVars>,
    pub ops: OpCounts,
    pub attention: Vec<LayerAttention>,
}

struct Ctx<'a> {
    cfg: &'a DecoderConfig,
    t: Tape<'a>,
    ops: OpCounts,
    trace: bool,
    attention: Vec<LayerAttention>,
}

impl<'a> Ctx<'a> {
    fn count(&mut self, layer: Option<usize>, kind: OpKind, macs: u64) {
        match (layer, kind) {
            (None, _) | (_, OpKind::Memory) => self.ops.memory += macs,
            (Some(i), kind) => {
                let l = &mut self.ops.layers[i];
                match kind {
                    OpKind::SelfProj => l.self_attn_proj += macs,
                    OpKind::CrossProj => l.cross_attn_proj += macs,
                    OpKind::Ffn => l.ffn += macs,
                    OpKind::Heads => l.heads += macs,
                    OpKind::Memory => unreachable!(),
                }
            }
        }
    }

    fn lin(&mut self, x: Var, l: Lin, layer: Option<usize>, kind: OpKind) -> Var {
        let w = self.t.param(l.w);
        let b = self.t.param(l.b);
        let (rows, (i, o)) = (self.t.value(x).rows, self.t.value(w).shape());
        self.count(layer, kind, (rows * i * o) as u64);
        let y = self.t.matmul(x, w);
        self.t.add_row(y, b)
    }

    fn norm(&mut self, x: Var, n: Norm) -> Var {
        let g = self.t.param(n.g);
        let b = self.t.param(n.b);
        self.t.layer_norm(x, g, b)
    }

    /// Multi-head attention. `bias` holds one additive score matrix per head.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        layer: usize,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        a: Attn,
        bias: Option<&[Matrix]>,
        is_self: bool,
    ) -> (Var, Vec<Matrix>) {
        let kind = if is_self { OpKind::SelfProj } else { OpKind::CrossProj };
        let q = self.lin(q_in, a.q, Some(layer), kind);
        let k = self.lin(k_in, a.k, Some(layer), kind);
        let v = self.lin(v_in, a.v, Some(layer), kind);
        let (nq, nk) = (self.t.value(q).rows, self.t.value(k).rows);
        let heads = self.cfg.heads;
        let dh = self.cfg.d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::new();
        for h in 0..heads {
            let qh = self.t.slice_cols(q, h * dh, dh);
            let kh = self.t.slice_cols(k, h * dh, dh);
            let vh = self.t.slice_cols(v, h * dh, dh);
            let s = self.t.matmul_nt(qh, kh);
            let mut s = self.t.scale(s, scale);
            if let Some(bias) = bias {
                let c = self.t.constant(bias[h].clone());
                s = self.t.add(s, c);
            }
            let p = self.t.softmax_rows(s);
            if self.trace {
                weights.push(self.t.value(p).clone());
            }
            outs.push(self.t.matmul(p, vh));
        }
        let quad = 2 * (nq * nk * dh * heads) as u64;
        let l = &mut self.ops.layers[layer];
        if is_self {
            l.self_attn += quad;
        } else {
            l.cross_attn += quad;
        }
        let o = self.t.concat_cols(&outs);
        (self.lin(o, a.o, Some(layer), kind), weights)
    }

    fn branch(&mut self, layer: usize, h: Var, qpos: Var, mem: Var, bias: &[Matrix], br: Branch) -> (Var, Vec<Matrix>) {
        let q = self.t.add(h, qpos);
        let (ca, w) = self.attention(layer, q, mem, mem, br.cross, Some(bias), false);
        let c1 = self.t.add(h, ca);
        let c1 = self.norm(c1, br.norm1);
        let f = self.lin(c1, br.ff1, Some(layer), OpKind::Ffn);
        let f = self.t.relu(f);
        let f = self.lin(f, br.ff2, Some(layer), OpKind::Ffn);
        let c2 = self.t.add(c1, f);
        (self.norm(c2, br.norm2), w)
    }

    fn memory(&mut self, lay: &Layout, memory: &SceneMemory) -> Var {
        let raw = self.t.constant(memory.tokens.clone());
        let m = self.lin(raw, lay.mem1, None, OpKind::Memory);
        let m = self.t.relu(m);
        let m = self.lin(m, lay.mem2, None, OpKind::Memory);
        self.norm(m, lay.mem_norm)
    }

    /// One decoder layer. `ref_var` carries the same values as `refs`; it is
    /// a parameter for the first layer and a constant afterwards.
    #[allow(clippy::too_many_arguments)]
    fn layer(
        &mut self,
        i: usize,
        l: &LayerLayout,
        x: Var,
        refs: &[[f64; 2]],
        ref_var: Var,
        mem: Var,
        mem_pos: &[[f64; 2]],
    ) -> (Var, Var, Var, Var, Vec<[f64; 2]>) {
        let cfg = self.cfg;
        let n = refs.len();
        let mut code = Matrix::zeros(n, 16);
        for (q, r) in refs.iter().enumerate() {
            code.row_mut(q).copy_from_slice(&sine_code(sigmoid(r[0]), sigmoid(r[1])));
        }
        let code = self.t.constant(code);
        let qpos = self.lin(code, l.pos, Some(i), OpKind::SelfProj);

        let qk = self.t.add(x, qpos);
        let (sa, self_w) = self.attention(i, qk, qk, x, l.self_attn, None, true);
        let h = self.t.add(x, sa);
        let h = self.norm(h, l.norm);

        let bias = locality_bias(refs, mem_pos, &cfg.locality);
        let (c, class_w) = self.branch(i, h, qpos, mem, &bias, l.class);
        let (b, box_w) = self.branch(i, h, qpos, mem, &bias, l.boxes);

        let logits = self.lin(c, l.cls_head, Some(i), OpKind::Heads);
        let hid = self.lin(b, l.pts1, Some(i), OpKind::Heads);
        let hid = self.t.relu(hid);
        let off = self.lin(hid, l.pts2, Some(i), OpKind::Heads);
        let z = self.t.add_pairs(off, ref_var);
        let next_refs = {
            let zv = self.t.value(z);
            (0..n)
                .map(|q| {
                    let (mut sx, mut sy) = (0.0, 0.0);
                    for p in zv.row(q).chunks_exact(2) {
                        sx += p[0];
                        sy += p[1];
                    }
                    let k = cfg.k_points as f64;
                    [
                        (sx / k).clamp(-REF_LIMIT, REF_LIMIT),
                        (sy / k).clamp(-REF_LIMIT, REF_LIMIT),
                    ]
                })
                .collect()
        };
        let s = self.t.sigmoid(z);
        let points = self.t.scale(s, cfg.image_size);
        if self.trace {
            self.attention.push(LayerAttention {
                self_attn: self_w,
                class_cross: class_w,
                box_cross: box_w,
            });
        }
        (c, b, logits, points, next_refs)
    }
}

/// `-beta_h * |sigmoid(ref) - pos|^2` for every head, query and memory cell.
fn locality_bias(refs: &[[f64; 2]], pos: &[[f64; 2]], betas: &[f64]) -> Vec<Matrix> {
    let mut dist = Matrix::zeros(refs.len(), pos.len());
    for (q, r) in refs.iter().enumerate() {
        let (u, v) = (sigmoid(r[0]), sigmoid(r[1]));
        for (m, p) in pos.iter().enumerate() {
            dist.data[q * pos.len() + m] = (u - p[0]).powi(2) + (v - p[1]).powi(2);
        }
    }
    betas
        .iter()
        .map(|&b| Matrix::from_vec(dist.rows, dist.cols, dist.data.iter().map(|d| -b * d).collect()))
        .collect()
}

fn refs_matrix(refs: &[[f64; 2]]) -> Matrix {
    Matrix::from_vec(refs.len(), 2, refs.iter().flatten().copied().collect())
}

fn class_probs_of(m: &Matrix) -> Vec<f64> {
    (0..m.rows)
        .map(|i| m.row(i).iter().map(|&v| sigmoid(v)).fold(0.0, f64::max))
        .collect()
}

/// Pairs row `i` of `logits` with row `i` of `points` (interleaved x, y).
pub fn predictions_from(logits: &Matrix, points: &Matrix) -> Result<Vec<Prediction>, ModelError> {
    (0..logits.rows)
        .map(|i| {
            let logits = ClassLogits::new(logits.row(i).to_vec())?;
            let pts = points.row(i).chunks_exact(2).map(|p| Point2::new(p[0], p[1])).collect();
            let points = PointSet::new(pts).map_err(|e| ModelError::Shape(format!("query {i} points: {e}")))?;
            Ok(Prediction { logits, points })
        })
        .collect()
}

/// Decoder parameters plus their layout.
#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: DecoderConfig,
    params: ParamStore,
    layout: Layout,
}

impl Decoder {
    /// Fresh model with weights drawn from a stream seeded by `seed`.
    pub fn new(cfg: DecoderConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let (params, layout) = build(&cfg, &mut rng);
        Ok(Self { cfg, params, layout })
    }

    /// Rebuilds a model from stored parameters; names and shapes must match
    /// the layout `cfg` implies.
    pub fn from_params(cfg: DecoderConfig, params: ParamStore) -> Result<Self, ModelError> {
        let mut model = Self::new(cfg, 0)?;
        if model.params.names != params.names {
            return Err(ModelError::Shape("parameter names differ from the layout".into()));
        }
        for (i, (have, want)) in params.values.iter().zip(&model.params.values).enumerate() {
            if have.shape() != want.shape() {
                return Err(ModelError::Shape(format!(
                    "{}: shape {:?}, expected {:?}",
                    params.names[i],
                    have.shape(),
                    want.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// The group a parameter (by store index) belongs to.
    pub fn param_group(&self, index: usize) -> ParamGroup {
        let name = &self.params.names[index];
        if name.starts_with("memory.") {
            return ParamGroup::Memory;
        }
        if name.starts_with("queries.") {
            return ParamGroup::Queries;
        }
        let rest = name.strip_prefix("layer").expect("layer parameter");
        let (num, tail) = rest.split_once('.').expect("dotted name");
        let i: usize = num.parse().expect("layer number");
        if tail.starts_with("class.") {
            ParamGroup::ClassBranch(i)
        } else if tail.starts_with("box.") {
            ParamGroup::BoxBranch(i)
        } else {
            ParamGroup::Shared(i)
        }
    }

    fn ctx<'a>(&'a self, store: &'a ParamStore, trace: bool) -> Ctx<'a> {
        Ctx {
            cfg: &self.cfg,
            t: Tape::new(store),
            ops: OpCounts {
                memory: 0,
                layers: vec![LayerOps::default(); self.cfg.layers],
            },
            trace,
            attention: Vec::new(),
        }
    }

    fn check_memory(&self, memory: &SceneMemory) -> Result<(), ModelError> {
        let want = (self.cfg.memory_tokens, memory_feature_dim(self.cfg.classes));
        if memory.tokens.shape() != want || memory.positions.len() != want.0 {
            return Err(ModelError::Shape(format!(
                "memory {:?} with {} positions, expected {want:?}",
                memory.tokens.shape(),
                memory.positions.len()
            )));
        }
        if !memory.tokens.is_finite() {
            return Err(ModelError::Shape("memory has non-finite entries".into()));
        }
        Ok(())
    }

    /// Records the full forward pass on a tape evaluated against `store`
    /// (the model's own parameters or a perturbed copy). `frozen` replaces
    /// top-k selection and the detached reference values with recorded ones.
    pub(crate) fn run<'a>(
        &'a self,
        store: &'a ParamStore,
        memory: &SceneMemory,
        sched: &QuerySchedule,
        frozen: Option<Frozen<'_>>,
        trace: bool,
    ) -> Result<Run<'a>, ModelError> {
        self.cfg.check_schedule(sched)?;
        self.check_memory(memory)?;
        let mut cx = self.ctx(store, trace);
        let mem = cx.memory(&self.layout, memory);
        let mut x = cx.t.param(self.layout.query_content);
        let mut ref_var = cx.t.param(self.layout.query_ref);
        let mut refs: Vec<[f64; 2]> = {
            let r = cx.t.value(ref_var);
            (0..r.rows).map(|i| [r.get(i, 0), r.get(i, 1)]).collect()
        };
        let mut ids: Vec<usize> = (0..self.cfg.queries).collect();
        let mut keep: Vec<usize> = ids.clone();
        let mut layers: Vec<LayerVars> = Vec::with_capacity(self.cfg.layers);
        for i in 0..self.cfg.layers {
            if let Some(prev) = layers.last() {
                keep = match frozen {
                    Some(f) => f
                        .keep
                        .get(i)
                        .cloned()
                        .ok_or_else(|| ModelError::Shape(format!("no frozen selection for layer {i}")))?,
                    None => {
                        let probs = class_probs_of(cx.t.value(prev.logits));
                        topk_indices(&probs, sched.query_count(i)?)?
                    }
                };
                let fused = cx.t.add(prev.class_feat, prev.box_feat);
                x = cx.t.gather_rows(fused, &keep);
                refs = keep.iter().map(|&q| prev.next_refs[q]).collect();
                ids = keep.iter().map(|&q| prev.ids[q]).collect();
                ref_var = cx.t.constant(refs_matrix(&refs));
            }
            if let Some(f) = frozen {
                refs = f
                    .refs
                    .get(i)
                    .cloned()
                    .ok_or_else(|| ModelError::Shape(format!("no frozen references for layer {i}")))?;
                if i > 0 {
                    ref_var = cx.t.constant(refs_matrix(&refs));
                }
            }
            let l = self.layout.layers[i];
            let (c, b, logits, points, next_refs) = cx.layer(i, &l, x, &refs, ref_var, mem, &memory.positions);
            layers.push(LayerVars {
                class_feat: c,
                box_feat: b,
                logits,
                points,
                ids: ids.clone(),
                refs: refs.clone(),
                next_refs,
                keep: keep.clone(),
            });
        }
        Ok(Run {
            tape: cx.t,
            layers,
            ops: cx.ops,
            attention: cx.attention,
        })
    }

    fn outputs(run: &Run<'_>) -> Vec<LayerOutput> {
        run.layers
            .iter()
            .map(|l| LayerOutput {
                ids: l.ids.clone(),
                refs: l.refs.clone(),
                class_features: run.tape.value(l.class_feat).clone(),
                box_features: run.tape.value(l.box_feat).clone(),
                logits: run.tape.value(l.logits).clone(),
                points: run.tape.value(l.points).clone(),
            })
            .collect()
    }

    /// All layers' heads for one scene, pruning queries between layers as
    /// the schedule dictates.
    pub fn forward(&self, memory: &SceneMemory, sched: &QuerySchedule) -> Result<ForwardOutput, ModelError> {
        self.forward_opts(memory, sched, false)
    }

    /// Like [`Decoder::forward`], optionally keeping every attention matrix.
    pub fn forward_opts(
        &self,
        memory: &SceneMemory,
        sched: &QuerySchedule,
        trace: bool,
    ) -> Result<ForwardOutput, ModelError> {
        let run = self.run(&self.params, memory, sched, None, trace)?;
        Ok(ForwardOutput {
            layers: Self::outputs(&run),
            ops: run.ops.clone(),
            attention: run.attention,
        })
    }

    /// Runs decoder layer `layer` alone on an explicit query state.
    pub fn decoder_layer(
        &self,
        layer: usize,
        state: &QueryState,
        memory: &SceneMemory,
    ) -> Result<(LayerOutput, LayerAttention), ModelError> {
        if layer >= self.cfg.layers {
            return Err(ModelError::LayerOutOfRange {
                index: layer,
                layers: self.cfg.layers,
            });
        }
        self.check_memory(memory)?;
        if state.features.cols != self.cfg.d || state.refs.len() != state.features.rows {
            return Err(ModelError::Shape(format!(
                "state {:?} with {} refs for d = {}",
                state.features.shape(),
                state.refs.len(),
                self.cfg.d
            )));
        }
        let mut cx = self.ctx(&self.params, true);
        let mem = cx.memory(&self.layout, memory);
        let x = cx.t.constant(state.features.clone());
        let ref_var = cx.t.constant(refs_matrix(&state.refs));
        let l = self.layout.layers[layer];
        let (c, b, logits, points, _) = cx.layer(layer, &l, x, &state.refs, ref_var, mem, &memory.positions);
        let out = LayerOutput {
            ids: state.ids.clone(),
            refs: state.refs.clone(),
            class_features: cx.t.value(c).clone(),
            box_features: cx.t.value(b).clone(),
            logits: cx.t.value(logits).clone(),
            points: cx.t.value(points).clone(),
        };
        let att = cx.attention.pop().expect("traced layer");
        Ok((out, att))
    }

    /// The learned first-layer query state.
    pub fn initial_state(&self) -> QueryState {
        let r = &self.params.values[self.layout.query_ref];
        QueryState {
            features: self.params.values[self.layout.query_content].clone(),
            refs: (0..r.rows).map(|i| [r.get(i, 0), r.get(i, 1)]).collect(),
            ids: (0..r.rows).collect(),
        }
    }
}
