//! Edge-featured graph attention, passage-interactive query fusion and gated
//! query-interactive passage fusion, each with a hand-written backward pass.
//!
//! A GAT head scores neighbor `j` of center `i` as
//! `e_ij = aᵀ[W_t h_i ‖ W_s h_j ‖ W_e h_ij]`, normalizes
//! `LeakyReLU(e_ij)` with a softmax over the neighborhood and returns
//! `σ(Σ_j α_ij W_s h_j)`. A layer concatenates `H` heads of width `d / H`.
//!
//! Neighborhood lists passed to the fusion functions always contain the
//! center's own self-loop entry; the caller decides where it sits and folds
//! its gradient back into the center.

use rand::Rng;

use crate::encoders::Embedding;
use crate::error::{Error, Result};
use crate::numkit::{
    axpy, concat, dot, elu, elu_grad, leaky_relu, leaky_relu_grad, masked_softmax, sigmoid, Matrix,
    ParamSet, TensorVisitor,
};

/// Output nonlinearity of a GAT head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Elu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => elu(x),
            Activation::Identity => x,
        }
    }

    fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Elu => elu_grad(x),
            Activation::Identity => 1.0,
        }
    }
}

/// How the aggregated query context enters the passage embedding.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum GateMode {
    /// `h'_p = σ(W_qp[h̃_p ‖ h_p] + b_qp) ⊙ h̃_p + h_p`.
    #[default]
    Gate,
    /// `h'_p = α · h̃_p + h_p`.
    ConstantAlpha(f64),
    /// `h'_p = h_p`: the graph is bypassed entirely.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionMode {
    pub gate: GateMode,
    /// When false the `W_e h_ij` term is dropped from the attention score.
    pub edge_features: bool,
    /// When true layer 2 consumes raw query embeddings and layer 1 is skipped.
    pub one_layer: bool,
}

impl Default for FusionMode {
    fn default() -> Self {
        Self {
            gate: GateMode::Gate,
            edge_features: true,
            one_layer: false,
        }
    }
}

impl FusionMode {
    pub fn identity() -> Self {
        Self {
            gate: GateMode::Identity,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.gate == GateMode::Identity
    }

    pub fn validate(&self) -> Result<()> {
        if let GateMode::ConstantAlpha(a) = self.gate {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidArgument(format!(
                    "constant alpha must lie in [0,1], got {a}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatHeadParams {
    /// `d_h × d`, applied to the center node.
    pub w_t: Matrix,
    /// `d_h × d`, applied to neighbor nodes.
    pub w_s: Matrix,
    /// `d_h × d`, applied to edge features.
    pub w_e: Matrix,
    /// `3·d_h`: target, source and edge segments.
    pub a: Vec<f64>,
}

impl GatHeadParams {
    pub fn zeros(dim: usize, head_dim: usize) -> Self {
        Self {
            w_t: Matrix::zeros(head_dim, dim),
            w_s: Matrix::zeros(head_dim, dim),
            w_e: Matrix::zeros(head_dim, dim),
            a: vec![0.0; 3 * head_dim],
        }
    }

    pub fn head_dim(&self) -> usize {
        self.w_t.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_t.cols()
    }

    fn a_target(&self) -> &[f64] {
        &self.a[..self.head_dim()]
    }

    fn a_source(&self) -> &[f64] {
        let h = self.head_dim();
        &self.a[h..2 * h]
    }

    fn a_edge(&self) -> &[f64] {
        let h = self.head_dim();
        &self.a[2 * h..]
    }
}

/// Every trainable weight of the two GAT layers and both fusion maps.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    pub layer1: Vec<GatHeadParams>,
    pub layer2: Vec<GatHeadParams>,
    /// `d × 2d`
    pub w_pq: Matrix,
    pub b_pq: Vec<f64>,
    /// `d × 2d`
    pub w_qp: Matrix,
    pub b_qp: Vec<f64>,
    pub slope: f64,
    pub activation: Activation,
}

impl GnnParams {
    pub fn zeros(dim: usize, heads: usize, slope: f64, activation: Activation) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "head count {heads} must be positive and divide dimension {dim}"
            )));
        }
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "leaky slope must lie in (0,1), got {slope}"
            )));
        }
        let hd = dim / heads;
        Ok(Self {
            layer1: vec![GatHeadParams::zeros(dim, hd); heads],
            layer2: vec![GatHeadParams::zeros(dim, hd); heads],
            w_pq: Matrix::zeros(dim, 2 * dim),
            b_pq: vec![0.0; dim],
            w_qp: Matrix::zeros(dim, 2 * dim),
            b_qp: vec![0.0; dim],
            slope,
            activation,
        })
    }

    /// Small random weights around a pass-through configuration: each head's
    /// `W_s` starts at its slice of the identity and `W_pq` starts by copying
    /// `h_q`, so an untrained model adds attention-weighted query context to
    /// each passage.
    pub fn random<R: Rng + ?Sized>(
        dim: usize,
        heads: usize,
        slope: f64,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(dim, heads, slope, activation)?;
        let hd = dim / heads;
        let scale = 0.5 / (dim as f64).sqrt();
        for layer in [&mut p.layer1, &mut p.layer2] {
            for (h, head) in layer.iter_mut().enumerate() {
                head.w_t = Matrix::uniform(hd, dim, scale, rng);
                head.w_s = Matrix::uniform(hd, dim, scale, rng);
                for r in 0..hd {
                    let c = h * hd + r;
                    head.w_s.set(r, c, head.w_s.get(r, c) + 1.0);
                }
                head.w_e = Matrix::uniform(hd, dim, scale, rng);
                head.a = (0..3 * hd).map(|_| rng.gen_range(-scale..=scale)).collect();
            }
        }
        p.w_pq = Matrix::uniform(dim, 2 * dim, scale, rng);
        for r in 0..dim {
            p.w_pq.set(r, dim + r, p.w_pq.get(r, dim + r) + 1.0);
        }
        p.w_qp = Matrix::uniform(dim, 2 * dim, scale, rng);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim(), self.heads(), self.slope, self.activation)
            .expect("shape already validated")
    }

    pub fn dim(&self) -> usize {
        self.b_pq.len()
    }

    pub fn heads(&self) -> usize {
        self.layer1.len()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads()
    }
}

impl ParamSet for GnnParams {
    fn visit(&self, f: &mut TensorVisitor) {
        for (lname, layer) in [("layer1", &self.layer1), ("layer2", &self.layer2)] {
            for (h, head) in layer.iter().enumerate() {
                for (tname, m) in [("w_t", &head.w_t), ("w_s", &head.w_s), ("w_e", &head.w_e)] {
                    f(
                        &format!("{lname}.head{h}.{tname}"),
                        &[m.rows(), m.cols()],
                        m.as_slice(),
                    );
                }
                f(&format!("{lname}.head{h}.a"), &[head.a.len()], &head.a);
            }
        }
        f(
            "w_pq",
            &[self.w_pq.rows(), self.w_pq.cols()],
            self.w_pq.as_slice(),
        );
        f("b_pq", &[self.b_pq.len()], &self.b_pq);
        f(
            "w_qp",
            &[self.w_qp.rows(), self.w_qp.cols()],
            self.w_qp.as_slice(),
        );
        f("b_qp", &[self.b_qp.len()], &self.b_qp);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (lname, layer) in [("layer1", &mut self.layer1), ("layer2", &mut self.layer2)] {
            for (h, head) in layer.iter_mut().enumerate() {
                f(&format!("{lname}.head{h}.w_t"), head.w_t.as_mut_slice());
                f(&format!("{lname}.head{h}.w_s"), head.w_s.as_mut_slice());
                f(&format!("{lname}.head{h}.w_e"), head.w_e.as_mut_slice());
                f(&format!("{lname}.head{h}.a"), &mut head.a);
            }
        }
        f("w_pq", self.w_pq.as_mut_slice());
        f("b_pq", &mut self.b_pq);
        f("w_qp", self.w_qp.as_mut_slice());
        f("b_qp", &mut self.b_qp);
    }
}

/// Forward values of one head over one neighborhood.
#[derive(Debug, Clone)]
pub struct HeadCache {
    target: Vec<f64>,
    sources: Vec<Vec<f64>>,
    edges: Vec<Vec<f64>>,
    logits: Vec<f64>,
    weights: Vec<f64>,
    pre: Vec<f64>,
}

impl HeadCache {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

fn check_neighborhood(
    center: &[f64],
    neighbors: &[&[f64]],
    edges: &[&[f64]],
    use_edges: bool,
) -> Result<()> {
    if neighbors.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    if use_edges && edges.len() != neighbors.len() {
        return Err(Error::shape(
            "neighborhood edge features",
            neighbors.len(),
            edges.len(),
        ));
    }
    let d = center.len();
    if let Some(bad) = neighbors
        .iter()
        .chain(if use_edges { edges } else { &[] })
        .find(|v| v.len() != d)
    {
        return Err(Error::shape("neighborhood feature width", d, bad.len()));
    }
    Ok(())
}

fn head_forward(
    head: &GatHeadParams,
    center: &[f64],
    neighbors: &[&[f64]],
    edges: &[&[f64]],
    slope: f64,
    use_edges: bool,
) -> Result<HeadCache> {
    let target = head.w_t.matvec_unchecked(center);
    let base = dot(head.a_target(), &target);
    let sources: Vec<Vec<f64>> = neighbors
        .iter()
        .map(|n| head.w_s.matvec_unchecked(n))
        .collect();
    let edges: Vec<Vec<f64>> = if use_edges {
        edges.iter().map(|e| head.w_e.matvec_unchecked(e)).collect()
    } else {
        Vec::new()
    };
    let logits: Vec<f64> = sources
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let mut e = base + dot(head.a_source(), s);
            if use_edges {
                e += dot(head.a_edge(), &edges[j]);
            }
            e
        })
        .collect();
    let activated: Vec<f64> = logits.iter().map(|&e| leaky_relu(e, slope)).collect();
    let weights = masked_softmax(&activated)?;
    let mut pre = vec![0.0; head.head_dim()];
    for (w, s) in weights.iter().zip(&sources) {
        axpy(&mut pre, *w, s);
    }
    Ok(HeadCache {
        target,
        sources,
        edges,
        logits,
        weights,
        pre,
    })
}

/// Accumulates parameter gradients; returns `(∂/∂center, ∂/∂neighbor_j)`.
#[allow(clippy::too_many_arguments)]
fn head_backward(
    head: &GatHeadParams,
    grads: &mut GatHeadParams,
    cache: &HeadCache,
    center: &[f64],
    neighbors: &[&[f64]],
    edges: &[&[f64]],
    g_out: &[f64],
    slope: f64,
    use_edges: bool,
    activation: Activation,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let hd = head.head_dim();
    let g_pre: Vec<f64> = g_out
        .iter()
        .zip(&cache.pre)
        .map(|(g, z)| g * activation.grad(*z))
        .collect();
    let g_alpha: Vec<f64> = cache.sources.iter().map(|s| dot(&g_pre, s)).collect();
    let mean: f64 = cache.weights.iter().zip(&g_alpha).map(|(a, g)| a * g).sum();
    let g_logit: Vec<f64> = cache
        .weights
        .iter()
        .zip(&g_alpha)
        .zip(&cache.logits)
        .map(|((a, ga), e)| a * (ga - mean) * leaky_relu_grad(*e, slope))
        .collect();

    let total: f64 = g_logit.iter().sum();
    axpy(&mut grads.a[..hd], total, &cache.target);
    let g_target: Vec<f64> = head.a_target().iter().map(|a| a * total).collect();
    grads.w_t.add_outer(1.0, &g_target, center);
    let g_center = head.w_t.t_matvec(&g_target);

    let mut g_neighbors = Vec::with_capacity(neighbors.len());
    for j in 0..neighbors.len() {
        let ge = g_logit[j];
        axpy(&mut grads.a[hd..2 * hd], ge, &cache.sources[j]);
        let mut g_source: Vec<f64> = g_pre.iter().map(|g| g * cache.weights[j]).collect();
        axpy(&mut g_source, ge, head.a_source());
        grads.w_s.add_outer(1.0, &g_source, neighbors[j]);
        g_neighbors.push(head.w_s.t_matvec(&g_source));
        if use_edges {
            axpy(&mut grads.a[2 * hd..], ge, &cache.edges[j]);
            grads.w_e.add_outer(ge, head.a_edge(), edges[j]);
        }
    }
    (g_center, g_neighbors)
}

/// Normalized attention of `center` over its neighborhood for one head.
pub fn attention_weights(
    center: &[f64],
    neighbors: &[Embedding],
    edge_feats: &[Embedding],
    head: &GatHeadParams,
    slope: f64,
) -> Result<Vec<f64>> {
    let n: Vec<&[f64]> = neighbors.iter().map(Vec::as_slice).collect();
    let e: Vec<&[f64]> = edge_feats.iter().map(Vec::as_slice).collect();
    check_neighborhood(center, &n, &e, true)?;
    Ok(head_forward(head, center, &n, &e, slope, true)?.weights)
}

/// `σ(Σ_j w_j W_s n_j)` for one head.
pub fn gat_aggregate(
    weights: &[f64],
    neighbors: &[Embedding],
    head: &GatHeadParams,
    activation: Activation,
) -> Result<Vec<f64>> {
    if weights.len() != neighbors.len() {
        return Err(Error::shape(
            "gat_aggregate weights",
            neighbors.len(),
            weights.len(),
        ));
    }
    if neighbors.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "attention weights sum to {total}, expected 1"
        )));
    }
    let mut pre = vec![0.0; head.head_dim()];
    for (w, n) in weights.iter().zip(neighbors) {
        axpy(&mut pre, *w, &head.w_s.matvec(n)?);
    }
    Ok(pre.into_iter().map(|z| activation.apply(z)).collect())
}

/// Forward values of a multi-head layer.
#[derive(Debug, Clone)]
pub struct LayerCache {
    heads: Vec<HeadCache>,
    output: Vec<f64>,
}

impl LayerCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn heads(&self) -> &[HeadCache] {
        &self.heads
    }

    /// Attention weights averaged over heads.
    pub fn mean_weights(&self) -> Vec<f64> {
        let n = self.heads[0].weights.len();
        let mut out = vec![0.0; n];
        for h in &self.heads {
            axpy(&mut out, 1.0 / self.heads.len() as f64, &h.weights);
        }
        out
    }

    /// Smallest `|e_ij|` across heads; gradient checks need this away from 0.
    pub fn min_abs_logit(&self) -> f64 {
        self.heads
            .iter()
            .flat_map(|h| h.logits.iter())
            .fold(f64::INFINITY, |m, e| m.min(e.abs()))
    }
}

fn layer_forward(
    heads: &[GatHeadParams],
    center: &[f64],
    neighbors: &[&[f64]],
    edges: &[&[f64]],
    slope: f64,
    use_edges: bool,
    activation: Activation,
) -> Result<LayerCache> {
    check_neighborhood(center, neighbors, edges, use_edges)?;
    let mut caches = Vec::with_capacity(heads.len());
    let mut output = Vec::with_capacity(center.len());
    for head in heads {
        let c = head_forward(head, center, neighbors, edges, slope, use_edges)?;
        output.extend(c.pre.iter().map(|&z| activation.apply(z)));
        caches.push(c);
    }
    Ok(LayerCache {
        heads: caches,
        output,
    })
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    heads: &[GatHeadParams],
    grads: &mut [GatHeadParams],
    cache: &LayerCache,
    center: &[f64],
    neighbors: &[&[f64]],
    edges: &[&[f64]],
    g_out: &[f64],
    slope: f64,
    use_edges: bool,
    activation: Activation,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut g_center = vec![0.0; center.len()];
    let mut g_neighbors = vec![vec![0.0; center.len()]; neighbors.len()];
    for (h, ((head, grad), hc)) in heads
        .iter()
        .zip(grads.iter_mut())
        .zip(&cache.heads)
        .enumerate()
    {
        let hd = head.head_dim();
        let g_slice = &g_out[h * hd..(h + 1) * hd];
        if g_slice.iter().all(|&g| g == 0.0) {
            continue;
        }
        let (gc, gn) = head_backward(
            head, grad, hc, center, neighbors, edges, g_slice, slope, use_edges, activation,
        );
        axpy(&mut g_center, 1.0, &gc);
        for (acc, g) in g_neighbors.iter_mut().zip(&gn) {
            axpy(acc, 1.0, g);
        }
    }
    (g_center, g_neighbors)
}

/// Layer-1 aggregate `h̃_q` and the passage-interactive query embedding
/// `h'_q = W_pq[h̃_q ‖ h_q] + b_pq`.
#[derive(Debug, Clone)]
pub struct QueryFusion {
    layer: LayerCache,
    joined: Vec<f64>,
    output: Embedding,
}

impl QueryFusion {
    pub fn output(&self) -> &Embedding {
        &self.output
    }

    pub fn aggregate(&self) -> &[f64] {
        self.layer.output()
    }

    pub fn layer(&self) -> &LayerCache {
        &self.layer
    }
}

pub fn fuse_query_forward(
    h_q: &[f64],
    neighbors: &[&[f64]],
    edges: &[&[f64]],
    params: &GnnParams,
    use_edges: bool,
) -> Result<QueryFusion> {
    if h_q.len() != params.dim() {
        return Err(Error::shape("fuse_query input", params.dim(), h_q.len()));
    }
    let layer = layer_forward(
        &params.layer1,
        h_q,
        neighbors,
        edges,
        params.slope,
        use_edges,
        params.activation,
    )?;
    let joined = concat(layer.output(), h_q);
    let mut output = params.w_pq.matvec_unchecked(&joined);
    axpy(&mut output, 1.0, &params.b_pq);
    Ok(QueryFusion {
        layer,
        joined,
        output,
    })
}

/// Returns `(∂/∂h_q, ∂/∂neighbor_j)`. The center gradient covers both the
/// attention target and the `h_q` half of the concatenation; gradients of the
/// self-loop neighbor entry are returned separately in the neighbor list.
#[allow(clippy::too_many_arguments)]
pub fn fuse_query_backward(
    params: &GnnParams,
    grads: &mut GnnParams,
    fusion: &QueryFusion,
    h_q: &[f64],
    neighbors: &[&[f64]],
    edges: &[&[f64]],
    g_out: &[f64],
    use_edges: bool,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = params.dim();
    grads.w_pq.add_outer(1.0, g_out, &fusion.joined);
    axpy(&mut grads.b_pq, 1.0, g_out);
    let g_joined = params.w_pq.t_matvec(g_out);
    let (mut g_center, g_neighbors) = layer_backward(
        &params.layer1,
        &mut grads.layer1,
        &fusion.layer,
        h_q,
        neighbors,
        edges,
        &g_joined[..d],
        params.slope,
        use_edges,
        params.activation,
    );
    axpy(&mut g_center, 1.0, &g_joined[d..]);
    (g_center, g_neighbors)
}

/// Passage-interactive query embedding `h'_q`. `neighbor_passage_feats` must
/// include the query's own self-loop entry.
pub fn fuse_query(
    h_q: &[f64],
    neighbor_passage_feats: &[Embedding],
    edge_feats: &[Embedding],
    params: &GnnParams,
    mode: FusionMode,
) -> Result<Embedding> {
    let n: Vec<&[f64]> = neighbor_passage_feats.iter().map(Vec::as_slice).collect();
    let e: Vec<&[f64]> = edge_feats.iter().map(Vec::as_slice).collect();
    Ok(fuse_query_forward(h_q, &n, &e, params, mode.edge_features)?.output)
}

/// Layer-2 aggregate `h̃_p`, gate values and the final `h'_p`.
#[derive(Debug, Clone)]
pub struct PassageFusion {
    layer: Option<LayerCache>,
    joined: Vec<f64>,
    gate: Vec<f64>,
    output: Embedding,
}

impl PassageFusion {
    pub fn output(&self) -> &Embedding {
        &self.output
    }

    pub fn layer(&self) -> Option<&LayerCache> {
        self.layer.as_ref()
    }

    /// Filter-gate values; empty outside gate mode.
    pub fn gate(&self) -> &[f64] {
        &self.gate
    }
}

pub fn fuse_passage_forward(
    h_p: &[f64],
    neighbors: &[&[f64]],
    edges: &[&[f64]],
    params: &GnnParams,
    mode: FusionMode,
) -> Result<PassageFusion> {
    mode.validate()?;
    if h_p.len() != params.dim() {
        return Err(Error::shape("fuse_passage input", params.dim(), h_p.len()));
    }
    if mode.is_identity() {
        return Ok(PassageFusion {
            layer: None,
            joined: Vec::new(),
            gate: Vec::new(),
            output: h_p.to_vec(),
        });
    }
    let layer = layer_forward(
        &params.layer2,
        h_p,
        neighbors,
        edges,
        params.slope,
        mode.edge_features,
        params.activation,
    )?;
    let h_tilde = layer.output();
    let (joined, gate, output) = match mode.gate {
        GateMode::Gate => {
            let joined = concat(h_tilde, h_p);
            let mut z = params.w_qp.matvec_unchecked(&joined);
            axpy(&mut z, 1.0, &params.b_qp);
            let gate: Vec<f64> = z.into_iter().map(sigmoid).collect();
            let output = gate
                .iter()
                .zip(h_tilde)
                .zip(h_p)
                .map(|((f, t), p)| f * t + p)
                .collect();
            (joined, gate, output)
        }
        GateMode::ConstantAlpha(alpha) => {
            let output = h_tilde
                .iter()
                .zip(h_p)
                .map(|(t, p)| alpha * t + p)
                .collect();
            (Vec::new(), Vec::new(), output)
        }
        GateMode::Identity => unreachable!("handled above"),
    };
    Ok(PassageFusion {
        layer: Some(layer),
        joined,
        gate,
        output,
    })
}

/// Returns `(∂/∂h_p, ∂/∂neighbor_j)`; see [`fuse_query_backward`].
#[allow(clippy::too_many_arguments)]
pub fn fuse_passage_backward(
    params: &GnnParams,
    grads: &mut GnnParams,
    fusion: &PassageFusion,
    h_p: &[f64],
    neighbors: &[&[f64]],
    edges: &[&[f64]],
    g_out: &[f64],
    mode: FusionMode,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = params.dim();
    let Some(layer) = fusion.layer.as_ref() else {
        return (g_out.to_vec(), vec![vec![0.0; d]; neighbors.len()]);
    };
    let h_tilde = layer.output();
    let mut g_h_p = g_out.to_vec();
    let g_tilde: Vec<f64> = match mode.gate {
        GateMode::Gate => {
            let g_z: Vec<f64> = g_out
                .iter()
                .zip(h_tilde)
                .zip(&fusion.gate)
                .map(|((g, t), f)| g * t * f * (1.0 - f))
                .collect();
            grads.w_qp.add_outer(1.0, &g_z, &fusion.joined);
            axpy(&mut grads.b_qp, 1.0, &g_z);
            let g_joined = params.w_qp.t_matvec(&g_z);
            axpy(&mut g_h_p, 1.0, &g_joined[d..]);
            let mut g_tilde: Vec<f64> =
                g_out.iter().zip(&fusion.gate).map(|(g, f)| g * f).collect();
            axpy(&mut g_tilde, 1.0, &g_joined[..d]);
            g_tilde
        }
        GateMode::ConstantAlpha(alpha) => g_out.iter().map(|g| alpha * g).collect(),
        GateMode::Identity => unreachable!("identity fusion has no layer cache"),
    };
    let (g_center, g_neighbors) = layer_backward(
        &params.layer2,
        &mut grads.layer2,
        layer,
        h_p,
        neighbors,
        edges,
        &g_tilde,
        params.slope,
        mode.edge_features,
        params.activation,
    );
    axpy(&mut g_h_p, 1.0, &g_center);
    (g_h_p, g_neighbors)
}

/// Query-interactive passage embedding `h'_p`. `neighbor_query_fused` must
/// include the passage's own self-loop entry (`h_p`).
pub fn fuse_passage(
    h_p: &[f64],
    neighbor_query_fused: &[Embedding],
    edge_feats: &[Embedding],
    params: &GnnParams,
    mode: FusionMode,
) -> Result<Embedding> {
    let n: Vec<&[f64]> = neighbor_query_fused.iter().map(Vec::as_slice).collect();
    let e: Vec<&[f64]> = edge_feats.iter().map(Vec::as_slice).collect();
    Ok(fuse_passage_forward(h_p, &n, &e, params, mode)?.output)
}
