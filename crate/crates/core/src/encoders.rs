//! Hashed bag-of-tokens encoders standing in for the dual-encoder towers and
//! the cross-encoder, together with the dot-product similarity and the
//! contrastive objective used to train them.
//!
//! An encoder maps a token sequence to `tanh(P · mean(T[ids]) + b)`, where
//! `T` is a `V_h × d` embedding table. The cross-encoder applies the same
//! recipe to `x ++ [SEPARATOR] ++ y`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numkit::{axpy, dot, log_sum_exp, Matrix, ParamSet, TensorVisitor};

pub type Embedding = Vec<f64>;

/// Token id reserved for the pair separator; hashed tokens land in `[1, V_h)`.
pub const SEPARATOR: u32 = 0;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyAfterTokenization);
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self ++ [SEPARATOR] ++ other`.
    pub fn pair(&self, other: &TokenSequence) -> TokenSequence {
        let mut ids = Vec::with_capacity(self.len() + other.len() + 1);
        ids.extend_from_slice(&self.0);
        ids.push(SEPARATOR);
        ids.extend_from_slice(&other.0);
        TokenSequence(ids)
    }
}

/// Lowercases, splits on non-alphanumeric characters and hashes each token
/// with FNV-1a into `[1, vocab)`.
pub fn tokenize(text: &str, vocab: usize) -> Result<TokenSequence> {
    if vocab < 2 {
        return Err(Error::InvalidArgument(format!(
            "hash vocabulary must be >= 2, got {vocab}"
        )));
    }
    let lowered = text.to_lowercase();
    let buckets = (vocab - 1) as u64;
    let ids: Vec<u32> = lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| (fnv1a64(t.as_bytes()) % buckets + 1) as u32)
        .collect();
    TokenSequence::new(ids)
}

/// One encoder tower: embedding table, square projection and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub table: Matrix,
    pub proj: Matrix,
    pub bias: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(vocab: usize, dim: usize) -> Self {
        Self {
            table: Matrix::zeros(vocab, dim),
            proj: Matrix::zeros(dim, dim),
            bias: vec![0.0; dim],
        }
    }

    /// Table entries in `[-1, 1]`; the projection starts near identity.
    pub fn random<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        let table = Matrix::uniform(vocab, dim, 1.0, rng);
        let mut proj = Matrix::uniform(dim, dim, 0.5 / (dim as f64).sqrt(), rng);
        for i in 0..dim {
            proj.set(i, i, proj.get(i, i) + 1.0);
        }
        Self {
            table,
            proj,
            bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.rows()
    }

    pub fn vocab(&self) -> usize {
        self.table.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab(), self.dim())
    }
}

impl ParamSet for EncoderParams {
    fn visit(&self, f: &mut TensorVisitor) {
        f(
            "table",
            &[self.table.rows(), self.table.cols()],
            self.table.as_slice(),
        );
        f(
            "proj",
            &[self.proj.rows(), self.proj.cols()],
            self.proj.as_slice(),
        );
        f("bias", &[self.bias.len()], &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("table", self.table.as_mut_slice());
        f("proj", self.proj.as_mut_slice());
        f("bias", &mut self.bias);
    }
}

/// Forward values kept for [`encode_backward`].
#[derive(Debug, Clone)]
pub struct EncodeCache {
    tokens: TokenSequence,
    pooled: Vec<f64>,
    output: Embedding,
}

impl EncodeCache {
    pub fn output(&self) -> &Embedding {
        &self.output
    }
}

fn mean_pool(tokens: &TokenSequence, table: &Matrix) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::EmptyAfterTokenization);
    }
    let mut pooled = vec![0.0; table.cols()];
    for &id in tokens.ids() {
        if id as usize >= table.rows() {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: table.rows(),
            });
        }
        axpy(&mut pooled, 1.0, table.row(id as usize));
    }
    let inv = 1.0 / tokens.len() as f64;
    pooled.iter_mut().for_each(|v| *v *= inv);
    Ok(pooled)
}

pub fn encode_with_cache(tokens: &TokenSequence, params: &EncoderParams) -> Result<EncodeCache> {
    let pooled = mean_pool(tokens, &params.table)?;
    let mut output = params.proj.matvec(&pooled)?;
    for (o, b) in output.iter_mut().zip(&params.bias) {
        *o = (*o + b).tanh();
    }
    Ok(EncodeCache {
        tokens: tokens.clone(),
        pooled,
        output,
    })
}

pub fn encode(tokens: &TokenSequence, params: &EncoderParams) -> Result<Embedding> {
    encode_with_cache(tokens, params).map(|c| c.output)
}

/// Accumulates `∂L/∂params` into `grads` given `∂L/∂output`.
pub fn encode_backward(
    cache: &EncodeCache,
    params: &EncoderParams,
    grad_out: &[f64],
    grads: &mut EncoderParams,
) {
    let pre: Vec<f64> = cache
        .output
        .iter()
        .zip(grad_out)
        .map(|(y, g)| g * (1.0 - y * y))
        .collect();
    grads.proj.add_outer(1.0, &pre, &cache.pooled);
    axpy(&mut grads.bias, 1.0, &pre);
    let g_pooled = params.proj.t_matvec(&pre);
    let inv = 1.0 / cache.tokens.len() as f64;
    for &id in cache.tokens.ids() {
        axpy(grads.table.row_mut(id as usize), inv, &g_pooled);
    }
}

/// Frozen pair encoder producing edge features and mining scores.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossEncoderParams {
    pub inner: EncoderParams,
    pub frozen: bool,
}

impl CrossEncoderParams {
    pub fn new(inner: EncoderParams) -> Self {
        Self {
            inner,
            frozen: false,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn dim(&self) -> usize {
        self.inner.dim()
    }
}

pub fn cross_encode(
    x: &TokenSequence,
    y: &TokenSequence,
    params: &CrossEncoderParams,
) -> Result<Embedding> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyAfterTokenization);
    }
    encode(&x.pair(y), &params.inner)
}

/// Scalar relevance read off a pair embedding with an all-ones readout.
pub fn cross_score(
    x: &TokenSequence,
    y: &TokenSequence,
    params: &CrossEncoderParams,
) -> Result<f64> {
    Ok(cross_encode(x, y, params)?.iter().sum())
}

pub fn similarity(h_q: &[f64], h_p: &[f64]) -> Result<f64> {
    if h_q.len() != h_p.len() {
        return Err(Error::shape("similarity", h_q.len(), h_p.len()));
    }
    Ok(dot(h_q, h_p))
}

/// `-log(e^{s⁺} / (e^{s⁺} + Σ e^{s⁻}))`.
pub fn contrastive_loss(s_pos: f64, s_negs: &[f64]) -> f64 {
    contrastive_loss_grad(s_pos, s_negs).0
}

/// Loss together with `∂L/∂s⁺` and `∂L/∂s⁻ᵢ`.
pub fn contrastive_loss_grad(s_pos: f64, s_negs: &[f64]) -> (f64, f64, Vec<f64>) {
    let mut all = Vec::with_capacity(s_negs.len() + 1);
    all.push(s_pos);
    all.extend_from_slice(s_negs);
    let lse = log_sum_exp(&all);
    // Clamp rounding below zero without masking a NaN.
    let raw = lse - s_pos;
    let loss = if raw < 0.0 { 0.0 } else { raw };
    let d_pos = (s_pos - lse).exp() - 1.0;
    let d_negs = s_negs.iter().map(|s| (s - lse).exp()).collect();
    (loss, d_pos, d_negs)
}

/// Query and passage towers. With `tied` set both towers hold identical
/// values and receive the summed gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub query: EncoderParams,
    pub passage: EncoderParams,
    pub tied: bool,
}

impl DualEncoder {
    pub fn random<R: Rng + ?Sized>(vocab: usize, dim: usize, tied: bool, rng: &mut R) -> Self {
        let query = EncoderParams::random(vocab, dim, rng);
        let passage = if tied {
            query.clone()
        } else {
            EncoderParams::random(vocab, dim, rng)
        };
        Self {
            query,
            passage,
            tied,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            query: self.query.zeros_like(),
            passage: self.passage.zeros_like(),
            tied: self.tied,
        }
    }

    pub fn dim(&self) -> usize {
        self.query.dim()
    }

    pub fn vocab(&self) -> usize {
        self.query.vocab()
    }

    pub fn encode_query(&self, tokens: &TokenSequence) -> Result<Embedding> {
        encode(tokens, &self.query)
    }

    pub fn encode_passage(&self, tokens: &TokenSequence) -> Result<Embedding> {
        encode(tokens, &self.passage)
    }

    /// Applies an SGD step from a gradient of the same shape.
    pub fn apply_gradient(&mut self, grad: &DualEncoder, lr: f64) {
        if self.tied {
            let mut merged = grad.query.clone();
            let flat = grad.passage.flatten();
            let mut offset = 0;
            merged.visit_mut(&mut |_, v| {
                axpy(v, 1.0, &flat[offset..offset + v.len()]);
                offset += v.len();
            });
            self.query.sgd_step(&merged, lr);
            self.passage = self.query.clone();
        } else {
            self.query.sgd_step(&grad.query, lr);
            self.passage.sgd_step(&grad.passage, lr);
        }
    }
}

impl ParamSet for DualEncoder {
    fn visit(&self, f: &mut TensorVisitor) {
        self.query
            .visit(&mut |n, d, v| f(&format!("query.{n}"), d, v));
        self.passage
            .visit(&mut |n, d, v| f(&format!("passage.{n}"), d, v));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.query
            .visit_mut(&mut |n, v| f(&format!("query.{n}"), v));
        self.passage
            .visit_mut(&mut |n, v| f(&format!("passage.{n}"), v));
    }
}

/// Query with one denoised positive and one hard negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrainingTriple {
    pub query: usize,
    pub positive: usize,
    pub negative: usize,
}

impl TrainingTriple {
    pub fn new(query: usize, positive: usize, negative: usize) -> Result<Self> {
        if positive == negative {
            return Err(Error::InvalidArgument(format!(
                "triple for query {query} uses passage {positive} as both positive and negative"
            )));
        }
        Ok(Self {
            query,
            positive,
            negative,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{affine, finite_difference_check};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tokenize_rejects_empty_text() {
        assert!(matches!(
            tokenize("", 1024),
            Err(Error::EmptyAfterTokenization)
        ));
        assert!(matches!(
            tokenize(" ,;! ", 1024),
            Err(Error::EmptyAfterTokenization)
        ));
        assert!(tokenize("a", 1).is_err());
    }

    #[test]
    fn tokenize_folds_case() {
        let t = tokenize("A a", 1024).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.ids()[0], t.ids()[1]);
    }

    #[test]
    fn tokenize_matches_reference_hash() {
        // FNV-1a 64 mod 1023 + 1, computed with an independent script.
        let t = tokenize("how long does shipping take", 1024).unwrap();
        assert_eq!(t.ids(), &[713, 417, 694, 927, 137]);
        assert_eq!(fnv1a64(b""), 14_695_981_039_346_656_037);
        assert_eq!(fnv1a64(b"a"), 12_638_187_200_555_641_996);
    }

    #[test]
    fn encode_zero_params_gives_zero() {
        let t = tokenize("x y z", 16).unwrap();
        let e = encode(&t, &EncoderParams::zeros(16, 4)).unwrap();
        assert_eq!(e, vec![0.0; 4]);
    }

    #[test]
    fn encode_single_token_is_tanh_of_row() {
        let mut p = EncoderParams::zeros(8, 3);
        p.proj = Matrix::identity(3);
        p.table.row_mut(5).copy_from_slice(&[0.3, -1.2, 2.0]);
        let e = encode(&TokenSequence::new(vec![5]).unwrap(), &p).unwrap();
        assert_eq!(e, vec![0.3f64.tanh(), (-1.2f64).tanh(), 2.0f64.tanh()]);
    }

    #[test]
    fn encode_repeated_token_equals_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = EncoderParams::random(64, 8, &mut rng);
        let one = encode(&tokenize("a", 64).unwrap(), &p).unwrap();
        let three = encode(&tokenize("a a a", 64).unwrap(), &p).unwrap();
        assert_eq!(one, three);
    }

    #[test]
    fn encode_rejects_out_of_range_token() {
        let p = EncoderParams::zeros(4, 2);
        let err = encode(&TokenSequence::new(vec![4]).unwrap(), &p).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { id: 4, vocab: 4 }));
    }

    #[test]
    fn cross_encode_is_order_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ce = CrossEncoderParams::new(EncoderParams::random(64, 8, &mut rng));
        let x = tokenize("alpha beta", 64).unwrap();
        let y = tokenize("gamma", 64).unwrap();
        let xy = cross_encode(&x, &y, &ce).unwrap();
        let yx = cross_encode(&y, &x, &ce).unwrap();
        assert_ne!(xy, yx);
        // Self pairs are well defined.
        assert_eq!(cross_encode(&x, &x, &ce).unwrap().len(), 8);
        let zero = CrossEncoderParams::new(EncoderParams::zeros(64, 8));
        assert_eq!(cross_encode(&x, &y, &zero).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(similarity(&[1.0, 2.0], &[3.0, -1.0]).unwrap(), 1.0);
        assert!(similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn contrastive_loss_examples() {
        assert!((contrastive_loss(0.0, &[0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(contrastive_loss(7.5, &[]), 0.0);
        // ln(1 + 2e^-2), evaluated at high precision offline.
        assert!((contrastive_loss(2.0, &[0.0, 0.0]) - 0.239_544_766_221_884_5).abs() < 1e-12);
    }

    #[test]
    fn triple_rejects_identical_passages() {
        assert!(TrainingTriple::new(0, 3, 3).is_err());
        assert!(TrainingTriple::new(0, 3, 4).is_ok());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let vocab = 64;
        let dual = DualEncoder::random(vocab, 8, false, &mut rng);
        let q = tokenize("red apple orchard", vocab).unwrap();
        let pos = tokenize("the apple orchard grows red fruit", vocab).unwrap();
        let negs = [
            tokenize("blue ocean waves", vocab).unwrap(),
            tokenize("granite mountain trail", vocab).unwrap(),
        ];
        let loss_of = |d: &DualEncoder| {
            let hq = d.encode_query(&q).unwrap();
            let sp = dot(&hq, &d.encode_passage(&pos).unwrap());
            let sn: Vec<f64> = negs
                .iter()
                .map(|n| dot(&hq, &d.encode_passage(n).unwrap()))
                .collect();
            contrastive_loss(sp, &sn)
        };
        // Analytic gradient.
        let qc = encode_with_cache(&q, &dual.query).unwrap();
        let pc = encode_with_cache(&pos, &dual.passage).unwrap();
        let ncs: Vec<_> = negs
            .iter()
            .map(|n| encode_with_cache(n, &dual.passage).unwrap())
            .collect();
        let sp = dot(qc.output(), pc.output());
        let sn: Vec<f64> = ncs.iter().map(|c| dot(qc.output(), c.output())).collect();
        let (_, dp, dn) = contrastive_loss_grad(sp, &sn);
        let mut grads = dual.zeros_like();
        let mut gq: Vec<f64> = pc.output().iter().map(|v| dp * v).collect();
        let gp: Vec<f64> = qc.output().iter().map(|v| dp * v).collect();
        encode_backward(&pc, &dual.passage, &gp, &mut grads.passage);
        for (c, g) in ncs.iter().zip(&dn) {
            axpy(&mut gq, *g, c.output());
            let gn: Vec<f64> = qc.output().iter().map(|v| g * v).collect();
            encode_backward(c, &dual.passage, &gn, &mut grads.passage);
        }
        encode_backward(&qc, &dual.query, &gq, &mut grads.query);

        let mut probe = dual.clone();
        let report = finite_difference_check(
            |flat| {
                probe.assign_flat(flat);
                loss_of(&probe)
            },
            &dual.flatten(),
            &grads.flatten(),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    proptest! {
        #[test]
        fn contrastive_loss_shift_invariant(
            pos in -10.0f64..10.0,
            negs in prop::collection::vec(-10.0f64..10.0, 0..8),
            c in -20.0f64..20.0,
        ) {
            let a = contrastive_loss(pos, &negs);
            let shifted: Vec<f64> = negs.iter().map(|n| n + c).collect();
            let b = contrastive_loss(pos + c, &shifted);
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn contrastive_loss_decreases_in_positive(
            pos in -10.0f64..10.0,
            delta in 0.01f64..5.0,
            negs in prop::collection::vec(-10.0f64..10.0, 1..8),
        ) {
            prop_assert!(contrastive_loss(pos + delta, &negs) < contrastive_loss(pos, &negs));
        }

        #[test]
        fn encode_output_is_bounded(seed in 0u64..1000, words in "[a-z]{1,6}( [a-z]{1,6}){0,6}") {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = EncoderParams::zeros(32, 6);
            p.table = Matrix::uniform(32, 6, 5.0, &mut rng);
            p.proj = Matrix::uniform(6, 6, 5.0, &mut rng);
            p.bias = (0..6).map(|_| rng.gen_range(-5.0..=5.0)).collect();
            let cache = encode_with_cache(&tokenize(&words, 32).unwrap(), &p).unwrap();
            let pre = affine(&p.proj, &cache.pooled, &p.bias).unwrap();
            for (y, z) in cache.output().iter().zip(&pre) {
                // tanh rounds to exactly ±1 in f64 once |z| exceeds ~19.
                if z.abs() < 18.0 {
                    prop_assert!(*y > -1.0 && *y < 1.0);
                } else {
                    prop_assert!(y.abs() <= 1.0);
                }
            }
        }

        #[test]
        fn similarity_commutes(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
            prop_assert_eq!(similarity(&a, &b).unwrap(), similarity(&b, &a).unwrap());
        }
    }
}
