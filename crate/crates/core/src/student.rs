//! Frozen dual encoder with learnable positive and negative prompt contexts.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{cosine_raw, dot, l2_normalize, norm, softmax, Distribution, Flagged, Matrix, Tape, Var};
use crate::teacher::{derive_seed, TeacherOracle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Positive,
    Negative,
}

/// Learnable context vectors `v₁…v_L` plus the frozen per-class tokens.
#[derive(Debug, Clone)]
pub struct PromptContext {
    pub kind: PromptKind,
    context: Vec<f64>,
    context_len: usize,
    class_tokens: Arc<Matrix>,
}

impl PromptContext {
    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn dim(&self) -> usize {
        self.class_tokens.cols()
    }

    pub fn vector(&self, l: usize) -> &[f64] {
        let d = self.dim();
        &self.context[l * d..(l + 1) * d]
    }

    pub fn class_tokens(&self) -> &Matrix {
        &self.class_tokens
    }

    /// Sum of the context vectors.
    fn context_sum(&self) -> Vec<f64> {
        let d = self.dim();
        let mut s = vec![0.0; d];
        for chunk in self.context.chunks(d) {
            s.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
        }
        s
    }
}

/// Frozen towers: `f(x) = normalize(F·x)` and
/// `g(V(l_c)) = normalize(G · mean(v₁…v_L, w_c))`.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    image_map: Arc<Matrix>,
    text_map: Arc<Matrix>,
}

impl DualEncoder {
    pub fn new(image_map: Matrix, text_map: Matrix) -> Result<Self> {
        if image_map.rows() != text_map.rows() || text_map.rows() != text_map.cols() {
            return Err(Error::Shape {
                expected: image_map.rows(),
                actual: text_map.rows(),
            });
        }
        Ok(Self {
            image_map: Arc::new(image_map),
            text_map: Arc::new(text_map),
        })
    }

    /// Random towers for small synthetic instances.
    pub fn random(feature_dim: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image_map = gaussian(dim, feature_dim, 1.0 / (feature_dim as f64).sqrt(), &mut rng);
        let text_map = gaussian(dim, dim, 1.0 / (dim as f64).sqrt(), &mut rng);
        Self::new(image_map, text_map).expect("consistent shapes")
    }

    pub fn dim(&self) -> usize {
        self.text_map.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.image_map.cols()
    }

    pub fn image_map(&self) -> &Arc<Matrix> {
        &self.image_map
    }

    pub fn text_map(&self) -> &Arc<Matrix> {
        &self.text_map
    }

    pub fn image_embedding(&self, x: &[f64]) -> Result<Flagged<Vec<f64>>> {
        if x.len() != self.feature_dim() {
            return Err(Error::Shape {
                expected: self.feature_dim(),
                actual: x.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                coordinate: i,
                detail: "crop feature is not finite".into(),
            });
        }
        Ok(l2_normalize(&self.image_map.matvec(x)))
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for v in m.row_mut(r) {
            *v = std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for q in &rows {
                let d = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let nv = norm(&v);
        if nv > 1e-8 {
            v.iter_mut().for_each(|a| *a /= nv);
            rows.push(v);
        }
    }
    Matrix::from_rows(&rows).expect("square")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub embed_dim: usize,
    pub context_len: usize,
    pub tau: f64,
    pub init_std: f64,
    pub negative_perturbation: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            context_len: 4,
            tau: 0.07,
            init_std: 0.02,
            negative_perturbation: 0.02,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_len == 0 {
            return Err(Error::config("student.context_len must be at least 1"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("student.embed_dim must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("student.tau must be positive"));
        }
        if !(self.init_std >= 0.0) || !(self.negative_perturbation >= 0.0) {
            return Err(Error::config("initialization scales must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StudentState {
    pub positive: PromptContext,
    pub negative: PromptContext,
    pub encoder: DualEncoder,
    pub tau: f64,
}

impl StudentState {
    pub fn from_parts(
        encoder: DualEncoder,
        class_tokens: Matrix,
        positive: Vec<f64>,
        negative: Vec<f64>,
        context_len: usize,
        tau: f64,
    ) -> Result<Self> {
        let d = encoder.dim();
        if class_tokens.cols() != d {
            return Err(Error::Shape {
                expected: d,
                actual: class_tokens.cols(),
            });
        }
        if class_tokens.rows() == 0 {
            return Err(Error::config("student needs at least one class"));
        }
        if context_len == 0 {
            return Err(Error::config("context length must be at least 1"));
        }
        for ctx in [&positive, &negative] {
            if ctx.len() != context_len * d {
                return Err(Error::Shape {
                    expected: context_len * d,
                    actual: ctx.len(),
                });
            }
        }
        if !(tau > 0.0) {
            return Err(Error::config("student temperature must be positive"));
        }
        let tokens = Arc::new(class_tokens);
        let prompt = |kind, context| PromptContext {
            kind,
            context,
            context_len,
            class_tokens: Arc::clone(&tokens),
        };
        Ok(Self {
            positive: prompt(PromptKind::Positive, positive),
            negative: prompt(PromptKind::Negative, negative),
            encoder,
            tau,
        })
    }

    /// Student aligned to a teacher: the image tower keeps the teacher's
    /// signal subspace isometrically, and class tokens are the teacher
    /// prototypes carried into text space. Frozen parts depend only on the
    /// teacher and `embed_dim`; `init_seed` drives context initialization.
    pub fn from_teacher(teacher: &TeacherOracle, config: &StudentConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let signal = teacher.signal_directions();
        let d = config.embed_dim;
        let dt = teacher.config().embed_dim;
        if d < signal.len() || d > dt {
            return Err(Error::config(format!(
                "student.embed_dim must lie in [{}, {dt}], got {d}",
                signal.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(teacher.frozen_seed(), 0x57DE_0000 + d as u64));
        // rows: teacher signal directions, then random completions
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut pending = signal.into_iter();
        while rows.len() < d {
            let mut v = pending
                .next()
                .unwrap_or_else(|| (0..dt).map(|_| rng.sample(StandardNormal)).collect());
            for _ in 0..2 {
                for q in &rows {
                    let c = dot(&v, q);
                    v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
                }
            }
            let n = norm(&v);
            if n > 1e-8 {
                v.iter_mut().for_each(|a| *a /= n);
                rows.push(v);
            }
        }
        let reduce = random_orthogonal(d, &mut rng).matmul(&Matrix::from_rows(&rows)?)?;
        let image_map = reduce.matmul(teacher.projection())?;
        let text_map = random_orthogonal(d, &mut rng);

        let token_rows: Vec<Vec<f64>> = teacher
            .prototypes()
            .iter()
            .map(|p| {
                let u = l2_normalize(&reduce.matvec(p)).value;
                text_map.matvec_transposed(&u)
            })
            .collect();
        let class_tokens = Matrix::from_rows(&token_rows)?;

        let mut init = ChaCha8Rng::seed_from_u64(derive_seed(init_seed, 0xC0_7E47));
        let l = config.context_len;
        let ctx_law = Normal::new(0.0, config.init_std).map_err(|e| Error::config(e.to_string()))?;
        let perturb = Normal::new(0.0, config.negative_perturbation).map_err(|e| Error::config(e.to_string()))?;
        let positive: Vec<f64> = (0..l * d).map(|_| ctx_law.sample(&mut init)).collect();
        let negative: Vec<f64> = positive.iter().map(|v| v + perturb.sample(&mut init)).collect();
        Self::from_parts(DualEncoder::new(image_map, text_map)?, class_tokens, positive, negative, l, config.tau)
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn context_len(&self) -> usize {
        self.positive.context_len
    }

    pub fn class_count(&self) -> usize {
        self.positive.class_tokens.rows()
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.context_len() * self.dim()
    }

    pub fn prompt(&self, kind: PromptKind) -> &PromptContext {
        match kind {
            PromptKind::Positive => &self.positive,
            PromptKind::Negative => &self.negative,
        }
    }

    /// Trainable parameters `[positive contexts; negative contexts]`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = self.positive.context.clone();
        out.extend_from_slice(&self.negative.context);
        out
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.parameter_count() {
            return Err(Error::Shape {
                expected: self.parameter_count(),
                actual: theta.len(),
            });
        }
        let half = theta.len() / 2;
        self.positive.context.copy_from_slice(&theta[..half]);
        self.negative.context.copy_from_slice(&theta[half..]);
        Ok(())
    }

    /// Exchanges the two contexts.
    pub fn swapped(&self) -> Self {
        let mut s = self.clone();
        std::mem::swap(&mut s.positive.context, &mut s.negative.context);
        s
    }

    /// SHA-256 over every frozen parameter (towers and class tokens).
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        for m in [&*self.encoder.image_map, &*self.encoder.text_map, &*self.positive.class_tokens] {
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn image_embedding(&self, x: &[f64]) -> Result<Flagged<Vec<f64>>> {
        self.encoder.image_embedding(x)
    }

    pub fn text_embedding(&self, kind: PromptKind, class: usize) -> Result<Flagged<Vec<f64>>> {
        if class >= self.class_count() {
            return Err(Error::InvalidInput(format!(
                "class {class} out of range for {} classes",
                self.class_count()
            )));
        }
        let p = self.prompt(kind);
        Ok(self.text_from_sum(&p.context_sum(), p.class_tokens.row(class)))
    }

    fn text_from_sum(&self, ctx_sum: &[f64], token: &[f64]) -> Flagged<Vec<f64>> {
        let k = 1.0 / (self.context_len() + 1) as f64;
        let mean: Vec<f64> = ctx_sum.iter().zip(token).map(|(a, b)| (a + b) * k).collect();
        l2_normalize(&self.encoder.text_map.matvec(&mean))
    }

    /// All class text embeddings of one prompt (zero vectors when degenerate).
    pub fn text_embeddings(&self, kind: PromptKind) -> Vec<Vec<f64>> {
        let p = self.prompt(kind);
        let s = p.context_sum();
        (0..self.class_count())
            .map(|c| self.text_from_sum(&s, p.class_tokens.row(c)).value)
            .collect()
    }

    /// `softmax_c(cos(f, text_c) / τ)` for a precomputed unit image embedding.
    pub fn predict_embedded(&self, image: &[f64], text: &[Vec<f64>]) -> Distribution {
        let logits: Vec<f64> = text.iter().map(|t| cosine_raw(image, t).value).collect();
        softmax(&logits, self.tau).expect("finite logits and positive temperature")
    }

    pub fn predict_positive(&self, x: &[f64]) -> Result<Distribution> {
        let f = self.image_embedding(x)?.value;
        Ok(self.predict_embedded(&f, &self.text_embeddings(PromptKind::Positive)))
    }

    pub fn predict_negative(&self, x: &[f64]) -> Result<Distribution> {
        let f = self.image_embedding(x)?.value;
        Ok(self.predict_embedded(&f, &self.text_embeddings(PromptKind::Negative)))
    }

    /// Records both prompts' class text embeddings on a tape, reading the
    /// context vectors from the parameter leaf `theta`.
    pub fn record_text(&self, tape: &mut Tape, theta: Var) -> TextGraph {
        let d = self.dim();
        let l = self.context_len();
        let k = 1.0 / (l + 1) as f64;
        let mut build = |offset: usize, prompt: &PromptContext| {
            let parts: Vec<Var> = (0..l).map(|i| tape.slice(theta, offset + i * d, d)).collect();
            let sum = tape.sum(&parts);
            (0..self.class_count())
                .map(|c| {
                    let token = tape.constant(prompt.class_tokens.row(c).to_vec());
                    let total = tape.add(sum, token);
                    let mean = tape.scale(total, k);
                    let raw = tape.matvec(&self.encoder.text_map, mean);
                    tape.normalize(raw).0
                })
                .collect::<Vec<_>>()
        };
        let positive = build(0, &self.positive);
        let negative = build(l * d, &self.negative);
        TextGraph { positive, negative }
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>, meta: &CheckpointMeta) -> Result<String> {
        let path = path.as_ref();
        let bytes = self.checkpoint_bytes(meta)?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
        tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// Canonical checkpoint bytes: one JSON header line, then the
    /// little-endian f64 parameters.
    pub fn checkpoint_bytes(&self, meta: &CheckpointMeta) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            embed_dim: self.dim(),
            context_len: self.context_len(),
            class_count: self.class_count(),
            feature_dim: self.encoder.feature_dim(),
            tau: self.tau,
            frozen_digest: self.frozen_digest(),
            meta: meta.clone(),
        };
        let mut out = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
        for v in self.params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }
}

/// Per-class unit text embeddings of both prompts on a tape.
#[derive(Debug, Clone)]
pub struct TextGraph {
    pub positive: Vec<Var>,
    pub negative: Vec<Var>,
}

pub const CHECKPOINT_FORMAT: &str = "region-distill-checkpoint/1";

/// Everything needed to rebuild the frozen parts of a student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub student: StudentConfig,
    pub dataset: crate::teacher::DatasetSpec,
    pub teacher: crate::teacher::TeacherConfig,
    /// Effective run configuration, echoed for provenance.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub embed_dim: usize,
    pub context_len: usize,
    pub class_count: usize,
    pub feature_dim: usize,
    pub tau: f64,
    pub frozen_digest: String,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
    pub sha256: String,
}

impl Checkpoint {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint header line missing".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..split]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format {:?}", header.format)));
        }
        let payload = &bytes[split + 1..];
        let expected = 2 * header.context_len * header.embed_dim;
        if payload.len() != expected * 8 {
            return Err(Error::Format(format!(
                "checkpoint payload holds {} bytes, expected {}",
                payload.len(),
                expected * 8
            )));
        }
        let params = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self {
            header,
            params,
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }

    /// Rebuilds the student and checks its frozen parts against the header.
    pub fn restore(&self) -> Result<(StudentState, TeacherOracle)> {
        let meta = &self.header.meta;
        let teacher = TeacherOracle::new(&meta.dataset, meta.teacher)?;
        let mut student = StudentState::from_teacher(&teacher, &meta.student, 0)?;
        if student.frozen_digest() != self.header.frozen_digest {
            return Err(Error::Format("checkpoint frozen parameters do not match the rebuilt encoder".into()));
        }
        student.set_params(&self.params)?;
        Ok((student, teacher))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradients;
    use crate::teacher::{DatasetSpec, TeacherConfig};

    fn tiny(c: usize, d: usize, l: usize, seed: u64) -> StudentState {
        let enc = DualEncoder::random(6, d, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let tokens = gaussian(c, d, 1.0, &mut rng);
        let pos: Vec<f64> = (0..l * d).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let neg: Vec<f64> = (0..l * d).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        StudentState::from_parts(enc, tokens, pos, neg, l, 0.07).unwrap()
    }

    fn aligned() -> (StudentState, TeacherOracle, DatasetSpec) {
        let spec = DatasetSpec::default();
        let t = TeacherOracle::new(&spec, TeacherConfig::default()).unwrap();
        (StudentState::from_teacher(&t, &StudentConfig::default(), 1).unwrap(), t, spec)
    }

    #[test]
    fn identical_class_tokens_give_identical_embeddings_and_even_split() {
        let mut s = tiny(3, 5, 2, 4);
        let mut tokens = (*s.positive.class_tokens).clone();
        let row0 = tokens.row(0).to_vec();
        tokens.row_mut(1).copy_from_slice(&row0);
        s = StudentState::from_parts(s.encoder.clone(), tokens, s.positive.context.clone(), s.negative.context.clone(), 2, 0.07)
            .unwrap();
        let a = s.text_embedding(PromptKind::Positive, 0).unwrap().value;
        let b = s.text_embedding(PromptKind::Positive, 1).unwrap().value;
        assert_eq!(a, b);

        let two = StudentState::from_parts(
            s.encoder.clone(),
            Matrix::from_rows(&[row0.clone(), row0]).unwrap(),
            s.positive.context.clone(),
            s.negative.context.clone(),
            2,
            0.07,
        )
        .unwrap();
        assert_eq!(two.predict_positive(&[0.3; 6]).unwrap().probs(), &[0.5, 0.5]);
    }

    #[test]
    fn single_class_is_certain() {
        let s = tiny(1, 4, 3, 2);
        assert_eq!(s.predict_positive(&[1.0; 6]).unwrap().probs(), &[1.0]);
        assert_eq!(s.predict_negative(&[1.0; 6]).unwrap().probs(), &[1.0]);
    }

    #[test]
    fn closed_form_two_class_prediction() {
        let s = tiny(2, 4, 1, 3);
        let image = vec![1.0, 0.0, 0.0, 0.0];
        let text = vec![image.clone(), vec![0.0, 1.0, 0.0, 0.0]];
        let p = s.predict_embedded(&image, &text);
        let e = (-1.0f64 / 0.07).exp();
        let want = 1.0 / (1.0 + e);
        assert!((p.probs()[0] - want).abs() < 1e-15);
        assert!((p.probs()[1] - 6.3e-7).abs() < 1e-8);
    }

    #[test]
    fn outputs_are_unit_norm_and_scale_insensitive() {
        let mut s = tiny(3, 5, 2, 9);
        let a = s.text_embedding(PromptKind::Positive, 2).unwrap().value;
        assert!((norm(&a) - 1.0).abs() < 1e-10);
        let doubled: Vec<f64> = s.params().iter().map(|v| v * 2.0).collect();
        s.set_params(&doubled).unwrap();
        let b = s.text_embedding(PromptKind::Positive, 2).unwrap().value;
        assert!((norm(&b) - 1.0).abs() < 1e-10);
        assert_ne!(a, b);
        let f = s.image_embedding(&[0.5, -1.0, 2.0, 0.0, 1.0, 3.0]).unwrap().value;
        assert!((norm(&f) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn degenerate_text_is_flagged_zero() {
        let enc = DualEncoder::random(3, 2, 0);
        let s = StudentState::from_parts(enc, Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap(), vec![0.0; 2], vec![0.0; 2], 1, 0.07)
            .unwrap();
        let t = s.text_embedding(PromptKind::Positive, 0).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.value, vec![0.0, 0.0]);
        assert!(s.text_embedding(PromptKind::Positive, 1).is_err());
    }

    #[test]
    fn tape_text_matches_plain_path() {
        let s = tiny(3, 5, 2, 11);
        let mut tape = Tape::new();
        let theta = tape.param(s.params());
        let g = s.record_text(&mut tape, theta);
        for c in 0..3 {
            let plain = s.text_embedding(PromptKind::Negative, c).unwrap().value;
            for (a, b) in tape.value(g.negative[c]).iter().zip(&plain) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn text_embedding_gradient_matches_finite_differences() {
        let s = tiny(3, 5, 2, 21);
        let w: Vec<f64> = (0..5).map(|i| (i as f64 * 0.7).sin()).collect();
        let gc = check_gradients(
            |tape, theta| {
                let g = s.record_text(tape, theta);
                let w = tape.constant(w.clone());
                tape.dot(g.positive[1], w)
            },
            &s.params(),
            1e-5,
        )
        .unwrap();
        assert!(gc.max_rel_error < 1e-4, "{gc:?}");
    }

    #[test]
    fn negative_log_likelihood_gradient_matches_finite_differences() {
        let s = tiny(3, 4, 2, 5);
        let f = s.image_embedding(&[0.2, -0.4, 1.0, 0.3, 0.0, 0.8]).unwrap().value;
        let gc = check_gradients(
            |tape, theta| {
                let g = s.record_text(tape, theta);
                let fv = tape.constant(f.clone());
                let sims: Vec<Var> = g.negative.iter().map(|t| tape.cosine(fv, *t)).collect();
                let logits = tape.concat(&sims);
                // smaller temperature keeps the check well conditioned
                let p = tape.softmax(logits, 0.5);
                let lp = tape.log(p);
                let ones = tape.constant(vec![1.0; 3]);
                tape.dot(lp, ones)
            },
            &s.params(),
            1e-5,
        )
        .unwrap();
        assert!(gc.max_rel_error < 1e-4, "{gc:?}");
        let pos_only: f64 = gc.analytic[..8].iter().map(|v| v.abs()).sum();
        assert_eq!(pos_only, 0.0);
    }

    #[test]
    fn fresh_student_with_equal_contexts_predicts_the_same_in_both_spaces() {
        let (mut s, _, spec) = aligned();
        let theta = s.params();
        let half = theta.len() / 2;
        let mut same = theta[..half].to_vec();
        same.extend_from_slice(&theta[..half]);
        s.set_params(&same).unwrap();
        let img = &spec.generate().unwrap().images[0];
        let x = img.extract_patch(&img.pattern_box, crate::ril::AugmentTag::None).unwrap();
        assert_eq!(s.predict_positive(&x).unwrap(), s.predict_negative(&x).unwrap());
    }

    #[test]
    fn swapping_contexts_swaps_predictions() {
        let s = tiny(4, 5, 3, 8);
        let x = [0.1, 0.9, -0.3, 0.2, 0.5, -1.0];
        let w = s.swapped();
        assert_eq!(s.predict_positive(&x).unwrap(), w.predict_negative(&x).unwrap());
        assert_eq!(s.predict_negative(&x).unwrap(), w.predict_positive(&x).unwrap());
    }

    #[test]
    fn aligned_student_classifies_clean_patterns_zero_shot() {
        let (s, t, _) = aligned();
        assert_eq!(s.parameter_count(), 2 * 4 * 32);
        let spec = DatasetSpec { noise_level: 0.0, ..DatasetSpec::default() };
        for img in spec.generate().unwrap().images.iter().take(24) {
            let x = img.extract_patch(&img.pattern_box, crate::ril::AugmentTag::None).unwrap();
            assert_eq!(s.predict_positive(&x).unwrap().argmax(), img.planted_class);
            assert_eq!(t.predict_patch(&x).argmax(), img.planted_class);
        }
    }

    #[test]
    fn frozen_parts_ignore_the_init_seed() {
        let spec = DatasetSpec::default();
        let t = TeacherOracle::new(&spec, TeacherConfig::default()).unwrap();
        let a = StudentState::from_teacher(&t, &StudentConfig::default(), 1).unwrap();
        let b = StudentState::from_teacher(&t, &StudentConfig::default(), 2).unwrap();
        assert_eq!(a.frozen_digest(), b.frozen_digest());
        assert_ne!(a.params(), b.params());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (mut s, _, spec) = aligned();
        let weird: Vec<f64> = s.params().iter().enumerate().map(|(i, v)| v * (1.0 + i as f64 * 1e-3) + 1e-300).collect();
        s.set_params(&weird).unwrap();
        let meta = CheckpointMeta {
            student: StudentConfig::default(),
            dataset: spec,
            teacher: TeacherConfig::default(),
            config: serde_json::json!({"train.seed": 1}),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let digest = s.save_checkpoint(&path, &meta).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.sha256, digest);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ck.params), bits(&weird));
        let (r, _) = ck.restore().unwrap();
        assert_eq!(bits(&r.params()), bits(&weird));
        assert_eq!(r.frozen_digest(), s.frozen_digest());
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let (s, _, spec) = aligned();
        let meta = CheckpointMeta {
            student: StudentConfig::default(),
            dataset: spec,
            teacher: TeacherConfig::default(),
            config: serde_json::Value::Null,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let bytes = s.checkpoint_bytes(&meta).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
    }
}
