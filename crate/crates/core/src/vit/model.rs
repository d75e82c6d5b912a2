use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::{Tape, Tensor, Var};

use super::{patch_gather_index, softmax, Classifier, ModelError, ViTConfig};

/// Latent taps recorded per block, in order: concatenated head outputs,
/// residual stream after the output projection, residual stream after the MLP.
pub const TAP_KINDS: [&str; 3] = ["attn", "proj", "mlp"];

const PRE: usize = 4;
const PER_BLOCK: usize = 16;
const POST: usize = 4;

// offsets inside a block
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const BQ: usize = 3;
const WK: usize = 4;
const BK: usize = 5;
const WV: usize = 6;
const BV: usize = 7;
const WO: usize = 8;
const BO: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const W1: usize = 12;
const B1: usize = 13;
const W2: usize = 14;
const B2: usize = 15;

enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Xavier,
}

fn param_specs(cfg: &ViTConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, h, pd, k) = (cfg.embed_dim, cfg.mlp_hidden, cfg.patch_dim(), cfg.num_classes);
    let mut specs = vec![
        ("patch.w".to_string(), vec![pd, d], Init::Xavier),
        ("patch.b".to_string(), vec![d], Init::Zeros),
        ("cls".to_string(), vec![1, d], Init::Normal(0.02)),
        ("pos".to_string(), vec![cfg.tokens(), d], Init::Normal(0.02)),
    ];
    for b in 0..cfg.depth {
        let p = |s: &str| format!("block{b}.{s}");
        specs.extend([
            (p("ln1.g"), vec![d], Init::Ones),
            (p("ln1.b"), vec![d], Init::Zeros),
            (p("attn.wq"), vec![d, d], Init::Xavier),
            (p("attn.bq"), vec![d], Init::Zeros),
            (p("attn.wk"), vec![d, d], Init::Xavier),
            (p("attn.bk"), vec![d], Init::Zeros),
            (p("attn.wv"), vec![d, d], Init::Xavier),
            (p("attn.bv"), vec![d], Init::Zeros),
            (p("attn.wo"), vec![d, d], Init::Xavier),
            (p("attn.bo"), vec![d], Init::Zeros),
            (p("ln2.g"), vec![d], Init::Ones),
            (p("ln2.b"), vec![d], Init::Zeros),
            (p("mlp.w1"), vec![d, h], Init::Xavier),
            (p("mlp.b1"), vec![h], Init::Zeros),
            (p("mlp.w2"), vec![h, d], Init::Xavier),
            (p("mlp.b2"), vec![d], Init::Zeros),
        ]);
    }
    specs.extend([
        ("norm.g".to_string(), vec![d], Init::Ones),
        ("norm.b".to_string(), vec![d], Init::Zeros),
        ("head.w".to_string(), vec![d, k], Init::Normal(0.02)),
        ("head.b".to_string(), vec![k], Init::Zeros),
    ]);
    specs
}

/// Model parameters in a fixed, named order.
#[derive(Clone, Debug)]
pub struct ViTWeights {
    config: ViTConfig,
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    gather: Arc<Vec<usize>>,
}

/// Tape handles produced by one recorded forward pass.
#[derive(Debug)]
pub struct ForwardVars {
    /// `[K]`
    pub logits: Var,
    /// `[block][head]`, each `(N+1)×(N+1)`.
    pub attention: Vec<Vec<Var>>,
    /// `3 × depth` taps, each `tokens × embed_dim`, ordered per [`TAP_KINDS`].
    pub taps: Vec<Var>,
}

impl ViTWeights {
    /// Random initialization: Xavier-uniform linear maps, small normal
    /// embeddings and classifier, unit layer-norm gains.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in param_specs(config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).unwrap();
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::Xavier => {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound);
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            names.push(name);
            tensors.push(Arc::new(Tensor::new(shape, data)?));
        }
        Ok(Self::assemble(config.clone(), names, tensors))
    }

    fn assemble(config: ViTConfig, names: Vec<String>, tensors: Vec<Arc<Tensor>>) -> Self {
        let gather = Arc::new(patch_gather_index(&config));
        ViTWeights { config, names, tensors, gather }
    }

    /// Builds weights from named tensors, checking names, shapes and finiteness.
    pub fn from_named(
        config: &ViTConfig,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = param_specs(config);
        if specs.len() != named.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, got {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, shape, _), (got_name, t)) in specs.into_iter().zip(named) {
            if name != got_name || t.shape() != shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "expected {name} {shape:?}, got {got_name} {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(ModelError::Checkpoint(format!("{name} has non-finite values")));
            }
            names.push(name);
            tensors.push(Arc::new(t));
        }
        Ok(Self::assemble(config.clone(), names, tensors))
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().map(|t| t.as_ref())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&self.tensors[i])
    }

    /// Replaces one tensor; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), ModelError> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| ModelError::Checkpoint(format!("unknown tensor {name}")))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(ModelError::InputShape {
                expected: self.tensors[i].shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        self.tensors[i] = Arc::new(value);
        Ok(())
    }

    /// Applies `f(index, tensor)` to every parameter in order.
    pub(crate) fn update(&mut self, mut f: impl FnMut(usize, &mut Tensor)) {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            f(i, Arc::make_mut(t));
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.shared_leaf(Arc::clone(t), requires_grad))
            .collect()
    }

    pub fn build_forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        image: Var,
    ) -> Result<ForwardVars, ModelError> {
        let cfg = &self.config;
        let expected = cfg.image_shape();
        if tape.shape(image) != expected.as_slice() {
            return Err(ModelError::InputShape {
                expected,
                got: tape.shape(image).to_vec(),
            });
        }
        let (n, dh) = (cfg.num_patches(), cfg.head_dim());
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let patches = tape.gather(image, self.gather.as_ref().clone(), &[n, cfg.patch_dim()])?;
        let emb = tape.matmul(patches, params[0])?;
        let emb = tape.add_row(emb, params[1])?;
        let z = tape.concat_rows(&[params[2], emb])?;
        let mut z = tape.add(z, params[3])?;

        let mut attention = Vec::with_capacity(cfg.depth);
        let mut taps = Vec::with_capacity(cfg.num_taps());
        for b in 0..cfg.depth {
            let p = &params[PRE + b * PER_BLOCK..PRE + (b + 1) * PER_BLOCK];
            let a = tape.layer_norm(z, p[LN1_G], p[LN1_B])?;
            let q = tape.matmul(a, p[WQ])?;
            let q = tape.add_row(q, p[BQ])?;
            let k = tape.matmul(a, p[WK])?;
            let k = tape.add_row(k, p[BK])?;
            let v = tape.matmul(a, p[WV])?;
            let v = tape.add_row(v, p[BV])?;
            let mut heads = Vec::with_capacity(cfg.heads);
            let mut outs = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, inv_sqrt);
                let attn = tape.softmax(scores)?;
                outs.push(tape.matmul(attn, vh)?);
                heads.push(attn);
            }
            let mha = tape.concat_cols(&outs)?;
            taps.push(mha);
            let proj = tape.matmul(mha, p[WO])?;
            let proj = tape.add_row(proj, p[BO])?;
            z = tape.add(z, proj)?;
            taps.push(z);
            if !tape.value(z).is_finite() {
                return Err(ModelError::NonFinite { block: b, stage: "attention" });
            }
            let m = tape.layer_norm(z, p[LN2_G], p[LN2_B])?;
            let hdn = tape.matmul(m, p[W1])?;
            let hdn = tape.add_row(hdn, p[B1])?;
            let hdn = tape.gelu(hdn);
            let out = tape.matmul(hdn, p[W2])?;
            let out = tape.add_row(out, p[B2])?;
            z = tape.add(z, out)?;
            taps.push(z);
            if !tape.value(z).is_finite() {
                return Err(ModelError::NonFinite { block: b, stage: "mlp" });
            }
            attention.push(heads);
        }

        let t = &params[PRE + cfg.depth * PER_BLOCK..];
        debug_assert_eq!(t.len(), POST);
        let zf = tape.layer_norm(z, t[0], t[1])?;
        let cls = tape.slice_rows(zf, 0, 1)?;
        let logits = tape.matmul(cls, t[2])?;
        let logits = tape.add_row(logits, t[3])?;
        let logits = tape.reshape(logits, &[cfg.num_classes])?;
        if !tape.value(logits).is_finite() {
            return Err(ModelError::NonFinite { block: cfg.depth, stage: "head" });
        }
        Ok(ForwardVars { logits, attention, taps })
    }

    /// One instrumented forward pass.
    pub fn forward(&self, image: &Tensor) -> Result<InferenceTrace, ModelError> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let fv = self.build_forward(&mut tape, &params, x)?;
        let logits = tape.value(fv.logits).data().to_vec();
        let posterior = softmax(&logits);
        let attention = fv
            .attention
            .iter()
            .map(|heads| heads.iter().map(|&v| tape.value(v).clone()).collect())
            .collect();
        let latents = fv.taps.iter().map(|&v| tape.value(v).clone()).collect();
        Ok(InferenceTrace { logits, posterior, attention, latents })
    }
}

impl Classifier for ViTWeights {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn input_shape(&self) -> Vec<usize> {
        self.config.image_shape()
    }

    fn logits_on_tape(&self, tape: &mut Tape, image: Var) -> Result<Var, ModelError> {
        let params = self.bind(tape, false);
        Ok(self.build_forward(tape, &params, image)?.logits)
    }
}

/// Everything one forward pass exposes.
#[derive(Clone, Debug)]
pub struct InferenceTrace {
    pub logits: Vec<f64>,
    pub posterior: Vec<f64>,
    /// `[block][head]` row-stochastic `(N+1)×(N+1)` matrices; index 0 is
    /// the class token.
    pub attention: Vec<Vec<Tensor>>,
    /// `3 × depth` activations, `tokens × embed_dim` each.
    pub latents: Vec<Tensor>,
}

impl InferenceTrace {
    pub fn predicted(&self) -> usize {
        super::argmax(&self.logits)
    }

    /// Checks posterior normalization, attention row sums and tap count.
    pub fn check(&self, depth: usize) -> Result<(), String> {
        if self.posterior.iter().any(|&p| p < 0.0) {
            return Err("negative posterior".into());
        }
        let s: f64 = self.posterior.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(format!("posterior sums to {s}"));
        }
        for (b, heads) in self.attention.iter().enumerate() {
            for (h, a) in heads.iter().enumerate() {
                for r in 0..a.rows() {
                    let s: f64 = a.row(r).iter().sum();
                    if (s - 1.0).abs() > 1e-9 {
                        return Err(format!("attention block {b} head {h} row {r} sums to {s}"));
                    }
                }
            }
        }
        if self.latents.len() != 3 * depth {
            return Err(format!("{} taps for depth {depth}", self.latents.len()));
        }
        Ok(())
    }
}
