use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::Matrix;

/// Query/key/value/output projections of one attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

/// One pre-norm decoder block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub attn_norm: Matrix,
    pub attn: AttentionParams,
    pub mlp_norm: Matrix,
    pub w_up: Matrix,
    pub b_up: Matrix,
    pub w_down: Matrix,
    pub b_down: Matrix,
}

/// Every trainable tensor of the model. Bias and gain vectors are stored as
/// single-row matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// Per-patch perceptron (the vision encoder).
    pub patch_w1: Matrix,
    pub patch_b1: Matrix,
    pub patch_w2: Matrix,
    pub patch_b2: Matrix,
    /// Optional cross-patch self-attention inside the encoder.
    pub mixer: Option<AttentionParams>,
    /// Projector from encoder space into the decoder's embedding space.
    pub proj_w: Matrix,
    pub proj_b: Matrix,
    /// Text embedding table.
    pub tok_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm: Matrix,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

impl AttentionParams {
    fn zeros(e: usize) -> Self {
        Self {
            wq: Matrix::zeros(e, e),
            wk: Matrix::zeros(e, e),
            wv: Matrix::zeros(e, e),
            wo: Matrix::zeros(e, e),
        }
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((format!("{prefix}.wq"), &self.wq));
        out.push((format!("{prefix}.wk"), &self.wk));
        out.push((format!("{prefix}.wv"), &self.wv));
        out.push((format!("{prefix}.wo"), &self.wo));
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        out.extend([&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]);
    }
}

/// Shapes needed to allocate a parameter set.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ParamShapes {
    pub embed_dim: usize,
    pub patch_dim: usize,
    pub mlp_dim: usize,
    pub vocab: usize,
    pub layers: usize,
    pub mixer: bool,
}

impl Params {
    pub(crate) fn zeros(s: ParamShapes) -> Self {
        let e = s.embed_dim;
        Self {
            patch_w1: Matrix::zeros(s.patch_dim, e),
            patch_b1: Matrix::zeros(1, e),
            patch_w2: Matrix::zeros(e, e),
            patch_b2: Matrix::zeros(1, e),
            mixer: s.mixer.then(|| AttentionParams::zeros(e)),
            proj_w: Matrix::zeros(e, e),
            proj_b: Matrix::zeros(1, e),
            tok_emb: Matrix::zeros(s.vocab, e),
            layers: (0..s.layers)
                .map(|_| LayerParams {
                    attn_norm: Matrix::zeros(1, e),
                    attn: AttentionParams::zeros(e),
                    mlp_norm: Matrix::zeros(1, e),
                    w_up: Matrix::zeros(e, s.mlp_dim),
                    b_up: Matrix::zeros(1, s.mlp_dim),
                    w_down: Matrix::zeros(s.mlp_dim, e),
                    b_down: Matrix::zeros(1, e),
                })
                .collect(),
            final_norm: Matrix::zeros(1, e),
            head_w: Matrix::zeros(e, 2),
            head_b: Matrix::zeros(1, 2),
        }
    }

    /// Scaled-uniform weights in `[-scale, scale)`, unit gains, zero biases.
    /// Tensors are drawn in the fixed order of [`Params::named_tensors`].
    pub(crate) fn init(s: ParamShapes, rng: &mut impl Rng, scale: f64) -> Self {
        let mut p = Self::zeros(s);
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, m) in names.iter().zip(p.tensors_mut()) {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            if leaf.ends_with("norm") {
                m.fill(1.0);
            } else if !is_bias(leaf) {
                for v in m.as_mut_slice() {
                    *v = rng.gen_range(-scale..scale);
                }
            }
        }
        p
    }

    /// All tensors with stable dotted names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("patch_w1".to_string(), &self.patch_w1),
            ("patch_b1".to_string(), &self.patch_b1),
            ("patch_w2".to_string(), &self.patch_w2),
            ("patch_b2".to_string(), &self.patch_b2),
        ];
        if let Some(m) = &self.mixer {
            m.tensors("mixer", &mut out);
        }
        out.push(("proj_w".into(), &self.proj_w));
        out.push(("proj_b".into(), &self.proj_b));
        out.push(("tok_emb".into(), &self.tok_emb));
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &layer.attn_norm));
            layer.attn.tensors(&format!("layers.{l}.attn"), &mut out);
            out.push((format!("layers.{l}.mlp_norm"), &layer.mlp_norm));
            out.push((format!("layers.{l}.w_up"), &layer.w_up));
            out.push((format!("layers.{l}.b_up"), &layer.b_up));
            out.push((format!("layers.{l}.w_down"), &layer.w_down));
            out.push((format!("layers.{l}.b_down"), &layer.b_down));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    /// Mutable tensors, same order as [`Params::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![
            &mut self.patch_w1,
            &mut self.patch_b1,
            &mut self.patch_w2,
            &mut self.patch_b2,
        ];
        if let Some(m) = &mut self.mixer {
            m.tensors_mut(&mut out);
        }
        out.push(&mut self.proj_w);
        out.push(&mut self.proj_b);
        out.push(&mut self.tok_emb);
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm);
            layer.attn.tensors_mut(&mut out);
            out.push(&mut layer.mlp_norm);
            out.push(&mut layer.w_up);
            out.push(&mut layer.b_up);
            out.push(&mut layer.w_down);
            out.push(&mut layer.b_down);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named_tensors()
            .iter()
            .map(|(_, m)| m.as_slice().len())
            .sum()
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for m in z.tensors_mut() {
            m.fill(0.0);
        }
        z
    }

    pub fn add_assign(&mut self, other: &Params) {
        let theirs = other.named_tensors();
        for (mine, (_, t)) in self.tensors_mut().into_iter().zip(theirs) {
            mine.add_assign(t);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.tensors_mut() {
            m.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, m)| m.is_finite())
    }
}

fn is_bias(leaf: &str) -> bool {
    leaf.starts_with("b_") || leaf.contains("_b")
}
