//! Frozen toy encoders standing in for a pretrained image/text model, and the
//! learnable local projection applied to V-V patch features.
//!
//! The vision encoder runs two streams from one shared input: the usual
//! query-key attention (`softmax(QKᵀ/√d)`) and value-value attention
//! (`softmax(VVᵀ/√d)`), each block adding `(A V)·W_o` back onto its input.
//! Neither encoder ever puts its own weights on a tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{Mat, Tape};

/// Number of template tokens that seed prompt initialization.
pub const TEMPLATE_TOKENS: usize = 4;

/// Class-name token rows are drawn at this fraction of the template scale.
/// Random class names carry no visual meaning, so they only nudge the
/// shared prompt rather than dominate the global score.
pub const CLASS_TOKEN_SCALE: f64 = 0.02;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Mean-pool, project, normalize.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub dim: usize,
    pub num_classes: usize,
    /// Class-name rows first, then the template tokens.
    pub vocab: Mat,
    pub out_proj: Mat,
    pub sos: Mat,
    pub eot: Mat,
}

impl TextEncoder {
    pub fn new(num_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::Size(format!(
                "text encoder needs classes and dim >= 1, got {num_classes}, {dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            dim,
            num_classes,
            vocab: {
                let v = gaussian(&mut rng, num_classes + TEMPLATE_TOKENS, dim, s);
                Mat::from_fn(v.rows(), dim, |r, c| {
                    let k = if r < num_classes {
                        CLASS_TOKEN_SCALE
                    } else {
                        1.0
                    };
                    k * v.get(r, c)
                })
            },
            out_proj: gaussian(&mut rng, dim, dim, s),
            sos: gaussian(&mut rng, 1, dim, s),
            eot: gaussian(&mut rng, 1, dim, s),
        })
    }

    pub fn class_token(&self, class_id: usize) -> Result<Mat> {
        if class_id >= self.num_classes {
            return Err(Error::Index {
                index: class_id,
                len: self.num_classes,
            });
        }
        self.vocab.gather_rows(&[class_id])
    }

    /// `m` rows cycling through the template tokens.
    pub fn template(&self, m: usize) -> Result<Mat> {
        let idx: Vec<usize> = (0..m)
            .map(|i| self.num_classes + i % TEMPLATE_TOKENS)
            .collect();
        self.vocab.gather_rows(&idx)
    }

    /// `l2norm(mean([sos; prompt; class; eot]) · out_proj)` as a 1 x d row.
    pub fn encode(&self, tape: &Tape, prompt: &Mat, class_id: usize) -> Result<Mat> {
        if prompt.rows() == 0 {
            return Err(Error::Size("prompt needs at least one token".into()));
        }
        let class = self.class_token(class_id)?;
        let seq = tape.vstack(&[&self.sos, prompt, &class, &self.eot])?;
        let pooled = tape.mean_over_rows(&seq)?;
        tape.l2norm_rows(&tape.matmul(&pooled, &self.out_proj)?)
    }

    /// Encodes several prompts for one class into an `n x d` matrix.
    pub fn encode_many(&self, tape: &Tape, prompts: &[Mat], class_id: usize) -> Result<Mat> {
        let rows = prompts
            .iter()
            .map(|p| self.encode(tape, p, class_id))
            .collect::<Result<Vec<_>>>()?;
        tape.vstack(&rows.iter().collect::<Vec<_>>())
    }
}

/// One single-head attention block without MLP or normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
}

/// `V = Z·W_v`, `A = softmax(VVᵀ/√d)`, returns `Z + (A V)·W_o`.
pub fn vv_attention_layer(z: &Mat, w_v: &Mat, w_o: &Mat) -> Result<Mat> {
    let v = z.matmul(w_v)?;
    let attn = v
        .matmul_nt(&v)?
        .scale(1.0 / (v.cols() as f64).sqrt())
        .softmax_rows();
    z.add(&attn.matmul(&v)?.matmul(w_o)?)
}

/// `A = softmax(QKᵀ/√d)`, returns `Z + (A V)·W_o`.
pub fn qk_attention_layer(z: &Mat, block: &AttentionBlock) -> Result<Mat> {
    let q = z.matmul(&block.w_q)?;
    let k = z.matmul(&block.w_k)?;
    let v = z.matmul(&block.w_v)?;
    let attn = q
        .matmul_nt(&k)?
        .scale(1.0 / (q.cols() as f64).sqrt())
        .softmax_rows();
    z.add(&attn.matmul(&v)?.matmul(&block.w_o)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionEncoder {
    pub input_dim: usize,
    pub dim: usize,
    pub patch_embed: Mat,
    pub cls_token: Mat,
    pub layers: Vec<AttentionBlock>,
}

/// Output of [`VisionEncoder::encode_dual`]. Patch rows are not normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct DualFeatures {
    /// Final Q-K [CLS] row, unit norm, 1 x d.
    pub z_global: Mat,
    pub qk_patches: Mat,
    pub vv_patches: Mat,
}

impl VisionEncoder {
    /// Random frozen weights. The output projection is damped so the residual
    /// path keeps each patch close to its own embedding.
    pub fn new(input_dim: usize, dim: usize, num_layers: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || dim == 0 {
            return Err(Error::Size(format!(
                "vision encoder needs positive dims, got {input_dim}, {dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (dim as f64).sqrt();
        let patch_embed = gaussian(&mut rng, input_dim, dim, 1.0 / (input_dim as f64).sqrt());
        let cls_token = gaussian(&mut rng, 1, dim, s);
        let layers = (0..num_layers)
            .map(|_| AttentionBlock {
                w_q: gaussian(&mut rng, dim, dim, s),
                w_k: gaussian(&mut rng, dim, dim, s),
                w_v: gaussian(&mut rng, dim, dim, s),
                w_o: gaussian(&mut rng, dim, dim, 0.5 * s),
            })
            .collect();
        Ok(Self {
            input_dim,
            dim,
            patch_embed,
            cls_token,
            layers,
        })
    }

    pub fn encode_dual(&self, patches: &Mat) -> Result<DualFeatures> {
        if patches.rows() == 0 {
            return Err(Error::Degenerate("image has no patches".into()));
        }
        let z0 = Mat::vstack(&[&self.cls_token, &patches.matmul(&self.patch_embed)?])?;
        let mut qk = z0.clone();
        let mut vv = z0;
        for block in &self.layers {
            qk = qk_attention_layer(&qk, block)?;
            vv = vv_attention_layer(&vv, &block.w_v, &block.w_o)?;
        }
        let body: Vec<usize> = (1..qk.rows()).collect();
        Ok(DualFeatures {
            z_global: qk.gather_rows(&[0])?.l2norm_rows()?,
            qk_patches: qk.gather_rows(&body)?,
            vv_patches: vv.gather_rows(&body)?,
        })
    }
}

/// Learnable `d x d` map applied to V-V patches before normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalProjection {
    pub weight: Mat,
    pub enabled: bool,
}

impl LocalProjection {
    pub fn identity(dim: usize, enabled: bool) -> Self {
        Self {
            weight: Mat::identity(dim),
            enabled,
        }
    }

    /// `l2norm(patches · W)`, or `l2norm(patches)` when disabled. With
    /// `normalize` off the rows are returned as projected.
    pub fn apply(&self, tape: &Tape, patches: &Mat, normalize: bool) -> Result<Mat> {
        let projected = if self.enabled {
            tape.matmul(patches, &self.weight)?
        } else {
            patches.clone()
        };
        if normalize {
            tape.l2norm_rows(&projected)
        } else {
            Ok(projected)
        }
    }
}

/// Both frozen encoders, serialized together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoders {
    pub text: TextEncoder,
    pub vision: VisionEncoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub num_classes: usize,
    pub input_dim: usize,
    pub dim: usize,
    pub num_layers: usize,
}

impl Default for EncoderShape {
    fn default() -> Self {
        Self {
            num_classes: 8,
            input_dim: 16,
            dim: 32,
            num_layers: 2,
        }
    }
}

impl Encoders {
    pub fn new(shape: EncoderShape, seed: u64) -> Result<Self> {
        Ok(Self {
            text: TextEncoder::new(shape.num_classes, shape.dim, seed)?,
            vision: VisionEncoder::new(
                shape.input_dim,
                shape.dim,
                shape.num_layers,
                seed ^ 0x9e37_79b9,
            )?,
        })
    }

    /// Hex SHA-256 of the canonical JSON form; used to audit that training
    /// left the encoders untouched.
    pub fn checksum(&self) -> String {
        let json = serde_json::to_vec(self).expect("encoder weights serialize");
        hex::encode(Sha256::digest(json))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("encoder weights serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Parse(format!("encoders: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff_grad, relative_error};
    use approx::assert_abs_diff_eq;
    use rand::RngExt;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn text_encoding_is_deterministic_unit_and_class_dependent() {
        let enc = TextEncoder::new(3, 8, 1).unwrap();
        let again = TextEncoder::new(3, 8, 1).unwrap();
        let p = Mat::zeros(4, 8);
        let t = Tape::new();
        let a = enc.encode(&t, &p, 0).unwrap();
        assert_eq!(a.data(), again.encode(&t, &p, 0).unwrap().data());
        assert_abs_diff_eq!(a.row_norms()[0], 1.0, epsilon = 1e-12);
        let b = enc.encode(&t, &p, 1).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-3);
        assert!(matches!(enc.encode(&t, &p, 3), Err(Error::Index { .. })));
    }

    #[test]
    fn text_gradient_matches_finite_differences() {
        let enc = TextEncoder::new(2, 6, 4).unwrap();
        let w = random(1, 6, 5);
        for seed in 0..10 {
            let p0 = random(3, 6, seed);
            let tape = Tape::new();
            let p = tape.leaf(&p0);
            let out = enc.encode(&tape, &p, 1).unwrap();
            let loss = tape.sum(&tape.hadamard(&out, &w).unwrap()).unwrap();
            let g = tape.backward(&loss).unwrap();
            let fd = finite_diff_grad(
                |x| Ok(enc.encode(&Tape::new(), &x[0], 1)?.hadamard(&w)?.sum()),
                &[p0],
                1e-5,
            )
            .unwrap();
            assert!(relative_error(&[g.wrt(&p).unwrap().clone()], &fd) < 1e-6);
        }
    }

    #[test]
    fn vv_single_token() {
        let z = random(1, 3, 1);
        let w_v = random(3, 3, 2);
        let w_o = random(3, 3, 3);
        let out = vv_attention_layer(&z, &w_v, &w_o).unwrap();
        let want = z
            .add(&z.matmul(&w_v).unwrap().matmul(&w_o).unwrap())
            .unwrap();
        assert!(out.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn vv_two_orthonormal_tokens_by_hand() {
        let z = Mat::identity(2);
        let out = vv_attention_layer(&z, &Mat::identity(2), &Mat::identity(2)).unwrap();
        // Scores are VVᵀ/√2 = I/√2, so each row attends softmax([1/√2, 0]).
        let hi = 1.0 / (1.0 + (-(0.5f64).sqrt()).exp());
        let lo = 1.0 - hi;
        let want = Mat::from_rows(&[vec![1.0 + hi, lo], vec![lo, 1.0 + hi]]).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn vv_rows_permute_with_input() {
        let z = random(5, 4, 7);
        let w_v = random(4, 4, 8);
        let w_o = random(4, 4, 9);
        let perm = [3, 0, 4, 1, 2];
        let out = vv_attention_layer(&z, &w_v, &w_o).unwrap();
        let out_p = vv_attention_layer(&z.gather_rows(&perm).unwrap(), &w_v, &w_o).unwrap();
        assert!(out_p.max_abs_diff(&out.gather_rows(&perm).unwrap()) < 1e-12);
    }

    #[test]
    fn zero_layers_streams_identical() {
        let enc = VisionEncoder::new(4, 6, 0, 3).unwrap();
        let x = random(5, 4, 1);
        let f = enc.encode_dual(&x).unwrap();
        assert_eq!(f.qk_patches, f.vv_patches);
        assert!(
            f.vv_patches
                .max_abs_diff(&x.matmul(&enc.patch_embed).unwrap())
                < 1e-15
        );
    }

    #[test]
    fn shared_qkv_weights_make_streams_coincide() {
        let mut enc = VisionEncoder::new(4, 6, 2, 3).unwrap();
        for b in &mut enc.layers {
            b.w_q = b.w_v.clone();
            b.w_k = b.w_v.clone();
        }
        let f = enc.encode_dual(&random(7, 4, 2)).unwrap();
        assert!(f.qk_patches.max_abs_diff(&f.vv_patches) < 1e-12);
    }

    #[test]
    fn dual_encoding_deterministic_and_equivariant() {
        let enc = VisionEncoder::new(4, 6, 2, 11).unwrap();
        let x = random(6, 4, 5);
        assert_eq!(enc.encode_dual(&x).unwrap(), enc.encode_dual(&x).unwrap());
        let perm = [5, 2, 0, 1, 4, 3];
        let f = enc.encode_dual(&x).unwrap();
        let g = enc.encode_dual(&x.gather_rows(&perm).unwrap()).unwrap();
        assert!(
            g.vv_patches
                .max_abs_diff(&f.vv_patches.gather_rows(&perm).unwrap())
                < 1e-12
        );
        assert!(
            g.qk_patches
                .max_abs_diff(&f.qk_patches.gather_rows(&perm).unwrap())
                < 1e-12
        );
        assert_abs_diff_eq!(f.z_global.row_norms()[0], 1.0, epsilon = 1e-12);
        assert!(matches!(
            enc.encode_dual(&Mat::zeros(0, 4)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn projection_identity_and_scale() {
        let x = random(4, 3, 1);
        let t = Tape::new();
        let off = LocalProjection::identity(3, false);
        assert_eq!(off.apply(&t, &x, true).unwrap(), x.l2norm_rows().unwrap());
        let double = LocalProjection {
            weight: Mat::identity(3).scale(2.0),
            enabled: true,
        };
        let a = double.apply(&t, &x, true).unwrap();
        assert!(a.max_abs_diff(&x.l2norm_rows().unwrap()) < 1e-15);
        let zero = LocalProjection {
            weight: Mat::zeros(3, 3),
            enabled: true,
        };
        assert!(matches!(
            zero.apply(&t, &x, true),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let x = random(5, 4, 2);
        let w = random(5, 4, 3);
        for seed in 0..10 {
            let w0 = random(4, 4, 100 + seed);
            let tape = Tape::new();
            let proj = LocalProjection {
                weight: tape.leaf(&w0),
                enabled: true,
            };
            let out = proj.apply(&tape, &x, true).unwrap();
            let loss = tape.sum(&tape.hadamard(&out, &w).unwrap()).unwrap();
            let g = tape.backward(&loss).unwrap();
            let fd = finite_diff_grad(
                |p| {
                    let proj = LocalProjection {
                        weight: p[0].clone(),
                        enabled: true,
                    };
                    Ok(proj.apply(&Tape::new(), &x, true)?.hadamard(&w)?.sum())
                },
                &[w0],
                1e-5,
            )
            .unwrap();
            assert!(relative_error(&[g.wrt(&proj.weight).unwrap().clone()], &fd) < 1e-6);
        }
    }

    #[test]
    fn json_round_trip_and_checksum() {
        let e = Encoders::new(EncoderShape::default(), 5).unwrap();
        let back = Encoders::from_json(&e.to_json()).unwrap();
        assert_eq!(back, e);
        assert_eq!(back.checksum(), e.checksum());
        let other = Encoders::new(EncoderShape::default(), 6).unwrap();
        assert_ne!(other.checksum(), e.checksum());
        assert!(matches!(
            Encoders::from_json("{\"text\": 3}"),
            Err(Error::Parse(_))
        ));
    }
}
