use crate::error::{shape_err, Result};
use crate::matrix::Matrix;
use crate::rng::{rng_normal, Rng};

use super::config::{InputKind, ModelConfig, PosEncoding};

/// Weights of one pre-LN block. Row vectors are stored as `1 × n` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Matrix,
    pub ln1_b: Matrix,
    /// `d × d`; head `h` owns columns `h·d_h .. (h+1)·d_h`.
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    /// `heads × d_h` gains of the per-head QK norm.
    pub qn_g: Matrix,
    pub kn_g: Matrix,
    pub gamma_a: Matrix,
    pub ln2_g: Matrix,
    pub ln2_b: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub gamma_m: Matrix,
    /// `1 × 1` logit offset, read only when the bias mode is learnable.
    pub attn_bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `vocab × d` table, or `1 × d` projection for scalar tokens.
    pub embed: Matrix,
    pub embed_b: Matrix,
    /// `max_len × d` when positions are learnable, `0 × d` otherwise.
    pub pos: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Matrix,
    pub lnf_b: Matrix,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

impl LayerParams {
    fn tensors(&self) -> [(&'static str, &Matrix); 17] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("qn_g", &self.qn_g),
            ("kn_g", &self.kn_g),
            ("gamma_a", &self.gamma_a),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("gamma_m", &self.gamma_m),
            ("attn_bias", &self.attn_bias),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 17] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.qn_g,
            &mut self.kn_g,
            &mut self.gamma_a,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.gamma_m,
            &mut self.attn_bias,
        ]
    }
}

impl ModelParams {
    /// Weights ~ N(0, init_std²) truncated at ±2σ; norm gains 1, biases 0,
    /// LayerScale gains at their configured initial value.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let hid = cfg.hidden();
        let std = cfg.init_std;
        let mut w = |r: usize, c: usize| rng_normal(rng, r, c, 0.0, std, Some(2.0));
        let rows = match cfg.input {
            InputKind::Scalar => 1,
            InputKind::Vocab(v) => v,
        };
        let embed = w(rows, d);
        let pos = if cfg.pos == PosEncoding::Learnable {
            w(cfg.max_len, d)
        } else {
            Matrix::zeros(0, d)
        };
        let gamma = cfg.layerscale.unwrap_or(1.0);
        let bias = cfg.learnable_bias().unwrap_or(0.0);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                ln1_g: Matrix::filled(1, d, 1.0),
                ln1_b: Matrix::zeros(1, d),
                wq: w(d, d),
                wk: w(d, d),
                wv: w(d, d),
                wo: w(d, d),
                qn_g: Matrix::filled(cfg.heads, dh, 1.0),
                kn_g: Matrix::filled(cfg.heads, dh, 1.0),
                gamma_a: Matrix::filled(1, d, gamma),
                ln2_g: Matrix::filled(1, d, 1.0),
                ln2_b: Matrix::zeros(1, d),
                w1: w(d, hid),
                b1: Matrix::zeros(1, hid),
                w2: w(hid, d),
                b2: Matrix::zeros(1, d),
                gamma_m: Matrix::filled(1, d, gamma),
                attn_bias: Matrix::filled(1, 1, bias),
            })
            .collect();
        Ok(Self {
            embed,
            embed_b: Matrix::zeros(1, d),
            pos,
            layers,
            lnf_g: Matrix::filled(1, d, 1.0),
            lnf_b: Matrix::zeros(1, d),
            head_w: w(d, 1),
            head_b: Matrix::zeros(1, 1),
        })
    }

    /// Same shapes, all zeros. Used for gradients and optimizer moments.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    /// Every tensor with a stable dotted name, in serialization order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("embed".to_string(), &self.embed),
            ("embed_b".to_string(), &self.embed_b),
            ("pos".to_string(), &self.pos),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.tensors().into_iter().map(|(n, m)| (format!("layers.{l}.{n}"), m)));
        }
        out.extend([
            ("lnf_g".to_string(), &self.lnf_g),
            ("lnf_b".to_string(), &self.lnf_b),
            ("head_w".to_string(), &self.head_w),
            ("head_b".to_string(), &self.head_b),
        ]);
        out
    }

    /// Mutable view in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embed, &mut self.embed_b, &mut self.pos];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.head_w, &mut self.head_b]);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// Global L2 norm over every tensor.
    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, m)| m.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Checks that every tensor has the shape `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::init(&ModelConfig { init_std: 0.0, ..cfg.clone() }, &mut Rng::new(0))?;
        let ours = self.tensors();
        let theirs = expected.tensors();
        if ours.len() != theirs.len() {
            return Err(shape_err(
                "model params",
                format!("{} tensors", theirs.len()),
                format!("{}", ours.len()),
            ));
        }
        for ((name, a), (_, b)) in ours.iter().zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(shape_err(
                    "model params",
                    format!("{name} of shape {}x{}", b.rows(), b.cols()),
                    format!("{}x{}", a.rows(), a.cols()),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layerscale_gains_start_at_init() {
        let mut cfg = ModelConfig::new(InputKind::Vocab(6), 14);
        cfg.layerscale = Some(1e-4);
        cfg.layers = 2;
        let p = ModelParams::init(&cfg, &mut Rng::new(1)).unwrap();
        for l in &p.layers {
            assert!(l.gamma_a.data().iter().chain(l.gamma_m.data()).all(|&g| g == 1e-4));
        }
        p.check_shapes(&cfg).unwrap();
        assert_eq!(p.tensors().len(), p.zeros_like().tensors_mut().len());
        assert_eq!(p.zeros_like().l2_norm(), 0.0);
    }

    #[test]
    fn truncated_init() {
        let cfg = ModelConfig::new(InputKind::Scalar, 20);
        let p = ModelParams::init(&cfg, &mut Rng::new(2)).unwrap();
        assert!(p.layers[0].w1.max_abs() <= 0.04);
        assert_eq!(p.pos.shape(), (20, 64));
    }
}
