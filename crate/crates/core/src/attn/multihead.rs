use crate::error::{shape_err, Result};
use crate::matrix::{matmul, Matrix};

use super::config::{AttnConfig, PosBias};
use super::reference::attn_forward;

/// Projection weights of one head.
#[derive(Clone, Debug)]
pub struct HeadWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

/// `[head₁(X), …, head_h(X)] · Wo`. With ALiBi configured, head `h` uses
/// slope index `h` of `heads.len()`.
pub fn multihead_attn(x: &Matrix, heads: &[HeadWeights], wo: &Matrix, cfg: &AttnConfig) -> Result<Matrix> {
    let total_dv: usize = heads.iter().map(|h| h.wv.cols()).sum();
    if total_dv != wo.rows() {
        return Err(shape_err("multihead_attn", format!("Wo rows = {total_dv}"), format!("{}", wo.rows())));
    }
    let mut outs = Vec::with_capacity(heads.len());
    for (h, w) in heads.iter().enumerate() {
        let q = matmul(x, &w.wq)?;
        let k = matmul(x, &w.wk)?;
        let v = matmul(x, &w.wv)?;
        let mut head_cfg = *cfg;
        if let PosBias::Alibi { .. } = cfg.pos_bias {
            head_cfg.pos_bias = PosBias::Alibi {
                num_heads: heads.len(),
                head: h,
            };
        }
        outs.push(attn_forward(&q, &k, &v, &head_cfg)?.o);
    }
    matmul(&Matrix::hcat(&outs)?, wo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_normal, Rng};

    fn head(rng: &mut Rng, d: usize, dh: usize) -> HeadWeights {
        HeadWeights {
            wq: rng_normal(rng, d, dh, 0.0, 0.5, None),
            wk: rng_normal(rng, d, dh, 0.0, 0.5, None),
            wv: rng_normal(rng, d, dh, 0.0, 0.5, None),
        }
    }

    #[test]
    fn single_head_identity_output() {
        let mut rng = Rng::new(1);
        let x = rng_normal(&mut rng, 5, 4, 0.0, 1.0, None);
        let h = head(&mut rng, 4, 4);
        let cfg = AttnConfig::sigmoid();
        let got = multihead_attn(&x, std::slice::from_ref(&h), &Matrix::identity(4), &cfg).unwrap();
        let q = matmul(&x, &h.wq).unwrap();
        let k = matmul(&x, &h.wk).unwrap();
        let v = matmul(&x, &h.wv).unwrap();
        let want = attn_forward(&q, &k, &v, &cfg).unwrap().o;
        assert_eq!(got, want);
    }

    #[test]
    fn zero_output_weights() {
        let mut rng = Rng::new(2);
        let x = rng_normal(&mut rng, 3, 4, 0.0, 1.0, None);
        let heads = vec![head(&mut rng, 4, 2), head(&mut rng, 4, 2)];
        let out = multihead_attn(&x, &heads, &Matrix::zeros(4, 4), &AttnConfig::softmax()).unwrap();
        assert_eq!(out, Matrix::zeros(3, 4));
    }

    #[test]
    fn two_heads_match_manual_composition() {
        let mut rng = Rng::new(3);
        let x = rng_normal(&mut rng, 6, 4, 0.0, 1.0, None);
        let heads = vec![head(&mut rng, 4, 2), head(&mut rng, 4, 3)];
        let wo = rng_normal(&mut rng, 5, 4, 0.0, 1.0, None);
        let cfg = AttnConfig::sigmoid().with_alibi(2, 0);
        let got = multihead_attn(&x, &heads, &wo, &cfg).unwrap();
        // manual: concatenate head outputs and multiply block-wise
        let mut manual = Matrix::zeros(6, 4);
        let mut row_off = 0;
        for (h, w) in heads.iter().enumerate() {
            let c = cfg.with_alibi(2, h);
            let o = attn_forward(
                &matmul(&x, &w.wq).unwrap(),
                &matmul(&x, &w.wk).unwrap(),
                &matmul(&x, &w.wv).unwrap(),
                &c,
            )
            .unwrap()
            .o;
            let wo_block = wo.slice_rows(row_off, w.wv.cols());
            manual = manual.add(&matmul(&o, &wo_block).unwrap()).unwrap();
            row_off += w.wv.cols();
        }
        assert!(got.max_abs_diff(&manual) < 1e-14);
    }

    #[test]
    fn output_weight_shape_checked() {
        let mut rng = Rng::new(4);
        let x = rng_normal(&mut rng, 3, 4, 0.0, 1.0, None);
        let heads = vec![head(&mut rng, 4, 2)];
        assert!(multihead_attn(&x, &heads, &Matrix::zeros(3, 4), &AttnConfig::sigmoid()).is_err());
    }
}
