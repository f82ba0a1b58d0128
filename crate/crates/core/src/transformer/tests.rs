use approx::assert_abs_diff_eq;

use super::*;
use crate::autodiff::kernels;

fn tiny(h: usize, layers: usize, heads: usize, moe: Option<MoEConfig>) -> Model {
    Model::new(ModelConfig::small(h, layers, heads, 11, 6), moe, 7).unwrap()
}

fn batch(seqs: &[Vec<usize>]) -> TokenBatch {
    TokenBatch::from_sequences(seqs, 0).unwrap()
}

fn layer_norm_of(g: &Graph, h: NodeId, eps: f64, n: usize) -> Tensor {
    kernels::layer_norm(g.value(h), &Tensor::filled(&[n], 1.0), &Tensor::zeros(&[n]), eps).unwrap()
}

#[test]
fn zero_embedding_tables_give_zero_output() {
    let mut m = tiny(4, 1, 2, None);
    m.set_param("embeddings.token", Tensor::zeros(&[11, 4])).unwrap();
    m.set_param("embeddings.position", Tensor::zeros(&[6, 4])).unwrap();
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let e = m.embed(&mut g, &b, &batch(&[vec![3, 4, 5]])).unwrap();
    assert!(g.value(e).data().iter().all(|&v| v == 0.0));
}

#[test]
fn same_token_differs_only_through_positions() {
    let mut m = tiny(4, 1, 2, None);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let e = m.embed(&mut g, &b, &batch(&[vec![3, 3]])).unwrap();
    assert_ne!(g.value(e).row(0), g.value(e).row(1));

    let mut pos = Tensor::zeros(&[6, 4]);
    for r in 0..6 {
        pos.data_mut()[r * 4..r * 4 + 4].copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
    }
    m.set_param("embeddings.position", pos).unwrap();
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let e = m.embed(&mut g, &b, &batch(&[vec![3, 3]])).unwrap();
    assert_eq!(g.value(e).row(0), g.value(e).row(1));
}

#[test]
fn tied_projection_recovers_tokens_from_orthogonal_table() {
    // 4 tokens embedded as scaled standard basis vectors in H=4.
    let mut m = Model::new(ModelConfig::small(4, 0, 1, 4, 4), None, 1).unwrap();
    let mut table = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        table.data_mut()[i * 4 + i] = 1.0 + i as f64;
    }
    m.set_param("embeddings.token", table).unwrap();
    m.set_param("embeddings.position", Tensor::zeros(&[4, 4])).unwrap();
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let ids = vec![2, 0, 3, 1];
    let e = m.embed(&mut g, &b, &batch(&[ids.clone()])).unwrap();
    let logits = m.mlm_logits(&mut g, &b, e, &[0, 1, 2, 3]).unwrap();
    let lv = g.value(logits);
    for (r, &id) in ids.iter().enumerate() {
        let row = lv.row(r);
        let argmax = (0..4).max_by(|&a, &c| row[a].partial_cmp(&row[c]).unwrap()).unwrap();
        assert_eq!(argmax, id);
    }
}

#[test]
fn embed_rejects_out_of_range_ids_and_long_sequences() {
    let m = tiny(4, 1, 2, None);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    assert!(matches!(
        m.embed(&mut g, &b, &batch(&[vec![1, 11]])),
        Err(TcdError::Vocabulary { id: 11, size: 11 })
    ));
    assert!(m.embed(&mut g, &b, &batch(&[vec![1; 7]])).is_err());
}

#[test]
fn zeroed_attention_projections_reduce_to_layer_norm() {
    let mut m = tiny(4, 1, 2, None);
    m.set_param("layer.0.attention.value.weight", Tensor::zeros(&[4, 4])).unwrap();
    m.set_param("layer.0.attention.output.weight", Tensor::zeros(&[4, 4])).unwrap();
    let tb = batch(&[vec![1, 2, 3], vec![4, 5, 6]]);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let h = m.embed(&mut g, &b, &tb).unwrap();
    let (out, tap, ..) = m.mha_sublayer(&mut g, &b, 0, h, &tb.layout, None).unwrap();
    assert!(g.value(tap.inner).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.value(out), &layer_norm_of(&g, h, 1e-12, 4));
}

#[test]
fn single_token_attends_to_itself() {
    let m = tiny(4, 1, 2, None);
    let tb = batch(&[vec![5]]);
    let mut g = Graph::new();
    let (_, out) = m.forward(&mut g, &tb, false).unwrap();
    for head in &out.attention[0] {
        assert_eq!(g.value(head[0]).data(), &[1.0]);
    }
}

#[test]
fn two_token_attention_matches_hand_softmax() {
    let mut m = Model::new(ModelConfig::small(2, 1, 1, 3, 2), None, 1).unwrap();
    m.set_param("layer.0.attention.query.weight", Tensor::identity(2)).unwrap();
    m.set_param("layer.0.attention.key.weight", Tensor::identity(2)).unwrap();
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let h = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());
    let layout = BatchLayout::full(1, 2).unwrap();
    let (.., attn) = m.mha_sublayer(&mut g, &b, 0, h, &layout, None).unwrap();
    // scores = q·kᵀ/√2 = [[1, 0], [0, 4]] / √2
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let row0 = [s.exp() / (s.exp() + 1.0), 1.0 / (s.exp() + 1.0)];
    let e4 = (4.0 * s).exp();
    let row1 = [1.0 / (1.0 + e4), e4 / (1.0 + e4)];
    let a = g.value(attn[0][0]);
    for c in 0..2 {
        assert_abs_diff_eq!(a.at(0, c), row0[c], epsilon = 1e-14);
        assert_abs_diff_eq!(a.at(1, c), row1[c], epsilon = 1e-14);
    }
}

#[test]
fn attention_rows_are_distributions_and_stay_inside_sequences() {
    let m = tiny(8, 2, 2, None);
    let a = batch(&[vec![1, 2, 3, 4], vec![5, 6, 7, 8], vec![9, 2]]);
    let b = batch(&[vec![1, 2, 3, 4], vec![5, 6, 1, 1], vec![9, 2]]);
    let mut g = Graph::new();
    let (_, oa) = m.forward(&mut g, &a, false).unwrap();
    for layer in &oa.attention {
        for head in layer {
            for &seq in head {
                let t = g.value(seq);
                let (rows, _) = t.dims2().unwrap();
                for r in 0..rows {
                    assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
    // the padded third sequence only has 2 keys
    assert_eq!(g.value(oa.attention[0][0][2]).shape(), &[4, 2]);
    let mut g2 = Graph::new();
    let (_, ob) = m.forward(&mut g2, &b, false).unwrap();
    let (ha, hb) = (g.value(oa.hidden), g2.value(ob.hidden));
    // sequences 0 and 2 are untouched by the edit to sequence 1
    for r in [0, 1, 2, 3, 8, 9] {
        assert_eq!(ha.row(r), hb.row(r));
    }
    assert_ne!(ha.row(6), hb.row(6));
}

#[test]
fn zeroed_down_projection_reduces_ffn_to_layer_norm() {
    let mut m = tiny(4, 1, 2, None);
    m.set_param("layer.0.ffn.down.weight", Tensor::zeros(&[16, 4])).unwrap();
    let tb = batch(&[vec![1, 2, 3]]);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let h = m.embed(&mut g, &b, &tb).unwrap();
    let (out, tap, _) = m.ffn_sublayer(&mut g, &b, 0, h, None).unwrap();
    assert!(g.value(tap.inner).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.value(out), &layer_norm_of(&g, h, 1e-12, 4));
}

#[test]
fn scalar_ffn_by_hand() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![2.0], vec![0.0]]).unwrap());
    let f = FfnNodes {
        up_w: g.constant(Tensor::from_rows(&[vec![0.5]]).unwrap()),
        up_b: g.constant(Tensor::vector(vec![0.1]).unwrap()),
        down_w: g.constant(Tensor::from_rows(&[vec![3.0]]).unwrap()),
        down_b: g.constant(Tensor::vector(vec![-1.0]).unwrap()),
    };
    let y = ffn_apply(&mut g, x, &f).unwrap();
    // up = 0.5·2 + 0.1 = 1.1; GELU(1.1) = 1.1·Φ(1.1), Φ(1.1) = 0.8643339390536173
    let expect0 = 3.0 * 1.1 * 0.8643339390536173 - 1.0;
    // up = 0.1; GELU(0.1) = 0.1·Φ(0.1), Φ(0.1) = 0.539827837277029
    let expect1 = 3.0 * 0.1 * 0.539827837277029 - 1.0;
    assert_abs_diff_eq!(g.value(y).data()[0], expect0, epsilon = 1e-13);
    assert_abs_diff_eq!(g.value(y).data()[1], expect1, epsilon = 1e-13);
}

#[test]
fn zero_layers_is_just_the_embedding() {
    let m = Model::new(ModelConfig::small(4, 0, 2, 11, 6), None, 3).unwrap();
    let tb = batch(&[vec![1, 2]]);
    let mut g = Graph::new();
    let (b, out) = m.forward(&mut g, &tb, false).unwrap();
    let e = m.embed(&mut g, &b, &tb).unwrap();
    assert_eq!(g.value(out.hidden), g.value(e));
    assert!(out.taps.layers.is_empty());
}

#[test]
fn tap_counts_and_shapes() {
    for moe in [None, Some(MoEConfig::with_experts(3))] {
        let m = tiny(8, 2, 2, moe.clone());
        let tb = batch(&[vec![1, 2, 3], vec![4, 5]]);
        let mut g = Graph::new();
        let (_, out) = m.forward(&mut g, &tb, false).unwrap();
        assert_eq!(out.taps.trunk().count(), 4);
        assert_eq!(out.taps.inner().count(), 4);
        assert_eq!(out.taps.layers.len(), 2);
        for l in &out.taps.layers {
            assert_eq!(l.queries.len(), 2);
            assert_eq!(l.keys.len(), 2);
            for &q in l.queries.iter().chain(&l.keys) {
                assert_eq!(g.shape(q), &[6, 4]);
            }
        }
        for &t in out.taps.trunk().chain(out.taps.inner()) {
            assert_eq!(g.shape(t), &[6, 8]);
        }
        assert_eq!(out.router_probs.len(), if moe.is_some() { 2 } else { 0 });
    }
}

#[test]
fn forward_is_deterministic() {
    let tb = batch(&[vec![1, 2, 3, 4], vec![4, 5, 6]]);
    let run = || {
        let m = tiny(8, 2, 2, Some(MoEConfig::with_experts(4)));
        let mut g = Graph::new();
        let (_, out) = m.forward(&mut g, &tb, false).unwrap();
        g.value(out.hidden).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn parameter_count_matches_enumeration() {
    for moe in [None, Some(MoEConfig::with_experts(1)), Some(MoEConfig::with_experts(5))] {
        for (h, l, heads) in [(8, 0, 1), (8, 2, 2), (12, 3, 3)] {
            let m = tiny(h, l, heads, moe.clone());
            let enumerated: usize = m.params().iter().map(|p| p.value.numel()).sum();
            assert_eq!(m.config().parameter_count(moe.as_ref()), enumerated);
        }
    }
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::small(10, 1, 3, 5, 4);
    assert!(c.validate().is_err());
    c.num_heads = 2;
    assert!(c.validate().is_ok());
    c.vocab_size = 0;
    assert!(c.validate().is_err());
}
