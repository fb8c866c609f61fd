#[path = "support/oracles.rs"]
mod oracles;

use std::collections::BTreeMap;

use budgeted_attention::model::{EncoderModel, GraphGates};
use budgeted_attention::tensor::{grad_check, Array, Graph, DEFAULT_FD_STEP};
use budgeted_attention::training::distill_loss_graph;
use oracles::{all_params, budgeted_objective, gated_model, straight_through_and_soft_grads, tiny_batch, tiny_config, with_params};

const TOL: f64 = 1e-4;

#[test]
fn budgeted_loss_gradients_match_finite_differences() {
    let model = gated_model(1);
    let params = all_params(&model);
    let objective = budgeted_objective(&model);
    // The violation term is active: mean gate exceeds the budget.
    for name in params.keys() {
        let report = grad_check(&params, name, DEFAULT_FD_STEP, &objective).unwrap();
        assert!(report.passes(TOL), "{name}: relative error {}", report.max_rel_err);
    }
}

#[test]
fn dense_and_distillation_gradients_match_finite_differences() {
    let model = EncoderModel::new(tiny_config(), 4).unwrap();
    let params = all_params(&model);
    let teacher = Array::from_vec(&[3, 3], vec![1.0, -0.5, 0.2, 0.0, 0.3, 2.0, -1.0, 0.8, 0.1]).unwrap();
    let objective = |g: &mut Graph, p: &BTreeMap<String, Array>| {
        let m = with_params(&model, p);
        let (tokens, labels) = tiny_batch();
        let logits = m.forward_graph(g, &tokens, GraphGates::Dense, None)?;
        distill_loss_graph(g, logits, &teacher, &labels, 0.5, 2.0)
    };
    for name in params.keys() {
        let report = grad_check(&params, name, DEFAULT_FD_STEP, objective).unwrap();
        assert!(report.passes(TOL), "{name}: relative error {}", report.max_rel_err);
    }
}

#[test]
fn straight_through_gradient_equals_soft_path_bit_for_bit() {
    // logit(0.5) = 0 would zero the sensitivity gradient.
    for (name, st, soft) in straight_through_and_soft_grads(&gated_model(2), 0.3) {
        assert!(soft.iter().any(|v| *v != 0.0), "{name}");
        assert_eq!(
            st.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            soft.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            "{name}"
        );
    }
}
