mod common;

use slimformer::numcore::{Graph, Tensor};

#[test]
fn analytic_gradients_match_central_differences() {
    common::check_gradients(0..100, 1e-4).unwrap();
}

#[test]
fn fake_quant_passes_gradient_straight_through() {
    let mut g = Graph::<f64>::new();
    let w = g.leaf(Tensor::from_f64(&[4], &[-1.0, 0.3, 0.0, 1.0]).unwrap());
    let q = g.fake_quant(w);
    let loss = g.sum(q);
    let grad = g.backward(loss).unwrap();
    assert_eq!(grad.get(w).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
}

