mod common;

use common::two_pop_spec;
use rpem::gmm::{gmm_fit, GmmConfig};
use rpem::pkmodels::OneCompartmentModel;
use rpem::rng::Streams;
use rpem::sim::simulate;

fn sorted_by_first_mean(fit: &rpem::gmm::GmmFit) -> Vec<(f64, Vec<f64>)> {
    let p = &fit.params;
    let mut comps: Vec<(f64, Vec<f64>)> =
        (0..p.num_components()).map(|k| (p.weights()[k], p.mean(k).iter().copied().collect())).collect();
    comps.sort_by(|a, b| a.1[0].total_cmp(&b.1[0]));
    comps
}

#[test]
fn recovers_the_two_rate_populations() {
    let sim = simulate(&two_pop_spec(20_000), &OneCompartmentModel, &Streams::new(21)).unwrap();
    let points: Vec<Vec<f64>> = sim.thetas.iter().map(|t| t.to_vec()).collect();
    let fit = gmm_fit(&points, &GmmConfig::new(2), &Streams::new(1)).unwrap();
    let comps = sorted_by_first_mean(&fit);
    assert!((comps[0].1[0] - 0.3).abs() < 0.02 && (comps[1].1[0] - 0.6).abs() < 0.02, "{comps:?}");
    assert!((comps[0].0 - 0.8).abs() < 0.05 && (comps[1].0 - 0.2).abs() < 0.05, "{comps:?}");
    assert!(fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
}

#[test]
fn point_order_only_permutes_labels() {
    let sim = simulate(&two_pop_spec(3000), &OneCompartmentModel, &Streams::new(22)).unwrap();
    let points: Vec<Vec<f64>> = sim.thetas.iter().map(|t| t.to_vec()).collect();
    let mut reversed = points.clone();
    reversed.reverse();
    let a = sorted_by_first_mean(&gmm_fit(&points, &GmmConfig::new(2), &Streams::new(5)).unwrap());
    let b = sorted_by_first_mean(&gmm_fit(&reversed, &GmmConfig::new(2), &Streams::new(5)).unwrap());
    for ((wa, ma), (wb, mb)) in a.iter().zip(&b) {
        assert!((wa - wb).abs() < 1e-6, "{a:?} vs {b:?}");
        assert!(ma.iter().zip(mb).all(|(x, y)| (x - y).abs() < 1e-6 * (1.0 + x.abs())));
    }
}
