//! Minimal reverse-mode differentiation over 2-D tensors, plus the optimiser.

mod graph;
mod params;

pub use graph::{softmax_rows, Graph, Var};
pub(crate) use graph::{layer_norm_rows, mix_forward};
pub use params::{Adam, Gradients, ParamId, ParamStore};

/// Largest relative deviation between analytic and central-difference gradients.
///
/// `loss` builds the scalar objective on a fresh graph. Relative error per
/// entry is |a − n| / max(|a|, |n|, floor).
pub fn gradient_deviation<F>(store: &ParamStore, eps: f64, floor: f64, loss: F) -> f64
where
    F: Fn(&mut Graph) -> Var,
{
    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.backward(l)
    };
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        for idx in 0..store.get(id).len() {
            let orig = store.get(id).as_slice().expect("standard layout")[idx];
            let eval = |w: &mut ParamStore, x: f64| {
                w.get_mut(id).as_slice_mut().unwrap()[idx] = x;
                let mut g = Graph::new(w);
                let l = loss(&mut g);
                g.scalar(l)
            };
            let up = eval(&mut work, orig + eps);
            let down = eval(&mut work, orig - eps);
            work.get_mut(id).as_slice_mut().unwrap()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g.as_slice().unwrap()[idx]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}
