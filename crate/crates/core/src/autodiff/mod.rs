//! Dense tensors and a small reverse-mode autodiff graph covering exactly
//! the operations the diffusion transformer needs.

mod graph;
mod tensor;

pub use graph::{gelu, normal_cdf, softmax, Gradients, Graph, NodeId};
pub use tensor::Tensor;

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_difference(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_cubic() {
        let g = central_difference(&mut |p| p[0] * p[0] * p[0] + 2.0 * p[1], &[1.5, -1.0], 1e-4);
        assert!((g[0] - 6.75).abs() < 1e-7);
        assert!((g[1] - 2.0).abs() < 1e-9);
    }
}
