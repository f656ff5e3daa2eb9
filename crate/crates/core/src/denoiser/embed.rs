/// Sinusoidal timestep encoding: `f[2i] = sin(t / 10000^(2i/d))`,
/// `f[2i+1] = cos(t / 10000^(2i/d))`.
pub fn embed_timestep(t: usize, dim: usize) -> Vec<f64> {
    let t = t as f64;
    (0..dim)
        .map(|k| {
            let i = (k / 2) as f64;
            let arg = t / 10000f64.powf(2.0 * i / dim as f64);
            if k % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_timestep_alternates() {
        let e = embed_timestep(0, 6);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn unit_timestep_two_dims() {
        let e = embed_timestep(1, 2);
        assert!((e[0] - 0.841471).abs() < 1e-6);
        assert!((e[1] - 0.540302).abs() < 1e-6);
    }

    #[test]
    fn odd_dimension_ends_with_sine() {
        let e = embed_timestep(3, 3);
        assert_eq!(e.len(), 3);
        assert_eq!(e[2], (3.0 / 10000f64.powf(2.0 / 3.0)).sin());
    }

    proptest! {
        #[test]
        fn bounded(t in 0usize..5000, dim in 1usize..64) {
            prop_assert!(embed_timestep(t, dim).iter().all(|v| v.abs() <= 1.0));
        }
    }
}
