//! Embedding a network into a larger architecture with (nearly) the same
//! input-output map.
//!
//! Widening pads with zero weights and biases: the new hidden units output
//! `sigmoid(0)` but feed nothing forward, so outputs are unchanged exactly.
//! Deepening inserts a sigmoid layer operated in its near-linear regime,
//! `h' = sigmoid(eps * (h - 1/2))`, and folds the inverse affine map into the
//! next layer. The residual is of order `eps^2` plus rounding of order
//! `1e-16 / eps`.

use super::{Architecture, NetworkParams};
use crate::{Error, Result, Scalar};

pub const DEEPEN_EPS: f64 = 3e-5;

/// Zero-pads every hidden layer to `width`.
pub fn widen<T: Scalar>(net: &NetworkParams<T>, width: usize) -> Result<NetworkParams<T>> {
    let a = *net.arch();
    if width < a.width {
        return Err(Error::invalid("width", "cannot shrink a network"));
    }
    let target = Architecture { width, ..a };
    let mut out = NetworkParams::zeros(target)?;
    for l in 1..=a.layers() {
        let (w, b) = net.layer(l);
        let (fi, fo) = (a.fan_in(l), a.fan_out(l));
        let new_fi = target.fan_in(l);
        let (nw, nb) = out.layer_mut(l);
        for j in 0..fo {
            for i in 0..fi {
                nw[j * new_fi + i] = w[j * fi + i];
            }
            nb[j] = b[j];
        }
    }
    Ok(out)
}

/// Inserts near-identity sigmoid layers until the network has
/// `hidden_layers` hidden layers. Requires at least one hidden layer.
pub fn deepen<T: Scalar>(
    net: &NetworkParams<T>,
    hidden_layers: usize,
    eps: f64,
) -> Result<NetworkParams<T>> {
    let mut cur = net.clone();
    if cur.arch().hidden_layers == 0 && hidden_layers > 0 {
        return Err(Error::invalid("hidden_layers", "cannot deepen an affine map"));
    }
    if hidden_layers < cur.arch().hidden_layers {
        return Err(Error::invalid("hidden_layers", "cannot remove layers"));
    }
    while cur.arch().hidden_layers < hidden_layers {
        cur = insert_last_hidden(&cur, eps)?;
    }
    Ok(cur)
}

fn insert_last_hidden<T: Scalar>(net: &NetworkParams<T>, eps: f64) -> Result<NetworkParams<T>> {
    let a = *net.arch();
    let target = Architecture {
        hidden_layers: a.hidden_layers + 1,
        ..a
    };
    let mut out = NetworkParams::zeros(target)?;
    for l in 1..=a.hidden_layers {
        let (w, b) = net.layer(l);
        let (nw, nb) = out.layer_mut(l);
        nw.copy_from_slice(w);
        nb.copy_from_slice(b);
    }
    let width = a.width;
    let e = T::lit(eps);
    let half = T::lit(0.5);
    {
        let (nw, nb) = out.layer_mut(a.hidden_layers + 1);
        for j in 0..width {
            nw[j * width + j] = e;
            nb[j] = -e * half;
        }
    }
    // h = 1/2 + (4/eps)(h' - 1/2) to first order
    let scale = T::lit(4.0 / eps);
    let (w, b) = net.layer(a.layers());
    let fo = a.output_dim;
    let (nw, nb) = out.layer_mut(target.layers());
    for j in 0..fo {
        let mut shift = T::zero();
        for i in 0..width {
            nw[j * width + i] = w[j * width + i] * scale;
            shift = shift + w[j * width + i];
        }
        nb[j] = b[j] + shift * half * (T::one() - scale);
    }
    Ok(out)
}

/// Widen then deepen.
pub fn embed<T: Scalar>(
    net: &NetworkParams<T>,
    hidden_layers: usize,
    width: usize,
) -> Result<NetworkParams<T>> {
    deepen(&widen(net, width)?, hidden_layers, DEEPEN_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn widening_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = NetworkParams::<f64>::init(Architecture::new(1, 2, 2), &mut rng).unwrap();
        let wide = widen(&net, 5).unwrap();
        assert_eq!(wide.arch().param_count(), (5 * 2 + 5) + (2 * 5 + 2));
        for _ in 0..1000 {
            let x = [rng.random_range(0.0..1.0), rng.random_range(-1.0..3.0)];
            assert_eq!(net.forward(&x), wide.forward(&x));
        }
    }

    #[test]
    fn deepening_is_near_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let net = NetworkParams::<f64>::init(Architecture::new(1, 5, 1), &mut rng).unwrap();
        let deep = deepen(&net, 2, DEEPEN_EPS).unwrap();
        assert_eq!(deep.arch().hidden_layers, 2);
        for _ in 0..1000 {
            let x = [rng.random_range(0.0..1.0), rng.random_range(-1.0..3.0)];
            let (a, b) = (net.forward(&x)[0], deep.forward(&x)[0]);
            assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn cannot_shrink() {
        let net = NetworkParams::<f64>::zeros(Architecture::new(2, 5, 1)).unwrap();
        assert!(widen(&net, 2).is_err());
        assert!(deepen(&net, 1, DEEPEN_EPS).is_err());
    }
}
