//! Compares tape gradients of a small conv net loss against central differences.

use causaladv::autodiff::{finite_diff_grad, relative_error};
use causaladv::{Graph, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(g: &mut Graph<f64>, x: causaladv::NodeId, w: causaladv::NodeId, y: &[usize]) -> Result<causaladv::NodeId> {
    let h = g.conv2d(x, w, None, 1)?;
    let h = g.relu(h)?;
    let h = g.maxpool2x2(h)?;
    let z = g.flatten(h)?;
    let lp = g.log_softmax(z)?;
    let picked = g.gather(lp, y)?;
    let s = g.mean(picked)?;
    g.scalar_mul(s, -1.0)
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::uniform([3, 1, 4, 4], 0.0, 1.0, &mut rng);
    let w = Tensor::uniform([2, 1, 3, 3], -1.0, 1.0, &mut rng);
    let y = [0, 5, 7];

    let mut g = Graph::new();
    let (xn, wn) = (g.constant(x.clone()), g.leaf(w.clone()));
    let l = loss(&mut g, xn, wn, &y)?;
    println!("loss {:.6}", g.value(l).item());
    let analytic = g.backward(l)?.take(wn).expect("weight is a leaf");

    let numeric = finite_diff_grad(
        |wp| {
            let mut g = Graph::new();
            let (xn, wn) = (g.constant(x.clone()), g.constant(wp.clone()));
            let l = loss(&mut g, xn, wn, &y)?;
            Ok(g.value(l).item())
        },
        &w,
        1e-6,
    )?;
    println!("relative error {:.3e}", relative_error(&analytic, &numeric));
    Ok(())
}
