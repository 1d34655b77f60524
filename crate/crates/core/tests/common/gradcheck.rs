//! Central-difference gradient checks shared by the test targets. Each
//! returns the worst relative error over all checked elements.

use dynprec::nn::layers::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, maxpool_backward, maxpool_forward, relu_backward,
    relu_forward, softmax_xent,
};
use dynprec::nn::{backward, forward, Identity, Tap, TapSite};
use dynprec::rng::substream;
use dynprec::{LayerSpec, Network, Result, Tensor};
use rand::Rng;

const H: f64 = 1e-3;

fn random(shape: &[usize], scale: f64, seed: u64) -> Tensor {
    let mut rng = substream(seed, &[shape.iter().product::<usize>() as u64]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error between `analytic` and central differences of `f`
/// around `x`.
fn check(x: &Tensor, analytic: &Tensor, f: impl Fn(&Tensor) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape");
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += H;
        let mut minus = x.clone();
        minus.data_mut()[i] -= H;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * H);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

pub fn conv2d() -> f64 {
    let x = random(&[2, 3, 7, 6], 1.0, 1);
    let w = random(&[4, 3, 3, 3], 0.5, 2);
    let b = random(&[4], 0.5, 3);
    let (out, cols) = conv2d_forward(&x, &w, &b).unwrap();
    let r = random(out.shape(), 1.0, 4);
    let (dx, dw, db) = conv2d_backward(&r, &cols, &w, x.shape(), true).unwrap();
    let loss = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&conv2d_forward(x, w, b).unwrap().0, &r);
    check(&x, &dx.unwrap(), |t| loss(t, &w, &b))
        .max(check(&w, &dw, |t| loss(&x, t, &b)))
        .max(check(&b, &db, |t| loss(&x, &w, t)))
}

pub fn dense() -> f64 {
    let x = random(&[3, 2, 2, 2], 1.0, 5);
    let w = random(&[5, 8], 0.5, 6);
    let b = random(&[5], 0.5, 7);
    let out = dense_forward(&x, &w, &b).unwrap();
    let r = random(out.shape(), 1.0, 8);
    let (dx, dw, db) = dense_backward(&r, &x, &w, true).unwrap();
    let loss = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&dense_forward(x, w, b).unwrap(), &r);
    check(&x, &dx.unwrap(), |t| loss(t, &w, &b))
        .max(check(&w, &dw, |t| loss(&x, t, &b)))
        .max(check(&b, &db, |t| loss(&x, &w, t)))
}

pub fn relu() -> f64 {
    // Keep every input at least 10h from zero.
    let x = random(&[4, 6], 1.0, 9).map(|v| if v >= 0.0 { v + 0.01 } else { v - 0.01 });
    let r = random(x.shape(), 1.0, 10);
    let dx = relu_backward(&r, &x).unwrap();
    check(&x, &dx, |t| dot(&relu_forward(t), &r))
}

pub fn maxpool() -> f64 {
    // A shuffled ramp with spacing 0.05 keeps window maxima unique under +-h.
    let n = 2 * 2 * 4 * 6;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = substream(11, &[]);
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::new(vec![2, 2, 4, 6], order.iter().map(|&k| k as f64 * 0.05 - 1.0).collect()).unwrap();
    let (out, argmax) = maxpool_forward(&x).unwrap();
    let r = random(out.shape(), 1.0, 12);
    let dx = maxpool_backward(&r, &argmax, x.shape()).unwrap();
    check(&x, &dx, |t| dot(&maxpool_forward(t).unwrap().0, &r))
}

pub fn softmax_xent_loss() -> f64 {
    let logits = random(&[4, 5], 2.0, 13);
    let labels = [0, 3, 4, 1];
    let (_, d) = softmax_xent(&logits, &labels).unwrap();
    check(&logits, &d, |t| softmax_xent(t, &labels).unwrap().0)
}

/// Records every layer output so tests can reject instances near a kink.
struct Record(Vec<Tensor>);

impl Tap for Record {
    fn tap(&mut self, site: TapSite, t: Tensor) -> Result<Tensor> {
        if let TapSite::Activation(_) = site {
            self.0.push(t.clone());
        }
        Ok(t)
    }
}

fn toy_net() -> Network {
    Network::new(
        &[1, 8, 8],
        &[
            LayerSpec::Conv2d { out_channels: 2, kernel: 3 },
            LayerSpec::MaxPool2x2,
            LayerSpec::Relu,
            LayerSpec::Dense { outputs: 4 },
            LayerSpec::Relu,
            LayerSpec::Dense { outputs: 3 },
        ],
    )
    .unwrap()
}

/// Smallest distance of any ReLU input from zero and of any pooling
/// window's top two values.
fn kink_margin(net: &Network, acts: &[Tensor]) -> f64 {
    let mut margin = f64::INFINITY;
    for i in 0..net.num_layers() {
        match net.layer_spec(i) {
            LayerSpec::Relu if i > 0 => {
                for &v in acts[i - 1].data() {
                    margin = margin.min(v.abs());
                }
            }
            LayerSpec::MaxPool2x2 if i > 0 => {
                let t = &acts[i - 1];
                let (h, w) = (t.shape()[2], t.shape()[3]);
                for plane in t.data().chunks_exact(h * w) {
                    for oy in 0..h / 2 {
                        for ox in 0..w / 2 {
                            let mut vals: Vec<f64> = (0..4).map(|k| plane[(2 * oy + k / 2) * w + 2 * ox + k % 2]).collect();
                            vals.sort_by(|a, b| b.total_cmp(a));
                            margin = margin.min(vals[0] - vals[1]);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    margin
}

/// Every parameter of a small conv/pool/relu/dense network under softmax
/// cross-entropy.
pub fn network() -> f64 {
    let net = toy_net();
    let labels = [2, 0, 1];
    // Find a seed whose instance keeps every kink at least 0.05 away.
    let (params, x) = (0..200u64)
        .find_map(|seed| {
            let params = net.init_weights(&mut substream(seed, &[1]));
            let params: Vec<Tensor> = params
                .into_iter()
                .enumerate()
                .map(|(p, t)| if p % 2 == 1 { random(t.shape(), 0.3, seed * 31 + p as u64) } else { t })
                .collect();
            let x = random(&[3, 1, 8, 8], 1.0, seed + 1000);
            let mut rec = Record(Vec::new());
            forward(&net, &params, &x, &mut rec).unwrap();
            (kink_margin(&net, &rec.0) > 0.05).then_some((params, x))
        })
        .expect("an instance away from kinks");

    let (_, cache) = forward(&net, &params, &x, &mut Identity).unwrap();
    let (grads, _) = backward(&net, &params, cache, &labels, &mut Identity).unwrap();
    let loss = |params: &[Tensor]| {
        let (_, cache) = forward(&net, params, &x, &mut Identity).unwrap();
        backward(&net, params, cache, &labels, &mut Identity).unwrap().1
    };
    let mut worst = 0.0f64;
    for (p, g) in grads.iter().enumerate() {
        worst = worst.max(check(&params[p], g, |t| {
            let mut perturbed = params.clone();
            perturbed[p] = t.clone();
            loss(&perturbed)
        }));
    }
    worst
}
