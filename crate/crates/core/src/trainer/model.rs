//! Differentiable classifiers: multinomial logistic regression and a
//! one-hidden-layer tanh MLP, both with a softmax cross-entropy loss.
//!
//! Parameters live in one flat vector. Logistic layout: `W (K x d)` row-major
//! then `b (K)`. MLP layout: `W1 (h x d)`, `b1 (h)`, `W2 (K x h)`, `b2 (K)`.
//! Hessian-vector products are exact (forward-over-reverse on the hand-written
//! backward pass).

use serde::{Deserialize, Serialize};

use crate::datamodel::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Logistic,
    Mlp { hidden_width: usize },
}

impl Architecture {
    pub fn num_params(&self, input_dim: usize, num_classes: usize) -> usize {
        match *self {
            Architecture::Logistic => num_classes * (input_dim + 1),
            Architecture::Mlp { hidden_width: h } => h * (input_dim + 1) + num_classes * (h + 1),
        }
    }

    /// Whether the loss is convex in the parameters.
    pub fn is_convex(&self) -> bool {
        matches!(self, Architecture::Logistic)
    }
}

/// A parameter vector together with the shape it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub theta: Vec<f64>,
    pub architecture: Architecture,
    pub input_dim: usize,
    pub num_classes: usize,
    pub epoch_index: usize,
}

/// `log(sum(exp(z)))` computed around the max.
fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// `(diag(p) - p p^T) u`
fn softmax_jvp(p: &[f64], u: &[f64]) -> Vec<f64> {
    let pu: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
    p.iter().zip(u).map(|(pi, ui)| pi * (ui - pu)).collect()
}

struct MlpView<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

fn split_mlp(theta: &[f64], d: usize, h: usize, k: usize) -> MlpView<'_> {
    let (w1, rest) = theta.split_at(h * d);
    let (b1, rest) = rest.split_at(h);
    let (w2, b2) = rest.split_at(k * h);
    debug_assert_eq!(b2.len(), k);
    MlpView { w1, b1, w2, b2 }
}

impl ModelParams {
    pub fn zeros(architecture: Architecture, input_dim: usize, num_classes: usize) -> Self {
        ModelParams {
            theta: vec![0.0; architecture.num_params(input_dim, num_classes)],
            architecture,
            input_dim,
            num_classes,
            epoch_index: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Self {
        ModelParams {
            theta,
            ..self.clone()
        }
    }

    pub fn check_shape(&self) -> Result<()> {
        let expected = self.architecture.num_params(self.input_dim, self.num_classes);
        if self.theta.len() != expected {
            return Err(Error::Config(format!(
                "theta has {} entries, architecture needs {expected}",
                self.theta.len()
            )));
        }
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("theta has non-finite entries".into()));
        }
        Ok(())
    }

    fn check_input(&self, sample: &Sample) -> Result<()> {
        if sample.features.len() != self.input_dim {
            return Err(Error::Config(format!(
                "sample {} has {} features, model expects {}",
                sample.id,
                sample.features.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let (d, k) = (self.input_dim, self.num_classes);
        match self.architecture {
            Architecture::Logistic => {
                let (w, b) = self.theta.split_at(k * d);
                (0..k)
                    .map(|c| b[c] + dot(&w[c * d..(c + 1) * d], x))
                    .collect()
            }
            Architecture::Mlp { hidden_width: h } => {
                let m = split_mlp(&self.theta, d, h, k);
                let a: Vec<f64> = (0..h)
                    .map(|j| (m.b1[j] + dot(&m.w1[j * d..(j + 1) * d], x)).tanh())
                    .collect();
                (0..k)
                    .map(|c| m.b2[c] + dot(&m.w2[c * h..(c + 1) * h], &a))
                    .collect()
            }
        }
    }

    /// Index of the largest logit, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        let mut best = 0;
        for (c, v) in z.iter().enumerate() {
            if *v > z[best] {
                best = c;
            }
        }
        best
    }

    /// Cross-entropy loss of one sample.
    pub fn loss(&self, sample: &Sample) -> Result<f64> {
        self.check_input(sample)?;
        let z = self.logits(&sample.features);
        let l = log_sum_exp(&z) - z[sample.label];
        if !l.is_finite() {
            return Err(Error::Numeric {
                sample_id: sample.id,
                what: "loss".into(),
            });
        }
        Ok(l)
    }

    /// Exact gradient of [`ModelParams::loss`] with respect to theta.
    pub fn loss_gradient(&self, sample: &Sample) -> Result<Vec<f64>> {
        self.check_input(sample)?;
        let mut g = vec![0.0; self.theta.len()];
        let l = self.accumulate_gradient(&sample.features, sample.label, 1.0, &mut g);
        if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                sample_id: sample.id,
                what: "gradient".into(),
            });
        }
        Ok(g)
    }

    /// Adds `scale * grad loss(x, y)` into `out` and returns the unscaled loss.
    pub(crate) fn accumulate_gradient(&self, x: &[f64], y: usize, scale: f64, out: &mut [f64]) -> f64 {
        let (d, k) = (self.input_dim, self.num_classes);
        match self.architecture {
            Architecture::Logistic => {
                let z = self.logits(x);
                let lse = log_sum_exp(&z);
                let (gw, gb) = out.split_at_mut(k * d);
                for c in 0..k {
                    let delta = ((z[c] - lse).exp() - f64::from(u8::from(c == y))) * scale;
                    if delta != 0.0 {
                        for (o, xi) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                            *o += delta * xi;
                        }
                        gb[c] += delta;
                    }
                }
                lse - z[y]
            }
            Architecture::Mlp { hidden_width: h } => {
                let m = split_mlp(&self.theta, d, h, k);
                let a: Vec<f64> = (0..h)
                    .map(|j| (m.b1[j] + dot(&m.w1[j * d..(j + 1) * d], x)).tanh())
                    .collect();
                let z: Vec<f64> = (0..k)
                    .map(|c| m.b2[c] + dot(&m.w2[c * h..(c + 1) * h], &a))
                    .collect();
                let lse = log_sum_exp(&z);
                let dz: Vec<f64> = (0..k)
                    .map(|c| (z[c] - lse).exp() - f64::from(u8::from(c == y)))
                    .collect();
                let (gw1, rest) = out.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(k * h);
                let mut da = vec![0.0; h];
                for c in 0..k {
                    let s = dz[c] * scale;
                    for j in 0..h {
                        gw2[c * h + j] += s * a[j];
                        da[j] += m.w2[c * h + j] * dz[c];
                    }
                    gb2[c] += s;
                }
                for j in 0..h {
                    let dh = da[j] * (1.0 - a[j] * a[j]) * scale;
                    for (o, xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *o += dh * xi;
                    }
                    gb1[j] += dh;
                }
                lse - z[y]
            }
        }
    }

    /// Adds `scale * (hess loss(x, y)) v` into `out`.
    pub(crate) fn accumulate_hvp(&self, x: &[f64], y: usize, v: &[f64], scale: f64, out: &mut [f64]) {
        let (d, k) = (self.input_dim, self.num_classes);
        match self.architecture {
            Architecture::Logistic => {
                let z = self.logits(x);
                let p = softmax(&z);
                let (vw, vb) = v.split_at(k * d);
                let rz: Vec<f64> = (0..k)
                    .map(|c| vb[c] + dot(&vw[c * d..(c + 1) * d], x))
                    .collect();
                let rdz = softmax_jvp(&p, &rz);
                let (ow, ob) = out.split_at_mut(k * d);
                for c in 0..k {
                    let s = rdz[c] * scale;
                    for (o, xi) in ow[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *o += s * xi;
                    }
                    ob[c] += s;
                }
            }
            Architecture::Mlp { hidden_width: h } => {
                let m = split_mlp(&self.theta, d, h, k);
                let dv = split_mlp(v, d, h, k);
                let a: Vec<f64> = (0..h)
                    .map(|j| (m.b1[j] + dot(&m.w1[j * d..(j + 1) * d], x)).tanh())
                    .collect();
                let z: Vec<f64> = (0..k)
                    .map(|c| m.b2[c] + dot(&m.w2[c * h..(c + 1) * h], &a))
                    .collect();
                let p = softmax(&z);
                let dz: Vec<f64> = (0..k).map(|c| p[c] - f64::from(u8::from(c == y))).collect();
                // forward directional derivatives
                let ra: Vec<f64> = (0..h)
                    .map(|j| {
                        let rpre = dv.b1[j] + dot(&dv.w1[j * d..(j + 1) * d], x);
                        (1.0 - a[j] * a[j]) * rpre
                    })
                    .collect();
                let rz: Vec<f64> = (0..k)
                    .map(|c| {
                        dv.b2[c]
                            + dot(&dv.w2[c * h..(c + 1) * h], &a)
                            + dot(&m.w2[c * h..(c + 1) * h], &ra)
                    })
                    .collect();
                let rdz = softmax_jvp(&p, &rz);
                // backward pass and its directional derivative
                let mut da = vec![0.0; h];
                let mut rda = vec![0.0; h];
                let (ow1, rest) = out.split_at_mut(h * d);
                let (ob1, rest) = rest.split_at_mut(h);
                let (ow2, ob2) = rest.split_at_mut(k * h);
                for c in 0..k {
                    for j in 0..h {
                        ow2[c * h + j] += scale * (rdz[c] * a[j] + dz[c] * ra[j]);
                        da[j] += m.w2[c * h + j] * dz[c];
                        rda[j] += dv.w2[c * h + j] * dz[c] + m.w2[c * h + j] * rdz[c];
                    }
                    ob2[c] += scale * rdz[c];
                }
                for j in 0..h {
                    let sech2 = 1.0 - a[j] * a[j];
                    let rdh = (rda[j] * sech2 - 2.0 * da[j] * a[j] * ra[j]) * scale;
                    for (o, xi) in ow1[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *o += rdh * xi;
                    }
                    ob1[j] += rdh;
                }
            }
        }
    }

    /// Hessian-vector product of a single sample's loss.
    pub fn loss_hvp(&self, sample: &Sample, v: &[f64]) -> Result<Vec<f64>> {
        self.check_input(sample)?;
        let mut out = vec![0.0; self.theta.len()];
        self.accumulate_hvp(&sample.features, sample.label, v, 1.0, &mut out);
        Ok(out)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(x: Vec<f64>, y: usize) -> Sample {
        Sample { id: 0, features: x, label: y }
    }

    #[test]
    fn zero_logistic_has_uniform_loss() {
        let p = ModelParams::zeros(Architecture::Logistic, 3, 2);
        for x in [vec![0.0, 0.0, 0.0], vec![5.0, -2.0, 1.0]] {
            for y in 0..2 {
                let l = p.loss(&sample(x.clone(), y)).unwrap();
                assert!((l - 2f64.ln()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn saturated_prediction_has_zero_loss_and_gradient() {
        let mut p = ModelParams::zeros(Architecture::Logistic, 1, 2);
        // logit_1 - logit_0 = 2000 at x = 1
        p.theta = vec![-1000.0, 1000.0, 0.0, 0.0];
        let s = sample(vec![1.0], 1);
        assert_eq!(p.loss(&s).unwrap(), 0.0);
        assert!(p.loss_gradient(&s).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn wrong_dimension_is_rejected() {
        let p = ModelParams::zeros(Architecture::Logistic, 2, 2);
        assert!(p.loss(&sample(vec![1.0], 0)).is_err());
    }

    fn central_gradient(p: &ModelParams, s: &Sample, h: f64) -> Vec<f64> {
        (0..p.len())
            .map(|i| {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.theta[i] += h;
                minus.theta[i] -= h;
                (plus.loss(s).unwrap() - minus.loss(s).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
        (a - b).abs() <= abs + rel * a.abs().max(b.abs())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gradient_matches_finite_differences(
            theta in proptest::collection::vec(-1.5f64..1.5, 40),
            x in proptest::collection::vec(-2.0f64..2.0, 3),
            y in 0usize..3,
            mlp in any::<bool>(),
        ) {
            let arch = if mlp { Architecture::Mlp { hidden_width: 4 } } else { Architecture::Logistic };
            let mut p = ModelParams::zeros(arch, 3, 3);
            let n = p.len();
            p.theta.copy_from_slice(&theta[..n]);
            let s = sample(x, y);
            let g = p.loss_gradient(&s).unwrap();
            let fd = central_gradient(&p, &s, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                prop_assert!(close(*a, *b, 1e-4, 1e-8), "{a} vs {b}");
            }
        }

        #[test]
        fn hvp_matches_gradient_differences(
            theta in proptest::collection::vec(-1.5f64..1.5, 40),
            v in proptest::collection::vec(-1.0f64..1.0, 40),
            x in proptest::collection::vec(-2.0f64..2.0, 3),
            y in 0usize..3,
            mlp in any::<bool>(),
        ) {
            let arch = if mlp { Architecture::Mlp { hidden_width: 4 } } else { Architecture::Logistic };
            let mut p = ModelParams::zeros(arch, 3, 3);
            let n = p.len();
            p.theta.copy_from_slice(&theta[..n]);
            let v = &v[..n];
            let s = sample(x, y);
            let hv = p.loss_hvp(&s, v).unwrap();
            let h = 1e-5;
            let plus = p.with_theta(p.theta.iter().zip(v).map(|(t, d)| t + h * d).collect());
            let minus = p.with_theta(p.theta.iter().zip(v).map(|(t, d)| t - h * d).collect());
            let gp = plus.loss_gradient(&s).unwrap();
            let gm = minus.loss_gradient(&s).unwrap();
            for i in 0..n {
                let fd = (gp[i] - gm[i]) / (2.0 * h);
                prop_assert!(close(hv[i], fd, 1e-4, 1e-7), "{} vs {}", hv[i], fd);
            }
        }
    }
}
