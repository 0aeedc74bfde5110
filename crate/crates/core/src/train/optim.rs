use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::Parameterized;

#[derive(Clone, Debug, PartialEq)]
pub struct Moment {
    pub name: String,
    pub first: Array2<f64>,
    pub second: Array2<f64>,
}

/// Adam state. Moments follow the parameter visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub moments: Vec<Moment>,
}

impl OptimizerState {
    pub fn new(params: &impl Parameterized, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        check_adam_settings(learning_rate, beta1, beta2, epsilon)?;
        let mut moments = Vec::new();
        params.visit("", &mut |name, p| {
            moments.push(Moment {
                name: name.to_string(),
                first: Array2::zeros(p.value.raw_dim()),
                second: Array2::zeros(p.value.raw_dim()),
            })
        });
        Ok(Self {
            step: 0,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            moments,
        })
    }

    /// Default hyperparameters: lr 1e-3, betas 0.9 / 0.999, epsilon 1e-8.
    pub fn adam(params: &impl Parameterized) -> Self {
        Self::new(params, 1e-3, 0.9, 0.999, 1e-8).expect("defaults are valid")
    }

    /// Check that moments line up with `params` block by block.
    pub fn check_matches(&self, params: &impl Parameterized) -> Result<()> {
        let mut problem = None;
        let mut i = 0;
        params.visit("", &mut |name, p| {
            if problem.is_some() {
                return;
            }
            match self.moments.get(i) {
                None => problem = Some(format!("optimizer has no moments for block {name}")),
                Some(m) if m.name != name => {
                    problem = Some(format!("optimizer block {i} is {}, expected {name}", m.name))
                }
                Some(m) if m.first.dim() != p.value.dim() || m.second.dim() != p.value.dim() => {
                    problem = Some(format!(
                        "block {name}: moments {:?} vs parameter {:?}",
                        m.first.dim(),
                        p.value.dim()
                    ))
                }
                Some(_) => {}
            }
            i += 1;
        });
        if problem.is_none() && i != self.moments.len() {
            problem = Some(format!(
                "optimizer holds {} blocks, network has {i}",
                self.moments.len()
            ));
        }
        match problem {
            Some(p) => Err(Error::Shape(p)),
            None => Ok(()),
        }
    }
}

pub(crate) fn check_adam_settings(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<()> {
    if !(learning_rate > 0.0 && learning_rate.is_finite())
        || !(0.0..1.0).contains(&beta1)
        || !(0.0..1.0).contains(&beta2)
        || !(epsilon > 0.0)
    {
        return Err(Error::Config(format!(
            "bad optimizer settings: lr {learning_rate}, beta1 {beta1}, beta2 {beta2}, epsilon {epsilon}"
        )));
    }
    Ok(())
}

/// One bias-corrected Adam update using the gradients stored in `params`.
pub fn adam_step(params: &mut impl Parameterized, opt: &mut OptimizerState) -> Result<()> {
    opt.check_matches(params)?;
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2, eps, lr) = (opt.beta1, opt.beta2, opt.epsilon, opt.learning_rate);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut i = 0;
    params.visit_mut("", &mut |_, p| {
        let m = &mut opt.moments[i];
        ndarray::Zip::from(&mut p.value)
            .and(&p.grad)
            .and(&mut m.first)
            .and(&mut m.second)
            .for_each(|w, &g, m1, m2| {
                *m1 = b1 * *m1 + (1.0 - b1) * g;
                *m2 = b2 * *m2 + (1.0 - b2) * g * g;
                let mhat = *m1 / c1;
                let vhat = *m2 / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            });
        i += 1;
    });
    Ok(())
}
