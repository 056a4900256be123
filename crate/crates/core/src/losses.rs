//! Training objectives, expressed on the autodiff graph so that every loss is
//! differentiable through the full model.

use ndgrad::{Graph, Real, Tensor, Var};

use crate::{Result, SsptError};

/// Mean over samples of `-log softmax(logits)[label]`. Shared by the stock
/// code and sector classification tasks.
pub fn cross_entropy<F: Real>(g: &mut Graph<F>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(SsptError::Data(format!(
            "logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(SsptError::Data(format!("class index {bad} out of range for {} classes", shape[1])));
    }
    let logp = g.log_softmax(logits)?;
    let picked = g.pick(logp, labels)?;
    let mean = g.mean(picked)?;
    Ok(g.scale(mean, -1.0)?)
}

pub fn scc_loss<F: Real>(g: &mut Graph<F>, logits: Var, stocks: &[usize]) -> Result<Var> {
    cross_entropy(g, logits, stocks)
}

pub fn ssc_loss<F: Real>(g: &mut Graph<F>, logits: Var, sectors: &[usize]) -> Result<Var> {
    cross_entropy(g, logits, sectors)
}

/// Mean squared error between per-sample predictions and targets.
pub fn map_loss<F: Real>(g: &mut Graph<F>, predictions: Var, targets: &[F]) -> Result<Var> {
    let shape = g.value(predictions).shape().to_vec();
    if shape != [targets.len()] {
        return Err(SsptError::Data(format!(
            "predictions {shape:?} do not match {} targets",
            targets.len()
        )));
    }
    let t = g.constant(Tensor::new(shape, targets.to_vec())?)?;
    let diff = g.sub(predictions, t)?;
    let sq = g.square(diff)?;
    Ok(g.mean(sq)?)
}

/// Mean squared error over masked positions only. `predictions`, `targets`
/// and `mask` are all `[batch, window]`; `mask` holds 1 at masked steps.
pub fn mvp_loss<F: Real>(g: &mut Graph<F>, predictions: Var, targets: &Tensor<F>, mask: &Tensor<F>) -> Result<Var> {
    let shape = g.value(predictions).shape().to_vec();
    if targets.shape() != shape.as_slice() || mask.shape() != shape.as_slice() {
        return Err(SsptError::Data(format!(
            "predictions {shape:?}, targets {:?} and mask {:?} differ",
            targets.shape(),
            mask.shape()
        )));
    }
    let count = mask.data().iter().filter(|&&m| m != F::zero()).count();
    if count == 0 {
        return Err(SsptError::Data("no masked positions".into()));
    }
    let t = g.constant(targets.clone())?;
    let m = g.constant(mask.clone())?;
    let diff = g.sub(predictions, t)?;
    let diff = g.mul(diff, m)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq)?;
    Ok(g.scale(total, 1.0 / count as f64)?)
}

/// Loss weights for the three pre-training tasks. A task is active iff its
/// weight is positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Coefficients {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(SsptError::Config(format!("loss coefficients must be non-negative: {all:?}")));
        }
        if all.iter().all(|&c| c == 0.0) {
            return Err(SsptError::Config("at least one loss coefficient must be positive".into()));
        }
        Ok(())
    }
}

/// `alpha * scc + beta * ssc + gamma * map`, skipping inactive tasks. A task
/// with a positive weight must have its loss supplied.
pub fn combined_loss<F: Real>(
    g: &mut Graph<F>,
    coefficients: Coefficients,
    scc: Option<Var>,
    ssc: Option<Var>,
    map: Option<Var>,
) -> Result<Var> {
    coefficients.validate()?;
    let mut total: Option<Var> = None;
    for (name, c, loss) in [
        ("scc", coefficients.alpha, scc),
        ("ssc", coefficients.beta, ssc),
        ("map", coefficients.gamma, map),
    ] {
        if c == 0.0 {
            continue;
        }
        let loss = loss.ok_or_else(|| SsptError::Config(format!("task `{name}` is active but has no loss")))?;
        let term = g.scale(loss, c)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("validated: at least one active task"))
}

/// Regression and ranking parts of the stock selection objective, kept apart
/// so callers can inspect each term.
#[derive(Clone, Copy, Debug)]
pub struct SelectionLoss {
    pub total: Var,
    pub regression: Var,
    pub ranking: Var,
}

/// `sum_i (p_i - r_i)^2 + eps * sum_i sum_j max(0, -(p_i - p_j)(r_i - r_j))`
/// over all ordered pairs of one trading day.
pub fn selection_loss<F: Real>(g: &mut Graph<F>, predictions: Var, returns: &[F], eps: f64) -> Result<SelectionLoss> {
    let shape = g.value(predictions).shape().to_vec();
    if shape != [returns.len()] {
        return Err(SsptError::Data(format!(
            "predictions {shape:?} do not match {} returns",
            returns.len()
        )));
    }
    let r = g.constant(Tensor::new(shape, returns.to_vec())?)?;
    let diff = g.sub(predictions, r)?;
    let sq = g.square(diff)?;
    let regression = g.sum(sq)?;

    let n = returns.len();
    let mut rd = Vec::with_capacity(n * n);
    for &ri in returns {
        for &rj in returns {
            rd.push(ri - rj);
        }
    }
    let rd = g.constant(Tensor::new(vec![n, n], rd)?)?;
    let pd = g.pairwise_diff(predictions)?;
    let agree = g.mul(pd, rd)?;
    let disagree = g.scale(agree, -1.0)?;
    let hinge = g.max_zero(disagree)?;
    let hinge = g.sum(hinge)?;
    let ranking = g.scale(hinge, eps)?;
    let total = g.add(regression, ranking)?;
    Ok(SelectionLoss {
        total,
        regression,
        ranking,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(f: impl FnOnce(&mut Graph<f64>) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.value(v).item()
    }

    fn logits(g: &mut Graph<f64>, rows: usize, vals: &[f64]) -> Var {
        g.constant(Tensor::new(vec![rows, vals.len() / rows], vals.to_vec()).unwrap())
            .unwrap()
    }

    #[test]
    fn cross_entropy_cases() {
        let two = eval(|g| {
            let l = logits(g, 1, &[0.0, 4f64.ln()]);
            cross_entropy(g, l, &[1]).unwrap()
        });
        assert!((two - 0.223_143_551_314_209_7).abs() < 1e-12);

        for c in [1026usize, 112] {
            let uniform = eval(|g| {
                let l = logits(g, 2, &vec![0.0; 2 * c]);
                cross_entropy(g, l, &[0, c - 1]).unwrap()
            });
            assert!((uniform - (c as f64).ln()).abs() < 1e-12);
        }

        let sure = eval(|g| {
            let l = logits(g, 1, &[0.0, 50.0, 0.0]);
            cross_entropy(g, l, &[1]).unwrap()
        });
        assert!(sure < 1e-20);
    }

    #[test]
    fn scc_and_ssc_share_the_kernel() {
        let vals = [0.3, -1.2, 2.0, 0.1, 0.0, 0.7];
        let a = eval(|g| {
            let l = logits(g, 2, &vals);
            scc_loss(g, l, &[2, 0]).unwrap()
        });
        let b = eval(|g| {
            let l = logits(g, 2, &vals);
            ssc_loss(g, l, &[2, 0]).unwrap()
        });
        assert_eq!(a, b);
    }

    #[test]
    fn class_index_out_of_range() {
        let mut g = Graph::<f64>::new();
        let l = logits(&mut g, 1, &[0.0, 1.0]);
        assert!(matches!(cross_entropy(&mut g, l, &[2]), Err(SsptError::Data(_))));
    }

    #[test]
    fn map_and_mvp_mse() {
        let v = eval(|g| {
            let p = g.constant(Tensor::from_vec(vec![0.1])).unwrap();
            map_loss(g, p, &[0.3]).unwrap()
        });
        assert!((v - 0.04).abs() < 1e-15);

        let v = eval(|g| {
            let p = g.constant(Tensor::new(vec![1, 3], vec![0.5, 9.0, -3.0]).unwrap()).unwrap();
            let t = Tensor::new(vec![1, 3], vec![0.4, 0.0, 0.0]).unwrap();
            let m = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
            mvp_loss(g, p, &t, &m).unwrap()
        });
        assert!((v - 0.01).abs() < 1e-15);
    }

    #[test]
    fn combined_loss_weights() {
        let run = |c: Coefficients, losses: [f64; 3]| {
            let mut g = Graph::<f64>::new();
            let [a, b, m] = losses.map(|l| g.constant(Tensor::scalar(l)).unwrap());
            combined_loss(&mut g, c, Some(a), Some(b), Some(m)).map(|v| g.value(v).item())
        };
        let c = |alpha, beta, gamma| Coefficients { alpha, beta, gamma };
        assert_eq!(run(c(1.0, 1.0, 1.0), [1.0, 2.0, 3.0]).unwrap(), 6.0);
        assert_eq!(run(c(1.0, 0.0, 0.0), [0.37, 2.0, 3.0]).unwrap(), 0.37);
        assert!((run(c(1.0, 1.0, 10.0), [0.2, 0.3, 0.01]).unwrap() - 0.6).abs() < 1e-12);
        assert!(matches!(run(c(0.0, 0.0, 0.0), [1.0; 3]), Err(SsptError::Config(_))));
    }

    #[test]
    fn selection_loss_two_stocks() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_vec(vec![0.1, 0.2])).unwrap();
        let l = selection_loss(&mut g, p, &[0.2, 0.1], 1.0).unwrap();
        assert!((g.value(l.regression).item() - 0.02).abs() < 1e-15);
        assert!((g.value(l.ranking).item() - 0.02).abs() < 1e-15);
        assert!((g.value(l.total).item() - 0.04).abs() < 1e-15);
    }

    #[test]
    fn selection_loss_perfect_and_monotone() {
        let r = [0.03, -0.01, 0.02, 0.0];
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_vec(r.to_vec())).unwrap();
        let l = selection_loss(&mut g, p, &r, 5.0).unwrap();
        assert_eq!(g.value(l.total).item(), 0.0);

        let scaled: Vec<f64> = r.iter().map(|v| 3.0 * v + 1.0).collect();
        let p = g.constant(Tensor::from_vec(scaled)).unwrap();
        let l = selection_loss(&mut g, p, &r, 5.0).unwrap();
        assert_eq!(g.value(l.ranking).item(), 0.0);

        let p = g.constant(Tensor::from_vec(vec![0.1])).unwrap();
        assert!(selection_loss(&mut g, p, &r, 1.0).is_err());
    }
}
