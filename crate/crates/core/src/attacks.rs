//! Untargeted white-box attacks: FGSM, PGD and Carlini–Wagner (l2).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor};
use crate::vit::{argmax, Classifier, ModelError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack spec: {0}")]
    InvalidSpec(String),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("input pixel {value} at {index} outside [0,1]")]
    InputRange { index: usize, value: f64 },
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::tensor::TensorError> for AttackError {
    fn from(e: crate::tensor::TensorError) -> Self {
        AttackError::Model(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum AttackSpec {
    Fgsm { eps: f64 },
    Pgd { eps: f64, alpha: f64, steps: usize },
    Cw { c: f64, kappa: f64, steps: usize, lr: f64 },
}

impl AttackSpec {
    pub const PGD_ALPHA: f64 = 0.025;
    pub const PGD_STEPS: usize = 40;
    pub const CW_STEPS: usize = 100;
    pub const CW_LR: f64 = 1e-2;

    /// FGSM at 0.031 and 0.062, PGD at 0.001 to 0.01, and one C&W setting.
    pub fn default_grid() -> Vec<AttackSpec> {
        let mut grid: Vec<AttackSpec> =
            [0.031, 0.062].iter().map(|&eps| AttackSpec::Fgsm { eps }).collect();
        grid.extend([0.001, 0.003, 0.005, 0.01].iter().map(|&eps| AttackSpec::Pgd {
            eps,
            alpha: Self::PGD_ALPHA,
            steps: Self::PGD_STEPS,
        }));
        grid.push(AttackSpec::Cw { c: 1e-4, kappa: 0.0, steps: Self::CW_STEPS, lr: Self::CW_LR });
        grid
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: String| Err(AttackError::InvalidSpec(m));
        match *self {
            AttackSpec::Fgsm { eps } if !(eps >= 0.0 && eps.is_finite()) => bad(format!("eps {eps}")),
            AttackSpec::Pgd { eps, .. } if !(eps >= 0.0 && eps.is_finite()) => bad(format!("eps {eps}")),
            AttackSpec::Pgd { alpha, .. } if !(alpha > 0.0 && alpha.is_finite()) => {
                bad(format!("alpha {alpha}"))
            }
            AttackSpec::Pgd { steps: 0, .. } => bad("PGD needs at least one step".into()),
            AttackSpec::Cw { c, kappa, lr, steps } => {
                if !(c >= 0.0 && c.is_finite()) {
                    bad(format!("c {c}"))
                } else if !(kappa >= 0.0 && kappa.is_finite()) {
                    bad(format!("kappa {kappa}"))
                } else if !(lr > 0.0 && lr.is_finite()) {
                    bad(format!("lr {lr}"))
                } else if steps == 0 {
                    bad("C&W needs at least one step".into())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            AttackSpec::Fgsm { .. } => "fgsm",
            AttackSpec::Pgd { .. } => "pgd",
            AttackSpec::Cw { .. } => "cw",
        }
    }

    /// Perturbation budget used to order attacks within a family.
    pub fn budget(&self) -> f64 {
        match *self {
            AttackSpec::Fgsm { eps } | AttackSpec::Pgd { eps, .. } => eps,
            AttackSpec::Cw { c, .. } => c,
        }
    }

    /// `key=value` pairs separated by `;`.
    pub fn hyperparameters(&self) -> String {
        match *self {
            AttackSpec::Fgsm { eps } => format!("eps={eps}"),
            AttackSpec::Pgd { eps, alpha, steps } => format!("eps={eps};alpha={alpha};steps={steps}"),
            AttackSpec::Cw { c, kappa, steps, lr } => {
                format!("c={c};kappa={kappa};steps={steps};lr={lr}")
            }
        }
    }

    /// Short label, also used as a directory name.
    pub fn tag(&self) -> String {
        match *self {
            AttackSpec::Fgsm { eps } => format!("fgsm-eps{eps}"),
            AttackSpec::Pgd { eps, .. } => format!("pgd-eps{eps}"),
            AttackSpec::Cw { c, .. } => format!("cw-c{c}"),
        }
    }
}

/// `fgsm:EPS`, `pgd:EPS[:ALPHA:STEPS]`, `cw:C[:KAPPA:STEPS:LR]`.
impl FromStr for AttackSpec {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AttackError::InvalidSpec(s.to_string());
        let parts: Vec<&str> = s.trim().split(':').map(str::trim).collect();
        let f = |i: usize| parts[i].parse::<f64>().map_err(|_| bad());
        let n = |i: usize| parts[i].parse::<usize>().map_err(|_| bad());
        let spec = match (parts[0].to_ascii_lowercase().as_str(), parts.len()) {
            ("fgsm", 2) => AttackSpec::Fgsm { eps: f(1)? },
            ("pgd", 2) => AttackSpec::Pgd { eps: f(1)?, alpha: Self::PGD_ALPHA, steps: Self::PGD_STEPS },
            ("pgd", 4) => AttackSpec::Pgd { eps: f(1)?, alpha: f(2)?, steps: n(3)? },
            ("cw", 2) => AttackSpec::Cw { c: f(1)?, kappa: 0.0, steps: Self::CW_STEPS, lr: Self::CW_LR },
            ("cw", 5) => AttackSpec::Cw { c: f(1)?, kappa: f(2)?, steps: n(3)?, lr: f(4)? },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            AttackSpec::Fgsm { eps } => write!(f, "fgsm:{eps}"),
            AttackSpec::Pgd { eps, alpha, steps } => write!(f, "pgd:{eps}:{alpha}:{steps}"),
            AttackSpec::Cw { c, kappa, steps, lr } => write!(f, "cw:{c}:{kappa}:{steps}:{lr}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub image: Tensor,
    pub clean_prediction: usize,
    pub prediction: usize,
    /// The top-1 prediction changed.
    pub success: bool,
    pub linf: f64,
    pub l2: f64,
    pub iterations: usize,
}

impl AttackResult {
    fn new(
        model: &impl Classifier,
        o: &Tensor,
        image: Tensor,
        clean_prediction: usize,
        iterations: usize,
    ) -> Result<Self, AttackError> {
        let prediction = argmax(&model.logits(&image)?);
        let mut linf: f64 = 0.0;
        let mut sq = 0.0;
        for (a, b) in image.data().iter().zip(o.data()) {
            linf = linf.max((a - b).abs());
            sq += (a - b) * (a - b);
        }
        Ok(AttackResult {
            image,
            clean_prediction,
            prediction,
            success: prediction != clean_prediction,
            linf,
            l2: sq.sqrt(),
            iterations,
        })
    }
}

/// Cross-entropy loss, its input gradient and the logits at `x`.
pub fn loss_gradient(
    model: &impl Classifier,
    x: &Tensor,
    label: usize,
) -> Result<(f64, Tensor, Vec<f64>), AttackError> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let logits = model.logits_on_tape(&mut tape, xv)?;
    let loss = tape.cross_entropy(logits, label)?;
    let grad = tape.grad_input(loss, xv)?;
    Ok((tape.value(loss).data()[0], grad, tape.value(logits).data().to_vec()))
}

fn check_inputs(model: &impl Classifier, o: &Tensor, label: usize) -> Result<(), AttackError> {
    if label >= model.num_classes() {
        return Err(AttackError::BadLabel { label, classes: model.num_classes() });
    }
    if let Some((index, &value)) =
        o.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(AttackError::InputRange { index, value });
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn finite_gradient(g: &Tensor, iteration: usize) -> Result<(), AttackError> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(AttackError::NonFinite { what: "gradient", iteration })
    }
}

/// `clip[0,1](o + ε sign ∇L)`.
pub fn fgsm(model: &impl Classifier, o: &Tensor, label: usize, eps: f64) -> Result<AttackResult, AttackError> {
    AttackSpec::Fgsm { eps }.validate()?;
    check_inputs(model, o, label)?;
    let (_, g, logits) = loss_gradient(model, o, label)?;
    finite_gradient(&g, 0)?;
    let data = o
        .data()
        .iter()
        .zip(g.data())
        .map(|(&p, &d)| (p + eps * sign(d)).clamp(0.0, 1.0))
        .collect();
    let x = Tensor::new(o.shape().to_vec(), data)?;
    AttackResult::new(model, o, x, argmax(&logits), 1)
}

/// `T` signed-gradient steps of size `α`, each projected onto the `ε` ball
/// around `o` and then onto `[0,1]`.
pub fn pgd(
    model: &impl Classifier,
    o: &Tensor,
    label: usize,
    eps: f64,
    alpha: f64,
    steps: usize,
) -> Result<AttackResult, AttackError> {
    AttackSpec::Pgd { eps, alpha, steps }.validate()?;
    check_inputs(model, o, label)?;
    let mut x = o.clone();
    let mut clean_prediction = 0;
    for t in 0..steps {
        let (_, g, logits) = loss_gradient(model, &x, label)?;
        finite_gradient(&g, t)?;
        if t == 0 {
            clean_prediction = argmax(&logits);
        }
        for ((xi, &oi), &gi) in x.data_mut().iter_mut().zip(o.data()).zip(g.data()) {
            *xi = (*xi + alpha * sign(gi)).clamp(oi - eps, oi + eps).clamp(0.0, 1.0);
        }
    }
    AttackResult::new(model, o, x, clean_prediction, steps)
}

/// Pixel squeeze applied before inverting `x = (tanh w + 1) / 2`.
pub const CW_SQUEEZE: f64 = 1e-6;

/// `Q(x) = max(z_y − max_{j≠y} z_j, −κ)` on logits `z`.
pub fn cw_margin(logits: &[f64], label: usize, kappa: f64) -> f64 {
    let other = runner_up(logits, label);
    (logits[label] - logits[other]).max(-kappa)
}

fn runner_up(logits: &[f64], label: usize) -> usize {
    let mut best = usize::from(label == 0);
    for (j, &z) in logits.iter().enumerate() {
        if j != label && z > logits[best] {
            best = j;
        }
    }
    best
}

/// Gradient descent on `w` for `‖x(w) − o‖² + c Q(x(w))`; returns the
/// iterate with the lowest objective.
pub fn cw(
    model: &impl Classifier,
    o: &Tensor,
    label: usize,
    c: f64,
    kappa: f64,
    steps: usize,
    lr: f64,
) -> Result<AttackResult, AttackError> {
    AttackSpec::Cw { c, kappa, steps, lr }.validate()?;
    check_inputs(model, o, label)?;
    let mut w = o.map(|p| (2.0 * p.clamp(CW_SQUEEZE, 1.0 - CW_SQUEEZE) - 1.0).atanh());
    let target = o.clone();
    let mut best: Option<(f64, Tensor)> = None;
    let mut clean_prediction = 0;
    let mut done = 0;
    for t in 0..=steps {
        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone(), true);
        let th = tape.tanh(wv);
        let shifted = tape.add_scalar(th, 1.0);
        let x = tape.scale(shifted, 0.5);
        let ov = tape.constant(target.clone());
        let diff = tape.sub(x, ov)?;
        let sq = tape.mul(diff, diff)?;
        let dist = tape.sum(sq);
        let logits = model.logits_on_tape(&mut tape, x)?;
        let z = tape.value(logits).data().to_vec();
        if t == 0 {
            clean_prediction = argmax(&z);
        }
        let other = runner_up(&z, label);
        let objective = if z[label] - z[other] > -kappa {
            let zy = tape.pick(logits, label)?;
            let zo = tape.pick(logits, other)?;
            let q = tape.sub(zy, zo)?;
            let cq = tape.scale(q, c);
            tape.add(dist, cq)?
        } else {
            tape.add_scalar(dist, -c * kappa)
        };
        let value = tape.value(objective).data()[0];
        if !value.is_finite() {
            if best.is_none() {
                return Err(AttackError::NonFinite { what: "objective", iteration: t });
            }
            log::warn!("C&W objective non-finite at step {t}; keeping best iterate");
            break;
        }
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, tape.value(x).clone()));
        }
        done = t;
        if t == steps {
            break;
        }
        let g = tape.grad_input(objective, wv)?;
        if !g.is_finite() {
            log::warn!("C&W gradient non-finite at step {t}; keeping best iterate");
            break;
        }
        for (wi, gi) in w.data_mut().iter_mut().zip(g.data()) {
            *wi -= lr * gi;
        }
    }
    let (_, x) = best.expect("first iterate is finite");
    AttackResult::new(model, o, x, clean_prediction, done)
}

/// Dispatches on the attack family.
pub fn run_attack(
    model: &impl Classifier,
    o: &Tensor,
    label: usize,
    spec: &AttackSpec,
) -> Result<AttackResult, AttackError> {
    match *spec {
        AttackSpec::Fgsm { eps } => fgsm(model, o, label, eps),
        AttackSpec::Pgd { eps, alpha, steps } => pgd(model, o, label, eps, alpha, steps),
        AttackSpec::Cw { c, kappa, steps, lr } => cw(model, o, label, c, kappa, steps, lr),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Var;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `z = W vec(x) + b`.
    struct Linear {
        w: Tensor,
        b: Tensor,
    }

    impl Linear {
        fn random(n: usize, k: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Linear {
                w: Tensor::new(vec![n, k], (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap(),
                b: Tensor::new(vec![1, k], (0..k).map(|_| rng.gen_range(-0.1..0.1)).collect())
                    .unwrap(),
            }
        }
    }

    impl Classifier for Linear {
        fn num_classes(&self) -> usize {
            self.w.shape()[1]
        }

        fn input_shape(&self) -> Vec<usize> {
            vec![self.w.shape()[0]]
        }

        fn logits_on_tape(&self, tape: &mut Tape, image: Var) -> Result<Var, ModelError> {
            let n = self.w.shape()[0];
            let row = tape.reshape(image, &[1, n])?;
            let w = tape.constant(self.w.clone());
            let b = tape.constant(self.b.clone());
            let z = tape.matmul(row, w)?;
            let z = tape.add(z, b)?;
            Ok(tape.reshape(z, &[self.num_classes()])?)
        }
    }

    fn image(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(0.2..0.8)).collect()).unwrap()
    }

    #[test]
    fn zero_budget_fgsm_is_identity() {
        let m = Linear::random(12, 4, 0);
        let o = image(12, 1);
        let r = fgsm(&m, &o, 2, 0.0).unwrap();
        assert_eq!(r.image, o);
        assert!(!r.success);
        assert_eq!(r.linf, 0.0);
    }

    #[test]
    fn fgsm_moves_every_pixel_by_eps_along_gradient_sign() {
        let m = Linear::random(12, 4, 0);
        let o = image(12, 1);
        let (_, g, _) = loss_gradient(&m, &o, 1).unwrap();
        let r = fgsm(&m, &o, 1, 0.05).unwrap();
        for ((x, p), d) in r.image.data().iter().zip(o.data()).zip(g.data()) {
            assert!(((x - p).abs() - 0.05).abs() < 1e-12);
            assert_eq!((x - p).signum(), d.signum());
        }
        assert!((r.linf - 0.05).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_pixels_stay_put() {
        let mut m = Linear::random(4, 3, 0);
        for k in 0..3 {
            m.w.data_mut()[k] = 0.0; // first pixel has no influence
        }
        let o = image(4, 2);
        let r = fgsm(&m, &o, 0, 0.1).unwrap();
        assert_eq!(r.image.data()[0], o.data()[0]);
    }

    #[test]
    fn clipping_keeps_pixels_in_range() {
        let m = Linear::random(16, 3, 4);
        let o = Tensor::new(vec![16], (0..16).map(|i| (i % 2) as f64).collect()).unwrap();
        for spec in [
            AttackSpec::Fgsm { eps: 0.3 },
            AttackSpec::Pgd { eps: 0.3, alpha: 0.1, steps: 5 },
        ] {
            let r = run_attack(&m, &o, 0, &spec).unwrap();
            assert!(r.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(r.linf <= 0.3 + 1e-9);
        }
    }

    #[test]
    fn single_step_pgd_equals_fgsm() {
        let m = Linear::random(20, 5, 9);
        for seed in 0..10 {
            let o = image(20, seed);
            let f = fgsm(&m, &o, 3, 0.02).unwrap();
            let p = pgd(&m, &o, 3, 0.02, 0.025, 1).unwrap();
            assert_eq!(f.image, p.image);
        }
    }

    #[test]
    fn pgd_respects_budget_and_increases_loss() {
        let m = Linear::random(20, 5, 9);
        for seed in 0..10 {
            let o = image(20, seed);
            let r = pgd(&m, &o, 1, 0.01, 0.0025, 10).unwrap();
            assert!(r.linf <= 0.01 + 1e-9);
            let (l0, _, _) = loss_gradient(&m, &o, 1).unwrap();
            let (l1, _, _) = loss_gradient(&m, &r.image, 1).unwrap();
            assert!(l1 >= l0);
        }
    }

    #[test]
    fn margin_floor() {
        assert_eq!(cw_margin(&[0.0, 5.0, 1.0], 0, 2.0), -2.0);
        assert_eq!(cw_margin(&[0.0, 5.0, 1.0], 0, 10.0), -5.0);
        assert_eq!(cw_margin(&[3.0, 1.0, 2.0], 0, 0.0), 1.0);
        assert_eq!(cw_margin(&[3.0, 3.0], 1, 0.0), 0.0);
    }

    #[test]
    fn cw_without_attack_term_keeps_the_image() {
        let m = Linear::random(12, 4, 3);
        let o = image(12, 5);
        let r = cw(&m, &o, 0, 0.0, 0.0, 100, 1e-2).unwrap();
        assert!(r.l2 < 1e-3);
        assert!(r.image.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn strong_cw_lowers_the_margin() {
        let m = Linear::random(12, 4, 3);
        let o = image(12, 5);
        let y = argmax(&m.logits(&o).unwrap());
        let before = cw_margin(&m.logits(&o).unwrap(), y, 0.0);
        let r = cw(&m, &o, y, 10.0, 0.0, 100, 1e-2).unwrap();
        let after = cw_margin(&m.logits(&r.image).unwrap(), y, 0.0);
        assert!(after < before);
        assert_eq!(r.clean_prediction, y);
    }

    #[test]
    fn attacks_are_deterministic() {
        let m = Linear::random(12, 4, 3);
        let o = image(12, 5);
        for spec in AttackSpec::default_grid() {
            assert_eq!(run_attack(&m, &o, 1, &spec).unwrap(), run_attack(&m, &o, 1, &spec).unwrap());
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let m = Linear::random(4, 3, 0);
        let o = image(4, 0);
        assert!(fgsm(&m, &o, 3, 0.1).is_err());
        assert!(fgsm(&m, &o, 0, -0.1).is_err());
        assert!(pgd(&m, &o, 0, 0.1, 0.0, 3).is_err());
        assert!(pgd(&m, &o, 0, 0.1, 0.1, 0).is_err());
        assert!(cw(&m, &o, 0, -1.0, 0.0, 3, 0.1).is_err());
        let mut bad = o.clone();
        bad.data_mut()[2] = 1.5;
        assert!(matches!(fgsm(&m, &bad, 0, 0.1), Err(AttackError::InputRange { index: 2, .. })));
    }

    #[test]
    fn spec_strings_round_trip() {
        for spec in AttackSpec::default_grid() {
            assert_eq!(spec.to_string().parse::<AttackSpec>().unwrap(), spec);
        }
        assert_eq!("fgsm:0.062".parse::<AttackSpec>().unwrap(), AttackSpec::Fgsm { eps: 0.062 });
        assert_eq!(
            "pgd:0.01".parse::<AttackSpec>().unwrap(),
            AttackSpec::Pgd { eps: 0.01, alpha: 0.025, steps: 40 }
        );
        assert!("pgd:0.01:0.1".parse::<AttackSpec>().is_err());
        assert!("fgsm:-1".parse::<AttackSpec>().is_err());
        assert_eq!(AttackSpec::default_grid()[1].tag(), "fgsm-eps0.062");
    }
}
