//! Unsupervised objectives for the glare-aware decomposition.
//!
//! Every ℓ1 norm reduces by the mean, so the weights do not depend on the
//! image resolution. Subgradients at kinks are zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Weights of the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// illumination smoothness
    pub alpha1: f64,
    /// illumination initialisation
    pub alpha2: f64,
    /// suppression of `L·R̂` above the image
    pub alpha3: f64,
    /// consistency of `R̂` with `R`
    pub alpha4: f64,
    /// floor of the smoothness denominator
    pub xi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha1: 0.5, alpha2: 0.1, alpha3: 0.2, alpha4: 0.1, xi: 0.01 }
    }
}

impl LossWeights {
    /// Suppression must dominate consistency, and the denominator floor must be positive.
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha1, self.alpha2, self.alpha3, self.alpha4];
        if all.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::config(format!("loss weights must be finite and non-negative: {all:?}")));
        }
        if self.alpha3 <= self.alpha4 {
            return Err(Error::config(format!(
                "suppression weight alpha3 = {} must exceed consistency weight alpha4 = {}",
                self.alpha3, self.alpha4
            )));
        }
        if !(self.xi > 0.0) {
            return Err(Error::config(format!("xi must be positive, got {}", self.xi)));
        }
        Ok(())
    }

    /// `[1, α1, α2, α3, α4]` in component order.
    pub fn coefficients(&self) -> [f64; 5] {
        [1.0, self.alpha1, self.alpha2, self.alpha3, self.alpha4]
    }

    /// Weighted sum of plain component values.
    pub fn combine(&self, components: &LossValues) -> f64 {
        self.coefficients().iter().zip(components.as_array()).map(|(w, c)| w * c).sum()
    }
}

/// Switches that reproduce the loss ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Reconstruct from `L·R̂` instead of `L·R` (plain Retinex).
    pub recon_on_r_hat: bool,
    pub no_smooth: bool,
    pub no_init: bool,
    pub no_suppress: bool,
    pub no_consist: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 5] = ["recon_on_r_hat", "no_smooth", "no_init", "no_suppress", "no_consist"];

    pub fn by_name(name: &str) -> Option<Self> {
        let mut a = Ablation::default();
        match name {
            "recon_on_r_hat" => a.recon_on_r_hat = true,
            "no_smooth" => a.no_smooth = true,
            "no_init" => a.no_init = true,
            "no_suppress" => a.no_suppress = true,
            "no_consist" => a.no_consist = true,
            _ => return None,
        }
        Some(a)
    }

    /// Weights after zeroing the ablated terms. Applied after validation, so
    /// an ablated α3 does not trip the dominance check.
    pub fn apply(&self, w: &LossWeights) -> LossWeights {
        let zero_if = |off: bool, v: f64| if off { 0.0 } else { v };
        LossWeights {
            alpha1: zero_if(self.no_smooth, w.alpha1),
            alpha2: zero_if(self.no_init, w.alpha2),
            alpha3: zero_if(self.no_suppress, w.alpha3),
            alpha4: zero_if(self.no_consist, w.alpha4),
            xi: w.xi,
        }
    }
}

/// Component values in the order recon, smooth, init, suppress, consist.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub recon: f64,
    pub smooth: f64,
    pub init: f64,
    pub suppress: f64,
    pub consist: f64,
}

impl LossValues {
    pub fn as_array(&self) -> [f64; 5] {
        [self.recon, self.smooth, self.init, self.suppress, self.consist]
    }

    pub fn all_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// Component losses as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub recon: Var,
    pub smooth: Var,
    pub init: Var,
    pub suppress: Var,
    pub consist: Var,
}

impl LossTerms {
    fn as_array(&self) -> [Var; 5] {
        [self.recon, self.smooth, self.init, self.suppress, self.consist]
    }

    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossValues {
        let v = |x: Var| g.item(x).as_f64();
        LossValues {
            recon: v(self.recon),
            smooth: v(self.smooth),
            init: v(self.init),
            suppress: v(self.suppress),
            consist: v(self.consist),
        }
    }
}

/// `mean |L·R − I|`
pub fn recon_loss<T: Scalar>(g: &mut Graph<T>, illum: Var, refl: Var, image: Var) -> Result<Var> {
    let lr = g.mul(illum, refl)?;
    let d = g.sub(lr, image)?;
    let a = g.abs(d);
    g.mean(a)
}

/// `mean |∇x L| / max(|∇x Y|, ξ) + mean |∇y L| / max(|∇y Y|, ξ)` with `Y` the
/// channel maximum of the image and forward differences zero at the far edge.
pub fn smooth_loss<T: Scalar>(g: &mut Graph<T>, illum: Var, image: Var, xi: f64) -> Result<Var> {
    if !(xi > 0.0) {
        return Err(Error::config(format!("xi must be positive, got {xi}")));
    }
    let luma = g.max_over_channel(image)?;
    let xi = T::of(xi);
    let mut terms = [illum; 2];
    for (axis, term) in terms.iter_mut().enumerate() {
        let (dl, dy) = if axis == 0 {
            (g.diff_x(illum)?, g.diff_x(luma)?)
        } else {
            (g.diff_y(illum)?, g.diff_y(luma)?)
        };
        let num = g.abs(dl);
        let den = g.abs(dy);
        let den = g.max_scalar(den, xi);
        let ratio = g.div(num, den)?;
        *term = g.mean(ratio)?;
    }
    g.add(terms[0], terms[1])
}

/// `mean |L − max_c I|`
pub fn init_loss<T: Scalar>(g: &mut Graph<T>, illum: Var, image: Var) -> Result<Var> {
    match g.shape(image) {
        [_, 3, _, _] => {}
        s => return Err(Error::shape(format!("initialisation target must be RGB, got {s:?}"))),
    }
    let l0 = g.max_over_channel(image)?;
    let d = g.sub(illum, l0)?;
    let a = g.abs(d);
    g.mean(a)
}

/// `mean max(0, L·R̂ − I)`
pub fn suppress_loss<T: Scalar>(g: &mut Graph<T>, illum: Var, r_hat: Var, image: Var) -> Result<Var> {
    let lr = g.mul(illum, r_hat)?;
    let d = g.sub(lr, image)?;
    let h = g.relu(d);
    g.mean(h)
}

/// `mean |R̂ − R|`
pub fn consist_loss<T: Scalar>(g: &mut Graph<T>, r_hat: Var, refl: Var) -> Result<Var> {
    if g.shape(r_hat) != g.shape(refl) {
        return Err(Error::shape(format!(
            "consistency operands differ: {:?} vs {:?}",
            g.shape(r_hat),
            g.shape(refl)
        )));
    }
    let d = g.sub(r_hat, refl)?;
    let a = g.abs(d);
    g.mean(a)
}

fn weighted_sum<T: Scalar>(g: &mut Graph<T>, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (coef, term) in w.coefficients().into_iter().zip(terms.as_array()) {
        let scaled = g.scale(term, T::of(coef));
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled)?,
        });
    }
    Ok(total.expect("five terms"))
}

/// `recon + α1·smooth + α2·init + α3·suppress + α4·consist`
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, terms: &LossTerms, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    weighted_sum(g, terms, weights)
}

/// Decomposition outputs that the objective is evaluated on.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveInputs {
    pub illum: Var,
    pub r_hat: Var,
    pub refl: Var,
    pub image: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub ablation: Ablation,
    /// Treat `R` as a fixed target in the consistency term.
    pub stop_grad_consist: bool,
}

/// Builds every component and the weighted total, honouring ablations.
pub fn objective<T: Scalar>(g: &mut Graph<T>, x: &ObjectiveInputs, cfg: &ObjectiveConfig) -> Result<(Var, LossTerms)> {
    cfg.weights.validate()?;
    let recon_refl = if cfg.ablation.recon_on_r_hat { x.r_hat } else { x.refl };
    let consist_target = if cfg.stop_grad_consist { g.detach(x.refl) } else { x.refl };
    let terms = LossTerms {
        recon: recon_loss(g, x.illum, recon_refl, x.image)?,
        smooth: smooth_loss(g, x.illum, x.image, cfg.weights.xi)?,
        init: init_loss(g, x.illum, x.image)?,
        suppress: suppress_loss(g, x.illum, x.r_hat, x.image)?,
        consist: consist_loss(g, x.r_hat, consist_target)?,
    };
    let total = weighted_sum(g, &terms, &cfg.ablation.apply(&cfg.weights))?;
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Tensor};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn px(v: f64) -> Tensor<f64> {
        Tensor::full(&[1, 1, 1, 1], v)
    }

    #[test]
    fn recon_examples() {
        let mut g = Graph::new();
        let l = g.constant(&px(0.5));
        let r = g.constant(&px(0.8));
        let i = g.constant(&px(0.5));
        let v = recon_loss(&mut g, l, r, i).unwrap();
        assert!((g.item(v) - 0.1).abs() < 1e-15);
        let i_exact = g.constant(&px(0.4));
        let v = recon_loss(&mut g, l, r, i_exact).unwrap();
        assert_eq!(g.item(v), 0.0);
    }

    #[test]
    fn recon_gradient_is_signed_l_over_n() {
        let lv = Tensor::from_fn(&[1, 1, 2, 2], |i| 0.3 + 0.1 * i as f64);
        let rv = Tensor::from_fn(&[1, 3, 2, 2], |i| 0.2 + 0.05 * i as f64);
        let iv = Tensor::from_fn(&[1, 3, 2, 2], |i| if i % 2 == 0 { 0.0 } else { 1.0 });
        let mut g = Graph::new();
        let l = g.constant(&lv);
        let r = g.param(&rv);
        let i = g.constant(&iv);
        let loss = recon_loss(&mut g, l, r, i).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(r).unwrap();
        for (k, &d) in grad.iter().enumerate() {
            let lval = lv.data()[k % 4];
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            assert!((d - sign * lval / 12.0).abs() < 1e-15);
        }
        // and the central-difference oracle agrees
        let report = finite_diff_check(
            |g, v| {
                let l = g.constant(&lv);
                let i = g.constant(&iv);
                recon_loss(g, l, v[0], i)
            },
            &[rv],
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn smooth_examples() {
        let mut g = Graph::new();
        let flat = g.constant(&Tensor::full(&[1, 3, 2, 2], 0.5));
        let l_const = g.constant(&Tensor::full(&[1, 1, 2, 2], 0.3));
        let v = smooth_loss(&mut g, l_const, flat, 0.01).unwrap();
        assert_eq!(g.item(v), 0.0);

        // Hand evaluation: ∇x L = [[1,0],[1,0]], ∇y L = 0; flat image so every
        // denominator is ξ. Mean over 4 pixels: (1 + 1) / 0.01 / 4 = 50.
        let l = g.constant(&t(&[1, 1, 2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let v = smooth_loss(&mut g, l, flat, 0.01).unwrap();
        assert!((g.item(v) - 50.0).abs() < 1e-12);

        assert!(smooth_loss(&mut g, l, flat, 0.0).is_err());
    }

    #[test]
    fn smooth_denominator_uses_image_gradient() {
        // Image edge of height 0.5 along x in every channel: the x term is
        // divided by 0.5 where the edge is, by ξ elsewhere.
        let mut g = Graph::new();
        let img = g.constant(&Tensor::from_fn(&[1, 3, 1, 3], |i| if i % 3 == 2 { 0.5 } else { 0.0 }));
        let l = g.constant(&t(&[1, 1, 1, 3], &[0.0, 0.1, 0.3]));
        let v = smooth_loss(&mut g, l, img, 0.01).unwrap();
        let expected = (0.1 / 0.01 + 0.2 / 0.5 + 0.0) / 3.0;
        assert!((g.item(v) - expected).abs() < 1e-12);
    }

    #[test]
    fn init_examples() {
        let mut g = Graph::new();
        let img = g.constant(&t(&[1, 3, 1, 1], &[0.1, 0.9, 0.5]));
        let l = g.constant(&px(0.7));
        let v = init_loss(&mut g, l, img).unwrap();
        assert!((g.item(v) - 0.2).abs() < 1e-15);
        let l_fixed = g.constant(&px(0.9));
        let v = init_loss(&mut g, l_fixed, img).unwrap();
        assert_eq!(g.item(v), 0.0);

        let gray = g.constant(&Tensor::full(&[1, 3, 2, 2], 0.42));
        let l = g.constant(&Tensor::full(&[1, 1, 2, 2], 0.42));
        let v = init_loss(&mut g, l, gray).unwrap();
        assert_eq!(g.item(v), 0.0);

        let one_channel = g.constant(&Tensor::full(&[1, 1, 2, 2], 0.42));
        assert!(init_loss(&mut g, l, one_channel).is_err());
    }

    #[test]
    fn suppress_examples() {
        let mut g = Graph::new();
        let l = g.constant(&px(1.0));
        let r = g.constant(&px(0.8));
        let i = g.constant(&px(0.5));
        let v = suppress_loss(&mut g, l, r, i).unwrap();
        assert!((g.item(v) - 0.3).abs() < 1e-15);

        let i_hi = g.constant(&px(0.9));
        let v = suppress_loss(&mut g, l, r, i_hi).unwrap();
        assert_eq!(g.item(v), 0.0);

        // half the pixels over by 0.2, half under
        let l = g.constant(&Tensor::full(&[1, 1, 1, 4], 1.0));
        let r = g.constant(&t(&[1, 3, 1, 4], &[0.7, 0.7, 0.3, 0.3].repeat(3)));
        let i = g.constant(&Tensor::full(&[1, 3, 1, 4], 0.5));
        let v = suppress_loss(&mut g, l, r, i).unwrap();
        assert!((g.item(v) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn consist_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&Tensor::full(&[1, 3, 2, 2], 0.4));
        let b = g.constant(&Tensor::full(&[1, 3, 2, 2], 0.45));
        let v = consist_loss(&mut g, a, a).unwrap();
        assert_eq!(g.item(v), 0.0);
        let v = consist_loss(&mut g, a, b).unwrap();
        assert!((g.item(v) - 0.05).abs() < 1e-15);
        let c = g.constant(&Tensor::full(&[1, 1, 2, 2], 0.45));
        assert!(consist_loss(&mut g, a, c).is_err());
    }

    #[test]
    fn consist_gradient_magnitude() {
        let av = Tensor::from_fn(&[1, 3, 2, 2], |i| 0.1 * i as f64);
        let bv = Tensor::from_fn(&[1, 3, 2, 2], |i| 0.55 + 0.01 * i as f64);
        let report = finite_diff_check(|g, v| consist_loss(g, v[0], v[1]), &[av, bv], 1e-6, 1e-6).unwrap();
        assert!(report.passed);
        let mut g = Graph::new();
        let a = g.param(&Tensor::from_fn(&[1, 3, 2, 2], |i| 0.1 * i as f64));
        let b = g.constant(&Tensor::from_fn(&[1, 3, 2, 2], |i| 0.55 + 0.01 * i as f64));
        let v = consist_loss(&mut g, a, b).unwrap();
        g.backward(v).unwrap();
        for &d in g.grad(a).unwrap() {
            assert!((d.abs() - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        let ones = LossValues { recon: 1.0, smooth: 1.0, init: 1.0, suppress: 1.0, consist: 1.0 };
        assert!((w.combine(&ones) - 1.9).abs() < 1e-15);
        assert_eq!(w.combine(&LossValues::default()), 0.0);

        let mut g = Graph::<f64>::new();
        let one = g.constant(&Tensor::scalar(1.0));
        let terms = LossTerms { recon: one, smooth: one, init: one, suppress: one, consist: one };
        let total = total_loss(&mut g, &terms, &w).unwrap();
        assert!((g.item(total) - 1.9).abs() < 1e-15);

        let swapped = LossWeights { alpha1: 0.5, alpha2: 0.1, alpha3: 0.1, alpha4: 0.2, xi: 0.01 };
        assert!(matches!(total_loss(&mut g, &terms, &swapped), Err(Error::Config(_))));
        let equal = LossWeights { alpha3: 0.1, ..w };
        assert!(equal.validate().is_err());
    }

    #[test]
    fn ablation_zeroes_terms_without_tripping_validation() {
        let w = LossWeights::default();
        let a = Ablation::by_name("no_suppress").unwrap().apply(&w);
        assert_eq!(a.alpha3, 0.0);
        assert_eq!(a.alpha4, w.alpha4);
        assert!(Ablation::by_name("bogus").is_none());
        for name in Ablation::NAMES {
            assert!(Ablation::by_name(name).is_some());
        }
    }

    #[test]
    fn stop_grad_consist_changes_gradient_path() {
        let mut grads = Vec::new();
        for stop in [false, true] {
            let mut g = Graph::<f64>::new();
            let r_hat = g.param(&Tensor::full(&[1, 3, 1, 1], 0.5));
            let glare = g.constant(&Tensor::full(&[1, 3, 1, 1], 0.2));
            let refl = g.add(r_hat, glare).unwrap();
            let target = if stop { g.detach(refl) } else { refl };
            let v = consist_loss(&mut g, r_hat, target).unwrap();
            g.backward(v).unwrap();
            grads.push(g.grad(r_hat).unwrap()[0]);
        }
        // with R = R̂ + G the direct and indirect paths cancel
        assert_eq!(grads[0], 0.0);
        assert!((grads[1] + 1.0 / 3.0).abs() < 1e-15);
    }
}
