//! Segmentation loss, hierarchical (HMSD) and decremental (DMCD) self-distillation.
//!
//! The distillation terms are written against a representation callback so
//! they can run on decoder logits, assembled features or plain fixtures. The
//! teacher side is always read as a constant tensor, so no gradient reaches it.

use serde::{Deserialize, Serialize};

use crate::autograd::{seg_loss_terms, Graph, Var};
use crate::criticality::DecrementPath;
use crate::error::{CcsdError, Result};
use crate::lattice::{level_set, ModalityCombo};
use crate::ssnet::{Carrier, SegOutput};
use crate::tensor::{softmax_channels, Scalar, Tensor};

/// Clamp applied to the second argument of [`kl_div`].
pub const KL_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HmsdMode {
    /// KL between decoder class distributions at temperature 1.
    DecoderOutput,
    /// KL between softened carrier features at the distillation temperature.
    Feature,
}

impl HmsdMode {
    pub fn name(self) -> &'static str {
        match self {
            HmsdMode::DecoderOutput => "decoder_output",
            HmsdMode::Feature => "feature",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "decoder_output" => Ok(HmsdMode::DecoderOutput),
            "feature" => Ok(HmsdMode::Feature),
            _ => Err(CcsdError::invalid(format!(
                "unknown hmsd mode {s:?} (expected decoder_output or feature)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    pub hmsd_weight: f64,
    pub dmcd_weight: f64,
    pub carrier: Carrier,
    pub hmsd_mode: HmsdMode,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            hmsd_weight: 1.0,
            dmcd_weight: 1.0,
            carrier: Carrier::Fused,
            hmsd_mode: HmsdMode::DecoderOutput,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CcsdError::Config(format!(
                "distill.temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (key, w) in [("distill.hmsd_weight", self.hmsd_weight), ("distill.dmcd_weight", self.dmcd_weight)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(CcsdError::Config(format!("{key} must be a finite non-negative number, got {w}")));
            }
        }
        Ok(())
    }

    /// Temperature used by HMSD: 1 on decoder outputs, the distillation
    /// temperature in feature mode.
    pub fn hmsd_temperature(&self) -> f64 {
        match self.hmsd_mode {
            HmsdMode::DecoderOutput => 1.0,
            HmsdMode::Feature => self.temperature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub hmsd: f64,
    pub dmcd: f64,
    pub total: f64,
}

/// Channel-axis softmax of `values / tau` at every position.
pub fn softened_distribution<T: Scalar>(values: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    check_tau(tau)?;
    Ok(softmax_channels(values, T::of(tau)))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(CcsdError::invalid(format!("temperature must be positive, got {tau}")))
    }
}

/// `KL(p || q)` over the channel axis, averaged over positions. `q` is
/// clamped at [`KL_CLAMP`].
pub fn kl_div<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(CcsdError::ShapeMismatch {
            expected: p.shape().to_vec(),
            actual: q.shape().to_vec(),
        });
    }
    let [nb, nc, ..] = p.shape();
    let mut total = 0.0;
    for b in 0..nb {
        for c in 0..nc {
            for (&pv, &qv) in p.plane(b, c).iter().zip(q.plane(b, c)) {
                let pv = pv.f64();
                if pv > 0.0 {
                    total += pv * (pv.ln() - qv.f64().max(KL_CLAMP).ln());
                }
            }
        }
    }
    Ok(total / (nb * p.spatial()) as f64)
}

/// Cross-entropy plus soft Dice of a decoder output.
pub fn seg_loss<T: Scalar>(output: &SegOutput<T>, labels: &[u8]) -> Result<f64> {
    let (ce, dice) = seg_loss_terms(&output.probabilities, labels)?;
    Ok(ce.f64() + dice.f64())
}

/// Mean over the level set `S_N^k` of `KL(teacher || student)`. `repr` maps a
/// combination to its pre-softmax representation; the full combination is the
/// teacher. Distributions use temperature `tau` along channels.
pub fn hmsd_loss<T, F>(g: &mut Graph<T>, n: usize, k: usize, tau: f64, mut repr: F) -> Result<Var>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, ModalityCombo) -> Result<Var>,
{
    check_tau(tau)?;
    if k < 1 || k >= n {
        return Err(CcsdError::invalid(format!(
            "hmsd level k={k} outside [1, {}]",
            n.saturating_sub(1)
        )));
    }
    let teacher_var = repr(g, ModalityCombo::full(n)?)?;
    let teacher = softmax_channels(g.value(teacher_var), T::of(tau));
    let students = level_set(n, k)?;
    let w = T::of(1.0 / students.len() as f64);
    let mut terms = Vec::with_capacity(students.len());
    for combo in students {
        let s = repr(g, combo)?;
        terms.push((g.kl_from_teacher(s, &teacher, T::of(tau))?, w));
    }
    Ok(g.weighted_sum(&terms))
}

/// Sum over adjacent path pairs of `KL(sigma(Z_big / tau) || sigma(Z_small / tau))`,
/// the larger combination acting as constant teacher. Paths shorter than two
/// steps give zero.
pub fn dmcd_loss<T, F>(g: &mut Graph<T>, path: &DecrementPath, tau: f64, mut repr: F) -> Result<Var>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, ModalityCombo) -> Result<Var>,
{
    check_tau(tau)?;
    let mut terms = Vec::with_capacity(path.len().saturating_sub(1));
    let mut reprs = Vec::with_capacity(path.len());
    for &combo in &path.steps {
        reprs.push(repr(g, combo)?);
    }
    for w in reprs.windows(2) {
        let teacher = softmax_channels(g.value(w[0]), T::of(tau));
        terms.push((g.kl_from_teacher(w[1], &teacher, T::of(tau))?, T::one()));
    }
    Ok(g.weighted_sum(&terms))
}

/// `seg + hmsd_weight * hmsd + dmcd_weight * dmcd`, refusing non-finite terms.
pub fn total_loss(seg: f64, hmsd: f64, dmcd: f64, cfg: &DistillConfig) -> Result<LossBreakdown> {
    for (term, value) in [("seg", seg), ("hmsd", hmsd), ("dmcd", dmcd)] {
        if !value.is_finite() {
            return Err(CcsdError::NonFiniteLoss { term, value });
        }
    }
    let total = seg + cfg.hmsd_weight * hmsd + cfg.dmcd_weight * dmcd;
    if !total.is_finite() {
        return Err(CcsdError::NonFiniteLoss { term: "total", value: total });
    }
    Ok(LossBreakdown { seg, hmsd, dmcd, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamStore;
    use crate::criticality::PathStrategy;
    use proptest::prelude::*;
    use std::collections::HashMap;

    /// `[1, C, 1, 1, V]` tensor from channel-major values.
    fn t(c: usize, v: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([1, c, 1, 1, v], data.to_vec()).unwrap()
    }

    fn combo(s: &str) -> ModalityCombo {
        s.parse().unwrap()
    }

    fn path(steps: &[&str]) -> DecrementPath {
        DecrementPath {
            steps: steps.iter().map(|s| combo(s)).collect(),
            strategy: PathStrategy::MaxCriticality,
        }
    }

    fn fixture_repr(map: &HashMap<ModalityCombo, Tensor<f64>>) -> impl FnMut(&mut Graph<f64>, ModalityCombo) -> Result<Var> + '_ {
        move |g, c| Ok(g.input(map[&c].clone()))
    }

    /// Hand KL between two-class distributions given as first-class probabilities.
    fn kl2(p: f64, q: f64) -> f64 {
        p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn softened_examples() {
        let d = softened_distribution(&t(2, 1, &[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(d.data(), &[0.5, 0.5]);
        let d = softened_distribution(&t(2, 1, &[2f64.ln(), 0.0]), 1.0).unwrap();
        assert!((d.data()[0] - 2.0 / 3.0).abs() < 1e-9 && (d.data()[1] - 1.0 / 3.0).abs() < 1e-9);
        let d = softened_distribution(&t(3, 1, &[5.0, -3.0, 1.0]), 1e6).unwrap();
        assert!(d.data().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-4));
        assert!(softened_distribution(&t(2, 1, &[0.0, 0.0]), 0.0).is_err());
        assert!(softened_distribution(&t(2, 1, &[0.0, 0.0]), -1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = t(2, 1, &[0.5, 0.5]);
        assert_eq!(kl_div(&p, &p).unwrap(), 0.0);
        let q = t(2, 1, &[0.75, 0.25]);
        let expected = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((kl_div(&p, &q).unwrap() - expected).abs() < 1e-12);
        assert!((kl_div(&p, &q).unwrap() - 0.14384).abs() < 1e-5);
        // zero in q where p > 0 is clamped, not infinite
        let z = t(2, 1, &[1.0, 0.0]);
        assert!(kl_div(&p, &z).unwrap().is_finite());
    }

    #[test]
    fn graph_kl_matches_kl_div() {
        let teacher = t(3, 2, &[0.2, 0.5, 0.3, 0.25, 0.5, 0.25]);
        let x = t(3, 2, &[0.4, -1.0, 2.0, 0.1, -0.3, 0.9]);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let l = g.kl_from_teacher(xv, &teacher, 2.0).unwrap();
        let q = softened_distribution(&x, 2.0).unwrap();
        assert!((g.value(l).item() - kl_div(&teacher, &q).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn seg_loss_examples() {
        let labels = [0u8, 1, 1, 0];
        let one_hot = t(2, 4, &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let out = SegOutput { logits: one_hot.clone(), probabilities: one_hot };
        let (_, dice) = seg_loss_terms(&out.probabilities, &labels).unwrap();
        assert!(dice.abs() < 1e-6);
        let uniform = SegOutput::from_logits(t(2, 4, &[0.0; 8]));
        let (ce, _) = seg_loss_terms(&uniform.probabilities, &labels).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-12);
        assert!(seg_loss(&uniform, &[0, 1, 2, 0]).is_err());
    }

    /// Two voxels, two classes, N=4, k=3.
    fn hmsd_fixture() -> HashMap<ModalityCombo, Tensor<f64>> {
        let mut m = HashMap::new();
        m.insert(combo("1234"), t(2, 2, &[1.0, -0.5, 0.0, 0.0]));
        m.insert(combo("123"), t(2, 2, &[0.2, 0.3, 0.0, 0.0]));
        m.insert(combo("124"), t(2, 2, &[-1.0, 2.0, 0.0, 0.0]));
        m.insert(combo("134"), t(2, 2, &[1.0, -0.5, 0.0, 0.0]));
        m.insert(combo("234"), t(2, 2, &[0.0, 0.0, 0.0, 0.0]));
        m
    }

    #[test]
    fn hmsd_hand_value() {
        let m = hmsd_fixture();
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let l = hmsd_loss(&mut g, 4, 3, 1.0, fixture_repr(&m)).unwrap();
        // class-0 probability is sigmoid of the logit gap at each voxel
        let teach = [sigmoid(1.0), sigmoid(-0.5)];
        let students = [[0.2, 0.3], [-1.0, 2.0], [1.0, -0.5], [0.0, 0.0]];
        let mut kls = Vec::new();
        for s in students {
            kls.push((kl2(teach[0], sigmoid(s[0])) + kl2(teach[1], sigmoid(s[1]))) / 2.0);
        }
        assert_eq!(kls[2], 0.0);
        let expected = kls.iter().sum::<f64>() / 4.0;
        assert!((g.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn hmsd_identical_students_is_zero() {
        let mut m = HashMap::new();
        for c in crate::lattice::enumerate_combos(3).unwrap().iter() {
            m.insert(*c, t(2, 2, &[0.4, -0.1, 1.0, 0.2]));
        }
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        for k in 1..3 {
            let l = hmsd_loss(&mut g, 3, k, 1.0, fixture_repr(&m)).unwrap();
            assert!(g.value(l).item().abs() < 1e-15);
        }
        assert!(hmsd_loss(&mut g, 3, 0, 1.0, fixture_repr(&m)).is_err());
        assert!(hmsd_loss(&mut g, 3, 3, 1.0, fixture_repr(&m)).is_err());
    }

    #[test]
    fn hmsd_counts_students() {
        let mut calls = Vec::new();
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        hmsd_loss(&mut g, 4, 3, 1.0, |g, c| {
            calls.push(c);
            Ok(g.input(t(2, 1, &[0.0, 1.0])))
        })
        .unwrap();
        assert_eq!(calls.len(), 5);
        assert_eq!(calls[1..].iter().map(|c| c.to_string()).collect::<Vec<_>>(), ["123", "124", "134", "234"]);
    }

    #[test]
    fn dmcd_hand_value() {
        let mut m = HashMap::new();
        m.insert(combo("123"), t(2, 1, &[2.0, 0.0]));
        m.insert(combo("23"), t(2, 1, &[0.0, 0.0]));
        m.insert(combo("3"), t(2, 1, &[-2.0, 0.0]));
        let tau = 2.0;
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let l = dmcd_loss(&mut g, &path(&["123", "23", "3"]), tau, fixture_repr(&m)).unwrap();
        let expected = kl2(sigmoid(1.0), 0.5) + kl2(0.5, sigmoid(-1.0));
        assert!((g.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn dmcd_degenerate_paths() {
        let mut m = HashMap::new();
        m.insert(combo("12"), t(2, 1, &[0.3, 0.1]));
        m.insert(combo("1"), t(2, 1, &[0.3, 0.1]));
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let l = dmcd_loss(&mut g, &path(&["1"]), 2.0, fixture_repr(&m)).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let l = dmcd_loss(&mut g, &path(&["12", "1"]), 2.0, fixture_repr(&m)).unwrap();
        assert!(g.value(l).item().abs() < 1e-15);
    }

    #[test]
    fn total_examples() {
        let cfg = DistillConfig::default();
        let b = total_loss(1.0, 2.0, 3.0, &cfg).unwrap();
        assert_eq!(b.total, 6.0);
        let off = DistillConfig { hmsd_weight: 0.0, dmcd_weight: 0.0, ..cfg.clone() };
        assert_eq!(total_loss(0.7, 2.0, 3.0, &off).unwrap().total, 0.7);
        match total_loss(1.0, f64::NAN, 0.0, &cfg) {
            Err(CcsdError::NonFiniteLoss { term, .. }) => assert_eq!(term, "hmsd"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        assert!(DistillConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { dmcd_weight: -1.0, ..Default::default() }.validate().is_err());
        assert_eq!(DistillConfig::default().hmsd_temperature(), 1.0);
    }

    fn dist_strategy(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, c).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    fn random_path_fixture() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
        (prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 6), 5), 1usize..4)
    }

    proptest! {
        #[test]
        fn kl_nonnegative(p in dist_strategy(4), q in dist_strategy(4)) {
            let v = kl_div(&t(4, 1, &p), &t(4, 1, &q)).unwrap();
            prop_assert!(v >= -1e-15);
            prop_assert!(kl_div(&t(4, 1, &p), &t(4, 1, &p)).unwrap().abs() < 1e-15);
        }

        #[test]
        fn dmcd_is_additive((feats, split) in random_path_fixture(), tau in 0.5f64..10.0) {
            let p = path(&["12345", "1245", "145", "14", "4"]);
            let m: HashMap<_, _> = p.steps.iter().zip(&feats).map(|(&c, f)| (c, t(3, 2, f))).collect();
            let store = ParamStore::<f64>::new();
            let mut g = Graph::new(&store);
            let whole = dmcd_loss(&mut g, &p, tau, fixture_repr(&m)).unwrap();
            let prefix = DecrementPath { steps: p.steps[..=split].to_vec(), strategy: p.strategy };
            let suffix = DecrementPath { steps: p.steps[split..].to_vec(), strategy: p.strategy };
            let a = dmcd_loss(&mut g, &prefix, tau, fixture_repr(&m)).unwrap();
            let b = dmcd_loss(&mut g, &suffix, tau, fixture_repr(&m)).unwrap();
            prop_assert!((g.value(whole).item() - g.value(a).item() - g.value(b).item()).abs() < 1e-12);
        }

        #[test]
        fn hmsd_student_order_invariant(vals in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 5), tau in 0.5f64..4.0) {
            let combos = ["1234", "123", "124", "134", "234"];
            let m: HashMap<_, _> = combos.iter().zip(&vals).map(|(c, v)| (combo(c), t(2, 2, v))).collect();
            let store = ParamStore::<f64>::new();
            let mut g = Graph::new(&store);
            let l = hmsd_loss(&mut g, 4, 3, tau, fixture_repr(&m)).unwrap();
            // brute-force mean over the students in reversed order
            let teacher = softened_distribution(&m[&combo("1234")], tau).unwrap();
            let mut sum = 0.0;
            for c in combos[1..].iter().rev() {
                sum += kl_div(&teacher, &softened_distribution(&m[&combo(c)], tau).unwrap()).unwrap();
            }
            prop_assert!((g.value(l).item() - sum / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dmcd_continuous_in_tau() {
        let feats: HashMap<_, _> = [("123", [1.5, -0.2, 0.3, 0.9]), ("13", [0.1, 0.4, -1.0, 0.0]), ("3", [-0.7, 1.1, 0.2, 0.2])]
            .into_iter()
            .map(|(c, v)| (combo(c), t(2, 2, &v)))
            .collect();
        let p = path(&["123", "13", "3"]);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let mut prev: Option<f64> = None;
        let steps = 95_000;
        for i in 0..=steps {
            let tau = 0.5 + 9.5 * i as f64 / steps as f64;
            let l = dmcd_loss(&mut g, &p, tau, fixture_repr(&feats)).unwrap();
            let v = g.value(l).item();
            if let Some(pv) = prev {
                assert!((v - pv).abs() < 1e-3, "jump at tau={tau}");
            }
            prev = Some(v);
        }
    }
}
