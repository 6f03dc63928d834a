//! Convergence-rate-driven loss weighting and its baseline strategies.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Smallest denominator accepted by [`convergence_rate`].
pub const RATE_EPS: f64 = 1e-12;

/// Number of tasks being balanced: fusion (0) and segmentation (1).
pub const TASKS: usize = 2;
pub const FUSION_TASK: usize = 0;
pub const SEG_TASK: usize = 1;

/// The last two recorded epoch-mean losses of each task, oldest first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RateHistory {
    recent: Vec<Vec<f64>>,
}

impl RateHistory {
    pub fn new(tasks: usize) -> Self {
        Self {
            recent: vec![Vec::with_capacity(2); tasks],
        }
    }

    pub fn tasks(&self) -> usize {
        self.recent.len()
    }

    pub fn record(&mut self, task: usize, loss: f64) -> Result<()> {
        if !(loss.is_finite() && loss >= 0.0) {
            return Err(Error::Numerical(format!("task {task} recorded loss {loss}")));
        }
        let slot = self
            .recent
            .get_mut(task)
            .ok_or_else(|| Error::config(format!("no task {task}")))?;
        if slot.len() == 2 {
            slot.remove(0);
        }
        slot.push(loss);
        Ok(())
    }

    /// `(L(n−2), L(n−1))` where recorded.
    pub fn values(&self, task: usize) -> &[f64] {
        self.recent.get(task).map_or(&[], |v| v.as_slice())
    }

    /// Rebuilds a history from stored per-task values (at most two each).
    pub fn from_values(values: Vec<Vec<f64>>) -> Result<Self> {
        if values.iter().any(|v| v.len() > 2) {
            return Err(Error::CorruptBlob("rate history keeps at most two values".into()));
        }
        Ok(Self { recent: values })
    }
}

/// `r = L(n−1) / L(n−2)`, or 1.0 until two values exist.
pub fn convergence_rate(history: &RateHistory, task: usize) -> Result<f64> {
    match history.values(task) {
        [prev2, prev1] => {
            if *prev2 <= RATE_EPS {
                return Err(Error::Numerical(format!(
                    "task {task}: loss {prev2} too small to form a convergence rate"
                )));
            }
            Ok(prev1 / prev2)
        }
        _ => Ok(1.0),
    }
}

fn softmax_terms(rates: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if let Some(r) = rates.iter().find(|r| !r.is_finite()) {
        return Err(Error::Numerical(format!("non-finite convergence rate {r}")));
    }
    let max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = rates.iter().map(|r| ((r - max) / temperature).exp()).collect();
    let sum: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / sum).collect())
}

/// `λ_i = η_i·exp(r_i/T) / Σ_k exp(r_k/T)`.
pub fn dynamic_weights(rates: &[f64], eta_pref: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if rates.len() != eta_pref.len() || rates.is_empty() {
        return Err(Error::config(format!(
            "{} rates but {} task preferences",
            rates.len(),
            eta_pref.len()
        )));
    }
    if eta_pref.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(Error::config("task preferences must be positive"));
    }
    Ok(softmax_terms(rates, temperature)?
        .into_iter()
        .zip(eta_pref)
        .map(|(s, e)| s * e)
        .collect())
}

/// How λ is chosen at each weighting epoch.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    Dynamic,
    Uniform,
    Manual(Vec<f64>),
    /// `λ_i = K·exp(r_i/T) / Σ_k exp(r_k/T)`.
    Dwa,
}

/// Parses `dynamic`, `uniform`, `dwa` or `manual(a, b, ...)`.
pub fn weighting_strategy(name: &str) -> Result<Strategy> {
    let name = name.trim();
    match name {
        "dynamic" => return Ok(Strategy::Dynamic),
        "uniform" => return Ok(Strategy::Uniform),
        "dwa" => return Ok(Strategy::Dwa),
        _ => {}
    }
    let inner = name
        .strip_prefix("manual(")
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::config(format!("unknown weighting strategy {name:?}")))?;
    let values = inner
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite() && *x > 0.0)
                .ok_or_else(|| Error::config(format!("bad manual weight {v:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Strategy::Manual(values))
}

impl Strategy {
    pub fn lambdas(&self, history: &RateHistory, eta_pref: &[f64], temperature: f64) -> Result<Vec<f64>> {
        let k = history.tasks();
        let rates = || (0..k).map(|t| convergence_rate(history, t)).collect::<Result<Vec<_>>>();
        match self {
            Strategy::Dynamic => dynamic_weights(&rates()?, eta_pref, temperature),
            Strategy::Uniform => Ok(vec![1.0 / k as f64; k]),
            Strategy::Manual(v) => {
                if v.len() != k {
                    return Err(Error::config(format!("manual weighting needs {k} values")));
                }
                Ok(v.clone())
            }
            Strategy::Dwa => Ok(softmax_terms(&rates()?, temperature)?
                .into_iter()
                .map(|s| s * k as f64)
                .collect()),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Dynamic => f.write_str("dynamic"),
            Strategy::Uniform => f.write_str("uniform"),
            Strategy::Dwa => f.write_str("dwa"),
            Strategy::Manual(v) => {
                let parts: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
                write!(f, "manual({})", parts.join(", "))
            }
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        weighting_strategy(s)
    }
}

impl Serialize for Strategy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        weighting_strategy(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn history(a: &[f64], b: &[f64]) -> RateHistory {
        let mut h = RateHistory::new(2);
        for &v in a {
            h.record(0, v).unwrap();
        }
        for &v in b {
            h.record(1, v).unwrap();
        }
        h
    }

    #[test]
    fn rate_examples() {
        assert_eq!(convergence_rate(&history(&[2.0, 1.0], &[]), 0).unwrap(), 0.5);
        assert_eq!(convergence_rate(&history(&[3.0, 3.0], &[]), 0).unwrap(), 1.0);
        assert_eq!(convergence_rate(&RateHistory::new(2), 1).unwrap(), 1.0);
        assert_eq!(convergence_rate(&history(&[], &[4.0]), 1).unwrap(), 1.0);
    }

    #[test]
    fn rate_uses_latest_two() {
        let h = history(&[8.0, 4.0, 1.0], &[]);
        assert_eq!(h.values(0), &[4.0, 1.0]);
        assert_eq!(convergence_rate(&h, 0).unwrap(), 0.25);
    }

    #[test]
    fn rate_rejects_vanishing_loss() {
        let h = history(&[0.0, 1.0], &[]);
        assert!(matches!(convergence_rate(&h, 0), Err(Error::Numerical(_))));
        let mut h = RateHistory::new(2);
        assert!(matches!(h.record(0, f64::NAN), Err(Error::Numerical(_))));
    }

    #[test]
    fn weight_examples() {
        let e = std::f64::consts::E;
        let w = dynamic_weights(&[1.0, 1.0], &[1.0, 1.0], 3.7).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        let w = dynamic_weights(&[1.0, 0.0], &[1.0, 1.0], 1.0).unwrap();
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((w[0] - 0.73106).abs() < 1e-5 && (w[1] - 0.26894).abs() < 1e-5);
        let w = dynamic_weights(&[1.0, 1.0], &[2.0, 1.0], 1.0).unwrap();
        assert_eq!(w, vec![1.0, 0.5]);
    }

    #[test]
    fn weight_errors() {
        assert!(matches!(
            dynamic_weights(&[f64::NAN, 1.0], &[1.0, 1.0], 1.0),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(
            dynamic_weights(&[1.0, 1.0], &[1.0, 1.0], 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            dynamic_weights(&[1.0], &[1.0, 1.0], 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn large_rates_do_not_overflow() {
        let w = dynamic_weights(&[1e6, 1e6 - 1.0], &[1.0, 1.0], 1.0).unwrap();
        assert!(w.iter().all(|v| v.is_finite()));
        assert!((w[0] + w[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn strategies() {
        let h = history(&[2.0, 1.0], &[1.0, 1.0]);
        assert_eq!(
            weighting_strategy("uniform")
                .unwrap()
                .lambdas(&h, &[1.0, 1.0], 2.0)
                .unwrap(),
            vec![0.5, 0.5]
        );
        let manual = weighting_strategy("manual(1.0, 0.2)").unwrap();
        assert_eq!(manual.lambdas(&h, &[1.0, 1.0], 2.0).unwrap(), vec![1.0, 0.2]);
        assert_eq!(
            manual.lambdas(&RateHistory::new(2), &[1.0, 1.0], 2.0).unwrap(),
            vec![1.0, 0.2]
        );
        let dwa = weighting_strategy("dwa").unwrap();
        assert_eq!(
            dwa.lambdas(&RateHistory::new(2), &[1.0, 1.0], 2.0).unwrap(),
            vec![1.0, 1.0]
        );
        // slower-converging segmentation (rate 1 vs 0.5) gets the larger weight
        let d = weighting_strategy("dynamic")
            .unwrap()
            .lambdas(&h, &[1.0, 1.0], 2.0)
            .unwrap();
        assert!(d[1] > d[0]);
        assert!(matches!(weighting_strategy("gradnorm"), Err(Error::Config(_))));
        assert!(matches!(weighting_strategy("manual(1, x)"), Err(Error::Config(_))));
    }

    #[test]
    fn strategy_round_trips_as_text() {
        for s in ["dynamic", "uniform", "dwa", "manual(1.0, 0.2)"] {
            let parsed: super::Strategy = s.parse().unwrap();
            assert_eq!(parsed.to_string().parse::<super::Strategy>().unwrap(), parsed);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn weights_grow_with_own_rate(
            r in proptest::collection::vec(0.0f64..3.0, 2..5),
            bump in 1e-3f64..2.0,
            t in 0.05f64..20.0,
            eta in 0.1f64..4.0,
            pick in 0usize..5,
        ) {
            let i = pick % r.len();
            let prefs = vec![eta; r.len()];
            let base = dynamic_weights(&r, &prefs, t).unwrap();
            let mut r2 = r.clone();
            r2[i] += bump;
            let up = dynamic_weights(&r2, &prefs, t).unwrap();
            prop_assert!(up[i] > base[i]);
        }

        #[test]
        fn unit_preferences_sum_to_one(r in proptest::collection::vec(-5.0f64..5.0, 2..6), t in 0.01f64..100.0) {
            let w = dynamic_weights(&r, &vec![1.0; r.len()], t).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|v| *v > 0.0));
        }

        #[test]
        // deviation from η_i/K is about η_i·Δr/(K·T); rates are loss ratios
        // near 1 and preferences are at most 1 here
        fn hot_temperature_is_uniform(
            r in proptest::collection::vec(0.0f64..2.0, 2..6),
            eta in proptest::collection::vec(0.1f64..1.0, 6),
        ) {
            let eta = &eta[..r.len()];
            let w = dynamic_weights(&r, eta, 1e6).unwrap();
            for (wi, ei) in w.iter().zip(eta) {
                prop_assert!((wi - ei / r.len() as f64).abs() < 1e-6);
            }
        }
    }
}
