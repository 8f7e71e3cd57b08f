use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Decimal2, EvalError};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CostProfile {
    /// Component name to GFLOPs.
    pub components: BTreeMap<String, f64>,
}

impl CostProfile {
    pub fn new<I: IntoIterator<Item = (S, f64)>, S: Into<String>>(components: I) -> Self {
        CostProfile { components: components.into_iter().map(|(k, v)| (k.into(), v)).collect() }
    }

    pub fn total(&self) -> f64 {
        self.components.values().sum()
    }
}

/// Share of each component in percent with two decimals. Hundredths are
/// apportioned by largest remainder, so the shares add up to exactly 100.00.
pub fn cost_ratio(profile: &CostProfile) -> Result<BTreeMap<String, Decimal2>, EvalError> {
    if profile.components.is_empty() {
        return Err(EvalError::NoComponents);
    }
    if let Some((name, _)) = profile.components.iter().find(|(_, v)| !v.is_finite() || **v < 0.0) {
        return Err(EvalError::BadCost(name.clone()));
    }
    let total = profile.total();
    if total <= 0.0 {
        return Err(EvalError::ZeroTotal);
    }
    let exact: Vec<(&String, f64)> = profile.components.iter().map(|(k, v)| (k, 10_000.0 * v / total)).collect();
    let mut shares: Vec<(&String, u64, f64)> = exact
        .iter()
        .map(|(k, x)| {
            let floor = x.floor();
            (*k, floor as u64, x - floor)
        })
        .collect();
    let assigned: u64 = shares.iter().map(|s| s.1).sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| shares[b].2.total_cmp(&shares[a].2).then(a.cmp(&b)));
    for &i in order.iter().take(10_000u64.saturating_sub(assigned) as usize) {
        shares[i].1 += 1;
    }
    Ok(shares.into_iter().map(|(k, h, _)| (k.clone(), Decimal2::from_hundredths(h))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let r = cost_ratio(&CostProfile::new([("retrieval", 81.0), ("inference", 22_760.0)])).unwrap();
        assert_eq!(r["retrieval"].to_string(), "0.35");
        assert_eq!(r["inference"].to_string(), "99.65");
        let single = cost_ratio(&CostProfile::new([("all", 3.0)])).unwrap();
        assert_eq!(single["all"].to_string(), "100.00");
        let even = cost_ratio(&CostProfile::new([("a", 1.0), ("b", 1.0)])).unwrap();
        assert!(even.values().all(|v| v.to_string() == "50.00"));
    }

    #[test]
    fn errors() {
        assert!(matches!(cost_ratio(&CostProfile::default()), Err(EvalError::NoComponents)));
        assert!(matches!(cost_ratio(&CostProfile::new([("a", 0.0)])), Err(EvalError::ZeroTotal)));
        assert!(matches!(cost_ratio(&CostProfile::new([("a", -1.0)])), Err(EvalError::BadCost(_))));
    }

    proptest! {
        #[test]
        fn sums_to_hundred(values in prop::collection::vec(0.0f64..1e6, 1..12)) {
            prop_assume!(values.iter().sum::<f64>() > 0.0);
            let profile = CostProfile::new(values.iter().enumerate().map(|(i, v)| (format!("c{i}"), *v)));
            let r = cost_ratio(&profile).unwrap();
            prop_assert_eq!(r.values().map(|d| d.hundredths).sum::<u64>(), 10_000);
            for (k, d) in &r {
                let exact = 100.0 * profile.components[k] / profile.total();
                prop_assert!((d.as_f64() - exact).abs() < 0.01 + 1e-9);
            }
        }
    }
}
