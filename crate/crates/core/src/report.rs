//! Human-readable tables and CSV for predictions and batch results.

use std::fmt::Write as _;

use crate::error::Result;
use crate::fock_optics::{config_state, born_distribution, DetectorConfig, Side};
use crate::harness::BatchResult;
use crate::predictions::{conditional, forbidden_set, marginal};
use crate::rational;

/// `0.833333333333 = 5/6`, or just the decimal when no small fraction fits.
pub fn format_probability(p: f64) -> String {
    match rational::annotate(p) {
        Some(frac) => format!("{p:.12} = {frac}"),
        None => format!("{p:.12}"),
    }
}

/// Serialized name of a unit enum value, e.g. `double_pair`.
fn name<T: serde::Serialize>(value: &T) -> String {
    match serde_json::to_value(value) {
        Ok(serde_json::Value::String(s)) => s,
        _ => "?".to_string(),
    }
}

fn format_opt(p: Option<f64>) -> String {
    p.map_or_else(|| "-".to_string(), |p| format!("{p:.6}"))
}

/// Exact quantum tables for one detector configuration.
pub fn render_prediction(config: DetectorConfig) -> Result<String> {
    let state = config_state(config)?;
    let dist = born_distribution(&state)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "configuration {} (U+/V+ {}, U-/V- {})",
        config.selector(),
        if config.r_plus_intercepted { "in place" } else { "removed" },
        if config.r_minus_intercepted { "in place" } else { "removed" },
    );
    let _ = writeln!(out, "state: {state}");
    let _ = writeln!(out, "joint:");
    for ((r, y), p) in dist.iter() {
        let _ = writeln!(out, "  ({r},{y}) {}", format_probability(p));
    }
    for (name, side) in [("red", Side::RPlus), ("yellow", Side::RMinus)] {
        let m = marginal(&dist, side);
        let line: Vec<String> = m
            .iter()
            .map(|(d, &p)| format!("{d} {}", format_probability(p)))
            .collect();
        let _ = writeln!(out, "{name} marginal: {}", line.join(", "));
    }
    let _ = writeln!(out, "conditionals:");
    let givens = dist.red_detectors().into_iter().chain(dist.yellow_detectors());
    for given in givens {
        match conditional(&dist, given) {
            Ok(c) => {
                let line: Vec<String> = c
                    .iter()
                    .map(|(d, &p)| format!("{d} {}", format_probability(p)))
                    .collect();
                let _ = writeln!(out, "  given {given}: {}", line.join(", "));
            }
            Err(_) => {
                let _ = writeln!(out, "  given {given}: never fires");
            }
        }
    }
    let forbidden: Vec<String> = forbidden_set(&dist)
        .into_iter()
        .map(|(r, y)| format!("({r},{y})"))
        .collect();
    let _ = writeln!(
        out,
        "forbidden: {}",
        if forbidden.is_empty() { "none".to_string() } else { forbidden.join(", ") }
    );
    Ok(out)
}

/// Summary table: empirical vs oracle vs quantum.
pub fn render_table(r: &BatchResult) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "scenario {}  trials {}  seed {}  strategy {}/{}/{}/{}",
        name(&r.kind),
        r.trials,
        r.seed,
        name(&r.strategy.version),
        name(&r.strategy.leader_rule),
        name(&r.strategy.identity_mode),
        name(&r.strategy.pairing_rule)
    );
    for (i, pair) in r.pairs.iter().enumerate() {
        let _ = writeln!(out, "pair {} (config {})", i + 1, pair.config.selector());
        let _ = writeln!(
            out,
            "  {:<10} {:>10} {:>10} {:>10} {:>10}",
            "outcome", "count", "empirical", "oracle", "quantum"
        );
        for row in &pair.outcomes {
            let _ = writeln!(
                out,
                "  {:<10} {:>10} {:>10.6} {:>10} {:>10.6}",
                format!("({},{})", row.red, row.yellow),
                row.count,
                row.empirical,
                format_opt(row.oracle),
                row.quantum
            );
        }
        let _ = writeln!(
            out,
            "  tvd_vs_quantum empirical={:.6} oracle={}",
            pair.tvd_vs_quantum,
            format_opt(pair.oracle_tvd_vs_quantum)
        );
    }
    let _ = writeln!(out, "rates:");
    for (name, value) in r.rates() {
        let check = r.rate_checks.iter().find(|c| c.name == name);
        match check {
            Some(c) => {
                let _ = writeln!(
                    out,
                    "  {name} empirical={value:.6} oracle={:.6} bound={:.6} {}",
                    c.oracle,
                    c.bound,
                    if c.passed { "ok" } else { "OUT OF BOUND" }
                );
            }
            None => {
                let _ = writeln!(out, "  {name} empirical={value:.6} oracle=-");
            }
        }
    }
    let _ = writeln!(out, "deadlock: {}", r.deadlock_flag);
    if let Some(tb) = &r.tie_break {
        let _ = writeln!(out, "tie-break: {tb}");
    }
    out
}

/// One row per joint outcome, then one row per rate.
pub fn render_csv(r: &BatchResult) -> String {
    let mut out = String::from("section,pair,name,count,empirical,oracle,quantum,bound,passed\n");
    let opt = |p: Option<f64>| p.map(|p| p.to_string()).unwrap_or_default();
    for (i, pair) in r.pairs.iter().enumerate() {
        for row in &pair.outcomes {
            let _ = writeln!(
                out,
                "outcome,{},{}|{},{},{},{},{},,",
                i + 1,
                row.red,
                row.yellow,
                row.count,
                row.empirical,
                opt(row.oracle),
                row.quantum
            );
        }
        let _ = writeln!(
            out,
            "tvd,{},tvd_vs_quantum,,{},{},0,,",
            i + 1,
            pair.tvd_vs_quantum,
            opt(pair.oracle_tvd_vs_quantum)
        );
    }
    for (name, value) in r.rates() {
        let check = r.rate_checks.iter().find(|c| c.name == name);
        let _ = writeln!(
            out,
            "rate,,{name},,{value},{},,{},{}",
            opt(check.map(|c| c.oracle)),
            opt(check.map(|c| c.bound)),
            check.map(|c| c.passed.to_string()).unwrap_or_default()
        );
    }
    let _ = writeln!(out, "flag,,deadlock,,{},,,,", r.deadlock_flag);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn e3_prediction_lines() {
        let text = render_prediction(DetectorConfig::E3).unwrap();
        assert!(text.contains("red marginal: C+ 0.833333333333 = 5/6, D+ 0.166666666667 = 1/6"), "{text}");
        assert!(text.contains("given C+: C- 0.900000000000 = 9/10, D- 0.100000000000 = 1/10"));
        assert!(text.contains("forbidden: none"));
    }

    #[test]
    fn e1_forbidden_line() {
        let text = render_prediction(DetectorConfig::E1).unwrap();
        assert!(text.contains("forbidden: (D+,V-)"), "{text}");
    }

    #[test]
    fn h_prediction_has_three_thirds() {
        let text = render_prediction(DetectorConfig::H).unwrap();
        for pair in ["(U+,V-)", "(V+,U-)", "(V+,V-)"] {
            assert!(text.contains(&format!("  {pair} 0.333333333333 = 1/3")), "{text}");
        }
        assert!(text.contains("  (U+,U-) 0.000000000000 = 0"));
    }

    #[test]
    fn probability_format() {
        assert_eq!(format_probability(0.75), "0.750000000000 = 3/4");
        assert_eq!(format_probability(std::f64::consts::FRAC_1_PI), "0.318309886184");
    }
}
