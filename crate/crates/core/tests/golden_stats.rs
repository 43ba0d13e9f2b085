use std::path::PathBuf;

use rlpt_core::data::{Distribution, GameRegistry};
use rlpt_core::evalstats::{aggregate_report, normalize, NormalizationTable, Report, ReportConfig, ScoreTable};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

#[derive(serde::Deserialize)]
struct Golden {
    protocol: String,
    distribution: Distribution,
    method: String,
    iqm: f64,
    optimality_gap: f64,
}

fn refs() -> NormalizationTable {
    NormalizationTable::read_csv(&fixture("normalization_refs.csv")).unwrap()
}

fn report(protocol: &str) -> Report {
    let table = ScoreTable::read_csv(&fixture(&format!("scores_{protocol}.csv"))).unwrap();
    let cfg = ReportConfig { resamples: 200, ..ReportConfig::default() };
    aggregate_report(&table, &refs(), &GameRegistry::builtin(), &cfg).unwrap()
}

fn score(protocol: &str, game: &str, method: &str) -> f64 {
    let table = ScoreTable::read_csv(&fixture(&format!("scores_{protocol}.csv"))).unwrap();
    table.records().iter().find(|r| r.game == game && r.method == method).unwrap().score
}

#[test]
fn per_game_normalized_scores() {
    let refs = refs();
    let air = normalize(score("offline_bc", "AirRaid", "Random"), refs.get("AirRaid").unwrap()).unwrap();
    assert!((air - 0.0990).abs() < 1e-3, "{air}");
    let ast = normalize(score("offline_bc", "Asteroids", "Random"), refs.get("Asteroids").unwrap()).unwrap();
    assert!((ast + 1.459).abs() < 1e-3, "{ast}");
}

#[test]
fn report_covers_every_golden_row() {
    let reports = [report("offline_bc"), report("online_rl")];
    let mut rdr = csv::Reader::from_path(fixture("golden_stats.csv")).unwrap();
    let mut rows = 0;
    let mut worst_iqm: f64 = 0.0;
    for g in rdr.deserialize::<Golden>() {
        let g = g.unwrap();
        let r = reports.iter().find_map(|rep| rep.find(&g.protocol, g.distribution, &g.method)).unwrap();
        let expected = if g.distribution == Distribution::FarOod { "RNS" } else { "DNS" };
        assert_eq!(r.normalizer, expected);
        assert!(r.ci_low <= r.iqm + 1e-12 && r.iqm <= r.ci_high + 1e-12);
        worst_iqm = worst_iqm.max((r.iqm - g.iqm).abs());
        // Far-OOD gaps follow directly from per-game means.
        if g.distribution == Distribution::FarOod {
            assert!((r.optimality_gap - g.optimality_gap).abs() < 1e-2, "{} {:?} {}", g.protocol, g.distribution, g.method);
        }
        rows += 1;
    }
    assert_eq!(rows, 72);
    assert!(worst_iqm < 0.06, "{worst_iqm}");
}

#[test]
fn report_is_deterministic_and_printable() {
    let a = report("online_rl");
    assert_eq!(a, report("online_rl"));
    let text = a.to_string();
    assert!(text.contains("[online_rl / far_ood]"));
    assert_eq!(text.lines().filter(|l| l.starts_with("  ")).count(), 36);
}
