use std::path::PathBuf;

use stats::ingest::SeedRow;
use stats::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn row<'a>(r: &'a Report, variant: &str) -> &'a stats::report::ReportRow {
    r.benchmarks[0].rows.iter().find(|x| x.variant == variant).unwrap()
}

#[test]
fn transcribed_turk_table_reproduces_unpaired_p() {
    let set = load(&fixture("turk_summary.csv")).unwrap();
    let rep = build_report(&set, &ReportOptions::default()).unwrap();
    let printed = [
        ("stp", 0.69),
        ("t3_1e-3", 0.19),
        ("t3_3e-4", 0.13),
        ("t3_local", 0.16),
        ("t5", 0.27),
        ("t6", 0.17),
        ("l1", 0.53),
        ("l2", 0.87),
        ("l3", 0.67),
        ("l4", 0.74),
        ("l5", 0.83),
        ("l6", 0.63),
        ("l9", 0.24),
        ("l12", 0.86),
        ("l13", 0.61),
        ("l14", 0.41),
    ];
    for (v, p) in printed {
        let got = row(&rep, v).p_unp.unwrap();
        assert!((got - p).abs() <= 0.01, "{v}: {got} vs {p}");
    }
    let local = row(&rep, "t3_local");
    assert!((local.delta.unwrap() - 2.53).abs() < 1e-9);
    assert!(local.p_paired.is_none());
    // rows whose tiny deltas are dominated by two-decimal rounding of the printed means
    for (v, p) in [("t2", 0.85), ("t7", 0.95)] {
        assert!((row(&rep, v).p_unp.unwrap() - p).abs() <= 0.06, "{v}");
    }
}

#[test]
fn synth_tier_one_family_has_no_survivor() {
    let set = load(&fixture("synth_summary.csv")).unwrap();
    let opts = ReportOptions { families: vec!["tier1=l1,l2,l3,l4".parse().unwrap()], ..ReportOptions::default() };
    let rep = build_report(&set, &opts).unwrap();
    let fam = &rep.benchmarks[0].families[0];
    assert_eq!(fam.k, 4);
    assert_eq!(fam.bonferroni_threshold, Some(0.025));
    let mut ps: Vec<f64> = fam.members.iter().map(|m| m.p).collect();
    ps.sort_by(f64::total_cmp);
    assert_eq!(ps, vec![0.057, 0.09, 0.10, 0.50]);
    assert!(fam.members.iter().all(|m| m.test == TestKind::Paired && !m.holm_reject && !m.bonferroni_reject));
    assert!(fam.survivors.is_empty());
    assert!(render_text(&rep).contains("family tier1 (k = 4, Bonferroni threshold 0.025): no cell survives"));
    // recomputed unpaired p for L1 against the printed 0.09
    let l1 = row(&rep, "l1");
    assert!((0.08..=0.10).contains(&l1.p_unp.unwrap()));
    assert_eq!(l1.p_paired, Some(0.10));
    assert!(l1.flags.contains(&"reported-p".to_string()));
}

#[test]
fn ten_cell_family_rejects_nothing() {
    let set = load(&fixture("synth_summary.csv")).unwrap();
    let fam = "dist=l1,l2,l3,l4,l5,l6,l9,l12,l13,l14".parse().unwrap();
    let opts = ReportOptions { families: vec![fam], ..ReportOptions::default() };
    let rep = build_report(&set, &opts).unwrap();
    let f = &rep.benchmarks[0].families[0];
    assert_eq!((f.k, f.bonferroni_threshold), (10, Some(0.01)));
    assert!(f.survivors.is_empty());
}

#[test]
fn per_seed_results_get_both_tests_and_escalation() {
    let set = load(&fixture("seeds.csv")).unwrap();
    let opts = ReportOptions { families: vec![FamilySpec::All], ..ReportOptions::default() };
    let rep = build_report(&set, &opts).unwrap();
    let jfr = row(&rep, "jfr");
    // d = (2, 3, 1)
    assert!((jfr.paired.unwrap().t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
    assert!(jfr.unpaired.is_some());
    assert_eq!(jfr.prefix.unwrap().n, 3);
    let single = row(&rep, "l5");
    assert_eq!(single.escalation, Escalation::EscalateOnly);
    assert!(single.p_unp.is_none() && single.p_paired.is_none());
    assert!(single.flags.contains(&"escalate-only".to_string()));
    let fam = &rep.benchmarks[0].families[0];
    assert_eq!(fam.k, 2);
    assert!(fam.excluded.iter().any(|e| e.variant == "l5" && e.reason == "escalate-only"));
    let text = render_text(&rep);
    assert!(text.contains("l5 excluded (escalate-only)"));
    assert!(text.lines().any(|l| l.starts_with("l5") && l.contains("(n=1)") && l.ends_with("escalate-only")));
}

#[test]
fn missing_baseline_is_reported() {
    let set = load(&fixture("seeds.csv")).unwrap();
    let opts = ReportOptions { baseline: "none".into(), ..ReportOptions::default() };
    assert!(matches!(build_report(&set, &opts), Err(StatsError::MissingBaseline { .. })));
}

#[test]
fn json_report_round_trips() {
    let set = load(&fixture("turk_summary.csv")).unwrap();
    let rep = build_report(&set, &ReportOptions::default()).unwrap();
    let text = render_json(&rep).unwrap();
    let back: Report = serde_json::from_str(&text).unwrap();
    assert_eq!(back, rep);
}

#[test]
fn tab_delimited_and_json_inputs() {
    let tsv = "benchmark\tvariant\tseed\texact_pp\nb\tregular\t1\t1.0\nb\tregular\t2\t2.0\nb\tx\t1\t3.0\nb\tx\t2\t5.0\n";
    let set = parse_delimited(tsv).unwrap();
    assert_eq!(set.cells.len(), 2);
    assert!(set.cells[0].prefix.is_none());

    let rows = vec![
        SeedRow { benchmark: "b".into(), variant: "regular".into(), seed: "1".into(), exact_pp: 1.0, prefix_pp: None },
        SeedRow { benchmark: "b".into(), variant: "regular".into(), seed: "2".into(), exact_pp: 2.0, prefix_pp: None },
    ];
    let json = serde_json::to_string(&rows).unwrap();
    assert_eq!(parse_json(&json).unwrap().cells.len(), 1);
    let mixed = r#"{"rows": [
        {"benchmark": "b", "variant": "regular", "seed": 1, "exact_pp": 1.0},
        {"benchmark": "b", "variant": "regular", "seed": 2, "exact_pp": 3.0},
        {"benchmark": "b", "variant": "x", "exact_mean": 2.5, "exact_sd": 1.0, "n": 3}
    ]}"#;
    let set = parse_json(mixed).unwrap();
    assert_eq!(set.cells.len(), 2);
    let rep = build_report(&set, &ReportOptions::default()).unwrap();
    assert!(rep.benchmarks[0].rows[1].unpaired.is_some());
    assert!(rep.benchmarks[0].rows[1].paired.is_none());
}

#[test]
fn malformed_inputs_are_rejected() {
    assert!(parse_delimited("").is_err());
    assert!(parse_delimited("a,b\n1,2\n").is_err());
    assert!(parse_delimited("benchmark,variant,seed,exact_pp\nb,v,1,x\n").is_err());
    assert!(parse_delimited("benchmark,variant,seed,exact_pp\nb,v,1,1\nb,v,1,2\n").is_err());
    assert!(parse_delimited("benchmark,variant,seed,exact_pp,prefix_pp\nb,v,1,1,1\nb,v,2,2,\n").is_err());
    assert!(parse_delimited("benchmark,variant,exact_mean,exact_sd,n\nb,v,1.0,--,3\n").is_err());
    assert!(parse_json("{").is_err());
    assert!(matches!(load(&fixture("absent.csv")), Err(StatsError::Io(_))));
}

#[test]
fn singleton_summaries_accept_a_dash() {
    let set = parse_delimited("benchmark,variant,exact_mean,exact_sd,n\nb,regular,1.0,0.5,3\nb,v,2.0,--,1\n").unwrap();
    let rep = build_report(&set, &ReportOptions::default()).unwrap();
    assert_eq!(rep.benchmarks[0].rows[1].escalation, Escalation::EscalateOnly);
}

#[test]
fn family_specs_parse() {
    assert_eq!("all".parse::<FamilySpec>().unwrap(), FamilySpec::All);
    let f: FamilySpec = "a,b".parse().unwrap();
    assert_eq!(f, FamilySpec::Named { name: "family".into(), variants: vec!["a".into(), "b".into()] });
    assert!("x=".parse::<FamilySpec>().is_err());
}
