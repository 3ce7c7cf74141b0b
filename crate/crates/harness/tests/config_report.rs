use reprog_harness::config::{derive_seed, Auto, Config};
use reprog_harness::report::{ReportRow, ScenarioKind, ScenarioReport};

#[test]
fn defaults_round_trip_through_toml() {
    let cfg = Config::default();
    assert_eq!(Config::parse(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(Config::parse("").unwrap(), cfg);
}

#[test]
fn every_key_is_a_flag_and_overrides_its_section() {
    let keys = Config::keys();
    assert!(keys.len() > 40);
    let cfg = Config::default()
        .with_overrides([("k", "7"), ("lr", "1"), ("q_grid", "4,8"), ("rho", "0.3"), ("optimizer", "sgd")])
        .unwrap();
    assert_eq!(cfg.detector.k, 7);
    assert_eq!(cfg.attack.lr, 1.0);
    assert_eq!(cfg.attack.q_grid, vec![4, 8]);
    assert_eq!(cfg.detector.rho, Auto::Value(0.3));
    assert_eq!(cfg.source.optimizer, "sgd");
    let back = cfg.with_overrides([("rho", "auto"), ("train_lr", "[1e-3]")]);
    assert!(back.is_err(), "train_lr is a scalar");
    assert_eq!(cfg.with_overrides([("rho", "auto")]).unwrap().detector.rho, Auto::Auto);
}

#[test]
fn file_sections_merge_over_defaults() {
    let cfg = Config::parse("[detector]\nk = 4\ntarget_fpr = 0.01\n\n[attack]\nq_grid = [2, 3]\nlr = 3\n").unwrap();
    assert_eq!((cfg.detector.k, cfg.detector.target_fpr), (4, 0.01));
    assert_eq!((cfg.attack.q_grid.clone(), cfg.attack.lr), (vec![2, 3], 3.0));
    assert_eq!(cfg.attack.epochs, Config::default().attack.epochs);
}

#[test]
fn bad_configs_are_rejected() {
    for text in [
        "[detector]\nbogus = 1\n",
        "[attack]\nk = 3\n",
        "[nowhere]\nk = 3\n",
        "k = 3\n",
        "[detector]\nk = \"ten\"\n",
        "[detector]\nk = 0\n",
        "[detector]\nrho = -1.0\n",
        "[data]\ntarget_size = 64\n",
        "[attack]\nupdate = \"sideways\"\n",
        "[detector]\ntarget_fpr = 2.0\n",
        "[attack]\nq_grid = [0]\n",
        "not toml at all [",
    ] {
        assert!(Config::parse(text).is_err(), "accepted {text:?}");
    }
    assert!(Config::default().with_overrides([("nope", "1")]).is_err());
}

#[test]
fn derived_seeds_separate_tags_and_indices() {
    let a = derive_seed(1, "repeat", 0);
    assert_eq!(a, derive_seed(1, "repeat", 0));
    assert_ne!(a, derive_seed(1, "repeat", 1));
    assert_ne!(a, derive_seed(2, "repeat", 0));
    assert_ne!(a, derive_seed(1, "encoder", 0));
}

fn table4_row(repeat: u64, d: u64, q: u64) -> ReportRow {
    ReportRow {
        repeat,
        seed: 10 + repeat,
        tr: 200,
        ts: 200,
        q: Some(5),
        br_t: Some(0.1 + 0.2),
        queries: Some(q),
        nominal_queries: Some(6 * 200),
        detections: Some(d),
        k: Some(10),
        sigma_star: Some(d as f64 * 11.0 / q as f64),
        accounts: Some(1),
        aborted: Some(false),
        ..ReportRow::default()
    }
}

#[test]
fn csv_round_trips_exactly() {
    let mut report = ScenarioReport::new(ScenarioKind::Table4);
    report.rows.push(table4_row(0, 17, 2000));
    report.rows.push(table4_row(1, 0, 1));
    let text = report.to_csv();
    assert!(text.starts_with("repeat,seed,tr,ts,q,br_t,queries,nominal_queries,detections,k,sigma_star,accounts,aborted\n"));
    let back = ScenarioReport::parse_csv(&text).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.to_csv(), text);
    for row in &back.rows {
        assert_eq!(row.recomputed_sigma_star(), row.sigma_star);
    }
}

#[test]
fn empty_report_is_header_only() {
    for kind in [ScenarioKind::Table3, ScenarioKind::Table4, ScenarioKind::Table5] {
        let text = ScenarioReport::new(kind).to_csv();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(ScenarioReport::parse_csv(&text).unwrap().kind, kind);
    }
    assert!(ScenarioReport::parse_csv("a,b,c\n").is_err());
}

#[test]
fn missing_query_count_leaves_sigma_undefined() {
    let mut row = table4_row(0, 0, 0);
    row.sigma_star = None;
    assert_eq!(row.recomputed_sigma_star(), None);
    let mut report = ScenarioReport::new(ScenarioKind::Table4);
    report.rows.push(row);
    let back = ScenarioReport::parse_csv(&report.to_csv()).unwrap();
    assert_eq!(back.rows[0].sigma_star, None);
}

#[test]
fn means_group_by_key() {
    let mut report = ScenarioReport::new(ScenarioKind::Table3);
    for (tr, gap) in [(200, 0.1), (200, 0.3), (400, 0.05), (400, -0.05)] {
        report.rows.push(ReportRow {
            tr,
            gap: Some(gap),
            ..ReportRow::default()
        });
    }
    let m = report.mean_by(|r| r.tr, |r| r.gap);
    assert_eq!(m.len(), 2);
    assert!((m[0].1 - 0.2).abs() < 1e-15 && m[1].1.abs() < 1e-15);
}
