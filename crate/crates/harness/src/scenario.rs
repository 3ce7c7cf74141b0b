//! Desk-scale experiment scenarios. Every repeat `r` uses the run seed
//! `seed_for("repeat", r)` for program init, shuffling and directions, so
//! rows with the same repeat index are seed-matched across scenarios.

use reprog_core::detector::{DetectionLogRow, StatefulDetector};
use reprog_core::models::{QueryChannel, Verdict};
use reprog_core::reprogram::{reprogram_accuracy, whitebox_reprogram, AdversarialProgram};
use reprog_core::zoattack::{
    blackbox_reprogram, finetune_from_surrogate, BlackBoxConfig, BlackBoxOutcome, TraceRow,
};
use reprog_core::{CoreError, Result};

use crate::lab::Lab;
use crate::report::{ReportRow, ScenarioKind, ScenarioReport};

/// A scenario's report plus any per-run CSV files (query traces and
/// detection logs) requested with `trace = true`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutput {
    pub report: ScenarioReport,
    pub files: Vec<(String, String)>,
}

impl ScenarioOutput {
    fn new(kind: ScenarioKind) -> Self {
        Self {
            report: ScenarioReport::new(kind),
            files: Vec::new(),
        }
    }
}

fn run_seed(lab: &Lab, repeat: usize) -> u64 {
    lab.seed_for("repeat", repeat as u64)
}

fn accounts(lab: &Lab) -> Vec<u32> {
    (0..lab.cfg.detector.accounts as u32).collect()
}

/// White-box programs per training size and repeat, each paired (when
/// `compare` is set) with the black-box program trained under the same seed.
pub fn run_table3_analog(lab: &Lab) -> Result<ScenarioOutput> {
    let clf = lab.classifier()?;
    let (spec, mapping, test) = (lab.spec()?, lab.mapping()?, lab.target_test()?);
    let a = &lab.cfg.attack;
    let mut out = ScenarioOutput::new(ScenarioKind::Table3);
    for &tr in &lab.cfg.data.train_sizes {
        let train = lab.target_train(tr)?;
        for r in 0..lab.cfg.run.repeats {
            let seed = run_seed(lab, r);
            let rc = lab.reprogram_config(seed, a.epochs)?;
            let (wb, _) = whitebox_reprogram(clf, &train, &mapping, &rc, &spec)?;
            let r_t = reprogram_accuracy(&wb, test, &mapping, &spec, &mut &*clf)?;
            let mut row = ReportRow {
                repeat: r as u64,
                seed,
                tr: tr as u64,
                ts: test.len() as u64,
                r_t: Some(r_t),
                ..ReportRow::default()
            };
            if lab.cfg.run.compare {
                let bcfg = BlackBoxConfig {
                    reprogram: rc,
                    zo: lab.zo_config(a.q, seed),
                    trace: lab.cfg.run.trace,
                };
                let mut ch = QueryChannel::unobserved(clf);
                let bb = blackbox_reprogram(&mut ch, &[0], &train, &mapping, &bcfg, &spec)?;
                let br_t = reprogram_accuracy(&bb.program, test, &mapping, &spec, &mut &*clf)?;
                row.q = Some(a.q as u64);
                row.br_t = Some(br_t);
                row.gap = Some(r_t - br_t);
                row.queries = Some(bb.budget.queries);
                if lab.cfg.run.trace {
                    out.files.push((format!("table3-tr{tr}-r{r}-trace.csv"), trace_csv(&bb.trace)));
                }
            }
            out.report.rows.push(row);
        }
    }
    Ok(out)
}

/// Direct black-box attack with the calibrated detector attached, per `q`.
pub fn run_table4_analog(lab: &Lab) -> Result<ScenarioOutput> {
    let clf = lab.classifier()?;
    let (spec, mapping, test) = (lab.spec()?, lab.mapping()?, lab.target_test()?);
    let (encoder, det) = (lab.encoder()?, lab.detector_config()?);
    let train = lab.target_train(lab.cfg.data.attack_train_size)?;
    let a = &lab.cfg.attack;
    let mut out = ScenarioOutput::new(ScenarioKind::Table4);
    for &q in &a.q_grid {
        for r in 0..lab.cfg.run.repeats {
            let seed = run_seed(lab, r);
            let bcfg = BlackBoxConfig {
                reprogram: lab.reprogram_config(seed, a.epochs)?,
                zo: lab.zo_config(q, seed),
                trace: lab.cfg.run.trace,
            };
            let mut detector = StatefulDetector::new(encoder, det.clone())?;
            if lab.cfg.run.trace {
                detector = detector.with_log();
            }
            let mut ch = QueryChannel::new(clf, detector);
            let bb = blackbox_reprogram(&mut ch, &accounts(lab), &train, &mapping, &bcfg, &spec)?;
            let br_t = reprogram_accuracy(&bb.program, test, &mapping, &spec, &mut &*clf)?;
            let mut row = detection_row(lab, r, seed, train.len(), test.len(), q, br_t, &bb, ch.observer())?;
            row.q = Some(q as u64);
            out.report.rows.push(row);
            if lab.cfg.run.trace {
                out.files.push((format!("table4-q{q}-r{r}-trace.csv"), trace_csv(&bb.trace)));
                out.files.push((format!("table4-q{q}-r{r}-detections.csv"), detection_log_csv(ch.observer().log())));
            }
        }
    }
    Ok(out)
}

/// Program trained white-box on the surrogate, then fine-tuned with few
/// queries to the detector-guarded target, per `q`.
pub fn run_table5_analog(lab: &Lab) -> Result<ScenarioOutput> {
    let clf = lab.classifier()?;
    let surrogate = lab.surrogate()?;
    let (spec, mapping, test) = (lab.spec()?, lab.mapping()?, lab.target_test()?);
    let (encoder, det) = (lab.encoder()?, lab.detector_config()?);
    let train = lab.target_train(lab.cfg.data.attack_train_size)?;
    let a = &lab.cfg.attack;
    let mut out = ScenarioOutput::new(ScenarioKind::Table5);
    for r in 0..lab.cfg.run.repeats {
        let seed = run_seed(lab, r);
        let (sp, _) = whitebox_reprogram(surrogate, &train, &mapping, &lab.reprogram_config(seed, a.epochs)?, &spec)?;
        let r_s = reprogram_accuracy(&sp, test, &mapping, &spec, &mut &*surrogate)?;
        for &q in &a.finetune_q {
            let bcfg = BlackBoxConfig {
                reprogram: lab.reprogram_config(seed, a.finetune_epochs)?,
                zo: lab.zo_config(q, seed),
                trace: lab.cfg.run.trace,
            };
            let mut detector = StatefulDetector::new(encoder, det.clone())?;
            if lab.cfg.run.trace {
                detector = detector.with_log();
            }
            let mut ch = QueryChannel::new(clf, detector);
            let ft = finetune_from_surrogate(&sp, &mut ch, &accounts(lab), &train, &mapping, &bcfg, &spec)?;
            let br_t = reprogram_accuracy(&ft.program, test, &mapping, &spec, &mut &*clf)?;
            let mut row = detection_row(lab, r, seed, train.len(), test.len(), q, br_t, &ft, ch.observer())?;
            row.r_s = Some(r_s);
            out.report.rows.push(row);
            if lab.cfg.run.trace {
                out.files.push((format!("table5-q{q}-r{r}-trace.csv"), trace_csv(&ft.trace)));
                out.files.push((format!("table5-q{q}-r{r}-detections.csv"), detection_log_csv(ch.observer().log())));
            }
        }
    }
    Ok(out)
}

/// White-box program on the target classifier for one training size.
pub fn whitebox_program(lab: &Lab, tr: usize, repeat: usize) -> Result<AdversarialProgram> {
    let rc = lab.reprogram_config(run_seed(lab, repeat), lab.cfg.attack.epochs)?;
    let train = lab.target_train(tr)?;
    Ok(whitebox_reprogram(lab.classifier()?, &train, &lab.mapping()?, &rc, &lab.spec()?)?.0)
}

#[allow(clippy::too_many_arguments)]
fn detection_row(
    lab: &Lab,
    repeat: usize,
    seed: u64,
    tr: usize,
    ts: usize,
    q: usize,
    br_t: f64,
    run: &BlackBoxOutcome,
    detector: &StatefulDetector<'_>,
) -> Result<ReportRow> {
    let k = lab.cfg.detector.k;
    let (queries, detections) = (run.budget.queries, run.budget.detections);
    let pooled: (u64, u64) = detector
        .states()
        .fold((0, 0), |acc, (_, s)| (acc.0 + s.queries, acc.1 + s.detections));
    if pooled != (queries, detections) || detections > queries / (k as u64 + 1) {
        return Err(CoreError::Numeric(format!(
            "detector counters {pooled:?} disagree with attack budget ({queries}, {detections})"
        )));
    }
    let sigma_star = match detector.stats() {
        Ok(s) => Some(s.sigma_star),
        Err(CoreError::UndefinedStats(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(ReportRow {
        repeat: repeat as u64,
        seed,
        tr: tr as u64,
        ts: ts as u64,
        q: Some(q as u64),
        br_t: Some(br_t),
        queries: Some(queries),
        nominal_queries: Some((q as u64 + 1) * ts as u64),
        detections: Some(detections),
        k: Some(k as u64),
        sigma_star,
        accounts: Some(run.budget.accounts_used as u64),
        aborted: Some(run.aborted),
        ..ReportRow::default()
    })
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["query_index", "account", "epoch", "batch", "purpose", "loss"]).unwrap();
    for r in rows {
        w.write_record([
            r.query_index.to_string(),
            r.account.to_string(),
            r.epoch.to_string(),
            r.batch.map(|b| b.to_string()).unwrap_or_default(),
            r.purpose.name().to_string(),
            r.loss.to_string(),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

pub fn detection_log_csv(rows: &[DetectionLogRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["account", "query_index", "buffer_before", "mean_knn_distance", "verdict"]).unwrap();
    for r in rows {
        w.write_record([
            r.account.to_string(),
            r.query_index.to_string(),
            r.buffer_before.to_string(),
            r.mean_distance.map(|d| d.to_string()).unwrap_or_else(|| "warmup".into()),
            match r.verdict {
                Verdict::Pass => "pass".into(),
                Verdict::Flagged => "flagged".into(),
            },
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

pub fn calibration_csv(k: usize, target_fpr: f64, rho: f64, achieved_fpr: f64) -> String {
    format!("k,target_fpr,rho,achieved_fpr\n{k},{target_fpr},{rho},{achieved_fpr}\n")
}
