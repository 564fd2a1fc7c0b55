//! End-to-end benchmark cell: simulate, fit models, explain every test
//! subject with each requested method, and aggregate the evaluation
//! reports. Shared by the CLI and the acceptance suite.
//!
//! Subject-level work fans out across threads; every subject draws from
//! its own labeled random stream, so results are independent of execution
//! order and byte-identical across reruns.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, LimeConfig, QLearningModel};
use crate::blackbox::{BlackboxConfig, BlackboxModel};
use crate::error::{Error, Result};
use crate::eval::{self, BiasReport, PropensityModel};
use crate::moe::{self, Explanation, MoEConfig};
use crate::numkit::{Matrix, Rng};
use crate::simgen::{self, Dataset, GroundTruth, SimConfig};
use crate::vaegen::{self, PerturbConfig, VaeConfig, VaeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LiItr,
    Lime,
    Qlearn,
    Blackbox,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::LiItr => "li-itr",
            Method::Lime => "lime",
            Method::Qlearn => "qlearn",
            Method::Blackbox => "blackbox",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "li-itr" => Ok(Method::LiItr),
            "lime" => Ok(Method::Lime),
            "qlearn" => Ok(Method::Qlearn),
            "blackbox" => Ok(Method::Blackbox),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected li-itr, lime, qlearn, blackbox)"
            ))),
        }
    }
}

/// Full configuration of one benchmark cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub sim: SimConfig,
    pub blackbox: BlackboxConfig,
    pub vae: VaeConfig,
    pub perturb: PerturbConfig,
    pub moe: MoEConfig,
    pub lime: LimeConfig,
    pub methods: Vec<Method>,
    /// Skip a subject when more than this fraction of its perturbations
    /// leaves the training-range sanity box.
    pub skip_threshold: f64,
}

impl CellConfig {
    /// Desk defaults for the four-covariate simulation design.
    pub fn default_desk(seed: u64) -> Self {
        Self {
            seed,
            n_train: 2_000,
            n_test: 200,
            sim: SimConfig::default(),
            blackbox: BlackboxConfig::default(),
            vae: VaeConfig::default(),
            perturb: PerturbConfig::default(),
            moe: MoEConfig::default(),
            lime: LimeConfig::default_for(4),
            methods: vec![Method::LiItr, Method::Lime, Method::Qlearn, Method::Blackbox],
            skip_threshold: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_test == 0 {
            return Err(Error::Config("n_test must be ≥ 1".into()));
        }
        if !(self.skip_threshold >= 0.0 && self.skip_threshold <= 1.0) {
            return Err(Error::Config("skip_threshold must be in [0,1]".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkipRecord {
    pub subject_id: usize,
    pub method: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    /// Subjects actually explained (after skips).
    pub subjects: usize,
    pub skipped: usize,
    pub pcot: f64,
    pub n_treat1: usize,
    pub n_treat0: usize,
    /// IPW value of the recommendations over the evaluated test rows.
    pub value: f64,
    pub median_local_r2: Option<f64>,
    pub mean_abs_diff: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub methods: Vec<MethodReport>,
    pub bias: Vec<(String, BiasReport)>,
    pub explanations: Vec<(String, Vec<Explanation>)>,
    pub skipped: Vec<SkipRecord>,
    pub blackbox_train_r2: f64,
    pub blackbox_val_r2: f64,
    pub truth: GroundTruth,
    pub test_ids: Vec<usize>,
    pub propensity: PropensityModel,
}

struct SubjectOutcome {
    id: usize,
    liitr: Option<Explanation>,
    lime: Option<Explanation>,
    blackbox_rec: Option<u8>,
    qlearn: Option<Explanation>,
    skips: Vec<SkipRecord>,
}

/// Run one full cell: simulate, train, explain, evaluate.
pub fn run_cell(cfg: &CellConfig) -> Result<CellReport> {
    cfg.validate()?;
    let master = Rng::new(cfg.seed);

    let sim_cfg = SimConfig {
        n: cfg.n_train + cfg.n_test,
        seed: cfg.seed,
        ..cfg.sim.clone()
    };
    let (data, truth) = simgen::generate(&sim_cfg)?;
    let train = data.slice(0, cfg.n_train)?;
    let test_ids: Vec<usize> = (cfg.n_train..cfg.n_train + cfg.n_test).collect();

    let want = |m: Method| cfg.methods.contains(&m);
    let need_bb = want(Method::LiItr) || want(Method::Lime) || want(Method::Blackbox);

    let bb: Option<BlackboxModel> = if need_bb {
        Some(BlackboxModel::fit(
            &train,
            &cfg.blackbox,
            master.child("blackbox"),
        )?)
    } else {
        None
    };
    let vae: Option<VaeModel> = if want(Method::LiItr) {
        Some(VaeModel::fit(&train, &cfg.vae, master.child("vae"))?)
    } else {
        None
    };
    let qlearn: Option<QLearningModel> = if want(Method::Qlearn) {
        Some(baselines::q_learning_fit(&train, &cfg.moe.h0, &cfg.moe.h1)?)
    } else {
        None
    };
    let bounds = vaegen::sanity_box(&train.x);

    let outcomes: Vec<SubjectOutcome> = test_ids
        .par_iter()
        .map(|&id| -> Result<SubjectOutcome> {
            let x_subject = data.x.row(id);
            let mut out = SubjectOutcome {
                id,
                liitr: None,
                lime: None,
                blackbox_rec: None,
                qlearn: None,
                skips: Vec::new(),
            };

            if want(Method::LiItr) {
                let vae = vae.as_ref().unwrap();
                let bb = bb.as_ref().unwrap();
                let mut pset = vaegen::perturb_latent(
                    vae,
                    x_subject,
                    &cfg.perturb,
                    master.child(&format!("perturb:{id}")),
                    id,
                )?;
                let outside = vaegen::fraction_outside_box(&pset, &bounds);
                if outside > cfg.skip_threshold {
                    out.skips.push(SkipRecord {
                        subject_id: id,
                        method: "li-itr".into(),
                        reason: format!(
                            "{:.4} of perturbations outside training range",
                            outside
                        ),
                    });
                } else {
                    vaegen::attach_predictions(&mut pset, bb)?;
                    let surrogate =
                        moe::fit_surrogate(&pset, &cfg.moe, master.child(&format!("moe:{id}")))?;
                    out.liitr = Some(moe::explain_subject(x_subject, &surrogate, &pset)?);
                }
            }

            if want(Method::Lime) {
                let bb = bb.as_ref().unwrap();
                let (expl, hood) = baselines::lime_explain(
                    x_subject,
                    bb,
                    &cfg.lime,
                    &cfg.moe.h0,
                    &cfg.moe.h1,
                    master.child(&format!("lime:{id}")),
                    id,
                )?;
                let mut outside = 0usize;
                for j in 0..hood.d_prime.rows() {
                    let x = &hood.d_prime.row(j)[1..];
                    if x.iter().zip(&bounds).any(|(v, (lo, hi))| v < lo || v > hi) {
                        outside += 1;
                    }
                }
                let frac = outside as f64 / hood.d_prime.rows() as f64;
                if frac > cfg.skip_threshold {
                    out.skips.push(SkipRecord {
                        subject_id: id,
                        method: "lime".into(),
                        reason: format!("{:.4} of perturbations outside training range", frac),
                    });
                } else {
                    out.lime = Some(expl);
                }
            }

            if want(Method::Blackbox) {
                out.blackbox_rec = Some(bb.as_ref().unwrap().itr(x_subject)?);
            }
            if want(Method::Qlearn) {
                out.qlearn = Some(qlearn.as_ref().unwrap().explanation(id, x_subject));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    // Propensity for the IPW value, fit on the training split.
    let propensity = eval::fit_propensity(&train)?;

    let mut skipped: Vec<SkipRecord> = Vec::new();
    for o in &outcomes {
        skipped.extend(o.skips.iter().cloned());
    }

    let mut methods = Vec::new();
    let mut bias = Vec::new();
    let mut explanations = Vec::new();

    for method in &cfg.methods {
        let (ids, recs, expls): (Vec<usize>, Vec<u8>, Vec<Explanation>) = match method {
            Method::LiItr => gather(&outcomes, |o| o.liitr.clone()),
            Method::Lime => gather(&outcomes, |o| o.lime.clone()),
            Method::Qlearn => gather(&outcomes, |o| o.qlearn.clone()),
            Method::Blackbox => {
                let mut ids = Vec::new();
                let mut recs = Vec::new();
                let mut expls = Vec::new();
                for o in &outcomes {
                    if let Some(rec) = o.blackbox_rec {
                        ids.push(o.id);
                        recs.push(rec);
                        expls.push(Explanation {
                            subject_id: o.id,
                            method: "blackbox".into(),
                            selected_expert: None,
                            beta_k1: None,
                            beta_k2: None,
                            recommended_t: rec,
                            local_r2: None,
                            gate_distribution: None,
                            mean_abs_diff: None,
                        });
                    }
                }
                (ids, recs, expls)
            }
        };
        if ids.is_empty() {
            return Err(Error::Training(format!(
                "method {} explained no subjects",
                method.as_str()
            )));
        }

        let optimal: Vec<u8> = ids.iter().map(|&i| truth.optimal_t[i]).collect();
        let pcot = eval::pcot(&recs, &optimal)?;
        let n_treat1 = recs.iter().filter(|r| **r == 1).count();
        let subset = dataset_subset(&data, &ids)?;
        let value = eval::value_function(&subset, &recs, &propensity)?;

        let mut r2s: Vec<f64> = expls.iter().filter_map(|e| e.local_r2).collect();
        let median_local_r2 = median_of(&mut r2s);
        let mads: Vec<f64> = expls.iter().filter_map(|e| e.mean_abs_diff).collect();
        let mean_abs_diff = if mads.is_empty() {
            None
        } else {
            Some(crate::numkit::mean(&mads))
        };

        methods.push(MethodReport {
            method: method.as_str().to_string(),
            subjects: ids.len(),
            skipped: cfg.n_test - ids.len(),
            pcot,
            n_treat1,
            n_treat0: recs.len() - n_treat1,
            value,
            median_local_r2,
            mean_abs_diff,
        });

        if matches!(method, Method::LiItr | Method::Lime | Method::Qlearn) {
            bias.push((
                method.as_str().to_string(),
                eval::bias_table(&expls, &truth, &cfg.moe.h0, &cfg.moe.h1)?,
            ));
        }
        explanations.push((method.as_str().to_string(), expls));
    }

    let (bb_train_r2, bb_val_r2) = bb
        .as_ref()
        .map(|b| (b.train_r2, b.val_r2))
        .unwrap_or((f64::NAN, f64::NAN));

    Ok(CellReport {
        methods,
        bias,
        explanations,
        skipped,
        blackbox_train_r2: bb_train_r2,
        blackbox_val_r2: bb_val_r2,
        truth,
        test_ids,
        propensity,
    })
}

fn gather<F: Fn(&SubjectOutcome) -> Option<Explanation>>(
    outcomes: &[SubjectOutcome],
    pick: F,
) -> (Vec<usize>, Vec<u8>, Vec<Explanation>) {
    let mut ids = Vec::new();
    let mut recs = Vec::new();
    let mut expls = Vec::new();
    for o in outcomes {
        if let Some(e) = pick(o) {
            ids.push(o.id);
            recs.push(e.recommended_t);
            expls.push(e);
        }
    }
    (ids, recs, expls)
}

fn dataset_subset(data: &Dataset, ids: &[usize]) -> Result<Dataset> {
    let rows: Vec<Vec<f64>> = ids.iter().map(|&i| data.x.row(i).to_vec()).collect();
    Ok(Dataset {
        x: Matrix::from_rows(&rows)?,
        t: ids.iter().map(|&i| data.t[i]).collect(),
        y: ids.iter().map(|&i| data.y[i]).collect(),
        column_names: data.column_names.clone(),
    })
}

fn median_of(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}
