//! Model comparison by the variational lower bound, drop-one tournaments,
//! and replicate summary tables.
//!
//! With equal prior model probabilities the lower bound stands in for the
//! log evidence, so `P(M_j | y) ~ exp(L_j)`.

use std::fmt;

use log::info;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::engine::FitOptions;
use crate::error::{Error, Result};
use crate::init::{fit_model, PriorConfig};
use crate::model::{Dataset, FitResult, Parametrization};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelEntry {
    pub label: String,
    pub elbo: f64,
    pub converged: bool,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelComparison {
    /// In input order.
    pub entries: Vec<ModelEntry>,
}

impl ModelComparison {
    /// Indices sorted by decreasing lower bound; ties keep input order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.entries.len()).collect();
        idx.sort_by(|&a, &b| self.entries[b].elbo.total_cmp(&self.entries[a].elbo));
        idx
    }

    pub fn best(&self) -> &ModelEntry {
        &self.entries[self.ranking()[0]]
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "elbo", "converged", "probability"])
            .map_err(|e| Error::Config(e.to_string()))?;
        for e in &self.entries {
            w.write_record([e.label.clone(), format!("{}", e.elbo), e.converged.to_string(), format!("{}", e.probability)])
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

impl fmt::Display for ModelComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.entries.iter().map(|e| e.label.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:>12}  {:>9}  {:>11}", "model", "elbo", "converged", "probability")?;
        for i in self.ranking() {
            let e = &self.entries[i];
            writeln!(f, "{:<width$}  {:>12.3}  {:>9}  {:>11.4e}", e.label, e.elbo, e.converged, e.probability)?;
        }
        Ok(())
    }
}

/// Softmax of lower bounds, computed with log-sum-exp.
pub fn model_probabilities(elbos: &[f64]) -> Vec<f64> {
    let m = elbos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = elbos.iter().map(|e| (e - m).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Compares fits made on the same responses.
pub fn compare_models(labels: &[String], fits: &[FitResult]) -> Result<ModelComparison> {
    if fits.len() < 2 {
        return Err(Error::Config(format!("need at least two fits to compare, got {}", fits.len())));
    }
    if labels.len() != fits.len() {
        return Err(Error::shape("model labels", fits.len(), labels.len()));
    }
    let reference = &fits[0].data_fingerprint;
    for f in &fits[1..] {
        if &f.data_fingerprint != reference {
            return Err(Error::DatasetMismatch(reference.clone(), f.data_fingerprint.clone()));
        }
    }
    let elbos: Vec<f64> = fits.iter().map(FitResult::elbo).collect();
    let probs = model_probabilities(&elbos);
    Ok(ModelComparison {
        entries: labels
            .iter()
            .zip(fits)
            .zip(probs)
            .map(|((label, f), probability)| ModelEntry {
                label: label.clone(),
                elbo: f.elbo(),
                converged: f.converged,
                probability,
            })
            .collect(),
    })
}

/// Removes a subject-level or within-cluster fixed effect. Columns that
/// carry a random effect cannot be dropped this way.
pub fn drop_fixed_effect(ds: &Dataset, name: &str) -> Result<Dataset> {
    let pos = ds
        .fixed_names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::Config(format!("no fixed effect named {name:?}")))?;
    if pos < ds.r {
        return Err(Error::Config(format!("{name:?} has a random effect and cannot be dropped alone")));
    }
    let mut out = ds.clone();
    if pos < ds.r + ds.g1 {
        let k = pos - ds.r;
        for c in &mut out.clusters {
            c.xg1 = DVector::from_iterator(ds.g1 - 1, c.xg1.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, v)| *v));
        }
        out.g1 -= 1;
    } else {
        let k = pos - ds.r - ds.g1;
        for c in &mut out.clusters {
            c.xg2 = c.xg2.clone().remove_column(k);
            if c.xg2.ncols() == 0 {
                c.xg2 = DMatrix::zeros(c.len(), 0);
            }
        }
        out.g2 -= 1;
    }
    out.fixed_names.remove(pos);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TournamentStage {
    /// Fixed effects of the model carried into this stage.
    pub current: Vec<String>,
    pub comparison: ModelComparison,
    /// Effect dropped at the end of the stage, if any.
    pub dropped: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Tournament {
    pub stages: Vec<TournamentStage>,
    pub selected: Dataset,
}

impl Tournament {
    pub fn selected_effects(&self) -> &[String] {
        &self.selected.fixed_names
    }
}

/// Backward elimination: each stage fits the current model and every model
/// with one of `candidates` removed, moves to the one with the largest lower
/// bound, and stops when the current model wins.
pub fn drop_one_tournament(
    ds: &Dataset,
    candidates: &[String],
    prior: &PriorConfig,
    parametrization: Parametrization,
    options: &FitOptions,
) -> Result<Tournament> {
    for c in candidates {
        drop_fixed_effect(ds, c)?;
    }
    let mut current = ds.clone();
    let mut remaining: Vec<String> = candidates.to_vec();
    let mut stages = Vec::new();
    loop {
        let mut labels = vec!["current".to_string()];
        let mut fits = vec![fit_model(&current, prior, parametrization, options)?];
        let mut reduced = Vec::new();
        for name in &remaining {
            let d = drop_fixed_effect(&current, name)?;
            labels.push(format!("-{name}"));
            fits.push(fit_model(&d, prior, parametrization, options)?);
            reduced.push(d);
        }
        if remaining.is_empty() {
            stages.push(TournamentStage {
                current: current.fixed_names.clone(),
                comparison: ModelComparison {
                    entries: vec![ModelEntry {
                        label: labels[0].clone(),
                        elbo: fits[0].elbo(),
                        converged: fits[0].converged,
                        probability: 1.0,
                    }],
                },
                dropped: None,
            });
            break;
        }
        let comparison = compare_models(&labels, &fits)?;
        let best = comparison.ranking()[0];
        let dropped = (best > 0).then(|| remaining[best - 1].clone());
        stages.push(TournamentStage {
            current: current.fixed_names.clone(),
            comparison,
            dropped: dropped.clone(),
        });
        match dropped {
            Some(name) => {
                info!("dropping {name}");
                current = reduced.swap_remove(best - 1);
                remaining.retain(|n| n != &name);
            }
            None => break,
        }
    }
    Ok(Tournament { stages, selected: current })
}

/// Values a replicate summary is compared against.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    /// One value per parameter for every replicate, e.g. the design truth.
    Fixed(Vec<(String, f64)>),
    /// One table per replicate, e.g. estimates from another method.
    PerReplicate(Vec<Vec<(String, f64)>>),
}

impl Reference {
    /// Posterior means of `fits`, replicate by replicate.
    pub fn from_fits(fits: &[FitResult]) -> Self {
        Reference::PerReplicate(fits.iter().map(posterior_means).collect())
    }
}

fn posterior_means(f: &FitResult) -> Vec<(String, f64)> {
    f.summary
        .fixed
        .iter()
        .chain(&f.summary.random_sd)
        .map(|p| (p.name.clone(), p.mean))
        .collect()
}

fn lookup(f: &FitResult, name: &str) -> Option<(f64, f64)> {
    f.summary
        .fixed
        .iter()
        .chain(&f.summary.random_sd)
        .find(|p| p.name == name)
        .map(|p| (p.mean, p.sd))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub parameter: String,
    pub mean: f64,
    pub sd_mean: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub mean_elbo: f64,
    pub converged: usize,
    pub replicates: usize,
}

impl Report {
    pub fn row(&self, parameter: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.parameter == parameter)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.parameter.len()).max().unwrap_or(9).max(9);
        writeln!(f, "{:<width$}  {:>9}  {:>9}  {:>9}", "parameter", "mean", "sd", "rmse")?;
        for r in &self.rows {
            writeln!(f, "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}", r.parameter, r.mean, r.sd_mean, r.rmse)?;
        }
        writeln!(
            f,
            "mean lower bound {:.2} over {} replicates ({} converged)",
            self.mean_elbo, self.replicates, self.converged
        )
    }
}

/// Averages posterior means and SDs over replicates, with
/// `rmse = sqrt(mean_l (theta^_l - theta0_l)^2)` against the reference.
pub fn rmse_report(fits: &[FitResult], reference: &Reference) -> Result<Report> {
    if fits.is_empty() {
        return Err(Error::Config("no fits to summarise".into()));
    }
    let names: Vec<String> = match reference {
        Reference::Fixed(t) => t.iter().map(|(n, _)| n.clone()).collect(),
        Reference::PerReplicate(ts) => {
            if ts.len() != fits.len() {
                return Err(Error::shape("reference tables", fits.len(), ts.len()));
            }
            ts[0].iter().map(|(n, _)| n.clone()).collect()
        }
    };
    let reference_value = |l: usize, name: &str| -> Result<f64> {
        let table = match reference {
            Reference::Fixed(t) => t,
            Reference::PerReplicate(ts) => &ts[l],
        };
        table
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("reference for replicate {l} lacks {name:?}")))
    };
    let m = fits.len() as f64;
    let mut rows = Vec::with_capacity(names.len());
    for name in &names {
        let (mut mean, mut sd, mut sq) = (0.0, 0.0, 0.0);
        for (l, f) in fits.iter().enumerate() {
            let (est, s) = lookup(f, name).ok_or_else(|| Error::Config(format!("fit {l} has no parameter {name:?}")))?;
            mean += est;
            sd += s;
            sq += (est - reference_value(l, name)?).powi(2);
        }
        rows.push(ReportRow {
            parameter: name.clone(),
            mean: mean / m,
            sd_mean: sd / m,
            rmse: (sq / m).sqrt(),
        });
    }
    Ok(Report {
        rows,
        mean_elbo: fits.iter().map(FitResult::elbo).sum::<f64>() / m,
        converged: fits.iter().filter(|f| f.converged).count(),
        replicates: fits.len(),
    })
}
