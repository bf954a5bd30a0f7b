//! Browser bindings for the demo page in `www/`.

use osev_core::evidential::{evidence_from_logits, DirichletOpinion, EvidenceFunction};
use osev_core::hsic::{hsic_biased, rbf_gram, KernelParams};
use osev_core::losses::{edl_loss, one_hot, AnnealingSchedule};
use osev_core::rng::seeded;
use osev_core::{Error, Result, Tensor};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct OpinionView {
    evidence: Vec<f64>,
    #[serde(flatten)]
    opinion: DirichletOpinion,
    predicted: usize,
    edl_loss: f64,
}

fn evidence_kind(name: &str) -> Result<EvidenceFunction> {
    EvidenceFunction::parse(name).ok_or_else(|| Error::InvalidArgument {
        name: "evidence",
        message: format!("unknown evidence function {name:?}"),
    })
}

pub fn opinion_json(logits: &[f64], evidence: &str, label: usize) -> Result<String> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument {
            name: "label",
            message: format!("{label} out of range for {} classes", logits.len()),
        });
    }
    let e = evidence_from_logits(logits, evidence_kind(evidence)?)?;
    let opinion = DirichletOpinion::from_evidence(&e);
    let (loss, _) = edl_loss(&one_hot(label, logits.len()), &e);
    let view = OpinionView {
        evidence: e.values().to_vec(),
        predicted: opinion.predict().class,
        opinion,
        edl_loss: loss,
    };
    Ok(serde_json::to_string(&view)?)
}

pub fn annealing_values(lambda0: f64, epochs: usize) -> Result<Vec<f64>> {
    let schedule = AnnealingSchedule::new(lambda0, epochs.saturating_sub(1))?;
    Ok((0..epochs).map(|t| schedule.lambda_at(t)).collect())
}

#[derive(Serialize)]
struct DependenceView {
    x: Vec<f64>,
    y: Vec<f64>,
    hsic: f64,
    correlation: f64,
}

fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Draws `n` points with `y = c * g(x) + sqrt(1 - c^2) * noise`, where `g`
/// is the identity or a centred square, and measures their dependence.
pub fn dependence_json(n: usize, coupling: f64, relation: &str, seed: u32) -> Result<String> {
    if n < 2 {
        return Err(Error::InvalidArgument {
            name: "n",
            message: "need at least 2 points".into(),
        });
    }
    if !(0.0..=1.0).contains(&coupling) {
        return Err(Error::InvalidArgument {
            name: "coupling",
            message: format!("must lie in [0, 1], got {coupling}"),
        });
    }
    let square = match relation {
        "linear" => false,
        "quadratic" => true,
        other => {
            return Err(Error::InvalidArgument {
                name: "relation",
                message: format!("unknown relation {other:?}"),
            })
        }
    };
    let mut rng = seeded(u64::from(seed));
    let noise_scale = (1.0 - coupling * coupling).sqrt();
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = StandardNormal.sample(&mut rng);
        let eps: f64 = StandardNormal.sample(&mut rng);
        let g = if square { (a * a - 1.0) / 2f64.sqrt() } else { a };
        x.push(a);
        y.push(coupling * g + noise_scale * eps);
    }
    let params = KernelParams::default();
    let (kx, _) = rbf_gram(&Tensor::from_vec(&[n, 1], x.clone())?, &params)?;
    let (ky, _) = rbf_gram(&Tensor::from_vec(&[n, 1], y.clone())?, &params)?;
    let view = DependenceView {
        hsic: hsic_biased(&kx, &ky)?,
        correlation: correlation(&x, &y),
        x,
        y,
    };
    Ok(serde_json::to_string(&view)?)
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Opinion, prediction and EDL loss for a logit vector, as JSON.
#[wasm_bindgen]
pub fn opinion(logits: Vec<f64>, evidence: &str, label: usize) -> std::result::Result<String, JsError> {
    opinion_json(&logits, evidence, label).map_err(js)
}

/// Calibration weight for each epoch of a run.
#[wasm_bindgen]
pub fn annealing_curve(lambda0: f64, epochs: usize) -> std::result::Result<Vec<f64>, JsError> {
    annealing_values(lambda0, epochs).map_err(js)
}

/// Sample points and their HSIC and Pearson correlation, as JSON.
#[wasm_bindgen]
pub fn dependence(n: usize, coupling: f64, relation: &str, seed: u32) -> std::result::Result<String, JsError> {
    dependence_json(n, coupling, relation, seed).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits_give_vacuous_opinion_with_relu() {
        let v: serde_json::Value = serde_json::from_str(&opinion_json(&[0.0, 0.0, 0.0], "relu", 0).unwrap()).unwrap();
        assert_eq!(v["uncertainty"], 1.0);
        assert!((v["edl_loss"].as_f64().unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!(opinion_json(&[0.0], "relu", 1).is_err());
        assert!(opinion_json(&[0.0], "tanh", 0).is_err());
    }

    #[test]
    fn annealing_runs_from_lambda0_to_one() {
        let v = annealing_values(0.01, 51).unwrap();
        assert_eq!(v.len(), 51);
        assert!((v[0] - 0.01).abs() < 1e-12);
        assert!((v[25] - 0.1).abs() < 1e-12);
        assert!((v[50] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_dependence_is_seen_by_hsic_not_correlation() {
        let read = |c: f64| -> (f64, f64) {
            let v: serde_json::Value = serde_json::from_str(&dependence_json(300, c, "quadratic", 7).unwrap()).unwrap();
            (v["hsic"].as_f64().unwrap(), v["correlation"].as_f64().unwrap())
        };
        let (h0, _) = read(0.0);
        let (h1, r1) = read(0.95);
        assert!(h1 > 3.0 * h0, "{h1} vs {h0}");
        assert!(r1.abs() < 0.2, "{r1}");
        assert!(dependence_json(1, 0.5, "linear", 0).is_err());
        assert!(dependence_json(10, 1.5, "linear", 0).is_err());
    }
}
