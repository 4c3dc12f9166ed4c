//! Robustness harness: embed, distort each copy independently, extract, score.

use serde::{Deserialize, Serialize, Serializer};

use crate::checkpoint::Checkpoint;
use crate::cim::GuidanceSignals;
use crate::config::RunConfig;
use crate::data::DataSource;
use crate::distortions::EvalDistortion;
use crate::error::{Error, Result};
use crate::message::BitMessage;
use crate::metrics::{bit_accuracy, psnr, ssim};
use crate::model::Model;
use crate::params::ParamStore;
use crate::rng::tagged_stream;

/// Images embedded per forward pass.
const EMBED_CHUNK: usize = 8;

/// What to evaluate and how.
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub seed: u64,
    /// Keep one record per image in the report.
    pub per_image: bool,
    /// Evaluate at most this many images of the dataset.
    pub limit: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            per_image: false,
            limit: None,
        }
    }
}

/// Infinite PSNR (identical images) is written as the string `"inf"`.
fn finite_or_label<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("nan")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistortionScore {
    pub distortion: String,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Imperceptibility {
    #[serde(serialize_with = "finite_or_label")]
    pub psnr: f64,
    pub ssim: f64,
    /// Mean `1 − SSIM`, the training perceptual term.
    pub perceptual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageRecord {
    pub index: usize,
    pub message: String,
    #[serde(serialize_with = "finite_or_label")]
    pub psnr: f64,
    pub ssim: f64,
    /// One accuracy per requested distortion, in request order.
    pub accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub config: RunConfig,
    pub seed: u64,
    pub images: usize,
    pub distortions: Vec<DistortionScore>,
    pub imperceptibility: Imperceptibility,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_image: Option<Vec<ImageRecord>>,
}

impl EvalReport {
    pub fn accuracy(&self, distortion: &str) -> Option<f64> {
        self.distortions
            .iter()
            .find(|d| d.distortion == distortion)
            .map(|d| d.mean_accuracy)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Per-image rows: index, message, psnr, ssim, then one column per distortion.
    pub fn to_csv(&self) -> Option<String> {
        let rows = self.per_image.as_ref()?;
        let mut out = String::from("index,message,psnr,ssim");
        for d in &self.distortions {
            out.push(',');
            out.push_str(&d.distortion);
        }
        out.push('\n');
        for r in rows {
            out.push_str(&format!("{},{},{},{}", r.index, r.message, r.psnr, r.ssim));
            for a in &r.accuracies {
                out.push_str(&format!(",{a}"));
            }
            out.push('\n');
        }
        Some(out)
    }
}

/// Scores a model on `data` under each distortion.
pub fn evaluate(
    model: &Model,
    params: &ParamStore<f32>,
    guidance: &GuidanceSignals,
    data: &dyn DataSource,
    distortions: &[EvalDistortion],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let n = opts.limit.map_or(data.len(), |l| l.min(data.len()));
    if n == 0 {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    if distortions.is_empty() {
        return Err(Error::Config("no distortions requested".into()));
    }
    let names: Vec<String> = distortions.iter().map(ToString::to_string).collect();
    for (i, name) in names.iter().enumerate() {
        if names[..i].contains(name) {
            return Err(Error::Config(format!("distortion `{name}` requested twice")));
        }
    }
    let l = model.config.message_length;

    let mut records = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EMBED_CHUNK).min(n);
        let covers = (start..end).map(|i| data.get(i)).collect::<Result<Vec<_>>>()?;
        let messages: Vec<BitMessage> = (start..end)
            .map(|i| BitMessage::random(&mut tagged_stream(opts.seed, "eval-message", i as u64), l))
            .collect();
        let marked = model.embed(params, &covers, &messages, guidance)?;

        let mut accuracies = vec![Vec::with_capacity(distortions.len()); end - start];
        for (d, name) in distortions.iter().zip(&names) {
            let distorted = (start..end)
                .map(|i| {
                    // keyed by distortion and image so results do not depend on the list
                    let mut rng = tagged_stream(opts.seed, &format!("eval/{name}"), i as u64);
                    d.apply(&marked[i - start], &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let probs = model.extract(params, &distorted, guidance)?;
            for (k, p) in probs.iter().enumerate() {
                accuracies[k].push(bit_accuracy(p, messages[k].bits())?);
            }
        }
        for (k, acc) in accuracies.into_iter().enumerate() {
            records.push(ImageRecord {
                index: start + k,
                message: messages[k].to_hex(),
                psnr: psnr(&marked[k], &covers[k])?,
                ssim: ssim(&marked[k], &covers[k])?,
                accuracies: acc,
            });
        }
        start = end;
    }

    let mean = |f: &dyn Fn(&ImageRecord) -> f64| records.iter().map(f).sum::<f64>() / records.len() as f64;
    let scores = names
        .iter()
        .enumerate()
        .map(|(j, name)| DistortionScore {
            distortion: name.clone(),
            mean_accuracy: mean(&|r| r.accuracies[j]),
        })
        .collect();
    let ssim_mean = mean(&|r| r.ssim);
    let imperceptibility = Imperceptibility {
        psnr: mean(&|r| r.psnr),
        ssim: ssim_mean,
        perceptual: 1.0 - ssim_mean,
    };
    Ok(EvalReport {
        config: model.config.clone(),
        seed: opts.seed,
        images: n,
        distortions: scores,
        imperceptibility,
        per_image: opts.per_image.then_some(records),
    })
}

/// [`evaluate`] on a trained checkpoint; untrained checkpoints are refused.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    data: &dyn DataSource,
    distortions: &[EvalDistortion],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let guidance = ck.require_guidance()?;
    let model = Model::new(&ck.config)?;
    evaluate(&model, &ck.params, guidance, data, distortions, opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub distortion: String,
    pub points: Vec<SweepPoint>,
}

/// Accuracy at each strength in `grid`, in grid order.
pub fn sweep(
    model: &Model,
    params: &ParamStore<f32>,
    guidance: &GuidanceSignals,
    data: &dyn DataSource,
    distortion: &EvalDistortion,
    grid: &[f64],
    opts: &EvalOptions,
) -> Result<SweepCurve> {
    let variants = grid
        .iter()
        .map(|&v| distortion.with_value(v))
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::with_capacity(grid.len());
    for (&value, d) in grid.iter().zip(&variants) {
        let opts = EvalOptions {
            per_image: false,
            ..opts.clone()
        };
        let report = evaluate(model, params, guidance, data, std::slice::from_ref(d), &opts)?;
        points.push(SweepPoint {
            value,
            accuracy: report.distortions[0].mean_accuracy,
        });
    }
    Ok(SweepCurve {
        distortion: distortion.kind.name().to_string(),
        points,
    })
}
