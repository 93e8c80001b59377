//! Per-instance explanation and prediction factors paired with attack
//! outcomes, exported as scatter data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::LabeledImageCollection;
use crate::error::{Error, Result};
use crate::inversion::BreachedTuple;
use crate::metrics::{class_mean_maps, explanation_relevance, explanation_typicalness, foreground_mask, MetricRow};
use crate::xai::ExplanationKind;

use super::pipeline::source_indices;

pub const FACTORS: [&str; 4] = ["relevance", "typicalness", "confidence", "target_accuracy"];

/// Factor values for each attack-test instance, in breach order.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorTable {
    pub instances: Vec<usize>,
    pub labels: Vec<usize>,
    /// IoU of the target Grad-CAM with the foreground mask.
    pub relevance: Vec<f64>,
    /// PCC of the Grad-CAM with its true class's mean Grad-CAM over the
    /// attack-train split; missing when undefined.
    pub typicalness: Vec<Option<f64>>,
    /// Top target confidence.
    pub confidence: Vec<f64>,
    /// 1 when the target predicted the true label.
    pub target_accuracy: Vec<f64>,
}

impl FactorTable {
    pub fn column(&self, factor: &str) -> Option<Vec<Option<f64>>> {
        match factor {
            "relevance" => Some(self.relevance.iter().map(|&v| Some(v)).collect()),
            "typicalness" => Some(self.typicalness.clone()),
            "confidence" => Some(self.confidence.iter().map(|&v| Some(v)).collect()),
            "target_accuracy" => Some(self.target_accuracy.iter().map(|&v| Some(v)).collect()),
            _ => None,
        }
    }
}

fn grad_cam(t: &BreachedTuple) -> Result<&[f32]> {
    t.explanation(ExplanationKind::GradCam)
        .map(|e| e.values())
        .ok_or_else(|| Error::Invalid("breached tuple lacks a Grad-CAM".into()))
}

pub fn factor_table(
    data: &LabeledImageCollection,
    train: &[BreachedTuple],
    test: &[BreachedTuple],
) -> Result<FactorTable> {
    let class_count = data.profile.class_count;
    let train_idx = source_indices(train)?;
    let train_maps = train.iter().map(grad_cam).collect::<Result<Vec<_>>>()?;
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| data.labels[i]).collect();
    let means = class_mean_maps(&train_maps, &train_labels, class_count)?;

    let instances = source_indices(test)?;
    let labels: Vec<usize> = instances.iter().map(|&i| data.labels[i]).collect();
    let mut t = FactorTable {
        instances: instances.clone(),
        labels: labels.clone(),
        relevance: Vec::with_capacity(test.len()),
        typicalness: Vec::with_capacity(test.len()),
        confidence: Vec::with_capacity(test.len()),
        target_accuracy: Vec::with_capacity(test.len()),
    };
    for ((tuple, &i), &label) in test.iter().zip(&instances).zip(&labels) {
        let e = tuple.explanation(ExplanationKind::GradCam).ok_or_else(|| Error::Invalid("missing Grad-CAM".into()))?;
        let s = e.shape();
        let mask = foreground_mask(&data.images[i], s.height, s.width);
        t.relevance.push(explanation_relevance(e.values(), &mask)?);
        t.typicalness.push(match &means[label] {
            Some(m) => explanation_typicalness(e.values(), m)?,
            None => None,
        });
        t.confidence.push(tuple.prediction.confidence() as f64);
        t.target_accuracy.push(f64::from(u8::from(tuple.prediction.argmax() == label)));
    }
    Ok(t)
}

#[derive(Serialize)]
struct FactorRow {
    instance: usize,
    label: usize,
    value: Option<f64>,
    ssim: Option<f64>,
    attack_correct: Option<f64>,
}

/// Writes `<dir>/<run_id>/<factor>.csv` for every run in `rows`; returns the
/// files written.
pub fn write_exports(dir: &Path, factors: &FactorTable, rows: &[MetricRow]) -> Result<Vec<PathBuf>> {
    let mut outcome: BTreeMap<&str, BTreeMap<(usize, &str), Option<f64>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == "ssim" || r.metric == "attack_correct") {
        outcome.entry(&r.run_id).or_default().insert((r.instance, &r.metric), r.value);
    }
    let mut written = Vec::new();
    for (run, vals) in &outcome {
        for factor in FACTORS {
            let col = factors.column(factor).expect("known factor");
            let path = dir.join(run).join(format!("{factor}.csv"));
            std::fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(dir, e))?;
            let mut w =
                csv::Writer::from_path(&path).map_err(|e| Error::Load { path: path.clone(), reason: e.to_string() })?;
            for (j, &inst) in factors.instances.iter().enumerate() {
                let row = FactorRow {
                    instance: inst,
                    label: factors.labels[j],
                    value: col[j],
                    ssim: vals.get(&(inst, "ssim")).copied().flatten(),
                    attack_correct: vals.get(&(inst, "attack_correct")).copied().flatten(),
                };
                w.serialize(row).map_err(|e| Error::Load { path: path.clone(), reason: e.to_string() })?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetProfile;
    use crate::image::ImageTensor;
    use crate::xai::{Explanation, ExplanationMap};
    use crate::zoo::PredictionVector;

    fn tuple(i: usize, cam: Vec<f32>, conf: [f32; 2]) -> BreachedTuple {
        BreachedTuple {
            prediction: PredictionVector { confidences: conf.to_vec() },
            explanations: vec![Explanation::Map(ExplanationMap {
                kind: ExplanationKind::GradCam,
                explained_class: 0,
                source_layer: None,
                height: 2,
                width: 2,
                normalized: false,
                values: cam,
            })],
            source_index: Some(i),
            run_id: "r".into(),
        }
    }

    fn fixture() -> (LabeledImageCollection, Vec<BreachedTuple>, Vec<BreachedTuple>) {
        let profile = DatasetProfile {
            name: "t".into(),
            image_size: (2, 2),
            channels: 1,
            class_count: 2,
            label_kind: crate::data::LabelKind::Target,
        };
        let images = vec![
            ImageTensor::new(2, 2, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            ImageTensor::new(2, 2, 1, vec![0.0, 1.0, 0.0, 0.0]).unwrap(),
            ImageTensor::new(2, 2, 1, vec![1.0, 1.0, 0.0, 0.0]).unwrap(),
            ImageTensor::new(2, 2, 1, vec![0.0, 0.0, 1.0, 1.0]).unwrap(),
        ];
        let data = LabeledImageCollection::new(profile, images, vec![0, 1, 0, 1]).unwrap();
        let train =
            vec![tuple(0, vec![1.0, 0.0, 0.0, 0.0], [0.9, 0.1]), tuple(1, vec![0.0, 0.0, 0.0, 1.0], [0.2, 0.8])];
        let test = vec![tuple(2, vec![1.0, 1.0, 0.0, 0.0], [0.7, 0.3]), tuple(3, vec![2.0, 0.0, 0.0, 0.0], [0.6, 0.4])];
        (data, train, test)
    }

    #[test]
    fn factors_follow_their_definitions() {
        let (data, train, test) = fixture();
        let t = factor_table(&data, &train, &test).unwrap();
        assert_eq!(t.instances, vec![2, 3]);
        assert_eq!(t.relevance, vec![1.0, 0.0]);
        assert_eq!(t.confidence, vec![0.699999988079071, 0.6000000238418579]);
        assert_eq!(t.target_accuracy, vec![1.0, 0.0]);
        // instance 3 has label 1; its own class mean is [0,0,0,1], never class 0's
        let pcc = t.typicalness[1].unwrap();
        assert!((pcc - (-1.0 / 3.0)).abs() < 1e-9, "{pcc}");
    }

    #[test]
    fn exports_have_one_row_per_instance() {
        let (data, train, test) = fixture();
        let t = factor_table(&data, &train, &test).unwrap();
        let rows: Vec<MetricRow> = [2, 3]
            .iter()
            .flat_map(|&i| {
                ["ssim", "attack_correct"].map(|m| MetricRow {
                    run_id: "a".into(),
                    instance: i,
                    metric: m.into(),
                    value: Some(0.5),
                })
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let files = write_exports(dir.path(), &t, &rows).unwrap();
        assert_eq!(files.len(), 4);
        let text = std::fs::read_to_string(dir.path().join("a/confidence.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("instance,label,value,ssim,attack_correct\n"));
    }
}
