//! Privacy-leakage metrics for reconstructions and explanation-quality
//! factors, plus aggregation with normal-approximation confidence intervals.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xaimi_nn::Parallelism;

use crate::error::{Error, Result};
use crate::image::{resize_bilinear, ImageTensor};
use crate::zoo::Classifier;

/// z-value of a two-sided 90% normal interval.
pub const Z90: f64 = 1.645;

/// SSIM stabilizers for unit dynamic range.
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Gaussian window truncated at this many standard deviations.
const SSIM_TRUNCATE: f64 = 3.5;

/// IoU binarization threshold relative to the per-map maximum.
pub const RELEVANCE_THRESHOLD: f32 = 0.5;

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("images {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a.pixels().iter().zip(b.pixels()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.pixels().len() as f64)
}

/// `1 − MSE`.
pub fn pixelwise_similarity(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(1.0 - mse(a, b)?)
}

/// Peak signal-to-noise ratio in dB for unit peak; `+∞` for identical images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (SSIM_TRUNCATE * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur; the window is renormalized where it overhangs
/// the border.
fn blur(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (t, &kv) in k.iter().enumerate() {
                    let d = t as isize - r;
                    let (yy, xx) = if horizontal { (y as isize, x as isize + d) } else { (y as isize + d, x as isize) };
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        acc += kv * src[yy as usize * w + xx as usize];
                        wsum += kv;
                    }
                }
                out[y * w + x] = acc / wsum;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Gaussian-windowed structural similarity, averaged over pixels and
/// channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, sigma: f64) -> Result<f64> {
    same_shape(a, b)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!("ssim sigma must be positive, got {sigma}")));
    }
    let (h, w, c) = a.shape();
    let k = gaussian_kernel(sigma);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.pixels()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.pixels()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let mx = blur(&x, h, w, &k);
        let my = blur(&y, h, w, &k);
        let exx = blur(&prod(&x, &x), h, w, &k);
        let eyy = blur(&prod(&y, &y), h, w, &k);
        let exy = blur(&prod(&x, &y), h, w, &k);
        for i in 0..plane {
            let vx = exx[i] - mx[i] * mx[i];
            let vy = eyy[i] - my[i] * my[i];
            let cov = exy[i] - mx[i] * my[i];
            let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
            total += num / den;
        }
    }
    Ok(total / (plane * c) as f64)
}

/// `exp(−MSE(z, z_r))`: squared distance averaged over embedding width, so
/// the score does not collapse to zero for wide embeddings.
pub fn embedding_similarity_from(z: &[f32], z_r: &[f32]) -> Result<f64> {
    if z.len() != z_r.len() || z.is_empty() {
        return Err(Error::Shape(format!("embeddings of width {} vs {}", z.len(), z_r.len())));
    }
    let d: f64 = z.iter().zip(z_r).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok((-d / z.len() as f64).exp())
}

pub fn embedding_similarity(eval: &Classifier, x: &ImageTensor, x_hat: &ImageTensor) -> Result<f64> {
    embedding_similarity_from(&eval.embed(x)?, &eval.embed(x_hat)?)
}

/// Fraction of reconstructions the evaluation model labels correctly.
pub fn attack_accuracy(
    eval: &Classifier,
    reconstructions: &[&ImageTensor],
    labels: &[usize],
    mode: Parallelism,
) -> Result<f64> {
    if reconstructions.is_empty() {
        return Err(Error::Invalid("no reconstructions".into()));
    }
    eval.accuracy(reconstructions, labels, mode)
}

/// Foreground mask of an image (pixels > 0 in any channel) at `h × w`. A
/// cell is foreground when the bilinear resample of the full-size mask is
/// positive.
pub fn foreground_mask(image: &ImageTensor, h: usize, w: usize) -> Vec<bool> {
    let (ih, iw, c) = image.shape();
    let plane = ih * iw;
    let full: Vec<f32> =
        (0..plane).map(|i| if (0..c).any(|ch| image.pixels()[ch * plane + i] > 0.0) { 1.0 } else { 0.0 }).collect();
    resize_bilinear(&full, ih, iw, h, w).into_iter().map(|v| v > 0.0).collect()
}

/// IoU between the CAM thresholded at half its maximum and `mask`. Two empty
/// supports coincide and score 1.
pub fn explanation_relevance(cam: &[f32], mask: &[bool]) -> Result<f64> {
    if cam.len() != mask.len() {
        return Err(Error::Shape(format!("cam of {} cells vs mask of {}", cam.len(), mask.len())));
    }
    let max = cam.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let support = |v: f32| max > 0.0 && v >= RELEVANCE_THRESHOLD * max;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&v, &m) in cam.iter().zip(mask) {
        let s = support(v);
        inter += (s && m) as usize;
        union += (s || m) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Pearson correlation; `None` when either map has zero variance.
pub fn explanation_typicalness(cam: &[f32], class_mean: &[f32]) -> Result<Option<f64>> {
    if cam.len() != class_mean.len() || cam.is_empty() {
        return Err(Error::Shape(format!("maps of {} and {} cells", cam.len(), class_mean.len())));
    }
    let n = cam.len() as f64;
    let ma = cam.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = class_mean.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&a, &b) in cam.iter().zip(class_mean) {
        let (da, db) = (a as f64 - ma, b as f64 - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)))
}

/// Per-class pixelwise mean of `maps`; classes without members get `None`.
pub fn class_mean_maps(maps: &[&[f32]], labels: &[usize], class_count: usize) -> Result<Vec<Option<Vec<f32>>>> {
    if maps.len() != labels.len() {
        return Err(Error::Shape(format!("{} maps vs {} labels", maps.len(), labels.len())));
    }
    let len = maps.first().map_or(0, |m| m.len());
    let mut sums = vec![vec![0.0f64; len]; class_count];
    let mut counts = vec![0usize; class_count];
    for (m, &l) in maps.iter().zip(labels) {
        if l >= class_count {
            return Err(Error::LabelOutOfRange { record: format!("map {l}"), label: l, class_count });
        }
        if m.len() != len {
            return Err(Error::Shape("maps differ in size".into()));
        }
        counts[l] += 1;
        for (s, &v) in sums[l].iter_mut().zip(m.iter()) {
            *s += v as f64;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| (v / n as f64) as f32).collect()))
        .collect())
}

/// One per-instance measurement. Missing values serialize as an empty field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub instance: usize,
    pub metric: String,
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// `1.645 · sd / √n`, with the population (1/n) standard deviation.
    pub ci90_half_width: f64,
    pub sd: f64,
    /// Finite values aggregated.
    pub n: usize,
    /// Missing or non-finite values left out.
    pub excluded: usize,
}

/// Mean and 90% interval of finite values; fewer than two is an error.
pub fn summarize(values: &[Option<f64>]) -> Result<Aggregate> {
    let finite: Vec<f64> = values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    let n = finite.len();
    if n < 2 {
        return Err(Error::Invalid(format!("aggregation needs at least 2 finite values, got {n}")));
    }
    let mean = finite.iter().sum::<f64>() / n as f64;
    let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    Ok(Aggregate { mean, ci90_half_width: Z90 * sd / (n as f64).sqrt(), sd, n, excluded: values.len() - n })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub run_id: String,
    pub method: String,
    pub explanation: Option<String>,
    pub dataset: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: RunMetadata,
    pub aggregates: BTreeMap<String, Aggregate>,
}

/// Aggregates rows per metric name. Rows are grouped, so order is irrelevant
/// up to floating-point summation order, which is fixed by sorting on
/// instance first.
pub fn aggregate(meta: RunMetadata, rows: &[MetricRow]) -> Result<MetricsReport> {
    let mut by_metric: BTreeMap<&str, Vec<(usize, Option<f64>)>> = BTreeMap::new();
    for r in rows {
        by_metric.entry(&r.metric).or_default().push((r.instance, r.value));
    }
    let mut aggregates = BTreeMap::new();
    for (name, mut vals) in by_metric {
        vals.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal)));
        let v: Vec<Option<f64>> = vals.into_iter().map(|x| x.1).collect();
        aggregates.insert(name.to_string(), summarize(&v)?);
    }
    Ok(MetricsReport { meta, aggregates })
}

/// Paired comparison `b − a` over instances measured in both runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub mean_diff: f64,
    pub ci90_half_width: f64,
    pub n: usize,
    /// Lower bound of the 90% interval is above zero.
    pub positive: bool,
}

pub fn paired_difference(a: &[f64], b: &[f64]) -> Result<PairedComparison> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples of {} and {}", a.len(), b.len())));
    }
    let d: Vec<Option<f64>> = a.iter().zip(b).map(|(x, y)| Some(y - x)).collect();
    let s = summarize(&d)?;
    Ok(PairedComparison {
        mean_diff: s.mean,
        ci90_half_width: s.ci90_half_width,
        n: s.n,
        positive: s.mean - s.ci90_half_width > 0.0,
    })
}

/// Values of `metric` keyed by instance.
pub fn metric_by_instance(rows: &[MetricRow], metric: &str) -> BTreeMap<usize, f64> {
    rows.iter().filter(|r| r.metric == metric).filter_map(|r| r.value.map(|v| (r.instance, v))).collect()
}

/// Paired comparison of `metric` between two runs on their shared instances.
pub fn compare_runs(a: &[MetricRow], b: &[MetricRow], metric: &str) -> Result<PairedComparison> {
    let ma = metric_by_instance(a, metric);
    let mb = metric_by_instance(b, metric);
    let (xs, ys): (Vec<f64>, Vec<f64>) = ma.iter().filter_map(|(i, &x)| mb.get(i).map(|&y| (x, y))).unzip();
    paired_difference(&xs, &ys)
}

pub fn write_rows_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Load { path: path.into(), reason: e.to_string() })?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Load { path: path.into(), reason: e.to_string() })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Load { path: path.into(), reason: e.to_string() })?;
    r.deserialize().map(|row| row.map_err(|e| Error::Load { path: path.into(), reason: e.to_string() })).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(h: usize, w: usize, v: Vec<f32>) -> ImageTensor {
        ImageTensor::new(h, w, 1, v).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
        img(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect())
    }

    #[test]
    fn pixelwise_closed_forms() {
        let z = ImageTensor::zeros(4, 4, 1);
        let o = img(4, 4, vec![1.0; 16]);
        assert_eq!(pixelwise_similarity(&z, &z).unwrap(), 1.0);
        assert_eq!(pixelwise_similarity(&z, &o).unwrap(), 0.0);
        let mut one = vec![0.0; 16];
        one[5] = 1.0;
        assert!((pixelwise_similarity(&z, &img(4, 4, one)).unwrap() - (1.0 - 1.0 / 16.0)).abs() < 1e-12);
    }

    #[test]
    fn psnr_closed_forms() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert!((psnr_from_mse(0.005) - psnr_from_mse(0.01) - 10.0 * 2f64.log10()).abs() < 1e-12);
        let z = ImageTensor::zeros(2, 2, 1);
        assert_eq!(psnr(&z, &z).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_identity_symmetry_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 12, 12);
        let b = random(&mut rng, 12, 12);
        assert_eq!(ssim(&a, &a, 1.5).unwrap(), 1.0);
        assert_eq!(ssim(&a, &b, 1.5).unwrap(), ssim(&b, &a, 1.5).unwrap());
        assert!(ssim(&a, &b, 1.5).unwrap() < 0.5);
        assert!(ssim(&a, &b, 0.0).is_err());
        assert!(ssim(&a, &ImageTensor::zeros(4, 4, 1), 1.5).is_err());
    }

    #[test]
    fn ssim_drops_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 16, 16);
        let noisy = |s: f32, rng: &mut ChaCha8Rng| {
            let v: Vec<f32> =
                a.pixels().iter().map(|&p| (p + s * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0)).collect();
            img(16, 16, v)
        };
        let small = ssim(&a, &noisy(0.1, &mut rng), 1.5).unwrap();
        let large = ssim(&a, &noisy(0.8, &mut rng), 1.5).unwrap();
        assert!(1.0 > small && small > large);
    }

    #[test]
    fn embedding_similarity_closed_forms() {
        assert_eq!(embedding_similarity_from(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert!((embedding_similarity_from(&[0.0, 0.0], &[1.0, 0.0]).unwrap() - (-0.5f64).exp()).abs() < 1e-12);
        assert!((embedding_similarity_from(&[0.0, 0.0], &[1.0, 1.0]).unwrap() - (-1f64).exp()).abs() < 1e-12);
        assert!(
            embedding_similarity_from(&[0.0], &[2.0]).unwrap() < embedding_similarity_from(&[0.0], &[1.0]).unwrap()
        );
    }

    #[test]
    fn relevance_cases() {
        let mask = [true, true, false, false];
        assert_eq!(explanation_relevance(&[1.0, 0.8, 0.0, 0.1], &mask).unwrap(), 1.0);
        assert_eq!(explanation_relevance(&[0.0, 0.0, 1.0, 1.0], &mask).unwrap(), 0.0);
        assert_eq!(explanation_relevance(&[1.0, 0.0, 0.0, 0.0], &mask).unwrap(), 0.5);
        assert_eq!(explanation_relevance(&[0.0; 4], &[false; 4]).unwrap(), 1.0);
    }

    #[test]
    fn typicalness_cases() {
        let m = [0.1, 0.5, 0.9, 0.2];
        assert!((explanation_typicalness(&m, &m).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f32> = m.iter().map(|v| 1.0 - v).collect();
        assert!((explanation_typicalness(&m, &neg).unwrap().unwrap() + 1.0).abs() < 1e-6);
        assert_eq!(explanation_typicalness(&[0.3; 4], &[0.3; 4]).unwrap(), None);
    }

    #[test]
    fn typicalness_of_independent_maps_averages_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sum = 0.0;
        for _ in 0..1000 {
            let a: Vec<f32> = (0..64).map(|_| rng.random()).collect();
            let b: Vec<f32> = (0..64).map(|_| rng.random()).collect();
            sum += explanation_typicalness(&a, &b).unwrap().unwrap();
        }
        assert!((sum / 1000.0).abs() < 0.02);
    }

    #[test]
    fn mask_downsamples_foreground() {
        let mut v = vec![0.0; 16];
        v[0] = 0.7;
        let m = foreground_mask(&img(4, 4, v), 2, 2);
        assert_eq!(m, vec![true, false, false, false]);
    }

    #[test]
    fn class_means_are_keyed_by_label() {
        let a = [1.0f32, 0.0];
        let b = [0.0f32, 1.0];
        let c = [3.0f32, 0.0];
        let means = class_mean_maps(&[&a, &b, &c], &[0, 1, 0], 3).unwrap();
        assert_eq!(means[0], Some(vec![2.0, 0.0]));
        assert_eq!(means[1], Some(vec![0.0, 1.0]));
        assert_eq!(means[2], None);
    }

    #[test]
    fn aggregate_closed_forms() {
        let s = summarize(&[Some(0.0), Some(1.0)]).unwrap();
        assert_eq!(s.mean, 0.5);
        assert!((s.ci90_half_width - 1.645 * 0.5 / 2f64.sqrt()).abs() < 1e-12);
        assert!((s.ci90_half_width - 0.5816).abs() < 1e-4);
        assert_eq!(summarize(&[Some(0.3); 5]).unwrap().ci90_half_width, 0.0);
        assert!(summarize(&[Some(1.0)]).is_err());
        let with_missing = summarize(&[Some(1.0), None, Some(f64::INFINITY), Some(3.0)]).unwrap();
        assert_eq!((with_missing.n, with_missing.excluded, with_missing.mean), (2, 2, 2.0));
    }

    #[test]
    fn paired_difference_detects_shift() {
        let a: Vec<f64> = (0..50).map(|i| (i % 7) as f64 / 7.0).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        let p = paired_difference(&a, &b).unwrap();
        assert!(p.positive && (p.mean_diff - 0.1).abs() < 1e-12);
        assert!(!paired_difference(&b, &a).unwrap().positive);
    }

    #[test]
    fn csv_round_trip_with_missing_values() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            MetricRow { run_id: "r".into(), instance: 0, metric: "ssim".into(), value: Some(0.25) },
            MetricRow { run_id: "r".into(), instance: 1, metric: "typicalness".into(), value: None },
        ];
        let p = dir.path().join("m.csv");
        write_rows_csv(&p, &rows).unwrap();
        assert_eq!(read_rows_csv(&p).unwrap(), rows);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("run_id,instance,metric,value\n"));
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(mut v in prop::collection::vec(0.0f64..1.0, 2..40), seed in 0u64..1000) {
            let rows = |v: &[f64]| -> Vec<MetricRow> {
                v.iter().enumerate().map(|(i, &x)| MetricRow { run_id: "r".into(), instance: i, metric: "m".into(), value: Some(x) }).collect()
            };
            let mut shuffled = rows(&v);
            let a = aggregate(RunMetadata::default(), &shuffled).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng);
            let b = aggregate(RunMetadata::default(), &shuffled).unwrap();
            prop_assert_eq!(a, b);
            v.clear();
        }

        #[test]
        fn similarities_are_bounded_and_symmetric(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, 8, 8);
            let b = random(&mut rng, 8, 8);
            let p = pixelwise_similarity(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert_eq!(p, pixelwise_similarity(&b, &a).unwrap());
            let s = ssim(&a, &b, 1.5).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert_eq!(s, ssim(&b, &a, 1.5).unwrap());
        }

        #[test]
        fn relevance_is_bounded(cam in prop::collection::vec(0.0f32..1.0, 16), mask in prop::collection::vec(any::<bool>(), 16)) {
            let r = explanation_relevance(&cam, &mask).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }
}
