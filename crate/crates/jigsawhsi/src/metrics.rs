//! Classification quality measures: overall accuracy, average accuracy,
//! Cohen's kappa, per-class recall reports, and full-scene class maps.

use std::env;
use std::thread;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::Model;
use crate::io::{ClassMap, HsiCube, LabelRaster};
use crate::nn::{Mode, Tensor4};
use crate::tiler::extract_window;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("confusion matrix has no observations")]
    EmptyMatrix,
    #[error("chance agreement is 1 with imperfect observed agreement; kappa undefined")]
    DegenerateChance,
    #[error("class index {0} out of range for {1} classes")]
    ClassOutOfRange(usize, usize),
}

/// K x K counts with rows indexing ground truth and columns indexing the
/// prediction, plus display names per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let k = class_names.len();
        Self {
            num_classes: k,
            class_names,
            counts: vec![0; k * k],
        }
    }

    /// Numbered names "class 1" .. "class K".
    pub fn with_classes(k: usize) -> Self {
        Self::new((1..=k).map(|i| format!("class {i}")).collect())
    }

    pub fn from_counts(class_names: Vec<String>, counts: Vec<u64>) -> Result<Self, MetricsError> {
        let k = class_names.len();
        if counts.len() != k * k {
            return Err(MetricsError::ClassOutOfRange(counts.len(), k * k));
        }
        Ok(Self {
            num_classes: k,
            class_names,
            counts,
        })
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<(), MetricsError> {
        let k = self.num_classes;
        if truth >= k {
            return Err(MetricsError::ClassOutOfRange(truth, k));
        }
        if predicted >= k {
            return Err(MetricsError::ClassOutOfRange(predicted, k));
        }
        self.counts[truth * k + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|i| self.get(i, i)).sum()
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        (0..self.num_classes).map(|c| self.get(truth, c)).sum()
    }

    pub fn col_total(&self, predicted: usize) -> u64 {
        (0..self.num_classes).map(|r| self.get(r, predicted)).sum()
    }

    fn nonempty(&self) -> Result<(), MetricsError> {
        if self.total() == 0 {
            Err(MetricsError::EmptyMatrix)
        } else {
            Ok(())
        }
    }

    /// 100 * trace / total.
    pub fn overall_accuracy(&self) -> Result<f64, MetricsError> {
        self.nonempty()?;
        Ok(100.0 * self.trace() as f64 / self.total() as f64)
    }

    /// Recall of one truth class, or None when the class has no
    /// observations.
    pub fn class_recall(&self, truth: usize) -> Option<f64> {
        let row = self.row_total(truth);
        if row == 0 {
            None
        } else {
            Some(100.0 * self.get(truth, truth) as f64 / row as f64)
        }
    }

    /// Mean recall over classes that appear in the ground truth.
    pub fn average_accuracy(&self) -> Result<f64, MetricsError> {
        self.nonempty()?;
        let recalls: Vec<f64> = (0..self.num_classes)
            .filter_map(|k| self.class_recall(k))
            .collect();
        Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
    }

    /// 100 * (p_o - p_e) / (1 - p_e) where p_e is the marginal chance
    /// agreement. A single-cell matrix has p_e = 1; kappa is 100 there if
    /// agreement is perfect and undefined otherwise.
    pub fn cohen_kappa(&self) -> Result<f64, MetricsError> {
        self.nonempty()?;
        let total = self.total() as f64;
        let p_o = self.trace() as f64 / total;
        let p_e = (0..self.num_classes)
            .map(|k| self.row_total(k) as f64 * self.col_total(k) as f64)
            .sum::<f64>()
            / (total * total);
        if (1.0 - p_e).abs() < 1e-12 {
            return if (p_o - 1.0).abs() < 1e-12 {
                Ok(100.0)
            } else {
                Err(MetricsError::DegenerateChance)
            };
        }
        Ok(100.0 * (p_o - p_e) / (1.0 - p_e))
    }

    /// One line per class: recall to four decimals, a colon, the class
    /// name. Classes absent from the ground truth print "n/a".
    pub fn per_class_report(&self) -> String {
        let mut out = String::new();
        for k in 0..self.num_classes {
            match self.class_recall(k) {
                Some(r) => out.push_str(&format!("{:8.4} : {}\n", r, self.class_names[k])),
                None => out.push_str(&format!("{:>8} : {}\n", "n/a", self.class_names[k])),
            }
        }
        out
    }

    /// Counts as CSV: header row of predicted-class names, then one row
    /// per truth class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth\\predicted");
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for r in 0..self.num_classes {
            out.push_str(&self.class_names[r]);
            for c in 0..self.num_classes {
                out.push_str(&format!(",{}", self.get(r, c)));
            }
            out.push('\n');
        }
        out
    }
}

/// Summary block (two decimals), per-class recalls, then the raw counts
/// as CSV.
pub fn render_report(cm: &ConfusionMatrix) -> Result<String, MetricsError> {
    let oa = cm.overall_accuracy()?;
    let kappa = cm.cohen_kappa()?;
    let aa = cm.average_accuracy()?;
    let mut out = String::new();
    out.push_str(&format!("OA:    {oa:.2}\n"));
    out.push_str(&format!("Kappa: {kappa:.2}\n"));
    out.push_str(&format!("AA:    {aa:.2}\n"));
    out.push('\n');
    out.push_str(&cm.per_class_report());
    out.push('\n');
    out.push_str(&cm.to_csv());
    Ok(out)
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn worker_count() -> usize {
    env::var("JIGSAWHSI_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn classify_pixels(model: &Model<f32>, cube: &HsiCube, pixels: &[(usize, usize)]) -> Vec<u16> {
    let s = model.spec.input_size;
    let c = model.spec.input_channels;
    let mut out = Vec::with_capacity(pixels.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in pixels.chunks(256) {
        let mut data = Vec::with_capacity(chunk.len() * s * s * c);
        for &(row, col) in chunk {
            data.extend(extract_window(cube, row, col, s));
        }
        let batch = Tensor4::from_vec(chunk.len(), s, s, c, data);
        let pass = model
            .forward(&batch, Mode::Infer, &mut rng)
            .expect("scene window shape matches the model spec");
        for i in 0..chunk.len() {
            out.push(argmax(pass.probs.row(i)) as u16 + 1);
        }
    }
    out
}

/// Predicts a class for every pixel of the reduced cube (or only labeled
/// pixels when `mask_background` is set; background stays 0). Work splits
/// across `JIGSAWHSI_THREADS` workers; the map is assembled in raster
/// order regardless of the worker count.
pub fn classify_scene(
    model: &Model<f32>,
    cube: &HsiCube,
    labels: Option<&LabelRaster>,
    mask_background: bool,
) -> ClassMap {
    let mut map = ClassMap {
        height: cube.height,
        width: cube.width,
        labels: vec![0; cube.height * cube.width],
    };
    let pixels: Vec<(usize, usize)> = (0..cube.height)
        .flat_map(|r| (0..cube.width).map(move |c| (r, c)))
        .filter(|&(r, c)| {
            !mask_background || labels.map(|l| l.get(r, c) != 0).unwrap_or(true)
        })
        .collect();
    if pixels.is_empty() {
        return map;
    }

    let workers = worker_count().min(pixels.len());
    let per = pixels.len().div_ceil(workers);
    let predicted: Vec<u16> = if workers == 1 {
        classify_pixels(model, cube, &pixels)
    } else {
        let mut parts: Vec<Vec<u16>> = Vec::new();
        thread::scope(|scope| {
            let handles: Vec<_> = pixels
                .chunks(per)
                .map(|chunk| scope.spawn(move || classify_pixels(model, cube, chunk)))
                .collect();
            for h in handles {
                parts.push(h.join().expect("scene classification worker panicked"));
            }
        });
        parts.concat()
    };
    for (&(r, c), &p) in pixels.iter().zip(&predicted) {
        map.labels[r * cube.width + c] = p;
    }
    map
}
