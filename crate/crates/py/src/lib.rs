use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use emostyle::dataset::{gen_synthetic, Dataset, Split};
use emostyle::encoders::{encode_style as encode, EmotionLabel};
use emostyle::eval::metrics;
use emostyle::image::Image;
use emostyle::pipeline::{Content, SampleSettings, Stylizer};
use emostyle::quantizer::StyleDictionary;
use emostyle::training::{
    pair_samples, run_stage1, run_stage2, style_samples, Arch, TrainConfig, TrainState,
};
use emostyle::{gradsuite, Error};

fn py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn emotion(name: &str) -> PyResult<EmotionLabel> {
    name.parse().map_err(py_err)
}

fn load(path: &str) -> PyResult<Image> {
    Image::load_png(path).map_err(py_err)
}

/// Names of the eight emotions in label order.
#[pyfunction]
fn emotions() -> Vec<&'static str> {
    EmotionLabel::ALL.iter().map(|e| e.name()).collect()
}

/// Writes a synthetic dataset; returns (triplets, mean edge IoU).
#[pyfunction]
#[pyo3(signature = (out, n=2000, styles=2, seed=7))]
fn generate_dataset(out: PathBuf, n: usize, styles: usize, seed: u64) -> PyResult<(usize, f64)> {
    let h = gen_synthetic(&out, n, styles, seed).map_err(py_err)?;
    Ok((h.n_triplets, h.mean_edge_iou))
}

/// Runs one training stage and writes a checkpoint; returns the per-epoch losses.
#[pyfunction]
#[pyo3(signature = (stage, data, out, resume=None, epochs=None, seed=0))]
fn train(
    stage: u8,
    data: PathBuf,
    out: PathBuf,
    resume: Option<PathBuf>,
    epochs: Option<usize>,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let mut cfg = TrainConfig::for_stage(stage);
    cfg.dataset_path = data;
    cfg.seed = seed;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate().map_err(py_err)?;
    let mut state = match &resume {
        Some(p) => {
            let mut s = TrainState::<f32>::load(p).map_err(py_err)?;
            s.reconfigure(cfg.clone());
            s
        }
        None => TrainState::<f32>::new(cfg.clone(), Arch::default()),
    };
    let dataset = Dataset::load(&cfg.dataset_path).map_err(py_err)?;
    let mut losses = Vec::new();
    if stage == 1 {
        let samples = style_samples(&dataset).map_err(py_err)?;
        run_stage1(&mut state, &samples, |l| losses.push(l.losses.clone())).map_err(py_err)?;
    } else {
        let samples = pair_samples::<f32>(&dataset, Split::Train).map_err(py_err)?;
        run_stage2(&mut state, &samples, |l, _| losses.push(l.losses.clone())).map_err(py_err)?;
    }
    state.save(&out).map_err(py_err)?;
    Ok(losses)
}

/// A trained checkpoint.
#[pyclass]
struct Model {
    state: TrainState<f32>,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            state: TrainState::load(&path).map_err(py_err)?,
        })
    }

    /// Prototype entries of one emotion's dictionary.
    fn dictionary(&self, emotion_name: &str) -> PyResult<Vec<Vec<f64>>> {
        let d = self.state.dictionaries().map_err(py_err)?;
        Ok(d.get(emotion(emotion_name)?).entries.clone())
    }

    /// Stylizes a PNG (or a text prompt) and writes the result to `out`.
    #[pyo3(signature = (emotion_name, out, content=None, prompt=None, style_index=None, steps=20, s_style=1.5, s_content=1.0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn stylize(
        &self,
        emotion_name: &str,
        out: PathBuf,
        content: Option<&str>,
        prompt: Option<&str>,
        style_index: Option<usize>,
        steps: usize,
        s_style: f64,
        s_content: f64,
        seed: u64,
    ) -> PyResult<()> {
        let image = content.map(load).transpose()?;
        let c = match (&image, prompt) {
            (Some(img), None) => Content::Image(img),
            (None, Some(p)) => Content::Prompt(p),
            _ => {
                return Err(PyValueError::new_err(
                    "pass exactly one of content or prompt",
                ))
            }
        };
        let s = &self.state;
        let sty = Stylizer::new(
            s.params().map_err(py_err)?,
            s.arch,
            s.dictionaries().map_err(py_err)?,
        );
        let settings = SampleSettings {
            steps,
            s_style,
            s_content,
            seed,
        };
        let img = sty
            .stylize(c, emotion(emotion_name)?, style_index, &settings)
            .map_err(py_err)?;
        img.save_png(&out).map_err(py_err)
    }
}

/// Index and squared distance of the nearest entry; lowest index on ties.
#[pyfunction]
fn quantize(query: Vec<f64>, entries: Vec<Vec<f64>>) -> PyResult<(usize, f64)> {
    let d = StyleDictionary::new(EmotionLabel::ALL[0], entries).map_err(py_err)?;
    if query.len() != d.dim() {
        return Err(PyValueError::new_err(
            "query width differs from the entries",
        ));
    }
    Ok(d.nearest(&query))
}

/// 64-dimensional style feature of a PNG.
#[pyfunction]
fn encode_style(path: &str) -> PyResult<Vec<f64>> {
    Ok(encode(&load(path)?).map_err(py_err)?.0)
}

#[pyfunction]
fn edge_iou(a: &str, b: &str) -> PyResult<f64> {
    metrics::edge_iou(&load(a)?, &load(b)?).map_err(py_err)
}

#[pyfunction]
fn ssim(a: &str, b: &str) -> PyResult<f64> {
    metrics::ssim(&load(a)?, &load(b)?).map_err(py_err)
}

/// Runs the finite-difference suites: (name, max error, tolerance, passed).
#[pyfunction]
#[pyo3(signature = (trials=20))]
fn gradcheck(trials: usize) -> PyResult<Vec<(String, f64, f64, bool)>> {
    Ok(gradsuite::run_all(trials)
        .map_err(py_err)?
        .into_iter()
        .map(|r| {
            let ok = r.passed();
            (r.name, r.max_rel_error, r.tolerance, ok)
        })
        .collect())
}

#[pymodule]
fn emostyle_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(emotions, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(encode_style, m)?)?;
    m.add_function(wrap_pyfunction!(edge_iou, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
