//! Python module `semapix_py`.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use semapix::data::caption::parse_prompt;
use semapix::data::{attribute_oracle, Attributes, World};
use semapix::eval::{evaluate, EvalConfig};
use semapix::model::{route_tokens, Checkpoint, MoTParams, RoutingPolicy};
use semapix::sampler::{generate_image, DecodeConfig};

fn value_err(e: semapix::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn words(a: &Attributes) -> String {
    format!("{} {} {}", a.color.word(), a.shape.word(), a.position.word())
}

/// A trained checkpoint together with the world it was trained in.
#[pyclass(frozen)]
struct Model {
    params: MoTParams<f32>,
    world: World,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::load(std::path::Path::new(path)).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        let world = World::from_checkpoint(&ckpt).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        Ok(Self {
            params: ckpt.params,
            world,
        })
    }

    /// Vocabulary sizes: text, semantic, pixel, total.
    fn vocab(&self) -> (usize, usize, usize, usize) {
        let l = &self.world.layout;
        (l.text, l.sem, l.pix, l.total())
    }

    /// Decodes one image for a "color shape position" prompt. Returns a dict
    /// with the token ids, raw PPM bytes and the oracle's reading.
    #[pyo3(signature = (prompt, temperature=0.0, top_k=0, seed=0))]
    fn generate<'py>(
        &self,
        py: Python<'py>,
        prompt: &str,
        temperature: f64,
        top_k: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let wanted = parse_prompt(prompt).map_err(value_err)?;
        let mut seq = self.world.t2i_prompt(&wanted).map_err(value_err)?.finish();
        route_tokens(&mut seq, RoutingPolicy::default());
        let decode = DecodeConfig {
            temperature,
            top_k,
            seed,
        };
        let g = generate_image(&seq, &self.params, self.world.block_spec(), decode).map_err(value_err)?;
        let img = self
            .world
            .tokenizer
            .decode(&g.block.sem_ids, &g.block.pix_ids)
            .map_err(value_err)?;
        let seen = attribute_oracle(&img);
        let out = PyDict::new(py);
        out.set_item("sem_ids", g.block.sem_ids.clone())?;
        out.set_item("pix_ids", g.block.pix_ids.clone())?;
        out.set_item("ppm", PyBytes::new(py, &img.to_ppm()))?;
        out.set_item("oracle", seen.as_ref().map(words))?;
        out.set_item("match", seen == Some(wanted))?;
        Ok(out)
    }

    /// Held-out metrics under the default routing.
    #[pyo3(signature = (seed=0, samples=None))]
    fn evaluate<'py>(&self, py: Python<'py>, seed: u64, samples: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
        let mut cfg = EvalConfig {
            seed,
            ..EvalConfig::default()
        };
        if let Some(n) = samples {
            cfg.gen_prompts = n;
            cfg.und_samples = n;
            cfg.ppl_samples = n.min(cfg.ppl_samples);
            cfg.edit_samples = n;
        }
        let world = self.world.for_evaluation().map_err(value_err)?;
        let r = py
            .detach(|| evaluate(&self.params, &world, &cfg, RoutingPolicy::default()))
            .map_err(value_err)?;
        let out = PyDict::new(py);
        out.set_item("gen_accuracy", r.gen_accuracy)?;
        out.set_item("und_accuracy", r.und_accuracy)?;
        out.set_item("pixel_ppl", r.pixel_ppl)?;
        out.set_item("edit_accuracy", r.edit_accuracy)?;
        out.set_item("harmonic_und", r.harmonic_und)?;
        Ok(out)
    }
}

/// Parses a prompt into its (color, shape, position) words.
#[pyfunction(name = "parse_prompt")]
fn parse(text: &str) -> PyResult<(String, String, String)> {
    let a = parse_prompt(text).map_err(value_err)?;
    Ok((a.color.word().into(), a.shape.word().into(), a.position.word().into()))
}

#[pymodule]
fn semapix_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(parse, m)?)?;
    Ok(())
}
