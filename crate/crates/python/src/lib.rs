//! Python bindings: the command-line front end, overlap metrics and phantom
//! generation.

use clap::Parser;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use udaseg::cli::{execute, Cli};
use udaseg::metrics::{confusion, dice, sensitivity, specificity, EvalClass};
use udaseg::phantom::{generate_source_sample, PhantomSpec, SegMask};

create_exception!(udaseg_py, UdasegError, PyException, "Raised with the error category as `args[0]`.");

fn raise(e: udaseg::Error) -> PyErr {
    UdasegError::new_err((e.category(), e.to_string()))
}

/// Runs one command-line invocation, e.g. `run(["train", "--out", "run"])`,
/// and returns its summary text.
#[pyfunction]
fn run(py: Python<'_>, args: Vec<String>) -> PyResult<String> {
    let cli = Cli::try_parse_from(std::iter::once("udaseg".to_string()).chain(args))
        .map_err(|e| UdasegError::new_err(("usage", e.to_string())))?;
    py.detach(|| execute(&cli)).map_err(raise)
}

/// Dice, sensitivity and specificity per evaluation class for one pair of
/// row-major label masks.
#[pyfunction]
fn slice_metrics<'py>(
    py: Python<'py>,
    pred: Vec<u8>,
    truth: Vec<u8>,
    height: usize,
    width: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let pred = SegMask::new(height, width, pred).map_err(raise)?;
    let truth = SegMask::new(height, width, truth).map_err(raise)?;
    let out = PyDict::new(py);
    for class in EvalClass::ALL {
        let c = confusion(&pred, &truth, class.positive()).map_err(raise)?;
        let row = PyDict::new(py);
        row.set_item("dice", dice(&c))?;
        row.set_item("sen", sensitivity(&c))?;
        row.set_item("spe", specificity(&c))?;
        out.set_item(class.label().to_lowercase(), row)?;
    }
    Ok(out)
}

/// One labeled source phantom of the default spec at `image_size`:
/// `(pixels, labels)` as flat row-major lists.
#[pyfunction]
#[pyo3(signature = (seed, image_size = 128))]
fn source_phantom(seed: u64, image_size: usize) -> PyResult<(Vec<f32>, Vec<u8>)> {
    let spec = PhantomSpec { image_size, ..Default::default() };
    let (x, m) = generate_source_sample(&spec, seed).map_err(raise)?;
    Ok((x.pixels().to_vec(), m.labels().to_vec()))
}

#[pymodule]
fn udaseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("UdasegError", m.py().get_type::<UdasegError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(slice_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(source_phantom, m)?)?;
    Ok(())
}
