use pyo3::prelude::*;

#[pymodule]
fn mfsolve_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
