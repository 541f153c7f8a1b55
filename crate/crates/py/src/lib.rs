use pyo3::prelude::*;

#[pymodule]
fn styleconv_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
