//! Modality encoders: dialogue/response text, image projections and the
//! style embedding table.

pub mod image;
pub mod text;
pub mod transformer;

pub use image::{init_image_linear, init_image_mlp, project_image_generative, project_image_retrieval};
pub use text::{encode_pooled, encode_pooled_value, encode_states, init_text_encoder, TextEncoderConfig};
pub use transformer::TransformerConfig;

use crate::diff::{Float, Graph, Initializer, ParameterStore, Var};
use crate::error::{Error, Result};

pub fn init_style_table<T: Float>(store: &mut ParameterStore<T>, init: &mut Initializer, prefix: &str, n_styles: usize, dim: usize) -> Result<()> {
    store.insert(format!("{prefix}.table"), init.embedding(n_styles, dim))
}

/// Row `style_index` of the style table as a vector of width N.
pub fn encode_style<T: Float>(g: &mut Graph<T>, store: &ParameterStore<T>, prefix: &str, style_index: usize) -> Result<Var> {
    let table = g.param(store, &format!("{prefix}.table"))?;
    let rows = g.value(table).rows();
    if style_index >= rows {
        return Err(Error::Catalog(format!("style index {style_index} (table has {rows} rows)")));
    }
    let row = g.gather_rows(table, &[style_index])?;
    let n = g.value(row).cols();
    g.reshape(row, vec![n])
}
