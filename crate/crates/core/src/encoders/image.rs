use crate::data::features::IMAGE_FEATURE_DIM;
use crate::diff::{Float, Graph, Initializer, ParameterStore, Tensor, Var};
use crate::encoders::transformer::{init_linear, linear};
use crate::error::{Error, Result};

fn feature_input<T: Float>(g: &mut Graph<T>, feat: &[f32]) -> Result<Var> {
    if feat.len() != IMAGE_FEATURE_DIM {
        return Err(Error::contract(format!(
            "image projector expects {IMAGE_FEATURE_DIM} inputs, got {}",
            feat.len()
        )));
    }
    g.constant(Tensor::vector(feat.iter().map(|&x| T::from_f64_lossy(x as f64)).collect()))
}

/// Retrieval image encoder: one ReLU hidden layer, then a linear layer to
/// the shared retrieval width.
pub fn init_image_mlp<T: Float>(store: &mut ParameterStore<T>, init: &mut Initializer, prefix: &str, hidden: usize, out: usize) -> Result<()> {
    init_linear(store, init, &format!("{prefix}.hidden"), IMAGE_FEATURE_DIM, hidden)?;
    init_linear(store, init, &format!("{prefix}.out"), hidden, out)
}

pub fn project_image_retrieval<T: Float>(g: &mut Graph<T>, store: &ParameterStore<T>, prefix: &str, feat: &[f32]) -> Result<Var> {
    let x = feature_input(g, feat)?;
    let h = linear(g, store, &format!("{prefix}.hidden"), x)?;
    let h = g.relu(h)?;
    linear(g, store, &format!("{prefix}.out"), h)
}

/// Generative image encoder: a single affine map to the decoder's token
/// width.
pub fn init_image_linear<T: Float>(store: &mut ParameterStore<T>, init: &mut Initializer, prefix: &str, out: usize) -> Result<()> {
    init_linear(store, init, prefix, IMAGE_FEATURE_DIM, out)
}

pub fn project_image_generative<T: Float>(g: &mut Graph<T>, store: &ParameterStore<T>, prefix: &str, feat: &[f32]) -> Result<Var> {
    let x = feature_input(g, feat)?;
    linear(g, store, prefix, x)
}
