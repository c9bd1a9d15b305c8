//! Central-difference check of the backward pass through the whole model,
//! then through a single layer with every coordinate checked.
//!
//! `cargo run --release --example gradient_check`

use srn::graph::{grad_check, CheckOptions, Graph, ParamGroup, ParamStore};
use srn::layers::ConvSpec;
use srn::model::{ModelConfig, SrnModel};
use srn::Tensor;

fn main() -> srn::Result<()> {
    let mut model = SrnModel::new(ModelConfig::default(), 1)?;
    // Biases start at zero, leaving dead units on the ReLU kink.
    for p in model.params.iter_mut().filter(|p| p.name.ends_with(".b")) {
        p.value.fill(0.05);
    }
    let image = Tensor::from_fn(&[32, 32, 3], |k| 0.5 + 0.4 * ((k as f64) * 0.37).sin());
    let targets = Tensor::new(&[8], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0])?;
    let inputs = model.inputs(&image, Some(&targets), None);
    let loss = model.nodes().loss_joint;
    let graph = model.graph().clone();
    let opts = CheckOptions { max_coords_per_param: Some(4), ..CheckOptions::default() };
    let report = grad_check(&graph, &inputs, &mut model.params, loss, &opts)?;
    println!("full model: {report:?}");

    // Logits pooled by their own spatial softmax, every weight checked.
    let mut store = ParamStore::new();
    let spec = ConvSpec { bias: false, ..ConvSpec::pointwise(4, 3) };
    let w = store.add("w", ParamGroup::Att, Tensor::from_fn(&spec.weight_shape(), |k| ((k * 7 % 11) as f64 - 5.0) / 10.0))?;
    let mut g = Graph::new();
    let x = g.input(&[5, 5, 4]);
    let wn = g.param(&store, w);
    let z = g.conv2d(x, wn, None, spec)?;
    let a = g.spatial_softmax(z)?;
    let za = g.mul(z, a)?;
    let s = g.spatial_sum_pool(za)?;
    let t = g.input(&[3]);
    let m = g.input(&[3]);
    let l = g.bce_loss(s, t, m)?;
    let feed = vec![
        Tensor::from_fn(&[5, 5, 4], |k| (k as f64 * 0.11).cos()),
        Tensor::new(&[3], vec![1.0, 0.0, 1.0])?,
        Tensor::full(&[3], 1.0),
    ];
    let report = grad_check(&g, &feed, &mut store, l, &CheckOptions::default())?;
    println!("softmax layer: {report:?}");
    Ok(())
}
