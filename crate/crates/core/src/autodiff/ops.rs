//! Eager tensor-in/tensor-out wrappers around the graph ops.

use super::Graph;
use crate::error::Result;
use crate::tensor::{ConvParams, Tensor};

pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(params.weight.clone());
    let b = params.bias.as_ref().map(|b| g.constant(b.clone()));
    let y = g.conv2d(x, w, b, params.stride, params.padding)?;
    Ok(g.value(y).clone())
}

pub fn softmax(input: &Tensor, axis: usize, mask: Option<&[bool]>) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = g.softmax(x, axis, mask)?;
    Ok(g.value(y).clone())
}

pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = g.global_avg_pool(x)?;
    Ok(g.value(y).clone())
}
