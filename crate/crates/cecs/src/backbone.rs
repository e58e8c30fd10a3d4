//! Tiny convolutional backbone and linear classifier head, plus plain
//! class-activation-map export. Architecture: conv3x3(8) relu pool2,
//! conv3x3(16) relu pool2, conv3x3(32) relu, global average pool, fc.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Padding};
use crate::rng::Prng;
use crate::tensor::Tensor;

/// Width of the pooled feature vector (channels of the last conv stage).
pub const FEATURE_WIDTH: usize = 32;

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

/// Names paired with tensors, in the canonical parameter order used
/// everywhere (graph registration, optimizer state, serialization).
pub const PARAM_NAMES: [&str; 8] =
    ["conv1_k", "conv1_b", "conv2_k", "conv2_b", "conv3_k", "conv3_b", "fc_w", "fc_b"];

impl ModelParams {
    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.conv1.kernel,
            &self.conv1.bias,
            &self.conv2.kernel,
            &self.conv2.bias,
            &self.conv3.kernel,
            &self.conv3.bias,
            &self.fc_w,
            &self.fc_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.conv1.kernel,
            &mut self.conv1.bias,
            &mut self.conv2.kernel,
            &mut self.conv2.bias,
            &mut self.conv3.kernel,
            &mut self.conv3.bias,
            &mut self.fc_w,
            &mut self.fc_b,
        ]
    }

    pub fn input_channels(&self) -> usize {
        self.conv1.kernel.shape()[2]
    }

    pub fn category_count(&self) -> usize {
        self.fc_w.shape()[1]
    }
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub features: Tensor,
    pub logits: Tensor,
    pub last_maps: Tensor,
}

/// Kernels drawn uniformly from +-sqrt(3/fan_in) (variance 1/fan_in),
/// biases exactly zero.
pub fn init_params(input_channels: usize, k: usize, rng: &mut Prng) -> Result<ModelParams> {
    if k < 2 {
        return Err(Error::InvalidCategoryCount(k));
    }
    if input_channels == 0 {
        return Err(Error::ChannelMismatch { expected: 1, got: 0 });
    }
    let conv = |cin: usize, cout: usize, rng: &mut Prng| -> Result<ConvLayer> {
        let fan_in = 3 * 3 * cin;
        let bound = (3.0 / fan_in as f64).sqrt();
        let data = (0..3 * 3 * cin * cout).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(ConvLayer {
            kernel: Tensor::from_vec(vec![3, 3, cin, cout], data)?,
            bias: Tensor::zeros(&[cout]),
        })
    };
    let conv1 = conv(input_channels, 8, rng)?;
    let conv2 = conv(8, 16, rng)?;
    let conv3 = conv(16, FEATURE_WIDTH, rng)?;
    let bound = (3.0 / FEATURE_WIDTH as f64).sqrt();
    let fc_data = (0..FEATURE_WIDTH * k).map(|_| rng.random_range(-bound..bound)).collect();
    Ok(ModelParams {
        conv1,
        conv2,
        conv3,
        fc_w: Tensor::from_vec(vec![FEATURE_WIDTH, k], fc_data)?,
        fc_b: Tensor::zeros(&[k]),
    })
}

/// Graph handles for the registered parameters, in PARAM_NAMES order.
#[derive(Clone, Copy, Debug)]
pub struct ParamNodes {
    pub ids: [NodeId; 8],
}

/// Registers every parameter as a named graph input.
pub fn insert_params(g: &mut Graph, params: &ModelParams) -> Result<ParamNodes> {
    let tensors = params.tensors();
    let mut ids = [None; 8];
    for i in 0..8 {
        ids[i] = Some(g.input(PARAM_NAMES[i], tensors[i].clone())?);
    }
    Ok(ParamNodes { ids: ids.map(|id| id.unwrap()) })
}

/// Node handles for one image's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub last_maps: NodeId,
    pub features: NodeId,
    pub logits: NodeId,
}

fn check_image_shape(params_cin: usize, image: &Tensor) -> Result<()> {
    if image.rank() != 3 {
        return Err(Error::InvalidTensor(format!(
            "backbone input must be rank-3 [h,w,c], got {:?}",
            image.shape()
        )));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c != params_cin {
        return Err(Error::ChannelMismatch { expected: params_cin, got: c });
    }
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidTensor(format!(
            "image sides {}x{} must be nonzero multiples of 4 (two pooling stages)",
            h, w
        )));
    }
    Ok(())
}

/// Appends the backbone to the graph for one image node. Call repeatedly
/// with the same ParamNodes to share weights across triplet members.
pub fn forward_on_graph(
    g: &mut Graph,
    params: &ParamNodes,
    image: NodeId,
) -> Result<ForwardNodes> {
    let [c1k, c1b, c2k, c2b, c3k, c3b, fc_w, fc_b] = params.ids;
    let c1 = g.conv2d(image, c1k, Some(c1b), Padding::Same)?;
    let r1 = g.relu(c1)?;
    let p1 = g.maxpool2(r1)?;
    let c2 = g.conv2d(p1, c2k, Some(c2b), Padding::Same)?;
    let r2 = g.relu(c2)?;
    let p2 = g.maxpool2(r2)?;
    let c3 = g.conv2d(p2, c3k, Some(c3b), Padding::Same)?;
    let last_maps = g.relu(c3)?;
    let features = g.global_avg_pool(last_maps)?;
    let projected = g.matmul(features, fc_w)?;
    let logits = g.add(projected, fc_b)?;
    Ok(ForwardNodes { last_maps, features, logits })
}

/// One-off forward pass on a throwaway graph.
pub fn extract_features(params: &ModelParams, image: &Tensor) -> Result<ForwardResult> {
    check_image_shape(params.input_channels(), image)?;
    let mut g = Graph::new();
    let nodes = insert_params(&mut g, params)?;
    let img = g.constant(image.clone());
    let fwd = forward_on_graph(&mut g, &nodes, img)?;
    Ok(ForwardResult {
        features: g.value(fwd.features).clone(),
        logits: g.value(fwd.logits).clone(),
        last_maps: g.value(fwd.last_maps).clone(),
    })
}

/// relu of the classifier-weighted sum over the final maps, min-max
/// normalized to [0,1]. A uniformly non-positive sum yields an all-zero map.
pub fn activation_map(
    result: &ForwardResult,
    params: &ModelParams,
    class_idx: usize,
) -> Result<Tensor> {
    let k = params.category_count();
    if class_idx >= k {
        return Err(Error::ClassOutOfRange { class: class_idx, k });
    }
    let maps = &result.last_maps;
    let (h, w, d) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    let mut heat = Tensor::zeros(&[h, w]);
    let fc = params.fc_w.data();
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for ch in 0..d {
                s += fc[ch * k + class_idx] * maps.at3(y, x, ch);
            }
            heat.data_mut()[y * w + x] = s.max(0.0);
        }
    }
    let max = heat.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = heat.data().iter().cloned().fold(f64::INFINITY, f64::min);
    if max > min {
        for v in heat.data_mut() {
            *v = (*v - min) / (max - min);
        }
    } else {
        for v in heat.data_mut() {
            *v = 0.0;
        }
    }
    Ok(heat)
}
