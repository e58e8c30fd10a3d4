//! Randomized gradient-check suites: one per graph op, plus one through the
//! full augmentation, backbone, and loss pipeline. Draws landing on a kink
//! are resampled, never silently passed.

use crate::augment::{build_masks, compose_mask, compose_replace, GridSpec, Region};
use crate::backbone::{self, ParamNodes, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Padding};
use crate::losses;
use crate::rng::{seed_rng, Prng, TAG_GRADCHECK};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn random_tensor(rng: &mut Prng, shape: &[usize], half_range: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * half_range).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("finite draw")
}

/// Reduces any op output to a scalar loss through a random weighting, so
/// every output element influences the loss differently.
fn readout(g: &mut Graph, out: NodeId, rng: &mut Prng) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    if shape.is_empty() {
        return g.scale(out, rng.random::<f64>() + 0.5);
    }
    let w = g.constant(random_tensor(rng, &shape, 1.0));
    let weighted = g.mul(out, w)?;
    g.sum(weighted)
}

type Builder = fn(&mut Graph, &mut Prng) -> Result<NodeId>;

fn build_add(g: &mut Graph, rng: &mut Prng) -> Result<NodeId> {
    let a = g.input("a", random_tensor(rng, &[2, 3], 1.0))?;
    let b = g.input("b", random_tensor(rng, &[2, 3], 1.0))?;
    g.add(a, b)
}

fn build_sub(g: &mut Graph, rng: &mut Prng) -> Result<NodeId> {
    let a = g.input("a", random_tensor(rng, &[2, 3], 1.0))?;
    let b = g.input("b", random_tensor(rng, &[2, 3], 1.0))?;
    g.sub(a, b)
}

fn build_mul(g: &mut Graph, rng: &mut Prng) -> Result<NodeId> {
    let a = g.input("a", random_tensor(rng, &[2, 3], 1.0))?;
    let b = g.input("b", random_tensor(rng, &[2, 3], 1.0))?;
    g.mul(a, b)
}

fn build_matmul(g: &mut Graph, rng: &mut Prng) -> Result<NodeId> {
    let a = g.input("a", random_tensor(rng, &[3, 4], 1.0))?;
    let b = g.input("b", random_tensor(rng, &[4, 2], 1.0))?;
    g.matmul(a, b)
}

fn build_conv2d_same(g: &mut Graph, rng: &mut Prng) -> Result<NodeId> {
    let image = g.input("image", random_tensor(rng, &[5, 5, 2], 1.0))?;
    let kernel = g.input("kernel", random_tensor(rng, &[3, 3, 2, 3], 1.0))?;
    let bias = g.input("bias", random_tensor(rng, &[3], 1.0))?;
    g.conv2d(image, kernel, Some(bias), Padding::Same)
}

fn build_conv2d_valid(g: &mut Graph, rng: &mut Prng) -> Result<NodeId> {
    let image = g.input("image", random_tensor(rng, &[5, 5, 2], 1.0))?;
    let kernel = g.input("kernel", random_tensor(rng, &[3, 3, 2, 3], 1.0))?;
    g.conv2d(image, kernel, None, Padding::Valid)
}

fn build_relu(g: &mut Graph, rng: &mut Prng) -> Result<NodeId> {
    let x = g.input("x", random_tensor(rng, &[3, 3], 1.0))?;
    g.relu(x)
}

fn build_maxpool2(g: &mut Graph, rng: &mut Prng) -> Result<NodeId> {
    let x = g.input("x", random_tensor(rng, &[4, 4, 2], 1.0))?;
    g.maxpool2(x)
}

fn build_global_avg_pool(g: &mut Graph, rng: &mut Prng) -> Result<NodeId> {
    let x = g.input("x", random_tensor(rng, &[4, 4, 3], 1.0))?;
    g.global_avg_pool(x)
}

fn build_dot(g: &mut Graph, rng: &mut Prng) -> Result<NodeId> {
    let a = g.input("a", random_tensor(rng, &[6], 1.0))?;
    let b = g.input("b", random_tensor(rng, &[6], 1.0))?;
    g.dot(a, b)
}

fn build_l2_norm(g: &mut Graph, rng: &mut Prng) -> Result<NodeId> {
    let mut x = random_tensor(rng, &[5], 1.0);
    x.data_mut()[0] += 2.0;
    let x = g.input("x", x)?;
    g.l2_norm(x, 1e-8)
}

fn build_scalar_div(g: &mut Graph, rng: &mut Prng) -> Result<NodeId> {
    let a = g.input("a", random_tensor(rng, &[], 1.0))?;
    let s = g.input("s", Tensor::scalar(rng.random::<f64>() + 0.5)?)?;
    g.scalar_div(a, s)
}

fn build_log_softmax(g: &mut Graph, rng: &mut Prng) -> Result<NodeId> {
    let x = g.input("x", random_tensor(rng, &[5], 2.0))?;
    g.log_softmax(x)
}

fn build_gather(g: &mut Graph, rng: &mut Prng) -> Result<NodeId> {
    let x = g.input("x", random_tensor(rng, &[5], 2.0))?;
    let index = rng.random_range(0..5);
    g.gather(x, index)
}

fn build_sum(g: &mut Graph, rng: &mut Prng) -> Result<NodeId> {
    let x = g.input("x", random_tensor(rng, &[3, 4], 1.0))?;
    g.sum(x)
}

fn build_scale(g: &mut Graph, rng: &mut Prng) -> Result<NodeId> {
    let x = g.input("x", random_tensor(rng, &[2, 3], 1.0))?;
    g.scale(x, rng.random::<f64>() * 2.0 - 1.0)
}

const OPS: [(&str, Builder); 16] = [
    ("add", build_add),
    ("sub", build_sub),
    ("mul", build_mul),
    ("matmul", build_matmul),
    ("conv2d_same", build_conv2d_same),
    ("conv2d_valid", build_conv2d_valid),
    ("relu", build_relu),
    ("maxpool2", build_maxpool2),
    ("global_avg_pool", build_global_avg_pool),
    ("dot", build_dot),
    ("l2_norm", build_l2_norm),
    ("scalar_div", build_scalar_div),
    ("log_softmax", build_log_softmax),
    ("gather", build_gather),
    ("sum", build_sum),
    ("scale", build_scale),
];

/// Runs `trials` non-degenerate random checks of one builder. Kinked draws
/// are skipped and redrawn, up to 50 attempts per completed trial.
fn run_trials(
    name: &str,
    op_index: u64,
    builder: Builder,
    trials: usize,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<OpReport> {
    let mut done = 0usize;
    let mut attempt = 0u64;
    let mut max_rel_err = 0.0f64;
    let mut passed = true;
    while done < trials {
        if attempt >= trials as u64 * 50 {
            return Err(Error::DegeneratePoint {
                node: 0,
                op: name.to_string(),
                detail: format!("{} of {} trials kept landing on kinks", trials - done, trials),
            });
        }
        let mut rng = seed_rng(&[seed, TAG_GRADCHECK, op_index, attempt]);
        attempt += 1;
        let mut g = Graph::new();
        let out = builder(&mut g, &mut rng)?;
        let loss = readout(&mut g, out, &mut rng)?;
        match g.grad_check(loss, step, tolerance) {
            Ok(report) => {
                max_rel_err = max_rel_err.max(report.max_rel_err());
                passed &= report.passed();
                done += 1;
            }
            Err(Error::DegeneratePoint { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(OpReport { op: name.to_string(), trials, max_rel_err, passed })
}

/// Checks every op in the catalog. Reports in catalog order.
pub fn check_all_ops(
    trials: usize,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<Vec<OpReport>> {
    OPS.iter()
        .enumerate()
        .map(|(i, &(name, builder))| {
            run_trials(name, i as u64, builder, trials, step, tolerance, seed)
        })
        .collect()
}

/// One check through the whole training computation: a composed triplet,
/// three backbone passes with shared parameters, and the combined loss, with
/// gradients taken against every parameter tensor.
///
/// Kink detection inspects the unperturbed forward pass, which is exact for
/// the per-op checks but not here: a weight perturbation reaches downstream
/// relu inputs amplified by the layers in between, so a unit several steps
/// from zero can still flip sign during differencing. That straddle
/// probability scales with the step, so this check wants a smaller step than
/// the per-op suite (1e-5 is comfortable for a 1e-3 tolerance).
pub fn check_pipeline(q: usize, step: f64, tolerance: f64, seed: u64) -> Result<OpReport> {
    let n = 4usize;
    let side = 16usize;
    let k = 3usize;
    let mut attempt = 0u64;
    loop {
        if attempt >= 50 {
            return Err(Error::DegeneratePoint {
                node: 0,
                op: "pipeline".to_string(),
                detail: "50 draws in a row landed on kinks".to_string(),
            });
        }
        let mut rng = seed_rng(&[seed, TAG_GRADCHECK, 100 + q as u64, attempt]);
        attempt += 1;

        let original = random_tensor(&mut rng, &[side, side, 3], 1.0);
        let donor = random_tensor(&mut rng, &[side, side, 3], 1.0);
        let grid = GridSpec::for_image(side, side, n)?;
        let r = rng.random_range(0..=n - q);
        let c = rng.random_range(0..=n - q);
        let masks = build_masks(Region { r, c, q }, grid, 3)?;
        let replaced = compose_replace(&original, &donor, &masks)?;
        let masked = compose_mask(&original, &masks)?;

        let mut g = Graph::new();
        let shapes: [&[usize]; 8] = [
            &[3, 3, 3, 8],
            &[8],
            &[3, 3, 8, 16],
            &[16],
            &[3, 3, 16, 32],
            &[32],
            &[32, k],
            &[k],
        ];
        let mut ids = [None; 8];
        for i in 0..8 {
            ids[i] = Some(g.input(PARAM_NAMES[i], random_tensor(&mut rng, shapes[i], 0.3))?);
        }
        let params = ParamNodes { ids: ids.map(|id| id.unwrap()) };
        let node_f = g.constant(original);
        let node_r = g.constant(replaced);
        let node_m = g.constant(masked);
        let fwd_f = backbone::forward_on_graph(&mut g, &params, node_f)?;
        let fwd_r = backbone::forward_on_graph(&mut g, &params, node_r)?;
        let fwd_m = backbone::forward_on_graph(&mut g, &params, node_m)?;
        let label = rng.random_range(0..k);
        let loss = losses::total_loss(
            &mut g,
            [fwd_f.logits, fwd_r.logits, fwd_m.logits],
            [fwd_f.features, fwd_r.features, fwd_m.features],
            label,
            1e-8,
            true,
            1.0,
            false,
        )?;
        match g.grad_check(loss.total, step, tolerance) {
            Ok(report) => {
                return Ok(OpReport {
                    op: format!("pipeline_q{}", q),
                    trials: 1,
                    max_rel_err: report.max_rel_err(),
                    passed: report.passed(),
                });
            }
            Err(Error::DegeneratePoint { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
}
