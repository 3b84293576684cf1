//! Finite-difference verification suite for every primitive op and a tiny
//! end-to-end quantized model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{init_params, Example, ForwardOptions, ModelConfig, Net};
use crate::numerics::{grad_check, BoundParams, GradCheckConfig, GradCheckReport, Graph, ParamStore, SeedStreams, Tensor, Var, NEG_LARGE};
use crate::tables::{Category, CategorySet, Kind, Strategy};
use crate::trainer::total_loss;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<SuiteCase>,
    pub passed: bool,
    pub max_rel_err: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// Reduces `y` to a scalar through a fixed random projection so every
/// output coordinate contributes a distinct weight.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = SeedStreams::new(seed).stream("projection");
    let r = rand_tensor(&mut rng, g.shape(y));
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

type OpFn = fn(&mut Graph, &BoundParams) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<(&'static str, Vec<usize>)>, OpFn)> {
    vec![
        ("add_broadcast", vec![("a", vec![3, 4]), ("b", vec![4])], |g, p| g.add(p.var("a")?, p.var("b")?)),
        ("sub", vec![("a", vec![3, 4]), ("b", vec![3, 4])], |g, p| g.sub(p.var("a")?, p.var("b")?)),
        ("mul", vec![("a", vec![3, 4]), ("b", vec![3, 4])], |g, p| g.mul(p.var("a")?, p.var("b")?)),
        ("scale", vec![("a", vec![2, 3])], |g, p| Ok(g.scale(p.var("a")?, -1.7))),
        ("matmul", vec![("a", vec![3, 4]), ("b", vec![4, 2])], |g, p| g.matmul(p.var("a")?, p.var("b")?)),
        ("transpose", vec![("a", vec![3, 4])], |g, p| g.transpose(p.var("a")?)),
        ("concat", vec![("a", vec![2, 3]), ("b", vec![2, 2])], |g, p| {
            g.concat(&[p.var("a")?, p.var("b")?], 1)
        }),
        ("slice", vec![("a", vec![4, 5])], |g, p| g.slice(p.var("a")?, 1, 1, 3)),
        ("gather", vec![("a", vec![5, 3])], |g, p| g.gather(p.var("a")?, &[4, 0, 4, 2])),
        ("sum_axis", vec![("a", vec![3, 4])], |g, p| g.sum_axis(p.var("a")?, 0)),
        ("mean_axis", vec![("a", vec![3, 4])], |g, p| g.mean_axis(p.var("a")?, 1)),
        ("mean", vec![("a", vec![3, 4])], |g, p| Ok(g.mean(p.var("a")?))),
        ("softmax", vec![("a", vec![3, 4])], |g, p| g.softmax(p.var("a")?, 1)),
        ("softmax_axis0", vec![("a", vec![3, 4])], |g, p| g.softmax(p.var("a")?, 0)),
        ("log_softmax", vec![("a", vec![3, 4])], |g, p| g.log_softmax(p.var("a")?, 1)),
        ("layer_norm", vec![("a", vec![3, 5])], |g, p| Ok(g.layer_norm(p.var("a")?, 1e-5))),
        ("gelu", vec![("a", vec![3, 4])], |g, p| Ok(g.gelu(p.var("a")?))),
        ("masked_softmax", vec![("a", vec![2, 3])], |g, p| {
            let m = g.masked_fill(p.var("a")?, &[false, true, false, true, false, false], NEG_LARGE)?;
            g.softmax(m, 1)
        }),
        ("cross_entropy", vec![("a", vec![4, 5])], |g, p| g.cross_entropy(p.var("a")?, &[1, 0, 4, 3], 0)),
        ("stop_gradient", vec![("a", vec![2, 3])], |g, p| {
            let a = p.var("a")?;
            let s = g.stop_gradient(a);
            let sq = g.mul(a, s)?;
            g.add(sq, a)
        }),
        ("dropout", vec![("a", vec![2, 3])], |g, p| {
            g.dropout(p.var("a")?, &[true, false, true, true, false, true], 0.3)
        }),
    ]
}

/// A tiny quantized model (H=8, K=4, two layers) with its loss objective.
pub fn tiny_model() -> Result<(ModelConfig, ParamStore, Example)> {
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 8,
        ffn: 12,
        vocab_size: 12,
        max_len: 8,
        codebook_size: 4,
        strategy: Strategy::ReTag,
        codebook_count: 6,
        ..ModelConfig::default()
    };
    let params = init_params(&cfg, 17)?;
    let ex = Example {
        input_ids: vec![1, 6, 7, 8, 9, 10, 2],
        target_in: vec![1, 7, 11, 9],
        target_out: vec![7, 11, 9, 2],
        categories: CategorySet::new([Category::Numerical, Category::Temporal])?,
        kind: Kind::Analytical,
    };
    Ok((cfg, params, ex))
}

/// Runs the op cases and the end-to-end model check at relative tolerance `tol`.
pub fn gradcheck_suite(tol: f64) -> Result<SuiteReport> {
    let cfg = GradCheckConfig {
        tol,
        ..GradCheckConfig::default()
    };
    let mut cases = Vec::new();
    for (i, (name, inputs, op)) in op_cases().into_iter().enumerate() {
        let mut rng = SeedStreams::new(1).substream("gradcheck-inputs", i as u64);
        let mut params = ParamStore::new();
        for (n, shape) in inputs {
            params.insert(n, rand_tensor(&mut rng, &shape));
        }
        let f = move |g: &mut Graph, p: &BoundParams| -> Result<(Var, Vec<usize>)> {
            let y = op(g, p)?;
            Ok((project(g, y, i as u64)?, Vec::new()))
        };
        let report = grad_check(&params, &f, &cfg)?;
        cases.push(SuiteCase {
            name: name.to_string(),
            report,
        });
    }

    let (model, params, ex) = tiny_model()?;
    let f = |g: &mut Graph, p: &BoundParams| -> Result<(Var, Vec<usize>)> {
        let net = Net::from_bound(&model, p.clone());
        let fwd = net.forward(g, &ex, Strategy::ReTag, 0.25, ForwardOptions::default())?;
        let terms = total_loss(g, &fwd, &ex.target_out, ex.kind, true)?;
        let fingerprint = fwd.indices.iter().flat_map(|(_, idx)| idx.iter().copied()).collect();
        Ok((terms.total, fingerprint))
    };
    cases.push(SuiteCase {
        name: "model_total_loss".into(),
        report: grad_check(&params, &f, &cfg)?,
    });
    let passed = cases.iter().all(|c| c.report.passed);
    let max_rel_err = cases.iter().map(|c| c.report.max_rel_err()).fold(0.0, f64::max);
    Ok(SuiteReport {
        cases,
        passed,
        max_rel_err,
    })
}
