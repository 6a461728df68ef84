//! Analytic gradients from candle's autograd against central differences, in f64.

use candle_core::{DType, Device, Tensor, Var};
use cfdiff::Condition;
use cfdiff_denoiser::layers::{adagroup_norm, attention_forward, time_embedding, AttentionWeights};
use cfdiff_denoiser::net::embed_conditions;
use cfdiff_denoiser::params::{init_values, Init, ParamSpec, Weights};
use cfdiff_denoiser::{Architecture, ConditioningMode, UNetConfig};

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-3;

fn random(shape: &[usize], seed: u64, std: f64) -> Tensor {
    let v = init_values(&[ParamSpec::new("r", shape, Init::Normal(std))], seed).unwrap().remove(0);
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

fn with_value(t: &Tensor, i: usize, v: f64) -> Tensor {
    let mut data = values(t);
    data[i] = v;
    Tensor::from_vec(data, t.dims(), &Device::Cpu).unwrap()
}

/// Compares gradients of `sum(f(inputs) ⊙ probe)` w.r.t. every element of every input.
/// Returns the worst relative error `|a − n| / max(|a|, |n|, floor)`.
fn worst_relative_error(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> Tensor) -> f64 {
    let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
    let live: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let out = f(&live);
    let probe = random(out.dims(), 999, 1.0);
    let objective = |ts: &[Tensor]| -> f64 {
        (f(ts) * &probe).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
    };
    let grads = (out * &probe).unwrap().sum_all().unwrap().backward().unwrap();

    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => values(g),
            None => vec![0.0; var.elem_count()],
        };
        let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let base = values(&inputs[k]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            let mut minus: Vec<Tensor> = inputs.to_vec();
            plus[k] = with_value(&inputs[k], i, base[i] + STEP);
            minus[k] = with_value(&inputs[k], i, base[i] - STEP);
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * STEP);
            // entries far below the tensor's gradient scale are compared on that scale
            let denom = a.abs().max(numeric.abs()).max(1e-3 * scale).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

#[test]
fn attention_with_condition_context() {
    let (b, n, d, nc, heads) = (2, 5, 8, 3, 2);
    let inputs = vec![
        random(&[b, n, d], 1, 1.0),
        random(&[d, d], 2, 0.4),
        random(&[d, d], 3, 0.4),
        random(&[d, d], 4, 0.4),
        random(&[d, d], 5, 0.4),
        random(&[d], 6, 0.1),
        random(&[d], 7, 0.1),
        random(&[d], 8, 0.1),
        random(&[d], 9, 0.1),
        random(&[b, nc, d], 10, 1.0),
        random(&[b, nc, d], 11, 1.0),
    ];
    let err = worst_relative_error(&inputs, |t| {
        let p = AttentionWeights {
            wq: &t[1],
            wk: &t[2],
            wv: &t[3],
            wo: &t[4],
            bq: Some(&t[5]),
            bk: Some(&t[6]),
            bv: Some(&t[7]),
            bo: Some(&t[8]),
        };
        attention_forward(&t[0], &p, heads, Some((&t[9], &t[10]))).unwrap().0
    });
    assert!(err < REL_TOL, "relative error {err}");
}

#[test]
fn adaptive_group_norm() {
    let inputs = vec![
        random(&[2, 4, 3, 3], 20, 2.0),
        random(&[2, 4], 21, 1.0),
        random(&[2, 4], 22, 1.0),
    ];
    let err = worst_relative_error(&inputs, |t| adagroup_norm(&t[0], 2, &t[1], &t[2]).unwrap());
    assert!(err < REL_TOL, "relative error {err}");
}

#[test]
fn time_embedding_mlp() {
    let (f, h) = (6, 10);
    let inputs = vec![
        random(&[h, f], 30, 0.5),
        random(&[h], 31, 0.1),
        random(&[h, h], 32, 0.5),
        random(&[h], 33, 0.1),
    ];
    let err = worst_relative_error(&inputs, |t| time_embedding(&[3, 250, 999], f, &t[0], &t[1], &t[2], &t[3]).unwrap());
    assert!(err < REL_TOL, "relative error {err}");
}

fn miniature_unet(mode: ConditioningMode) -> (Architecture, Weights) {
    let arch = Architecture::UNet(UNetConfig {
        in_channels: 2,
        width: 4,
        inner_width: 8,
        groups: 2,
        heads: 2,
        cond_dim: 3,
        mode,
    });
    // every tensor random, so zero-initialized projections do not hide gradient paths
    let specs: Vec<ParamSpec> = arch
        .param_specs()
        .into_iter()
        .map(|s| ParamSpec::new(s.name, &s.shape, Init::Normal(0.3)))
        .collect();
    let vals = init_values(&specs, 40).unwrap();
    let w = specs
        .iter()
        .zip(vals)
        .map(|(s, v)| (s.name.clone(), Tensor::from_vec(v, s.shape.as_slice(), &Device::Cpu).unwrap()))
        .collect();
    (arch, w)
}

/// The full network, differentiated w.r.t. the condition table and the per-layer context
/// projections that feed the attention keys and values.
#[test]
fn unet_condition_path() {
    let (arch, weights) = miniature_unet(ConditioningMode::Attention);
    let names = ["cond.table", "attn1.ctx.w", "attn2.ctx.b", "enc1.emb.w"];
    let x = random(&[3, 2, 4, 4], 41, 1.0);
    let conds = [Condition::Healthy, Condition::Unhealthy, Condition::Null];
    let inputs: Vec<Tensor> = names.iter().map(|n| weights[*n].clone()).collect();
    let err = worst_relative_error(&inputs, |t| {
        let mut w = weights.clone();
        for (n, v) in names.iter().zip(t) {
            w.insert(n.to_string(), v.clone());
        }
        arch.forward(&w, &x, &[10, 500, 990], &conds).unwrap()
    });
    assert!(err < REL_TOL, "relative error {err}");
}

#[test]
fn unet_adagroup_class_path() {
    let (arch, weights) = miniature_unet(ConditioningMode::AdaGroup);
    let names = ["class.table", "dec0.emb.w", "time.l1.w"];
    let x = random(&[2, 2, 4, 4], 42, 1.0);
    let conds = [Condition::Unhealthy, Condition::Null];
    let inputs: Vec<Tensor> = names.iter().map(|n| weights[*n].clone()).collect();
    let err = worst_relative_error(&inputs, |t| {
        let mut w = weights.clone();
        for (n, v) in names.iter().zip(t) {
            w.insert(n.to_string(), v.clone());
        }
        arch.forward(&w, &x, &[0, 700], &conds).unwrap()
    });
    assert!(err < REL_TOL, "relative error {err}");
}

#[test]
fn condition_rows_select_table_entries() {
    let (_, w) = miniature_unet(ConditioningMode::Attention);
    let table = w["cond.table"].clone();
    let picked = embed_conditions(&w, &[Condition::Null, Condition::Healthy]).unwrap();
    assert_eq!(picked.dims(), &[2, 3, 3]);
    assert_eq!(values(&picked.get(0).unwrap()), values(&table.get(Condition::Null.index()).unwrap()));
    assert_eq!(values(&picked.get(1).unwrap()), values(&table.get(Condition::Healthy.index()).unwrap()));
    assert_eq!(picked.dtype(), DType::F64);
}
