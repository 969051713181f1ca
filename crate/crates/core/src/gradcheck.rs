//! Central finite-difference oracle for analytic gradients.
//!
//! The oracle only ever evaluates the loss, so it stays independent of the
//! backward rules it is used to check.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::heads::{HeadArch, HeadConfig, HeadRegistry};
use crate::nn::{init_tensor, Init};
use crate::params::{Gradients, ParamStore};
use crate::rng;

/// Default step for central differences.
pub const STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares analytic and central-difference gradients for every trainable
/// entry of `store` whose name passes `filter`.
///
/// `loss` evaluates the scalar objective against the store it is given; when
/// handed a gradient buffer it must also run the backward pass and
/// accumulate into it.
pub fn check<F, P>(store: &ParamStore, h: f64, filter: P, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, Option<&mut Gradients>) -> Result<f64>,
    P: Fn(&str) -> bool,
{
    let mut analytic = Gradients::zeros_for(store);
    loss(store, Some(&mut analytic))?;

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (id, p) in store.iter() {
        if !p.trainable || !filter(&p.name) {
            continue;
        }
        let grad = analytic.get(id).expect("trainable params have buffers").to_vec();
        for (j, &a) in grad.iter().enumerate() {
            let orig = p.value.data()[j];
            probe.get_mut(id).value.data_mut()[j] = orig + h;
            let up = loss(&probe, None)?;
            probe.get_mut(id).value.data_mut()[j] = orig - h;
            let down = loss(&probe, None)?;
            probe.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((p.name.clone(), j));
            }
        }
    }
    Ok(report)
}

type OpFn = fn(&mut Graph<'_>, &[Var]) -> Result<Var>;

/// Every differentiable graph op, with its operand shapes.
type OpEntry = (&'static str, Vec<(usize, usize)>, OpFn);

fn op_table() -> Vec<OpEntry> {
    let m34 = (3, 4);
    vec![
        ("matmul", vec![m34, (4, 2)], |g, v| g.matmul(v[0], v[1])),
        ("matmul_bt", vec![m34, (2, 4)], |g, v| g.matmul_bt(v[0], v[1])),
        ("add", vec![m34, m34], |g, v| g.add(v[0], v[1])),
        ("add_row", vec![m34, (1, 4)], |g, v| g.add_row(v[0], v[1])),
        ("mul", vec![m34, m34], |g, v| g.mul(v[0], v[1])),
        ("scale", vec![m34], |g, v| Ok(g.scale(v[0], -1.7))),
        ("tanh", vec![m34], |g, v| Ok(g.tanh(v[0]))),
        ("sigmoid", vec![m34], |g, v| Ok(g.sigmoid(v[0]))),
        ("relu", vec![m34], |g, v| Ok(g.relu(v[0]))),
        ("gelu", vec![m34], |g, v| Ok(g.gelu(v[0]))),
        ("dropout", vec![m34], |g, v| Ok(g.dropout(v[0], 0.3))),
        ("layer_norm", vec![m34, (1, 4), (1, 4)], |g, v| {
            g.layer_norm(v[0], v[1], v[2])
        }),
        ("softmax_rows", vec![m34], |g, v| g.softmax_rows(v[0], None)),
        ("softmax_rows_masked", vec![m34], |g, v| {
            g.softmax_rows(v[0], Some(&[true, false, true, true]))
        }),
        ("concat_cols", vec![m34, (3, 2)], |g, v| g.concat_cols(&[v[0], v[1]])),
        ("concat_rows", vec![m34, (2, 4)], |g, v| g.concat_rows(&[v[0], v[1]])),
        ("slice_cols", vec![m34], |g, v| g.slice_cols(v[0], 1, 3)),
        ("slice_rows", vec![m34], |g, v| g.slice_rows(v[0], 1, 3)),
        ("transpose", vec![m34], |g, v| Ok(g.transpose(v[0]))),
        ("gather_rows", vec![m34], |g, v| g.gather_rows(v[0], &[2, 0, 2, 1])),
        ("softmax_cross_entropy", vec![(1, 4)], |g, v| {
            g.softmax_cross_entropy(v[0], 2)
        }),
        ("softmax_cross_entropy_rows", vec![m34], |g, v| {
            g.softmax_cross_entropy_rows(v[0], &[0, 3, 1])
        }),
        ("sum", vec![m34], |g, v| Ok(g.sum(v[0]))),
        ("add_n", vec![m34, m34, m34], |g, v| g.add_n(&[v[0], v[1], v[2]])),
    ]
}

/// Projects `out` onto fixed random weights so every output entry matters.
fn projected_loss(g: &mut Graph<'_>, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(out);
    let w = init_tensor(r, c, Init::Normal(1.0), &mut rng::rng(seed));
    let w = g.input(&w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Central-difference check of every op on random operands.
pub fn check_ops(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    op_table()
        .into_iter()
        .enumerate()
        .map(|(k, (name, shapes, op))| {
            let mut store = ParamStore::new();
            let mut r = rng::rng(seed + k as u64);
            let ids = shapes
                .iter()
                .enumerate()
                .map(|(i, &(rows, cols))| {
                    store.add(&format!("x{i}"), init_tensor(rows, cols, Init::Normal(1.0), &mut r))
                })
                .collect::<Result<Vec<_>>>()?;
            let report = check(
                &store,
                STEP,
                |_| true,
                |s, grads| {
                    let mut g = Graph::training(rng::rng(seed ^ 0xD0));
                    let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
                    let out = op(&mut g, &vars)?;
                    let loss = projected_loss(&mut g, out, seed + 100 + k as u64)?;
                    if let Some(buf) = grads {
                        g.backward(loss)?;
                        g.accumulate(s, buf);
                    }
                    Ok(g.scalar(loss))
                },
            )?;
            Ok((name, report))
        })
        .collect()
}

/// Full encoder (d=8, one layer, two heads) on a length-4 sentence, through
/// both pretraining heads.
pub fn check_encoder(seed: u64) -> Result<GradCheckReport> {
    let config = EncoderConfig {
        vocab_size: 12,
        width: 8,
        layers: 1,
        heads: 2,
        ff_width: 16,
        max_len: 8,
        dropout: 0.0,
    };
    let mut model = EncoderModel::new(config, seed)?;
    let mut r = rng::rng(seed + 2);
    let mut snapshot = model.params().snapshot();
    for x in snapshot.iter_mut().flatten() {
        *x = 0.5 * rng::normal(&mut r);
    }
    model.params_mut().restore(&snapshot);
    let tokens = [3, 7, 9, 6, 11, 4];
    check(
        model.params(),
        STEP,
        |_| true,
        |s, grads| {
            let mut m = model.clone();
            m.params_mut().assign_from(s)?;
            let mut g = Graph::new();
            let pass = m.forward(&mut g, &tokens, None)?;
            let mlm = m.mlm_logits(&mut g, pass.features, &[2, 4])?;
            let mlm = g.softmax_cross_entropy_rows(mlm, &[5, 8])?;
            let nsp = m.nsp_logits(&mut g, pass.features)?;
            let nsp = g.softmax_cross_entropy(nsp, 1)?;
            let feat = projected_loss(&mut g, pass.features, seed + 1)?;
            let loss = g.add_n(&[mlm, nsp, feat])?;
            let value = g.scalar(loss);
            if let Some(buf) = grads {
                g.backward(loss)?;
                g.accumulate(m.params(), buf);
            }
            Ok(value)
        },
    )
}

/// One head pass per architecture over frozen random features.
pub fn check_heads(seed: u64) -> Result<Vec<(HeadArch, GradCheckReport)>> {
    let features = init_tensor(6, 8, Init::Normal(1.0), &mut rng::rng(seed));
    let candidates = |n: usize| (0..n).map(|i| format!("c{i}")).collect::<Vec<String>>();
    HeadArch::ALL
        .iter()
        .map(|&arch| {
            let mut config = HeadConfig::sized(arch, 8, 4);
            config.heads = 2;
            config.ff_width = 8;
            config.lstm_layers = 2;
            let mut reg = HeadRegistry::new(config, seed)?;
            reg.register_polyphone('甲', candidates(3))?;
            reg.register_polyphone('乙', candidates(2))?;
            let report = check(
                reg.params(),
                STEP,
                |_| true,
                |s, grads| {
                    let mut h = reg.clone();
                    h.params_mut().assign_from(s)?;
                    let mut g = Graph::new();
                    let a = h.forward(&mut g, &features, 2, '甲')?.logits;
                    let a = g.softmax_cross_entropy(a, 1)?;
                    let b = h.forward(&mut g, &features, 4, '乙')?.logits;
                    let b = g.softmax_cross_entropy(b, 0)?;
                    let loss = g.add(a, b)?;
                    let value = g.scalar(loss);
                    if let Some(buf) = grads {
                        g.backward(loss)?;
                        g.accumulate(h.params(), buf);
                    }
                    Ok(value)
                },
            )?;
            Ok((arch, report))
        })
        .collect()
}
