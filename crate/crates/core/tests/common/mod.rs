//! Shared test helpers: finite-difference checks, reference implementations,
//! and small models.

#![allow(dead_code)]

pub mod cases;

use kban_core::encoder::DualAttention;
use kban_core::kb::KnowledgeBase;
use kban_core::nn::{Bound, LayerNorm, Linear, ParamStore};
use kban_core::synth::{SynthConfig, SyntheticWorld};
use kban_core::tape::{Tape, Var};
use kban_core::tensor::Tensor;
use kban_core::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Step for re-measuring coordinates where a relu or max switch lies inside `FD_STEP`.
pub const FINE_STEP: f64 = 1e-7;
/// Smooth coordinates agree between the two steps to O(h^2) plus roundoff,
/// both far below this.
const KINK_ABS: f64 = 1e-7;

/// Outcome of a finite-difference sweep.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradReport {
    /// Largest relative error over all checked coordinates.
    pub worst: f64,
    pub checked: usize,
    /// Coordinates measured with `FINE_STEP` because the two steps disagreed.
    pub kinks: usize,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.worst < tolerance
    }
}

/// Compares the tape gradient with central differences over the parameters
/// of `store`. With `sample`, only that many random coordinates per tensor
/// are checked.
pub fn grad_check<F>(store: &mut ParamStore, sample: Option<usize>, seed: u64, f: F) -> GradReport
where
    F: Fn(&mut Tape, &Bound) -> Var,
{
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, true);
    let loss = f(&mut tape, &p);
    tape.backward(loss).expect("scalar loss");
    let grads = p.grads(&tape);
    let eval = |store: &ParamStore| {
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let l = f(&mut t, &p);
        t.value(l).item()
    };
    let mut r = rng(seed);
    let mut report = GradReport::default();
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let n = store.get(id).len();
        let coords: Vec<usize> = match sample {
            Some(k) if k < n => (0..k).map(|_| r.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for k in coords {
            let orig = store.get(id).data()[k];
            let central = |store: &mut ParamStore, h: f64| {
                store.get_mut(id).data_mut()[k] = orig + h;
                let up = eval(store);
                store.get_mut(id).data_mut()[k] = orig - h;
                let down = eval(store);
                store.get_mut(id).data_mut()[k] = orig;
                (up - down) / (2.0 * h)
            };
            let analytic = grads[i][k];
            let mut numeric = central(store, FD_STEP);
            let mut e = rel_err(analytic, numeric);
            if e >= 1e-6 {
                let fine = central(store, FINE_STEP);
                if (numeric - fine).abs() > KINK_ABS {
                    report.kinks += 1;
                    numeric = fine;
                    e = rel_err(analytic, fine);
                }
            }
            assert!(e.is_finite(), "{}[{k}]: analytic {analytic} numeric {numeric}", store.name(id));
            if e > 1e-4 && std::env::var_os("GRAD_DEBUG").is_some() {
                eprintln!("{}[{k}] analytic {analytic} numeric {numeric}", store.name(id));
            }
            report.checked += 1;
            report.worst = report.worst.max(e);
        }
    }
    report
}

/// `Σ out ⊙ R` for a fixed random `R`, turning any tensor output into a scalar.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let r = Tensor::uniform(&shape, 1.0, &mut rng(seed ^ 0xabcdef));
    let r = tape.constant(r);
    let m = tape.mul(out, r).unwrap();
    tape.sum(m)
}

/// Replaces every parameter with uniform noise so gains and biases are exercised too.
pub fn randomize(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = r.random_range(-scale..scale);
        }
    }
}

/// Moves zero-initialized biases off zero so no unit sits exactly on a relu kink.
pub fn jitter_biases(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed ^ 0x5eed);
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with(".b") || store.name(id).ends_with(".bias")).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = r.random_range(-0.1..0.1);
        }
    }
}

fn mat(store: &ParamStore, l: &Linear) -> (Vec<f64>, Vec<f64>, usize) {
    let w = store.get(l.w);
    (w.data().to_vec(), store.get(l.b).data().to_vec(), w.shape()[1])
}

/// `x · w + b` written as loops.
fn affine(x: &[Vec<f64>], store: &ParamStore, l: &Linear) -> Vec<Vec<f64>> {
    let (w, b, out) = mat(store, l);
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &[Vec<f64>], store: &ParamStore, n: &Option<LayerNorm>) -> Vec<Vec<f64>> {
    let Some(n) = n else { return x.to_vec() };
    let g = store.get(n.gain).data();
    let b = store.get(n.bias).data();
    x.iter()
        .map(|row| {
            let c = row.len() as f64;
            let mu = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / c;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub struct DualReference {
    pub humans: Vec<Vec<f64>>,
    pub objects: Vec<Vec<f64>>,
    pub m_att: Vec<Vec<f64>>,
    /// `[head][object][human]`.
    pub logits: Vec<Vec<Vec<f64>>>,
}

/// Dual attention with the full `N x M x d_head` expansion materialized
/// before the max over the partner axis.
pub fn dual_reference(dual: &DualAttention, store: &ParamStore, humans: &[Vec<f64>], objects: &[Vec<f64>]) -> DualReference {
    let hn = layer_norm(humans, store, &dual.norm_h);
    let on = layer_norm(objects, store, &dual.norm_o);
    let q = affine(&on, store, &dual.query_o);
    let k = affine(&hn, store, &dual.key_h);
    let vh = affine(&hn, store, &dual.value_h);
    let vo = affine(&on, store, &dual.value_o);
    let (n, m) = (objects.len(), humans.len());
    let dh = dual.dim / dual.heads;
    let mut obj_out = objects.to_vec();
    let mut hum_out = humans.to_vec();
    let mut logits = Vec::new();
    for h in 0..dual.heads {
        let cols = h * dh..(h + 1) * dh;
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..m)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect()
            })
            .collect();
        // expansion[i][j][c] = sigmoid(a[i][j]) * vh[j][c]
        let expansion: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|i| (0..m).map(|j| cols.clone().map(|c| sigmoid(a[i][j]) * vh[j][c]).collect()).collect())
            .collect();
        for i in 0..n {
            for (t, c) in cols.clone().enumerate() {
                let best = (0..m).map(|j| expansion[i][j][t]).fold(f64::NEG_INFINITY, f64::max);
                obj_out[i][c] += best;
            }
        }
        let expansion_t: Vec<Vec<Vec<f64>>> = (0..m)
            .map(|j| (0..n).map(|i| cols.clone().map(|c| sigmoid(a[i][j]) * vo[i][c]).collect()).collect())
            .collect();
        for j in 0..m {
            for (t, c) in cols.clone().enumerate() {
                let best = (0..n).map(|i| expansion_t[j][i][t]).fold(f64::NEG_INFINITY, f64::max);
                hum_out[j][c] += best;
            }
        }
        logits.push(a);
    }
    let m_att = (0..n)
        .map(|i| {
            (0..m)
                .map(|j| sigmoid(logits.iter().map(|a| a[i][j]).sum::<f64>() / dual.heads as f64))
                .collect()
        })
        .collect();
    DualReference {
        humans: hum_out,
        objects: obj_out,
        m_att,
        logits,
    }
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn from_rows(r: &[Vec<f64>]) -> Tensor {
    Tensor::new(&[r.len(), r[0].len()], r.concat()).unwrap()
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Area under the precision/recall step curve as an exact fraction
/// `(numerator, denominator)`: `Σ_k (r_k - r_{k-1}) · p_k`.
pub fn ap_fraction(flags: &[bool], num_gt: usize) -> (u128, u128) {
    let (mut num, mut den) = (0u128, 1u128);
    let mut tp = 0u128;
    let mut prev_recall_tp = 0u128;
    for (k, &f) in flags.iter().enumerate() {
        tp += u128::from(f);
        // recall step (tp - prev) / num_gt, precision tp / (k + 1)
        let step_num = (tp - prev_recall_tp) * tp;
        let step_den = num_gt as u128 * (k as u128 + 1);
        prev_recall_tp = tp;
        if step_num == 0 {
            continue;
        }
        num = num * step_den + step_num * den;
        den *= step_den;
        let g = gcd(num, den);
        num /= g;
        den /= g;
    }
    (num, den)
}

/// A small model on a synthetic world; `dim` 8 with 2 heads keeps finite differences cheap.
pub fn small_model(world: &SyntheticWorld, enc: usize, dec: usize) -> Model {
    let cfg = ModelConfig {
        enc_layers: enc,
        dec_layers: dec,
        dim: 8,
        heads: 2,
        appearance_dim: world.config.appearance_dim,
        sc_hidden: 6,
        ..ModelConfig::default()
    };
    Model::new(cfg, world.kb.clone()).unwrap()
}

pub fn small_world(seed: u64) -> SyntheticWorld {
    SyntheticWorld::new(SynthConfig {
        humans_per_scene: [1, 3],
        objects_per_scene: [1, 3],
        num_object_classes: 4,
        num_verbs: 4,
        cooccur_density: 0.5,
        appearance_dim: 6,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub fn tiny_kb() -> KnowledgeBase {
    KnowledgeBase::new(3, 3, vec![vec![], vec![0, 2], vec![1]]).unwrap()
}
