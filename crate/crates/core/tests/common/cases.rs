//! Finite-difference cases: one per differentiable operation plus the module stacks.
//! Each case returns the finite-difference report for one seed.

use kban_core::encoder::GpmLayer;
use kban_core::fusion::ComplementaryStream;
use kban_core::nn::{Init, MultiHeadAttention, ParamStore};
use kban_core::pairs::PairProposal;
use kban_core::synth::Split;
use kban_core::tape::{Tape, Var};
use kban_core::tensor::Tensor;
use kban_core::training::{scene_loss, PreparedScene};
use rand::Rng;

use super::{grad_check, GradReport, jitter_biases, project, randomize, rng, small_model, small_world};

pub type Case = (&'static str, fn(u64) -> GradReport);

fn store_of(seed: u64, shapes: &[&[usize]]) -> ParamStore {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    for (i, shape) in shapes.iter().enumerate() {
        s.add(format!("x{i}"), Tensor::uniform(shape, 1.0, &mut r));
    }
    s
}

/// Checks `op` applied to parameters of the given shapes.
fn op_case(seed: u64, shapes: &[&[usize]], op: impl Fn(&mut Tape, &[Var]) -> Var) -> GradReport {
    let mut s = store_of(seed, shapes);
    grad_check(&mut s, None, seed, |tape, p| {
        let out = op(tape, p.vars());
        if tape.shape(out).iter().product::<usize>() == 1 && tape.shape(out).len() == 1 {
            out
        } else {
            project(tape, out, seed)
        }
    })
}

pub fn cases() -> Vec<Case> {
    vec![
        ("matmul", |s| op_case(s, &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]).unwrap())),
        ("transpose", |s| op_case(s, &[&[3, 4]], |t, v| t.transpose(v[0]).unwrap())),
        ("add", |s| op_case(s, &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1]).unwrap())),
        ("add_bias", |s| op_case(s, &[&[4, 3], &[3]], |t, v| t.add_bias(v[0], v[1]).unwrap())),
        ("mul", |s| op_case(s, &[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1]).unwrap())),
        ("scale", |s| op_case(s, &[&[2, 3]], |t, v| t.scale(v[0], -1.7))),
        ("sigmoid", |s| op_case(s, &[&[3, 3]], |t, v| t.sigmoid(v[0]))),
        ("relu", |s| op_case(s, &[&[3, 3]], |t, v| t.relu(v[0]))),
        ("softmax_rows", |s| op_case(s, &[&[3, 5]], |t, v| t.softmax_rows(v[0]).unwrap())),
        ("broadcast_expand_mul", |s| {
            op_case(s, &[&[3, 4], &[4, 2]], |t, v| t.broadcast_expand_mul(v[0], v[1]).unwrap())
        }),
        ("max_pool_axis1", |s| op_case(s, &[&[3, 4, 2]], |t, v| t.max_pool_axis1(v[0]).unwrap())),
        ("conv2d_stride1", |s| {
            op_case(s, &[&[2, 6, 6], &[3, 2, 3, 3], &[3]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1).unwrap())
        }),
        ("conv2d_stride2", |s| {
            op_case(s, &[&[1, 9, 9], &[2, 1, 3, 3]], |t, v| t.conv2d(v[0], v[1], None, 2).unwrap())
        }),
        ("bce", |s| {
            let target = Tensor::new(&[2, 3], (0..6).map(|i| f64::from(((s as usize + i) % 2) as u8)).collect()).unwrap();
            op_case(s, &[&[2, 3]], move |t, v| {
                let p = t.sigmoid(v[0]);
                t.bce(p, &target).unwrap()
            })
        }),
        ("mean", |s| op_case(s, &[&[2, 3]], |t, v| t.mean(v[0]).unwrap())),
        ("sum", |s| op_case(s, &[&[2, 3]], |t, v| t.sum(v[0]))),
        ("sum_last_axis", |s| op_case(s, &[&[3, 4]], |t, v| t.sum_last_axis(v[0]).unwrap())),
        ("concat_last_axis", |s| {
            op_case(s, &[&[2, 3], &[2, 1], &[2, 2]], |t, v| t.concat_last_axis(&[v[0], v[1], v[2]]).unwrap())
        }),
        ("concat_rows", |s| op_case(s, &[&[2, 3], &[1, 3]], |t, v| t.concat_rows(&[v[0], v[1]]).unwrap())),
        ("slice_cols", |s| op_case(s, &[&[3, 5]], |t, v| t.slice_cols(v[0], 1, 3).unwrap())),
        ("gather_rows", |s| op_case(s, &[&[3, 2]], |t, v| t.gather_rows(v[0], &[2, 0, 2, 1]).unwrap())),
        ("flatten", |s| op_case(s, &[&[2, 2, 3]], |t, v| t.flatten(v[0]).unwrap())),
        ("layer_norm", |s| op_case(s, &[&[3, 5], &[5], &[5]], |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap())),
        ("linear", |s| op_case(s, &[&[3, 4], &[4, 2], &[2]], |t, v| t.linear(v[0], v[1], v[2]).unwrap())),
        ("gpm_layer", gpm_layer),
        ("decoder_layer", decoder_layer),
        ("s_c_head", s_c_head),
        ("scene_loss", scene_loss_case),
    ]
}

fn gpm_layer(seed: u64) -> GradReport {
    let mut r = rng(seed);
    let (m, n) = (r.random_range(1..4), r.random_range(1..4));
    let mut s = ParamStore::new();
    let layer = GpmLayer::new(&mut Init::new(&mut s, seed), "gpm", 8, 2, true);
    randomize(&mut s, 0.6, seed);
    let h = s.add("in.h", Tensor::uniform(&[m, 8], 1.0, &mut r));
    let o = s.add("in.o", Tensor::uniform(&[n, 8], 1.0, &mut r));
    grad_check(&mut s, None, seed, |tape, p| {
        let out = layer.forward(tape, p, Some(p.var(h)), Some(p.var(o))).unwrap();
        let a = project(tape, out.humans.unwrap(), seed);
        let b = project(tape, out.objects.unwrap(), seed + 1);
        let c = project(tape, out.dual.unwrap().m_att, seed + 2);
        let ab = tape.add(a, b).unwrap();
        tape.add(ab, c).unwrap()
    })
}

fn decoder_layer(seed: u64) -> GradReport {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let layer = MultiHeadAttention::new(&mut Init::new(&mut s, seed), "dec", 8, 2, true, false);
    randomize(&mut s, 0.6, seed);
    let q = s.add("in.q", Tensor::uniform(&[r.random_range(1..4), 8], 1.0, &mut r));
    let mem = s.add("in.mem", Tensor::uniform(&[r.random_range(1..5), 8], 1.0, &mut r));
    grad_check(&mut s, None, seed, |tape, p| {
        let out = layer.forward(tape, p, p.var(q), p.var(mem)).unwrap();
        project(tape, out.out, seed)
    })
}

fn s_c_head(seed: u64) -> GradReport {
    let world = small_world(seed);
    let scene = world.split(Split::Train, 1).remove(0);
    let pair = PairProposal::new(&scene, 0, 0).unwrap();
    let mut s = ParamStore::new();
    let head = ComplementaryStream::new(&mut Init::new(&mut s, seed), 6, 5, 4);
    jitter_biases(&mut s, seed);
    let (h, o) = (scene.humans[0].appearance.clone(), scene.objects[0].appearance.clone());
    grad_check(&mut s, Some(6), seed, |tape, p| {
        let out = head.forward(tape, p, &h, &o, &pair).unwrap();
        project(tape, out, seed)
    })
}

fn scene_loss_case(seed: u64) -> GradReport {
    let world = small_world(seed);
    let scene = world.split(Split::Train, 1).remove(0);
    let mut model = small_model(&world, 1, 1);
    let prep = PreparedScene::new(&scene, model.num_verbs()).unwrap();
    let mut store = std::mem::take(&mut model.params);
    jitter_biases(&mut store, seed);
    let worst = grad_check(&mut store, Some(2), seed, |tape, p| {
        scene_loss(&model, tape, p, &scene, &prep).unwrap().0
    });
    model.params = store;
    worst
}
