#![allow(dead_code)]

pub mod oracle;

use bfpcnn::autodiff::Var;
use bfpcnn::blocks::{
    granular_feature_integration, inception_block, residual_block, self_attention, spatial_attention, Granular, Inception, InceptionConfig,
    Residual, SelfAttention, SpatialAttention, SpatialAttentionConfig,
};
use bfpcnn::gradcheck::{check_gradients, CheckOptions, CheckReport};
use bfpcnn::model::{ModelConfig, ModelGraph};
use bfpcnn::nn::{
    batchnorm, concat_channels, conv2d, dense, dropout, flatten, maxpool2d, maxpool2d_same, separable_conv2d, softmax, BatchNorm, Conv2d,
    ForwardCtx, Mode, Padding, SeparableConv2d, DEFAULT_EPS, DEFAULT_MOMENTUM,
};
use bfpcnn::params::{ParamId, ParamStore};
use bfpcnn::train::cross_entropy_loss;
use bfpcnn::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LAYER_TOLERANCE: f32 = 1e-3;
pub const MODEL_TOLERANCE: f32 = 1e-2;

pub struct Case {
    pub name: String,
    pub tolerance: f32,
    pub run: Box<dyn Fn() -> Result<CheckReport>>,
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng).unwrap()
}

/// Values with magnitude in `[0.2, 1]`, far from the ReLU kink.
pub fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(0.2f32..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape, data).unwrap()
}

/// Distinct values 0.1 apart in random order, so no max-pool window has a
/// near tie.
pub fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f32> = (0..n).map(|i| i as f32 * 0.1 - n as f32 * 0.05).collect();
    data.shuffle(rng);
    Tensor::new(shape, data).unwrap()
}

fn opts(seed: u64) -> CheckOptions {
    CheckOptions { max_coords: 24, seed, ..Default::default() }
}

fn conv_of<'t>(v: &[Var<'t>], stride: usize, padding: Padding, dilation: usize, groups: usize) -> Conv2d<Var<'t>> {
    let mut c = Conv2d::new(v[1], Some(v[2]), stride, padding);
    c.dilation = dilation;
    c.groups = groups;
    c
}

fn bn_of<'t>(v: &[Var<'t>], offset: usize) -> BatchNorm<Var<'t>> {
    let tape = v[0].tape();
    let c = v[offset].shape()[0];
    BatchNorm {
        gamma: v[offset],
        beta: v[offset + 1],
        running_mean: tape.constant(Tensor::full(&[c], 0.1).unwrap()),
        running_var: tape.constant(Tensor::full(&[c], 0.8).unwrap()),
        eps: DEFAULT_EPS,
        momentum: DEFAULT_MOMENTUM,
    }
}

/// `t` plus uniform noise in `[-0.1, 0.1]`. Fresh parameters have exactly
/// zero biases, which can park a ReLU input exactly on its kink.
pub fn jitter(rng: &mut ChaCha8Rng, t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v + rng.gen_range(-0.1f32..0.1)).collect();
    Tensor::new(t.shape(), data).unwrap()
}

/// Inputs of a block built from a store: the block input, then every store
/// tensor with a little noise.
fn block_inputs(x: Tensor, store: &ParamStore, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    std::iter::once(x).chain(store.entries().iter().map(|e| jitter(rng, &e.tensor))).collect()
}

fn bind<'a, 't>(v: &'a [Var<'t>]) -> impl Fn(&ParamId) -> Var<'t> + 'a {
    move |id: &ParamId| v[id.0 + 1]
}

fn push(cases: &mut Vec<Case>, name: String, tolerance: f32, run: impl Fn() -> Result<CheckReport> + 'static) {
    cases.push(Case { name, tolerance, run: Box::new(run) });
}

/// One case per primitive and per composite block for `seed`.
pub fn layer_cases(seed: u64) -> Vec<Case> {
    let mut cases = Vec::new();
    let t = LAYER_TOLERANCE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let o = opts(seed);

    let (a, b) = (uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0));
    {
        let (a, b) = (a.clone(), b.clone());
        push(&mut cases, format!("add/{seed}"), t, move || check_gradients(&[a.clone(), b.clone()], |v| v[0].add(v[1]), o));
    }
    {
        let (a, b) = (a.clone(), b.clone());
        push(&mut cases, format!("sub/{seed}"), t, move || check_gradients(&[a.clone(), b.clone()], |v| v[0].sub(v[1]), o));
    }
    {
        let (a, b) = (a.clone(), b.clone());
        push(&mut cases, format!("mul/{seed}"), t, move || check_gradients(&[a.clone(), b.clone()], |v| v[0].mul(v[1]), o));
    }
    {
        let a = a.clone();
        push(&mut cases, format!("scale/{seed}"), t, move || check_gradients(std::slice::from_ref(&a), |v| Ok(v[0].scale(-1.7)), o));
    }
    {
        let a = a.clone();
        push(&mut cases, format!("sum/{seed}"), t, move || check_gradients(std::slice::from_ref(&a), |v| Ok(v[0].sum()), o));
    }
    {
        let a = a.clone();
        push(&mut cases, format!("mean/{seed}"), t, move || check_gradients(std::slice::from_ref(&a), |v| Ok(v[0].mean()), o));
    }
    {
        let (a, b) = (a.clone(), b.clone());
        push(&mut cases, format!("reshape/{seed}"), t, move || {
            check_gradients(&[a.clone(), b.clone()], |v| v[0].reshape(&[3, 2])?.mul(v[1].reshape(&[3, 2])?), o)
        });
    }
    let (m1, m2) = (uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0));
    push(&mut cases, format!("matmul/{seed}"), t, move || check_gradients(&[m1.clone(), m2.clone()], |v| v[0].matmul(v[1]), o));
    let (b1, b2) = (uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[2, 4, 2], -1.0, 1.0));
    push(&mut cases, format!("batch_matmul/{seed}"), t, move || {
        check_gradients(&[b1.clone(), b2.clone()], |v| v[0].batch_matmul(v[1]), o)
    });
    let tr = uniform(r, &[2, 3, 4], -1.0, 1.0);
    push(&mut cases, format!("transpose/{seed}"), t, move || check_gradients(std::slice::from_ref(&tr), |v| v[0].transpose(), o));
    let (rb1, rb2) = (uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0));
    push(&mut cases, format!("add_row_bias/{seed}"), t, move || {
        check_gradients(&[rb1.clone(), rb2.clone()], |v| v[0].add_row_bias(v[1]), o)
    });
    let rl = off_kink(r, &[3, 4]);
    push(&mut cases, format!("relu/{seed}"), t, move || check_gradients(std::slice::from_ref(&rl), |v| Ok(v[0].relu()), o));
    let sm = uniform(r, &[3, 5], -2.0, 2.0);
    push(&mut cases, format!("softmax/{seed}"), t, move || check_gradients(std::slice::from_ref(&sm), |v| softmax(v[0]), o));

    let cv = [uniform(r, &[2, 2, 5, 5], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -0.5, 0.5), uniform(r, &[3], -0.5, 0.5)];
    push(&mut cases, format!("conv2d_valid/{seed}"), t, move || {
        check_gradients(&cv, |v| conv2d(v[0], &conv_of(v, 1, Padding::Valid, 1, 1)), o)
    });
    let cs = [uniform(r, &[1, 2, 6, 6], -1.0, 1.0), uniform(r, &[2, 2, 3, 3], -0.5, 0.5), uniform(r, &[2], -0.5, 0.5)];
    push(&mut cases, format!("conv2d_same_stride2/{seed}"), t, move || {
        check_gradients(&cs, |v| conv2d(v[0], &conv_of(v, 2, Padding::Same, 1, 1)), o)
    });
    let cd = [uniform(r, &[1, 2, 7, 7], -1.0, 1.0), uniform(r, &[2, 2, 3, 3], -0.5, 0.5), uniform(r, &[2], -0.5, 0.5)];
    push(&mut cases, format!("conv2d_dilated/{seed}"), t, move || {
        check_gradients(&cd, |v| conv2d(v[0], &conv_of(v, 1, Padding::Same, 2, 1)), o)
    });
    let cg = [uniform(r, &[2, 3, 5, 5], -1.0, 1.0), uniform(r, &[3, 1, 3, 3], -0.5, 0.5), uniform(r, &[3], -0.5, 0.5)];
    push(&mut cases, format!("conv2d_depthwise/{seed}"), t, move || {
        check_gradients(&cg, |v| conv2d(v[0], &conv_of(v, 1, Padding::Same, 1, 3)), o)
    });
    let mp = spaced(r, &[2, 2, 4, 4]);
    push(&mut cases, format!("maxpool2d/{seed}"), t, move || check_gradients(std::slice::from_ref(&mp), |v| maxpool2d(v[0], 2, 2), o));
    let ms = spaced(r, &[1, 2, 5, 5]);
    push(&mut cases, format!("maxpool2d_same/{seed}"), t, move || check_gradients(std::slice::from_ref(&ms), |v| maxpool2d_same(v[0], 3, 2), o));

    let bn = [uniform(r, &[4, 3, 2, 2], -1.0, 1.0), uniform(r, &[3], 0.5, 1.5), uniform(r, &[3], -0.5, 0.5)];
    {
        let bn = bn.clone();
        push(&mut cases, format!("batchnorm_train/{seed}"), t, move || {
            check_gradients(&bn, |v| Ok(batchnorm(v[0], &bn_of(v, 1), Mode::Train)?.0), o)
        });
    }
    push(&mut cases, format!("batchnorm_infer/{seed}"), t, move || {
        check_gradients(&bn, |v| Ok(batchnorm(v[0], &bn_of(v, 1), Mode::Infer)?.0), o)
    });
    let cc = [uniform(r, &[2, 2, 3, 3], -1.0, 1.0), uniform(r, &[2, 1, 3, 3], -1.0, 1.0)];
    push(&mut cases, format!("concat/{seed}"), t, move || check_gradients(&cc, |v| concat_channels(&[v[0], v[1]]), o));
    let de = [uniform(r, &[3, 5], -1.0, 1.0), uniform(r, &[5, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)];
    push(&mut cases, format!("dense/{seed}"), t, move || check_gradients(&de, |v| dense(v[0], v[1], v[2]), o));
    let fl = [uniform(r, &[2, 2, 3, 3], -1.0, 1.0), uniform(r, &[18, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)];
    push(&mut cases, format!("flatten/{seed}"), t, move || check_gradients(&fl, |v| dense(flatten(v[0])?, v[1], v[2]), o));
    let dr = uniform(r, &[4, 6], -1.0, 1.0);
    push(&mut cases, format!("dropout/{seed}"), t, move || {
        check_gradients(std::slice::from_ref(&dr), move |v| dropout(v[0], 0.3, Mode::Train, seed), o)
    });
    let sp = [
        uniform(r, &[1, 3, 5, 5], -1.0, 1.0),
        uniform(r, &[3, 1, 3, 3], -0.5, 0.5),
        uniform(r, &[4, 3, 1, 1], -0.5, 0.5),
        uniform(r, &[4], -0.5, 0.5),
    ];
    push(&mut cases, format!("separable_conv2d/{seed}"), t, move || {
        check_gradients(&sp, |v| separable_conv2d(v[0], &SeparableConv2d { depthwise: v[1], pointwise: v[2], bias: v[3] }), o)
    });
    let ce = uniform(r, &[4, 4], -2.0, 2.0);
    let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..4)).collect();
    push(&mut cases, format!("cross_entropy/{seed}"), t, move || {
        let labels = labels.clone();
        check_gradients(std::slice::from_ref(&ce), move |v| cross_entropy_loss(softmax(v[0])?, &labels), o)
    });

    // composite blocks, checked with respect to the input and every parameter
    let block_opts = CheckOptions { max_coords: 8, step: 3e-3, ..o };
    {
        let mut store = ParamStore::new(seed);
        let p = Inception::build(&mut store, "inc", 3, &InceptionConfig::new(2, 2, 3, 2, 2, 2)).unwrap();
        let inputs = block_inputs(off_kink(r, &[2, 3, 5, 5]), &store, r);
        push(&mut cases, format!("inception_block/{seed}"), t, move || {
            check_gradients(&inputs, |v| inception_block(v[0], &p.map(bind(v))), block_opts)
        });
    }
    {
        let mut store = ParamStore::new(seed);
        let p = SelfAttention::build(&mut store, "attn", 3, 4, 0.0, true).unwrap();
        let inputs = block_inputs(uniform(r, &[2, 3, 3, 3], -1.0, 1.0), &store, r);
        push(&mut cases, format!("self_attention/{seed}"), t, move || {
            check_gradients(&inputs, |v| self_attention(v[0], &p.map(bind(v)), &mut ForwardCtx::new(Mode::Train, 0)), block_opts)
        });
    }
    {
        let mut store = ParamStore::new(seed);
        let p = SpatialAttention::build(&mut store, "sa", 2, &SpatialAttentionConfig::default()).unwrap();
        let inputs = block_inputs(uniform(r, &[2, 2, 5, 5], -1.0, 1.0), &store, r);
        push(&mut cases, format!("spatial_attention/{seed}"), t, move || {
            check_gradients(&inputs, |v| spatial_attention(v[0], &p.map(bind(v)), &mut ForwardCtx::new(Mode::Train, 0)), block_opts)
        });
    }
    {
        let mut store = ParamStore::new(seed);
        let p = Residual::build(&mut store, "res", 2).unwrap();
        let inputs = block_inputs(uniform(r, &[3, 2, 4, 4], -1.0, 1.0), &store, r);
        push(&mut cases, format!("residual_block/{seed}"), t, move || {
            check_gradients(&inputs, |v| residual_block(v[0], &p.map(bind(v)), &mut ForwardCtx::new(Mode::Train, 0)), block_opts)
        });
    }
    {
        let mut store = ParamStore::new(seed);
        let p = Granular::build(&mut store, "gfi", 2, 1).unwrap();
        let inputs = block_inputs(uniform(r, &[2, 2, 5, 5], -1.0, 1.0), &store, r);
        push(&mut cases, format!("granular/{seed}"), t, move || {
            check_gradients(&inputs, |v| granular_feature_integration(v[0], &p.map(bind(v)), &mut ForwardCtx::new(Mode::Train, 0)), block_opts)
        });
    }
    cases
}

/// The smallest full model: input 16, two filters per stage.
pub fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_size: 16,
        stem_filters: 2,
        conv_filters: vec![2],
        inception1: InceptionConfig::new(1, 1, 1, 1, 1, 1),
        attention_dropout: 0.0,
        sep_block_filters: vec![2],
        inception2: InceptionConfig::new(1, 1, 1, 1, 1, 1),
        dense_units: 4,
        dropout_rate: 0.0,
        seed,
        ..Default::default()
    }
}

/// Cross-entropy of the tiny model, checked against every parameter tensor.
pub fn end_to_end_case(seed: u64, mode: Mode) -> Case {
    let model = ModelGraph::build(&tiny_model_config(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
    let x = uniform(&mut rng, &[4, 1, 16, 16], 0.0, 1.0);
    let labels: Vec<usize> = (0..4).map(|i| (i + seed as usize) % 4).collect();
    let entries = model.store().entries().to_vec();
    let inputs: Vec<Tensor> = entries.iter().filter(|e| e.trainable).map(|e| jitter(&mut rng, &e.tensor)).collect();
    let name = format!("end_to_end_{}/{seed}", if mode == Mode::Train { "train" } else { "infer" });
    Case {
        name,
        tolerance: MODEL_TOLERANCE,
        run: Box::new(move || {
            let opts = CheckOptions { max_coords: 4, seed, ..Default::default() };
            let report = check_gradients(
                &inputs,
                |v| {
                    let tape = v[0].tape();
                    let mut trainable = v.iter();
                    let vars = entries
                        .iter()
                        .map(|e| if e.trainable { *trainable.next().unwrap() } else { tape.constant(e.tensor.clone()) })
                        .collect();
                    let bound = bfpcnn::params::Bound { vars };
                    let mut ctx = ForwardCtx::new(mode, seed);
                    ctx.dropout = false;
                    let probs = model.forward_var(&bound, tape.constant(x.clone()), &mut ctx)?;
                    cross_entropy_loss(probs, &labels)
                },
                opts,
            )?;
            Ok(report)
        }),
    }
}
