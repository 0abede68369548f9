//! Finite-difference gradient suite over every primitive, a CBAM block,
//! the SSIM loss and a tiny end-to-end stacked network.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{run_trials, uniform, CheckReport};
use crate::autodiff::{BnState, Graph, Mode, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::SsimParams;
use crate::model::{self, CbamPlacement, NetConfig, ParamVars, PriorSet};

pub const CHECK_NAMES: [&str; 20] = [
    "conv2d",
    "avg_pool_2x2",
    "upsample_nearest_2x",
    "relu",
    "sigmoid",
    "add",
    "mul",
    "scale",
    "concat_channels",
    "dense",
    "global_avg_pool",
    "global_max_pool",
    "channel_mean",
    "channel_max",
    "batch_norm_train",
    "batch_norm_eval",
    "ssim_loss",
    "sum_mean",
    "cbam",
    "stacked_model",
];

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn nchw(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 2, 5), dims(rng, 2, 5)]
}

fn even_nchw(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![dims(rng, 1, 2), dims(rng, 1, 3), 2 * dims(rng, 1, 3), 2 * dims(rng, 1, 3)]
}

fn shaped(rng: &mut ChaCha8Rng, shape: fn(&mut ChaCha8Rng) -> Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let s = shape(rng);
    uniform(rng, &s, lo, hi)
}

/// Shape of `s` with a random subset of axes collapsed to 1.
fn broadcastable(rng: &mut ChaCha8Rng, s: &[usize]) -> Vec<usize> {
    s.iter().map(|&d| if rng.random_bool(0.4) { 1 } else { d }).collect()
}

/// Toy network used for the end-to-end check: 8x8 inputs, 2 levels.
pub fn toy_check_config() -> NetConfig {
    NetConfig {
        levels: 2,
        stem_channels: 2,
        encoder_channels: vec![2, 4],
        cbam_reduction: 2,
        cbam: CbamPlacement::Both,
        priors: PriorSet::Adjacent,
        stacked: true,
        input_size: [8, 8],
    }
}

fn check(name: &str, trials: usize, seed: u64) -> Result<CheckReport> {
    let tag = name.bytes().fold(0u64, |h, b| crate::seed::splitmix64(h ^ b as u64));
    let s = crate::seed::mix(seed, tag);
    match name {
        "conv2d" => run_trials(
            name,
            trials,
            s,
            |r| {
                let (n, cin, cout, h, w) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3), dims(r, 3, 6), dims(r, 3, 6));
                let k = if r.random_bool(0.7) { 3 } else { 5 };
                vec![
                    uniform(r, &[n, cin, h, w], -1.0, 1.0),
                    uniform(r, &[cout, cin, k, k], -1.0, 1.0),
                    uniform(r, &[cout], -1.0, 1.0),
                ]
            },
            |g: &mut Graph<f64>, v: &[Var]| g.conv2d(v[0], v[1], v[2]),
        ),
        "avg_pool_2x2" => run_trials(name, trials, s, |r| vec![shaped(r, even_nchw, -1.0, 1.0)], |g: &mut Graph<f64>, v: &[Var]| {
            g.avg_pool_2x2(v[0])
        }),
        "upsample_nearest_2x" => run_trials(name, trials, s, |r| vec![shaped(r, nchw, -1.0, 1.0)], |g: &mut Graph<f64>, v: &[Var]| {
            g.upsample_nearest_2x(v[0])
        }),
        "relu" => run_trials(name, trials, s, |r| vec![shaped(r, nchw, -1.0, 1.0)], |g: &mut Graph<f64>, v: &[Var]| Ok(g.relu(v[0]))),
        "sigmoid" => run_trials(name, trials, s, |r| vec![shaped(r, nchw, -3.0, 3.0)], |g: &mut Graph<f64>, v: &[Var]| {
            Ok(g.sigmoid(v[0]))
        }),
        "add" | "mul" => {
            let is_add = name == "add";
            run_trials(
                name,
                trials,
                s,
                |r| {
                    let a = nchw(r);
                    let b = broadcastable(r, &a);
                    let (a, b) = if r.random_bool(0.5) { (a, b) } else { (b, a) };
                    vec![uniform(r, &a, -1.0, 1.0), uniform(r, &b, -1.0, 1.0)]
                },
                move |g: &mut Graph<f64>, v: &[Var]| if is_add { g.add(v[0], v[1]) } else { g.mul(v[0], v[1]) },
            )
        }
        "scale" => run_trials(name, trials, s, |r| vec![shaped(r, nchw, -1.0, 1.0)], |g: &mut Graph<f64>, v: &[Var]| {
            Ok(g.scale(v[0], -1.7))
        }),
        "concat_channels" => run_trials(
            name,
            trials,
            s,
            |r| {
                let base = nchw(r);
                (0..dims(r, 1, 3))
                    .map(|_| {
                        let mut sh = base.clone();
                        sh[1] = dims(r, 1, 3);
                        uniform(r, &sh, -1.0, 1.0)
                    })
                    .collect()
            },
            |g: &mut Graph<f64>, v: &[Var]| g.concat_channels(v),
        ),
        "dense" => run_trials(
            name,
            trials,
            s,
            |r| {
                let (n, cin, cout) = (dims(r, 1, 3), dims(r, 1, 5), dims(r, 1, 5));
                let x = if r.random_bool(0.5) { vec![n, cin] } else { vec![n, cin, 1, 1] };
                vec![uniform(r, &x, -1.0, 1.0), uniform(r, &[cout, cin], -1.0, 1.0), uniform(r, &[cout], -1.0, 1.0)]
            },
            |g: &mut Graph<f64>, v: &[Var]| g.dense(v[0], v[1], v[2]),
        ),
        "global_avg_pool" => run_trials(name, trials, s, |r| vec![shaped(r, nchw, -1.0, 1.0)], |g: &mut Graph<f64>, v: &[Var]| {
            g.global_avg_pool(v[0])
        }),
        "global_max_pool" => run_trials(name, trials, s, |r| vec![shaped(r, nchw, -1.0, 1.0)], |g: &mut Graph<f64>, v: &[Var]| {
            g.global_max_pool(v[0])
        }),
        "channel_mean" => run_trials(name, trials, s, |r| vec![shaped(r, nchw, -1.0, 1.0)], |g: &mut Graph<f64>, v: &[Var]| {
            g.channel_mean(v[0])
        }),
        "channel_max" => run_trials(name, trials, s, |r| vec![shaped(r, nchw, -1.0, 1.0)], |g: &mut Graph<f64>, v: &[Var]| {
            g.channel_max(v[0])
        }),
        "batch_norm_train" | "batch_norm_eval" => {
            let mode = if name == "batch_norm_train" { Mode::Train } else { Mode::Eval };
            run_trials(
                name,
                trials,
                s,
                |r| {
                    let sh = nchw(r);
                    let c = sh[1];
                    vec![uniform(r, &sh, -1.0, 1.0), uniform(r, &[c], 0.5, 1.5), uniform(r, &[c], -0.5, 0.5)]
                },
                move |g: &mut Graph<f64>, v: &[Var]| {
                    let c = g.shape(v[0])[1];
                    let mut st = BnState::<f64>::new(c);
                    if mode == Mode::Eval {
                        // Fixed, non-trivial running statistics per channel.
                        for ch in 0..c {
                            st.running_mean[ch] = 0.1 * ch as f64 - 0.05;
                            st.running_var[ch] = 0.6 + 0.3 * ch as f64;
                        }
                    }
                    g.batch_norm(v[0], v[1], v[2], &mut st, mode)
                },
            )
        }
        "ssim_loss" => run_trials(
            name,
            trials,
            s,
            |r| {
                let sh = vec![dims(r, 1, 2), 1, dims(r, 11, 16), dims(r, 11, 16)];
                vec![uniform(r, &sh, 0.0, 1.0), uniform(r, &sh, 0.0, 1.0)]
            },
            |g: &mut Graph<f64>, v: &[Var]| g.ssim_loss(v[0], v[1], &SsimParams::default()),
        ),
        "sum_mean" => run_trials(name, trials, s, |r| vec![shaped(r, nchw, -1.0, 1.0)], |g: &mut Graph<f64>, v: &[Var]| {
            let a = g.sum(v[0]);
            let b = g.mean(v[0]);
            let b = g.scale(b, 3.0);
            g.add(a, b)
        }),
        "cbam" => {
            let cfg = NetConfig { levels: 1, encoder_channels: vec![4], ..toy_check_config() };
            let m: model::Model<f64> = model::init_params(&cfg, s)?;
            let names: Vec<String> = m.params.keys().filter(|k| k.starts_with("s1.unet.enc0.cbam.")).cloned().collect();
            let names2 = names.clone();
            run_trials(
                name,
                trials,
                s,
                move |r| {
                    let mut v: Vec<Tensor<f64>> = names.iter().map(|k| {
                        let shape = m.params[k].shape.clone();
                        uniform(r, &shape, -0.8, 0.8)
                    }).collect();
                    let sh = vec![dims(r, 1, 2), 4, dims(r, 2, 5), dims(r, 2, 5)];
                    v.push(uniform(r, &sh, -1.0, 1.0));
                    v
                },
                move |g: &mut Graph<f64>, v: &[Var]| {
                    let p: ParamVars = names2
                        .iter()
                        .zip(v)
                        .map(|(k, &var)| (k.replace("s1.unet.enc0.cbam", "cb"), var))
                        .collect();
                    model::cbam_forward(g, &p, "cb", v[v.len() - 1])
                },
            )
        }
        "stacked_model" => {
            let cfg = toy_check_config();
            let m: model::Model<f64> = model::init_params(&cfg, s)?;
            let names: Vec<String> = m.params.keys().cloned().collect();
            let n_inputs = cfg.n_inputs();
            let [h, w] = cfg.input_size;
            let base = m.params.clone();
            let bn_template = m.bn.clone();
            let names2 = names.clone();
            run_trials(
                name,
                trials,
                s,
                move |r| {
                    let mut v: Vec<Tensor<f64>> = names
                        .iter()
                        .map(|k| {
                            let t = &base[k];
                            // Jitter around the initialization so each trial
                            // is a distinct point.
                            Tensor {
                                shape: t.shape.clone(),
                                data: t.data.iter().map(|&x| x + r.random_range(-0.1..0.1)).collect(),
                            }
                        })
                        .collect();
                    for _ in 0..n_inputs {
                        v.push(uniform(r, &[1, 1, h, w], 0.0, 1.0));
                    }
                    v
                },
                move |g: &mut Graph<f64>, v: &[Var]| {
                    let np = names2.len();
                    let p: ParamVars = names2.iter().cloned().zip(v[..np].iter().copied()).collect();
                    let mut bn: BTreeMap<String, BnState<f64>> = bn_template.clone();
                    let (_, pred2) = model::stacked_forward(g, &p, &mut bn, &cfg, &v[np..], Mode::Train)?;
                    Ok(pred2)
                },
            )
        }
        other => Err(Error::config("ops", format!("unknown gradient check {other:?}"))),
    }
}

/// Runs the named checks (`"all"` expands to every check).
pub fn gradcheck_suite(ops: &[String], trials: usize, seed: u64) -> Result<Vec<CheckReport>> {
    if trials == 0 {
        return Err(Error::config("trials", "must be at least 1"));
    }
    let names: Vec<String> = if ops.iter().any(|o| o == "all") {
        CHECK_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        ops.to_vec()
    };
    names.iter().map(|n| check(n, trials, seed)).collect()
}
