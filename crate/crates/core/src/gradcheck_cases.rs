use crate::autograd::{l2_normalize, standardize, Tensor};
use crate::distill::{distill_contrastive, distill_cross_correlation, distill_mse, distill_prototype_ce};
use crate::eval::probe_loss;
use crate::ewc::{ewc_penalty, FisherDiagonal};
use crate::gradcheck::{check_default, random_tensor, rng, CaseFn, Input};
use crate::losses::{
    barlow_twins_loss, infonce_loss, negative_cosine_loss, prototype_ce_loss, sinkhorn_assignments, LossConfig,
};
use crate::nn::BoundMlp;

const N: usize = 6;
const D: usize = 5;
const H: usize = 8;
const K: usize = 4;

fn positive(shape: &[usize], r: &mut impl rand::Rng) -> Tensor {
    random_tensor(shape, r).map(|v| v.abs() + 0.5)
}

/// Predictor parameters `d → H → d` as the first four inputs.
fn predictor_inputs(r: &mut impl rand::Rng) -> Vec<Input> {
    vec![
        Input::param(random_tensor(&[D, H], r)),
        Input::param(random_tensor(&[H], r).map(|v| v * 0.1)),
        Input::param(random_tensor(&[H, D], r)),
        Input::param(random_tensor(&[D], r).map(|v| v * 0.1)),
    ]
}

pub(crate) fn cases() -> Vec<(&'static str, CaseFn)> {
    let cfg = LossConfig { temperature: 0.5, ..Default::default() };
    let mut v: Vec<(&'static str, CaseFn)> = Vec::new();

    v.push((
        "add/sub broadcast",
        Box::new(|s| {
            let mut r = rng(s);
            let ins = [Input::param(random_tensor(&[N, D], &mut r)), Input::param(random_tensor(&[1, D], &mut r))];
            check_default(&ins, |g, x| {
                let a = g.add(x[0], x[1])?;
                let b = g.sub(a, x[1])?;
                let c = g.mul(a, b)?;
                g.sum(c, None)
            })
        }),
    ));
    v.push((
        "mul/div",
        Box::new(|s| {
            let mut r = rng(s);
            let ins = [Input::param(random_tensor(&[N, D], &mut r)), Input::param(positive(&[N, 1], &mut r))];
            check_default(&ins, |g, x| {
                let a = g.div(x[0], x[1])?;
                let b = g.mul(a, x[0])?;
                g.sum(b, None)
            })
        }),
    ));
    v.push((
        "matmul/transpose",
        Box::new(|s| {
            let mut r = rng(s);
            let ins = [Input::param(random_tensor(&[N, D], &mut r)), Input::param(random_tensor(&[N, D], &mut r))];
            check_default(&ins, |g, x| {
                let bt = g.transpose(x[1])?;
                let m = g.matmul(x[0], bt)?;
                let m2 = g.pow2(m);
                g.mean(m2, None)
            })
        }),
    ));
    v.push((
        "exp/log/sqrt",
        Box::new(|s| {
            let mut r = rng(s);
            let ins = [Input::param(positive(&[N, D], &mut r))];
            check_default(&ins, |g, x| {
                let a = g.log(x[0])?;
                let b = g.sqrt(x[0])?;
                let c = g.exp(a)?;
                let d = g.mul(b, c)?;
                let e = g.neg(d);
                g.sum(e, None)
            })
        }),
    ));
    v.push((
        "relu",
        Box::new(|s| {
            let mut r = rng(s);
            // keep entries away from the kink
            let x = random_tensor(&[N, D], &mut r).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            check_default(&[Input::param(x)], |g, x| {
                let a = g.relu(x[0]);
                let b = g.pow2(a);
                g.sum(b, None)
            })
        }),
    ));
    v.push((
        "sum/mean axes",
        Box::new(|s| {
            let mut r = rng(s);
            check_default(&[Input::param(random_tensor(&[N, D], &mut r))], |g, x| {
                let a = g.sum(x[0], Some(0))?;
                let b = g.mean(x[0], Some(1))?;
                let a2 = g.pow2(a);
                let b2 = g.pow2(b);
                let sa = g.sum(a2, None)?;
                let sb = g.sum(b2, None)?;
                g.add(sa, sb)
            })
        }),
    ));
    v.push((
        "concat/slice",
        Box::new(|s| {
            let mut r = rng(s);
            let ins = [Input::param(random_tensor(&[N, D], &mut r)), Input::param(random_tensor(&[2, D], &mut r))];
            check_default(&ins, |g, x| {
                let c = g.concat(&[x[0], x[1]], 0)?;
                let sl = g.slice(c, 0, 3, N - 1)?;
                let sq = g.pow2(sl);
                g.sum(sq, None)
            })
        }),
    ));
    v.push((
        "l2_normalize",
        Box::new(|s| {
            let mut r = rng(s);
            let ins = [Input::param(random_tensor(&[N, D], &mut r)), Input::constant(random_tensor(&[N, D], &mut r))];
            check_default(&ins, |g, x| {
                let n = l2_normalize(g, x[0], 1)?;
                let m = g.mul(n, x[1])?;
                g.sum(m, None)
            })
        }),
    ));
    v.push((
        "standardize",
        Box::new(|s| {
            let mut r = rng(s);
            let ins = [Input::param(random_tensor(&[N, D], &mut r)), Input::constant(random_tensor(&[N, D], &mut r))];
            check_default(&ins, |g, x| {
                let n = standardize(g, x[0], 0)?;
                let m = g.mul(n, x[1])?;
                g.sum(m, None)
            })
        }),
    ));

    let c = cfg.clone();
    v.push((
        "ssl: infonce",
        Box::new(move |s| {
            let mut r = rng(s);
            let ins = [Input::param(random_tensor(&[N, D], &mut r)), Input::param(random_tensor(&[N, D], &mut r))];
            check_default(&ins, |g, x| infonce_loss(g, x[0], x[1], None, &c))
        }),
    ));
    let c = cfg.clone();
    v.push((
        "ssl: barlow twins",
        Box::new(move |s| {
            let mut r = rng(s);
            let ins = [Input::param(random_tensor(&[N, D], &mut r)), Input::param(random_tensor(&[N, D], &mut r))];
            check_default(&ins, |g, x| barlow_twins_loss(g, x[0], x[1], &c))
        }),
    ));
    v.push((
        "ssl: negative cosine",
        Box::new(|s| {
            let mut r = rng(s);
            let ins = [Input::param(random_tensor(&[N, D], &mut r)), Input::constant(random_tensor(&[N, D], &mut r))];
            check_default(&ins, |g, x| negative_cosine_loss(g, x[0], x[1]))
        }),
    ));
    let c = cfg.clone();
    v.push((
        "ssl: prototype cross-entropy",
        Box::new(move |s| {
            let mut r = rng(s);
            let codes = sinkhorn_assignments(&random_tensor(&[N, K], &mut r), &c)?;
            let ins = [Input::param(random_tensor(&[N, D], &mut r)), Input::param(random_tensor(&[K, D], &mut r))];
            check_default(&ins, |g, x| prototype_ce_loss(g, x[0], &codes, x[1], &c))
        }),
    ));

    let c = cfg.clone();
    v.push((
        "distill: contrastive",
        Box::new(move |s| {
            let mut r = rng(s);
            let mut ins = predictor_inputs(&mut r);
            ins.push(Input::param(random_tensor(&[N, D], &mut r)));
            ins.push(Input::constant(random_tensor(&[N, D], &mut r)));
            check_default(&ins, |g, x| {
                let p = BoundMlp::from_vars(&x[..4], false);
                distill_contrastive(g, x[4], x[5], Some(&p), None, &c)
            })
        }),
    ));
    v.push((
        "distill: mse",
        Box::new(|s| {
            let mut r = rng(s);
            let mut ins = predictor_inputs(&mut r);
            ins.push(Input::param(random_tensor(&[N, D], &mut r)));
            ins.push(Input::constant(random_tensor(&[N, D], &mut r)));
            check_default(&ins, |g, x| {
                let p = BoundMlp::from_vars(&x[..4], false);
                distill_mse(g, x[4], x[5], Some(&p))
            })
        }),
    ));
    let c = cfg.clone();
    v.push((
        "distill: prototype cross-entropy",
        Box::new(move |s| {
            let mut r = rng(s);
            let mut ins = predictor_inputs(&mut r);
            ins.push(Input::param(random_tensor(&[N, D], &mut r)));
            ins.push(Input::constant(random_tensor(&[N, D], &mut r)));
            ins.push(Input::constant(random_tensor(&[K, D], &mut r)));
            check_default(&ins, |g, x| {
                let p = BoundMlp::from_vars(&x[..4], false);
                distill_prototype_ce(g, x[4], x[5], Some(&p), x[6], &c)
            })
        }),
    ));
    let c = cfg.clone();
    v.push((
        "distill: cross-correlation",
        Box::new(move |s| {
            let mut r = rng(s);
            let mut ins = predictor_inputs(&mut r);
            ins.push(Input::param(random_tensor(&[N, D], &mut r)));
            ins.push(Input::constant(random_tensor(&[N, D], &mut r)));
            check_default(&ins, |g, x| {
                let p = BoundMlp::from_vars(&x[..4], false);
                distill_cross_correlation(g, x[4], x[5], Some(&p), &c)
            })
        }),
    ));

    v.push((
        "ewc penalty",
        Box::new(|s| {
            let mut r = rng(s);
            let shapes: [&[usize]; 2] = [&[D, H], &[H]];
            let fisher = FisherDiagonal::new(
                shapes.iter().map(|sh| positive(sh, &mut r)).collect(),
                shapes.iter().map(|sh| random_tensor(sh, &mut r)).collect(),
            )?;
            let ins: Vec<Input> = shapes.iter().map(|sh| Input::param(random_tensor(sh, &mut r))).collect();
            check_default(&ins, |g, x| ewc_penalty(g, x, &fisher, 0.7))
        }),
    ));
    v.push((
        "probe loss",
        Box::new(|s| {
            let mut r = rng(s);
            let mut targets = Tensor::zeros(&[N, K]);
            for i in 0..N {
                targets.data_mut()[i * K + (i + s as usize) % K] = 1.0;
            }
            let ins = [
                Input::constant(random_tensor(&[N, D], &mut r)),
                Input::param(random_tensor(&[D, K], &mut r)),
                Input::param(random_tensor(&[K], &mut r)),
            ];
            check_default(&ins, |g, x| probe_loss(g, x[0], x[1], x[2], &targets))
        }),
    ));
    v
}
