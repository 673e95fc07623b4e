use std::time::Instant;

use rmapf_core::env::Obs;
use rmapf_core::net::{
    backward_into, backward_into_prepared, forward, head_grad_for, init_params,
    input_gradient_from_trace, input_gradient_prepared, NetGrads, Prepared, ScalarLoss,
};
use rmapf_core::rng;

fn main() {
    let params = init_params(0);
    let prep = Prepared::new(&params);
    let mut r = rng::stream(&[1]);
    let obs: Vec<Obs> = (0..64)
        .map(|_| {
            let mut o = Obs::zeros();
            for v in o.data.iter_mut() {
                *v = rng::unit_f32(&mut r);
            }
            o
        })
        .collect();

    let n = 4000;

    // Consistency: prepared and plain paths agree closely.
    for o in obs.iter().take(8) {
        let (out, trace) = forward(&params, o);
        let mut head = head_grad_for(&out, &ScalarLoss::CrossEntropy { target: 1 });
        head.dvalue = 0.5;
        let a = input_gradient_from_trace(&params, &trace, &head);
        let b = input_gradient_prepared(&prep, &params, &trace, &head);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()), "{x} vs {y}");
        }
        let mut g1 = NetGrads::zeros();
        let mut g2 = NetGrads::zeros();
        backward_into(&params, &trace, &head, &mut g1);
        backward_into_prepared(&prep, &params, &trace, &head, &mut g2);
        for (x, y) in g1.flat().iter().zip(g2.flat().iter()) {
            assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }
    println!("prepared paths agree");

    let t0 = Instant::now();
    let mut grads = NetGrads::zeros();
    for i in 0..n {
        let (out, trace) = forward(&params, &obs[i % 64]);
        let mut head = head_grad_for(&out, &ScalarLoss::CrossEntropy { target: 1 });
        head.dvalue = 1.0;
        backward_into_prepared(&prep, &params, &trace, &head, &mut grads);
    }
    println!("fwd+bwd prepared: {:.1} us/sample", t0.elapsed().as_secs_f64() / n as f64 * 1e6);

    let t0 = Instant::now();
    let mut z = 0.0f32;
    for i in 0..n {
        let (out, trace) = forward(&params, &obs[i % 64]);
        let head = head_grad_for(&out, &ScalarLoss::CrossEntropy { target: 1 });
        let g = input_gradient_prepared(&prep, &params, &trace, &head);
        z += g[0];
    }
    println!(
        "fwd+inputgrad prepared: {:.1} us/sample ({z})",
        t0.elapsed().as_secs_f64() / n as f64 * 1e6
    );
}
