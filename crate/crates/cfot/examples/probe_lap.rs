// scratch probe (not committed)
use cfot::coupling::{solve_assignment, PriorConfig};
use cfot::dgp::{DgpConfig, DgpSampler, GraphVariant, PriorVariant};
use cfot::rng::{substream, Domain};
use ndarray::Array2;
use rand::Rng;
use std::time::Instant;

fn main() {
    let mut rng = substream(1, Domain::Probe, 0);
    // iid uniform costs
    let c: Array2<f64> = Array2::from_shape_fn((256, 256), |_| rng.random::<f64>());
    let t0 = Instant::now();
    for _ in 0..20 { let _ = solve_assignment(&c).unwrap(); }
    println!("uniform-cost solve: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / 20.0);

    // realistic coupling costs: prior cluster vs data cluster
    let config = DgpConfig::new(GraphVariant::Markovian, PriorVariant::Original, 1, 0).unwrap();
    let sampler = DgpSampler::new(&config);
    let prior = PriorConfig::uniform(2);
    let parents = sampler.draw_parents(&mut rng);
    let u = prior.draw_batch(256, &mut rng);
    let mut x = Array2::zeros((256, 2));
    for i in 0..256 {
        let xi = sampler.sample_conditional(&parents, &mut rng);
        x[[i, 0]] = xi[0]; x[[i, 1]] = xi[1];
    }
    let cost = Array2::from_shape_fn((256, 256), |(i, j)| {
        let d0: f64 = u[[i, 0]] - x[[j, 0]]; let d1: f64 = u[[i, 1]] - x[[j, 1]]; d0 * d0 + d1 * d1
    });
    let t0 = Instant::now();
    for _ in 0..20 { let _ = solve_assignment(&cost).unwrap(); }
    println!("coupling-cost solve: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / 20.0);
    println!("cost range: {:.3} .. {:.3}", cost.iter().fold(f64::INFINITY, |a, &b| a.min(b)), cost.iter().fold(0.0f64, |a, &b| a.max(b)));
}
