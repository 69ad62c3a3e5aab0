// scratch probe (not committed)
use cfot::coupling::{independent_batch, markovian_batch, ConditionalSource, FlowView, PriorConfig};
use cfot::dgp::{gen_dataset, DgpConfig, DgpSampler, GraphVariant, PriorVariant, Split};
use cfot::field::FieldKind;
use cfot::rng::{substream, Domain};
use cfot::trainer::{fm_loss, init_model};
use std::time::Instant;

fn main() {
    let config = DgpConfig::new(GraphVariant::Markovian, PriorVariant::Original, 4000, 5).unwrap();
    let ds = gen_dataset(&config);
    let rows = ds.split_vec(Split::Train);
    let prior = PriorConfig::uniform(2);
    let model = init_model(FieldKind::Direct, FlowView::XGivenPa, 256, 3, 1).unwrap();
    let mut rng = substream(1, Domain::TrainBatch, 0);

    let t0 = Instant::now();
    let mut batches = Vec::new();
    for _ in 0..50 {
        batches.push(independent_batch(&mut rng, 256, &rows, FlowView::XGivenPa, &prior).unwrap().0);
    }
    println!("independent batch draw: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / 50.0);

    let sampler = DgpSampler::new(&config);
    let t0 = Instant::now();
    for _ in 0..50 {
        let _ = markovian_batch(&mut rng, 256, &ConditionalSource::Simulator(&sampler), &prior).unwrap();
    }
    println!("markovian batch draw (incl assignment): {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / 50.0);

    let t: Vec<f64> = (0..256).map(|i| i as f64 / 256.0).collect();
    let t0 = Instant::now();
    for b in &batches {
        let _ = fm_loss(&model, b, &t).unwrap();
    }
    println!("fm_loss (fwd+bwd+grads): {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / 50.0);

    // energy kind
    let emodel = init_model(FieldKind::Energy, FlowView::XGivenPa, 256, 3, 1).unwrap();
    let t0 = Instant::now();
    for b in batches.iter().take(20) {
        let _ = fm_loss(&emodel, b, &t).unwrap();
    }
    println!("fm_loss energy: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / 20.0);

    let mut opt = cfot::nn::AdamW::new(model.params.len());
    let mut params = model.params.clone();
    let (_, grads) = fm_loss(&model, &batches[0], &t).unwrap();
    let t0 = Instant::now();
    for _ in 0..100 {
        opt.step(&mut params, &grads).unwrap();
    }
    println!("adamw step: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / 100.0);
}
