// scratch probe (not committed)
use cfot::coupling::{FlowView, PriorConfig, Scheme};
use cfot::dgp::{gen_dataset, DgpConfig, GraphVariant, PriorVariant, Split};
use cfot::field::FieldKind;
use cfot::trainer::{init_model, train, TrainConfig, TrainContext};

fn main() {
    let config = DgpConfig::new(GraphVariant::Markovian, PriorVariant::Original, 4000, 5).unwrap();
    let ds = gen_dataset(&config);
    let train_rows = ds.split_vec(Split::Train);
    let val_rows = ds.split_vec(Split::Val);
    let ctx = TrainContext {
        dgp_config: &config,
        train_rows: &train_rows,
        val_rows: &val_rows,
        view: FlowView::XGivenPa,
        prior: PriorConfig::uniform(2),
    };
    for scheme in [Scheme::Independent, Scheme::MarkovianOt] {
        for seed in [1u64, 2, 3] {
            let cfg = TrainConfig {
                steps: 2001,
                batch: 256,
                eval_every: 0,
                ..TrainConfig::default_desk(scheme, seed)
            };
            let model = init_model(FieldKind::Direct, FlowView::XGivenPa, 256, 3, seed).unwrap();
            let out = train(&cfg, &ctx, model).unwrap();
            let losses: Vec<f64> = out.log.iter().map(|r| r.loss).take(1000).collect();
            let w: Vec<f64> = losses.chunks(100).map(|c| c.iter().sum::<f64>() / 100.0).collect();
            let dec = w.windows(2).all(|p| p[1] < p[0]);
            println!("{scheme:?} seed {seed}: dec={dec} {w:.1?}");
        }
    }
}
