// temporary calibration probe for the desk-scale experiment
use remamba::adaptation::AdaptationMode;
use remamba::cli::{build_eval_corpus, build_train_corpus, init_model_and_scorer};
use remamba::pipeline::Pipeline;
use remamba::runconfig::RunConfig;
use remamba::ssm::DeltaForm;
use remamba::tasks::evaluate;
use remamba::training::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args[1].parse().unwrap();
    let lr: f64 = args[2].parse().unwrap();
    let key: usize = args[3].parse().unwrap();
    let lens: Vec<usize> = args[4].split(',').map(|s| s.parse().unwrap()).collect();
    let mut cfg = RunConfig::default_desk();
    cfg.tasks.train_instances = steps * 4;
    cfg.tasks.train_lengths = lens.clone();
    cfg.tasks.key_length = key;
    cfg.tasks.eval_instances = 50;
    cfg.seed = 1;

    let corpus = build_train_corpus(&cfg, 1).unwrap();
    let (mut model, mut scorer) = init_model_and_scorer(&cfg, 1).unwrap();
    let tcfg = TrainConfig { learning_rate: lr, epochs: 1, batch_size: 4, seed: 1, ..TrainConfig::default() };
    let t0 = std::time::Instant::now();
    let metrics = train(&mut model, &mut scorer, &corpus, &tcfg, &cfg.compression, AdaptationMode::SelectiveDelta, DeltaForm::Offset, |m| {
        if m.step % 100 == 0 { println!("step {} loss {:.4} ({:.0}s)", m.step, m.loss, t0.elapsed().as_secs_f64()); }
    }).unwrap();
    let late: f64 = metrics[metrics.len().saturating_sub(20)..].iter().map(|m| m.loss).sum::<f64>() / 20.0;
    println!("train: {} steps in {:.0}s, late loss {:.4}", metrics.len(), t0.elapsed().as_secs_f64(), late);

    let mut spec = cfg.compression.clone();
    spec.rel_len = 0.25; spec.ratio = 0.05;
    let pipe = Pipeline::two_stage(model, scorer, spec, AdaptationMode::SelectiveDelta, DeltaForm::Offset);
    let evlens = [*lens.last().unwrap(), 256, 512, 1024];
    let corpus = build_eval_corpus(&cfg, 1, &evlens).unwrap();
    let rep = evaluate(&pipe, &corpus).unwrap();
    for len in evlens {
        println!("eval len {len}: acc {:?}", rep.accuracy("passkey", len));
    }
}
