// temporary convergence probe
use mpcm::data::{generate_scene, SceneConfig};
use mpcm::train::{TrainConfig, Trainer};
use std::time::Instant;

#[test]
#[ignore]
fn probe_overfit_speed() {
    let cfg = SceneConfig {
        size: 64,
        seed: 42,
        ..Default::default()
    };
    let scenes: Vec<_> = (0..8).map(|i| generate_scene(&cfg, i)).collect();
    let tcfg = TrainConfig {
        epochs: 300,
        batch_size: 4,
        crop_size: 64,
        seed: 7,
        ..Default::default()
    };
    let mut trainer = Trainer::new(tcfg).unwrap();
    let t0 = Instant::now();
    for epoch in 0..300 {
        let tl = trainer.train_epoch(&scenes).unwrap();
        let (el, m) = trainer.evaluate(&scenes).unwrap();
        if epoch % 5 == 0 || m.miou >= 0.95 {
            println!(
                "epoch {epoch} train_loss {tl:.4} eval_loss {el:.4} miou {:.4} elapsed {:.1}s",
                m.miou,
                t0.elapsed().as_secs_f64()
            );
        }
        if m.miou >= 0.95 {
            println!("reached 0.95 at epoch {epoch} in {:.1}s", t0.elapsed().as_secs_f64());
            return;
        }
        trainer.epoch += 1;
    }
    panic!("did not reach 0.95");
}
