// Scratch calibration harness (not part of the library surface): trains
// the micro detector on the default benchmark and prints mAP numbers.

use std::time::Instant;

use mvcd::datagen::{apply_split, default_spec, generate, old_train_view, SplitMode, SplitProtocol};
use mvcd::evalkit::evaluate_model;
use mvcd::trainer::{train_incremental, train_old, LossSwitches, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(100);
    let n_train: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(100);
    let n_test: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(60);
    let lr_incr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.0003);
    let objects_max: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(3);

    let mut train_spec = default_spec(seed, n_train);
    train_spec.objects_per_image = [1, objects_max];
    let mut test_spec = default_spec(seed ^ 0x9E3779B9, n_test);
    test_spec.objects_per_image = [1, objects_max];
    let train_ds = generate(&train_spec).unwrap();
    let test_ds = generate(&test_spec).unwrap();
    let protocol = SplitProtocol {
        mode: SplitMode::AtOnce,
        old_classes: vec!["circle".into(), "square".into(), "triangle".into()],
        increments: vec![vec!["cross".into(), "ring".into(), "bar".into()]],
    };
    let cfg = TrainConfig {
        seed,
        lr_incr,
        ..TrainConfig::default()
    };

    let old_view = old_train_view(&train_ds, &protocol).unwrap();
    println!(
        "train {} images ({} old-view), test {} images",
        train_ds.len(),
        old_view.len(),
        test_ds.len()
    );

    let t0 = Instant::now();
    let old = train_old(&old_view, &protocol.old_classes, &cfg).unwrap();
    println!("train_old: {:.1}s", t0.elapsed().as_secs_f64());
    for rec in old.log.iter().step_by(5) {
        println!(
            "  epoch {:>2} frcnn {:.4} lr {}",
            rec.epoch, rec.mean_frcnn, rec.lr
        );
    }
    let (_, test_view) = apply_split(&test_ds, &protocol, 0).unwrap();
    let pre = evaluate_model(&old.params, &test_view, &protocol.old_classes).unwrap();
    println!("old model, old-class mAP: {:.3}", pre.map);
    for (c, ap) in &pre.per_class_ap {
        println!("  {c}: {ap:.3}");
    }

    let (incr_view, _) = apply_split(&train_ds, &protocol, 0).unwrap();
    println!("incremental view: {} images", incr_view.len());

    let dout_only = LossSwitches {
        dcc: false,
        dpc: false,
        dic: false,
        ..LossSwitches::default()
    };
    for (label, switches) in [
        ("mvcd", LossSwitches::default()),
        ("fine-tuning", LossSwitches::fine_tuning()),
        ("dout-only", dout_only),
        ("dout+dcc", LossSwitches { dcc: true, ..dout_only }),
        ("dout+dpc", LossSwitches { dpc: true, ..dout_only }),
        ("dout+dic", LossSwitches { dic: true, ..dout_only }),
    ] {
        let t1 = Instant::now();
        let incr =
            train_incremental(&old.params, &incr_view, &train_ds.class_names, &cfg, &switches)
                .unwrap();
        let report = evaluate_model(&incr.params, &test_view, &test_ds.class_names).unwrap();
        let old_map = report.mean_ap_over(&protocol.old_classes);
        let new_map = report.mean_ap_over(&protocol.increments[0]);
        println!(
            "{label}: {:.1}s  old mAP {:.3}  new mAP {:.3}  all {:.3}",
            t1.elapsed().as_secs_f64(),
            old_map,
            new_map,
            report.map
        );
        if label == "mvcd" {
            let last = incr.log.last().unwrap();
            println!(
                "  losses at last epoch: frcnn {:.4} dout {:.4} dcc {:.4} dpc {:.4} dic {:.4}",
                last.mean_frcnn, last.mean_dout, last.mean_dcc, last.mean_dpc, last.mean_dic
            );
        }
    }
}
