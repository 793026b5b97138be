//! Trains the requested modes on a dataset for the given seeds and prints
//! pre-trained and adapted unlabeled-target accuracy.
//!
//! `cargo run --release -p s3d-core --example compare_modes -- [--spec spec.json] [--modes s-plus-t,s3d] [--trace] 0 1 2`

use std::time::Instant;

use s3d_core::analysis::evaluate;
use s3d_core::datagen::{build_dataset, DomainSpec};
use s3d_core::selection::average_margin;
use s3d_core::trainer::{adapt_from, init_model, pretrain, Mode, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = DomainSpec::default();
    let mut modes = vec![Mode::SPlusT, Mode::S3dNoAf, Mode::S3d];
    let mut seeds = Vec::new();
    let mut trace = false;
    let mut args = std::env::args().skip(1);
    while let Some(arg) = args.next() {
        match arg.as_str() {
            "--spec" => spec = serde_json::from_str(&std::fs::read_to_string(args.next().ok_or("--spec needs a path")?)?)?,
            "--modes" => {
                modes = args
                    .next()
                    .ok_or("--modes needs a list")?
                    .split(',')
                    .map(|m| serde_json::from_str(&format!("\"{m}\"")))
                    .collect::<Result<_, _>>()?
            }
            "--trace" => trace = true,
            s => seeds.push(s.parse::<u64>()?),
        }
    }
    if seeds.is_empty() {
        seeds.push(0);
    }
    for seed in seeds {
        let spec = DomainSpec { seed, ..spec.clone() };
        let data = build_dataset(&spec, "source", "target", 3, 10)?;
        let truth = data.unlabeled_with_truth();
        let base = TrainConfig { seed, ..TrainConfig::default() };
        let t = Instant::now();
        let pre = pretrain(init_model(&data, &base)?, data.training_view(), &base)?;
        let margin = average_margin(&pre.best.model, &data.target_unlabeled)?;
        let pre_acc = evaluate(&pre.best.model, &truth)?;
        let src_acc = evaluate(&pre.best.model, &data.source)?;
        let mut line = format!(
            "seed {seed} src {src_acc:.3} pre {pre_acc:.3} ({} it, {:.0}s, margin {margin:.2})",
            pre.iterations_run,
            t.elapsed().as_secs_f64()
        );
        for &mode in &modes {
            let t = Instant::now();
            let cfg = TrainConfig { mode, ..base.clone() };
            let run = adapt_from(&data, &cfg, pre.best.clone(), margin, None)?;
            let acc = evaluate(&run.adapted.best.model, &truth)?;
            let prec = run.adapted.records.last().and_then(|r| r.pseudo_label_precision).unwrap_or(f64::NAN);
            let size = run.adapted.records.last().map_or(0, |r| r.student_set_size);
            line += &format!(
                " | {} {acc:.3} ({} it, {:.0}s, |S| {size} prec {prec:.2})",
                mode.as_str(),
                run.adapted.iterations_run,
                t.elapsed().as_secs_f64()
            );
            if trace {
                for r in &run.adapted.records {
                    println!(
                        "  {} it {:5} val {:.2} |S| {:3} prec {:.3} L_lab {:.3} L_unl {:.3} L_pair {:.3}",
                        mode.as_str(),
                        r.iteration,
                        r.val_acc,
                        r.student_set_size,
                        r.pseudo_label_precision.unwrap_or(f64::NAN),
                        r.losses.labeled,
                        r.losses.unlabeled,
                        r.losses.pair
                    );
                }
            }
        }
        println!("{line}");
    }
    Ok(())
}
