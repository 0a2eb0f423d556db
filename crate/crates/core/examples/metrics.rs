//! Scores a few predicted masks against a target and round-trips one
//! through run-length encoding.
//!
//! ```bash
//! cargo run --release --example metrics
//! ```

use refseg3d::metrics::{iou, rle_decode, rle_encode, EvalResult};

fn main() -> refseg3d::Result<()> {
    let n = 40;
    let gt: Vec<bool> = (0..n).map(|i| (10..20).contains(&i)).collect();
    let preds: Vec<(&str, Vec<bool>)> = vec![
        ("exact", gt.clone()),
        ("shifted by 3", (0..n).map(|i| (13..23).contains(&i)).collect()),
        ("half", (0..n).map(|i| (10..15).contains(&i)).collect()),
        ("everything", vec![true; n]),
        ("nothing", vec![false; n]),
    ];
    for (name, p) in &preds {
        println!("{name:13} IoU {:.3}", iou(p, &gt)?);
    }
    let report = EvalResult::score(preds.iter().map(|(_, p)| (p.as_slice(), gt.as_slice())))?;
    println!("mIoU {:.3}, acc@0.25 {:.2}, acc@0.5 {:.2}", report.miou, report.acc(0.25), report.acc(0.5));

    let runs = rle_encode(&preds[1].1);
    println!("run lengths of the shifted mask: {runs:?}");
    assert_eq!(rle_decode(&runs, n)?, preds[1].1);
    Ok(())
}
