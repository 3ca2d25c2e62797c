//! Validation grid search and transfer of the winner to held-out images.

use rabc_seg::inference::OperatingPoint;
use rabc_seg::opsearch::{grid_search, transfer_protocol, SearchSpace};
use rabc_seg::phantom::{generate, PhantomSpec};

fn main() -> rabc_seg::Result<()> {
    let set = generate(&PhantomSpec {
        n_images: 16,
        size: (96, 96),
        ..Default::default()
    })?;
    let views: Vec<_> = set.val.iter().map(|i| i.views.clone()).collect();
    let gts: Vec<_> = set.val.iter().map(|i| i.gt.clone()).collect();
    let space = SearchSpace {
        taus: (1..20).map(|i| i as f64 / 20.0).collect(),
        ..Default::default()
    };
    let r = grid_search(&views, &gts, &space)?;
    let mut board = r.leaderboard.clone();
    board.sort_by(|a, b| b.objective.total_cmp(&a.objective));
    for row in board.iter().take(5) {
        println!("{:.4}  {:?}", row.objective, row.op);
    }
    println!("selected {:?}", r.best);

    let names: Vec<_> = set.test.iter().map(|i| i.name.clone()).collect();
    let tv: Vec<_> = set.test.iter().map(|i| i.views.clone()).collect();
    let tg: Vec<_> = set.test.iter().map(|i| i.gt.clone()).collect();
    for (label, op) in [("selected", r.best), ("raw-p0", OperatingPoint::raw_p0())] {
        let rep = transfer_protocol(&op, &names, &tv, &tg)?;
        println!(
            "test {label}: jac {:.4}, dice {:.4}",
            rep.aggregate.jac, rep.aggregate.dice
        );
    }
    Ok(())
}
