//! Print the stage schedule of every training paradigm: which parameter
//! groups are frozen and which heads produce loss in each stage.

use roadnet::trainer::stage_plan;
use roadnet::Paradigm;

fn main() {
    for p in Paradigm::ALL {
        println!("{} ({} stage(s)):", p.name(), p.num_stages());
        for (i, stage) in stage_plan(p).iter().enumerate() {
            let frozen: Vec<_> = stage.frozen.iter().map(|g| g.name()).collect();
            let heads: Vec<_> = stage.heads.iter().map(|h| h.name()).collect();
            println!(
                "  stage {}: frozen [{}], loss heads [{}]",
                i,
                frozen.join(", "),
                heads.join(", ")
            );
        }
    }
}
