use tokentrace::sim::{Phase, VictimScript};
use tokentrace::trace::Vocabulary;

#[path = "../tests/common/mod.rs"]
mod common;

fn word_vocab(size: usize) -> Vocabulary {
    Vocabulary::new((0..size).map(|i| format!("w{i} ")).collect()).unwrap()
}

fn main() {
    let vocab = word_vocab(512);
    for p in [0.1, 0.2] {
        let mut fp = common::PrCounts::default();
        let mut gap_markers = common::PrCounts::default();
        let mut gap_runs = common::PrCounts::default();
        let mut sessions = 0;
        for seed in 0..30u64 {
            let script = VictimScript {
                input_tokens: (0..20).collect(),
                output_tokens: (0..250).map(|i| 20 + (i % 400)).collect(),
                tpot: 0.01,
                sigma: 0.08,
                p_fp: p,
                p_fn: p,
                prefill_spread: 0.005,
                batch: 256,
                seed: 1000 + seed,
            };
            let Some(session) = common::classify_session(&script, &vocab) else { continue };
            sessions += 1;
            fp.add(common::grade_fp_flags(&session));
            let gaps = common::grade_gaps(&session);
            gap_markers.add(gaps.markers);
            gap_runs.add(gaps.runs);
        }
        println!(
            "p={p}: sessions={sessions} gaps r/p = {:.3}/{:.3}  fps r/p = {:.3}/{:.3}",
            gap_runs.recall(),
            gap_markers.precision(),
            fp.recall(),
            fp.precision()
        );
    }
    let _ = Phase::Decode;
}
