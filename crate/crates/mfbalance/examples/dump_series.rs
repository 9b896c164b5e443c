// scratch: dump composite + estimates for cross-validation
use mfbalance::fractal::{mfdfa, QGrid, ScalePlan};
use mfbalance::traffic::{gen_fgn, Series};

fn main() {
    let n = 1 << 16;
    // composite with fixed knobs, mirroring the calibrate() construction
    let g = gen_fgn(0.55, n, 12345).unwrap();
    let mut mask = mfbalance::traffic::debug_block_capped_mask(1.4, 0.9, 256, n, 999);
    for (m, gv) in mask.iter_mut().zip(g.values()) {
        *m *= (1.0 + 0.7 * gv).max(0.0);
    }
    let mut out = String::new();
    for v in &mask {
        out.push_str(&format!("{v:.17e}\n"));
    }
    std::fs::write("/tmp/composite.txt", out).unwrap();
    let grid = QGrid::default_grid();
    let plan = ScalePlan::for_length(n).unwrap();
    let est = mfdfa(&Series::new(mask), &grid, &plan).unwrap();
    println!("rust composite: H={:.4} dh={:.4}", est.h, est.dh);
    for (q, h) in est.hq_samples() {
        println!("  q={q}: h={h:.4}");
    }
}
