//! Calibrate and run the clipped outer loop, then report the block-averaged
//! stationarity estimates.

use f2csa::outer::{calibrate, run, smoothed_gaps};
use f2csa::{NoiseStream, QuadraticInstance};
use nalgebra::DVector;

fn main() -> f2csa::Result<()> {
    let inst = QuadraticInstance::generate(10, 10, 0, 0.0);
    let (mut outer, penalty) = calibrate(0.2, 0.05, 1.0, 0.0, 1.0)?;
    outer.iterations = 2000;
    outer.instrument_stride = 250;
    println!(
        "D = {:.1e}, eta = {:.1e}, M = {}, K = {}",
        outer.clip_radius,
        outer.eta,
        outer.block_len(),
        outer.blocks()
    );

    let mut f = |x: &DVector<f64>| inst.f_true(x, 1e-10).ok();
    let trace = run(&inst, &outer, &penalty, &NoiseStream::new(0), Some(&mut f))?;
    println!("F(x0) = {:.5}", trace.f_initial.unwrap_or(f64::NAN));
    for row in trace.rows.iter().filter(|r| r.f_true.is_some()) {
        println!("t = {:>4}  F = {:.5}  oracle calls {}", row.t, row.f_true.unwrap(), row.oracle_calls);
    }
    let gaps = smoothed_gaps(&trace, 5);
    for k in [0, gaps.len() / 2, gaps.len() - 1] {
        println!("block {:>3}: smoothed gap {:.4}", k + 1, gaps[k]);
    }
    println!("x_out drawn from block {}", trace.out_block.unwrap_or(0));
    Ok(())
}
